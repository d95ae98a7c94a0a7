"""Experiment configuration: a TOML file read as flat dotted keys.

Tables and dotted keys are interchangeable, so ``[evolution]\\nnum_islands = 2``
and ``evolution.num_islands = 2`` mean the same thing.  Every key is checked
against ``SCHEMA``; unknown keys and wrong types are configuration errors.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import admm, dsl, tasks, vmsched
from .evolve import EvolutionConfig
from .fitness import ADMM_PENALTY, SCHEDULE, PenaltyInstance, ScheduleInstance, TaskDescriptor
from .generator import GeneratorEndpoint


class ConfigError(ValueError):
    pass


_NUM = (int, float)
_LIST = (list,)

# key -> (accepted types, default)
SCHEMA: dict[str, tuple[tuple[type, ...], Any]] = {
    "seed": ((int,), 0),
    "output_dir": ((str,), "evoopt-out"),

    **{f"evolution.{f.name}": ((int,) if f.type in (int, "int") else _NUM, f.default)
       for f in fields(EvolutionConfig) if f.name != "master_seed"},
    "evolution.checkpoint_every": ((int,), 5),
    "evolution.seed_programs": (_LIST, None),
    "evolution.max_generator_failures": ((int,), 3),

    "task.domain": ((str,), SCHEDULE),
    "task.description": ((str,), None),
    "task.parsimony_weight": (_NUM, 0.01),
    "task.aggregation": ((str,), "mean"),
    "task.num_probes": ((int,), 3),
    "task.util_mode": ((str,), "mean"),
    "task.beta_min": (_NUM, 1e-6),
    "task.beta_max": (_NUM, 1e6),
    "task.update_period": ((int,), 1),
    "task.traces": (_LIST, None),
    "task.problems": (_LIST, None),
    "task.synthetic_seeds": (_LIST, None),
    "task.beta0": (_NUM, 1.0),
    "task.tol_abs": (_NUM, 1e-6),
    "task.tol_rel": (_NUM, 1e-4),
    "task.max_iter": ((int,), 1000),

    "workload.num_servers": ((int,), tasks.TraceFamily.num_servers),
    "workload.cap_cpu": ((int,), tasks.TraceFamily.cap_cpu),
    "workload.cap_mem": ((int,), tasks.TraceFamily.cap_mem),
    "workload.cpu_choices": (_LIST, list(tasks.TraceFamily.cpu_choices)),
    "workload.mem_choices": (_LIST, list(tasks.TraceFamily.mem_choices)),
    "workload.lifetime_p": (_NUM, tasks.TraceFamily.lifetime_p),
    "workload.n_creates": ((int,), tasks.TraceFamily.n_creates),

    "problems.kind": ((str,), "lasso"),
    "problems.m": ((int,), 30),
    "problems.n": ((int,), 40),
    "problems.condition": (_NUM, 30.0),
    "problems.lambda_ratio": (_NUM, 0.1),
    "problems.lambda2": (_NUM, 0.1),

    "generator.kind": ((str,), "mock"),
    "generator.base_url": ((str,), None),
    "generator.model_name": ((str,), "default"),
    "generator.timeout": (_NUM, 60.0),
    "generator.max_retries": ((int,), 3),
    "generator.temperature": (_NUM, 0.8),
    "generator.backoff_base": (_NUM, 1.0),
    "generator.max_concurrent": ((int,), 2),
    "generator.requests_per_minute": (_NUM, 30.0),

    "simulate.policies": (_LIST, ["best_fit", "first_fit"]),
    "simulate.traces": (_LIST, None),
    "simulate.synthetic_seeds": (_LIST, None),
    "simulate.num_servers": (_LIST, None),
    "simulate.util_mode": ((str,), "mean"),

    "solve.strategies": (_LIST, ["fixed", "residual_balancing"]),
    "solve.problems": (_LIST, None),
    "solve.synthetic_seeds": (_LIST, None),
    "solve.beta0": (_NUM, 1.0),
    "solve.tol_abs": (_NUM, 1e-6),
    "solve.tol_rel": (_NUM, 1e-4),
    "solve.max_iter": ((int,), 1000),
    "solve.mu": (_NUM, 10.0),
    "solve.eta": (_NUM, 2.0),
    "solve.beta_min": (_NUM, 1e-6),
    "solve.beta_max": (_NUM, 1e6),
    "solve.update_period": ((int,), 1),
}

PATH_KEYS = ("task.traces", "task.problems", "simulate.traces", "solve.problems")


def _flatten(table: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


@dataclass
class Config:
    values: dict[str, Any]
    base_dir: Path

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        pre = name + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}


def parse_config(text: str, base_dir: Path = Path("."), overrides: dict | None = None) -> Config:
    try:
        raw = _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (types, default) in SCHEMA.items():
        v = raw.get(key, default)
        if v is not None and key in raw:
            ok = isinstance(v, types) and not (isinstance(v, bool) and bool not in types)
            if not ok:
                raise ConfigError(f"{key}: expected {'/'.join(t.__name__ for t in types)}, got {v!r}")
            if types == _NUM:
                v = float(v)
        values[key] = v
    for key in PATH_KEYS:
        if values[key] is not None:
            values[key] = [str((base_dir / p).resolve()) if not Path(p).is_absolute() else p for p in values[key]]
    return Config(values, base_dir)


def load_config(path: str | Path, overrides: dict | None = None) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent, overrides)


# --------------------------------------------------------------------------
# builders


def evolution_config(cfg: Config) -> EvolutionConfig:
    kw = {f.name: cfg[f"evolution.{f.name}"] for f in fields(EvolutionConfig) if f.name != "master_seed"}
    try:
        return EvolutionConfig(master_seed=cfg["seed"], **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"evolution: {exc}") from exc


def trace_family(cfg: Config) -> tasks.TraceFamily:
    w = cfg.section("workload")
    fam = tasks.TraceFamily(w["num_servers"], w["cap_cpu"], w["cap_mem"], tuple(w["cpu_choices"]),
                            tuple(w["mem_choices"]), float(w["lifetime_p"]), w["n_creates"])
    demands = [*fam.cpu_choices, *fam.mem_choices]
    if not (fam.cpu_choices and fam.mem_choices and all(isinstance(d, int) and d > 0 for d in demands)):
        raise ConfigError("workload: cpu_choices and mem_choices must be non-empty lists of positive integers")
    if min(fam.num_servers, fam.cap_cpu, fam.cap_mem, fam.n_creates) < 1 or not 0 < fam.lifetime_p <= 1:
        raise ConfigError("workload: sizes must be positive and lifetime_p in (0, 1]")
    return fam


def load_traces(paths) -> list[tuple[str, list[vmsched.VmEvent]]]:
    out = []
    for p in paths:
        try:
            out.append((Path(p).stem, vmsched.load_trace(p)))
        except OSError as exc:
            raise ConfigError(f"cannot read trace {p}: {exc.strerror or exc}") from exc
        except vmsched.TraceFormatError as exc:
            raise ConfigError(f"trace {p}: {exc}") from exc
    return out


def synthetic_problems(cfg: Config, seeds) -> list[admm.StructuredProblem]:
    pr = cfg.section("problems")
    try:
        return [admm.random_problem(pr["kind"], pr["m"], pr["n"], int(s), lambda_ratio=pr["lambda_ratio"],
                                    lambda2=pr["lambda2"], condition=pr["condition"])
                for s in seeds]
    except (ValueError, admm.ProblemSpecError) as exc:
        raise ConfigError(f"problems: {exc}") from exc


def load_problems(paths) -> list[admm.StructuredProblem]:
    try:
        return [admm.load_problem(p) for p in paths]
    except admm.ProblemSpecError as exc:
        raise ConfigError(str(exc)) from exc


def task_descriptor(cfg: Config) -> TaskDescriptor:
    t = cfg.section("task")
    domain = t["domain"]
    common = dict(parsimony_weight=float(t["parsimony_weight"]), aggregation=t["aggregation"],
                  util_mode=t["util_mode"], beta_min=float(t["beta_min"]), beta_max=float(t["beta_max"]),
                  update_period=t["update_period"])
    if domain == SCHEDULE:
        fam = trace_family(cfg)
        if t["traces"]:
            cl = fam.cluster()
            train = [ScheduleInstance(tuple(ev), cl, name) for name, ev in load_traces(t["traces"])]
        else:
            train = fam.instances(t["synthetic_seeds"] or tasks.SCHEDULE_TRAIN_SEEDS)
        description = t["description"] or tasks.SCHEDULE_DESCRIPTION
    elif domain == ADMM_PENALTY:
        if t["tol_abs"] <= 0 or t["tol_rel"] <= 0 or t["max_iter"] < 1 or t["beta0"] <= 0:
            raise ConfigError("task: tolerances, max_iter and beta0 must be positive")
        probs = (load_problems(t["problems"]) if t["problems"]
                 else synthetic_problems(cfg, t["synthetic_seeds"] or tasks.PENALTY_TRAIN_SEEDS))
        train = [PenaltyInstance(p, float(t["beta0"]), float(t["tol_abs"]), float(t["tol_rel"]), t["max_iter"],
                                 p.name) for p in probs]
        description = t["description"] or tasks.PENALTY_DESCRIPTION
    else:
        raise ConfigError(f"task.domain must be {SCHEDULE} or {ADMM_PENALTY}, not {domain!r}")
    if t["num_probes"] < 1:
        raise ConfigError("task.num_probes must be positive")
    try:
        return TaskDescriptor(domain, train, train[: t["num_probes"]], description=description, **common)
    except ValueError as exc:
        raise ConfigError(f"task: {exc}") from exc


def seed_programs(cfg: Config, signature: dsl.Signature) -> list[str]:
    seeds = cfg["evolution.seed_programs"]
    if seeds is None:
        return [tasks.SCHEDULE_SEED_PROGRAM if signature is dsl.SCHEDULE else tasks.PENALTY_SEED_PROGRAM]
    if not seeds or not all(isinstance(s, str) for s in seeds):
        raise ConfigError("evolution.seed_programs must be a non-empty list of strings")
    return seeds


def endpoint(cfg: Config) -> GeneratorEndpoint:
    g = cfg.section("generator")
    if not g["base_url"]:
        raise ConfigError("generator.kind = 'llm' requires generator.base_url")
    try:
        return GeneratorEndpoint(g["base_url"], g["model_name"], float(g["timeout"]), g["max_retries"],
                                 float(g["temperature"]), float(g["backoff_base"]), g["max_concurrent"],
                                 float(g["requests_per_minute"]))
    except ValueError as exc:
        raise ConfigError(f"generator: {exc}") from exc
