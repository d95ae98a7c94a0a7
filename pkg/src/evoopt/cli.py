"""Command line entry point: ``evoopt evolve|simulate|solve|resume``.

Exit codes: 0 success, 2 configuration or input error, 3 external-service
error (missing credentials, or a generator that keeps failing).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import admm, config as cfgmod, dsl, evolve, vmsched
from .config import Config, ConfigError
from .fitness import make_evaluator
from .generator import LlmGenerator, MissingCredentials, MockGenerator

logger = logging.getLogger("evoopt")

EXIT_OK, EXIT_CONFIG, EXIT_EXTERNAL = 0, 2, 3

CHECKPOINT = "checkpoint.json"
BEST_GENOME = "best_genome.txt"
ARCHIVE = "archive.csv"
CURVE = "curve.csv"
SIMULATE_CSV = "simulate.csv"
SOLVE_CSV = "solve.csv"


class GeneratorDown(RuntimeError):
    pass


def _write(out_dir: Path, name: str, data: str | bytes) -> None:
    # write-then-rename so an interrupted run never leaves a half-written file
    path = out_dir / name
    tmp = out_dir / (name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _out_dir(cfg: Config, override: Optional[str]) -> Path:
    if override:
        return Path(override)
    p = Path(cfg["output_dir"])
    return p if p.is_absolute() else cfg.base_dir / p


# --------------------------------------------------------------------------
# evolve / resume


def _generator(cfg: Config):
    kind = cfg["generator.kind"]
    if kind == "mock":
        return MockGenerator()
    if kind == "llm":
        return LlmGenerator(cfgmod.endpoint(cfg))
    raise ConfigError(f"generator.kind must be 'mock' or 'llm', not {kind!r}")


def write_evolve_outputs(state: evolve.EngineState, out_dir: Path) -> None:
    best = state.best()
    _write(out_dir, BEST_GENOME, best.genome.source + "\n")
    entries = sorted(state.archive.items(), key=lambda kv: (-kv[1].fitness, kv[1].first_seen_generation, kv[0]))
    _write(out_dir, ARCHIVE, _csv(("hash", "source", "fitness", "first_seen_generation"),
                                  [(h, e.source, repr(e.fitness), e.first_seen_generation) for h, e in entries]))
    _write(out_dir, CURVE, _csv(("generation", "best_fitness", "mean_fitness"),
                                [(g, repr(b), repr(m)) for g, b, m in state.history if g > 0]))
    _write(out_dir, CHECKPOINT, evolve.checkpoint(state))


def _run_evolution(state: evolve.EngineState, cfg: Config, out_dir: Path, gen, evaluator) -> int:
    every = cfg["evolution.checkpoint_every"]
    limit = cfg["evolution.max_generator_failures"]
    streak = [0, state.stats["generation_errors"]]

    def on_generation(st: evolve.EngineState) -> None:
        errors = st.stats["generation_errors"]
        streak[0] = streak[0] + 1 if errors - streak[1] == len(st.islands) else 0
        streak[1] = errors
        logger.info("generation %d: best %.6g", st.generation, st.history[-1][1])
        if every > 0 and st.generation % every == 0:
            _write(out_dir, CHECKPOINT, evolve.checkpoint(st))
        if limit > 0 and streak[0] >= limit:
            raise GeneratorDown(f"generator failed on every island for {streak[0]} consecutive generations")

    try:
        evolve.run(state, gen, evaluator, on_generation=on_generation)
    except GeneratorDown as exc:
        _write(out_dir, CHECKPOINT, evolve.checkpoint(state))
        print(f"error: {exc}; checkpoint saved at generation {state.generation}", file=sys.stderr)
        return EXIT_EXTERNAL
    write_evolve_outputs(state, out_dir)
    best = state.best()
    print(f"generation {state.generation}: best fitness {best.fitness:.6g}")
    print(f"best genome: {best.genome.source}")
    return EXIT_OK


def cmd_evolve(cfg: Config, out_dir: Path) -> int:
    ecfg = cfgmod.evolution_config(cfg)
    task = cfgmod.task_descriptor(cfg)
    seeds = cfgmod.seed_programs(cfg, task.signature)
    try:
        progs = [dsl.compile_source(s, task.signature) for s in seeds]
    except dsl.DslError as exc:
        raise ConfigError(f"bad seed program: {exc}") from exc
    gen = _generator(cfg)  # credentials are checked here, before any generation
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluator = make_evaluator(task)
    state = evolve.initialize(ecfg, progs, evaluator, task.signature, task.description)
    return _run_evolution(state, cfg, out_dir, gen, evaluator)


def cmd_resume(cfg: Config, out_dir: Path) -> int:
    path = out_dir / CHECKPOINT
    try:
        state = evolve.restore(path.read_bytes())
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    except evolve.CorruptCheckpoint as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    ecfg = cfgmod.evolution_config(cfg)
    saved = dict(vars(state.config), generations_budget=ecfg.generations_budget)
    if saved != vars(ecfg):
        diff = sorted(k for k in saved if saved[k] != vars(ecfg)[k])
        raise ConfigError(f"config disagrees with checkpoint on: {', '.join(diff)}")
    task = cfgmod.task_descriptor(cfg)
    if task.signature is not state.signature:
        raise ConfigError("config task domain does not match the checkpoint")
    gen = _generator(cfg)
    state.config = ecfg
    logger.info("resuming at generation %d of %d", state.generation, ecfg.generations_budget)
    return _run_evolution(state, cfg, out_dir, gen, make_evaluator(task))


# --------------------------------------------------------------------------
# simulate


def _policies(cfg: Config) -> list[tuple[str, vmsched.Policy]]:
    out = []
    for spec in cfg["simulate.policies"]:
        if spec in vmsched.BUILTIN_POLICIES:
            out.append((spec, spec))
        elif isinstance(spec, str) and spec.startswith("genome:"):
            rel = spec[len("genome:"):]
            path = Path(rel) if Path(rel).is_absolute() else cfg.base_dir / rel
            try:
                prog = dsl.compile_source(path.read_text().strip(), dsl.SCHEDULE)
            except OSError as exc:
                raise ConfigError(f"cannot read genome {path}: {exc.strerror or exc}") from exc
            except dsl.DslError as exc:
                raise ConfigError(f"genome {path}: {exc}") from exc
            out.append((spec, vmsched.DslPolicy(prog)))
        else:
            raise ConfigError(f"unknown policy {spec!r} (use {', '.join(vmsched.BUILTIN_POLICIES)} or genome:<file>)")
    if not out:
        raise ConfigError("simulate.policies is empty")
    return out


def cmd_simulate(cfg: Config, out_dir: Path) -> int:
    fam = cfgmod.trace_family(cfg)
    policies = _policies(cfg)
    if cfg["simulate.traces"]:
        scenarios = cfgmod.load_traces(cfg["simulate.traces"])
    else:
        seeds = cfg["simulate.synthetic_seeds"] or [cfg["seed"]]
        scenarios = [(f"synthetic-{s}", list(fam.trace(int(s)))) for s in seeds]
    sizes = cfg["simulate.num_servers"] or [fam.num_servers]
    if not all(isinstance(n, int) and n > 0 for n in sizes):
        raise ConfigError("simulate.num_servers must list positive integers")
    mode = cfg["simulate.util_mode"]
    if mode not in ("mean", "max"):
        raise ConfigError("simulate.util_mode must be 'mean' or 'max'")
    rows = []
    for name, trace in scenarios:
        for n in sizes:
            cluster = fam.cluster(n)
            for label, pol in policies:
                try:
                    res = vmsched.simulate(pol, trace, cluster, util_mode=mode)
                except vmsched.DslEvaluationError as exc:
                    raise ConfigError(f"{label} on {name}: {exc}") from exc
                rows.append((name, n, label, res.scheduling_length))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir, SIMULATE_CSV, _csv(("scenario", "num_servers", "policy", "scheduling_length"), rows))
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


# --------------------------------------------------------------------------
# solve


def _strategies(cfg: Config) -> list[tuple[str, admm.PenaltyStrategy]]:
    s = cfg.section("solve")
    clamp = dict(beta_min=s["beta_min"], beta_max=s["beta_max"], update_period=s["update_period"])
    if not 0 < clamp["beta_min"] < clamp["beta_max"] or clamp["update_period"] < 1:
        raise ConfigError("solve: need 0 < beta_min < beta_max and update_period >= 1")
    out = []
    for spec in s["strategies"]:
        if spec == "fixed":
            out.append((spec, admm.Fixed(**clamp)))
        elif spec == "residual_balancing":
            try:
                out.append((spec, admm.ResidualBalancing(s["mu"], s["eta"], **clamp)))
            except ValueError as exc:
                raise ConfigError(f"solve: {exc}") from exc
        elif isinstance(spec, str) and spec.startswith("rule:"):
            rel = spec[len("rule:"):]
            path = Path(rel) if Path(rel).is_absolute() else cfg.base_dir / rel
            try:
                prog = dsl.compile_source(path.read_text().strip(), dsl.PENALTY)
            except OSError as exc:
                raise ConfigError(f"cannot read rule {path}: {exc.strerror or exc}") from exc
            except dsl.DslError as exc:
                raise ConfigError(f"rule {path}: {exc}") from exc
            out.append((spec, admm.DslRule(prog, **clamp)))
        else:
            raise ConfigError(f"unknown strategy {spec!r} (use fixed, residual_balancing or rule:<file>)")
    if not out:
        raise ConfigError("solve.strategies is empty")
    return out


def cmd_solve(cfg: Config, out_dir: Path) -> int:
    s = cfg.section("solve")
    if s["tol_abs"] <= 0 or s["tol_rel"] <= 0:
        raise ConfigError("solve: tolerances must be positive")
    if s["max_iter"] < 1 or s["beta0"] <= 0:
        raise ConfigError("solve: max_iter and beta0 must be positive")
    strategies = _strategies(cfg)
    if s["problems"]:
        problems = cfgmod.load_problems(s["problems"])
    else:
        problems = cfgmod.synthetic_problems(cfg, s["synthetic_seeds"] or [cfg["seed"]])
    rows = []
    for prob in problems:
        for label, strat in strategies:
            try:
                rep = admm.solve(prob, strat, s["beta0"], s["tol_abs"], s["tol_rel"], s["max_iter"])
                rows.append((prob.name, label, rep.iterations, rep.converged, repr(rep.objective)))
            except admm.DslEvaluationError as exc:
                raise ConfigError(f"{label} on {prob.name}: {exc}") from exc
            except admm.NumericalError as exc:
                logger.warning("%s on %s: %s", label, prob.name, exc)
                rows.append((prob.name, label, s["max_iter"], False, "nan"))
    out_dir.mkdir(parents=True, exist_ok=True)
    _write(out_dir, SOLVE_CSV, _csv(("problem", "strategy", "iterations", "converged", "objective"), rows))
    for r in rows:
        print(",".join(map(str, r)))
    return EXIT_OK


# --------------------------------------------------------------------------


COMMANDS = {"evolve": cmd_evolve, "simulate": cmd_simulate, "solve": cmd_solve, "resume": cmd_resume}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="evoopt", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML experiment config")
    ap.add_argument("--seed", type=int, help="override the config's seed")
    ap.add_argument("--out", help="output directory (overrides output_dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"seed": args.seed} if args.seed is not None else None
    try:
        cfg = cfgmod.load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, _out_dir(cfg, args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCredentials as exc:
        print(f"MissingCredentials: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL


if __name__ == "__main__":
    sys.exit(main())
