"""Fitness evaluators tying genomes to the two case-study domains."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import admm, dsl, vmsched

logger = logging.getLogger(__name__)

SENTINEL_FITNESS = -1e9
NONCONVERGENCE_PENALTY = 1000

SCHEDULE = "SCHEDULE"
ADMM_PENALTY = "ADMM_PENALTY"


@dataclass(frozen=True)
class ScheduleInstance:
    trace: tuple[vmsched.VmEvent, ...]
    cluster: vmsched.ClusterSpec
    name: str = ""


@dataclass(frozen=True)
class PenaltyInstance:
    problem: admm.StructuredProblem
    beta0: float = 1.0
    tol_abs: float = 1e-6
    tol_rel: float = 1e-4
    max_iter: int = 1000
    name: str = ""


Instance = Union[ScheduleInstance, PenaltyInstance]


@dataclass
class TaskDescriptor:
    """One point of the problem x formulation x algorithm x hyperparameter space.

    Problem and formulation are fixed (``domain`` and ``fixed_formulation``);
    the search runs over the algorithm part (placement scores) or the
    hyperparameter rule (penalty updates).
    """

    domain: str
    training_instances: list
    probe_instances: list
    fixed_formulation: str = ""
    parsimony_weight: float = 0.01
    aggregation: str = "mean"
    util_mode: str = "mean"
    beta_min: float = 1e-6
    beta_max: float = 1e6
    update_period: int = 1
    description: str = ""

    def __post_init__(self):
        if self.domain not in (SCHEDULE, ADMM_PENALTY):
            raise ValueError(f"unknown domain {self.domain!r}")
        if not self.training_instances or not self.probe_instances:
            raise ValueError("training and probe instance lists must be non-empty")
        want = ScheduleInstance if self.domain == SCHEDULE else PenaltyInstance
        if not all(isinstance(i, want) for i in [*self.training_instances, *self.probe_instances]):
            raise ValueError(f"{self.domain} tasks take {want.__name__} instances")
        if self.parsimony_weight < 0:
            raise ValueError("parsimony_weight must be non-negative")
        if self.aggregation not in ("mean", "min"):
            raise ValueError("aggregation must be 'mean' or 'min'")
        if not self.fixed_formulation:
            self.fixed_formulation = "bin-packing" if self.domain == SCHEDULE else "admm-x-minus-z"

    @property
    def signature(self) -> dsl.Signature:
        return dsl.SCHEDULE if self.domain == SCHEDULE else dsl.PENALTY


@dataclass
class FitnessResult:
    fitness: float
    signature: tuple[float, ...]
    diagnostics: dict = field(default_factory=dict)


def _aggregate(scores: Sequence[float], how: str) -> float:
    return float(np.mean(scores)) if how == "mean" else float(min(scores))


def _score_all(task: TaskDescriptor, run: Callable[[Instance], float]) -> tuple[list[float], list[float]]:
    cache: dict[int, float] = {}

    def score(inst):
        key = id(inst)
        if key not in cache:
            cache[key] = run(inst)
        return cache[key]

    return [score(i) for i in task.training_instances], [score(i) for i in task.probe_instances]


def _sentinel(task: TaskDescriptor, exc: Exception) -> FitnessResult:
    logger.debug("candidate failed: %s", exc)
    return FitnessResult(SENTINEL_FITNESS, tuple(0.0 for _ in task.probe_instances), {"error": str(exc)})


def evaluate_schedule(prog: dsl.Program, task: TaskDescriptor) -> FitnessResult:
    if prog.signature is not dsl.SCHEDULE:
        raise ValueError("schedule evaluation needs a SCHEDULE program")
    policy = vmsched.DslPolicy(prog)

    def run(inst: ScheduleInstance) -> float:
        return float(vmsched.simulate(policy, inst.trace, inst.cluster, util_mode=task.util_mode).scheduling_length)

    try:
        train, probes = _score_all(task, run)
    except vmsched.DslEvaluationError as exc:
        return _sentinel(task, exc)
    fit = _aggregate(train, task.aggregation) - task.parsimony_weight * dsl.complexity(prog)
    return FitnessResult(fit, tuple(probes), {"train": train, "probe": probes})


def penalty_strategy(prog: dsl.Program, task: TaskDescriptor) -> admm.DslRule:
    return admm.DslRule(prog, beta_min=task.beta_min, beta_max=task.beta_max, update_period=task.update_period)


def penalty_score(report: admm.SolveReport, max_iter: int) -> float:
    return -float(report.iterations) if report.converged else -float(max_iter + NONCONVERGENCE_PENALTY)


def evaluate_penalty_rule(prog: dsl.Program, task: TaskDescriptor) -> FitnessResult:
    if prog.signature is not dsl.PENALTY:
        raise ValueError("penalty evaluation needs a PENALTY program")
    strategy = penalty_strategy(prog, task)

    def run(inst: PenaltyInstance) -> float:
        rep = admm.solve(inst.problem, strategy, inst.beta0, inst.tol_abs, inst.tol_rel, inst.max_iter)
        return penalty_score(rep, inst.max_iter)

    try:
        train, probes = _score_all(task, run)
    except (admm.DslEvaluationError, admm.NumericalError) as exc:
        return _sentinel(task, exc)
    fit = _aggregate(train, task.aggregation) - task.parsimony_weight * dsl.complexity(prog)
    return FitnessResult(fit, tuple(probes), {"train": train, "probe": probes})


def make_evaluator(task: TaskDescriptor) -> Callable[[dsl.Program], FitnessResult]:
    if task.domain == SCHEDULE:
        return lambda prog: evaluate_schedule(prog, task)
    return lambda prog: evaluate_penalty_rule(prog, task)
