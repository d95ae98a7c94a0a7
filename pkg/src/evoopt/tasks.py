"""Default task families used by the CLI when a config names no explicit instances."""

from __future__ import annotations

from dataclasses import dataclass

from . import admm, vmsched
from .fitness import ADMM_PENALTY, SCHEDULE, PenaltyInstance, ScheduleInstance, TaskDescriptor


@dataclass(frozen=True)
class TraceFamily:
    """Seeded synthetic workload: a cluster shape plus per-VM demand choices.

    The defaults mix many small VMs with occasional large ones, which makes
    placement quality matter: a policy that fragments servers fails on the
    first large arrival that no longer fits anywhere.
    """

    num_servers: int = 8
    cap_cpu: int = 32
    cap_mem: int = 64
    cpu_choices: tuple[int, ...] = (1, 1, 2, 2, 4, 16)
    mem_choices: tuple[int, ...] = (2, 2, 4, 4, 8, 32)
    lifetime_p: float = 0.03
    n_creates: int = 1500

    def cluster(self, num_servers: int | None = None) -> vmsched.ClusterSpec:
        return vmsched.ClusterSpec(num_servers or self.num_servers, self.cap_cpu, self.cap_mem)

    def trace(self, seed: int) -> tuple[vmsched.VmEvent, ...]:
        return tuple(vmsched.generate_trace(seed, self.n_creates, self.cpu_choices, self.mem_choices,
                                            self.lifetime_p))

    def instances(self, seeds, num_servers: int | None = None) -> list[ScheduleInstance]:
        cl = self.cluster(num_servers)
        return [ScheduleInstance(self.trace(s), cl, f"synthetic-{s}") for s in seeds]


SCHEDULE_TRAIN_SEEDS = tuple(range(10))
SCHEDULE_HELDOUT_SEEDS = tuple(range(1000, 1010))
SCHEDULE_SEED_PROGRAM = "0.0"  # constant score: every feasible server ties, lowest index wins

PENALTY_TRAIN_SEEDS = (0, 1, 2)
PENALTY_SEED_PROGRAM = "beta"


def schedule_task(family: TraceFamily = TraceFamily(), seeds=SCHEDULE_TRAIN_SEEDS, num_probes: int = 3,
                  **kw) -> TaskDescriptor:
    train = family.instances(seeds)
    return TaskDescriptor(SCHEDULE, train, train[:num_probes],
                          description=kw.pop("description", SCHEDULE_DESCRIPTION), **kw)


def penalty_instances(seeds=PENALTY_TRAIN_SEEDS, kind: str = "lasso", m: int = 30, n: int = 40,
                      condition: float = 30.0, beta0: float = 1.0, max_iter: int = 1000,
                      tol_abs: float = 1e-6, tol_rel: float = 1e-4) -> list[PenaltyInstance]:
    out = []
    for s in seeds:
        prob = admm.random_problem(kind, m, n, seed=s, condition=condition)
        out.append(PenaltyInstance(prob, beta0, tol_abs, tol_rel, max_iter, f"{kind}-{s}"))
    return out


def penalty_task(instances: list[PenaltyInstance] | None = None, num_probes: int = 3, **kw) -> TaskDescriptor:
    train = instances if instances is not None else penalty_instances()
    return TaskDescriptor(ADMM_PENALTY, train, train[:num_probes],
                          description=kw.pop("description", PENALTY_DESCRIPTION), **kw)


SCHEDULE_DESCRIPTION = """\
Online virtual-machine placement. VMs arrive one at a time and must be put on
a server with enough free cpu and memory; the run ends at the first VM that
fits nowhere. For each feasible server the expression is evaluated and the VM
goes to the highest score (ties: lowest server index). Variables: req_cpu,
req_mem (the VM's demand), free_cpu, free_mem (server headroom), bin_util
(server's current allocation rate in [0, 1]). Goal: place as many VMs as
possible before the first rejection."""

PENALTY_DESCRIPTION = """\
Penalty-parameter update rule for ADMM on sparse regression. After every
iteration the expression returns the next penalty beta. Variables: p (dual
residual norm, the beta-scaled change in z), d (primal residual norm,
||x - z||), beta (current penalty), k (iteration index). The result is clamped
to a safe range. Goal: reach the stopping tolerance in as few iterations as
possible."""
