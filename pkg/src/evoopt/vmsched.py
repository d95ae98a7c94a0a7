"""Online two-dimensional (cpu, mem) bin packing for VM placement.

Events are replayed in order on a homogeneous cluster.  The run stops at the
first CREATE that fits on no server; the number of CREATEs placed until then
is the scheduling length.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import dsl

logger = logging.getLogger(__name__)

CREATE = "create"
DELETE = "delete"
TRACE_HEADER = ["vm_id", "event_index", "kind", "cpu_cores", "mem_gb"]


class TraceFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DanglingDelete(TraceFormatError):
    def __init__(self, vm_id: int, line: int):
        super().__init__(line, f"delete of vm {vm_id} which is not resident")
        self.vm_id = vm_id


class DslEvaluationError(RuntimeError):
    def __init__(self, vm_id, server, cause: Exception):
        super().__init__(f"policy program failed for vm {vm_id} on server {server}: {cause}")
        self.vm_id = vm_id
        self.server = server


@dataclass(frozen=True)
class VmEvent:
    vm_id: int
    event_index: int
    kind: str
    cpu: int = 0
    mem: int = 0


@dataclass(frozen=True)
class ClusterSpec:
    num_servers: int
    cap_cpu: int
    cap_mem: int

    def __post_init__(self):
        if min(self.num_servers, self.cap_cpu, self.cap_mem) <= 0:
            raise ValueError(f"cluster dimensions must be positive: {self}")


@dataclass
class SimOutcome:
    scheduling_length: int
    placements: list[tuple[int, int]]
    rejected_vm: Optional[int]
    utilization_trace: list[float]


@dataclass(frozen=True)
class DslPolicy:
    program: dsl.Program

    @property
    def name(self) -> str:
        return f"dsl:{self.program.canonical_hash}"


BUILTIN_POLICIES = ("first_fit", "best_fit", "worst_fit")
Policy = Union[str, DslPolicy]


def load_trace(path: Union[str, Path]) -> list[VmEvent]:
    """Read the canonical trace CSV; line numbers in errors count the header as line 1."""
    events = []
    resident: set[int] = set()
    last = -1
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != TRACE_HEADER:
            raise TraceFormatError(1, f"expected header {','.join(TRACE_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise TraceFormatError(line, f"expected 5 fields, got {len(row)}")
            vm, idx, kind, cpu, mem = (c.strip() for c in row)
            try:
                vm_id, event_index = int(vm), int(idx)
            except ValueError:
                raise TraceFormatError(line, "vm_id and event_index must be integers") from None
            if event_index <= last:
                raise TraceFormatError(line, f"event_index {event_index} not increasing")
            last = event_index
            kind = kind.lower()
            if kind == CREATE:
                try:
                    c, m = int(cpu), int(mem)
                except ValueError:
                    raise TraceFormatError(line, "create needs integer cpu_cores and mem_gb") from None
                if c <= 0 or m <= 0:
                    raise TraceFormatError(line, "create needs positive cpu_cores and mem_gb")
                if vm_id in resident:
                    raise TraceFormatError(line, f"vm {vm_id} created twice")
                resident.add(vm_id)
                events.append(VmEvent(vm_id, event_index, CREATE, c, m))
            elif kind == DELETE:
                if cpu or mem:
                    raise TraceFormatError(line, "delete rows must leave cpu_cores and mem_gb empty")
                if vm_id not in resident:
                    raise DanglingDelete(vm_id, line)
                resident.remove(vm_id)
                events.append(VmEvent(vm_id, event_index, DELETE))
            else:
                raise TraceFormatError(line, f"unknown kind {kind!r}")
    return events


def write_trace(events: Sequence[VmEvent], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for ev in events:
            if ev.kind == CREATE:
                w.writerow([ev.vm_id, ev.event_index, CREATE, ev.cpu, ev.mem])
            else:
                w.writerow([ev.vm_id, ev.event_index, DELETE, "", ""])


def convert_huawei_trace(src: Union[str, Path], dst: Union[str, Path], max_events: Optional[int] = None) -> int:
    """Convert a Huawei Cloud VM-placement dataset CSV into the canonical trace format.

    The public dataset lists one row per request with columns
    ``vmid,cpu,memory,time,type`` where ``type`` is 0 for creation and 1 for
    deletion.  Rows are replayed in (time, file order); deletions of VMs whose
    creation is not in the file are dropped.  Returns the number of events written.
    """
    rows = []
    with open(src, newline="") as fh:
        reader = csv.DictReader(fh)
        for n, row in enumerate(reader):
            rows.append((float(row["time"]), n, int(row["vmid"]), int(float(row["cpu"])),
                         int(float(row["memory"])), int(row["type"])))
    rows.sort(key=lambda r: (r[0], r[1]))
    events = []
    resident: set[int] = set()
    for _, _, vm, cpu, mem, typ in rows:
        if max_events is not None and len(events) >= max_events:
            break
        if typ == 0 and vm not in resident and cpu > 0 and mem > 0:
            resident.add(vm)
            events.append(VmEvent(vm, len(events), CREATE, cpu, mem))
        elif typ == 1 and vm in resident:
            resident.remove(vm)
            events.append(VmEvent(vm, len(events), DELETE))
    write_trace(events, dst)
    return len(events)


def generate_trace(
    seed: int,
    n_creates: int,
    cpu_choices: Sequence[int],
    mem_choices: Sequence[int],
    lifetime_geometric_p: float,
) -> list[VmEvent]:
    """Seeded synthetic trace.

    VM ``i`` lives for ``L`` further CREATE arrivals, ``L`` geometric on
    {0, 1, ...}; its DELETE is emitted right after CREATE number ``i + L``.
    VMs outliving the trace are never deleted.
    """
    if n_creates <= 0 or not cpu_choices or not mem_choices or not 0 < lifetime_geometric_p <= 1:
        raise ValueError("invalid synthetic trace parameters")
    rng = np.random.default_rng(seed)
    cpus = rng.choice(np.asarray(cpu_choices), size=n_creates)
    mems = rng.choice(np.asarray(mem_choices), size=n_creates)
    lifetimes = rng.geometric(lifetime_geometric_p, size=n_creates) - 1
    due: dict[int, list[int]] = {}
    for i, life in enumerate(lifetimes):
        due.setdefault(i + int(life), []).append(i)
    events: list[VmEvent] = []
    for i in range(n_creates):
        events.append(VmEvent(i, len(events), CREATE, int(cpus[i]), int(mems[i])))
        for vm in sorted(due.get(i, ())):
            events.append(VmEvent(vm, len(events), DELETE))
    return events


def policy_name(policy: Policy) -> str:
    return policy.name if isinstance(policy, DslPolicy) else policy


def simulate(
    policy: Policy,
    trace: Sequence[VmEvent],
    cluster: ClusterSpec,
    util_mode: str = "mean",
    debug: bool = False,
    limits: dsl.EvalLimits = dsl.EvalLimits(),
) -> SimOutcome:
    """Replay ``trace`` under ``policy``.

    ``util_mode`` selects how a server's allocation rate is summarized:
    ``"mean"`` of the cpu and mem fractions, or their ``"max"``.
    """
    if util_mode not in ("mean", "max"):
        raise ValueError(f"util_mode must be 'mean' or 'max', not {util_mode!r}")
    score = None
    if isinstance(policy, DslPolicy):
        if policy.program.signature is not dsl.SCHEDULE:
            raise ValueError("placement programs need the SCHEDULE signature")
        score = dsl.compile_program(policy.program, limits)
    elif policy not in BUILTIN_POLICIES:
        raise ValueError(f"unknown policy {policy!r}")

    cap_cpu, cap_mem = cluster.cap_cpu, cluster.cap_mem
    n = cluster.num_servers
    used_cpu = [0] * n
    used_mem = [0] * n
    util = [0.0] * n
    where: dict[int, tuple[int, int, int]] = {}
    placements: list[tuple[int, int]] = []
    utrace: list[float] = []
    placed = 0
    rejected = None

    def u_of(s: int) -> float:
        fc, fm = used_cpu[s] / cap_cpu, used_mem[s] / cap_mem
        return (fc + fm) / 2 if util_mode == "mean" else max(fc, fm)

    for ev in trace:
        if ev.kind == DELETE:
            s, c, m = where.pop(ev.vm_id)
            used_cpu[s] -= c
            used_mem[s] -= m
            util[s] = u_of(s)
        else:
            c, m = ev.cpu, ev.mem
            best = -1
            best_val = 0.0
            for s in range(n):
                if cap_cpu - used_cpu[s] < c or cap_mem - used_mem[s] < m:
                    continue
                if policy == "first_fit":
                    best = s
                    break
                if score is not None:
                    try:
                        val = score(req_cpu=float(c), req_mem=float(m), free_cpu=float(cap_cpu - used_cpu[s]),
                                    free_mem=float(cap_mem - used_mem[s]), bin_util=util[s])
                    except dsl.DslError as exc:
                        raise DslEvaluationError(ev.vm_id, s, exc) from exc
                elif policy == "best_fit":
                    val = util[s]
                else:
                    val = -util[s]
                if best < 0 or val > best_val:
                    best, best_val = s, val
            if best < 0:
                rejected = ev.vm_id
                break
            used_cpu[best] += c
            used_mem[best] += m
            util[best] = u_of(best)
            where[ev.vm_id] = (best, c, m)
            placements.append((ev.vm_id, best))
            placed += 1
        if debug:
            _check_conservation(used_cpu, used_mem, where, cluster)
        utrace.append(sum(util) / n)
    return SimOutcome(placed, placements, rejected, utrace)


def _check_conservation(used_cpu, used_mem, where, cluster: ClusterSpec) -> None:
    sums_c = [0] * cluster.num_servers
    sums_m = [0] * cluster.num_servers
    for s, c, m in where.values():
        sums_c[s] += c
        sums_m[s] += m
    for s in range(cluster.num_servers):
        if not (0 <= used_cpu[s] <= cluster.cap_cpu and 0 <= used_mem[s] <= cluster.cap_mem):
            raise AssertionError(f"server {s} outside capacity: {used_cpu[s]}, {used_mem[s]}")
        if used_cpu[s] != sums_c[s] or used_mem[s] != sums_m[s]:
            raise AssertionError(f"server {s} usage disagrees with its residents")
