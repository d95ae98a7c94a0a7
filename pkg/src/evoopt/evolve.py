"""Island-model evolution over expression genomes.

Each island keeps its own population and random stream.  Within a
generation the islands only share a read-only snapshot of the archive (for
duplicate detection), so stepping them in any order gives the same result;
information otherwise moves between islands only through ring migration.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence, Union

from . import dsl
from .fitness import SENTINEL_FITNESS, FitnessResult
from .generator import GenerationError, GenerationRequest

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
TOP_EXEMPLARS = 3

Evaluator = Callable[[dsl.Program], FitnessResult]


class CorruptCheckpoint(ValueError):
    pass


@dataclass
class EvolutionConfig:
    num_islands: int = 4
    island_capacity: int = 20
    generations_budget: int = 30
    candidates_per_generation: int = 4
    migration_interval: int = 10
    migration_k: int = 2
    exploration_epsilon: float = 0.1
    signature_bucket_width: float = 1.0
    master_seed: int = 0

    def __post_init__(self):
        counts = (self.num_islands, self.island_capacity, self.generations_budget,
                  self.candidates_per_generation, self.migration_interval, self.migration_k)
        if min(counts) < 1:
            raise ValueError("evolution counts must be positive")
        if self.migration_k >= self.island_capacity:
            raise ValueError("migration_k must be smaller than island_capacity")
        if not 0.0 <= self.exploration_epsilon <= 1.0:
            raise ValueError("exploration_epsilon must lie in [0, 1]")
        if not self.signature_bucket_width > 0:
            raise ValueError("signature_bucket_width must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Individual:
    genome: dsl.Program
    fitness: float
    signature: tuple[float, ...]
    generation_born: int

    @property
    def key(self) -> str:
        return self.genome.canonical_hash


@dataclass
class Island:
    id: int
    members: list[Individual]
    rng_state: int


@dataclass(frozen=True)
class ArchiveEntry:
    source: str
    fitness: float
    first_seen_generation: int


@dataclass
class EngineState:
    config: EvolutionConfig
    signature: dsl.Signature
    task_description: str
    generation: int
    islands: list[Island]
    archive: dict[str, ArchiveEntry]
    history: list[tuple[int, float, float]] = field(default_factory=list)
    stats: dict[str, int] = field(default_factory=lambda: {"evaluated": 0, "duplicates": 0, "invalid": 0,
                                                           "generation_errors": 0})

    def best(self) -> Individual:
        return min((m for isl in self.islands for m in isl.members), key=order_key)

    def curve_point(self) -> tuple[int, float, float]:
        fits = [m.fitness for isl in self.islands for m in isl.members]
        good = [f for f in fits if f > SENTINEL_FITNESS]
        mean = math.fsum(good) / len(good) if good else SENTINEL_FITNESS  # fsum: independent of island order
        return self.generation, max(fits), mean


def order_key(ind: Individual):
    """Island ordering: higher fitness first, then older, then canonical hash."""
    return (-ind.fitness, ind.generation_born, ind.genome.canonical_hash)


def island_seed(master_seed: int, island_id: int) -> int:
    digest = hashlib.blake2b(f"{master_seed}:{island_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def cluster_key(signature: Sequence[float], bucket_width: float) -> tuple[int, ...]:
    if not bucket_width > 0:
        raise ValueError("bucket_width must be positive")
    return tuple(math.floor(s / bucket_width) for s in signature)


def prune(members: Sequence[Individual], capacity: int, bucket_width: float) -> list[Individual]:
    """Keep each signature cluster's best member first, then fill by fitness order."""
    ordered = sorted(members, key=order_key)
    if len(ordered) <= capacity:
        return ordered
    champions, rest, seen = [], [], set()
    for ind in ordered:
        ck = cluster_key(ind.signature, bucket_width)
        if ck in seen:
            rest.append(ind)
        else:
            seen.add(ck)
            champions.append(ind)
    keep = champions[:capacity]
    keep += rest[: capacity - len(keep)]
    return sorted(keep, key=order_key)


def _compile_seeds(seeds: Sequence[Union[str, dsl.Program]], signature: dsl.Signature) -> list[dsl.Program]:
    progs = []
    for s in seeds:
        if isinstance(s, dsl.Program):
            if s.signature is not signature:
                raise dsl.DslError(f"seed {s.source} has signature {s.signature.name}, expected {signature.name}")
            progs.append(s)
        else:
            progs.append(dsl.compile_source(s, signature))
    return progs


def initialize(config: EvolutionConfig, seeds: Sequence[Union[str, dsl.Program]], evaluator: Evaluator,
               signature: dsl.Signature, task_description: str = "") -> EngineState:
    if not seeds:
        raise ValueError("at least one seed program is required")
    progs = _compile_seeds(seeds, signature)  # all typechecked before anything is evaluated
    unique: dict[str, Individual] = {}
    archive: dict[str, ArchiveEntry] = {}
    for prog in progs:
        if prog.canonical_hash in unique:
            continue
        res = evaluator(prog)
        unique[prog.canonical_hash] = Individual(prog, res.fitness, tuple(res.signature), 0)
        archive[prog.canonical_hash] = ArchiveEntry(prog.source, res.fitness, 0)
    islands = [
        Island(i, prune(list(unique.values()), config.island_capacity, config.signature_bucket_width),
               island_seed(config.master_seed, i))
        for i in range(config.num_islands)
    ]
    state = EngineState(config, signature, task_description, 0, islands, archive)
    state.stats["evaluated"] = len(unique)
    state.history.append(state.curve_point())
    return state


def select_parents(island: Island, config: EvolutionConfig, rng: random.Random) -> list[Individual]:
    """Top members plus, per slot with probability epsilon, a random member of a random cluster."""
    members = island.members
    if not members:
        raise ValueError("cannot select parents from an empty island")
    k = min(TOP_EXEMPLARS, len(members))
    chosen = list(members[:k])
    taken = {m.key for m in chosen}
    clusters: dict[tuple[int, ...], list[Individual]] = {}
    for m in members:
        clusters.setdefault(cluster_key(m.signature, config.signature_bucket_width), []).append(m)
    keys = list(clusters)
    for _ in range(k):
        if rng.random() < config.exploration_epsilon:
            pick = rng.choice(clusters[rng.choice(keys)])
            if pick.key not in taken:
                taken.add(pick.key)
                chosen.append(pick)
    return chosen


def _step_island(state: EngineState, island: Island, generator, evaluator: Evaluator,
                 known: frozenset[str], born: int) -> dict[str, ArchiveEntry]:
    cfg = state.config
    rng = random.Random(island.rng_state)
    parents = select_parents(island, cfg, rng)
    exemplars = tuple((p.genome.source, p.fitness) for p in sorted(parents, key=order_key, reverse=True))
    seed = rng.getrandbits(63)
    island.rng_state = rng.getrandbits(64)
    req = GenerationRequest(state.task_description, state.signature, exemplars, cfg.candidates_per_generation, seed)
    try:
        texts = generator.generate(req)
    except GenerationError as exc:
        logger.warning("island %d: generator failed (%s); skipping generation %d", island.id, exc, born)
        state.stats["generation_errors"] += 1
        return {}
    new: dict[str, ArchiveEntry] = {}
    for text in texts:
        try:
            prog = dsl.compile_source(text, state.signature)
        except dsl.DslError as exc:
            logger.debug("island %d: rejected candidate %r: %s", island.id, text[:80], exc)
            state.stats["invalid"] += 1
            continue
        h = prog.canonical_hash
        if h in known or h in new:
            state.stats["duplicates"] += 1
            continue
        try:
            res = evaluator(prog)
            fit, sig = res.fitness, tuple(res.signature)
        except Exception as exc:  # a misbehaving candidate must not end the run
            logger.warning("island %d: evaluation of %s failed: %s", island.id, prog.source, exc)
            fit, sig = SENTINEL_FITNESS, tuple(0.0 for _ in island.members[0].signature)
        state.stats["evaluated"] += 1
        island.members.append(Individual(prog, fit, sig, born))
        new[h] = ArchiveEntry(prog.source, fit, born)
    island.members = prune(island.members, cfg.island_capacity, cfg.signature_bucket_width)
    return new


def step_generation(state: EngineState, generator, evaluator: Evaluator) -> EngineState:
    """Advance every island by one generation (in place) and record the curve point."""
    known = frozenset(state.archive)
    born = state.generation + 1
    for island in state.islands:
        for h, entry in _step_island(state, island, generator, evaluator, known, born).items():
            state.archive.setdefault(h, entry)
    state.generation = born
    state.history.append(state.curve_point())
    return state


def migrate(state: EngineState) -> EngineState:
    """Ring migration: island i receives copies of the best ``migration_k`` members of island i-1."""
    cfg = state.config
    n = len(state.islands)
    if n == 1:
        return state
    by_id = sorted(state.islands, key=lambda isl: isl.id)
    emigrants = [isl.members[: cfg.migration_k] for isl in by_id]
    for i, isl in enumerate(by_id):
        present = {m.key for m in isl.members}
        for ind in emigrants[(i - 1) % n]:
            if ind.key not in present:
                isl.members.append(ind)
                present.add(ind.key)
        isl.members = prune(isl.members, cfg.island_capacity, cfg.signature_bucket_width)
    return state


def run(state: EngineState, generator, evaluator: Evaluator, until_generation: Optional[int] = None,
        on_generation: Optional[Callable[[EngineState], None]] = None) -> EngineState:
    """Step until ``until_generation`` (default: the configured budget), migrating on schedule."""
    target = state.config.generations_budget if until_generation is None else until_generation
    while state.generation < target:
        step_generation(state, generator, evaluator)
        if state.generation % state.config.migration_interval == 0:
            migrate(state)
            # keep the recorded point consistent with post-migration populations
            state.history[-1] = state.curve_point()
        if on_generation is not None:
            on_generation(state)
    return state


# --------------------------------------------------------------------------
# checkpoints


def _body(state: EngineState) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "signature": state.signature.name,
        "task_description": state.task_description,
        "generation": state.generation,
        "islands": [
            {
                "id": isl.id,
                "rng_state": isl.rng_state,
                "members": [
                    {"source": m.genome.source, "fitness": m.fitness, "signature": list(m.signature),
                     "born": m.generation_born}
                    for m in isl.members
                ],
            }
            for isl in state.islands
        ],
        "archive": [
            {"hash": h, "source": e.source, "fitness": e.fitness, "first_seen": e.first_seen_generation}
            for h, e in sorted(state.archive.items())
        ],
        "history": [list(p) for p in state.history],
        "stats": dict(state.stats),
    }


def _digest(body: dict) -> str:
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def checkpoint(state: EngineState) -> bytes:
    body = _body(state)
    doc = dict(body)
    doc["digest"] = _digest(body)
    return (json.dumps(doc, indent=1) + "\n").encode()


def restore(blob: bytes) -> EngineState:
    try:
        doc = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "digest" not in doc:
        raise CorruptCheckpoint("checkpoint lacks a digest")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"unsupported checkpoint version {doc.get('version')!r} "
                                f"(expected {CHECKPOINT_VERSION})")
    digest = doc.pop("digest")
    if _digest(doc) != digest:
        raise CorruptCheckpoint("checkpoint digest mismatch")
    try:
        cfg_fields = {f.name for f in fields(EvolutionConfig)}
        config = EvolutionConfig(**{k: v for k, v in doc["config"].items() if k in cfg_fields})
        signature = dsl.SIGNATURES[doc["signature"]]
        islands = []
        for isl in doc["islands"]:
            members = [
                Individual(dsl.compile_source(m["source"], signature), float(m["fitness"]),
                           tuple(float(s) for s in m["signature"]), int(m["born"]))
                for m in isl["members"]
            ]
            islands.append(Island(int(isl["id"]), members, int(isl["rng_state"])))
        archive = {a["hash"]: ArchiveEntry(a["source"], float(a["fitness"]), int(a["first_seen"]))
                   for a in doc["archive"]}
        history = [(int(g), float(b), float(m)) for g, b, m in doc["history"]]
        return EngineState(config, signature, doc["task_description"], int(doc["generation"]), islands,
                           archive, history, {k: int(v) for k, v in doc["stats"].items()})
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from exc
