"""Candidate generators: a seeded grammar-mutation mock and an HTTP LLM client."""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import httpx

from . import dsl

logger = logging.getLogger(__name__)

API_KEY_ENV = "EVOOPT_LLM_API_KEY"
MUTATIONS = ("scale", "perturb", "swap_op", "crossover", "wrap_if")
MAX_RETRIES_PER_CANDIDATE = 8


class GenerationError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class MissingCredentials(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    task_description: str
    signature: dsl.Signature
    exemplars: tuple[tuple[str, float], ...]
    num_candidates: int
    seed: int

    def __post_init__(self):
        if not self.exemplars:
            raise ValueError("a generation request needs at least one exemplar")
        fits = [f for _, f in self.exemplars]
        if fits != sorted(fits):
            raise ValueError("exemplars must be sorted by ascending fitness")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be positive")


# --------------------------------------------------------------------------
# mock


def _constants(ast: dsl.Ast) -> list[tuple[tuple[int, ...], dsl.Const]]:
    return [(p, n) for p, n in dsl.iter_paths(ast) if isinstance(n, dsl.Const)]


def _op_sites(ast: dsl.Ast) -> list[tuple[tuple[int, ...], dsl.Ast]]:
    return [(p, n) for p, n in dsl.iter_paths(ast) if isinstance(n, (dsl.Binary, dsl.If))]


def _new_const(value: float) -> dsl.Const:
    return dsl.Const(float(min(max(value, -dsl.CONST_LIMIT), dsl.CONST_LIMIT)) + 0.0)


def _mutate(kind: str, parent: dsl.Ast, others: Sequence[dsl.Ast], variables: Sequence[str],
            rng: random.Random) -> dsl.Ast:
    if kind == "scale":
        path, node = rng.choice(_constants(parent))
        return dsl.replace_at(parent, path, _new_const(node.value * rng.choice((2.0, 0.5))))
    if kind == "perturb":
        path, node = rng.choice(_constants(parent))
        return dsl.replace_at(parent, path, _new_const(node.value * rng.choice((1.1, 0.9))))
    if kind == "swap_op":
        path, node = rng.choice(_op_sites(parent))
        if isinstance(node, dsl.If):
            c = node.cond
            op = rng.choice([o for o in dsl.COMPARE_OPS if o != c.op])
            return dsl.replace_at(parent, path, dsl.If(dsl.Cond(op, c.left, c.right), node.then, node.orelse))
        op = rng.choice([o for o in dsl.ARITH_OPS if o != node.op])
        return dsl.replace_at(parent, path, dsl.Binary(op, node.left, node.right))
    if kind == "crossover":
        donor = rng.choice(list(others))
        path, _ = rng.choice(list(dsl.iter_paths(parent)))
        _, sub = rng.choice(list(dsl.iter_paths(donor)))
        return dsl.replace_at(parent, path, sub)
    # wrap_if
    a, b = rng.sample(list(variables), 2)
    cond = dsl.Cond(rng.choice(dsl.COMPARE_OPS), dsl.Var(a), dsl.Var(b))
    if others and rng.random() < 0.5:
        orelse = rng.choice(list(others))
    else:
        orelse = dsl.Const(1.0)
    return dsl.If(cond, parent, orelse)


def _applicable(kind: str, parent: dsl.Ast, others: Sequence[dsl.Ast]) -> bool:
    if kind in ("scale", "perturb"):
        return bool(_constants(parent))
    if kind == "swap_op":
        return bool(_op_sites(parent))
    if kind == "crossover":
        return len(others) >= 1
    return True


def mock_generate(req: GenerationRequest) -> list[str]:
    """Seeded mutation operators standing in for a language model.

    Each candidate picks a parent by rank weight (the best exemplar counts
    double), then one of five mutations uniformly among those applicable to
    that parent: scale a constant by 2 or 0.5, perturb a constant by 10%,
    swap an operator for another of the same arity, subtree crossover with
    another exemplar, or wrap the root in a new comparison of two signature
    variables.  Results over the node cap are retried up to 8 times before
    the parent itself is returned.
    """
    rng = random.Random(req.seed)
    parents = [dsl.parse(src) for src, _ in req.exemplars]
    weights = [1.0] * len(parents)
    weights[-1] = 2.0
    variables = req.signature.variables
    out = []
    for _ in range(req.num_candidates):
        idx = rng.choices(range(len(parents)), weights=weights)[0]
        parent = parents[idx]
        others = parents[:idx] + parents[idx + 1:]
        child = parent
        for _attempt in range(MAX_RETRIES_PER_CANDIDATE):
            kind = rng.choice(MUTATIONS)
            if not _applicable(kind, parent, others):
                kind = rng.choice([k for k in MUTATIONS if _applicable(k, parent, others)])
            cand = _mutate(kind, parent, others, variables, rng)
            if dsl.node_count(cand) <= dsl.MAX_NODES:
                child = cand
                break
        out.append(dsl.to_source(child))
    return out


class MockGenerator:
    name = "mock"

    def generate(self, req: GenerationRequest) -> list[str]:
        return mock_generate(req)


# --------------------------------------------------------------------------
# LLM client


@dataclass(frozen=True)
class GeneratorEndpoint:
    base_url: str
    model_name: str = "default"
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.8
    backoff_base: float = 1.0
    max_concurrent: int = 2
    requests_per_minute: float = 30.0

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url is required for the LLM generator")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_retries < 0 or self.timeout <= 0:
            raise ValueError("invalid timeout or retry count")


class Throttle:
    """Caps in-flight requests and spaces request starts to a per-minute rate."""

    def __init__(self, max_concurrent: int = 2, requests_per_minute: float = 30.0,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self._sem = threading.BoundedSemaphore(max_concurrent)
        self._interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._lock = threading.Lock()
        self._next = 0.0
        self._clock, self._sleep = clock, sleep

    def __enter__(self):
        self._sem.acquire()
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self._interval
        if start > now:
            self._sleep(start - now)
        return self

    def __exit__(self, *exc):
        self._sem.release()
        return False


GRAMMAR_SUMMARY = """\
Write ONE expression in this small language (no statements, no loops):
  numbers, variables, + - * /, min(a, b), max(a, b), abs(x), log(x), exp(x),
  parentheses, and conditionals `if a < b then x else y` (comparisons < <= > >=).
Division, log and exp are guarded; every value is a real number."""

_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def build_prompt(req: GenerationRequest) -> list[dict]:
    lines = [req.task_description.strip(), "", GRAMMAR_SUMMARY,
             f"Available variables: {', '.join(req.signature.variables)}.", "",
             "Previous candidates, from worst to best (higher fitness is better):"]
    for i, (src, fit) in enumerate(req.exemplars):
        lines += [f"# candidate {i}, fitness {fit:.6g}", "```", src, "```"]
    lines += ["", "Propose a new expression likely to score higher than the best one above. "
              "Reply with exactly one fenced code block containing only the expression."]
    return [
        {"role": "system", "content": "You design heuristics as short symbolic expressions."},
        {"role": "user", "content": "\n".join(lines)},
    ]


def extract_code_block(content: Optional[str]) -> str:
    if content is None or not content.strip():
        raise GenerationError("empty_response", "model returned no content")
    m = _FENCE_RE.search(content)
    if m is None:
        raise GenerationError("no_code_block", "response contains no fenced code block")
    code = m.group(1).strip()
    if not code or len(code) > dsl.MAX_SOURCE_CHARS:
        raise GenerationError("no_code_block", "fenced block is empty or longer than 4096 characters")
    return code


def _api_key() -> str:
    key = os.environ.get(API_KEY_ENV)
    if not key:
        raise MissingCredentials(f"environment variable {API_KEY_ENV} is not set")
    return key


class LlmGenerator:
    name = "llm"

    def __init__(self, endpoint: GeneratorEndpoint, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep, throttle: Optional[Throttle] = None):
        self.endpoint = endpoint
        self.api_key = _api_key()
        self._client = client or httpx.Client(timeout=endpoint.timeout)
        self._sleep = sleep
        self.throttle = throttle or Throttle(endpoint.max_concurrent, endpoint.requests_per_minute)

    def generate(self, req: GenerationRequest) -> list[str]:
        return llm_generate(req, self.endpoint, client=self._client, sleep=self._sleep,
                            throttle=self.throttle, api_key=self.api_key)


def _post_with_retries(client: httpx.Client, url: str, body: dict, headers: dict, ep: GeneratorEndpoint,
                       rng: random.Random, sleep: Callable[[float], None], throttle: Throttle) -> dict:
    delay = ep.backoff_base
    for attempt in range(ep.max_retries + 1):
        last = attempt == ep.max_retries
        try:
            with throttle:
                resp = client.post(url, json=body, headers=headers, timeout=ep.timeout)
        except httpx.TransportError as exc:
            if last:
                raise GenerationError("transport", str(exc)) from exc
            logger.warning("transport error (%s), retrying in %.2fs", exc, delay)
        else:
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise GenerationError("empty_response", f"invalid JSON body: {exc}") from exc
            retryable = resp.status_code == 429 or resp.status_code >= 500
            if last or not retryable:
                raise GenerationError("http_status", f"HTTP {resp.status_code}")
            logger.warning("HTTP %d, retrying in %.2fs", resp.status_code, delay)
        sleep(delay * (1.0 + 0.25 * rng.random()))
        delay *= 2
    raise AssertionError("unreachable")  # pragma: no cover


def llm_generate(req: GenerationRequest, ep: GeneratorEndpoint, client: Optional[httpx.Client] = None,
                 sleep: Callable[[float], None] = time.sleep, throttle: Optional[Throttle] = None,
                 api_key: Optional[str] = None) -> list[str]:
    """One chat-completion call per requested candidate; returns the raw fenced expressions."""
    key = api_key or _api_key()
    own_client = client is None
    client = client or httpx.Client(timeout=ep.timeout)
    throttle = throttle or Throttle(ep.max_concurrent, ep.requests_per_minute)
    url = ep.base_url.rstrip("/") + "/v1/chat/completions"
    headers = {"Authorization": f"Bearer {key}"}
    body = {"model": ep.model_name, "temperature": ep.temperature, "messages": build_prompt(req)}
    jitter = random.Random(req.seed)
    out = []
    try:
        for _ in range(req.num_candidates):
            payload = _post_with_retries(client, url, body, headers, ep, jitter, sleep, throttle)
            try:
                content = payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                raise GenerationError("empty_response", "response has no choices[0].message.content") from None
            out.append(extract_code_block(content))
    finally:
        if own_client:
            client.close()
    return out
