"""ADMM for ``min f(x) + g(z)  s.t.  x - z = 0`` with adaptive penalty.

``f(x) = 0.5 * ||M x - y||^2`` and ``g`` is one of

* Lasso:       ``lambda1 * ||z||_1``
* ElasticNet:  ``lambda1 * ||z||_1 + 0.5 * lambda2 * ||z||^2``
* GroupLasso:  ``lambda1 * sum_g ||z_g||_2``

The multiplier ``w`` is kept unscaled and updated as ``w <- w - beta (x - z)``.
Residuals follow the usual convention: ``r = ||x - z||`` is the constraint
residual and ``s = beta ||z_k - z_{k-1}||`` the dual residual.

Penalty rules written in the expression language see these residuals under
the names used in the residual-balancing literature this rule family comes
from: ``d`` is the constraint residual ``r`` and ``p`` is the dual residual
``s``.  With that binding ``if d > mu*p then eta*beta ...`` inflates beta when
the constraint residual dominates, exactly like :class:`ResidualBalancing`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import dsl


class NumericalError(ArithmeticError):
    pass


class NonConvergence(RuntimeError):
    pass


class DslEvaluationError(RuntimeError):
    pass


class ProblemSpecError(ValueError):
    pass


# --------------------------------------------------------------------------
# problems


@dataclass
class StructuredProblem:
    kind: str  # "lasso" | "elasticnet" | "grouplasso"
    M: np.ndarray
    y: np.ndarray
    lambda1: float
    lambda2: float = 0.0
    groups: Optional[list[list[int]]] = None
    name: str = ""

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.M.ndim != 2 or self.y.shape != (self.M.shape[0],):
            raise ProblemSpecError(f"inconsistent dimensions M{self.M.shape} y{self.y.shape}")
        if self.kind not in ("lasso", "elasticnet", "grouplasso"):
            raise ProblemSpecError(f"unknown problem kind {self.kind!r}")
        if not self.lambda1 > 0:
            raise ProblemSpecError("lambda1 must be positive")
        if self.kind == "elasticnet" and not self.lambda2 > 0:
            raise ProblemSpecError("lambda2 must be positive for elasticnet")
        if self.kind == "grouplasso":
            if not self.groups:
                raise ProblemSpecError("grouplasso needs groups")
            flat = sorted(i for g in self.groups for i in g)
            if flat != list(range(self.n)) or any(len(g) == 0 for g in self.groups):
                raise ProblemSpecError("groups must partition 0..n-1")

    @property
    def n(self) -> int:
        return self.M.shape[1]

    def f(self, x: np.ndarray) -> float:
        res = self.M @ x - self.y
        return 0.5 * float(res @ res)

    def g(self, z: np.ndarray) -> float:
        if self.kind == "grouplasso":
            return self.lambda1 * sum(float(np.linalg.norm(z[g])) for g in self.groups)
        val = self.lambda1 * float(np.abs(z).sum())
        if self.kind == "elasticnet":
            val += 0.5 * self.lambda2 * float(z @ z)
        return val

    def objective(self, x: np.ndarray, z: Optional[np.ndarray] = None) -> float:
        return self.f(x) + self.g(x if z is None else z)

    def prox_g(self, v: np.ndarray, t: float) -> np.ndarray:
        """``argmin_z g(z) + ||z - v||^2 / (2 t)``."""
        if self.kind == "lasso":
            return soft_threshold(v, self.lambda1 * t)
        if self.kind == "elasticnet":
            return soft_threshold(v, self.lambda1 * t) / (1.0 + self.lambda2 * t)
        out = np.zeros_like(v)
        for g in self.groups:
            vg = v[g]
            nrm = np.linalg.norm(vg)
            if nrm > 0:
                out[g] = max(0.0, 1.0 - self.lambda1 * t / nrm) * vg
        return out


def soft_threshold(v, t):
    """``sign(v) * max(|v| - t, 0)``; works on scalars and arrays."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    out = np.sign(v) * np.maximum(np.abs(v) - t, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def random_problem(
    kind: str,
    m: int,
    n: int,
    seed: int,
    lambda_ratio: float = 0.1,
    lambda2: float = 0.1,
    sparsity: float = 0.1,
    condition: float = 1.0,
    group_size: int = 4,
    noise: float = 0.01,
) -> StructuredProblem:
    """Seeded Gaussian design with sparse ground truth.

    ``condition > 1`` rescales the columns of M geometrically so that the
    column norms span ``condition``; ``lambda1`` is ``lambda_ratio`` times
    ``||M^T y||_inf`` (above which the solution is identically zero).
    """
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((m, n)) / math.sqrt(m)
    if condition > 1:
        M = M * np.geomspace(1.0, 1.0 / condition, n)
    x_true = np.zeros(n)
    k = max(1, int(round(sparsity * n)))
    support = rng.choice(n, size=k, replace=False)
    x_true[support] = rng.standard_normal(k)
    y = M @ x_true + noise * rng.standard_normal(m)
    lam = lambda_ratio * float(np.abs(M.T @ y).max())
    groups = None
    if kind == "grouplasso":
        groups = [list(range(i, min(i + group_size, n))) for i in range(0, n, group_size)]
    return StructuredProblem(kind, M, y, lam, lambda2 if kind == "elasticnet" else 0.0, groups,
                             name=f"{kind}-m{m}-n{n}-s{seed}")


def problem_to_dict(p: StructuredProblem) -> dict:
    return {
        "kind": p.kind,
        "name": p.name,
        "dims": list(p.M.shape),
        "M": p.M.tolist(),
        "y": p.y.tolist(),
        "lambda1": p.lambda1,
        "lambda2": p.lambda2,
        "groups": p.groups,
    }


def problem_from_dict(d: dict) -> StructuredProblem:
    """Build a problem from an explicit matrix or from a ``seed`` plus generator arguments."""
    try:
        kind = d["kind"]
        if "seed" in d and "M" not in d:
            m, n = d["dims"]
            extra = {k: d[k] for k in ("lambda_ratio", "lambda2", "sparsity", "condition", "group_size", "noise") if k in d}
            p = random_problem(kind, int(m), int(n), int(d["seed"]), **extra)
            if "name" in d:
                p.name = d["name"]
            return p
        p = StructuredProblem(kind, np.array(d["M"], dtype=float), np.array(d["y"], dtype=float),
                              float(d["lambda1"]), float(d.get("lambda2", 0.0)), d.get("groups"),
                              name=d.get("name", ""))
        if "dims" in d and list(p.M.shape) != list(d["dims"]):
            raise ProblemSpecError(f"dims {d['dims']} disagree with matrix shape {list(p.M.shape)}")
        return p
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProblemSpecError):
            raise
        raise ProblemSpecError(f"bad problem description: {exc}") from exc


def load_problem(path: Union[str, Path]) -> StructuredProblem:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ProblemSpecError(f"cannot read problem file {path}: {exc}") from exc
    p = problem_from_dict(data)
    if not p.name:
        p.name = Path(path).stem
    return p


def save_problem(p: StructuredProblem, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(p)))


# --------------------------------------------------------------------------
# penalty strategies


@dataclass(frozen=True)
class Fixed:
    beta_min: float = 1e-6
    beta_max: float = 1e6
    update_period: int = 1
    name: str = "fixed"


@dataclass(frozen=True)
class ResidualBalancing:
    mu: float = 10.0
    eta: float = 2.0
    beta_min: float = 1e-6
    beta_max: float = 1e6
    update_period: int = 1
    name: str = "residual_balancing"

    def __post_init__(self):
        if not (self.mu > 1 and self.eta > 1):
            raise ValueError("residual balancing needs mu > 1 and eta > 1")


@dataclass(frozen=True)
class DslRule:
    program: dsl.Program
    beta_min: float = 1e-6
    beta_max: float = 1e6
    update_period: int = 1
    limits: dsl.EvalLimits = dsl.EvalLimits()
    name: str = "rule"

    def __post_init__(self):
        if self.program.signature is not dsl.PENALTY:
            raise ValueError("penalty rules need the PENALTY signature")


PenaltyStrategy = Union[Fixed, ResidualBalancing, DslRule]


def _check_clamps(strategy) -> None:
    if not (0 < strategy.beta_min < strategy.beta_max):
        raise ValueError("need 0 < beta_min < beta_max")
    if strategy.update_period < 1:
        raise ValueError("update_period must be positive")


def update_beta(strategy: PenaltyStrategy, r_norm: float, s_norm: float, beta: float, k: int) -> float:
    if isinstance(strategy, Fixed):
        new = beta
    elif isinstance(strategy, ResidualBalancing):
        if r_norm > strategy.mu * s_norm:
            new = strategy.eta * beta
        elif s_norm > strategy.mu * r_norm:
            new = beta / strategy.eta
        else:
            new = beta
    else:
        env = {"p": s_norm, "d": r_norm, "beta": beta, "k": float(k)}
        try:
            new = dsl.evaluate(strategy.program, env, strategy.limits)
        except dsl.DslError as exc:
            raise DslEvaluationError(f"penalty rule {strategy.program.source} failed: {exc}") from exc
    return min(max(new, strategy.beta_min), strategy.beta_max)


# --------------------------------------------------------------------------
# solver


@dataclass
class AdmmState:
    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    beta: float
    k: int = 0
    r_norm: float = math.inf
    s_norm: float = math.inf
    beta_trace: list[float] = field(default_factory=list)
    r_trace: list[float] = field(default_factory=list)
    s_trace: list[float] = field(default_factory=list)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    objective: float
    r_norm: float
    s_norm: float
    beta_trace: list[float]
    x: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    r_trace: list[float] = field(default_factory=list, repr=False)
    s_trace: list[float] = field(default_factory=list, repr=False)


def solve(
    problem: StructuredProblem,
    strategy: PenaltyStrategy,
    beta0: float = 1.0,
    tol_abs: float = 1e-6,
    tol_rel: float = 1e-4,
    max_iter: int = 1000,
) -> SolveReport:
    """Run ADMM from zero iterates; ``beta_trace[k]`` is the penalty used in iteration ``k+1``."""
    _check_clamps(strategy)
    if not (strategy.beta_min <= beta0 <= strategy.beta_max):
        raise ValueError(f"beta0={beta0} outside [{strategy.beta_min}, {strategy.beta_max}]")
    if tol_abs <= 0 or tol_rel <= 0 or max_iter < 1:
        raise ValueError("tolerances and max_iter must be positive")

    n = problem.n
    M = problem.M
    MtM = M.T @ M
    Mty = M.T @ problem.y
    eye = np.eye(n)
    st = AdmmState(np.zeros(n), np.zeros(n), np.zeros(n), float(beta0))
    factor = None
    factor_beta = None
    sqrt_n = math.sqrt(n)
    converged = False

    while st.k < max_iter:
        beta = st.beta
        if factor_beta != beta:
            factor = cho_factor(MtM + beta * eye)
            factor_beta = beta
        st.x = cho_solve(factor, Mty + st.w + beta * st.z)
        z_prev = st.z
        st.z = problem.prox_g(st.x - st.w / beta, 1.0 / beta)
        diff = st.x - st.z
        st.w = st.w - beta * diff
        st.k += 1
        st.r_norm = float(np.linalg.norm(diff))
        st.s_norm = beta * float(np.linalg.norm(st.z - z_prev))
        st.beta_trace.append(beta)
        st.r_trace.append(st.r_norm)
        st.s_trace.append(st.s_norm)
        if not (np.all(np.isfinite(st.x)) and np.all(np.isfinite(st.w)) and math.isfinite(st.s_norm)):
            raise NumericalError(f"non-finite iterate at iteration {st.k}")
        eps_pri = sqrt_n * tol_abs + tol_rel * max(np.linalg.norm(st.x), np.linalg.norm(st.z))
        eps_dual = sqrt_n * tol_abs + tol_rel * np.linalg.norm(st.w)
        if st.r_norm <= eps_pri and st.s_norm <= eps_dual:
            converged = True
            break
        if st.k % strategy.update_period == 0:
            st.beta = update_beta(strategy, st.r_norm, st.s_norm, beta, st.k)

    return SolveReport(
        converged=converged,
        iterations=st.k,
        objective=problem.f(st.x) + problem.g(st.z),
        r_norm=st.r_norm,
        s_norm=st.s_norm,
        beta_trace=st.beta_trace,
        x=st.x,
        z=st.z,
        r_trace=st.r_trace,
        s_trace=st.s_trace,
    )


def heuristic_beta(problem: StructuredProblem) -> float:
    """Geometric mean of the extreme eigenvalues of ``M^T M`` (floored away from zero)."""
    eig = np.linalg.eigvalsh(problem.M.T @ problem.M)
    hi = float(eig[-1])
    lo = max(float(eig[0]), 1e-3 * hi)
    return math.sqrt(hi * lo)


# --------------------------------------------------------------------------
# reference oracle


def _smooth(problem: StructuredProblem, x: np.ndarray) -> tuple[float, np.ndarray]:
    res = problem.M @ x - problem.y
    return 0.5 * float(res @ res), problem.M.T @ res


def _prox_reference(problem: StructuredProblem, v: np.ndarray, t: float) -> np.ndarray:
    # written out separately from StructuredProblem.prox_g on purpose
    lam = problem.lambda1 * t
    if problem.kind == "grouplasso":
        out = v.copy()
        for g in problem.groups:
            nrm = math.sqrt(sum(v[i] * v[i] for i in g))
            scale = 0.0 if nrm <= lam else (nrm - lam) / nrm
            out[g] = scale * v[g]
        return out
    shrunk = np.where(v > lam, v - lam, np.where(v < -lam, v + lam, 0.0))
    if problem.kind == "elasticnet":
        shrunk = shrunk / (1.0 + problem.lambda2 * t)
    return shrunk


def solve_reference(problem: StructuredProblem, tol: float = 1e-10, max_iter: int = 200_000):
    """Proximal gradient (ISTA) with backtracking; returns ``(x*, objective*)``.

    Stops when the gradient-mapping norm ``||x_new - x|| / t`` drops below ``tol``.
    """
    x = np.zeros(problem.n)
    t = 1.0
    fx, grad = _smooth(problem, x)
    for _ in range(max_iter):
        while True:
            cand = _prox_reference(problem, x - t * grad, t)
            step = cand - x
            fc, gc = _smooth(problem, cand)
            if fc <= fx + grad @ step + (step @ step) / (2 * t) + 1e-15 * max(1.0, abs(fx)):
                break
            t *= 0.5
        x, fx, grad = cand, fc, gc
        if np.linalg.norm(step) / t <= tol:
            return x, problem.objective(x)
        t *= 1.1  # let the step grow back after conservative backtracks
    raise NonConvergence(f"ISTA did not reach gradient-mapping norm {tol} in {max_iter} iterations")
