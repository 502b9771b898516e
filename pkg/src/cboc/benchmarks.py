"""Benchmark black boxes, client heterogeneity, and performance accounting.

Every problem is exposed in *maximisation* form: a function that is
minimised in the literature (all five here) is negated, so the optimisation
loop always maximises :meth:`BlackBoxProblem.value`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.optimize import minimize

# Shekel-10
SHEKEL_XI = np.array([1, 2, 2, 4, 4, 6, 3, 7, 5, 5], dtype=float) / 10.0
SHEKEL_F = np.array(
    [
        [4, 1, 8, 6, 3, 2, 5, 8, 6, 7],
        [4, 1, 8, 6, 7, 9, 3, 1, 2, 3.6],
        [4, 1, 8, 6, 3, 2, 5, 8, 6, 7],
        [4, 1, 8, 6, 7, 9, 3, 1, 2, 3.6],
    ],
    dtype=float,
)

# Hartmann-6
HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ],
    dtype=float,
)
HARTMANN_P = np.array(
    [
        [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
        [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
        [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
        [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
    ]
)

SENSES = ("minimize", "maximize")


class BenchmarkError(ValueError):
    pass


def levy(X: np.ndarray) -> np.ndarray:
    w = 1.0 + (X - 1.0) / 4.0
    head = np.sin(np.pi * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1) ** 2 * (1 + 10 * np.sin(np.pi * w[:, :-1] + 1) ** 2), axis=1)
    tail = (w[:, -1] - 1) ** 2 * (1 + np.sin(2 * np.pi * w[:, -1]) ** 2)
    return head + mid + tail


def ackley(X: np.ndarray) -> np.ndarray:
    d = X.shape[1]
    a = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(X * X, axis=1) / d))
    b = -np.exp(np.sum(np.cos(2 * np.pi * X), axis=1) / d)
    return a + b + 20.0 + math.e


def branin(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    b = 5.1 / (4 * np.pi**2)
    c = 5 / np.pi
    s = 10 * (1 - 1 / (8 * np.pi))
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + s * np.cos(x1) + 10


def shekel10(X: np.ndarray) -> np.ndarray:
    sq = np.sum((X[:, :, None] - SHEKEL_F[None, :, :]) ** 2, axis=1)  # (N, 10)
    return -np.sum(1.0 / (sq + SHEKEL_XI), axis=1)


def hartmann6(X: np.ndarray) -> np.ndarray:
    inner = np.sum(HARTMANN_A[None] * (X[:, None, :] - HARTMANN_P[None]) ** 2, axis=2)
    return -np.exp(-inner) @ HARTMANN_ALPHA


@dataclass(frozen=True)
class HeteroDistribution:
    """``a1 ~ Uniform(lo, hi)``, ``a2 ~ N(mean, sd)``, ``a3 ~ N(mean, sd)``."""

    a1_range: tuple[float, float] = (0.5, 1.0)
    a2_normal: tuple[float, float] = (0.0, 1.0)
    a3_normal: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self) -> None:
        lo, hi = self.a1_range
        if not (0 < lo <= hi):
            raise BenchmarkError("a1 range must satisfy 0 < lo <= hi")
        if self.a2_normal[1] < 0 or self.a3_normal[1] < 0:
            raise BenchmarkError("normal sd must be >= 0")


@dataclass(frozen=True)
class BaseFunction:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    bounds: Callable[[int], np.ndarray]
    fixed_dim: int | None
    hetero: HeteroDistribution
    # known global minimisers over R^D (for a given dimension)
    minimizers: Callable[[int], np.ndarray]


def _cube(lo: float, hi: float) -> Callable[[int], np.ndarray]:
    return lambda d: np.tile([lo, hi], (d, 1)).astype(float)


def _branin_minimizers(_: int) -> np.ndarray:
    # cos(x1) = -1 and the square vanishes: x1 = (2m+1) pi
    x1 = np.pi * (2 * np.arange(-6, 6) + 1)
    x2 = 5.1 / (4 * np.pi**2) * x1**2 - 5 / np.pi * x1 + 6
    return np.column_stack([x1, x2])


@lru_cache(maxsize=None)
def _polished_minimizer(name: str) -> tuple[float, ...]:
    """Tight local polish of the textbook minimiser for functions without closed forms."""
    start = {"shekel10": [4.0] * 4, "hartmann6": [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573]}[name]
    fn = REGISTRY[name].fn
    res = minimize(
        lambda x: float(fn(x[None, :])[0]),
        np.array(start),
        method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 40000, "maxfev": 40000},
    )
    return tuple(res.x)


REGISTRY: dict[str, BaseFunction] = {
    "levy": BaseFunction(
        "levy", levy, _cube(-10.0, 10.0), None, HeteroDistribution((0.5, 1.0), (0.0, 1.0), (0.0, 1.0)),
        lambda d: np.ones((1, d)),
    ),
    "shekel10": BaseFunction(
        "shekel10", shekel10, _cube(0.0, 10.0), 4,
        HeteroDistribution((0.5, 1.0), (0.0, math.sqrt(2.0)), (0.0, 1.0)),
        lambda d: np.array([_polished_minimizer("shekel10")]),
    ),
    "hartmann6": BaseFunction(
        "hartmann6", hartmann6, _cube(0.0, 1.0), 6, HeteroDistribution((0.5, 2.0), (0.0, 1.0), (0.0, 1.0)),
        lambda d: np.array([_polished_minimizer("hartmann6")]),
    ),
    "branin": BaseFunction(
        "branin", branin, lambda d: np.array([[-5.0, 10.0], [0.0, 15.0]]), 2,
        HeteroDistribution((0.5, 1.0), (0.0, 1.0), (0.0, 1.0)), _branin_minimizers,
    ),
    "ackley": BaseFunction(
        "ackley", ackley, _cube(-32.768, 32.768), None, HeteroDistribution((1.0, 2.0), (0.5, 1.0), (0.5, 1.0)),
        lambda d: np.zeros((1, d)),
    ),
}


def register_benchmark(base: BaseFunction, *, replace_existing: bool = False) -> None:
    """Make a user-supplied black box available to :func:`make_problem` by name."""
    if base.name in REGISTRY and not replace_existing:
        raise BenchmarkError(f"benchmark {base.name!r} is already registered")
    REGISTRY[base.name] = base
    _box_optimum.cache_clear()


def resolve_dim(name: str, dim: int | None) -> int:
    if name not in REGISTRY:
        raise BenchmarkError(f"unknown benchmark {name!r}; choose from {sorted(REGISTRY)}")
    fixed = REGISTRY[name].fixed_dim
    if fixed is not None:
        if dim is not None and dim != fixed:
            raise BenchmarkError(f"{name} is {fixed}-dimensional, got D={dim}")
        return fixed
    if dim is None or dim < 1:
        raise BenchmarkError(f"{name} needs a positive dimension D")
    return dim


def canonical_bounds(name: str, dim: int | None = None) -> np.ndarray:
    d = resolve_dim(name, dim)
    return REGISTRY[name].bounds(d)


def eval_base(name: str, x, *, check_domain: bool = True):
    """Evaluate an untransformed benchmark at one point or a batch of rows.

    With ``check_domain`` the input must lie in the function's canonical box.
    """
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if name not in REGISTRY:
        raise BenchmarkError(f"unknown benchmark {name!r}; choose from {sorted(REGISTRY)}")
    d = REGISTRY[name].fixed_dim or X.shape[1]
    if X.shape[1] != d:
        raise BenchmarkError(f"{name} expects D={d}, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise BenchmarkError("inputs must be finite")
    if check_domain:
        b = REGISTRY[name].bounds(d)
        if np.any(X < b[:, 0]) or np.any(X > b[:, 1]):
            raise BenchmarkError(f"point outside the {name} domain")
    out = REGISTRY[name].fn(X)
    return float(out[0]) if single else out


@lru_cache(maxsize=4096)
def _box_optimum(name: str, dim: int, shift: float, sense: str, bounds_key: tuple) -> tuple[float, tuple]:
    """Optimum of ``f(x + shift)`` over the search box, in ``f`` units.

    Uses a known minimiser when one lands inside the box after shifting,
    otherwise a multi-start numerical search (~10^6 evaluations).
    """
    bounds = np.array(bounds_key).reshape(dim, 2)
    fn = REGISTRY[name].fn
    sign = 1.0 if sense == "minimize" else -1.0
    if sense == "minimize":
        cands = REGISTRY[name].minimizers(dim) - shift
        inside = np.all((cands >= bounds[:, 0]) & (cands <= bounds[:, 1]), axis=1)
        if np.any(inside):
            x = cands[inside][0]
            return float(fn((x + shift)[None, :])[0]), tuple(x)

    rng = np.random.default_rng(20240607)
    best_vals, best_pts = [], []
    for _ in range(10):
        X = rng.uniform(bounds[:, 0], bounds[:, 1], size=(50_000, dim))
        vals = sign * fn(X + shift)
        idx = np.argsort(vals)[:5]
        best_vals.extend(vals[idx])
        best_pts.extend(X[idx])
    starts = np.array(best_pts)[np.argsort(best_vals)[:20]]
    if sense == "minimize":
        corners = np.clip(REGISTRY[name].minimizers(dim) - shift, bounds[:, 0], bounds[:, 1])
    else:
        corners = np.empty((0, dim))
    x_best, f_best = None, np.inf
    for x0 in np.vstack([starts, corners]):
        res = minimize(
            lambda x: float(sign * fn((x + shift)[None, :])[0]),
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxfun": 20_000, "ftol": 1e-15, "gtol": 1e-12},
        )
        if res.fun < f_best:
            x_best, f_best = res.x, float(res.fun)
    return sign * f_best, tuple(x_best)


@dataclass(frozen=True)
class BlackBoxProblem:
    """A (possibly shifted and rescaled) benchmark in maximisation form.

    The client-specific function is ``a1 * f(x + a3) + a2``; with
    ``sense="minimize"`` the loop maximises its negation. ``y_star`` is the
    optimum of that maximised quantity over ``bounds``.
    """

    function: str
    dim: int
    bounds: np.ndarray = field(repr=False)
    sense: str = "minimize"
    a1: float = 1.0
    a2: float = 0.0
    a3: float = 0.0
    noise_sd: float = 0.0
    y_star: float = field(default=float("nan"))
    x_star: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.sense not in SENSES:
            raise BenchmarkError(f"sense must be one of {SENSES}")
        if not self.a1 > 0:
            raise BenchmarkError("a1 must be positive")
        if self.noise_sd < 0:
            raise BenchmarkError("noise_sd must be >= 0")
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float))

    def transformed(self, x) -> np.ndarray:
        """``a1 * f(x + a3) + a2`` in the function's own sense (no negation, no noise)."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        return self.a1 * REGISTRY[self.function].fn(X + self.a3) + self.a2

    def value(self, x):
        """Noise-free response in maximisation form; scalar for a single point."""
        x = np.asarray(x, dtype=float)
        out = self.transformed(x)
        if self.sense == "minimize":
            out = -out
        return float(out[0]) if x.ndim == 1 else out

    def in_bounds(self, x, tol: float = 1e-12) -> bool:
        X = np.atleast_2d(x)
        return bool(np.all(X >= self.bounds[:, 0] - tol) and np.all(X <= self.bounds[:, 1] + tol))


def make_problem(
    name: str,
    dim: int | None = None,
    *,
    sense: str = "minimize",
    a1: float = 1.0,
    a2: float = 0.0,
    a3: float = 0.0,
    noise_sd: float = 0.0,
    bounds=None,
) -> BlackBoxProblem:
    d = resolve_dim(name, dim)
    b = canonical_bounds(name, d) if bounds is None else np.asarray(bounds, dtype=float)
    if b.shape != (d, 2):
        raise BenchmarkError(f"bounds must have shape ({d}, 2)")
    base = BlackBoxProblem(name, d, b, sense, 1.0, 0.0, 0.0, noise_sd)
    return heterogenize(base, a1, a2, a3)


def heterogenize(problem: BlackBoxProblem, a1: float, a2: float, a3: float) -> BlackBoxProblem:
    """Return ``problem`` with client transform ``a1 * f(x + a3) + a2`` and its optimum."""
    if not a1 > 0:
        raise BenchmarkError("a1 must be positive")
    f_opt, x_opt = _box_optimum(
        problem.function, problem.dim, float(a3), problem.sense, tuple(problem.bounds.ravel())
    )
    y_star = a1 * f_opt + a2
    if problem.sense == "minimize":
        y_star = -y_star
    return replace(
        problem, a1=float(a1), a2=float(a2), a3=float(a3), y_star=float(y_star), x_star=np.array(x_opt)
    )


def sample_hetero(dist: HeteroDistribution, rng: np.random.Generator) -> tuple[float, float, float]:
    a1 = rng.uniform(*dist.a1_range)
    a2 = rng.normal(*dist.a2_normal)
    a3 = rng.normal(*dist.a3_normal)
    return float(a1), float(a2), float(a3)


def observe(problem: BlackBoxProblem, x, rng: np.random.Generator | None = None) -> float:
    """One experiment: maximisation-form response plus Gaussian noise."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != problem.dim:
        raise BenchmarkError(f"expected a {problem.dim}-dimensional design")
    if not problem.in_bounds(x):
        raise BenchmarkError("design outside the problem bounds")
    y = problem.value(x)
    if problem.noise_sd > 0:
        if rng is None:
            raise BenchmarkError("a random stream is required when noise_sd > 0")
        y += problem.noise_sd * rng.standard_normal()
    return float(y)


def gap_metric(y0_best: float, yT_best: float, y_star: float) -> float:
    """Fraction of the initial optimality gap closed: ``|y0 - yT| / |y0 - y*|``."""
    denom = abs(y0_best - y_star)
    if denom <= 1e-12:
        return 1.0
    return float(min(max(abs(y0_best - yT_best) / denom, 0.0), 1.0 + 1e-9))


def average_gap(gaps) -> tuple[float, float]:
    """Mean over runs of the per-run client-average Gap, and the sd of those run means.

    ``gaps`` is a sequence of runs, each a sequence of per-client Gap values.
    The sd uses ``ddof=1`` and is 0 for a single run.
    """
    run_means = np.array([np.mean(np.asarray(g, dtype=float)) for g in gaps])
    if run_means.size == 0:
        raise ValueError("average_gap needs at least one run")
    sd = float(np.std(run_means, ddof=1)) if run_means.size > 1 else 0.0
    return float(np.mean(run_means)), sd


def theorem_constant(kappa: float) -> float:
    """``C = log(1 / (2 pi kappa^2))`` from the EI stopping constant."""
    return math.log(1.0 / (2.0 * math.pi * kappa**2))


def theorem1_bound(T: int, D: int, v: float, kappa: float) -> float:
    """Cumulative-regret bound for homogeneous EI clients, without the o(T) tail sum.

    ``sqrt(6T[(log T)^3 + 1 + C](log T)^(D+1) / log(1 + v^-2))
    + sqrt(2T (log T)^(D+4) / log(1 + v^-2))``.
    """
    if not T > 1:
        raise ValueError("T must be > 1")
    if not v > 0:
        raise ValueError("v must be > 0")
    if not (0 < kappa < 1.0 / math.sqrt(2.0 * math.pi)):
        raise ValueError("kappa must lie in (0, 1/sqrt(2 pi)) so that C > 0")
    C = theorem_constant(kappa)
    lt = math.log(T)
    denom = math.log(1.0 + v**-2)
    first = math.sqrt(6.0 * T * (lt**3 + 1.0 + C) * lt ** (D + 1) / denom)
    second = math.sqrt(2.0 * T * lt ** (D + 4) / denom)
    return first + second


def ei_stopping(ei_max: float, kappa: float) -> bool:
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    return bool(ei_max < kappa)


@dataclass(frozen=True)
class RegretRecord:
    instantaneous: np.ndarray
    cumulative: np.ndarray
    noise_sd: float
    dim: int
    kappa: float | None = None

    @property
    def horizon(self) -> int:
        return self.instantaneous.size

    @property
    def constant(self) -> float | None:
        return None if self.kappa is None else theorem_constant(self.kappa)

    def bound(self, v: float | None = None) -> float:
        """Bound at the record's horizon; the noise sd defaults to the problem's."""
        if self.kappa is None:
            raise ValueError("a stopping constant kappa is needed for the bound")
        return theorem1_bound(self.horizon, self.dim, v if v is not None else self.noise_sd, self.kappa)


def regret_from_points(problem: BlackBoxProblem, points, kappa: float | None = None) -> RegretRecord:
    """Instantaneous regret ``y* - f(x_new)`` at each sampled point, and its running sum.

    Values in ``[-1e-9, 0)`` (round-off against a numerically located optimum)
    are set to zero; anything lower is kept so callers can detect a bad ``y*``.
    """
    values = problem.value(np.atleast_2d(points))
    r = problem.y_star - values
    r = np.where((r < 0) & (r >= -1e-9), 0.0, r)
    return RegretRecord(r, np.cumsum(r), problem.noise_sd, problem.dim, kappa)


def regret_track(history, problems, kappa: float | None = None) -> list[RegretRecord]:
    """Per-client regret records for a finished run."""
    if isinstance(problems, BlackBoxProblem):
        problems = [problems] * history.n_clients
    return [
        regret_from_points(problems[k], history.consensus_points[k], kappa)
        for k in range(history.n_clients)
    ]
