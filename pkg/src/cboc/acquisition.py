"""Expected improvement, knowledge gradient, and their maximisation over a box."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import ndtr

from .gp import Dataset, GaussianProcess, GPHyperparameters, kernel_matrix

UTILITIES = ("ei", "kg")
KG_FLOOR = -1e-9  # Monte-Carlo KG estimates are clamped from below here
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class AcquisitionConfig:
    """Knobs for utility evaluation and its optimiser.

    ``n_raw_candidates=None`` means ``512 * D``.
    """

    utility_kind: str = "ei"
    n_restarts: int = 8
    n_raw_candidates: int | None = None
    kg_fantasies: int = 64
    kg_inner_grid: int = 256
    pattern_evals: int = 100

    def __post_init__(self) -> None:
        if self.utility_kind not in UTILITIES:
            raise ValueError(f"utility_kind must be one of {UTILITIES}, got {self.utility_kind!r}")
        for name in ("n_restarts", "kg_fantasies", "kg_inner_grid", "pattern_evals"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_raw_candidates is not None and self.n_raw_candidates < 1:
            raise ValueError("n_raw_candidates must be >= 1")

    def raw_candidates(self, dim: int) -> int:
        return self.n_raw_candidates if self.n_raw_candidates is not None else 512 * dim


class UtilityValue(NamedTuple):
    argpoint: np.ndarray
    value: float


def expected_improvement(mean, sd, incumbent):
    """Closed-form EI for a maximisation problem.

    Accepts scalars or broadcastable arrays; returns the same shape. Where
    ``sd == 0`` the result is ``max(mean - incumbent, 0)``.
    """
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    incumbent = np.asarray(incumbent, dtype=float)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd)) and np.all(np.isfinite(incumbent))):
        raise ValueError("expected_improvement inputs must be finite")
    if np.any(sd < 0):
        raise ValueError("sd must be non-negative")
    diff = mean - incumbent
    safe = np.where(sd > 0, sd, 1.0)
    # a subnormal sd sends z to +-inf, where both terms have the right limit
    with np.errstate(over="ignore", invalid="ignore"):
        z = diff / safe
        ei = np.where(
            sd > 0,
            sd * (_INV_SQRT_2PI * np.exp(-0.5 * z * z)) + diff * ndtr(z),
            np.maximum(diff, 0.0),
        )
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


def _ei_utility(gp: GaussianProcess, incumbent: float) -> Callable[[np.ndarray], np.ndarray]:
    def utility(X: np.ndarray) -> np.ndarray:
        mean, var = gp.predict(X)
        return expected_improvement(mean, np.sqrt(var), incumbent)

    return utility


def _kg_utility(
    gp: GaussianProcess, inner: np.ndarray, normals: np.ndarray, chunk: int = 256
) -> Callable[[np.ndarray], np.ndarray]:
    """KG with a discrete inner maximisation over ``inner`` (plus each query point).

    The fantasy update of the posterior mean is linear in the fantasy
    observation, so ``mu_new(a) = mu(a) + cov(a, x) / sd_y(x) * Z`` with
    standard normal ``Z``; ``normals`` fixes those draws (common random
    numbers across query points).
    """
    noise_var = gp.hyper.noise_sd**2
    mu_inner, _ = gp.predict(inner)
    W_inner = gp.whitened(inner)

    def utility(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(X.shape[0])
        for start in range(0, X.shape[0], chunk):
            Xc = X[start : start + chunk]
            mu_x, var_x = gp.predict(Xc)
            sd_y = np.sqrt(var_x + noise_var)
            W_x = gp.whitened(Xc)
            cov = kernel_matrix(inner, Xc, gp.hyper) - W_inner.T @ W_x  # (M, B)
            with np.errstate(divide="ignore", invalid="ignore"):
                slope = np.where(sd_y > 0, cov / sd_y, 0.0)
                slope_x = np.where(sd_y > 0, var_x / sd_y, 0.0)
            # candidates: inner set rows, then the query point itself
            base = np.vstack([np.broadcast_to(mu_inner[:, None], cov.shape), mu_x[None, :]])
            slopes = np.vstack([slope, slope_x[None, :]])
            current = base.max(axis=0)
            fantasy = base[:, :, None] + slopes[:, :, None] * normals[None, None, :]
            out[start : start + chunk] = fantasy.max(axis=0).mean(axis=1) - current
        return np.maximum(out, KG_FLOOR)

    return utility


def _kg_inner_set(data: Dataset, bounds: np.ndarray, cfg: AcquisitionConfig, rng: np.random.Generator):
    grid = rng.uniform(bounds[:, 0], bounds[:, 1], size=(cfg.kg_inner_grid, bounds.shape[0]))
    return np.vstack([grid, data.designs])


def knowledge_gradient(
    data: Dataset,
    hyper: GPHyperparameters,
    x,
    bounds,
    cfg: AcquisitionConfig,
    rng: np.random.Generator,
    *,
    candidates: np.ndarray | None = None,
    return_stderr: bool = False,
):
    """Monte-Carlo knowledge gradient at a single design ``x``.

    The inner maximisation runs over ``candidates`` (default: ``kg_inner_grid``
    uniform points from ``rng``) together with the data locations and ``x``.
    Slightly negative estimates are clamped to ``KG_FLOOR``. With
    ``return_stderr`` the Monte-Carlo standard error is returned too.
    """
    bounds = np.asarray(bounds, dtype=float)
    gp = GaussianProcess(data, hyper)
    if candidates is None:
        inner = _kg_inner_set(data, bounds, cfg, rng)
    else:
        inner = np.vstack([np.atleast_2d(candidates), data.designs])
    normals = rng.standard_normal(cfg.kg_fantasies)
    x = np.asarray(x, dtype=float).reshape(1, -1)

    mu_inner, _ = gp.predict(inner)
    mu_x, var_x = gp.predict(x)
    sd_y = math.sqrt(float(var_x[0]) + hyper.noise_sd**2)
    cov = kernel_matrix(inner, x, hyper)[:, 0] - gp.whitened(inner).T @ gp.whitened(x)[:, 0]
    base = np.append(mu_inner, mu_x[0])
    slope = np.append(cov, var_x[0]) / sd_y if sd_y > 0 else np.zeros(base.size)
    samples = (base[:, None] + slope[:, None] * normals[None, :]).max(axis=0) - base.max()
    kg = max(float(samples.mean()), KG_FLOOR)
    if return_stderr:
        return kg, float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else 0.0
    return kg


def pattern_search(
    utility: Callable[[np.ndarray], np.ndarray],
    starts: np.ndarray,
    start_values: np.ndarray,
    bounds: np.ndarray,
    max_evals: int = 100,
    initial_step: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Compass search maximising ``utility`` from each row of ``starts`` in parallel.

    Each sweep probes ``+-step`` along every coordinate (clipped to ``bounds``)
    for all starts at once, moves to the best improving probe, and halves the
    step of starts that found none. Stops after ``max_evals`` probes per start.
    """
    lo, hi = bounds[:, 0], bounds[:, 1]
    x = starts.copy()
    fx = start_values.copy()
    n, dim = x.shape
    step = np.tile(initial_step * (hi - lo), (n, 1))
    eye = np.eye(dim)
    sweeps = max(1, max_evals // (2 * dim))
    for _ in range(sweeps):
        # (n, 2*dim, dim) probes
        offsets = np.concatenate([eye, -eye])[None, :, :] * step[:, None, :]
        probes = np.clip(x[:, None, :] + offsets, lo, hi)
        values = utility(probes.reshape(-1, dim)).reshape(n, 2 * dim)
        best = np.argmax(values, axis=1)
        best_val = values[np.arange(n), best]
        move = best_val > fx
        x[move] = probes[np.arange(n), best][move]
        fx[move] = best_val[move]
        step[~move] *= 0.5
    return x, fx


def maximize_utility(
    data: Dataset,
    hyper: GPHyperparameters,
    incumbent: float,
    bounds,
    cfg: AcquisitionConfig,
    rng: np.random.Generator,
    *,
    trace: list | None = None,
) -> UtilityValue:
    """Maximise the configured utility over ``bounds`` (shape ``(D, 2)``).

    ``n_raw_candidates`` uniform draws are scored, the best ``n_restarts`` are
    refined by :func:`pattern_search`, and the overall best point is returned
    with its utility value. When ``trace`` is a list, the raw candidates and
    their values are appended to it as one ``(X, values)`` pair.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2 or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError("bounds must be a (D, 2) array with lower < upper")
    dim = bounds.shape[0]
    gp = GaussianProcess(data, hyper)
    if cfg.utility_kind == "ei":
        utility = _ei_utility(gp, incumbent)
    else:
        inner = _kg_inner_set(data, bounds, cfg, rng)
        utility = _kg_utility(gp, inner, rng.standard_normal(cfg.kg_fantasies))

    raw = rng.uniform(bounds[:, 0], bounds[:, 1], size=(cfg.raw_candidates(dim), dim))
    raw_values = utility(raw)
    if trace is not None:
        trace.append((raw.copy(), raw_values.copy()))
    top = np.argsort(-raw_values, kind="stable")[: cfg.n_restarts]
    x, fx = pattern_search(utility, raw[top], raw_values[top], bounds, cfg.pattern_evals)
    i = int(np.argmax(fx))
    return UtilityValue(np.clip(x[i], bounds[:, 0], bounds[:, 1]), float(fx[i]))
