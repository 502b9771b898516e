"""Exact Gaussian-process regression with a squared-exponential kernel.

Everything here is pure: a :class:`GaussianProcess` is built from a dataset
and a fixed set of hyperparameters and never mutated afterwards, so the same
object can be shared between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

LOG_2PI = math.log(2.0 * math.pi)

# relative to the variance scale u^2
JITTER_START = 1e-8
JITTER_MAX = 1e-4


class GPError(Exception):
    """Base class for surrogate failures."""


class SingularGramError(GPError):
    """Raised when the Gram matrix cannot be factorised even with max jitter."""


class FitError(GPError):
    """Raised when no hyperparameter candidate yields a usable Gram matrix."""


@dataclass(frozen=True)
class Dataset:
    """Designs ``(N, D)`` and their observed responses ``(N,)``."""

    designs: np.ndarray
    responses: np.ndarray

    def __post_init__(self) -> None:
        X = np.atleast_2d(np.asarray(self.designs, dtype=float))
        y = np.asarray(self.responses, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(
                f"designs and responses disagree on N: {X.shape[0]} vs {y.shape[0]}"
            )
        if not np.all(np.isfinite(X)):
            raise ValueError("design coordinates must be finite")
        object.__setattr__(self, "designs", X)
        object.__setattr__(self, "responses", y)

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def dim(self) -> int:
        return self.designs.shape[1]

    def append(self, x: np.ndarray, y: float) -> Dataset:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        return Dataset(np.vstack([self.designs, x]), np.append(self.responses, y))


@dataclass(frozen=True)
class GPHyperparameters:
    """Kernel amplitude ``u^2``, lengthscale and observation-noise sd."""

    variance_scale: float
    lengthscale: float
    noise_sd: float = 0.0

    def __post_init__(self) -> None:
        if not self.variance_scale > 0:
            raise ValueError(f"variance_scale must be > 0, got {self.variance_scale}")
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be > 0, got {self.lengthscale}")
        if not self.noise_sd >= 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")

    @property
    def amplitude(self) -> float:
        """The scale ``u`` (square root of ``variance_scale``)."""
        return math.sqrt(self.variance_scale)

    @classmethod
    def from_amplitude(cls, u: float, lengthscale: float, noise_sd: float) -> GPHyperparameters:
        return cls(u * u, lengthscale, noise_sd)


@dataclass(frozen=True)
class GPPosterior:
    mean: float
    variance_f: float
    variance_y: float


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel_eval(x1, x2, hyper: GPHyperparameters) -> float:
    """Squared-exponential covariance between two design points."""
    a = np.asarray(x1, dtype=float).reshape(-1)
    b = np.asarray(x2, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("kernel inputs must be finite")
    diff = a - b
    return hyper.variance_scale * math.exp(-float(diff @ diff) / (2.0 * hyper.lengthscale**2))


def kernel_matrix(A: np.ndarray, B: np.ndarray, hyper: GPHyperparameters) -> np.ndarray:
    """Cross-covariance matrix ``K(A, B)``."""
    return hyper.variance_scale * np.exp(-_sq_dists(A, B) / (2.0 * hyper.lengthscale**2))


def _factor(K: np.ndarray, hyper: GPHyperparameters) -> tuple[np.ndarray, float]:
    """Cholesky factor of ``K + (v^2 + jitter) I`` with jitter escalation."""
    n = K.shape[0]
    base = K + hyper.noise_sd**2 * np.eye(n)
    jitter = JITTER_START * hyper.variance_scale
    limit = JITTER_MAX * hyper.variance_scale * (1 + 1e-9)
    while jitter <= limit:
        L, info = lapack.dpotrf(base + jitter * np.eye(n), lower=1, clean=1)
        if info == 0:
            return L, jitter
        jitter *= 10.0
    raise SingularGramError(
        f"Gram matrix not positive definite with jitter up to {JITTER_MAX:g}*u^2 (N={n})"
    )


def _tri_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    x, info = lapack.dtrtrs(L, B, lower=1)
    if info != 0:
        raise SingularGramError(f"triangular solve failed (info={info})")
    return x


class GaussianProcess:
    """Zero-mean GP conditioned on ``data`` under fixed ``hyper``."""

    def __init__(self, data: Dataset, hyper: GPHyperparameters):
        if data.n < 1:
            raise ValueError("GaussianProcess needs at least one observation")
        self.data = data
        self.hyper = hyper
        K = kernel_matrix(data.designs, data.designs, hyper)
        self.chol, self.jitter = _factor(K, hyper)
        alpha, info = lapack.dpotrs(self.chol, data.responses, lower=1)
        if info != 0:
            raise SingularGramError(f"Cholesky solve failed (info={info})")
        self.alpha = alpha

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.data.dim:
            raise ValueError(f"expected {self.data.dim}-dimensional inputs, got {X.shape[1]}")
        Ks = kernel_matrix(X, self.data.designs, self.hyper)
        mean = Ks @ self.alpha
        V = _tri_solve(self.chol, Ks.T)
        var = self.hyper.variance_scale - np.sum(V * V, axis=0)
        return mean, np.maximum(var, 0.0)

    def whitened(self, X: np.ndarray) -> np.ndarray:
        """``L^{-1} K(X_train, X)``, reused for posterior cross-covariances."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _tri_solve(self.chol, kernel_matrix(self.data.designs, X, self.hyper))

    def log_marginal_likelihood(self) -> float:
        y = self.data.responses
        return float(
            -0.5 * y @ self.alpha - np.sum(np.log(np.diag(self.chol))) - 0.5 * y.size * LOG_2PI
        )


def posterior(data: Dataset, hyper: GPHyperparameters, x_test) -> GPPosterior:
    """Predictive distribution of the latent function at a single point."""
    mean, var = GaussianProcess(data, hyper).predict(np.asarray(x_test, dtype=float).reshape(1, -1))
    var_f = float(var[0])
    return GPPosterior(float(mean[0]), var_f, var_f + hyper.noise_sd**2)


def log_marginal_likelihood(data: Dataset, hyper: GPHyperparameters) -> float:
    return GaussianProcess(data, hyper).log_marginal_likelihood()


@dataclass(frozen=True)
class SearchSpace:
    """Box over ``(u, lengthscale, noise_sd)``; every bound strictly positive."""

    amplitude: tuple[float, float]
    lengthscale: tuple[float, float]
    noise_sd: tuple[float, float]

    def __post_init__(self) -> None:
        for name in ("amplitude", "lengthscale", "noise_sd"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"search-space bounds for {name} must satisfy 0 < lo <= hi")

    @classmethod
    def default(cls, data: Dataset, diameter: float) -> SearchSpace:
        """Scale the box to the data: lengthscale by domain diameter, u and v by response sd."""
        sd = float(np.std(data.responses))
        if not sd > 0:
            sd = 1.0
        base_len = diameter / 10.0
        return cls(
            amplitude=(1e-2 * sd, 1e2 * sd),
            lengthscale=(1e-2 * base_len, 1e2 * base_len),
            noise_sd=(1e-6 * sd, 1.0 * sd),
        )

    def log_bounds(self) -> np.ndarray:
        return np.log(np.array([self.amplitude, self.lengthscale, self.noise_sd]))


def _spectral_grid_lml(
    data: Dataset, amps: np.ndarray, lens: np.ndarray, noises: np.ndarray
) -> np.ndarray:
    """LML over a full (amp, len, noise) grid, one eigendecomposition per lengthscale.

    ``K = u^2 R(l) + (v^2 + jitter) I`` shares eigenvectors with ``R(l)``, so the
    determinant and quadratic form are cheap for every ``(u, v)`` pair.
    """
    X, y = data.designs, data.responses
    n = y.size
    d2 = _sq_dists(X, X)
    u2 = (amps**2)[:, None]
    v2 = (noises**2)[None, :]
    out = np.empty((amps.size, lens.size, noises.size))
    for j, ell in enumerate(lens):
        lam, Q = np.linalg.eigh(np.exp(-d2 / (2.0 * ell**2)))
        lam = np.maximum(lam, 0.0)
        c2 = (Q.T @ y) ** 2
        e = u2[..., None] * lam + v2[..., None] + JITTER_START * u2[..., None]
        out[:, j, :] = -0.5 * np.sum(c2 / e, axis=-1) - 0.5 * np.sum(np.log(e), axis=-1)
    return out - 0.5 * n * LOG_2PI


def _safe_lml(data: Dataset, theta: np.ndarray) -> float:
    u, ell, v = np.exp(theta)
    try:
        return log_marginal_likelihood(data, GPHyperparameters.from_amplitude(u, ell, v))
    except SingularGramError:
        return -np.inf


def fit_hyperparameters(
    data: Dataset,
    search_space: SearchSpace,
    rng: np.random.Generator,
    *,
    grid_size: int = 8,
    refine_steps: int = 20,
    n_starts: int = 2,
    n_random: int = 8,
    history: list | None = None,
) -> GPHyperparameters:
    """Maximise the log marginal likelihood over ``search_space``.

    A log-spaced ``grid_size**3`` grid is screened, ``n_random`` log-uniform
    draws from ``rng`` are added, and the best ``n_starts`` distinct points are
    polished by coordinate search in log space (``refine_steps`` sweeps, step
    halved whenever a sweep fails to improve).

    If ``history`` is a list, every ``(GPHyperparameters, lml)`` pair that was
    scored is appended to it.
    """
    if data.n < 2:
        raise ValueError("fit_hyperparameters needs at least two observations")
    log_box = search_space.log_bounds()
    axes = [np.linspace(lo, hi, grid_size) for lo, hi in log_box]
    grid = _spectral_grid_lml(data, *(np.exp(a) for a in axes))

    def record(theta: np.ndarray, value: float) -> None:
        if history is not None:
            u, ell, v = np.exp(theta)
            history.append((GPHyperparameters.from_amplitude(u, ell, v), value))

    scored: list[tuple[float, np.ndarray]] = []
    order = np.argsort(grid, axis=None, kind="stable")[::-1]
    for flat in order:
        i, j, k = np.unravel_index(flat, grid.shape)
        theta = np.array([axes[0][i], axes[1][j], axes[2][k]])
        record(theta, float(grid[i, j, k]))
    for flat in order[:n_starts]:
        i, j, k = np.unravel_index(flat, grid.shape)
        theta = np.array([axes[0][i], axes[1][j], axes[2][k]])
        scored.append((_safe_lml(data, theta), theta))

    for theta in rng.uniform(log_box[:, 0], log_box[:, 1], size=(n_random, 3)):
        value = _safe_lml(data, theta)
        record(theta, value)
        scored.append((value, theta))

    scored.sort(key=lambda item: item[0], reverse=True)
    spacing = (log_box[:, 1] - log_box[:, 0]) / max(grid_size - 1, 1)
    best_value, best_theta = scored[0]
    for value, theta in scored[:n_starts]:
        if not np.isfinite(value):
            continue
        step = spacing / 2.0
        for _ in range(refine_steps):
            improved = False
            for dim in range(3):
                for sign in (1.0, -1.0):
                    trial = theta.copy()
                    trial[dim] = np.clip(trial[dim] + sign * step[dim], *log_box[dim])
                    if trial[dim] == theta[dim]:
                        continue
                    trial_value = _safe_lml(data, trial)
                    record(trial, trial_value)
                    if trial_value > value:
                        theta, value, improved = trial, trial_value, True
            if not improved:
                step = step / 2.0
        if value > best_value:
            best_value, best_theta = value, theta

    if not np.isfinite(best_value):
        raise FitError("every hyperparameter candidate produced a singular Gram matrix")
    u, ell, v = np.exp(best_theta)
    return GPHyperparameters.from_amplitude(u, ell, v)


@dataclass(frozen=True)
class Surrogate:
    """A GP fitted on unit-cube designs and standardised responses.

    ``gp`` lives in the normalised space; :meth:`predict` maps back to the
    original units.
    """

    gp: GaussianProcess
    lower: np.ndarray
    upper: np.ndarray
    y_mean: float
    y_std: float
    raw: Dataset = field(repr=False)

    @property
    def hyper(self) -> GPHyperparameters:
        return self.gp.hyper

    @property
    def data(self) -> Dataset:
        return self.gp.data

    def to_unit(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.lower) / (self.upper - self.lower)

    def from_unit(self, U: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(U, dtype=float) * (self.upper - self.lower)

    def standardize(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean, var = self.gp.predict(self.to_unit(np.atleast_2d(X)))
        return self.y_mean + self.y_std * mean, self.y_std**2 * var


def fit_surrogate(data: Dataset, bounds: np.ndarray, rng: np.random.Generator, **fit_kw) -> Surrogate:
    """Normalise ``data`` against ``bounds`` (shape ``(D, 2)``), fit, and wrap."""
    bounds = np.asarray(bounds, dtype=float)
    lower, upper = bounds[:, 0], bounds[:, 1]
    y_mean = float(np.mean(data.responses))
    y_std = float(np.std(data.responses))
    if not y_std > 0:
        y_std = 1.0
    unit = Dataset((data.designs - lower) / (upper - lower), (data.responses - y_mean) / y_std)
    space = SearchSpace.default(unit, diameter=math.sqrt(data.dim))
    hyper = fit_hyperparameters(unit, space, rng, **fit_kw)
    return Surrogate(GaussianProcess(unit, hyper), lower, upper, y_mean, y_std, data)
