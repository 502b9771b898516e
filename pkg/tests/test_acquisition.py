import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cboc.acquisition import (
    AcquisitionConfig,
    expected_improvement,
    knowledge_gradient,
    maximize_utility,
    pattern_search,
)
from cboc.gp import Dataset, GaussianProcess, GPHyperparameters, kernel_matrix

finite = st.floats(-50, 50, allow_nan=False)
positive_sd = st.floats(1e-6, 20, allow_nan=False)


def mc_expected_improvement(mean, sd, incumbent, draws):
    gain = np.maximum(mean + sd * draws - incumbent, 0.0)
    return gain.mean(), gain.std(ddof=1) / math.sqrt(draws.size)


def test_ei_known_values():
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-6)
    assert expected_improvement(0.0, 1.0, 0.0) == pytest.approx(0.398942, abs=1e-6)
    assert expected_improvement(1.0, 1.0, 0.0) == pytest.approx(1.08332, abs=1e-5)
    assert expected_improvement(2.0, 0.0, 0.5) == pytest.approx(1.5)
    assert expected_improvement(0.0, 0.0, 0.5) == 0.0


def test_ei_vectorised_shapes():
    out = expected_improvement(np.zeros(4), np.ones(4), 0.0)
    assert out.shape == (4,)
    assert isinstance(expected_improvement(0.0, 1.0, 0.0), float)


def test_ei_rejects_bad_inputs():
    with pytest.raises(ValueError):
        expected_improvement(0.0, -1.0, 0.0)
    with pytest.raises(ValueError):
        expected_improvement(np.nan, 1.0, 0.0)


def random_ei_triple(rng):
    """(mean, sd, incumbent) with |z| <= 3 so a Monte-Carlo oracle sees the tail."""
    m, s = rng.normal(0, 2), rng.uniform(0.1, 3)
    return m, s, m + s * rng.uniform(-3, 3)


def test_ei_matches_monte_carlo(rng):
    draws = rng.standard_normal(200_000)
    for _ in range(20):
        m, s, inc = random_ei_triple(rng)
        est, se = mc_expected_improvement(m, s, inc, draws)
        assert abs(expected_improvement(m, s, inc) - est) <= 3 * se + 1e-12


@settings(max_examples=300)
@given(finite, st.floats(0, 20, allow_nan=False), finite)
def test_ei_nonnegative_and_above_plain_improvement(m, s, inc):
    ei = expected_improvement(m, s, inc)
    assert ei >= 0
    assert ei >= max(m - inc, 0.0) - 1e-9


@settings(max_examples=200)
@given(finite, positive_sd, finite, st.floats(0.0, 5.0))
def test_ei_monotone_in_mean_and_sd(m, s, inc, bump):
    base = expected_improvement(m, s, inc)
    assert expected_improvement(m + bump, s, inc) >= base - 1e-12
    assert expected_improvement(m, s + bump, inc) >= base - 1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        AcquisitionConfig(utility_kind="ucb")
    with pytest.raises(ValueError):
        AcquisitionConfig(n_restarts=0)
    with pytest.raises(ValueError):
        AcquisitionConfig(n_raw_candidates=0)
    assert AcquisitionConfig().raw_candidates(3) == 1536
    assert AcquisitionConfig(n_raw_candidates=10).raw_candidates(3) == 10


def test_kg_zero_when_everything_is_known(rng):
    X = np.linspace(0, 1, 60)[:, None]
    data = Dataset(X, np.sin(3 * X[:, 0]))
    hyper = GPHyperparameters(1.0, 0.3, 0.0)
    bounds = np.array([[0.0, 1.0]])
    kg = knowledge_gradient(data, hyper, [0.5], bounds, AcquisitionConfig(utility_kind="kg"), rng)
    assert abs(kg) <= 1e-3


def nested_kg_oracle(data, hyper, x, grid, n_fantasies, rng):
    """Refit the posterior on data + (x, y_fantasy) with an explicit inverse, per fantasy."""
    X, y = data.designs, data.responses
    noise = hyper.noise_sd**2 + 1e-8 * hyper.variance_scale
    K = kernel_matrix(X, X, hyper) + noise * np.eye(len(y))
    k_x = kernel_matrix(X, x[None, :], hyper)[:, 0]
    Kinv = np.linalg.inv(K)
    mu_x = k_x @ Kinv @ y
    var_x = hyper.variance_scale - k_x @ Kinv @ k_x
    cands = np.vstack([grid, X, x[None, :]])
    mu_now = kernel_matrix(cands, X, hyper) @ Kinv @ y

    X_aug = np.vstack([X, x[None, :]])
    K_aug = kernel_matrix(X_aug, X_aug, hyper) + noise * np.eye(len(y) + 1)
    A = kernel_matrix(cands, X_aug, hyper) @ np.linalg.inv(K_aug)  # (M, N + 1)
    y_f = mu_x + math.sqrt(var_x + hyper.noise_sd**2) * rng.standard_normal(n_fantasies)
    best = np.empty(n_fantasies)
    for start in range(0, n_fantasies, 10_000):
        chunk = y_f[start : start + 10_000]
        Y = np.vstack([np.repeat(y[:, None], chunk.size, axis=1), chunk[None, :]])
        best[start : start + chunk.size] = (A @ Y).max(axis=0)
    gain = best - mu_now.max()
    return gain.mean(), gain.std(ddof=1) / math.sqrt(n_fantasies)


@pytest.mark.parametrize("x0", [0.35, 0.8])
def test_kg_matches_nested_monte_carlo(x0):
    data = Dataset([[0.0], [1.0]], [0.2, -0.4])
    hyper = GPHyperparameters(1.0, 0.3, 0.1)
    grid = np.linspace(-0.5, 1.5, 200)[:, None]
    bounds = np.array([[-0.5, 1.5]])
    x = np.array([x0])
    oracle, oracle_se = nested_kg_oracle(data, hyper, x, grid, 100_000, np.random.default_rng(11))
    cfg = AcquisitionConfig(utility_kind="kg", kg_fantasies=100_000)
    kg, se = knowledge_gradient(
        data, hyper, x, bounds, cfg, np.random.default_rng(12), candidates=grid, return_stderr=True
    )
    assert abs(kg - oracle) <= 3 * math.hypot(se, oracle_se)
    assert kg > 0


def test_kg_vectorised_utility_agrees_with_scalar(rng):
    from cboc.acquisition import _kg_utility

    data = Dataset([[0.1], [0.6], [0.9]], [0.0, 1.0, 0.3])
    hyper = GPHyperparameters(1.0, 0.2, 0.05)
    grid = np.linspace(0, 1, 50)[:, None]
    normals = np.random.default_rng(0).standard_normal(256)
    util = _kg_utility(GaussianProcess(data, hyper), np.vstack([grid, data.designs]), normals, chunk=7)
    X = rng.uniform(0, 1, size=(20, 1))
    vec = util(X)
    cfg = AcquisitionConfig(utility_kind="kg", kg_fantasies=256)
    for i in range(20):
        one = knowledge_gradient(
            data, hyper, X[i], np.array([[0.0, 1.0]]), cfg, np.random.default_rng(0), candidates=grid
        )
        assert vec[i] == pytest.approx(one, abs=1e-10)


def _toy_problem(rng, n=6, dim=2):
    X = rng.uniform(0, 1, size=(n, dim))
    y = -np.sum((X - 0.3) ** 2, axis=1)
    return Dataset(X, y), GPHyperparameters(0.1, 0.3, 0.01), np.tile([0.0, 1.0], (dim, 1))


@pytest.mark.parametrize("kind", ["ei", "kg"])
def test_maximize_dominates_candidates_and_stays_in_bounds(kind, rng):
    data, hyper, bounds = _toy_problem(rng)
    cfg = AcquisitionConfig(utility_kind=kind, kg_fantasies=32, kg_inner_grid=64)
    trace = []
    res = maximize_utility(data, hyper, data.responses.max(), bounds, cfg, rng, trace=trace)
    raw, values = trace[0]
    assert raw.shape == (1024, 2)
    assert res.value >= values.max()
    assert np.all(res.argpoint >= bounds[:, 0]) and np.all(res.argpoint <= bounds[:, 1])


def test_maximize_is_deterministic(rng):
    data, hyper, bounds = _toy_problem(rng)
    cfg = AcquisitionConfig()
    a = maximize_utility(data, hyper, 0.0, bounds, cfg, np.random.default_rng(3))
    b = maximize_utility(data, hyper, 0.0, bounds, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a.argpoint, b.argpoint)
    assert a.value == b.value


def test_maximize_rejects_degenerate_bounds(rng):
    data, hyper, _ = _toy_problem(rng)
    with pytest.raises(ValueError):
        maximize_utility(data, hyper, 0.0, np.array([[0.0, 0.0], [0.0, 1.0]]), AcquisitionConfig(), rng)


def test_ei_argmax_single_point_matches_dense_grid(rng):
    data = Dataset([[0.0]], [0.7])
    hyper = GPHyperparameters(1.0, 0.5, 0.0)
    bounds = np.array([[-1.0, 2.0]])
    res = maximize_utility(data, hyper, 0.7, bounds, AcquisitionConfig(), rng)
    grid = np.linspace(-1, 2, 10_000)[:, None]
    mean, var = GaussianProcess(data, hyper).predict(grid)
    ei = expected_improvement(mean, np.sqrt(var), 0.7)
    assert abs(res.argpoint[0] - grid[np.argmax(ei), 0]) <= 0.05


def test_ei_argmax_interior_matches_dense_grid(rng):
    data = Dataset([[0.0], [0.5], [1.0]], [0.0, 1.0, 0.2])
    hyper = GPHyperparameters(1.0, 0.25, 0.01)
    bounds = np.array([[0.0, 1.0]])
    res = maximize_utility(data, hyper, 1.0, bounds, AcquisitionConfig(), rng)
    grid = np.linspace(0, 1, 10_000)[:, None]
    mean, var = GaussianProcess(data, hyper).predict(grid)
    ei = expected_improvement(mean, np.sqrt(var), 1.0)
    assert res.value >= ei.max() - 1e-6
    assert abs(res.argpoint[0] - grid[np.argmax(ei), 0]) <= 0.05


def test_pattern_search_finds_quadratic_peak():
    def f(X):
        return -np.sum((X - np.array([0.3, 0.7])) ** 2, axis=1)

    bounds = np.array([[0.0, 1.0], [0.0, 1.0]])
    starts = np.array([[0.9, 0.1], [0.5, 0.5]])
    x, fx = pattern_search(f, starts, f(starts), bounds, max_evals=200)
    np.testing.assert_allclose(x, [[0.3, 0.7], [0.3, 0.7]], atol=1e-3)
    assert np.all(fx >= f(starts))
