import numpy as np
import pytest

from cfsurv.data import TimeGrid
from cfsurv.metrics import (brier, brier_by_horizon, c_index, censoring_km,
                            integrated_brier, irmse, tv_pehe)


def uniform_grid(m, horizon):
    return TimeGrid(np.linspace(0.0, horizon, m + 1))


def dense_quadrature(err_rows, grid, npts=200001):
    """Integrate the piecewise-linear interpolation of err^2 on a dense grid.

    The metric extends the first value constantly back to tau = 0, then
    applies the trapezoidal rule, which integrates the piecewise-linear
    interpolant of the squared errors exactly.
    """
    taus = np.concatenate([[0.0], grid.boundaries[1:]])
    out = []
    for row in np.atleast_2d(err_rows):
        vals = np.concatenate([[row[0]], row]) ** 2
        dense_t = np.union1d(np.linspace(0.0, taus[-1], npts), taus)
        dense_v = np.interp(dense_t, taus, vals)
        out.append(np.trapezoid(dense_v, dense_t))
    return np.array(out)


def test_tv_pehe_constant_error():
    grid = uniform_grid(4, 2.0)
    pred = np.full((3, 4), 0.6)
    true = np.full((3, 4), 0.5)
    # constant error eps integrates to eps^2 * tau_m
    assert np.isclose(tv_pehe(pred, true, grid), np.sqrt(0.01 * 2.0), atol=1e-12)
    assert np.isclose(tv_pehe(pred, true, grid, root=False), 0.01 * 2.0,
                      atol=1e-12)


def test_tv_pehe_matches_dense_quadrature():
    rng = np.random.default_rng(0)
    grid = TimeGrid(np.concatenate([[0.0], np.sort(rng.uniform(0.2, 5.0, 6))]))
    pred = rng.uniform(-1, 1, (5, 6))
    true = rng.uniform(-1, 1, (5, 6))
    want = np.sqrt(dense_quadrature(pred - true, grid).mean())
    assert abs(tv_pehe(pred, true, grid) - want) < 1e-10


def test_tv_pehe_weight_function():
    grid = uniform_grid(3, 3.0)
    pred = np.full((1, 3), 1.0)
    true = np.zeros((1, 3))
    flat = tv_pehe(pred, true, grid, root=False)
    halved = tv_pehe(pred, true, grid, weight_fn=lambda t: 0.5, root=False)
    assert np.isclose(halved, 0.5 * flat, atol=1e-12)


def test_irmse_matches_dense_quadrature():
    rng = np.random.default_rng(1)
    grid = TimeGrid(np.concatenate([[0.0], np.sort(rng.uniform(0.2, 4.0, 5))]))
    pred = rng.uniform(0, 1, (7, 5))
    true = rng.uniform(0, 1, (7, 5))
    want = np.sqrt(dense_quadrature(pred - true, grid).mean() / grid.horizon)
    assert abs(irmse(pred, true, grid) - want) < 1e-10


def test_irmse_perfect_prediction():
    grid = uniform_grid(4, 2.0)
    curves = np.random.default_rng(2).uniform(0, 1, (3, 4))
    assert irmse(curves, curves.copy(), grid) == 0.0


def test_metric_shape_validation():
    grid = uniform_grid(4, 2.0)
    with pytest.raises(ValueError):
        tv_pehe(np.zeros((2, 3)), np.zeros((2, 4)), grid)
    with pytest.raises(ValueError):
        irmse(np.zeros((2, 3)), np.zeros((2, 3)), grid)


def test_c_index_perfect_ordering():
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.ones(4, dtype=int)
    risk = -times  # earlier failure = higher risk
    assert c_index(risk, times, events) == 1.0
    assert c_index(times, times, events) == 0.0  # fully anti-concordant


def test_c_index_all_ties_half():
    times = np.array([1.0, 2.0, 3.0])
    assert c_index(np.zeros(3), times, np.ones(3, dtype=int)) == 0.5


def test_c_index_random_scores_near_half():
    rng = np.random.default_rng(3)
    n = 2000
    times = rng.exponential(1.0, n)
    events = (rng.random(n) < 0.7).astype(int)
    ci = c_index(rng.standard_normal(n), times, events)
    assert abs(ci - 0.5) < 0.03


def test_c_index_censored_pairs_not_comparable():
    # the censored individual at t=1 cannot anchor a comparison
    times = np.array([1.0, 2.0])
    events = np.array([0, 1])
    with pytest.raises(ValueError, match="comparable"):
        c_index(np.array([1.0, 0.0]), times, events)


def test_c_index_permutation_invariant():
    rng = np.random.default_rng(4)
    n = 50
    times = rng.uniform(0, 5, n)
    events = (rng.random(n) < 0.7).astype(int)
    risk = rng.standard_normal(n)
    perm = rng.permutation(n)
    assert np.isclose(c_index(risk, times, events),
                      c_index(risk[perm], times[perm], events[perm]),
                      atol=1e-12)


def test_censoring_km_hand_example():
    # censorings at t=2 (3 at risk: factor 2/3) and t=4 (1 at risk: factor 0)
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.array([1, 0, 1, 0])
    G = censoring_km(times, events)
    assert G(1.5) == 1.0
    assert np.isclose(float(G(2.0)), 2 / 3)
    assert np.isclose(float(G(3.5)), 2 / 3)
    assert np.isclose(float(G(4.0)), 0.0)
    # left limit excludes the mass exactly at t
    assert np.isclose(float(G(np.array(4.0), before=True)), 2 / 3)


def test_brier_constant_forecast_uncensored():
    # S = 1/2 for everyone, no censoring: every contribution is 1/4
    times = np.array([0.5, 1.5, 2.5, 3.5])
    events = np.ones(4, dtype=int)
    G = censoring_km(times, events)
    assert np.isclose(brier(np.full(4, 0.5), times, events, 2.0, G), 0.25)


def test_brier_hand_computed_with_censoring():
    # individuals: (time, event): a (1, 1), b (2, 0), c (3, 1), d (4, 1)
    # tau = 2.5; G has a single censoring at t=2 with 3 at risk: G = 2/3 after
    times = np.array([1.0, 2.0, 3.0, 4.0])
    events = np.array([1, 0, 1, 1])
    s = np.array([0.9, 0.8, 0.7, 0.6])
    G = censoring_km(times, events)
    # a died before tau: s^2 / G(1-) = 0.81 / 1
    # b censored before tau: contributes 0
    # c, d alive at tau: (1-s)^2 / G(2.5) = 0.09 / (2/3), 0.16 / (2/3)
    want = (0.81 + 0.0 + 0.09 / (2 / 3) + 0.16 / (2 / 3)) / 4.0
    got = brier(s, times, events, 2.5, G)
    assert np.isclose(got, want, atol=1e-12)


def test_integrated_brier_constant_scores():
    # if the per-horizon score is constant, the integral equals that constant
    times = np.array([0.5, 1.5, 2.5, 3.5])
    events = np.ones(4, dtype=int)
    grid = TimeGrid([0.0, 0.25, 0.4, 0.45])  # all horizons before first event
    curves = np.full((4, 3), 0.5)
    assert np.isclose(integrated_brier(curves, times, events, grid), 0.25)


def test_brier_by_horizon_keys():
    times = np.array([0.5, 1.5, 2.5, 3.5])
    events = np.ones(4, dtype=int)
    grid = uniform_grid(4, 2.0)
    curves = np.random.default_rng(5).uniform(0, 1, (4, 4))
    by_h = brier_by_horizon(curves, times, events, grid)
    assert sorted(by_h) == [0.5, 1.0, 1.5, 2.0]
    G = censoring_km(times, events)
    for j, tau in enumerate(grid.boundaries[1:]):
        assert np.isclose(by_h[float(tau)],
                          brier(curves[:, j], times, events, tau, G))
