import numpy as np
import pytest

from cfsurv.data import Cohort, Trajectory
from cfsurv.simulate import DgpConfig, simulate
from cfsurv.weights import (PropensityModel, SeparationError, fit_propensity,
                            load_weight_table, save_weight_table,
                            stabilized_weights, trim_weights,
                            weight_diagnostics)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def random_cohort(n, K, d, seed, treat_coef=None):
    """Cohort with X iid normal and T(k) ~ Bern(sigmoid(<treat_coef, X(k)>))."""
    rng = np.random.default_rng(seed)
    w = np.zeros(d) if treat_coef is None else np.asarray(treat_coef)
    trajectories = []
    for i in range(n):
        X = rng.standard_normal((K + 1, d))
        T = (rng.random(K + 1) < _sigmoid(X @ w)).astype(np.int64)
        trajectories.append(Trajectory(f"i{i}", X, T, float(rng.uniform(0.5, 3)),
                                       int(rng.random() < 0.8)))
    return Cohort(trajectories, d, K)


def test_null_model_coefficients_near_zero():
    cohort = random_cohort(3000, 2, 3, seed=0)
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    assert np.abs(model.denom_wx).max() < 0.1


def test_recovers_known_logistic_coefficients():
    true_w = np.array([0.8, -0.5])
    cohort = random_cohort(4000, 1, 2, seed=1, treat_coef=true_w)
    model = fit_propensity(cohort, pooled=True, l2=1e-4)
    assert np.allclose(model.denom_wx, true_w, atol=0.1)


def test_per_step_mode_recovers_coefficients():
    true_w = np.array([0.8, -0.5])
    cohort = random_cohort(4000, 1, 2, seed=2, treat_coef=true_w)
    model = fit_propensity(cohort, pooled=False, l2=1e-4)
    for k in range(2):
        assert np.allclose(model.denom_wx[k], true_w, atol=0.12)


def test_separation_raises_without_regularization():
    rng = np.random.default_rng(3)
    trajectories = []
    for i in range(200):
        X = rng.standard_normal((2, 1))
        T = (X[:, 0] > 0).astype(np.int64)  # deterministic given X
        trajectories.append(Trajectory(f"i{i}", X, T, 1.0, 1))
    cohort = Cohort(trajectories, 1, 1)
    with pytest.raises(SeparationError):
        fit_propensity(cohort, pooled=True, l2=0.0)


def test_weights_exactly_one_when_numerator_equals_denominator():
    cohort = random_cohort(50, 2, 3, seed=4)
    wz = np.array([0.3, -0.2, 0.1, 0.4])  # (t_prev, one-hot step), 2 + K wide
    model = PropensityModel(pooled=True, K=2, d=3,
                            denom_wx=np.zeros(3), denom_wz=wz, numer_wz=wz)
    table = stabilized_weights(cohort, model)
    assert np.all(table.stabilized == 1.0)


def test_hand_computed_weight():
    # per-step model with no t_prev/intercept terms: e(k) = sigmoid(2 x(k)),
    # numerator p(k) = 1/2. For x = (1, 1), T = (1, 1):
    # w = (0.5 / sigmoid(2))^2
    X = np.ones((2, 1))
    tr = Trajectory("a", X, [1, 1], 1.0, 1)
    cohort = Cohort([tr], 1, 1)
    model = PropensityModel(
        pooled=False, K=1, d=1,
        denom_wx=[np.array([2.0]), np.array([2.0])],
        denom_wz=[np.zeros(2), np.zeros(2)],
        numer_wz=[np.zeros(2), np.zeros(2)],
    )
    table = stabilized_weights(cohort, model)
    expected = (0.5 / _sigmoid(2.0)) ** 2
    assert np.isclose(table.stabilized[0], expected, atol=1e-12)
    assert np.isclose(table.unstabilized[0], (1.0 / _sigmoid(2.0)) ** 2,
                      atol=1e-12)


def test_mean_stabilized_weight_near_one_on_simulated_cohort():
    cohort = simulate(DgpConfig(n=3000, K=3, d=3, confounding=1.0, seed=5))
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = stabilized_weights(cohort, model)
    assert abs(table.stabilized.mean() - 1.0) < 0.1
    assert table.stabilized.var() < table.unstabilized.var()


def test_trimming_clips_at_quantiles():
    cohort = random_cohort(400, 2, 2, seed=6, treat_coef=[1.5, -1.0])
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = stabilized_weights(cohort, model)
    trimmed = trim_weights(table, 0.05, 0.95)
    lo = np.quantile(table.stabilized, 0.05)
    hi = np.quantile(table.stabilized, 0.95)
    assert np.allclose(trimmed.trimmed, np.clip(table.stabilized, lo, hi))
    again = trim_weights(trimmed, 0.05, 0.95)
    assert np.array_equal(again.trimmed, trimmed.trimmed)


def test_trim_validation():
    cohort = random_cohort(20, 1, 1, seed=7)
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = stabilized_weights(cohort, model)
    with pytest.raises(ValueError):
        trim_weights(table, 0.9, 0.1)


def test_diagnostics_unit_weights():
    cohort = random_cohort(30, 1, 1, seed=8)
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = stabilized_weights(cohort, model)
    diag = weight_diagnostics(table, mode="unit")
    assert diag["mean"] == 1.0
    assert diag["variance"] == 0.0
    assert diag["ess"] == len(cohort)


def test_diagnostics_ess_formula():
    cohort = random_cohort(100, 1, 2, seed=9, treat_coef=[1.0, 0.5])
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = trim_weights(stabilized_weights(cohort, model))
    w = table.trimmed
    diag = weight_diagnostics(table)
    assert np.isclose(diag["ess"], w.sum() ** 2 / (w**2).sum())
    assert diag["ess"] <= len(cohort) + 1e-9


def test_weight_table_modes():
    cohort = random_cohort(10, 1, 1, seed=10)
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = stabilized_weights(cohort, model)
    assert np.all(table.weights("unit") == 1.0)
    with pytest.raises(ValueError, match="mode"):
        table.weights("bogus")


def test_save_load_roundtrip(tmp_path):
    cohort = random_cohort(25, 2, 2, seed=11, treat_coef=[0.5, 0.5])
    model = fit_propensity(cohort, pooled=True, l2=1e-3)
    table = trim_weights(stabilized_weights(cohort, model))
    path = tmp_path / "w.csv"
    save_weight_table(table, path)
    loaded = load_weight_table(path)
    assert loaded.ids == table.ids
    assert np.allclose(loaded.stabilized, table.stabilized, atol=1e-12)
    assert np.allclose(loaded.trimmed, table.trimmed, atol=1e-12)
    with pytest.raises(ValueError, match="unstabilized"):
        loaded.weights("unstabilized")


def test_positivity_warnings_counted():
    # a huge coefficient pushes many denominator probabilities into the clamp
    X = np.array([[[5.0]], [[-5.0]]]).reshape(2, 1, 1)
    trajectories = [
        Trajectory("a", [[5.0], [5.0]], [0, 0], 1.0, 1),
        Trajectory("b", [[-5.0], [-5.0]], [1, 1], 1.0, 1),
    ]
    cohort = Cohort(trajectories, 1, 1)
    wz = np.zeros(3)
    model = PropensityModel(pooled=True, K=1, d=1,
                            denom_wx=np.array([10.0]), denom_wz=wz,
                            numer_wz=wz)
    table = stabilized_weights(cohort, model)
    assert table.positivity_warnings.sum() == 4
    assert np.isfinite(table.stabilized).all()
