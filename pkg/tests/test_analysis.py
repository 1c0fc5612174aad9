import json
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from meanfield_mdp import (
    ConvergenceNotReached,
    DegenerateBatch,
    FeynmanKacModel,
    RngSpec,
    SpaceMismatch,
    SpeedSchedule,
    bracket_drift_check,
    cov_V,
    cov_W,
    covariance_matrix,
    exact_flow,
    laplace_from_samples,
    mdp_sweep,
    rate_I_measure,
    rate_J,
    rate_quadratic,
    rate_variational_numeric,
    remainder_tail_check,
    replicate,
    semigroup_d,
    two_state_example,
    variance_form,
)
from meanfield_mdp.analysis import Report, wilson_interval

from helpers import random_mean_zero, random_model

M_RUN = np.array([[0.7, 0.3], [0.4, 0.6]])
F = np.array([1.0, 0.0])


def linear_running(horizon=1):
    return FeynmanKacModel.homogeneous(np.ones(2), M_RUN, [0.5, 0.5], horizon)


# -- covariances ---------------------------------------------------------------

def test_cov_v_examples(np_rng):
    model = two_state_example(horizon=3)
    flow = exact_flow(model)
    g = np_rng.normal(size=2)
    for n in range(4):
        assert cov_V(model, flow, n, np.ones(2), g) == pytest.approx(0.0, abs=1e-15)
        assert cov_V(model, flow, n, F, g) == pytest.approx(cov_V(model, flow, n, g, F), abs=1e-14)
    lin = linear_running()
    assert cov_V(lin, exact_flow(lin), 1, F, F) == pytest.approx(0.225, abs=1e-15)
    with pytest.raises(SpaceMismatch):
        cov_V(model, flow, 1, np.ones(3), F)


def test_cov_w_examples():
    model = two_state_example(horizon=3)
    flow = exact_flow(model)
    assert cov_W(model, flow, 0, F, F) == cov_V(model, flow, 0, F, F)
    assert cov_W(model, flow, 3, np.ones(2), F) == pytest.approx(0.0, abs=1e-15)


def test_variance_form_matches_pairwise_covariances(np_rng):
    for _ in range(20):
        model = random_model(np_rng, horizon=3, max_d=4)
        flow = exact_flow(model)
        for n in range(4):
            d = model.size(n)
            fs = np_rng.normal(size=(3, d))
            for field in ("V", "W"):
                C = covariance_matrix(model, flow, n, list(fs), field)
                Q = variance_form(model, flow, n, field)
                np.testing.assert_allclose(C.matrix, fs @ Q @ fs.T, atol=1e-12)
                assert C.min_eigenvalue() >= -1e-10
                np.testing.assert_allclose(C.matrix, C.matrix.T, atol=1e-12)


def test_cov_w_matches_replication_variance(big_batches, running, running_flow):
    W = big_batches[10000].W(running_flow, 1, F)
    exact = cov_W(running, running_flow, 1, F, F)
    var = W.var(ddof=1)
    se = math.sqrt(max(np.mean((W - W.mean()) ** 4) - var**2, 0) / len(W))
    assert abs(var - exact) <= 3 * se


# -- rates -------------------------------------------------------------------------

def test_rate_quadratic_examples():
    assert rate_quadratic(np.eye(2), [1.0, 0.0]).value == 0.5
    assert rate_quadratic(np.eye(2), [0.0, 0.0]).value == 0.0
    r = rate_quadratic(np.diag([1.0, 0.0]), [0.0, 1.0])
    assert r.infinite and r.reason == "outside-covariance-range"


def test_rate_quadratic_against_ascent(np_rng):
    for _ in range(20):
        k = int(np_rng.integers(2, 5))
        A = np_rng.normal(size=(k, k))
        C = A @ A.T + 0.1 * np.eye(k)
        v = np_rng.normal(size=k)
        res = minimize(lambda u: -(u @ v - 0.5 * u @ C @ u), np.zeros(k), jac=lambda u: -(v - C @ u),
                       method="BFGS", options={"gtol": 1e-12})
        assert rate_quadratic(C, v).value == pytest.approx(-res.fun, abs=1e-8)


def test_rate_quadratic_legendre_duality(np_rng):
    for _ in range(50):
        k = int(np_rng.integers(1, 5))
        A = np_rng.normal(size=(k, int(np_rng.integers(1, k + 1))))
        C = A @ A.T
        u = np_rng.normal(size=k)
        assert rate_quadratic(C, C @ u).value == pytest.approx(0.5 * u @ C @ u, abs=1e-10, rel=1e-10)


def test_rate_i_examples():
    model = two_state_example(horizon=2)
    flow = exact_flow(model)
    assert rate_I_measure(model, flow, 1, [0.0, 0.0]).value == 0.0
    r = rate_I_measure(model, flow, 1, [0.1, 0.0])
    assert r.infinite and r.reason == "NonzeroTotalMass"
    # iid case: time 0, constant kernel eta_0 = uniform
    assert abs(rate_I_measure(model, flow, 0, [0.1, -0.1]).value - 0.02) <= 1e-12


def test_rate_i_not_absolutely_continuous():
    model = FeynmanKacModel.homogeneous([1.0, 1.0, 1.0], np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0.5, 0.5, 0]]),
                                        [0.3, 0.3, 0.4], 1)
    flow = exact_flow(model)
    r = rate_I_measure(model, flow, 1, [0.1, 0.0, -0.1])
    assert r.infinite and r.reason == "NotAbsolutelyContinuous"
    assert rate_variational_numeric(model, flow, 1, [0.1, 0.0, -0.1]).infinite
    ok = rate_I_measure(model, flow, 1, [0.1, -0.1, 0.0])
    assert ok.value == pytest.approx(rate_variational_numeric(model, flow, 1, [0.1, -0.1, 0.0]).value, abs=1e-12)


def test_rate_i_fixed_space_pairing():
    # no selection and a permutation mutation: every function is harmonic
    model = FeynmanKacModel.homogeneous([1.0, 1.0], np.array([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5], 1)
    flow = exact_flow(model)
    a = rate_I_measure(model, flow, 1, [0.1, -0.1])
    b = rate_variational_numeric(model, flow, 1, [0.1, -0.1])
    assert a.infinite and a.reason == "fixed-space-pairing"
    assert b.infinite


def test_rate_i_iid_reduction_random(np_rng):
    for _ in range(50):
        d = int(np_rng.integers(2, 6))
        model = random_model(np_rng, horizon=1, max_d=d, min_d=d)
        flow = exact_flow(model)
        mu = random_mean_zero(np_rng, d) * 0.1
        h = mu / flow.weights(0)
        assert abs(rate_I_measure(model, flow, 0, mu).value - 0.5 * flow.weights(0) @ h**2) <= 1e-12


def test_rate_i_series_cap_warns(monkeypatch):
    import meanfield_mdp.analysis as analysis

    monkeypatch.setattr(analysis, "SERIES_CAP", 3)
    model = two_state_example(horizon=1)
    flow = exact_flow(model)
    with pytest.warns(ConvergenceNotReached):
        r = rate_I_measure(model, flow, 1, [0.1, -0.1])
    assert r.meta["converged"] is False


def test_rate_variational_examples():
    model = two_state_example(horizon=1)
    flow = exact_flow(model)
    assert rate_variational_numeric(model, flow, 1, [0.0, 0.0]).value == 0.0
    r = rate_variational_numeric(model, flow, 1, [0.1, 0.0])
    assert r.infinite


def test_rate_j_examples(np_rng):
    model = two_state_example(horizon=3)
    flow = exact_flow(model)
    assert rate_J(model, flow, 2, [0.0, 0.0]).value == 0.0
    assert rate_J(model, flow, 2, [0.1, 0.1]).infinite
    indicators = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    C = covariance_matrix(model, flow, 2, indicators, "W")
    for _ in range(10):
        nu = random_mean_zero(np_rng, 2)
        assert rate_J(model, flow, 2, nu).value == pytest.approx(rate_quadratic(C, nu).value, abs=1e-10)
        assert rate_J(model, flow, 2, nu).value == pytest.approx(
            rate_variational_numeric(model, flow, 2, nu, "W").value, rel=1e-8)


def test_rate_j_below_single_block_rate(np_rng):
    for _ in range(30):
        model = random_model(np_rng, horizon=3, max_d=4, min_d=2)
        flow = exact_flow(model)
        for p in range(4):
            mu = random_mean_zero(np_rng, model.size(p))
            I = rate_I_measure(model, flow, p, mu)
            if I.infinite:
                continue
            nu = mu @ semigroup_d(model, p, 3, flow).matrix
            assert rate_J(model, flow, 3, nu).value <= I.value + 1e-8


# -- Laplace estimator ---------------------------------------------------------------

def test_laplace_zero_and_degenerate():
    assert laplace_from_samples(np.zeros(10), 10.0).estimate == 0.0
    with pytest.raises(DegenerateBatch):
        laplace_from_samples([1.0], 10.0)


def test_laplace_flags_heavy_top():
    x = np.zeros(1000)
    x[0] = 5.0
    res = laplace_from_samples(x, 100.0)
    assert res.flagged and res.top_mass > 0.5
    assert not laplace_from_samples(np.random.default_rng(0).normal(size=1000) * 0.1, 1.0).flagged


def test_laplace_jackknife_is_stable_for_gaussian():
    x = np.random.default_rng(1).normal(size=4000)
    res = laplace_from_samples(x, 1.0)
    assert res.estimate == pytest.approx(0.5, abs=4 * res.stderr + 0.02)
    assert 0 < res.stderr < 0.1


def test_laplace_small_scale_is_quadratic(big_batches, running, running_flow):
    batch = big_batches[100]
    alpha = SpeedSchedule(0.5, (100,)).alpha(100)
    X = batch.martingale([F, F], 1)
    target = 0.5 * sum(cov_V(running, running_flow, p, F, F) for p in range(2))
    t = 1e-3
    est = laplace_from_samples(t * X, alpha).estimate / t**2
    # second-order expansion of log mean exp at the sample level
    expansion = X.mean() / (math.sqrt(alpha) * t) + 0.5 * X.var()
    assert est == pytest.approx(expansion, abs=1e-3)
    var = X.var(ddof=1)
    se = math.sqrt(max(np.mean((X - X.mean()) ** 4) - var**2, 0) / len(X))
    assert abs(0.5 * var - target) <= 3 * 0.5 * se


def test_speed_schedule_validation():
    s = SpeedSchedule(0.5, (100, 1000))
    assert s.alpha(100) == 10.0
    with pytest.raises(ValueError):
        SpeedSchedule(1.0)
    with pytest.raises(ValueError):
        SpeedSchedule(0.5, (100, 100))


# -- sweeps -------------------------------------------------------------------------

def test_mdp_sweep_time_zero_targets_and_reproducibility():
    model = two_state_example(horizon=0)
    s = SpeedSchedule(0.5, (50, 200))
    a = mdp_sweep(model, F, s, 200, RngSpec(3), n=0)
    assert a.summary["target_V"] == a.summary["target_W"]
    b = mdp_sweep(model, F, s, 200, RngSpec(3), n=0)
    assert a.dumps() == b.dumps()
    for row in a.rows:
        assert set(row["V"]) >= {"estimate", "stderr", "R", "N", "seed"}


def test_remainder_tail_linear_model_is_zero():
    rep = remainder_tail_check(linear_running(2), F, SpeedSchedule(0.5, (50, 200)), 100, RngSpec(1), eps=0.01, n=2)
    assert all(r["exceed"] == 0 for r in rep.rows)
    assert all(r["wilson"][1] > 0 for r in rep.rows)


def test_bracket_drift_constant_function():
    rep = bracket_drift_check(two_state_example(horizon=1), [np.ones(2), np.ones(2)], 50, (50, 100), RngSpec(1))
    assert all(r["gap"]["estimate"] == pytest.approx(0.0, abs=1e-14) for r in rep.rows)
    assert rep.passed


def test_wilson_interval_zero_count():
    low, high = wilson_interval(0, 10_000)
    assert low == pytest.approx(0.0, abs=1e-15) and 0 < high < 1e-3


def test_report_formats():
    rep = Report("demo", [{"N": 10, "x": {"estimate": 1.0, "stderr": 0.1}}], {"value": math.inf}, True)
    doc = json.loads(rep.dumps())
    assert doc["summary"]["value"] == "inf"
    text = rep.to_text()
    assert "x.estimate" in text and "demo" in text
