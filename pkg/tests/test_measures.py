import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanfield_mdp import (
    DomainTooLarge,
    InvalidMeasure,
    MarkovKernel,
    Observable,
    ProbabilityMeasure,
    SignedMeasure,
    SpaceMismatch,
    StateSpace,
    UnreachableTargetPoint,
    adjoint_kernel,
    b_constant,
    dobrushin_coefficient,
    kernel_apply_fn,
    kernel_apply_measure,
    kernel_compose,
    oscillation,
    random_kernel,
    random_probability,
    total_variation,
)

M_RUN = [[0.7, 0.3], [0.4, 0.6]]


def test_state_space_rejects_empty():
    with pytest.raises(ValueError):
        StateSpace(0)
    assert len(StateSpace(3)) == 3


def test_probability_renormalises_small_drift_and_rejects_large():
    p = ProbabilityMeasure(StateSpace(2), [0.5, 0.5 + 1e-10])
    assert abs(p.weights.sum() - 1.0) <= 1e-12
    with pytest.raises(InvalidMeasure):
        ProbabilityMeasure(StateSpace(2), [0.5, 0.6])
    with pytest.raises(InvalidMeasure):
        ProbabilityMeasure(StateSpace(2), [1.5, -0.5])


def test_signed_measure_rejects_nan_and_wrong_size():
    with pytest.raises(InvalidMeasure):
        SignedMeasure(StateSpace(2), [np.nan, 0.0])
    with pytest.raises(SpaceMismatch):
        SignedMeasure(StateSpace(3), [0.0, 1.0])


def test_values_are_read_only():
    p = ProbabilityMeasure.uniform(3)
    with pytest.raises(ValueError):
        p.weights[0] = 1.0


@pytest.mark.parametrize("values, expected", [((0, 1), 1.0), ((2.5, 2.5, 2.5), 0.0), ((0.2, 0.9, 0.5), 0.7)])
def test_oscillation(values, expected):
    assert oscillation(Observable.from_array(values)) == pytest.approx(expected, abs=1e-15)


def test_dobrushin_examples():
    assert dobrushin_coefficient(MarkovKernel.from_array([[0.2, 0.8], [0.2, 0.8]])) == 0.0
    assert dobrushin_coefficient(MarkovKernel.identity(2)) == 1.0
    assert dobrushin_coefficient(MarkovKernel.from_array(M_RUN)) == pytest.approx(0.3, abs=1e-15)


def test_dobrushin_dominates_oscillation_of_images(np_rng):
    for _ in range(100):
        d = int(np_rng.integers(2, 7))
        M = random_kernel(np_rng, d)
        beta = dobrushin_coefficient(M)
        assert 0.0 <= beta <= 1.0
        best = 0.0
        for _ in range(100):
            f = np_rng.uniform(size=d)
            f = (f - f.min()) / (f.max() - f.min())
            assert oscillation(M.rows @ f) <= beta + 1e-12
            best = max(best, oscillation(M.rows @ f))
        # indicators of the sign pattern of a worst row difference attain beta
        diffs = M.rows[:, None, :] - M.rows[None, :, :]
        i, j = np.unravel_index(np.abs(diffs).sum(-1).argmax(), (d, d))
        f = (diffs[i, j] > 0).astype(float)
        assert oscillation(M.rows @ f) == pytest.approx(beta, abs=1e-12)


def test_dobrushin_submultiplicative(np_rng):
    for _ in range(100):
        d = int(np_rng.integers(2, 7))
        M1, M2 = random_kernel(np_rng, d), random_kernel(np_rng, d)
        beta12 = dobrushin_coefficient(kernel_compose(M1, M2))
        assert beta12 <= dobrushin_coefficient(M1) * dobrushin_coefficient(M2) + 1e-12


def test_dobrushin_zero_iff_rows_equal(np_rng):
    M = random_kernel(np_rng, 4)
    assert dobrushin_coefficient(M) > 0
    assert dobrushin_coefficient(MarkovKernel.constant_rows(M.row(0), 4)) == 0.0


def test_adjoint_examples():
    nu = ProbabilityMeasure(StateSpace(3), [0.2, 0.3, 0.5])
    mu = ProbabilityMeasure(StateSpace(2), [0.4, 0.6])
    K = adjoint_kernel(MarkovKernel.constant_rows(nu, 2), mu)
    np.testing.assert_allclose(K.rows, np.tile(mu.weights, (3, 1)), atol=1e-15)

    K = adjoint_kernel(MarkovKernel.from_array(M_RUN), ProbabilityMeasure.uniform(2))
    np.testing.assert_allclose(K.rows[0], [7 / 11, 4 / 11], atol=1e-15)


def test_adjoint_unreachable_point():
    M = MarkovKernel.from_array([[1.0, 0.0], [1.0, 0.0]])
    with pytest.raises(UnreachableTargetPoint) as info:
        adjoint_kernel(M, ProbabilityMeasure.uniform(2))
    assert info.value.points == [1]


def test_adjoint_duality_and_invariance(np_rng):
    for _ in range(100):
        d, e = int(np_rng.integers(1, 6)), int(np_rng.integers(1, 6))
        M = random_kernel(np_rng, d, e)
        mu = random_probability(np_rng, d)
        Ms = adjoint_kernel(M, mu)
        muM = mu.weights @ M.rows
        f, g = np_rng.normal(size=e), np_rng.normal(size=d)
        assert abs(muM @ (f * (Ms.rows @ g)) - mu.weights @ ((M.rows @ f) * g)) <= 1e-12
        assert abs(muM @ (Ms.rows @ (M.rows @ f)) - muM @ f) <= 1e-12


def test_b_constant_values():
    assert b_constant(2) == 1.0
    assert abs(b_constant(4) - 3 ** 0.25) <= 1e-12
    assert b_constant(3) == pytest.approx(0.95318, abs=1e-5)
    assert b_constant(3) ** 3 == pytest.approx(6 / (2 * math.sqrt(1.5)) * 2 ** -1.5, rel=1e-13)
    evens = [b_constant(m) for m in range(2, 21, 2)]
    assert all(b > a for a, b in zip(evens, evens[1:]))


def test_b_constant_gaussian_moments():
    # even values are Gaussian absolute moments: E Z^(2k) = (2k)! / (k! 2^k)
    for k in range(1, 8):
        assert b_constant(2 * k) ** (2 * k) == pytest.approx(math.factorial(2 * k) / (math.factorial(k) * 2**k),
                                                            rel=1e-12)


def test_b_constant_large_m_warns():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        b_constant(170)
    with pytest.warns(DomainTooLarge):
        value = b_constant(400)
    assert math.isfinite(value)
    with pytest.raises(ValueError):
        b_constant(0)


def test_kernel_identity_and_mass(np_rng):
    I = MarkovKernel.identity(3)
    f = np_rng.normal(size=3)
    np.testing.assert_array_equal(kernel_apply_fn(I, f).values, f)
    mu = SignedMeasure.from_array(np_rng.normal(size=3))
    np.testing.assert_array_equal(kernel_apply_measure(mu, I).weights, mu.weights)
    M = random_kernel(np_rng, 3, 5)
    assert abs(kernel_apply_measure(mu, M).mass - mu.mass) <= 1e-14
    assert isinstance(kernel_apply_measure(random_probability(np_rng, 3), M), ProbabilityMeasure)
    with pytest.raises(SpaceMismatch):
        kernel_apply_fn(M, np.ones(3))


def test_composition_associativity(np_rng):
    for _ in range(50):
        M1, M2 = random_kernel(np_rng, 3, 4), random_kernel(np_rng, 4, 2)
        f = np_rng.normal(size=2)
        lhs = kernel_apply_fn(kernel_compose(M1, M2), f).values
        rhs = kernel_apply_fn(M1, kernel_apply_fn(M2, f)).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-14)
    with pytest.raises(SpaceMismatch):
        kernel_compose(random_kernel(np_rng, 2, 3), random_kernel(np_rng, 2, 2))


def test_total_variation_is_half_l1():
    assert total_variation([1, 0], [0, 1]) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8))
def test_signed_measure_json_round_trip(weights):
    mu = SignedMeasure.from_array(weights)
    back = SignedMeasure.from_json(json.loads(json.dumps(mu.to_json())))
    assert back.weights.tobytes() == mu.weights.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_kernel_json_round_trip(d, e, seed):
    M = random_kernel(np.random.default_rng(seed), d, e)
    back = MarkovKernel.from_json(json.loads(json.dumps(M.to_json())))
    np.testing.assert_array_equal(back.rows, M.rows)
    f = Observable.from_array(np.arange(e, dtype=float))
    assert Observable.from_json(json.loads(json.dumps(f.to_json()))).values.tobytes() == f.values.tobytes()
