import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from redcore.errors import ConfigError, DomainError
from redcore.regulator import (SupervisionState, eta_update, lemma1_verify,
                               mal_update, make_state, project_gamma1,
                               project_gamma2, random_feasible_eta,
                               relative_advantage, symmetric_eta)
from redcore.verify import (grid_nearest_feasible, random_projection_input,
                            suite_regulation)

XI1, XI2 = 0.015, 0.15


# ---------------------------------------------------------------------------
# relative advantage
# ---------------------------------------------------------------------------

def test_ra_equal_losses_is_zero():
    np.testing.assert_array_equal(relative_advantage([1.0, 1.0, 1.0]), np.zeros(3))


def test_ra_hand_example():
    np.testing.assert_allclose(relative_advantage([0.5, 1.0, 1.5]),
                               [0.5, 0.0, -0.5], atol=1e-15)


def test_ra_rejects_nonpositive():
    with pytest.raises(DomainError):
        relative_advantage([1.0, 0.0, 2.0])
    with pytest.raises(DomainError):
        relative_advantage([1.0, -0.5])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=6))
def test_ra_sums_to_zero_and_scale_free(losses):
    r = relative_advantage(losses)
    assert abs(r.sum()) <= 1e-12
    np.testing.assert_allclose(relative_advantage(np.asarray(losses) * 7.3), r,
                               atol=1e-12)


# ---------------------------------------------------------------------------
# moving-average loss
# ---------------------------------------------------------------------------

def test_mal_recursion_value():
    state = make_state(2, beta=0.7)
    mal_update(state, [(0, 1.0)])
    assert state.mal[0] == 1.0  # first observation seeds the average
    mal_update(state, [(0, 0.5)])
    assert math.isclose(state.mal[0], 0.3 * 1.0 + 0.7 * 0.5)  # = 0.65
    assert state.mal[1] is None  # unreported modality untouched


def test_mal_fixed_point_and_beta_one():
    state = make_state(1 + 1, beta=0.4)
    mal_update(state, [(0, 2.0)])
    mal_update(state, [(0, 2.0)])
    assert state.mal[0] == 2.0
    hot = make_state(2, beta=1.0)
    mal_update(hot, [(1, 3.0)])
    mal_update(hot, [(1, 0.25)])
    assert hot.mal[1] == 0.25


def test_mal_rejects_nonpositive_loss():
    state = make_state(2)
    with pytest.raises(DomainError):
        mal_update(state, [(0, 0.0)])


def test_mal_smoothing_reduces_variance():
    rng = np.random.default_rng(0)
    state = make_state(2, beta=0.7)
    raw = rng.uniform(0.5, 1.5, size=10_000)
    smoothed = []
    for v in raw:
        mal_update(state, [(0, float(v))])
        smoothed.append(state.mal[0])
    assert np.var(smoothed) <= np.var(raw)


# ---------------------------------------------------------------------------
# projection onto the sphere-with-floor set
# ---------------------------------------------------------------------------

def feasible(v, tol_floor=1e-12, tol_norm=1e-10):
    return np.all(v >= XI1 - tol_floor) and abs(np.linalg.norm(v) - XI2) <= tol_norm


def test_projection_spec_examples():
    out = project_gamma1([0.3, 0.3], XI1, XI2)
    np.testing.assert_allclose(out, [0.106066, 0.106066], atol=2e-6)
    out = project_gamma1([0.3, 0.0], XI1, XI2)
    np.testing.assert_allclose(out, [math.sqrt(XI2**2 - XI1**2), XI1], atol=1e-12)


def test_projection_idempotent_on_members():
    v = symmetric_eta(3, XI1, XI2)
    np.testing.assert_array_equal(project_gamma1(v, XI1, XI2), v)


def test_projection_infeasible_config():
    with pytest.raises(ConfigError):
        project_gamma1([0.1, 0.1], 0.11, 0.15)  # xi1*sqrt(2) > xi2


def test_projection_degenerate_inputs():
    # zero vector: no direction information, spread evenly
    out = project_gamma1(np.zeros(3), XI1, XI2)
    np.testing.assert_allclose(out, symmetric_eta(3, XI1, XI2), rtol=1e-12)
    # all-negative: clamp everything except the largest coordinate
    out = project_gamma1([-1.0, -2.0], XI1, XI2)
    np.testing.assert_allclose(out, [math.sqrt(XI2**2 - XI1**2), XI1], atol=1e-12)
    # tie on the largest negative: lowest index wins
    out = project_gamma1([-1.0, -1.0, -3.0], XI1, XI2)
    assert out[0] > out[1] == out[2] == XI1


@pytest.mark.parametrize("m", [2, 3])
def test_projection_against_grid_oracle(m):
    rng = np.random.default_rng(123 + m)
    for _ in range(40):
        v = random_projection_input(rng, m)
        proj = project_gamma1(v, XI1, XI2)
        assert feasible(proj)
        again = project_gamma1(proj, XI1, XI2)
        assert np.array_equal(proj, again)  # bitwise idempotence
        oracle = grid_nearest_feasible(v, XI1, XI2)
        # spec direction: never farther than the best grid point + 2e-4
        assert np.linalg.norm(proj - v) <= np.linalg.norm(oracle - v) + 2e-4
        # sandwich: the oracle is near-optimal wrt the exact projection too
        assert np.linalg.norm(oracle - v) <= np.linalg.norm(proj - v) + 2.5e-4


@settings(max_examples=120, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_projection_feasibility_property(m, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(scale=float(rng.choice([0.05, 0.3, 2.0])), size=m)
    out = project_gamma1(v, XI1, XI2)
    assert feasible(out)
    assert np.array_equal(project_gamma1(out, XI1, XI2), out)


# ---------------------------------------------------------------------------
# eta update
# ---------------------------------------------------------------------------

def test_eta_update_zero_advantage_is_identity():
    state = make_state(3)
    before = state.eta.copy()
    eta_update(state, np.zeros(3))
    np.testing.assert_array_equal(state.eta, before)


def test_eta_update_spec_example():
    state = SupervisionState(eta=symmetric_eta(2, XI1, XI2), mal=[None, None],
                             alpha1=0.1)
    eta_update(state, np.array([0.5, -0.5]))
    # pre-projection point is (0.056066, 0.156066); exact projection scales it
    v = np.array([XI2 / math.sqrt(2) - 0.05, XI2 / math.sqrt(2) + 0.05])
    expect = v * (XI2 / np.linalg.norm(v))
    np.testing.assert_allclose(state.eta, expect, rtol=1e-12)
    np.testing.assert_allclose(state.eta, [0.050714, 0.141174], atol=2e-4)


def test_eta_update_monotone_direction_suite():
    result = suite_regulation(trials=400, seed=7)
    assert result.passed, result.detail


def test_sign_flipped_update_breaks_monotonicity():
    """Mutation check: flipping the gradient sign must trip the suite."""
    def flipped(state, ra):
        state.eta = project_gamma1(state.eta + state.alpha1 * np.asarray(ra),
                                   state.xi1, state.xi2)
        return state.eta

    result = suite_regulation(trials=400, seed=7, update_fn=flipped)
    assert not result.passed


def test_state_invariants_enforced():
    with pytest.raises(ConfigError):
        SupervisionState(eta=np.array([0.5, 0.5]), mal=[None, None])  # wrong norm
    with pytest.raises(ConfigError):
        SupervisionState(eta=np.array([0.001, XI2]), mal=[None, None])  # floor broken
    with pytest.raises(ConfigError):
        make_state(2, xi1=0.2, xi2=0.15)  # infeasible set


def test_random_feasible_eta_is_feasible_and_seeded():
    a = random_feasible_eta(4, XI1, XI2, seed=5)
    b = random_feasible_eta(4, XI1, XI2, seed=5)
    assert np.array_equal(a, b)
    assert feasible(a)
    assert not np.array_equal(a, random_feasible_eta(4, XI1, XI2, seed=6))


# ---------------------------------------------------------------------------
# convex relaxation (lemma check)
# ---------------------------------------------------------------------------

def test_gamma2_projection_matches_kkt():
    rng = np.random.default_rng(3)
    for _ in range(50):
        w = rng.normal(scale=0.3, size=3)
        p = project_gamma2(w, XI1, XI2)
        assert np.all(p >= XI1 - 1e-12)
        assert np.linalg.norm(p) <= XI2 + 1e-10
        # projection optimality vs random feasible points
        for _ in range(20):
            q = project_gamma2(rng.normal(scale=0.2, size=3), XI1, XI2)
            assert np.linalg.norm(p - w) <= np.linalg.norm(q - w) + 1e-8


def test_lemma1_hand_case():
    report = lemma1_verify([1.0, -1.0], XI1, XI2)
    np.testing.assert_allclose(report["eta_star"],
                               [XI1, math.sqrt(XI2**2 - XI1**2)], atol=1e-7)
    assert report["on_sphere"]


def test_lemma1_three_way_case():
    report = lemma1_verify([0.5, 0.0, -0.5], XI1, XI2)
    assert abs(report["norm"] - XI2) < 1e-6


def test_lemma1_rejects_invalid_r():
    with pytest.raises(DomainError):
        lemma1_verify([0.0, 0.0], XI1, XI2)
    with pytest.raises(DomainError):
        lemma1_verify([0.5, 0.1], XI1, XI2)  # not zero-sum


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31 - 1))
def test_lemma1_property_optimum_on_sphere(m, seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=m)
    r -= r.mean()
    if np.all(np.abs(r) < 1e-12):
        return
    report = lemma1_verify(r, XI1, XI2)
    assert report["on_sphere"]
