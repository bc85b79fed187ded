import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcf_renorm.errors import DomainError, InvalidArgument, SmallDivisorError
from mcf_renorm.lattice_flow import FrequencyVector, Schedule, continued_fraction_run
from mcf_renorm.torus_field import (
    AnalyticityWindow,
    FlatBase,
    HamiltonianSeries,
    ResonanceCone,
    TorusSeries,
    Truncation,
    VectorFieldSeries,
    affine_ymap,
    compose_with_shift,
    divisor_apply,
    project_resonant,
    pullback_linear,
    sampled_sup,
    small_divisor_inverse,
    weighted_norm,
)

GOLDEN = FrequencyVector.named("golden")
OMEGA = GOLDEN.as_array()
SMALL = Truncation(2, 8, 3)
MID = Truncation(2, 16, 3)


def random_series(trunc, seed, ncomp=1, decay=1.0, scale=1.0):
    rng = np.random.default_rng(seed)
    t = trunc.tables
    shape = (t.nmono, ncomp) + t.box
    c = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.exp(-decay * t.knorm)
    return TorusSeries(trunc, c * scale).real_part()


def sample_points(seed, n=6, y_scale=0.05):
    rng = np.random.default_rng(seed)
    return rng.random((n, 2)), y_scale * rng.standard_normal((n, 2))


# --------------------------------------------------------------------------
# weighted norm


def test_zero_series_has_zero_norm():
    assert weighted_norm(TorusSeries.zeros(SMALL), AnalyticityWindow(1.0, 0.1)) == 0.0


@pytest.mark.parametrize("primed", [False, True])
def test_single_mode_norm(primed):
    k, c, rho = (2, -1), 0.3 - 0.4j, 0.7
    f = TorusSeries.from_modes(SMALL, {(k, (0, 0)): c})
    expected = abs(c) * math.exp(rho * 3) * ((1 + 2 * math.pi * 3) if primed else 1.0)
    assert weighted_norm(f, AnalyticityWindow(rho, (0.1, 0.2)), primed) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0), st.floats(0.0, 1.0), st.floats(0.01, 0.5))
def test_norm_monotone_in_strip_width(seed, rho, shrink, r):
    f = random_series(SMALL, seed)
    big = weighted_norm(f, AnalyticityWindow(rho, r))
    assert weighted_norm(f, AnalyticityWindow(rho * (1 - shrink), r)) <= big * (1 + 1e-14)


def test_coefficient_bound_dominates_sampled_sup():
    f = random_series(SMALL, 3)
    w = AnalyticityWindow(0.4, 0.1)
    assert sampled_sup(f, w, n=64) <= weighted_norm(f, w) * (1 + 1e-12)


# --------------------------------------------------------------------------
# resonance split


def test_far_mode_of_golden_cone():
    cone = ResonanceCone(GOLDEN, 0.1)
    assert cone.contains((1, 0))
    assert not cone.contains((0, 0))
    f = TorusSeries.from_modes(SMALL, {((1, 0), (0, 0)): 1.0, ((0, 0), (0, 0)): 2.0})
    plus, minus = project_resonant(f, cone)
    assert minus.coefficient((1, 0), (0, 0))[0] == 1.0
    assert plus.coefficient((0, 0), (0, 0))[0] == 2.0
    assert minus.coefficient((0, 0), (0, 0))[0] == 0.0


def test_taylor_condition_moves_mode_to_resonant_side():
    cone = ResonanceCone(GOLDEN, 0.1, tau=2.0)
    assert cone.contains((1, 0), (1, 0))
    assert not cone.contains((1, 0), (2, 0))
    f = TorusSeries.from_modes(SMALL, {((1, 0), (2, 0)): 1.0, ((1, 0), (1, 0)): 1.0})
    plus, minus = project_resonant(f, cone)
    assert plus.coefficient((1, 0), (2, 0))[0] == 1.0
    assert minus.coefficient((1, 0), (1, 0))[0] == 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.5))
def test_projection_algebra(seed, sigma):
    f = random_series(SMALL, seed, ncomp=2)
    cone = ResonanceCone(GOLDEN, sigma)
    plus, minus = project_resonant(f, cone)
    assert np.array_equal((plus + minus).c, f.c)
    assert not np.any((plus.c != 0) & (minus.c != 0))
    p2, m2 = project_resonant(plus, cone)
    assert np.array_equal(p2.c, plus.c) and m2.is_zero()
    p3, m3 = project_resonant(minus, cone)
    assert p3.is_zero() and np.array_equal(m3.c, minus.c)


# --------------------------------------------------------------------------
# small divisors


def test_inverse_of_zero_is_zero():
    out = small_divisor_inverse(TorusSeries.zeros(SMALL), FlatBase(OMEGA, np.zeros((2, 2))))
    assert out.is_zero()


def test_single_mode_inverse_formula():
    k, c = (1, 0), 0.25 + 0.5j
    g = TorusSeries.from_modes(SMALL, {(k, (0, 0)): c})
    h = small_divisor_inverse(g, FlatBase(OMEGA, np.zeros((2, 2))))
    expected = c / (2j * math.pi * float(np.dot(k, OMEGA)))
    assert h.coefficient(k, (0, 0))[0] == pytest.approx(expected, rel=1e-14)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_inverse_roundtrip_with_linear_base(seed):
    cone = ResonanceCone(GOLDEN, 0.1)
    base = FlatBase(OMEGA, np.array([[1.0, 0.2], [0.0, 1.0]]))
    g = project_resonant(random_series(MID, seed, ncomp=2), cone)[1]
    h = small_divisor_inverse(g, base, cone, AnalyticityWindow(1.0, (0.01, 0.01)))
    w = AnalyticityWindow(0.2, (0.01, 0.01))
    assert weighted_norm(divisor_apply(h, base) - g, w) <= 1e-12 * weighted_norm(g, w)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.02, 0.3))
def test_inverse_norm_bound(seed, sigma):
    cone = ResonanceCone(GOLDEN, sigma)
    base = FlatBase(OMEGA, np.zeros((2, 2)))
    g = project_resonant(random_series(MID, seed, ncomp=2), cone)[1]
    w = AnalyticityWindow(0.3, (0.1, 0.1))
    h = small_divisor_inverse(g, base, cone, w)
    assert weighted_norm(h, w, primed=True) <= 3 / sigma * weighted_norm(g, w) * (1 + 1e-12)


def test_inverse_rejects_resonant_mode():
    cone = ResonanceCone(GOLDEN, 0.1)
    # (2, -1) . omega = 0.236 < 0.1 * 3
    g = TorusSeries.from_modes(SMALL, {((2, -1), (0, 0)): 1.0})
    with pytest.raises(SmallDivisorError) as err:
        small_divisor_inverse(g, FlatBase(OMEGA, np.zeros((2, 2))), cone)
    assert tuple(err.value.details["k"]) == (2, -1)
    with pytest.raises(SmallDivisorError):
        small_divisor_inverse(TorusSeries.from_modes(SMALL, {((0, 0), (0, 0)): 1.0}), FlatBase(OMEGA, np.zeros((2, 2))))


# --------------------------------------------------------------------------
# products, derivatives, evaluation


def low_series(trunc, seed):
    """Random series on ``|k| <= K/2`` and degree <= 1, so products stay inside the truncation."""
    f = random_series(trunc, seed).taylor_cut(0, 1)
    t = trunc.tables
    return TorusSeries(trunc, np.where(t.knorm <= t.K // 2, f.c, 0.0))


def test_product_matches_pointwise_values():
    f, g = low_series(MID, 1), low_series(MID, 2)
    x, y = sample_points(0)
    fg = f.mul(g)
    assert np.abs(fg.evaluate(x, y) - f.evaluate(x, y) * g.evaluate(x, y)).max() < 1e-13


def test_derivatives_match_finite_differences():
    f = random_series(SMALL, 4)
    x, y = sample_points(1)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (f.evaluate(x + e, y) - f.evaluate(x - e, y)) / (2 * h)
        assert np.abs(f.dx(i).evaluate(x, y) - fd).max() < 1e-6
        fd = (f.evaluate(x, y + e) - f.evaluate(x, y - e)) / (2 * h)
        assert np.abs(f.dy(i).evaluate(x, y) - fd).max() < 1e-6


def test_json_roundtrip():
    f = random_series(SMALL, 5, ncomp=2).with_loss(1e-9)
    back = TorusSeries.from_json(json.loads(json.dumps(f.to_json())))
    assert np.array_equal(back.c, f.c) and back.loss == f.loss


# --------------------------------------------------------------------------
# composition


def test_zero_shift_leaves_series_unchanged():
    f = random_series(SMALL, 6)
    assert compose_with_shift(f, TorusSeries.zeros(SMALL, 2)) is f


def test_constant_shift_is_a_phase():
    k, c = (1, 2), 0.3
    f = TorusSeries.from_modes(SMALL, {(k, (0, 0)): c})
    shift = np.array([0.013, -0.021])
    u = TorusSeries.polynomial(SMALL, {(0, 0): shift}, ncomp=2)
    out = compose_with_shift(f, u)
    phase = np.exp(2j * math.pi * np.dot(k, shift))
    assert out.coefficient(k, (0, 0))[0] == pytest.approx(c * phase, abs=1e-15)
    assert np.abs(out.c).sum() == pytest.approx(abs(c), rel=1e-13)


def test_composition_matches_pointwise_evaluation():
    # fast decay keeps the modes pushed past K negligible
    f = random_series(MID, 7, decay=3.0)
    u = random_series(MID, 8, ncomp=2, decay=3.0, scale=1e-3)
    x, y = sample_points(2, y_scale=0.0)
    out = compose_with_shift(f, u)
    ref = np.array([f.evaluate((x[i] + u.evaluate(x[i:i + 1], y[i:i + 1])[0].real)[None], y[i:i + 1])[0] for i in range(len(x))])
    assert np.abs(out.evaluate(x, y) - ref).max() < 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-6, 1e-3))
def test_composition_difference_bound(seed, size):
    rho, rho_p = 0.6, 0.3
    f = random_series(MID, seed, decay=1.5)
    u = random_series(MID, seed + 1, ncomp=2, decay=1.5)
    wp = AnalyticityWindow(rho_p, 0.05)
    u = u.scale(size / weighted_norm(u, wp))
    diff = compose_with_shift(f, u) - f
    mid = AnalyticityWindow((rho + rho_p) / 2, 0.05)
    bound = weighted_norm(f, mid, primed=True) * weighted_norm(u, wp)
    assert weighted_norm(diff, wp) <= bound * (1 + 1e-10) + weighted_norm(f, wp) * 1e-14


def test_oversized_shift_rejected():
    f = random_series(SMALL, 9)
    u = TorusSeries.polynomial(SMALL, {(0, 0): np.array([0.5, 0.5])}, ncomp=2)
    with pytest.raises(DomainError):
        compose_with_shift(f, u, rho_inner=0.5, window=AnalyticityWindow(0.6, 0.1))


# --------------------------------------------------------------------------
# linear pull-back


def test_identity_pullback():
    f = random_series(SMALL, 10)
    out, loss = pullback_linear(f, np.eye(2, dtype=int))
    assert np.array_equal(out.c, f.c) and loss == 0.0


@pytest.mark.parametrize("k", [(1, 0), (0, 1), (2, -1), (1, -1)])
def test_single_mode_moves_to_inverse_transpose_image(k):
    T = np.array([[1, 1], [1, 2]])
    f = TorusSeries.from_modes(SMALL, {(k, (1, 0)): 1.5})
    out, _ = pullback_linear(f, T)
    target = tuple(int(round(v)) for v in np.linalg.solve(T.T, k))
    live = [(kk, nu) for kk, nu, _ in out.modes()]
    assert live == [(target, (1, 0))]
    assert out.coefficient(target, (1, 0))[0] == 1.5


def test_pullback_matches_pointwise_evaluation():
    f = random_series(MID, 11, decay=4.0)
    T = np.array([[0, 1], [1, 1]])
    A, c0 = np.array([[0.5, 0.1], [0.0, 0.3]]), np.array([0.01, -0.02])
    out, _ = pullback_linear(f, T, affine_ymap(MID, A, c0))
    x, y = sample_points(3)
    ref = f.evaluate(x @ np.linalg.inv(T).T, y @ A.T + c0)
    # re-expansion keeps degrees up to D only
    cut = f.taylor_cut(0, 1)
    out1, _ = pullback_linear(cut, T, affine_ymap(MID, A, c0))
    ref1 = cut.evaluate(x @ np.linalg.inv(T).T, y @ A.T + c0)
    assert np.abs(out1.evaluate(x, y) - ref1).max() < 1e-13
    assert np.abs(out.evaluate(x, y) - ref).max() < 1e-2 * np.abs(ref).max()


def test_pullback_keeps_zero_mode_subspace():
    f = random_series(SMALL, 12).zero_mode()
    out, _ = pullback_linear(f, np.array([[2, 1], [1, 1]]))
    assert np.array_equal(out.c, f.c)


def test_pullback_norm_contract_on_resonant_series():
    sched = Schedule("fixed-gap", 2, 3, c=2.0, phi=1.0)
    steps = continued_fraction_run(GOLDEN, sched).steps
    prev, st_ = steps[0], steps[1]
    cone = ResonanceCone(prev.alpha_n, prev.sigma)
    f = project_resonant(random_series(Truncation(2, 24, 3), 13, decay=0.5), cone)[0].without_zero_mode()
    out, loss = pullback_linear(f, st_.T)
    A, delta, rho_prev = st_.A_n, 0.2, 2.0
    rho_p = rho_prev / A - delta
    lhs = weighted_norm(out, AnalyticityWindow(rho_p, 0.1), primed=True)
    assert loss == 0.0
    assert lhs <= (1 + 2 * math.pi / delta) * weighted_norm(f, AnalyticityWindow(rho_prev, 0.1))


# --------------------------------------------------------------------------
# reality


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_operations_preserve_reality(seed):
    f, g = random_series(SMALL, seed), random_series(SMALL, seed + 1)
    u = random_series(SMALL, seed + 2, ncomp=2, scale=1e-3)
    base = FlatBase(OMEGA, np.zeros((2, 2)))
    cone = ResonanceCone(GOLDEN, 0.1)
    results = [
        f.mul(g),
        compose_with_shift(f, u),
        pullback_linear(f, np.array([[1, 1], [0, 1]]))[0],
        small_divisor_inverse(project_resonant(f, cone)[1], base),
        f.dx(0),
        f.dy(1),
    ]
    for r in results:
        assert r.reality_defect() <= 1e-14 * max(1.0, np.abs(r.c).max())


# --------------------------------------------------------------------------
# typed series


def test_typed_series_validation():
    w = AnalyticityWindow(0.5, (0.1, 0.2))
    with pytest.raises(InvalidArgument):
        HamiltonianSeries(TorusSeries.zeros(SMALL, 2), AnalyticityWindow(0.5, 0.1), FlatBase(OMEGA, np.eye(2)))
    with pytest.raises(InvalidArgument):
        HamiltonianSeries(TorusSeries.zeros(SMALL), AnalyticityWindow(0.5, 0.1), FlatBase(OMEGA, [[1, 2], [0, 1]]))
    X = VectorFieldSeries(TorusSeries.zeros(SMALL, 2), w, FlatBase(OMEGA, np.eye(2)))
    assert X.norm() == 0.0
    with pytest.raises(InvalidArgument):
        weighted_norm(X, AnalyticityWindow(0.6, (0.1, 0.2)))
