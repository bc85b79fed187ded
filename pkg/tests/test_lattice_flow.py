import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from mpmath import mp, mpf

from mcf_renorm.errors import InvalidArgument, PrecisionExhausted, RationalFrequency, ScheduleError
from mcf_renorm.lattice_flow import (
    FlowParams,
    FrequencyVector,
    LatticeMatrix,
    Schedule,
    UnimodularMatrix,
    calibrate_lambda,
    continued_fraction_run,
    delta_floor,
    diophantine_scan,
    embed_frequency,
    fractional_action,
    geodesic_flow,
    in_siegel_set,
    lattice_min,
    norm_envelopes,
    perp_contraction,
    reduce_to_fundamental,
    resonance_contraction,
    step_discrepancies,
)

from oracles import brute_force_dio2, brute_force_lattice_min, fraction_action, gauss_map_convergents, perp_contraction_svd

GOLDEN = FrequencyVector.named("golden")


def elementary_product(word, d):
    """Unimodular matrix from a word of (i, j, sign) row operations."""
    m = [[int(i == j) for j in range(d)] for i in range(d)]
    for i, j, s in word:
        if i != j:
            m[i] = [a + s * b for a, b in zip(m[i], m[j])]
    return UnimodularMatrix(tuple(map(tuple, m)))


words = st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2), st.sampled_from([-1, 1])), max_size=8)


# ---------------------------------------------------------------- embedding


def test_embed_zero_offset_is_identity():
    M = embed_frequency(FrequencyVector((0,)))
    assert M.as_array().tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_embed_d2_and_d3():
    assert embed_frequency(FrequencyVector(("0.25",))).as_array().tolist() == [[1, 0.25], [0, 1]]
    M = embed_frequency(FrequencyVector(("0.5", "0.125")))
    assert M.as_array().tolist() == [[1, 0, 0.5], [0, 1, 0.125], [0, 0, 1]]
    alpha, A, beta, gamma = M.decomposition()
    assert gamma == 1 and all(b == 0 for b in beta)
    assert M.det == 1


def test_non_finite_frequency_rejected():
    with pytest.raises(InvalidArgument):
        FrequencyVector((float("nan"),))


def test_decomposition_roundtrip():
    M = LatticeMatrix((("1.5", "0.2"), ("0.3", "0.7066666666666667")))
    M2 = LatticeMatrix.from_decomposition(*M.decomposition(), prec=M.prec)
    assert float(M.max_abs_diff(M2)) < 1e-60


# ---------------------------------------------------------------- flow


def test_flow_zero_time_is_identity():
    M = embed_frequency(GOLDEN)
    assert float(geodesic_flow(M, 0).max_abs_diff(M)) == 0.0


def test_flow_of_identity_is_diagonal():
    E = geodesic_flow(embed_frequency(FrequencyVector((0,))), 1)
    assert np.allclose(E.as_array(), np.diag([math.exp(-1), math.e]), rtol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-20, 20))
def test_flow_preserves_determinant(a, t):
    M = geodesic_flow(embed_frequency(FrequencyVector((a,))), t)
    assert abs(float(M.det) - 1) < 1e-60


def test_flow_precision_exhaustion():
    with pytest.raises(PrecisionExhausted):
        geodesic_flow(embed_frequency(GOLDEN), 200)


def test_flow_params_validation():
    with pytest.raises(InvalidArgument):
        FlowParams((-1.0, 0.5))
    with pytest.raises(InvalidArgument):
        FlowParams((1.0, -1.0))
    assert FlowParams.default(3).exponents == (-1.0, -1.0, 2.0)


# ---------------------------------------------------------------- reduction


def test_reduce_identity():
    I = embed_frequency(FrequencyVector((0,)))
    P, M = reduce_to_fundamental(I)
    assert P.is_identity()
    assert float(M.max_abs_diff(I)) == 0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0, 8), words)
def test_reduction_lands_in_siegel_set(a, t, word):
    M = geodesic_flow(embed_frequency(FrequencyVector((a, a * a))), t).left_multiply(elementary_product(word, 3))
    P, Mr = reduce_to_fundamental(M)
    assert in_siegel_set(Mr, 0.75)
    assert abs(P.det) == 1
    assert float(M.left_multiply(P).max_abs_diff(Mr)) < 1e-50


def test_unimodular_rejects_bad_det():
    with pytest.raises(InvalidArgument):
        UnimodularMatrix(((2, 0), (0, 1)))
    with pytest.raises(InvalidArgument):
        UnimodularMatrix(((1, 0), (0, 1)), det=-1)


@settings(max_examples=30, deadline=None)
@given(words, words)
def test_unimodular_inverse_exact(w1, w2):
    A = elementary_product(w1, 3) @ elementary_product(w2, 3).transpose()
    assert (A @ A.inverse()).is_identity()


# ---------------------------------------------------------------- lattice minimum


def test_lattice_min_identity():
    res = lattice_min(embed_frequency(FrequencyVector((0,))))
    assert float(res.value) == 1.0 and res.certified


def test_lattice_min_diagonal_matches_enumeration():
    E = geodesic_flow(embed_frequency(FrequencyVector((0,))), 1)
    oracle = brute_force_lattice_min(E.as_array(), 5)
    assert oracle == pytest.approx(0.36787944117144233, rel=1e-15)
    assert float(lattice_min(E).value) == pytest.approx(oracle, rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0, 3))
def test_lattice_min_matches_brute_force(a, b, t):
    M = geodesic_flow(embed_frequency(FrequencyVector((a, b))), t)
    res = lattice_min(M)
    oracle = brute_force_lattice_min(M.as_array(), 6)
    assert res.certified
    assert float(res.value) <= oracle * (1 + 1e-12)
    # the argmin is a genuine lattice vector achieving the value
    k = np.array(res.argmin, dtype=float)
    assert float(np.max(np.abs(k @ M.as_array()))) == pytest.approx(float(res.value), rel=1e-12)


def test_lattice_min_left_invariance():
    rng = np.random.default_rng(7)
    M = geodesic_flow(embed_frequency(FrequencyVector.named("plastic-cubic")), 2.5)
    base = float(lattice_min(M).value)
    for _ in range(100):
        word = [(int(rng.integers(3)), int(rng.integers(3)), int(rng.choice([-1, 1]))) for _ in range(6)]
        v = float(lattice_min(M.left_multiply(elementary_product(word, 3))).value)
        assert abs(v - base) / base <= 1e-10


def test_lattice_min_uncertified_flag():
    M = geodesic_flow(embed_frequency(GOLDEN), 3)
    assert lattice_min(M, enumeration_bound=1).bound_needed >= 1
    with pytest.raises(InvalidArgument):
        lattice_min(M, enumeration_bound=0)


# ---------------------------------------------------------------- fractional action


def test_fractional_identity_and_translation():
    a = FrequencyVector(("0.3",))
    assert fractional_action(UnimodularMatrix.identity(2), a).alpha == a.alpha
    shifted = fractional_action(UnimodularMatrix(((1, 1), (0, 1))), a)
    assert float(shifted.alpha[0]) == pytest.approx(1.3, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(words, words, st.fractions(0, 1, max_denominator=97), st.fractions(0, 1, max_denominator=89))
def test_fractional_group_property(w1, w2, p, q):
    T1, T2 = elementary_product(w1, 3), elementary_product(w2, 3)
    with mp.workprec(256):
        a = FrequencyVector((mpf(p.numerator) / p.denominator, mpf(q.numerator) / q.denominator))
    try:
        seq = fractional_action(T2, fractional_action(T1, a))
        comp = fractional_action(T2 @ T1, a)
    except Exception as exc:  # singular chart for this rational point
        assert exc.__class__.__name__ == "ParameterSingularity"
        return
    for x, y in zip(seq.alpha, comp.alpha):
        assert abs(float(x - y)) <= 1e-12 * max(1, abs(float(y)))
    exact = fraction_action((T2 @ T1).entries, [p, q])
    for x, y in zip(comp.alpha, exact):
        assert float(x) == pytest.approx(float(y), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------- CF run


def _rows_as_convergents(P, convs):
    """Indices j with row = +-(q_j, -p_j) for each row of P, or None."""
    lookup = {}
    for j, (p, q) in enumerate(convs):
        lookup[(q, -p)] = j
        lookup[(-q, p)] = j
    return [lookup.get(tuple(r)) for r in P.entries]


@pytest.mark.parametrize("name", ["golden", "silver"])
def test_convergents_match_gauss_map(name):
    alpha = FrequencyVector.named(name)
    run = continued_fraction_run(alpha, Schedule("fixed-gap", 2, 16, phi=0.5, c=2.5), completion="convergent")
    convs = gauss_map_convergents(alpha.alpha[0], 40)
    seen = []
    for step in run[1:]:
        idx = _rows_as_convergents(step.P, convs)
        assert None not in idx, (step.n, step.P.entries)
        assert abs(idx[0] - idx[1]) == 1
        seen.append(max(idx))
    assert len(seen) >= 15
    assert seen == sorted(seen) and len(set(seen)) >= 8


def test_golden_orbit_is_periodic():
    run = continued_fraction_run(GOLDEN, Schedule("fixed-gap", 2, 14, phi=0.5, c=2.5))
    g = GOLDEN.alpha[0]
    with mp.workprec(256):
        for step in run:
            assert min(abs(abs(step.alpha_n.alpha[0]) - v) for v in (g, 1 / g)) < 1e-60
    tail = [s.T.entries for s in run[6:]]
    assert all(a == b for a, b in zip(tail, tail[2:]))


def test_golden_geometric_transfers_are_fibonacci_powers():
    run = continued_fraction_run(FrequencyVector.named("golden", 512), Schedule("geometric", 2, 6, t1=2, xi=1, c=3))
    fib = [0, 1]
    while len(fib) < 200:
        fib.append(fib[-1] + fib[-2])
    for step in run[1:]:
        ent = sorted(abs(x) for r in step.T.entries for x in r)
        k = fib.index(ent[-1])
        assert ent == sorted([fib[k], fib[k - 1], fib[k - 1], fib[k - 2]])


def test_rational_frequency_detected():
    with pytest.raises(RationalFrequency):
        continued_fraction_run(FrequencyVector((0,)), Schedule("fixed-gap", 2, 6, phi=0.5, c=2))
    with pytest.raises(RationalFrequency):
        continued_fraction_run(FrequencyVector(("0.375",)), Schedule("fixed-gap", 2, 10, phi=0.5, c=2))


@pytest.mark.parametrize("name,d", [("golden", 2), ("plastic-cubic", 3)])
def test_step_identities(name, d):
    alpha = FrequencyVector.named(name)
    run = continued_fraction_run(alpha, Schedule("fixed-gap", d, 12, phi=0.75, c=2.5))
    for step in run:
        prev = run[step.n - 1] if step.n else None
        disc = step_discrepancies(step, prev, alpha)
        assert max(disc.values()) <= 1e-10, disc
        assert step.reduction_error <= 1e-38
        if step.n:
            assert abs(float(step.lambda_n - mpmath.exp((d - 1) * step.t) / step.gamma_n)) <= 1e-10 * abs(float(step.lambda_n))


def test_plastic_delta_bounded_below():
    run = continued_fraction_run(FrequencyVector.named("plastic-cubic", 512), Schedule("fixed-gap", 3, 20, phi=1.0, c=2.5))
    assert all(s.delta_certified for s in run)
    floor = delta_floor(run)
    assert floor > 0.3


def test_merged_steps_recorded():
    alpha = FrequencyVector.named("liouville", 512)
    run = continued_fraction_run(alpha, Schedule("fixed-gap", 2, 18, phi=1.0, c=2.5))
    assert run.merged > 0
    times = [float(t) for t in run.schedule.times]
    assert all(b > a for a, b in zip(times, times[1:]))
    assert len(times) == len(run)


def test_schedule_validation():
    with pytest.raises(ScheduleError):
        Schedule("geometric", 2, 5, t1=1, xi=1, c=1.5)  # too small for contraction
    with pytest.raises(ScheduleError):
        Schedule("geometric", 2, 5, t1=1, xi=1, c=4.5)  # breaks c < d(1+xi)
    s = Schedule("geometric", 2, 5, t1=2, xi=1, c=3)
    assert all(s.geometric_conditions().values())
    with pytest.raises(InvalidArgument):
        Schedule("bogus", 2, 5)


def test_fixed_gap_times_formula():
    s = Schedule("fixed-gap", 2, 5, phi=0.5, theta=0.1)
    beta = 2 * 0.1 / 0.9
    for n in range(1, 5):
        t, tp = float(s.planned_time(n)), float(s.planned_time(n - 1))
        assert t == pytest.approx(0.5 / 0.2 * ((1 + beta) ** n - 1), rel=1e-14)
        # constant hyperbolicity exponent
        assert 0.9 * (t - tp) - 2 * 0.1 * tp == pytest.approx(0.5, rel=1e-12)


def test_geometric_schedule_exact_relations():
    run = continued_fraction_run(FrequencyVector.named("golden", 512), Schedule("geometric", 2, 5, t1=2, xi=1, c=3))
    times = run.schedule.times
    for n in range(2, len(times)):
        assert times[n] - times[n - 1] == times[n - 1]
        assert run[n].sigma == pytest.approx(math.exp(-3 * float(times[n] - times[n - 1])), rel=1e-15)


@pytest.mark.parametrize("name,c", [("golden", 5.0), ("plastic-cubic", 10.0)])
def test_adaptive_schedule_meets_target(name, c):
    alpha = FrequencyVector.named(name, 256)
    run = continued_fraction_run(alpha, Schedule("adaptive", alpha.d, 5, c=c, target=0.5, dt_min=0.25))
    assert all(s.A_n <= 0.5 for s in run[1:])
    assert all(b > a for a, b in zip(run.schedule.times, run.schedule.times[1:]))


def test_adaptive_schedule_reports_too_small_cone_exponent():
    alpha = FrequencyVector.named("plastic-cubic", 256)
    with pytest.raises(ScheduleError):
        continued_fraction_run(alpha, Schedule("adaptive", 3, 4, c=2.0, target=0.5, dt_min=0.25, dt_max=4.0))


# ---------------------------------------------------------------- contraction


def test_contraction_identity():
    rep = resonance_contraction(UnimodularMatrix.identity(2), GOLDEN, 0.1, 64)
    assert rep.A_measured == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(InvalidArgument):
        resonance_contraction(UnimodularMatrix.identity(2), GOLDEN, 0.1, 1)


def _perp_oracle(T, omega):
    return perp_contraction_svd(T.inverse().entries, omega.omega)


def test_contraction_small_aperture_tends_to_perp():
    run = continued_fraction_run(GOLDEN, Schedule("fixed-gap", 2, 4, phi=0.75, c=2.5))
    for step in run[1:]:
        prev = run[step.n - 1]
        oracle = _perp_oracle(step.T, prev.alpha_n)
        assert perp_contraction(step.T, prev.alpha_n) == pytest.approx(oracle, rel=1e-10)
        rep = resonance_contraction(step.T, prev.alpha_n, 1e-9, 256)
        assert rep.A_measured == pytest.approx(oracle, rel=1e-6)


def test_perp_identity_through_lattice_matrices():
    run = continued_fraction_run(FrequencyVector.named("plastic-cubic"), Schedule("fixed-gap", 3, 4, phi=0.75, c=2.5))
    rng = np.random.default_rng(3)
    for step in run[1:]:
        prev = run[step.n - 1]
        with mp.workprec(256):
            w = mpmath.matrix(list(prev.omega_n))
            xi = mpmath.matrix([mpf(float(x)) for x in rng.standard_normal(3)])
            xi = xi - w * ((w.T * xi)[0] / (w.T * w)[0])
            Tit = mpmath.matrix([[mpf(x) for x in r] for r in step.T.inverse().entries]).T
            lhs = mpmath.norm(Tit * xi)
            Mp = mpmath.matrix([list(r) for r in prev.M_red.entries])
            Mc = mpmath.matrix([list(r) for r in step.M_red.entries])
            rhs = mpmath.exp(-step.dt) * mpmath.norm((Mp * Mc**-1).T * xi)
            assert abs(float(lhs - rhs)) <= 1e-40 * float(lhs)


def test_contraction_bounded_by_splitting_estimate():
    run = continued_fraction_run(FrequencyVector.named("silver", 512), Schedule("geometric", 2, 6, t1=2, xi=1, c=3))
    for step in run[1:]:
        assert step.A_n <= step.A_bound * (1 + 1e-9)
        prev = run[step.n - 1]
        rep = resonance_contraction(step.T, prev.alpha_n, prev.sigma, 64)
        assert rep.A_integer <= rep.A_measured * (1 + 1e-9)


# ---------------------------------------------------------------- diophantine scan


def test_golden_badly_approximable():
    scan = diophantine_scan(GOLDEN, 0.0, 100)
    oracle = brute_force_dio2([float(GOLDEN.alpha[0])], 100)
    assert scan.min_value == pytest.approx(oracle, rel=1e-12)
    assert scan.min_value > 0.2


def test_rational_entry_scan_zero():
    scan = diophantine_scan(FrequencyVector(("0.5", "0.3")), 0.0, 10)
    assert scan.min_value == 0.0


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0, 0.5))
def test_dio_forms_chain(a, b, eps):
    scan = diophantine_scan(FrequencyVector((a, b)), eps, 12)
    assert scan.min_value <= scan.min_omega_form * (1 + 1e-12)


# ---------------------------------------------------------------- diagnostics


def test_lambda_stable_and_envelopes():
    run = continued_fraction_run(FrequencyVector.named("golden", 512), Schedule("geometric", 2, 6, t1=2, xi=1, c=3))
    L3, L6 = calibrate_lambda(run, 3), calibrate_lambda(run)
    assert L6 / L3 <= 1.5
    for step in run[1:]:
        assert step.perp_contraction <= 0.5 * L6 * math.exp(-step.hyp_exponent) * (1 + 1e-12)
    env = norm_envelopes(run)
    assert env.violations == ()


def test_step_record_is_json():
    run = continued_fraction_run(GOLDEN, Schedule("fixed-gap", 2, 3, phi=0.5, c=2.5))
    rec = json.loads(json.dumps(run[2].to_record()))
    assert rec["schema"] == 1 and rec["det_P"] in (1, -1)
    assert [[int(x) for x in r] for r in rec["P"]] == [list(r) for r in run[2].P.entries]
    assert mpf(rec["gamma"]) == pytest.approx(float(run[2].gamma_n))
