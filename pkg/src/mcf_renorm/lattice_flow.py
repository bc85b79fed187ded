"""Multidimensional continued fractions from the geodesic flow on lattices.

A frequency ``omega = (alpha, 1)`` is embedded as the unipotent lattice
matrix ``M0``; the diagonal flow ``E^t`` pushes it towards the cusp and a
lattice reduction pulls it back, producing exact integer transfer matrices
``T`` whose products ``P`` play the role of continued-fraction convergent
matrices.  Everything real is carried in :mod:`mpmath` at a per-object binary
precision; integer matrices are exact Python ints.

Conventions
-----------
Lattices are row lattices: ``M`` spans ``{k^T M : k in Z^d}``.  After
reduction the *last* row is the shortest, so the last column of ``M`` is
proportional to the renormalized frequency and ``gamma = M[d-1][d-1]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import mpmath
import numpy as np
from mpmath import mp, mpf

from .errors import (
    InvalidArgument,
    ParameterSingularity,
    PrecisionExhausted,
    RationalFrequency,
    ReductionFailure,
    ScheduleError,
)

DEFAULT_PREC = 256
SCHEMA_VERSION = 1

# ---------------------------------------------------------------------------
# small matrix helpers (lists of rows)


def _identity_int(d):
    return tuple(tuple(int(i == j) for j in range(d)) for i in range(d))


def _int_matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return tuple(
        tuple(sum(a[i][k] * b[k][j] for k in range(m)) for j in range(p)) for i in range(n)
    )


def _bareiss_det(rows):
    """Exact determinant of an integer matrix (fraction-free elimination)."""
    a = [list(r) for r in rows]
    n = len(a)
    sign, prev = 1, 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for i in range(k + 1, n):
                if a[i][k] != 0:
                    a[k], a[i] = a[i], a[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


def _exact_inverse(rows):
    n = len(rows)
    a = [[Fraction(x) for x in r] + [Fraction(int(i == j)) for j in range(n)] for i, r in enumerate(rows)]
    for c in range(n):
        piv = next((r for r in range(c, n) if a[r][c] != 0), None)
        if piv is None:
            raise ReductionFailure("singular integer matrix")
        a[c], a[piv] = a[piv], a[c]
        inv = 1 / a[c][c]
        a[c] = [x * inv for x in a[c]]
        for r in range(n):
            if r != c and a[r][c] != 0:
                f = a[r][c]
                a[r] = [x - f * y for x, y in zip(a[r], a[c])]
    out = []
    for r in range(n):
        row = []
        for x in a[r][n:]:
            if x.denominator != 1:
                raise ReductionFailure("inverse is not integral")
            row.append(int(x))
        out.append(tuple(row))
    return tuple(out)


def _mp_matmul(a, b):
    n, m, p = len(a), len(b), len(b[0])
    return [[mpmath.fsum(a[i][k] * b[k][j] for k in range(m)) for j in range(p)] for i in range(n)]


def _mp_det(rows):
    return mpmath.det(mpmath.matrix([list(r) for r in rows]))


def _to_float(rows):
    return np.array([[float(x) for x in r] for r in rows], dtype=float)


def _mp_str(x, prec):
    return mpmath.nstr(x, max(17, int(prec * math.log10(2)) + 2), strip_zeros=False, min_fixed=1, max_fixed=0)


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class FrequencyVector:
    """Frequency ``omega = (alpha, 1)`` with ``alpha`` in ``R^(d-1)``.

    Parameters
    ----------
    alpha : tuple of mpf
        Offsets, stored at ``prec`` bits.
    prec : int
        Binary working precision.
    """

    alpha: tuple
    prec: int = DEFAULT_PREC

    def __post_init__(self):
        if len(self.alpha) < 1:
            raise InvalidArgument("frequency vector needs d >= 2")
        with mp.workprec(self.prec):
            vals = tuple(mpf(a) for a in self.alpha)
        for a in vals:
            if not mpmath.isfinite(a):
                raise InvalidArgument("non-finite frequency entry")
        object.__setattr__(self, "alpha", vals)

    @property
    def d(self) -> int:
        return len(self.alpha) + 1

    @property
    def omega(self) -> tuple:
        with mp.workprec(self.prec):
            return self.alpha + (mpf(1),)

    def as_array(self) -> np.ndarray:
        return np.array([float(w) for w in self.omega])

    @classmethod
    def from_strings(cls, values: Sequence[str], prec: int = DEFAULT_PREC) -> "FrequencyVector":
        with mp.workprec(prec):
            return cls(tuple(mpf(v) for v in values), prec)

    @classmethod
    def named(cls, name: str, prec: int = DEFAULT_PREC) -> "FrequencyVector":
        """Named test frequencies.

        ``golden`` is ``(sqrt5 - 1)/2``, ``silver`` is ``sqrt2 - 1``,
        ``plastic-cubic`` is ``(p - 1, p^2 - p)`` with ``p^3 = p + 1`` and
        ``liouville`` is the lacunary decimal ``sum 10^(-k!)``.
        """
        with mp.workprec(prec + 32):
            if name == "golden":
                vals = ((mpmath.sqrt(5) - 1) / 2,)
            elif name == "silver":
                vals = (mpmath.sqrt(2) - 1,)
            elif name == "plastic-cubic":
                p = mpmath.findroot(lambda x: x**3 - x - 1, mpf("1.3247"))
                vals = (p - 1, p * p - p)
            elif name == "liouville":
                s, k = mpf(0), 1
                while math.factorial(k) < prec * 0.31 + 10:
                    s += mpf(10) ** (-math.factorial(k))
                    k += 1
                vals = (s,)
            else:
                raise InvalidArgument(f"unknown named frequency {name!r}")
        return cls(vals, prec)


@dataclass(frozen=True)
class UnimodularMatrix:
    """Exact integer matrix with determinant +1 or -1."""

    entries: tuple
    det: int = 0

    def __post_init__(self):
        rows = tuple(tuple(int(x) for x in r) for r in self.entries)
        if any(len(r) != len(rows) for r in rows):
            raise InvalidArgument("unimodular matrix must be square")
        det = _bareiss_det(rows)
        if det not in (1, -1):
            raise InvalidArgument(f"determinant {det} is not +-1")
        if self.det not in (0, det):
            raise InvalidArgument("stored determinant disagrees with exact value")
        object.__setattr__(self, "entries", rows)
        object.__setattr__(self, "det", det)

    @classmethod
    def identity(cls, d: int) -> "UnimodularMatrix":
        return cls(_identity_int(d))

    @property
    def d(self) -> int:
        return len(self.entries)

    def __matmul__(self, other: "UnimodularMatrix") -> "UnimodularMatrix":
        return UnimodularMatrix(_int_matmul(self.entries, other.entries))

    def inverse(self) -> "UnimodularMatrix":
        return UnimodularMatrix(_exact_inverse(self.entries))

    def transpose(self) -> "UnimodularMatrix":
        return UnimodularMatrix(tuple(zip(*self.entries)))

    def is_identity(self) -> bool:
        return self.entries == _identity_int(self.d)

    def blocks(self):
        """Return ``(P11, p12, p21, p22)`` of the (d-1, 1) block split."""
        e, d = self.entries, self.d
        return (
            tuple(r[: d - 1] for r in e[: d - 1]),
            tuple(r[d - 1] for r in e[: d - 1]),
            e[d - 1][: d - 1],
            e[d - 1][d - 1],
        )

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=float)

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array(), 2))


@dataclass(frozen=True)
class LatticeMatrix:
    """Real ``d x d`` matrix of covolume one (a row lattice basis)."""

    entries: tuple
    prec: int = DEFAULT_PREC

    def __post_init__(self):
        with mp.workprec(self.prec):
            rows = tuple(tuple(mpf(x) for x in r) for r in self.entries)
        if any(len(r) != len(rows) for r in rows):
            raise InvalidArgument("lattice matrix must be square")
        object.__setattr__(self, "entries", rows)

    @property
    def d(self) -> int:
        return len(self.entries)

    @property
    def det(self):
        with mp.workprec(self.prec):
            return _mp_det(self.entries)

    @property
    def gamma(self):
        return self.entries[-1][-1]

    def decomposition(self):
        """Return ``(alpha, A, beta, gamma)`` with ``M = [[A + alpha beta^T, gamma alpha], [beta^T, gamma]]``."""
        d = self.d
        e = self.entries
        gamma = e[d - 1][d - 1]
        if gamma == 0:
            raise ParameterSingularity("gamma = 0: matrix outside the chart")
        with mp.workprec(self.prec):
            alpha = tuple(e[i][d - 1] / gamma for i in range(d - 1))
            beta = tuple(e[d - 1][:d - 1])
            A = tuple(tuple(e[i][j] - alpha[i] * beta[j] for j in range(d - 1)) for i in range(d - 1))
        return alpha, A, beta, gamma

    @classmethod
    def from_decomposition(cls, alpha, A, beta, gamma, prec=DEFAULT_PREC) -> "LatticeMatrix":
        d = len(alpha) + 1
        with mp.workprec(prec):
            rows = [
                [mpf(A[i][j]) + mpf(alpha[i]) * mpf(beta[j]) for j in range(d - 1)] + [mpf(gamma) * mpf(alpha[i])]
                for i in range(d - 1)
            ]
            rows.append([mpf(b) for b in beta] + [mpf(gamma)])
        return cls(tuple(map(tuple, rows)), prec)

    def as_array(self) -> np.ndarray:
        return _to_float(self.entries)

    def left_multiply(self, P: UnimodularMatrix) -> "LatticeMatrix":
        with mp.workprec(self.prec):
            rows = _mp_matmul([[mpf(x) for x in r] for r in P.entries], self.entries)
        return LatticeMatrix(tuple(map(tuple, rows)), self.prec)

    def max_abs_diff(self, other: "LatticeMatrix"):
        with mp.workprec(max(self.prec, other.prec)):
            return max(abs(a - b) for ra, rb in zip(self.entries, other.entries) for a, b in zip(ra, rb))


@dataclass(frozen=True)
class FlowParams:
    """Exponents of the diagonal flow ``E^t = diag(e^(r_1 t), ..., e^(r_d t))``."""

    exponents: tuple

    def __post_init__(self):
        r = tuple(float(x) for x in self.exponents)
        if len(r) < 2:
            raise InvalidArgument("need at least two exponents")
        if abs(sum(r)) > 1e-12 * max(1.0, max(abs(x) for x in r)):
            raise InvalidArgument("flow exponents must sum to zero")
        if not (all(x < 0 for x in r[:-1]) and r[-1] > 0):
            raise InvalidArgument("flow exponents must be negative except the last")
        object.__setattr__(self, "exponents", r)

    @classmethod
    def default(cls, d: int) -> "FlowParams":
        return cls(tuple([-1.0] * (d - 1) + [float(d - 1)]))


# ---------------------------------------------------------------------------
# basic operations


def embed_frequency(alpha: FrequencyVector) -> LatticeMatrix:
    """Unipotent lattice matrix with last column ``(alpha, 1)``.

    Examples
    --------
    >>> embed_frequency(FrequencyVector((0.5,))).as_array().tolist()
    [[1.0, 0.5], [0.0, 1.0]]
    """
    d = alpha.d
    with mp.workprec(alpha.prec):
        rows = []
        for i in range(d - 1):
            rows.append(tuple(mpf(int(i == j)) for j in range(d - 1)) + (alpha.alpha[i],))
        rows.append(tuple(mpf(0) for _ in range(d - 1)) + (mpf(1),))
    return LatticeMatrix(tuple(rows), alpha.prec)


def geodesic_flow(M: LatticeMatrix, t, params: FlowParams | None = None) -> LatticeMatrix:
    """Right action ``M E^t``.

    Raises :class:`PrecisionExhausted` when the spread of scales
    ``e^((r_d - r_1) t)`` uses more than half the working precision.
    """
    params = params or FlowParams.default(M.d)
    if len(params.exponents) != M.d:
        raise InvalidArgument("flow exponents do not match the dimension")
    with mp.workprec(M.prec):
        t = mpf(t)
        if not mpmath.isfinite(t):
            raise InvalidArgument("flow time must be finite")
        spread = float(abs(t)) * (max(params.exponents) - min(params.exponents)) / math.log(2)
        if spread > M.prec / 2:
            raise PrecisionExhausted(
                f"flow time {float(t):.3g} needs ~{2 * spread:.0f} bits; raise precision_bits",
                bits_needed=int(2 * spread) + 64,
            )
        scale = [mpmath.exp(mpf(r) * t) for r in params.exponents]
        rows = tuple(tuple(x * s for x, s in zip(r, scale)) for r in M.entries)
    return LatticeMatrix(rows, M.prec)


def fractional_action(T: UnimodularMatrix, alpha: FrequencyVector) -> FrequencyVector:
    """Fractional linear action ``(T11 a + t12) / (t21 . a + t22)``."""
    if T.d != alpha.d:
        raise InvalidArgument("dimension mismatch")
    T11, t12, t21, t22 = T.blocks()
    with mp.workprec(alpha.prec):
        a = alpha.alpha
        den = mpmath.fsum(x * y for x, y in zip(t21, a)) + t22
        scale = 1 + mpmath.fsum(abs(x) for x in a)
        if abs(den) <= mpf(2) ** (-alpha.prec // 2) * scale * max(1, max(abs(x) for x in t21 + (t22,))):
            raise ParameterSingularity("vanishing denominator in the fractional action")
        num = tuple(mpmath.fsum(T11[i][j] * a[j] for j in range(len(a))) + t12[i] for i in range(len(a)))
        return FrequencyVector(tuple(x / den for x in num), alpha.prec)


# ---------------------------------------------------------------------------
# reduction


def _gram_schmidt(rows):
    n = len(rows)
    star, mu, norms = [], [[mpf(0)] * n for _ in range(n)], []
    for i in range(n):
        v = list(rows[i])
        for j in range(i):
            mu[i][j] = mpmath.fsum(a * b for a, b in zip(rows[i], star[j])) / norms[j]
            v = [a - mu[i][j] * b for a, b in zip(v, star[j])]
        star.append(v)
        norms.append(mpmath.fsum(x * x for x in v))
    return mu, norms


def _lll(rows, lovasz):
    """Textbook LLL on mp rows; returns (U, reduced) with reduced = U rows."""
    n = len(rows)
    B = [list(r) for r in rows]
    U = [[int(i == j) for j in range(n)] for i in range(n)]
    mu, norms = _gram_schmidt(B)
    if any(x == 0 for x in norms):
        raise ReductionFailure("degenerate lattice basis")
    k, guard = 1, 0
    while k < n:
        guard += 1
        if guard > 100000:
            raise ReductionFailure("LLL did not terminate")
        for j in range(k - 1, -1, -1):
            q = int(mpmath.nint(mu[k][j]))
            if q:
                B[k] = [a - q * b for a, b in zip(B[k], B[j])]
                U[k] = [a - q * b for a, b in zip(U[k], U[j])]
                for i in range(j):
                    mu[k][i] -= q * mu[j][i]
                mu[k][j] -= q
        if norms[k] >= (lovasz - mu[k][k - 1] ** 2) * norms[k - 1]:
            k += 1
        else:
            B[k], B[k - 1] = B[k - 1], B[k]
            U[k], U[k - 1] = U[k - 1], U[k]
            mu, norms = _gram_schmidt(B)
            k = max(k - 1, 1)
    return U, B


def siegel_parameters(M: LatticeMatrix):
    """Iwasawa data of the row basis, orthogonalized from the last row up.

    Returns
    -------
    u : list of list of float
        Off-diagonal Gram-Schmidt coefficients ``u[i][j]`` (row ``i`` on
        the orthogonalized row ``j > i``).
    a : list of float
        Gram-Schmidt lengths ``a_1 .. a_d``.
    """
    d = M.d
    with mp.workprec(M.prec):
        rev = list(reversed(M.entries))
        mu, norms = _gram_schmidt(rev)
    a = [float(mpmath.sqrt(x)) for x in reversed(norms)]
    u = [[0.0] * d for _ in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            u[i][j] = float(mu[d - 1 - i][d - 1 - j])
    return u, a


def in_siegel_set(M: LatticeMatrix, kappa: float = 0.75, size_bound: float = 0.5, slack: float = 1e-12) -> bool:
    u, a = siegel_parameters(M)
    d = M.d
    ok_u = all(abs(u[i][j]) <= size_bound + slack for i in range(d) for j in range(i + 1, d))
    ok_a = all(a[j] >= kappa * a[j + 1] * (1 - slack) for j in range(d - 1))
    return ok_u and ok_a


def _box_dominated(coef, B, Bf, grid):
    """True if a lattice vector other than +-v sits in the box of v.

    ``v = coef . B``; the float screen is confirmed in mp near ties.
    """
    v = [mpmath.fsum(ci * b[j] for ci, b in zip(coef, B)) for j in range(len(B))]
    vf = np.abs(np.array([float(x) for x in v]))
    W = np.abs(grid @ Bf)
    same = np.all(grid == coef, axis=1) | np.all(grid == -np.asarray(coef), axis=1)
    loose = np.all(W <= vf * (1 + 1e-9) + 1e-300, axis=1) & ~same
    if not loose.any():
        return False
    if np.any(np.all(W < vf * (1 - 1e-9), axis=1) & ~same):
        return True
    for c in grid[loose]:
        w = [mpmath.fsum(int(ci) * b[j] for ci, b in zip(c, B)) for j in range(len(v))]
        if all(abs(wi) <= abs(vi) for wi, vi in zip(w, v)):
            return True
    return False


def _convergent_completion(U, B):
    """For d = 2 replace the long row by a relative minimum partner.

    Gauss reduction can leave a semiconvergent in the long row; adding an
    integer multiple of the short row that is not box-dominated restores a
    pair of consecutive best approximations.
    """
    short = B[1]
    s2 = mpmath.fsum(x * x for x in short)
    l2 = mpmath.fsum(x * x for x in B[0])
    span = 2 * int(mpmath.ceil(mpmath.sqrt(l2 / s2))) + 2
    Bf = _to_float(B)
    r = np.arange(-span - 2, span + 3)
    grid = np.stack(np.meshgrid(r, r, indexing="ij"), -1).reshape(-1, 2)
    grid = grid[np.any(grid != 0, axis=1)]
    best = None
    for m in range(-span, span + 1):
        if _box_dominated((1, m), B, Bf, grid):
            continue
        cand = [a + m * b for a, b in zip(B[0], short)]
        n2 = mpmath.fsum(x * x for x in cand)
        if best is None or n2 < best[0]:
            best = (n2, m, cand)
    if best is None:
        raise ReductionFailure("no relative-minimum partner found")
    _, m, cand = best
    U = [[a + m * b for a, b in zip(U[0], U[1])], U[1]]
    return U, [cand, short]


def reduce_to_fundamental(
    M: LatticeMatrix,
    kappa: float = 0.75,
    lovasz: float = 0.99,
    completion: str = "lll",
    normalize: bool = True,
) -> tuple[UnimodularMatrix, LatticeMatrix]:
    """Reduce ``M`` to a Siegel-like representative ``P M``.

    Parameters
    ----------
    M : LatticeMatrix
        Basis to reduce.
    kappa : float
        Required ratio ``a_j >= kappa a_(j+1)`` of Gram-Schmidt lengths.
    lovasz : float
        LLL parameter; 0.99 guarantees ``kappa = sqrt(0.74) > 0.75``.
    completion : {"lll", "convergent"}
        ``"convergent"`` (d = 2 only) swaps a semiconvergent long row for a
        relative-minimum partner; size reduction is then only approximate.
    normalize : bool
        Flip row signs so that ``gamma > 0`` and ``det P = +1``.

    Returns
    -------
    P : UnimodularMatrix
    M_red : LatticeMatrix
    """
    d = M.d
    with mp.workprec(M.prec):
        det = _mp_det(M.entries)
        if not mpmath.isfinite(det) or abs(det) < mpf(2) ** (-M.prec // 2):
            raise ReductionFailure("singular or degenerate lattice matrix")
        rows = [list(r) for r in reversed(M.entries)]
        U, B = _lll(rows, mpf(lovasz))
        # undo the row reversal on both sides of U
        U = [list(reversed(r)) for r in reversed(U)]
        B = list(reversed(B))
        if completion == "convergent":
            if d != 2:
                raise InvalidArgument("convergent completion is only defined for d = 2")
            U, B = _convergent_completion(U, B)
        elif completion != "lll":
            raise InvalidArgument(f"unknown completion {completion!r}")
        if normalize:
            if B[d - 1][d - 1] < 0:
                B[d - 1] = [-x for x in B[d - 1]]
                U[d - 1] = [-x for x in U[d - 1]]
            if _bareiss_det(U) == -1:
                B[0] = [-x for x in B[0]]
                U[0] = [-x for x in U[0]]
    P = UnimodularMatrix(tuple(map(tuple, U)))
    M_red = LatticeMatrix(tuple(map(tuple, B)), M.prec)
    if completion == "lll" and not in_siegel_set(M_red, kappa):
        raise ReductionFailure("reduced basis misses the Siegel-like conditions", kappa=kappa)
    return P, M_red


# ---------------------------------------------------------------------------
# lattice minimum


@dataclass(frozen=True)
class LatticeMin:
    """Result of :func:`lattice_min`."""

    value: object
    argmin: tuple
    certified: bool
    bound_needed: int

    def __float__(self):
        return float(self.value)


def lattice_min(M: LatticeMatrix, enumeration_bound: int = 8) -> LatticeMin:
    """Shortest nonzero row-lattice vector in the max norm.

    After LLL, any vector not longer than the shortest reduced row in the
    max norm has coefficients ``|c_i| <= sqrt(d) R |col_i(B^-1)|``.  The
    search covers that box, clipped to ``enumeration_bound``; the result is
    flagged uncertified when the clip bites.
    """
    if enumeration_bound < 1:
        raise InvalidArgument("enumeration_bound must be >= 1")
    d = M.d
    with mp.workprec(M.prec):
        rows = [list(r) for r in reversed(M.entries)]
        U, B = _lll(rows, mpf("0.99"))
        Bf = _to_float(B)
        R = min(float(max(abs(x) for x in r)) for r in B)
        inv = np.linalg.inv(Bf)
        need = [int(math.floor(math.sqrt(d) * R * np.linalg.norm(inv[:, i]) * (1 + 1e-9))) for i in range(d)]
        bounds = [max(1, min(n, enumeration_bound)) for n in need]
        grids = np.array(list(itertools.product(*[range(-b, b + 1) for b in bounds])), dtype=float)
        grids = grids[np.any(grids != 0, axis=1)]
        vals = np.max(np.abs(grids @ Bf), axis=1)
        cut = vals.min() * (1 + 1e-8) + 1e-300
        best = None
        for c in grids[vals <= cut]:
            ci = [int(x) for x in c]
            w = [mpmath.fsum(ci[i] * B[i][j] for i in range(d)) for j in range(d)]
            v = max(abs(x) for x in w)
            if best is None or v < best[0]:
                best = (v, ci)
        value, c = best
        # k^T M = c^T B with B the reversed-order reduced basis
        k_rev = [sum(c[i] * U[i][j] for i in range(d)) for j in range(d)]
        k = tuple(reversed(k_rev))
    certified = max(need) <= enumeration_bound
    return LatticeMin(value, k, certified, max(need))


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Flow times and cone apertures.

    ``fixed-gap`` uses constant hyperbolicity exponent ``phi``;
    ``geometric`` uses ``dt_n = xi t_(n-1)`` from ``t_1``; ``adaptive``
    chooses each gap during the run.  For ``n >= 1`` the aperture is
    ``sigma_n = exp(-c dt_n)``; ``sigma_0`` uses the first gap (scaled by
    ``1/(1+xi)`` in geometric mode; 1e-3 in adaptive mode) unless given.
    """

    mode: str
    d: int
    n_max: int
    theta: float = 0.0
    xi: float = 1.0
    c: float = 1.0
    phi: float = 0.5
    t1: float = 1.0
    sigma0: float | None = None
    dt_min: float = 0.25
    dt_max: float = 16.0
    target: float = 0.5
    times: tuple = ()
    sigmas: tuple = ()

    def __post_init__(self):
        if self.mode not in ("fixed-gap", "geometric", "adaptive"):
            raise InvalidArgument(f"unknown schedule mode {self.mode!r}")
        if not 0 <= self.theta < 1:
            raise InvalidArgument("theta must lie in [0, 1)")
        if self.n_max < 1:
            raise InvalidArgument("n_max must be >= 1")
        if self.c <= 0:
            raise InvalidArgument("c must be positive")
        if self.mode == "geometric":
            self.validate_geometric()
        if self.mode == "fixed-gap" and self.phi <= 0:
            raise InvalidArgument("phi must be positive")
        if self.mode == "adaptive" and not (0 < self.target < 1 and 0 < self.dt_min < self.dt_max):
            raise InvalidArgument("adaptive schedule needs 0 < target < 1 and 0 < dt_min < dt_max")
        if self.times:
            ts = [float(t) for t in self.times]
            if ts[0] != 0 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ScheduleError("schedule times must start at 0 and increase strictly")
            if any(not 0 < s < 1 for s in self.sigmas):
                raise ScheduleError("sigma values must lie in (0, 1)")

    @property
    def beta(self) -> float:
        return self.d * self.theta / (1 - self.theta)

    def geometric_conditions(self) -> dict:
        d, th, xi, c = self.d, self.theta, self.xi, self.c
        return {
            "c_below_d(1+xi)": c < d * (1 + xi),
            "c_above_growth": c > th / (1 - th) * (1 + xi) / xi**2 * d**2 - (1 + xi) / xi * d,
            "contraction_exponent_negative": -c / (1 + xi) + d - (1 - th) + d * th / xi < 0,
        }

    def validate_geometric(self):
        if self.xi <= 0 or self.t1 <= 0:
            raise InvalidArgument("geometric schedule needs xi > 0 and t1 > 0")
        bad = [k for k, ok in self.geometric_conditions().items() if not ok]
        if bad:
            raise ScheduleError(f"geometric schedule parameters violate: {', '.join(bad)}", violated=bad)

    def planned_time(self, n: int, prec: int = DEFAULT_PREC):
        """Nominal ``t_n`` for fixed-gap and geometric modes."""
        with mp.workprec(prec):
            if n == 0:
                return mpf(0)
            if self.mode == "fixed-gap":
                if self.theta == 0:
                    return n * mpf(self.phi)
                return mpf(self.phi) / (self.d * self.theta) * ((1 + mpf(self.beta)) ** n - 1)
            if self.mode == "geometric":
                return mpf(self.t1) * (1 + mpf(self.xi)) ** (n - 1)
        raise InvalidArgument("adaptive schedules have no planned times")

    def sigma_for_gap(self, dt) -> float:
        return float(mpmath.exp(-self.c * mpf(dt)))

    def initial_sigma(self) -> float:
        if self.sigma0 is not None:
            return float(self.sigma0)
        if self.mode == "adaptive":
            # a wide first cone cannot be contracted by any gap
            return 1e-3
        dt1 = float(self.planned_time(1))
        if self.mode == "geometric":
            dt1 /= 1 + self.xi
        return self.sigma_for_gap(dt1)

    def hyp_exponent(self, n: int) -> float:
        """``phi_n = (1 - theta) dt_n - d theta t_(n-1)`` on realized times."""
        t, tp = float(self.times[n]), float(self.times[n - 1])
        return (1 - self.theta) * (t - tp) - self.d * self.theta * tp

    def realized(self, times, sigmas) -> "Schedule":
        return Schedule(
            self.mode, self.d, self.n_max, self.theta, self.xi, self.c, self.phi, self.t1,
            self.sigma0, self.dt_min, self.dt_max, self.target, tuple(times), tuple(sigmas),
        )

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode, "d": self.d, "n_max": self.n_max, "theta": self.theta,
            "xi": self.xi, "c": self.c, "phi": self.phi, "t1": self.t1, "sigma0": self.sigma0,
            "dt_min": self.dt_min, "dt_max": self.dt_max, "target": self.target,
        }
        if self.times:
            out["times"] = [_mp_str(mpf(t), 128) for t in self.times]
            out["sigmas"] = [repr(float(s)) for s in self.sigmas]
        return out


# ---------------------------------------------------------------------------
# resonance-cone contraction


@dataclass(frozen=True)
class ContractionReport:
    A_measured: float
    A_bound: float
    A_integer: float
    perp_norm: float


def _cone_form(T: UnimodularMatrix, omega: FrequencyVector):
    """Gram matrix of ``T^-T`` in an orthonormal frame ``(omega_hat, Q)``.

    Built in mp so that contraction on the complement of ``omega`` is
    resolved even when ``T`` has entries far beyond double precision.
    """
    d = T.d
    Tit = T.inverse().transpose().entries
    with mp.workprec(omega.prec):
        w = list(omega.omega)
        nw = mpmath.sqrt(mpmath.fsum(x * x for x in w))
        frame = [[x / nw for x in w]]
        for e in range(d):
            v = [mpf(int(i == e)) for i in range(d)]
            for f in frame:
                c = mpmath.fsum(a * b for a, b in zip(v, f))
                v = [a - c * b for a, b in zip(v, f)]
            n = mpmath.sqrt(mpmath.fsum(x * x for x in v))
            if n > mpf("0.1"):
                frame.append([x / n for x in v])
            if len(frame) == d:
                break
        C = [[mpmath.fsum(Tit[i][k] * f[k] for k in range(d)) for f in frame] for i in range(d)]
        H = [[mpmath.fsum(C[k][a] * C[k][b] for k in range(d)) for b in range(d)] for a in range(d)]
    return np.array([[float(x) for x in r] for r in H]), float(nw)


def perp_contraction(T: UnimodularMatrix, omega: FrequencyVector) -> float:
    """Operator norm of ``T^-T`` restricted to the complement of ``omega``."""
    H, _ = _cone_form(T, omega)
    return math.sqrt(max(0.0, float(np.linalg.eigvalsh(H[1:, 1:])[-1])))


def _exact_int_matvec(A, K):
    big = max(abs(x) for r in A for x in r) * int(np.abs(K).max() + 1) * len(A)
    if big < 2**62:
        return np.asarray(K, dtype=np.int64) @ np.array(A, dtype=np.int64).T
    return np.asarray(K, dtype=object) @ np.array(A, dtype=object).T


def resonance_contraction(
    T: UnimodularMatrix,
    omega_prev: FrequencyVector,
    sigma_prev: float,
    sample_count: int = 512,
    Lambda: float | None = None,
    hyp_exponent: float | None = None,
    integer_radius: int = 50,
    seed: int = 0,
) -> ContractionReport:
    """Sup of ``|T^-T xi| / |xi|`` over the cone ``|xi . omega| <= sigma |xi|``.

    In the frame ``(omega_hat, Q)`` a unit vector is ``z = (s, z_perp)``
    with ``|s| <= sigma/|omega|``; the sup of ``z^T H z`` is found by
    deterministic sphere sampling refined by projected power ascent.  The
    bound adds the complement contraction (``Lambda/2 e^-phi`` when
    ``Lambda`` is given, else the measured value) and the aperture term
    ``sigma |T^-1| / |omega|``.
    """
    d = T.d
    if sample_count < d:
        raise InvalidArgument("sample_count must be at least d")
    if sigma_prev <= 0:
        raise InvalidArgument("sigma must be positive")
    H, wn = _cone_form(T, omega_prev)
    cap = min(1.0, sigma_prev / wn)
    e0 = np.eye(d)[0]

    def project(z):
        z = z / np.linalg.norm(z)
        if abs(z[0]) <= cap:
            return z
        p = z[1:]
        pn = np.linalg.norm(p)
        if pn < 1e-300:
            p, pn = np.eye(d - 1)[0], 1.0
        return np.concatenate([[math.copysign(cap, z[0])], math.sqrt(1 - cap * cap) * p / pn])

    def value(z):
        return float(z @ H @ z)

    rng = np.random.default_rng(seed)
    cand = [project(z) for z in rng.standard_normal((sample_count, d))]
    _, vecs = np.linalg.eigh(H)
    cand += [project(vecs[:, -1]), project(-vecs[:, -1])]
    _, pv = np.linalg.eigh(H[1:, 1:])
    for s in (cap, -cap, 0.0):
        cand.append(project(s * e0 + math.sqrt(1 - s * s) * np.concatenate([[0.0], pv[:, -1]])))
    vals = [value(z) for z in cand]
    best = max(vals)
    for i in np.argsort(vals)[::-1][:8]:
        z = cand[i]
        for _ in range(200):
            y = project(H @ z)
            if value(y) <= value(z) * (1 + 1e-15):
                break
            z = y
        best = max(best, value(z))
    A_measured = math.sqrt(max(best, 0.0))
    perp = math.sqrt(max(0.0, float(np.linalg.eigvalsh(H[1:, 1:])[-1])))
    lead = 0.5 * Lambda * math.exp(-hyp_exponent) if Lambda is not None and hyp_exponent is not None else perp
    A_bound = lead + sigma_prev * T.inverse().norm() / wn

    w = omega_prev.as_array()
    rad = integer_radius
    axes = [np.arange(-rad, rad + 1)] * d
    K = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    kn = np.linalg.norm(K, axis=1)
    keep = (kn > 0) & (kn <= rad) & (np.abs(K @ w) <= sigma_prev * kn)
    A_int = 0.0
    if keep.any():
        img = _exact_int_matvec(T.inverse().transpose().entries, K[keep])
        img_norm = np.sqrt(np.array([float(sum(int(x) ** 2 for x in r)) for r in img]))
        A_int = float(np.max(img_norm / kn[keep]))
    return ContractionReport(A_measured, A_bound, A_int, perp)


# ---------------------------------------------------------------------------
# continued-fraction run


@dataclass(frozen=True)
class CFStep:
    """One continued-fraction step.

    ``A_n`` is the cone contraction of this step's ``T`` measured on the
    previous step's cone ``(omega^(n-1), sigma_(n-1))``; it is 1 at n = 0.
    """

    n: int
    t: object
    dt: object
    P: UnimodularMatrix
    T: UnimodularMatrix
    M_red: LatticeMatrix
    alpha_n: FrequencyVector
    omega_n: tuple
    gamma_n: object
    lambda_n: object
    eta_n: object
    delta_M: float
    delta_certified: bool
    norms: dict
    A_n: float
    A_bound: float
    sigma: float
    hyp_exponent: float
    perp_contraction: float
    gamma_recursion: object
    alpha_cocycle: FrequencyVector
    alpha_transfer: FrequencyVector
    reduction_error: float

    @property
    def d(self) -> int:
        return self.P.d

    def to_record(self) -> dict:
        prec = self.M_red.prec
        s = lambda x: _mp_str(x, prec)  # noqa: E731
        ints = lambda m: [[str(x) for x in r] for r in m.entries]  # noqa: E731
        return {
            "schema": SCHEMA_VERSION,
            "n": self.n,
            "t": s(self.t),
            "dt": s(self.dt),
            "P": ints(self.P),
            "det_P": self.P.det,
            "T": ints(self.T),
            "det_T": self.T.det,
            "M_red": [[s(x) for x in r] for r in self.M_red.entries],
            "alpha": [s(x) for x in self.alpha_n.alpha],
            "gamma": s(self.gamma_n),
            "lambda": s(self.lambda_n),
            "eta": s(self.eta_n),
            "delta": repr(float(self.delta_M)),
            "delta_certified": self.delta_certified,
            "norms": {k: repr(v) for k, v in sorted(self.norms.items())},
            "A": repr(self.A_n),
            "A_bound": repr(self.A_bound),
            "sigma": repr(self.sigma),
            "hyp_exponent": repr(self.hyp_exponent),
        }


class CFRun(Sequence):
    """Sequence of :class:`CFStep` plus the realized schedule."""

    def __init__(self, steps, schedule, merged):
        self.steps = tuple(steps)
        self.schedule = schedule
        self.merged = merged

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    def __iter__(self) -> Iterator[CFStep]:
        return iter(self.steps)


def _cancellation_bits(P: UnimodularMatrix, t, d):
    pmax = max(abs(x) for r in P.entries for x in r)
    return math.log2(max(pmax, 1)) + float(t) * (d - 1) / math.log(2)


def _accurate_product(P: UnimodularMatrix, M0: LatticeMatrix, t, params, extra_bits):
    """``P M0 E^t`` with guard bits covering the cancellation, rounded back."""
    prec = M0.prec
    with mp.workprec(prec + int(extra_bits) + 32):
        scale = [mpmath.exp(mpf(r) * mpf(t)) for r in params.exponents]
        rows = _mp_matmul([[mpf(x) for x in r] for r in P.entries], [list(r) for r in M0.entries])
        rows = [[x * s for x, s in zip(r, scale)] for r in rows]
    return LatticeMatrix(tuple(map(tuple, rows)), prec)


def _norm_report(M_red, P, T):
    Mf = M_red.as_array()
    return {
        "M": float(np.linalg.norm(Mf, 2)),
        "M_inv": float(np.linalg.norm(np.linalg.inv(Mf), 2)),
        "P": P.norm(),
        "P_inv": P.inverse().norm(),
        "T": T.norm(),
        "T_inv": T.inverse().norm(),
    }


def continued_fraction_run(
    alpha: FrequencyVector,
    schedule: Schedule,
    *,
    kappa: float = 0.75,
    completion: str = "lll",
    enumeration_bound: int = 8,
    contraction_samples: int = 256,
    params: FlowParams | None = None,
    max_merges: int = 256,
) -> CFRun:
    """Run the flow/reduction algorithm along ``schedule``.

    Step 0 is the unreduced embedding.  Each later step flows the previous
    reduced matrix by the gap, reduces it to get ``T``, sets ``P = T P_prev``
    and recomputes ``M = P M0 E^t`` with guard bits.  Reductions returning
    ``T = I`` are merged into the next time.

    Raises
    ------
    RationalFrequency
        When ``gamma`` collapses relative to ``|M|`` (rational direction).
    PrecisionExhausted
        When the cancellation in ``P M0 E^t`` eats half the precision.
    """
    d = alpha.d
    if schedule.d != d:
        raise InvalidArgument("schedule dimension does not match the frequency")
    params = params or FlowParams.default(d)
    prec = alpha.prec
    M0 = embed_frequency(alpha)
    with mp.workprec(prec):
        zero, one = mpf(0), mpf(1)
    I = UnimodularMatrix.identity(d)
    sigma0 = schedule.initial_sigma()
    step0 = CFStep(
        n=0, t=zero, dt=zero, P=I, T=I, M_red=M0, alpha_n=alpha, omega_n=alpha.omega,
        gamma_n=one, lambda_n=one, eta_n=one,
        delta_M=float(lattice_min(M0, enumeration_bound).value), delta_certified=True,
        norms=_norm_report(M0, I, I), A_n=1.0, A_bound=1.0, sigma=sigma0, hyp_exponent=0.0,
        perp_contraction=1.0, gamma_recursion=one, alpha_cocycle=alpha, alpha_transfer=alpha,
        reduction_error=0.0,
    )
    steps = [step0]
    times, sigmas = [zero], [sigma0]
    merged = 0
    index = 1

    def attempt(prev, t):
        dt = t - prev.t
        flowed = geodesic_flow(prev.M_red, dt, params)
        T, M_iter = reduce_to_fundamental(flowed, kappa=kappa, completion=completion)
        return T, M_iter

    while len(steps) <= schedule.n_max:
        prev = steps[-1]
        if schedule.mode == "adaptive":
            t, T, M_iter = _adaptive_gap(prev, schedule, attempt, contraction_samples)
        else:
            t = schedule.planned_time(index, prec)
            index += 1
            T, M_iter = attempt(prev, t)
        if T.is_identity():
            merged += 1
            if schedule.mode == "geometric":
                raise ScheduleError(f"geometric gap at t={float(t):.4g} left the reduction unchanged")
            if merged > max_merges:
                raise ScheduleError("too many merged steps; increase the gap")
            continue
        steps.append(_make_step(prev, T, M_iter, t, alpha, M0, schedule, params, enumeration_bound,
                                contraction_samples, len(steps)))
        times.append(steps[-1].t)
        sigmas.append(steps[-1].sigma)
    return CFRun(steps, schedule.realized(times, sigmas), merged)


def _adaptive_gap(prev, schedule, attempt, samples):
    def trial(dt):
        t = prev.t + mpf(dt)
        T, M_iter = attempt(prev, t)
        if T.is_identity():
            return t, T, M_iter, math.inf
        A = resonance_contraction(T, prev.alpha_n, prev.sigma, samples).A_measured
        return t, T, M_iter, A

    lo, hi = schedule.dt_min, schedule.dt_min
    res = trial(hi)
    # A(dt) is not monotone: grow slowly so narrow admissible windows are not skipped
    while res[3] > schedule.target:
        lo, hi = hi, hi * 1.25
        if hi > schedule.dt_max:
            raise ScheduleError(
                "adaptive schedule could not reach the contraction target; "
                "the cone exponent c is probably too small for this dimension",
                dt_max=schedule.dt_max, step=prev.n + 1, sigma_prev=prev.sigma)
        res = trial(hi)
    if hi > schedule.dt_min:
        for _ in range(12):
            mid = 0.5 * (lo + hi)
            r = trial(mid)
            if r[3] <= schedule.target:
                hi, res = mid, r
            else:
                lo = mid
    return res[0], res[1], res[2]


def _make_step(prev, T, M_iter, t, alpha, M0, schedule, params, enumeration_bound, samples, n):
    d, prec = alpha.d, alpha.prec
    P = T @ prev.P
    lost = _cancellation_bits(P, t, d)
    if lost > prec / 2:
        raise PrecisionExhausted(
            f"step {n} at t={float(t):.4g} loses ~{lost:.0f} of {prec} bits; raise precision_bits",
            bits_needed=int(2 * lost) + 64,
        )
    M = _accurate_product(P, M0, t, params, lost)
    with mp.workprec(prec):
        dt = t - prev.t
        gamma = M.gamma
        scale = max(abs(x) for r in M.entries for x in r)
        if abs(gamma) <= scale * mpf(2) ** (-(prec - int(lost)) // 2):
            raise RationalFrequency(f"gamma collapsed at step {n}: frequency looks rational", step=n)
        a_n = FrequencyVector(tuple(M.entries[i][d - 1] / gamma for i in range(d - 1)), prec)
        lam = mpmath.exp((d - 1) * t) / gamma
        eta = lam / prev.lambda_n
        _, _, t21, t22 = T.blocks()
        g_rec = (mpmath.fsum(x * y for x, y in zip(t21, prev.alpha_n.alpha)) + t22) * mpmath.exp(
            params.exponents[-1] * dt) * prev.gamma_n
        red_err = float(M.max_abs_diff(M_iter))
    sigma = schedule.sigma_for_gap(dt)
    hyp = (1 - schedule.theta) * float(dt) - d * schedule.theta * float(prev.t)
    cr = resonance_contraction(T, prev.alpha_n, prev.sigma, samples)
    lm = lattice_min(M, enumeration_bound)
    return CFStep(
        n=n, t=t, dt=dt, P=P, T=T, M_red=M, alpha_n=a_n, omega_n=a_n.omega, gamma_n=gamma,
        lambda_n=lam, eta_n=eta, delta_M=float(lm.value), delta_certified=lm.certified,
        norms=_norm_report(M, P, T), A_n=cr.A_measured, A_bound=cr.A_bound, sigma=sigma,
        hyp_exponent=hyp, perp_contraction=cr.perp_norm, gamma_recursion=g_rec,
        alpha_cocycle=fractional_action(P, alpha), alpha_transfer=fractional_action(T, prev.alpha_n),
        reduction_error=red_err,
    )


# ---------------------------------------------------------------------------
# invariants and diagnostics


def step_discrepancies(step: CFStep, prev: CFStep | None, alpha: FrequencyVector) -> dict:
    """Relative discrepancies of the identities every step must satisfy."""
    d, prec = step.d, step.M_red.prec
    out = {}
    with mp.workprec(prec):
        if prev is not None:
            out["cocycle"] = 0.0 if (step.T @ prev.P).entries == step.P.entries else 1.0
            out["gamma_recursion"] = float(abs(step.gamma_recursion - step.gamma_n) / abs(step.gamma_n))
            out["eta"] = float(abs(step.eta_n - step.lambda_n / prev.lambda_n) / abs(step.eta_n))
            out["alpha_transfer"] = max(
                float(abs(a - b)) for a, b in zip(step.alpha_transfer.alpha, step.alpha_n.alpha))
            om = [step.eta_n * mpmath.fsum(step.T.entries[i][j] * prev.omega_n[j] for j in range(d)) for i in range(d)]
            out["omega_transfer"] = max(float(abs(a - b)) for a, b in zip(om, step.omega_n))
        out["alpha_cocycle"] = max(float(abs(a - b)) for a, b in zip(step.alpha_cocycle.alpha, step.alpha_n.alpha))
        g = step.P.blocks()
        gam = (mpmath.fsum(x * y for x, y in zip(g[2], alpha.alpha)) + g[3]) * mpmath.exp((d - 1) * step.t)
        out["gamma_cocycle"] = float(abs(gam - step.gamma_n) / abs(step.gamma_n))
        om = [step.lambda_n * mpmath.fsum(step.P.entries[i][j] * alpha.omega[j] for j in range(d)) for i in range(d)]
        out["omega_cocycle"] = max(float(abs(a - b)) for a, b in zip(om, step.omega_n))
        col = [step.M_red.entries[i][d - 1] / step.gamma_n for i in range(d)]
        out["omega_column"] = max(float(abs(a - b)) for a, b in zip(col, step.omega_n))
        out["det"] = float(abs(step.M_red.det - 1))
    return out


def calibrate_lambda(run: Sequence[CFStep], upto: int | None = None) -> float:
    """Smallest ``Lambda`` with ``|T^-T on omega_perp| <= Lambda/2 e^-phi_n``."""
    steps = list(run)[1: (upto + 1) if upto else None]
    return max(2 * s.perp_contraction * math.exp(s.hyp_exponent) for s in steps)


def _envelope_shapes(d, theta):
    return {
        "M": lambda s, p: (d - 1) * theta * float(s.t),
        "M_inv": lambda s, p: theta * float(s.t),
        "P": lambda s, p: (d * theta + 1 - theta) * float(s.t),
        "P_inv": lambda s, p: (d - 1 + theta) * float(s.t),
        "T": lambda s, p: (1 - theta) * float(s.dt) + d * theta * float(s.t),
        "T_inv": lambda s, p: (d - 1) * (1 - theta) * float(s.dt) + d * theta * float(s.t),
    }


@dataclass(frozen=True)
class EnvelopeReport:
    constants_half: dict
    constants_full: dict
    gamma_bounds: tuple
    violations: tuple = field(default_factory=tuple)


def norm_envelopes(run: Sequence[CFStep], theta: float = 0.0, stability: float = 1.5) -> EnvelopeReport:
    """Calibrate the exponential norm envelopes on the first half of a run.

    A constant that grows by more than ``stability`` when the whole run is
    included is reported as a violation.
    """
    steps = list(run)[1:]
    if len(steps) < 2:
        raise InvalidArgument("need at least two steps to calibrate envelopes")
    d = steps[0].d
    shapes = _envelope_shapes(d, theta)
    half = steps[: max(1, len(steps) // 2)]

    def consts(sub):
        out = {}
        for k, f in shapes.items():
            out[k] = max(s.norms[k] * math.exp(-f(s, None)) for s in sub)
        return out

    ch, cf = consts(half), consts(steps)
    viol = tuple(k for k in shapes if cf[k] > stability * ch[k])
    lo_exp = lambda s: -theta * (d * d / (1 - theta) - (d - 1)) * float(s.t)  # noqa: E731
    c7 = min(float(abs(s.gamma_n)) * math.exp(-lo_exp(s)) for s in steps)
    upper_ok = all(float(abs(s.gamma_n)) <= cf["M"] * math.exp((d - 1) * theta * float(s.t)) * (1 + 1e-12) for s in steps)
    if not upper_ok:
        viol = viol + ("gamma_upper",)
    return EnvelopeReport(ch, cf, (c7, cf["M"]), viol)


def delta_floor(run: Sequence[CFStep], theta: float = 0.0) -> float:
    """``C' = min_n delta(M^(n)) e^(theta t_n)``."""
    return min(s.delta_M * math.exp(theta * float(s.t)) for s in run)


@dataclass(frozen=True)
class DiophantineScan:
    min_value: float
    argmin: tuple
    min_omega_form: float
    argmin_omega: tuple


def diophantine_scan(alpha: FrequencyVector, epsilon: float = 0.0, k_max: int = 100) -> DiophantineScan:
    """Brute-force scan of both small-divisor forms.

    ``|m|_inf^((d-1)(1+eps)) |m . alpha + k|`` over ``0 < |m|_inf <= k_max``
    with the two nearest ``k``, and ``|k|_2^((d-1)(1+eps)) |k . omega|``
    over the same index range (plus ``m = 0``).  Double precision is ample
    for ``k_max`` below ``1e6``.
    """
    if epsilon < 0 or k_max < 1:
        raise InvalidArgument("need epsilon >= 0 and k_max >= 1")
    d = alpha.d
    a = np.array([float(x) for x in alpha.alpha])
    axes = [np.arange(-k_max, k_max + 1)] * (d - 1)
    m = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d - 1)
    m = m[np.any(m != 0, axis=1)]
    ma = m.astype(float) @ a
    expo = (d - 1) * (1 + epsilon)
    best2, best3 = (math.inf, None), (1.0, (0,) * (d - 1) + (1,))
    for shift in (np.floor, np.ceil):
        k = -shift(ma)
        small = np.abs(ma + k)
        v2 = np.max(np.abs(m), axis=1).astype(float) ** expo * small
        full = np.column_stack([m, k]).astype(float)
        v3 = np.linalg.norm(full, axis=1) ** expo * small
        i2, i3 = int(np.argmin(v2)), int(np.argmin(v3))
        if v2[i2] < best2[0]:
            best2 = (float(v2[i2]), tuple(int(x) for x in m[i2]) + (int(k[i2]),))
        if v3[i3] < best3[0]:
            best3 = (float(v3[i3]), tuple(int(x) for x in full[i3]))
    return DiophantineScan(best2[0], best2[1], best3[0], best3[1])
