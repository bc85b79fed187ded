"""Truncated Fourier-Taylor series on the torus times a polydisc.

A series is stored as a dense complex array of shape
``(n_monomials, n_components, (2K+1),) * d`` holding the coefficient of
``y**nu * exp(2 pi i k.x)`` for every Taylor exponent ``nu`` with
``|nu| <= D`` and every Fourier index ``k`` with ``|k|_1 <= K``.  Entries of
the box outside the 1-norm ball are kept at zero.

Products are formed pointwise on an FFT grid of size ``N >= 4K + 2`` per
dimension and truncated back to the ball, so no aliased frequency ever
lands inside the ball.  Taylor products drop every monomial of degree
above ``D``.  Both truncations are exact operations on the truncated
algebra; the discarded Fourier mass is accumulated in ``loss``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import mpmath
import numpy as np
from mpmath import mp, mpf

from .errors import DomainError, InvalidArgument, SmallDivisorError

DEFAULT_DEGREE = 3
FLUSH_REL = 1e-15
TWO_PI = 2.0 * math.pi


def default_radius(d: int) -> int:
    """Default Fourier radius: 24 in dimension 2, 12 in dimension 3 and up."""
    return 24 if d <= 2 else 12


def _fft_size(K: int) -> int:
    n = 4 * K + 2
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


# --------------------------------------------------------------------------
# Index tables


@dataclass(frozen=True)
class Truncation:
    """Fourier radius ``K`` (1-norm), Taylor degree ``D`` and dimension ``d``."""

    d: int
    K: int
    D: int = DEFAULT_DEGREE

    def __post_init__(self):
        if self.d < 1 or self.K < 0 or self.D < 0:
            raise InvalidArgument("truncation needs d >= 1, K >= 0, D >= 0")

    @classmethod
    def default(cls, d: int, K: int | None = None, D: int | None = None) -> "Truncation":
        return cls(d, default_radius(d) if K is None else K, DEFAULT_DEGREE if D is None else D)

    @property
    def tables(self) -> "_Tables":
        return _tables(self.d, self.K, self.D)


class _Tables:
    def __init__(self, d, K, D):
        self.d, self.K, self.D = d, K, D
        monos = [
            nu
            for deg in range(D + 1)
            for nu in sorted(
                (c for c in itertools.product(range(deg + 1), repeat=d) if sum(c) == deg),
                reverse=True,
            )
        ]
        self.monos = tuple(monos)
        self.index = {nu: i for i, nu in enumerate(monos)}
        self.nmono = len(monos)
        self.mono_arr = np.array(monos, dtype=int).reshape(self.nmono, d)
        self.degree = self.mono_arr.sum(axis=1)
        self.fact = np.array([math.prod(math.factorial(v) for v in nu) for nu in monos], dtype=float)

        pairs = []
        for i, a in enumerate(monos):
            for j, b in enumerate(monos):
                s = tuple(x + y for x, y in zip(a, b))
                if sum(s) <= D:
                    pairs.append((i, j, self.index[s]))
        self.pairs = tuple(pairs)

        # d/dy_v: monomial src -> factor * monomial dst
        self.dy = []
        for v in range(d):
            src, dst, fac = [], [], []
            for i, nu in enumerate(monos):
                if nu[v] > 0:
                    lower = list(nu)
                    lower[v] -= 1
                    src.append(i)
                    dst.append(self.index[tuple(lower)])
                    fac.append(float(nu[v]))
            self.dy.append((np.array(src, dtype=int), np.array(dst, dtype=int), np.array(fac)))

        self.width = 2 * K + 1
        self.box = (self.width,) * d
        axes = np.meshgrid(*([np.arange(-K, K + 1)] * d), indexing="ij")
        self.kvec = np.stack(axes, axis=-1) if d else np.zeros((1, 0), dtype=int)
        self.knorm = np.abs(self.kvec).sum(axis=-1)
        self.mask = self.knorm <= K
        self.N = _fft_size(K)
        self.grid_index = tuple(np.mod(self.kvec[..., i], self.N) for i in range(d))
        # grid positions that do not belong to the ball, for loss accounting
        g = np.fft.fftfreq(self.N, 1.0 / self.N).astype(int)
        gaxes = np.meshgrid(*([g] * d), indexing="ij")
        self.grid_outside = sum(np.abs(a) for a in gaxes) > K
        self.zero_pos = (K,) * d


@functools.lru_cache(maxsize=None)
def _tables(d, K, D):
    return _Tables(d, K, D)


def _taylor_mul(a, b, pairs, nmono):
    """Taylor product along axis 0 with degree truncation (broadcasts the rest)."""
    shape = np.broadcast_shapes(a.shape[1:], b.shape[1:])
    out = np.zeros((nmono,) + shape, dtype=complex)
    live_a = [bool(a[i].any()) for i in range(a.shape[0])]
    live_b = [bool(b[j].any()) for j in range(b.shape[0])]
    for i, j, m in pairs:
        if live_a[i] and live_b[j]:
            out[m] += a[i] * b[j]
    return out


# --------------------------------------------------------------------------
# Series


class TorusSeries:
    """Immutable truncated Fourier-Taylor series with ``ncomp`` components.

    Parameters
    ----------
    trunc : Truncation
        Index set.
    coeffs : ndarray
        Complex array of shape ``(nmono, ncomp) + box``.
    loss : float
        Accumulated 1-norm of coefficients discarded by truncation while
        producing this series.
    """

    __slots__ = ("trunc", "c", "loss", "_grid")

    def __init__(self, trunc: Truncation, coeffs: np.ndarray, loss: float = 0.0):
        t = trunc.tables
        c = np.asarray(coeffs, dtype=complex)
        if c.ndim != 2 + t.d or c.shape[0] != t.nmono or c.shape[2:] != t.box:
            raise InvalidArgument(f"coefficient array of shape {c.shape} does not match {trunc}")
        c = np.where(t.mask, c, 0.0)
        c.setflags(write=False)
        self.trunc = trunc
        self.c = c
        self.loss = float(loss)
        self._grid = None

    # construction -------------------------------------------------------

    @classmethod
    def zeros(cls, trunc: Truncation, ncomp: int = 1) -> "TorusSeries":
        t = trunc.tables
        return cls(trunc, np.zeros((t.nmono, ncomp) + t.box, dtype=complex))

    @classmethod
    def from_modes(cls, trunc: Truncation, modes: dict, ncomp: int = 1) -> "TorusSeries":
        """Build from ``{(k, nu): value}`` where value is a scalar or length-``ncomp`` vector."""
        t = trunc.tables
        c = np.zeros((t.nmono, ncomp) + t.box, dtype=complex)
        for (k, nu), val in modes.items():
            k, nu = tuple(int(x) for x in k), tuple(int(x) for x in nu)
            if len(k) != t.d or len(nu) != t.d:
                raise InvalidArgument("mode index has the wrong dimension")
            if sum(abs(x) for x in k) > t.K or nu not in t.index:
                raise InvalidArgument(f"mode {(k, nu)} outside the truncation {trunc}")
            pos = tuple(x + t.K for x in k)
            c[(t.index[nu], slice(None)) + pos] += np.broadcast_to(np.asarray(val, dtype=complex), (ncomp,))
        return cls(trunc, c)

    @classmethod
    def polynomial(cls, trunc: Truncation, coeffs: dict, ncomp: int = 1) -> "TorusSeries":
        """``x``-independent series from ``{nu: value}``."""
        zero = (0,) * trunc.d
        return cls.from_modes(trunc, {(zero, nu): v for nu, v in coeffs.items()}, ncomp)

    @classmethod
    def stack(cls, parts: Sequence["TorusSeries"]) -> "TorusSeries":
        trunc = parts[0].trunc
        return cls(trunc, np.concatenate([p.c for p in parts], axis=1), sum(p.loss for p in parts))

    # basic shape ---------------------------------------------------------

    @property
    def ncomp(self) -> int:
        return self.c.shape[1]

    @property
    def d(self) -> int:
        return self.trunc.d

    def component(self, i: int) -> "TorusSeries":
        return TorusSeries(self.trunc, self.c[:, i : i + 1], self.loss)

    def components(self):
        return [self.component(i) for i in range(self.ncomp)]

    def _like(self, c, loss=None):
        return TorusSeries(self.trunc, c, self.loss if loss is None else loss)

    # linear algebra -------------------------------------------------------

    def _check(self, other):
        if not isinstance(other, TorusSeries) or other.trunc != self.trunc:
            raise InvalidArgument("series operands must share the same truncation")

    def __add__(self, other):
        self._check(other)
        return self._like(self.c + other.c, self.loss + other.loss)

    def __sub__(self, other):
        self._check(other)
        return self._like(self.c - other.c, self.loss + other.loss)

    def __neg__(self):
        return self._like(-self.c)

    def scale(self, s) -> "TorusSeries":
        return self._like(self.c * s, self.loss * abs(s))

    def __mul__(self, s):
        if isinstance(s, TorusSeries):
            return self.mul(s)
        return self.scale(s)

    __rmul__ = scale

    def linear_map(self, A) -> "TorusSeries":
        """Apply a constant matrix to the component vector."""
        A = np.asarray(A, dtype=complex)
        return self._like(np.einsum("ij,mj...->mi...", A, self.c))

    def flushed(self, rel: float = FLUSH_REL) -> "TorusSeries":
        a = np.abs(self.c)
        top = a.max() if a.size else 0.0
        return self._like(np.where(a > rel * top, self.c, 0.0))

    def is_zero(self) -> bool:
        return not np.any(self.c)

    def l1(self) -> float:
        """Plain coefficient 1-norm (no weights)."""
        return float(np.abs(self.c).sum())

    def max_abs(self) -> float:
        return float(np.abs(self.c).max()) if self.c.size else 0.0

    # Fourier/Taylor bookkeeping --------------------------------------------

    def zero_mode(self) -> "TorusSeries":
        t = self.trunc.tables
        c = np.zeros_like(self.c)
        idx = (slice(None), slice(None)) + t.zero_pos
        c[idx] = self.c[idx]
        return self._like(c)

    def without_zero_mode(self) -> "TorusSeries":
        return self - self.zero_mode().with_loss(0.0)

    def with_loss(self, loss) -> "TorusSeries":
        return self._like(self.c, loss)

    def taylor_cut(self, low: int = 0, high: int | None = None) -> "TorusSeries":
        """Keep Taylor degrees ``low <= |nu| <= high``."""
        t = self.trunc.tables
        high = t.D if high is None else high
        keep = (t.degree >= low) & (t.degree <= high)
        return self._like(self.c * keep.reshape((-1,) + (1,) * (self.c.ndim - 1)))

    def modes(self, tol: float = 0.0):
        """Yield ``(k, nu, vector)`` for stored nonzero modes in lexicographic order."""
        t = self.trunc.tables
        entries = []
        nz = np.argwhere(np.any(np.abs(self.c) > tol, axis=1))
        for row in nz:
            m, pos = row[0], tuple(row[1:])
            k = tuple(int(p) - t.K for p in pos)
            entries.append((k, t.monos[m], self.c[(m, slice(None)) + pos]))
        entries.sort(key=lambda e: (e[0], e[1]))
        return entries

    def coefficient(self, k, nu) -> np.ndarray:
        t = self.trunc.tables
        if sum(abs(x) for x in k) > t.K or tuple(nu) not in t.index:
            return np.zeros(self.ncomp, dtype=complex)
        pos = tuple(int(x) + t.K for x in k)
        return np.array(self.c[(t.index[tuple(nu)], slice(None)) + pos])

    # reality ---------------------------------------------------------------

    def reflected(self) -> "TorusSeries":
        """Coefficients ``conj(c_{-k})``; equals ``self`` for real series."""
        axes = tuple(range(2, 2 + self.d))
        return self._like(np.conj(np.flip(self.c, axis=axes)))

    def real_part(self) -> "TorusSeries":
        """Hermitian symmetrization (the real part of the represented function)."""
        return self._like(0.5 * (self.c + self.reflected().c))

    def reality_defect(self) -> float:
        return float(np.abs(self.c - self.reflected().c).max()) if self.c.size else 0.0

    def is_real(self, tol: float = 1e-14) -> bool:
        return self.reality_defect() <= tol * max(self.max_abs(), 1e-300)

    # grids -----------------------------------------------------------------

    def grid(self) -> np.ndarray:
        """Values on the uniform ``N**d`` grid for every (monomial, component)."""
        if self._grid is None:
            t = self.trunc.tables
            g = np.zeros((t.nmono, self.ncomp) + (t.N,) * t.d, dtype=complex)
            g[(slice(None), slice(None)) + t.grid_index] = self.c
            axes = tuple(range(2, 2 + t.d))
            self._grid = np.fft.ifftn(g, axes=axes) * (t.N**t.d)
        return self._grid

    @classmethod
    def from_grid(cls, trunc: Truncation, values: np.ndarray, loss: float = 0.0, flush: bool = True):
        t = trunc.tables
        axes = tuple(range(2, 2 + t.d))
        spec = np.fft.fftn(values, axes=axes) / (t.N**t.d)
        dropped = float(np.abs(spec[(slice(None), slice(None)) + (t.grid_outside,)] if t.d else 0.0).sum())
        c = spec[(slice(None), slice(None)) + t.grid_index]
        if flush:
            a = np.abs(c)
            top = a.max() if a.size else 0.0
            # FFT round-off sits near eps * top; clearing it keeps supports exact
            small = a <= FLUSH_REL * top
            dropped += float(a[small].sum())
            c = np.where(small, 0.0, c)
        return cls(trunc, c, loss + dropped)

    def mul(self, other: "TorusSeries") -> "TorusSeries":
        """Truncated product; a one-component factor broadcasts over the other."""
        self._check(other)
        if self.is_zero() or other.is_zero():
            n = max(self.ncomp, other.ncomp)
            return TorusSeries.zeros(self.trunc, n).with_loss(self.loss + other.loss)
        t = self.trunc.tables
        if self.ncomp != other.ncomp and 1 not in (self.ncomp, other.ncomp):
            raise InvalidArgument("component counts do not broadcast")
        vals = _taylor_mul(self.grid(), other.grid(), t.pairs, t.nmono)
        # first-order propagation of the operands' truncation errors
        carried = self.l1() * other.loss + other.l1() * self.loss
        return TorusSeries.from_grid(self.trunc, vals, carried)

    def dot(self, other: "TorusSeries") -> "TorusSeries":
        """Componentwise product summed over components."""
        p = self.mul(other)
        return TorusSeries(self.trunc, p.c.sum(axis=1, keepdims=True), p.loss)

    def matvec_series(self, vec: "TorusSeries") -> "TorusSeries":
        """``self`` holds a ``d x d`` matrix row-major in its components; apply it to ``vec``."""
        n = vec.ncomp
        if self.ncomp != n * n:
            raise InvalidArgument("matrix series has the wrong component count")
        t = self.trunc.tables
        A = self.grid().reshape((t.nmono, n, n) + (t.N,) * t.d)
        v = vec.grid()
        out = np.zeros((t.nmono, n) + (t.N,) * t.d, dtype=complex)
        for i, j, m in t.pairs:
            out[m] += np.einsum("ab...,b...->a...", A[i], v[j])
        return TorusSeries.from_grid(self.trunc, out, self.l1() * vec.loss + vec.l1() * self.loss)

    # derivatives -----------------------------------------------------------

    def dx(self, i: int) -> "TorusSeries":
        t = self.trunc.tables
        return self._like(self.c * (2j * math.pi * t.kvec[..., i]))

    def dy(self, v: int) -> "TorusSeries":
        t = self.trunc.tables
        src, dst, fac = t.dy[v]
        c = np.zeros_like(self.c)
        if len(src):
            np.add.at(c, dst, self.c[src] * fac.reshape((-1,) + (1,) * (self.c.ndim - 1)))
        return self._like(c)

    def grad_x(self) -> "TorusSeries":
        if self.ncomp != 1:
            raise InvalidArgument("gradient needs a scalar series")
        return TorusSeries.stack([self.dx(i) for i in range(self.d)])

    def grad_y(self) -> "TorusSeries":
        if self.ncomp != 1:
            raise InvalidArgument("gradient needs a scalar series")
        return TorusSeries.stack([self.dy(v) for v in range(self.d)])

    def jacobian_x(self) -> "TorusSeries":
        """Row-major components ``d f_a / d x_b`` of a vector series."""
        parts = [self.component(a).dx(b) for a in range(self.ncomp) for b in range(self.d)]
        return TorusSeries.stack(parts)

    # evaluation ------------------------------------------------------------

    def evaluate(self, x, y=None, chunk: int = 2048) -> np.ndarray:
        """Evaluate at points; returns shape ``(P, ncomp)``.

        ``x`` has shape ``(P, d)``; ``y`` defaults to zero.
        """
        t = self.trunc.tables
        x = np.atleast_2d(np.asarray(x, dtype=complex))
        P = x.shape[0]
        y = np.zeros((P, t.d), dtype=complex) if y is None else np.atleast_2d(np.asarray(y, dtype=complex))
        live = np.any(self.c != 0, axis=(0, 1))
        ks = t.kvec[live]
        coef = self.c[(slice(None), slice(None), live)]  # (nmono, ncomp, M)
        out = np.zeros((P, self.ncomp), dtype=complex)
        if ks.shape[0] == 0:
            return out
        for s in range(0, P, chunk):
            xs, ys = x[s : s + chunk], y[s : s + chunk]
            phase = np.exp(2j * math.pi * (xs @ ks.T))
            ymono = np.prod(ys[:, None, :] ** t.mono_arr[None, :, :], axis=2)
            out[s : s + chunk] = np.einsum("pm,pn,ncm->pc", phase, ymono, coef, optimize=True)
        return out

    # serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        t = self.trunc.tables
        terms = []
        for k, nu, vec in self.modes():
            for comp, z in enumerate(vec):
                if z != 0:
                    terms.append({"k": list(k), "nu": list(nu), "c": comp, "re": repr(float(z.real)), "im": repr(float(z.imag))})
        return {"d": t.d, "K": t.K, "D": t.D, "ncomp": self.ncomp, "loss": repr(self.loss), "terms": terms}

    @classmethod
    def from_json(cls, data: dict) -> "TorusSeries":
        trunc = Truncation(int(data["d"]), int(data["K"]), int(data["D"]))
        t = trunc.tables
        c = np.zeros((t.nmono, int(data["ncomp"])) + t.box, dtype=complex)
        for term in data["terms"]:
            pos = tuple(int(x) + t.K for x in term["k"])
            c[(t.index[tuple(term["nu"])], int(term["c"])) + pos] = complex(float(term["re"]), float(term["im"]))
        return cls(trunc, c, float(data.get("loss", 0.0)))

    def __repr__(self):
        return f"TorusSeries(d={self.d}, K={self.trunc.K}, D={self.trunc.D}, ncomp={self.ncomp}, nnz={int(np.count_nonzero(self.c))})"


# --------------------------------------------------------------------------
# Windows and norms


@dataclass(frozen=True)
class AnalyticityWindow:
    """Strip width ``rho`` and polydisc radii ``r``.

    ``r`` is a pair ``(a, b)`` for vector fields (``a`` bounds the first
    ``d - 1`` action variables, ``b`` the last) and a single radius for
    Hamiltonians.
    """

    rho: float
    r: float | tuple

    def __post_init__(self):
        r = self.r
        if isinstance(r, (list, tuple)):
            r = tuple(float(x) for x in r)
            if len(r) != 2:
                raise InvalidArgument("vector-field radii are a pair (a, b)")
            vals = r
        else:
            r = float(r)
            vals = (r,)
        if not (self.rho > 0) or any(not (v > 0) for v in vals):
            raise InvalidArgument("analyticity window needs rho > 0 and positive radii")
        object.__setattr__(self, "rho", float(self.rho))
        object.__setattr__(self, "r", r)

    @property
    def is_pair(self) -> bool:
        return isinstance(self.r, tuple)

    def radii(self, d: int) -> np.ndarray:
        if self.is_pair:
            a, b = self.r
            return np.array([a] * (d - 1) + [b])
        return np.full(d, self.r)

    def contains(self, other: "AnalyticityWindow", d: int) -> bool:
        return other.rho <= self.rho * (1 + 1e-15) and bool(np.all(other.radii(d) <= self.radii(d) * (1 + 1e-15)))

    def to_json(self):
        return {"rho": repr(self.rho), "r": [repr(x) for x in self.r] if self.is_pair else repr(self.r)}

    @classmethod
    def from_json(cls, data):
        r = data["r"]
        return cls(float(data["rho"]), tuple(float(x) for x in r) if isinstance(r, list) else float(r))


def _log_weights(series: TorusSeries, window: AnalyticityWindow, primed: bool, hamiltonian: bool):
    t = series.trunc.tables
    radii = window.radii(t.d)
    with np.errstate(divide="ignore"):
        log_nu = t.mono_arr @ np.log(radii)
    w = log_nu.reshape((-1,) + (1,) * t.d) + window.rho * t.knorm
    if primed:
        extra = 1.0 + TWO_PI * t.knorm
        extra = np.broadcast_to(extra, (t.nmono,) + t.box)
        if hamiltonian:
            extra = extra + (t.degree / radii[0]).reshape((-1,) + (1,) * t.d)
        w = w + np.log(extra)
    return w


def log_weighted_norm(series, window: AnalyticityWindow | None = None, primed: bool = False) -> float:
    """Natural logarithm of :func:`weighted_norm` (``-inf`` for zero)."""
    s, window, ham = _unwrap(series, window)
    a = np.abs(s.c).sum(axis=1)
    nz = a > 0
    if not np.any(nz):
        return -math.inf
    logs = np.log(a[nz]) + _log_weights(s, window, primed, ham)[nz]
    top = logs.max()
    return float(top + math.log(np.exp(logs - top).sum()))


def weighted_norm(series, window: AnalyticityWindow | None = None, primed: bool = False) -> float:
    """Weighted analytic norm of a series.

    Computes ``sum_k w_k sum_nu sum_comp |f_{k,nu}| r^nu e^{rho |k|}`` with
    ``w_k = 1`` or, when ``primed``, ``w_k = 1 + 2 pi |k|`` (plus ``|nu|/r``
    for Hamiltonians, matching the norm of the gradient).  The sup-norm of
    each Taylor polynomial over the polydisc is replaced by its coefficient
    bound.

    Parameters
    ----------
    series : TorusSeries, VectorFieldSeries or HamiltonianSeries
    window : AnalyticityWindow, optional
        Defaults to the window stored on the series.  It may not exceed it.
    primed : bool
        Use the derivative-weighted norm.

    Returns
    -------
    float
        May be ``inf`` when the weights overflow; see :func:`log_weighted_norm`.
    """
    lg = log_weighted_norm(series, window, primed)
    if lg == -math.inf:
        return 0.0
    return math.exp(lg) if lg < 709 else math.inf


def _unwrap(series, window):
    ham = False
    if isinstance(series, (VectorFieldSeries, HamiltonianSeries)):
        ham = isinstance(series, HamiltonianSeries)
        if window is None:
            window = series.window
        elif not series.window.contains(window, series.f.d):
            raise InvalidArgument("requested window exceeds the series' domain")
        series = series.f
    if window is None:
        raise InvalidArgument("a window is required for a bare series")
    return series, window, ham or not window.is_pair


def sampled_sup(series: TorusSeries, window: AnalyticityWindow, n: int = 16, seed: int = 0) -> float:
    """Sampled sup of ``sum_comp |f|`` on the boundary of the complex domain.

    A cheap lower estimate of the true sup-norm, used only as a report
    alongside the coefficient bound.
    """
    rng = np.random.default_rng(seed)
    d = series.d
    radii = window.radii(d)
    x = rng.random((n, d)) + 1j * (window.rho / TWO_PI) * rng.choice([-1.0, 1.0], size=(n, d))
    y = radii * np.exp(2j * math.pi * rng.random((n, d)))
    return float(np.abs(series.evaluate(x, y)).sum(axis=1).max())


# --------------------------------------------------------------------------
# Typed series


@dataclass(frozen=True)
class FlatBase:
    """The integrable part: ``omega + L y`` (vector field) or ``grad H0 = omega + Q y``.

    Attributes
    ----------
    omega : ndarray
        Frequency vector.
    linear : ndarray
        ``d x d`` matrix ``L`` (vector fields) or symmetric ``Q`` (Hamiltonians).
    """

    omega: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        w = np.array(self.omega, dtype=float).reshape(-1)
        L = np.array(self.linear, dtype=float).reshape(len(w), len(w))
        w.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "linear", L)

    @property
    def d(self):
        return len(self.omega)

    def divisor(self, trunc: Truncation):
        """Return ``(a, b)`` with ``k . (omega + L y) = a_k + b_k . y`` on the box."""
        t = trunc.tables
        a = t.kvec @ self.omega
        b = t.kvec @ self.linear
        return a, b

    def field_series(self, trunc: Truncation) -> TorusSeries:
        """``omega + L y`` as a ``d``-component series."""
        d = self.d
        modes = {(0,) * d: self.omega}
        for v in range(d):
            e = tuple(int(i == v) for i in range(d))
            modes[e] = self.linear[:, v]
        return TorusSeries.polynomial(trunc, modes, ncomp=d)

    def hamiltonian_series(self, trunc: Truncation) -> TorusSeries:
        """``omega . y + y.Q y / 2`` as a scalar series."""
        d = self.d
        Q = self.linear
        modes = {}
        for v in range(d):
            e = [0] * d
            e[v] = 1
            modes[tuple(e)] = self.omega[v]
        for i in range(d):
            for j in range(i, d):
                e = [0] * d
                e[i] += 1
                e[j] += 1
                modes[tuple(e)] = Q[i, i] / 2 if i == j else Q[i, j]
        return TorusSeries.polynomial(trunc, modes)

    def to_json(self):
        return {"omega": [repr(float(x)) for x in self.omega], "linear": [[repr(float(x)) for x in r] for r in self.linear]}

    @classmethod
    def from_json(cls, data):
        return cls(np.array([float(x) for x in data["omega"]]), np.array([[float(x) for x in r] for r in data["linear"]]))


@dataclass(frozen=True)
class ModeIndex:
    k: tuple
    nu: tuple


class _TypedSeries:
    f: TorusSeries
    window: AnalyticityWindow
    base: FlatBase

    @property
    def coeffs(self) -> dict:
        """Sparse view ``{ModeIndex: coefficient}`` in lexicographic order."""
        out = {}
        for k, nu, vec in self.f.modes():
            out[ModeIndex(k, nu)] = vec if self.f.ncomp > 1 else complex(vec[0])
        return out

    @property
    def trunc(self):
        return self.f.trunc

    def norm(self, primed: bool = False) -> float:
        return weighted_norm(self, None, primed)

    def replace(self, **kw):
        return type(self)(**{"f": self.f, "window": self.window, "base": self.base, **kw})

    def to_json(self):
        return {"series": self.f.to_json(), "window": self.window.to_json(), "base": self.base.to_json()}

    @classmethod
    def from_json(cls, data):
        return cls(TorusSeries.from_json(data["series"]), AnalyticityWindow.from_json(data["window"]), FlatBase.from_json(data["base"]))


@dataclass(frozen=True)
class VectorFieldSeries(_TypedSeries):
    """Vector field ``X(x, y) = omega + L y + f(x, y)`` with ``f`` stored as a series."""

    f: TorusSeries
    window: AnalyticityWindow
    base: FlatBase

    def __post_init__(self):
        if self.f.ncomp != self.f.d:
            raise InvalidArgument("vector-field perturbation needs d components")
        if not self.window.is_pair:
            raise InvalidArgument("vector fields use the radius pair (a, b)")

    def full(self) -> TorusSeries:
        """``X`` itself including the integrable part."""
        return self.base.field_series(self.f.trunc) + self.f

    def evaluate(self, x, y=None):
        x = np.atleast_2d(x)
        y = np.zeros_like(x, dtype=float) if y is None else np.atleast_2d(y)
        return self.base.omega + y @ self.base.linear.T + self.f.evaluate(x, y)


@dataclass(frozen=True)
class HamiltonianSeries(_TypedSeries):
    """Hamiltonian ``H(x, y) = omega . y + y.Q y / 2 + F(x, y)``."""

    f: TorusSeries
    window: AnalyticityWindow
    base: FlatBase

    def __post_init__(self):
        if self.f.ncomp != 1:
            raise InvalidArgument("Hamiltonian perturbation is scalar")
        Q = self.base.linear
        if np.abs(Q - Q.T).max() > 1e-14 * max(1.0, np.abs(Q).max()):
            raise InvalidArgument("Q must be symmetric")

    @property
    def Q(self):
        return self.base.linear

    def full(self) -> TorusSeries:
        return self.base.hamiltonian_series(self.f.trunc) + self.f

    def q_condition(self) -> float:
        return float(np.linalg.cond(self.Q))


# --------------------------------------------------------------------------
# Resonance cones


class ResonanceCone:
    """Split of Fourier(-Taylor) indices into near- and far-from-resonance sets.

    ``k`` is far from resonance when ``|k . omega| > sigma |k|_1`` and, if
    ``tau`` is given, the Taylor index also satisfies ``|nu| < tau |k|_1``.
    The comparison runs in double precision and is re-done in
    :mod:`mpmath` at the frequency's precision whenever the margin is
    within ``1e-9 |k|``.
    """

    def __init__(self, omega, sigma: float, tau: float | None = None, prec: int | None = None):
        if not sigma > 0 or (tau is not None and not tau > 0):
            raise InvalidArgument("cone needs sigma > 0 and tau > 0")
        if hasattr(omega, "omega"):
            prec = omega.prec if prec is None else prec
            omega = omega.omega
        self.prec = 256 if prec is None else int(prec)
        with mp.workprec(self.prec):
            self.omega_mp = tuple(mpf(w) for w in omega)
        self.omega = np.array([float(w) for w in self.omega_mp])
        self.sigma = float(sigma)
        self.tau = None if tau is None else float(tau)
        self._cache = {}

    @property
    def d(self):
        return len(self.omega)

    def contains(self, k, nu=None) -> bool:
        """``True`` when ``(k, nu)`` is far from resonance."""
        k = tuple(int(x) for x in k)
        n1 = sum(abs(x) for x in k)
        if n1 == 0:
            return False
        margin = abs(float(np.dot(k, self.omega))) - self.sigma * n1
        if abs(margin) <= 1e-9 * n1:
            with mp.workprec(self.prec):
                margin = float(abs(mpmath.fsum(mpf(a) * w for a, w in zip(k, self.omega_mp))) - mpf(self.sigma) * n1)
        if margin <= 0:
            return False
        if self.tau is not None and nu is not None and sum(nu) >= self.tau * n1:
            return False
        return True

    def mode_mask(self, trunc: Truncation) -> np.ndarray:
        """Boolean box array of Fourier indices with ``|k . omega| > sigma |k|``."""
        key = ("k", trunc)
        if key not in self._cache:
            t = trunc.tables
            dot = t.kvec @ self.omega
            margin = np.abs(dot) - self.sigma * t.knorm
            mask = (margin > 0) & t.mask & (t.knorm > 0)
            close = np.argwhere((np.abs(margin) <= 1e-9 * t.knorm) & t.mask & (t.knorm > 0))
            for pos in close:
                k = t.kvec[tuple(pos)]
                mask[tuple(pos)] = self.contains(k)
            self._cache[key] = mask
        return self._cache[key]

    def minus_mask(self, trunc: Truncation) -> np.ndarray:
        """Mask of shape ``(nmono, 1) + box`` selecting the far-from-resonance set."""
        key = ("full", trunc)
        if key not in self._cache:
            t = trunc.tables
            km = self.mode_mask(trunc)[None]
            if self.tau is not None:
                nu_ok = t.degree.reshape((-1,) + (1,) * t.d) < self.tau * t.knorm[None]
                km = km & nu_ok
            else:
                km = np.broadcast_to(km, (t.nmono,) + t.box)
            self._cache[key] = np.ascontiguousarray(km)[:, None]
        return self._cache[key]

    def tau_binds(self, trunc: Truncation) -> bool:
        """Whether the Taylor condition removes any mode at this truncation."""
        if self.tau is None:
            return False
        t = trunc.tables
        km = self.mode_mask(trunc)
        return bool(np.any(km & (self.tau * t.knorm <= t.D)))

    def to_json(self):
        return {"omega": [mpmath.nstr(w, 30) for w in self.omega_mp], "sigma": repr(self.sigma), "tau": None if self.tau is None else repr(self.tau)}


def project_resonant(series, cone: ResonanceCone):
    """Split a series into its near-resonant part and its far-from-resonance part.

    Returns
    -------
    plus, minus
        Same type as the input; ``plus + minus`` reproduces it exactly.
    """
    s = series.f if isinstance(series, _TypedSeries) else series
    m = cone.minus_mask(s.trunc)
    minus = TorusSeries(s.trunc, np.where(m, s.c, 0.0), s.loss)
    plus = TorusSeries(s.trunc, np.where(m, 0.0, s.c), s.loss)
    if isinstance(series, _TypedSeries):
        return series.replace(f=plus), series.replace(f=minus)
    return plus, minus


# --------------------------------------------------------------------------
# Small divisors


def _inverse_divisor_taylor(trunc: Truncation, a, b):
    """Taylor coefficients of ``1 / (a + b . y)`` up to degree ``D`` on the box.

    The truncated geometric series is exact at the truncation degree.
    """
    t = trunc.tables
    safe = np.where(a == 0, 1.0, a)
    out = np.zeros((t.nmono,) + t.box, dtype=float)
    ratio = -b / safe[..., None]
    for m, nu in enumerate(t.monos):
        deg = sum(nu)
        multinom = math.factorial(deg) / t.fact[m]
        term = np.full(t.box, multinom) / safe
        for v, p in enumerate(nu):
            if p:
                term = term * ratio[..., v] ** p
        out[m] = term
    return np.where(a == 0, 0.0, out)


def _apply_divisor(trunc: Truncation, c, a, b):
    """Multiply mode-wise by ``2 pi i (a + b . y)`` with degree truncation."""
    t = trunc.tables
    poly = np.zeros((t.nmono,) + t.box, dtype=complex)
    poly[0] = a
    for v in range(t.d):
        e = tuple(int(i == v) for i in range(t.d))
        if e in t.index:
            poly[t.index[e]] = b[..., v]
    return 2j * math.pi * _taylor_mul(c, poly[:, None], t.pairs, t.nmono)


def _divisor_check(g: TorusSeries, base: FlatBase, cone, window):
    t = g.trunc.tables
    a, b = base.divisor(g.trunc)
    live = np.any(g.c != 0, axis=(0, 1))
    if not np.any(live):
        return a, b
    if np.any(live & (t.knorm == 0)):
        raise SmallDivisorError("the zero mode has no small-divisor inverse", k=[0] * t.d)
    if cone is not None:
        outside = live & ~cone.mode_mask(g.trunc)
        if np.any(outside):
            k = t.kvec[tuple(np.argwhere(outside)[0])]
            raise SmallDivisorError(f"mode {tuple(int(x) for x in k)} is not far from resonance", k=k.tolist())
    radii = window.radii(t.d) if window is not None else np.zeros(t.d)
    margin = np.abs(a) - np.abs(b) @ radii
    need = 0.5 * cone.sigma * t.knorm if cone is not None else np.zeros_like(margin)
    bad = live & ((margin <= need) | (margin <= 0))
    if np.any(bad):
        k = t.kvec[tuple(np.argwhere(bad)[0])]
        raise SmallDivisorError(
            f"divisor for mode {tuple(int(x) for x in k)} is not bounded away from zero on the polydisc",
            k=k.tolist(),
        )
    return a, b


def small_divisor_inverse(g, base: FlatBase | None = None, cone: ResonanceCone | None = None, window: AnalyticityWindow | None = None):
    """Solve ``D h = g`` mode by mode, where ``D`` is differentiation along ``omega + L y``.

    Each Fourier coefficient ``g_k(y)`` is divided by ``2 pi i k.(omega + L y)``;
    the reciprocal is expanded as a geometric series in ``y`` that is exact
    up to the Taylor degree ``D``.

    Parameters
    ----------
    g : TorusSeries or typed series
        Supported on far-from-resonance modes.
    base : FlatBase, optional
        Taken from ``g`` when it is a typed series.
    cone : ResonanceCone, optional
        When given, every mode must lie in its far set and the divisor must
        stay above ``sigma |k| / 2`` on the polydisc of ``window``.
    window : AnalyticityWindow, optional

    Raises
    ------
    SmallDivisorError
        Naming the offending ``k``.
    """
    typed = isinstance(g, _TypedSeries)
    s = g.f if typed else g
    if typed:
        base = g.base if base is None else base
        window = g.window if window is None else window
    if base is None:
        raise InvalidArgument("small_divisor_inverse needs a base")
    a, b = _divisor_check(s, base, cone, window)
    t = s.trunc.tables
    inv = _inverse_divisor_taylor(s.trunc, a, b)
    c = _taylor_mul(s.c, inv[:, None], t.pairs, t.nmono) / (2j * math.pi)
    out = TorusSeries(s.trunc, c, s.loss)
    return g.replace(f=out) if typed else out


def divisor_apply(h, base: FlatBase):
    """Derivative of ``h`` along ``omega + L y``: mode-wise ``2 pi i k.(omega + L y) h_k``."""
    s = h.f if isinstance(h, _TypedSeries) else h
    a, b = base.divisor(s.trunc)
    out = TorusSeries(s.trunc, _apply_divisor(s.trunc, s.c, a, b), s.loss)
    return h.replace(f=out) if isinstance(h, _TypedSeries) else out


# --------------------------------------------------------------------------
# Composition


def compose_with_shift(
    f,
    u: TorusSeries | None = None,
    w: TorusSeries | None = None,
    *,
    rho_inner: float | None = None,
    window: AnalyticityWindow | None = None,
    tol: float = 1e-16,
    max_order: int = 40,
):
    """Taylor-expand ``f(x + u(x, y), y + w(x, y))``.

    The expansion ``sum_alpha d^alpha f * s^alpha / alpha!`` over the
    combined shift ``s = (u, w)`` is accumulated on the FFT grid; powers of
    the shift are formed pointwise there.  With a grid of at least
    ``4K + 2`` points per axis, products of two shifts are alias-free; higher
    powers alias only their modes beyond ``2K``.

    Parameters
    ----------
    f : TorusSeries or typed series
    u, w : TorusSeries, optional
        ``d``-component shifts of the angles and of the actions.
    rho_inner : float, optional
        Strip width of the result.  When given, the shift must satisfy
        ``|u| < (rho - rho_inner) / 4 pi`` measured at ``rho_inner``.
    window : AnalyticityWindow, optional
        Domain of ``f``; taken from a typed series by default.
    tol : float
        Expansion stops once a term's grid sup falls below ``tol`` times
        that of ``f``.

    Raises
    ------
    DomainError
        Shift too large for the requested domain shrink, or no convergence
        within ``max_order`` terms.
    """
    typed = isinstance(f, _TypedSeries)
    s = f.f if typed else f
    if typed and window is None:
        window = f.window
    d = s.d
    t = s.trunc.tables
    dirs = []
    if u is not None and not u.is_zero():
        dirs += [("x", i, u.component(i)) for i in range(d)]
    if w is not None and not w.is_zero():
        dirs += [("y", v, w.component(v)) for v in range(d)]
    if rho_inner is not None and u is not None:
        if window is None:
            raise InvalidArgument("the domain check needs a window")
        inner = AnalyticityWindow(rho_inner, window.r)
        size = weighted_norm(u, inner)
        if not size < (window.rho - rho_inner) / (4 * math.pi):
            raise DomainError(
                "angle shift too large for the requested domain shrink",
                shift_norm=size, limit=(window.rho - rho_inner) / (4 * math.pi),
            )
    if not dirs or s.is_zero():
        return f

    shift_grids = [dr[2].grid() for dr in dirs]
    acc = s.grid().copy()
    scale = max(np.abs(acc).max(), 1e-300)
    grad_l1 = 0.0
    level = {(): (s, None)}
    order = 0
    while level:
        order += 1
        if order > max_order:
            raise DomainError("composition expansion did not converge", order=max_order)
        nxt = {}
        term = np.zeros_like(acc)
        for alpha, (der, power) in level.items():
            for j in range(alpha[-1] if alpha else 0, len(dirs)):
                kind, idx, shift = dirs[j]
                dv = der.dx(idx) if kind == "x" else der.dy(idx)
                if dv.is_zero():
                    continue
                beta = alpha + (j,)
                if order == 1:
                    grad_l1 += dv.l1() * shift.loss
                count = beta.count(j)
                sg = shift_grids[j]
                new_power = sg / count if power is None else _taylor_mul(power, sg, t.pairs, t.nmono) / count
                nxt[beta] = (dv, new_power)
                term += _taylor_mul(dv.grid(), new_power, t.pairs, t.nmono)
        acc += term
        if np.abs(term).max() < tol * scale:
            break
        level = nxt
    out = TorusSeries.from_grid(s.trunc, acc, s.loss + grad_l1)
    return f.replace(f=out) if typed else out


# --------------------------------------------------------------------------
# Linear pull-back


def polynomial_powers(trunc: Truncation, ymap: np.ndarray) -> np.ndarray:
    """Substitution matrix ``S`` with ``(ymap(y))**nu = sum_m S[nu, m] y**m``.

    ``ymap`` has shape ``(d, nmono)``: the Taylor coefficients of each
    component of a polynomial map of ``y``.
    """
    t = trunc.tables
    ymap = np.asarray(ymap, dtype=complex)
    S = np.zeros((t.nmono, t.nmono), dtype=complex)
    S[0, 0] = 1.0
    # build each monomial from a lower one times one component
    for m, nu in enumerate(t.monos):
        if m == 0:
            continue
        v = next(i for i, p in enumerate(nu) if p > 0)
        lower = list(nu)
        lower[v] -= 1
        S[m] = _taylor_mul(S[t.index[tuple(lower)]][:, None], ymap[v][:, None], t.pairs, t.nmono)[:, 0]
    return S


def affine_ymap(trunc: Truncation, A, shift=None) -> np.ndarray:
    """Taylor coefficients of ``y -> A y + shift`` in the layout of :func:`polynomial_powers`."""
    t = trunc.tables
    A = np.asarray(A, dtype=float)
    out = np.zeros((t.d, t.nmono), dtype=complex)
    if shift is not None:
        out[:, 0] = shift
    if t.D >= 1:
        for v in range(t.d):
            e = tuple(int(i == v) for i in range(t.d))
            out[:, t.index[e]] = A[:, v]
    return out


def pullback_linear(
    f,
    T,
    ymap: np.ndarray | None = None,
    *,
    loss_window: AnalyticityWindow | None = None,
    check: tuple | None = None,
):
    """Compose with ``(x, y) -> (T^{-1} x, ymap(y))``.

    Fourier index ``k`` moves to ``T^{-T} k``; the Taylor part is
    re-expanded through the polynomial map ``ymap`` (shape ``(d, nmono)``,
    identity when omitted) and truncated at degree ``D``.

    Parameters
    ----------
    f : TorusSeries or typed series
    T : UnimodularMatrix or integer array
    ymap : ndarray, optional
    loss_window : AnalyticityWindow, optional
        If given, discarded modes are weighted with this window in the
        reported loss; otherwise their plain 1-norm is used.
    check : (AnalyticityWindow, AnalyticityWindow), optional
        ``(source, target)`` windows: the image of the target polydisc under
        ``ymap`` must fit in the source polydisc.

    Returns
    -------
    series, loss
        The pulled-back series and the weight of the discarded modes.
    """
    typed = isinstance(f, _TypedSeries)
    s = f.f if typed else f
    t = s.trunc.tables
    Tm = np.array(T.entries if hasattr(T, "entries") else T, dtype=np.int64)
    if Tm.shape != (t.d, t.d) or round(abs(np.linalg.det(Tm))) != 1:
        raise InvalidArgument("pull-back needs a unimodular matrix")

    c = s.c
    if ymap is not None:
        if check is not None:
            src, dst = check
            r_dst = dst.radii(t.d)
            image = np.abs(ymap) @ np.prod(r_dst[None, :] ** t.mono_arr, axis=1)
            if np.any(image > src.radii(t.d) * (1 + 1e-12)):
                raise DomainError("parameter map sends the polydisc outside the coefficient domain", image=image.tolist())
        S = polynomial_powers(s.trunc, ymap)
        c = np.einsum("nm,nc...->mc...", S, c)

    # new[k'] = old[T^T k']; old modes landing outside the ball are lost
    kp = t.kvec.reshape(-1, t.d)
    src = kp @ Tm  # rows: (T^T k')^T = k'^T T
    inside = np.abs(src).sum(axis=1) <= t.K
    new = np.zeros_like(c)
    flat_new = new.reshape(c.shape[:2] + (-1,))
    flat_old = c.reshape(c.shape[:2] + (-1,))
    live_dst = np.flatnonzero(inside & t.mask.reshape(-1))
    src_pos = np.ravel_multi_index(tuple((src[live_dst] + t.K).T), t.box)
    flat_new[:, :, live_dst] = flat_old[:, :, src_pos]
    hit = np.zeros(int(np.prod(t.box)), dtype=bool)
    hit[src_pos] = True
    lost_mask = (~hit & t.mask.reshape(-1)).reshape(t.box)
    lost = np.where(lost_mask, c, 0.0)
    if loss_window is not None:
        loss = weighted_norm(TorusSeries(s.trunc, lost), loss_window)
    else:
        loss = float(np.abs(lost).sum())
    out = TorusSeries(s.trunc, new, s.loss + loss)
    return (f.replace(f=out) if typed else out), loss
