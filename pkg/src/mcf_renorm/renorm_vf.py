"""Renormalization of quasi-periodic vector fields with a parameter.

A field ``X(x, y) = omega_n + L_n y + f(x, y)`` on the torus times a small
polydisc of parameters is renormalized in three moves per step:

* elimination of the far-from-resonance Fourier modes by a change of angle
  coordinates ``(x, y) -> (x + u(x, y), y)``,
* a linear change of basis ``x -> T^{-1} x`` with time rescaled by ``eta``,
* a reparametrization of ``y`` that absorbs the zero Fourier mode.

The integer matrices, ``L_n = M_n / gamma_n`` and the rescaling factors come
from :func:`mcf_renorm.lattice_flow.continued_fraction_run`.  When the
perturbation has been driven to zero, composing the angle changes gives a
conjugacy ``h`` of the original field at parameter ``p`` to the linear flow.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AnalyticityExhausted,
    DomainError,
    EliminationFailure,
    InvalidArgument,
    ScheduleError,
)
from .lattice_flow import CFStep, FrequencyVector, Schedule, UnimodularMatrix, continued_fraction_run
from .torus_field import (
    AnalyticityWindow,
    FlatBase,
    ResonanceCone,
    TorusSeries,
    Truncation,
    VectorFieldSeries,
    compose_with_shift,
    polynomial_powers,
    project_resonant,
    pullback_linear,
    small_divisor_inverse,
    weighted_norm,
)


def row_norm(A) -> float:
    """Max row sum: the operator norm for matrices acting on the polydisc variables."""
    return float(np.abs(np.asarray(A, dtype=float)).sum(axis=1).max())


def col_norm(A) -> float:
    """Max column sum: the operator norm for matrices acting on field components."""
    return float(np.abs(np.asarray(A, dtype=float)).sum(axis=0).max())


def step_base(step: CFStep) -> FlatBase:
    """``X0_n(y) = omega_n + (M_n / gamma_n) y`` for a continued-fraction step."""
    L = step.M_red.as_array() / float(step.gamma_n)
    return FlatBase(L[:, -1].copy(), L)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EliminationConfig:
    """Solver settings for the far-mode elimination.

    ``method`` is ``"newton"`` (with automatic fallback to the homotopy
    ODE) or ``"homotopy-ode"``.
    """

    method: str = "newton"
    tol: float = 1e-13
    max_iter: int = 12
    homotopy_steps: int = 16
    inner_max: int = 60

    def __post_init__(self):
        if self.method not in ("newton", "homotopy-ode"):
            raise InvalidArgument(f"unknown elimination method {self.method!r}")
        if not self.tol > 0 or self.max_iter < 1 or self.homotopy_steps < 1:
            raise InvalidArgument("elimination needs tol > 0, max_iter >= 1, homotopy_steps >= 1")


@dataclass(frozen=True)
class VfRenormConfig:
    """Parameters of a vector-field renormalization run.

    Attributes
    ----------
    schedule : Schedule
        Flow times and cone apertures; must provide one step beyond the run.
    nu, delta : float
        Strip margins for elimination and for the analyticity improvement.
    lam : float
        Decay rate in ``(0, 1)`` of the contraction budget ``Theta_n``.
    rho0 : float, optional
        Initial strip width; by default the partial sum of the frequency's
        analyticity budget plus ``nu + 1``.
    b0 : float
        Initial radius along the parameter direction, below ``1/2``.
    permissive : bool
        Warn instead of failing when a conservative smallness bound fails.
    working_rho : float, optional
        Strip width of the norm used by the solvers.  The recorded strip
        widths follow the budget recursion, which quickly grows past the
        point where double-precision rounding at the highest Fourier modes
        dominates the weighted norm; solver tolerances and residuals are
        measured in ``min(rho_n, working_rho)``.  Default ``2.4 / K``.
    """

    schedule: Schedule
    nu: float = 0.5
    delta: float = 0.5
    lam: float = 0.5
    elimination: EliminationConfig = field(default_factory=EliminationConfig)
    K: int | None = None
    D: int = 3
    rho0: float | None = None
    b0: float = 0.2
    permissive: bool = False
    precision_bits: int = 256
    working_rho: float | None = None

    def __post_init__(self):
        if not (self.nu > 0 and self.delta > 0):
            raise InvalidArgument("nu and delta must be positive")
        if not 0 < self.lam < 1:
            raise InvalidArgument("lam must lie in (0, 1)")
        if not 0 < self.b0 < 0.5:
            raise InvalidArgument("b0 must lie in (0, 1/2)")
        if self.rho0 is not None and not self.rho0 > 0:
            raise InvalidArgument("rho0 must be positive")

    def truncation(self, d: int) -> Truncation:
        return Truncation.default(d, self.K, self.D)

    def solver_rho(self, trunc: Truncation) -> float:
        return self.working_rho if self.working_rho is not None else 2.4 / trunc.K


def _smallness(message, permissive, **details):
    if permissive:
        warnings.warn(message, RuntimeWarning, stacklevel=3)
        return False
    raise DomainError(message + " (use permissive mode to proceed)", **details)


# --------------------------------------------------------------------------
# schedule bookkeeping


@dataclass(frozen=True)
class Budget:
    """Per-step quantities that depend only on the continued-fraction run."""

    theta: tuple
    epsilon: tuple
    cutoff: tuple  # cutoff_factor[n] for n >= 1; entry 0 unused
    B: tuple  # B[n] = A_0 ... A_n, taken from steps[n + 1].A_n
    B_script: tuple  # partial sums of the analyticity budget
    theta_terms: tuple


def contraction_budget(steps, nu: float, delta: float, lam: float) -> Budget:
    """Compute ``Theta_n``, ``epsilon_n``, cutoff factors and the budget sums.

    ``steps`` must contain one step more than the number of budgets needed.

    Raises
    ------
    ScheduleError
        When the radius-difference term of ``Theta_n`` is not positive.
    """
    d = steps[0].d
    n_tot = len(steps) - 1
    thetas, eps, terms = [], [], []
    inv_prod = 1.0
    for n in range(n_tot):
        s, s1 = steps[n], steps[n + 1]
        base = step_base(s)
        Mn, Mn1 = s.M_red.as_array(), s1.M_red.as_array()
        gn, gn1 = abs(float(s.gamma_n)), abs(float(s1.gamma_n))
        om = float(np.abs(base.omega).sum())
        e = s.sigma / 42 * min(nu / (4 * math.pi), s.sigma / (72 * om))
        if n >= 1:
            inv_prod *= col_norm(np.linalg.inv(s.T.as_array())) ** 2
        second = lam**n * s.sigma**2 / inv_prod
        bracket = s.sigma * gn / row_norm(Mn) - s1.sigma * gn1 / (math.exp(d * float(s1.dt)) * row_norm(Mn1))
        if bracket <= 0:
            raise ScheduleError(
                f"contraction budget at step {n} is not positive; increase the gap or the cone exponent c",
                step=n, bracket=bracket,
            )
        third = lam**n * bracket / (1 + gn * row_norm(np.linalg.inv(Mn)))
        thetas.append(min(e, second, third))
        eps.append(e)
        terms.append((e, second, third))
    cutoff = [1.0]
    for n in range(1, n_tot):
        s = steps[n]
        fac = 2 * abs(float(s.eta_n)) * col_norm(s.T.as_array()) * (1 + 2 * math.pi / delta) * thetas[n - 1] / thetas[n]
        cutoff.append(max(fac, 1.0))
    B, acc = [], 1.0
    for n in range(n_tot):
        acc *= steps[n + 1].A_n
        B.append(acc)
    Bs, total = [], 0.0
    for i in range(n_tot - 1):
        total += B[i] * math.log(cutoff[i + 1]) + (delta + nu) * B[i]
        Bs.append(total)
    return Budget(tuple(thetas), tuple(eps), tuple(cutoff), tuple(B), tuple(Bs), tuple(terms))


# --------------------------------------------------------------------------
# parameter map


@dataclass(frozen=True)
class ParameterMap:
    """Polynomial map of the parameters, truncated at the Taylor degree.

    ``coeffs`` has shape ``(d, nmono)`` in the monomial order of the
    truncation.
    """

    trunc: Truncation
    coeffs: np.ndarray

    def __call__(self, y) -> np.ndarray:
        t = self.trunc.tables
        y = np.atleast_2d(np.asarray(y, dtype=complex))
        mono = np.prod(y[:, None, :] ** t.mono_arr[None], axis=2)
        return mono @ self.coeffs.T

    def linear_part(self) -> np.ndarray:
        t = self.trunc.tables
        out = np.zeros((t.d, t.d), dtype=complex)
        for v in range(t.d):
            e = tuple(int(i == v) for i in range(t.d))
            if e in t.index:
                out[:, v] = self.coeffs[:, t.index[e]]
        return out

    def to_json(self):
        t = self.trunc.tables
        return [
            {"nu": list(nu), "re": [repr(float(z.real)) for z in self.coeffs[:, m]], "im": [repr(float(z.imag)) for z in self.coeffs[:, m]]}
            for m, nu in enumerate(t.monos)
            if np.any(self.coeffs[:, m] != 0)
        ]


def _zero_mode_poly(f: TorusSeries) -> np.ndarray:
    """Taylor coefficients ``(d, nmono)`` of the zero Fourier mode of a vector series."""
    t = f.trunc.tables
    return np.array(f.c[(slice(None), slice(None)) + t.zero_pos]).T


def _poly_compose(trunc: Truncation, poly: np.ndarray, ymap: np.ndarray) -> np.ndarray:
    """``poly(ymap(y))`` for polynomial maps given as ``(d, nmono)`` coefficient arrays."""
    S = polynomial_powers(trunc, ymap)
    return poly @ S


def _poly_bound(poly: np.ndarray, trunc: Truncation, radii) -> np.ndarray:
    t = trunc.tables
    w = np.prod(np.asarray(radii, dtype=float)[None, :] ** t.mono_arr, axis=1)
    return np.abs(poly) @ w


def parameter_map(
    X: VectorFieldSeries,
    prev_step: CFStep,
    step: CFStep,
    r_next,
    tol: float = 1e-15,
    max_iter: int = 200,
):
    """Reparametrization that absorbs the zero mode of ``X``.

    Solves ``Phi(y) + G f0(Phi(y)) = D y`` with ``G = gamma M^{-1}`` of the
    previous step and ``D = diag(e^{-d dt}, ..., e^{-d dt}, 1)`` by
    fixed-point iteration on Taylor coefficients.

    Parameters
    ----------
    X : VectorFieldSeries
        Field after the previous elimination.
    prev_step, step : CFStep
        Steps ``n - 1`` and ``n``.
    r_next : pair of float
        Radii ``(a_n, b_n)`` of the new polydisc.

    Returns
    -------
    Phi : ParameterMap
    X_centered : VectorFieldSeries
        ``X`` with its zero Fourier mode removed.
    report : dict
        Contraction factor, inversion residual on sampled points and the
        radius of the image of the new polydisc.

    Raises
    ------
    DomainError
        When the fixed-point map is not a contraction or the image of the
        new polydisc leaves the old one.
    """
    trunc = X.f.trunc
    t = trunc.tables
    d = t.d
    L_prev = step_base(prev_step).linear
    G = np.linalg.inv(L_prev)
    f0 = _zero_mode_poly(X.f)
    Dmat = np.diag([math.exp(-d * float(step.dt))] * (d - 1) + [1.0])
    target = np.zeros((d, t.nmono), dtype=complex)
    if t.D >= 1:
        for v in range(d):
            target[:, t.index[tuple(int(i == v) for i in range(d))]] = Dmat[:, v]

    r_prev = X.window.radii(d)
    # contraction of y -> Dy - G f0(y): |G| times the Lipschitz bound of f0 on the old polydisc
    lip = 0.0
    for v in range(d):
        src, dst, fac = t.dy[v]
        dpoly = np.zeros_like(f0)
        np.add.at(dpoly, (slice(None), dst), f0[:, src] * fac)
        lip += float(_poly_bound(dpoly, trunc, r_prev).max())
    contraction = row_norm(G) * lip
    if contraction >= 1:
        raise DomainError("zero mode too large: parameter reparametrization is not a contraction", contraction=contraction)

    phi = target.copy()
    for _ in range(max_iter):
        new = target - G @ _poly_compose(trunc, f0, phi)
        change = float(np.abs(new - phi).max())
        phi = new
        if change <= tol * max(1.0, float(np.abs(phi).max())):
            break
    Phi = ParameterMap(trunc, phi)

    r_next = np.array(list(r_next[:1]) * (d - 1) + [r_next[1]], dtype=float) if len(r_next) == 2 else np.asarray(r_next)
    image = _poly_bound(phi, trunc, r_next)
    if np.any(image > r_prev * (1 + 1e-12)):
        raise DomainError("parameter map sends the new polydisc outside the old one", image=image.tolist(), radii=r_prev.tolist())

    rng = np.random.default_rng(0)
    ys = r_next * (2 * rng.random((16, d)) - 1)
    py = Phi(ys)
    f0_at = np.einsum("pn,cn->pc", np.prod(py[:, None, :] ** t.mono_arr[None], axis=2), f0)
    residual = float(np.abs(py + f0_at @ G.T - ys @ Dmat.T).max())

    centered = X.replace(f=X.f.without_zero_mode())
    return Phi, centered, {"contraction": contraction, "residual": residual, "image": image.tolist()}


# --------------------------------------------------------------------------
# rescaling


@dataclass(frozen=True)
class RescaleReport:
    rho_prime: float
    rho_cut: float
    rho_next: float
    cutoff_factor: float
    norm_in: float
    norm_out_primed: float
    norm_bound: float
    truncation_loss: float
    cutoff_ok: bool


def rescale_step(
    X: VectorFieldSeries,
    prev_step: CFStep,
    step: CFStep,
    config: VfRenormConfig,
    r_next,
    cutoff_factor: float = 1.0,
    rho_prev: float | None = None,
):
    """Change basis by ``T``, rescale time by ``eta`` and absorb the zero mode.

    Returns the new field ``X0_n + eta T (f - f0) o L_n`` together with its
    parameter map and a report of the norm bookkeeping.  The strip budget
    starts from ``rho_prev`` (default: the window of ``X``); the returned
    series carries ``min(rho_n, working_rho)``.

    Raises
    ------
    AnalyticityExhausted
        When the strip budget ``rho'' = rho / A - delta - log(cutoff)`` is
        not positive.
    """
    rho_prev = X.window.rho if rho_prev is None else rho_prev
    A_prev = step.A_n
    rho_prime = rho_prev / A_prev - config.delta
    rho_cut = rho_prime - math.log(cutoff_factor)
    rho_next = rho_cut - config.nu
    if rho_cut <= 0 or rho_next <= 0:
        raise AnalyticityExhausted(
            f"strip budget exhausted at step {step.n}", rho_prime=rho_prime, rho_cut=rho_cut, rho_next=rho_next,
        )
    Phi, centered, prep = parameter_map(X, prev_step, step, r_next)
    T = step.T
    eta = float(step.eta_n)
    Tm = T.as_array()
    moved, loss = pullback_linear(centered.f, T, Phi.coeffs)
    new_f = moved.linear_map(eta * Tm)
    base = step_base(step)
    radii = (float(r_next[0]), float(r_next[1]))
    work = config.solver_rho(new_f.trunc)
    out = VectorFieldSeries(new_f, AnalyticityWindow(min(rho_next, work), radii), base)

    # norm contract of the basis change, measured where the series is resolved
    src = AnalyticityWindow(min(rho_prev, work), X.window.r)
    dst = AnalyticityWindow(min(rho_prev, work) / A_prev, radii)
    norm_in = weighted_norm(centered.f, src)
    norm_out = weighted_norm(new_f, dst, primed=True)
    bound = abs(eta) * col_norm(Tm) * (1 + 2 * math.pi / config.delta) * norm_in
    # shrinking the strip by log(cutoff) removes that factor
    # from the nonconstant modes
    cut = weighted_norm(new_f, AnalyticityWindow(max(dst.rho - math.log(cutoff_factor), 1e-12), radii), primed=True)
    cutoff_ok = cut <= norm_out / cutoff_factor * (1 + 1e-9) + 1e-300
    report = RescaleReport(rho_prime, rho_cut, rho_next, cutoff_factor, norm_in, norm_out, bound, loss, cutoff_ok)
    return out, Phi, report, prep


# --------------------------------------------------------------------------
# elimination


@dataclass
class EliminationResult:
    """Outcome of the far-mode elimination.

    Attributes
    ----------
    u : TorusSeries
        Angle shift, supported on the far set.
    X_plus : VectorFieldSeries
        Transformed field with the far modes removed.
    defects : list of float
        Newton defects ``|F(u_m)|`` in the window norm.
    method : str
        Solver that produced ``u``.
    residual : float
        Window norm of the far part of the transformed field before it was
        dropped.
    max_far_coefficient : float
        Largest far-mode coefficient magnitude before it was dropped.
    order : float or None
        Measured convergence order from the defect sequence.
    bounds : dict
        Checked inequalities.
    """

    u: TorusSeries
    X_plus: VectorFieldSeries
    defects: list
    method: str
    residual: float
    max_far_coefficient: float
    order: float | None
    bounds: dict
    inner_iterations: list


class _Elimination:
    """Nonlinear elimination operator ``F(u) = I^-[(I + D u)^{-1} X o U]`` and its derivative."""

    def __init__(self, X: VectorFieldSeries, cone: ResonanceCone, inner_max: int):
        self.X = X
        self.cone = cone
        self.base = X.base
        self.trunc = X.f.trunc
        self.X0 = X.base.field_series(self.trunc)
        self.inner_max = inner_max
        self.window = X.window

    def minus(self, s):
        return project_resonant(s, self.cone)[1]

    def norm(self, s):
        return weighted_norm(s, self.window)

    def _solve_identity_plus(self, J, rhs, tol=1e-16):
        """Solve ``(I + J) z = rhs`` by fixed-point iteration (``J`` is small)."""
        z = rhs
        scale = max(rhs.l1(), 1e-300)
        prev = math.inf
        for _ in range(self.inner_max):
            nz = rhs - J.matvec_series(z)
            change = (nz - z).l1()
            # stop at tolerance or once rounding stalls the iteration
            if change <= tol * scale or (change >= prev and change <= 1e-12 * scale):
                return nz
            if change > 1e3 * scale:
                break
            z, prev = nz, change
        raise EliminationFailure("shift Jacobian too large: I + Du is not diagonally dominant")

    def state(self, u):
        """Return ``(F(u), w, J, G)`` where the transformed field is ``X0 + w``."""
        if u.is_zero():
            J = TorusSeries.zeros(self.trunc, self.trunc.d**2)
            fu = self.X.f
        else:
            J = u.jacobian_x()
            fu = compose_with_shift(self.X.f, u)
        # (I + J)^{-1}(X0 + f o U) - X0 = (I + J)^{-1}(f o U - J X0)
        rhs = fu - J.matvec_series(self.X0) if not u.is_zero() else fu
        w = self._solve_identity_plus(J, rhs) if not u.is_zero() else rhs
        G = fu.jacobian_x()
        return self.minus(w), w, J, G

    def derivative(self, state, h):
        """``DF(u) h = I^-[(I + J)^{-1}(G (I + J)^{-1} h - Dh (X0 + w))]``."""
        _, w, J, G = state
        z = self._solve_identity_plus(J, h) if not J.is_zero() else h
        term = G.matvec_series(z) - h.jacobian_x().matvec_series(self.X0 + w)
        out = self._solve_identity_plus(J, term) if not J.is_zero() else term
        return self.minus(out)

    def solve_linear(self, state, rhs, tol):
        """Solve ``DF(u) h = rhs`` by Richardson iteration preconditioned with ``-D^{-1}``."""
        h = small_divisor_inverse(-rhs, self.base, self.cone, self.window)
        scale = max(self.norm(rhs), 1e-300)
        for it in range(1, self.inner_max + 1):
            res = rhs - self.derivative(state, h)
            size = self.norm(res)
            if size <= tol * scale:
                return h, it
            h = h + small_divisor_inverse(-res, self.base, self.cone, self.window)
            if it > 3 and size > 0.9 * scale:
                break
        raise EliminationFailure(
            "linearized elimination operator is not well conditioned",
            inner_iterations=it, residual_ratio=size / max(self.norm(rhs), 1e-300),
        )


def _convergence_order(defects, floor):
    good = [d for d in defects if d > floor]
    if len(good) < 3:
        return None
    logs = np.log(good)
    ratios = [(logs[i + 2] - logs[i + 1]) / (logs[i + 1] - logs[i]) for i in range(len(logs) - 2) if logs[i + 1] != logs[i]]
    return float(min(ratios)) if ratios else None


def eliminate(X: VectorFieldSeries, cone: ResonanceCone, config: EliminationConfig | None = None, *, permissive: bool = False, nu: float = 0.5):
    """Remove the far-from-resonance modes of ``X`` by an angle change ``x -> x + u``.

    Solves ``I^-[(I + D_x u)^{-1} X o U] = 0`` for ``u`` supported on the
    far set, by Newton's method (each linear solve is a preconditioned
    Richardson iteration built on the small-divisor inverse) or by the
    homotopy ODE ``du/dt = -DF(u)^{-1} F(0)`` integrated with RK4.

    Parameters
    ----------
    X : VectorFieldSeries
    cone : ResonanceCone
        Frequency and aperture of this step.
    config : EliminationConfig, optional
    permissive : bool
        Warn instead of failing when ``|f|' >= epsilon_n``.
    nu : float
        Strip margin used in ``epsilon_n``.

    Returns
    -------
    EliminationResult

    Raises
    ------
    EliminationFailure
        When both solvers fail.
    """
    config = config or EliminationConfig()
    om = float(np.abs(X.base.omega).sum())
    if not cone.sigma < om:
        raise InvalidArgument("cone aperture must be smaller than the frequency norm")
    eps = cone.sigma / 42 * min(nu / (4 * math.pi), cone.sigma / (72 * om))
    size_primed = weighted_norm(X.f, AnalyticityWindow(X.window.rho + nu, X.window.r), primed=True)
    within = size_primed < eps or _smallness(
        f"perturbation {size_primed:.3g} exceeds the elimination bound {eps:.3g}", permissive,
        perturbation=size_primed, epsilon=eps,
    )

    op = _Elimination(X, cone, config.inner_max)
    zero = TorusSeries.zeros(X.f.trunc, X.f.d)
    f_minus = op.minus(X.f)
    fm_norm = op.norm(f_minus)
    f_norm = max(op.norm(X.f), 1e-300)
    floor = 1e-15 * f_norm
    if f_minus.is_zero():
        return _finish(op, zero, [0.0], "newton", None, fm_norm, within, [])

    target = config.tol * f_norm
    u, defects, inner, method = zero, [], [], config.method
    converged = False
    if method == "newton":
        try:
            u, defects, inner, converged = _newton(op, u, target, config)
        except EliminationFailure:
            converged = False
        if not converged:
            method = "homotopy-ode"
    if method == "homotopy-ode":
        try:
            u = _homotopy(op, config)
            # polish the RK4 end point with Newton steps
            u, more, inner2, converged = _newton(op, u, target, config)
            defects += more
            inner += inner2
        except EliminationFailure as exc:
            raise EliminationFailure(
                "elimination failed with Newton and with the homotopy ODE",
                **exc.details,
            ) from exc
        if not converged:
            raise EliminationFailure("elimination did not reach tolerance", defects=defects)
    order = _convergence_order(defects, max(floor, target))
    return _finish(op, u, defects, method, order, fm_norm, within, inner)


def _newton(op, u, target, config):
    defects, inner = [], []
    state = op.state(u)
    for _ in range(config.max_iter + 1):
        F = state[0]
        dnorm = op.norm(F)
        defects.append(dnorm)
        if dnorm <= target:
            return u, defects, inner, True
        if len(defects) > 3 and dnorm > 0.5 * defects[-2]:
            break
        # solve only as accurately as the next Newton defect needs
        lin_tol = max(min(1e-3, dnorm / max(defects[0], 1e-300)), 1e-6) * 1e-2
        h, its = op.solve_linear(state, -F, lin_tol)
        inner.append(its)
        u = u + h
        state = op.state(u)
    return u, defects, inner, False


def _homotopy(op, config):
    F0 = op.minus(op.X.f)
    u = TorusSeries.zeros(op.trunc, op.trunc.d)
    dt = 1.0 / config.homotopy_steps

    def rate(v):
        st = op.state(v)
        h, _ = op.solve_linear(st, -F0, 1e-10)
        return h

    for _ in range(config.homotopy_steps):
        k1 = rate(u)
        k2 = rate(u + k1.scale(dt / 2))
        k3 = rate(u + k2.scale(dt / 2))
        k4 = rate(u + k3.scale(dt))
        u = u + (k1 + k2.scale(2) + k3.scale(2) + k4).scale(dt / 6)
    return u


def _finish(op, u, defects, method, order, fm_norm, within, inner):
    X = op.X
    if u.is_zero():
        w = X.f
    else:
        _, w, _, _ = op.state(u)
    plus, minus = project_resonant(w, op.cone)
    plus = plus.real_part() if X.f.is_real(1e-12) else plus
    residual = op.norm(minus)
    max_far = minus.max_abs()
    u_primed = weighted_norm(u, op.window, primed=True)
    bound = 42 / op.cone.sigma * fm_norm
    X_plus = X.replace(f=plus)
    bounds = {
        "shift_bound": u_primed <= bound * (1 + 1e-9) + 1e-300,
        "shift_norm_primed": u_primed,
        "shift_bound_value": bound,
        "within_epsilon": bool(within),
    }
    return EliminationResult(u, X_plus, defects, method, residual, max_far, order, bounds, inner)


# --------------------------------------------------------------------------
# conjugacy on the torus


class TorusMap:
    """Map ``x -> x + g(x)`` of the torus with ``g`` stored as a trigonometric interpolant.

    Parameters
    ----------
    coeffs : ndarray
        ``(d,) + (n,) * d`` complex Fourier coefficients of ``g`` in FFT
        layout (``g(x) = sum_k c_k exp(2 pi i k.x)``).
    """

    def __init__(self, coeffs: np.ndarray):
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.d = self.coeffs.shape[0]
        self.n = self.coeffs.shape[1]
        freqs = np.fft.fftfreq(self.n, 1.0 / self.n)
        axes = np.meshgrid(*([freqs] * self.d), indexing="ij")
        self._k = np.stack([a.reshape(-1) for a in axes], axis=1)
        c = self.coeffs.reshape(self.d, -1).copy()
        if self.n % 2 == 0:
            # split Nyquist modes evenly so the interpolant stays real
            nyq = np.any(np.abs(self._k) == self.n // 2, axis=1)
            c[:, nyq] = 0.0
        self._c = c

    @classmethod
    def identity(cls, d: int, n: int = 8) -> "TorusMap":
        return cls(np.zeros((d,) + (n,) * d, dtype=complex))

    @classmethod
    def fit(cls, values: np.ndarray) -> "TorusMap":
        """From samples ``(d,) + (n,) * d`` of ``g`` on the uniform grid."""
        d = values.shape[0]
        axes = tuple(range(1, d + 1))
        return cls(np.fft.fftn(values, axes=axes) / values[0].size)

    def periodic(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], self.d), dtype=complex)
        for s in range(0, x.shape[0], 1024):
            ph = np.exp(2j * math.pi * (x[s : s + 1024] @ self._k.T))
            out[s : s + 1024] = ph @ self._c.T
        return out.real

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x + self.periodic(x)

    def jacobian(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros((x.shape[0], self.d, self.d))
        for s in range(0, x.shape[0], 1024):
            ph = np.exp(2j * math.pi * (x[s : s + 1024] @ self._k.T))
            for b in range(self.d):
                out[s : s + 1024, :, b] = (ph @ (self._c * (2j * math.pi * self._k[:, b])).T).real
        return out + np.eye(self.d)

    def sup_periodic(self) -> float:
        return float(np.abs(self._c).sum(axis=1).max())

    def reality_defect(self) -> float:
        axes = tuple(range(1, self.d + 1))
        flipped = np.roll(np.flip(self.coeffs, axis=axes), 1, axis=axes)
        return float(np.abs(self.coeffs - np.conj(flipped)).max())

    def to_json(self, tol: float = 0.0):
        terms = []
        for idx in np.argwhere(np.any(np.abs(self.coeffs) > tol, axis=0)):
            k = [int(v) if v <= self.n // 2 else int(v) - self.n for v in idx]
            vec = self.coeffs[(slice(None),) + tuple(idx)]
            terms.append({"k": k, "re": [repr(float(z.real)) for z in vec], "im": [repr(float(z.imag)) for z in vec]})
        terms.sort(key=lambda e: e["k"])
        return {"d": self.d, "grid": self.n, "terms": terms}


@dataclass
class ConjugacyResult:
    """Conjugacy of the input family to the linear flow.

    Attributes
    ----------
    h : TorusMap
    p : ndarray
        Parameter ``p^s`` at ``s`` for the input family ``v + p``.
    p_internal : ndarray
        The same parameter in the coordinates ``y`` of the renormalized fields.
    p_curve : ndarray
        Chebyshev coefficients of ``s -> p^s`` on ``|s| <= s_max`` (rows per
        coordinate).
    s : float
    s_max : float
    residual_report : dict
    """

    h: TorusMap
    p: np.ndarray
    p_internal: np.ndarray
    p_curve: np.ndarray
    s: float
    s_max: float
    residual_report: dict

    def to_json(self):
        return {
            "s": repr(self.s),
            "p": [repr(float(x)) for x in self.p],
            "p_internal": [repr(float(x)) for x in self.p_internal],
            "p_curve": {"s_max": repr(self.s_max), "chebyshev": [[repr(float(x)) for x in row] for row in self.p_curve]},
            "h": self.h.to_json(),
            "residual": {k: (repr(v) if isinstance(v, float) else v) for k, v in self.residual_report.items()},
        }


@dataclass
class VfRenormState:
    """Record of one renormalization step.

    ``X`` is the field after elimination; ``P`` the cumulative transfer
    matrix; ``Phi`` the parameter map applied when entering this step
    (``None`` at step 0); ``u`` the eliminating angle shift.
    """

    n: int
    X: VectorFieldSeries
    window: AnalyticityWindow
    theta: float
    cutoff_factor: float
    B_script: float
    perturbation_norm: float
    P: UnimodularMatrix
    Phi: ParameterMap | None
    u: TorusSeries
    elimination: EliminationResult
    rescale: RescaleReport | None = None
    parameter_report: dict | None = None

    def to_record(self) -> dict:
        el = self.elimination
        rec = {
            "n": self.n,
            "rho": repr(self.window.rho),
            "r": [repr(x) for x in self.window.r],
            "theta": repr(self.theta),
            "cutoff_factor": repr(self.cutoff_factor),
            "B_script": repr(self.B_script),
            "perturbation_norm": repr(self.perturbation_norm),
            "P": [[str(x) for x in r] for r in self.P.entries],
            "elimination": {
                "method": el.method,
                "defects": [repr(x) for x in el.defects],
                "order": None if el.order is None else repr(el.order),
                "residual": repr(el.residual),
                "max_far_coefficient": repr(el.max_far_coefficient),
                "shift_norm_primed": repr(el.bounds["shift_norm_primed"]),
                "shift_bound": el.bounds["shift_bound"],
                "within_epsilon": el.bounds["within_epsilon"],
            },
            "truncation_loss": repr(self.X.f.loss),
        }
        if self.rescale is not None:
            r = self.rescale
            rec["rescale"] = {
                "rho_prime": repr(r.rho_prime), "rho_cut": repr(r.rho_cut), "norm_in": repr(r.norm_in),
                "norm_out_primed": repr(r.norm_out_primed), "norm_bound": repr(r.norm_bound),
                "truncation_loss": repr(r.truncation_loss), "cutoff_ok": r.cutoff_ok,
            }
        return rec


@dataclass
class VfRun:
    """States of a run plus the assembled conjugacy and run-level checks."""

    states: list
    conjugacy: ConjugacyResult
    budget: Budget
    calibrated_K: float
    envelope_ok: bool
    input_norm: float
    cf_steps: list


# --------------------------------------------------------------------------
# full run


def _input_field(v, omega: np.ndarray, trunc: Truncation) -> TorusSeries:
    if isinstance(v, VectorFieldSeries):
        v = v.full()
    if not isinstance(v, TorusSeries) or v.ncomp != trunc.d:
        raise InvalidArgument("input field must be a d-component series")
    if v.trunc != trunc:
        raise InvalidArgument("input field truncation does not match the configuration")
    if np.any(v.taylor_cut(1).c != 0):
        raise InvalidArgument("input field must not depend on the parameter")
    return v - TorusSeries.polynomial(trunc, {(0,) * trunc.d: omega}, ncomp=trunc.d)


def _radii(step: CFStep, sigma: float, b: float):
    M = step.M_red.as_array()
    return sigma * (0.5 - b) * abs(float(step.gamma_n)) / row_norm(M)


def renorm_run(v, alpha: FrequencyVector, config: VfRenormConfig, n_max: int | None = None, *, s: float = 0.0, grid_exp: int | None = None) -> VfRun:
    """Renormalize the family ``v + p`` and assemble the conjugacy.

    Parameters
    ----------
    v : TorusSeries
        ``d``-component field on the torus (no parameter dependence).
    alpha : FrequencyVector
        ``omega = (alpha, 1)``.
    config : VfRenormConfig
    n_max : int, optional
        Number of renormalization steps; defaults to ``schedule.n_max - 1``.
    s : float
        Position on the parameter curve at which ``h`` is assembled.
    grid_exp : int, optional
        ``h`` is sampled on a ``2**grid_exp`` grid per axis (default 6 for
        ``d = 2``, 4 otherwise).

    Returns
    -------
    VfRun
    """
    d = alpha.d
    trunc = config.truncation(d)
    n_max = config.schedule.n_max - 1 if n_max is None else n_max
    if config.schedule.n_max < n_max + 1:
        raise InvalidArgument("schedule must provide one step beyond n_max")
    cf = continued_fraction_run(alpha, config.schedule)
    steps = list(cf.steps)
    budget = contraction_budget(steps[: n_max + 2], config.nu, config.delta, config.lam)
    omega = step_base(steps[0]).omega
    f = _input_field(v, omega, trunc)

    rho0 = config.rho0
    if rho0 is None:
        rho0 = (budget.B_script[-1] if budget.B_script else 0.0) + config.nu + 1.0
    b = config.b0
    r = (_radii(steps[0], steps[0].sigma, b), b)
    X = VectorFieldSeries(f, AnalyticityWindow(min(rho0, config.solver_rho(trunc)), r), step_base(steps[0]))
    input_norm = weighted_norm(X.f, X.window)
    rho = rho0

    states = []
    for n in range(n_max + 1):
        st = steps[n]
        cone = ResonanceCone(st.alpha_n, st.sigma)
        rescale = prep = Phi = None
        if n >= 1:
            prev = states[-1]
            prev_step = steps[n - 1]
            # radii sized for the measured zero mode
            mu = weighted_norm(prev.X.f.zero_mode(), prev.window)
            g_prev = abs(float(prev_step.gamma_n)) * row_norm(np.linalg.inv(prev_step.M_red.as_array()))
            b_new = prev.window.r[1] - (1 + g_prev) * mu
            a_new = min(
                _radii(st, st.sigma, b_new),
                math.exp(d * float(st.dt)) * (prev.window.r[0] - (1 + g_prev) * mu),
            )
            if not (a_new > 0 and b_new > 0):
                raise DomainError(f"parameter radii exhausted at step {n}", a=a_new, b=b_new)
            X, Phi, rescale, prep = rescale_step(prev.X, prev_step, st, config, (a_new, b_new), budget.cutoff[n], rho_prev=rho)
            rho = rescale.rho_next
        result = eliminate(X, cone, config.elimination, permissive=config.permissive, nu=config.nu)
        Xn = result.X_plus
        pert = weighted_norm(Xn.f, Xn.window)
        states.append(
            VfRenormState(
                n=n, X=Xn, window=AnalyticityWindow(rho, Xn.window.r), theta=budget.theta[n], cutoff_factor=budget.cutoff[n],
                B_script=budget.B_script[n - 1] if 1 <= n <= len(budget.B_script) else 0.0,
                perturbation_norm=pert, P=st.P, Phi=Phi, u=result.u, elimination=result,
                rescale=rescale, parameter_report=prep,
            )
        )

    # one constant calibrated at step 0 must bound every later step
    K = states[0].perturbation_norm / (budget.theta[0] * input_norm) if input_norm > 0 else 0.0
    floor = 1e-15 * max(1.0, float(np.abs(omega).sum()))
    envelope_ok = all(st.perturbation_norm <= K * st.theta * input_norm * (1 + 1e-9) + floor for st in states)

    conj = assemble_conjugacy(v, states, steps, s=s, grid_exp=grid_exp)
    return VfRun(states, conj, budget, K, envelope_ok, input_norm, steps[: n_max + 2])


def parameter_curve_point(states, s: float) -> list:
    """Parameter of each state along the curve, in that state's coordinates.

    The last state sits at ``(0, ..., 0, s)``; earlier values follow by
    applying the recorded parameter maps.
    """
    d = states[0].X.f.d
    p = np.zeros(d)
    p[-1] = s
    out = [p]
    for st in reversed(states[1:]):
        p = np.real_if_close(st.Phi(p)[0]).real
        out.append(p)
    return out[::-1]


def _level_values(states, pts, x_int, N):
    """Evaluate ``H_N = W_0 o ... o W_N`` and its Jacobian on the grid ``x_int / N``."""
    d = x_int.shape[1]
    P_count = x_int.shape[0]
    disp = np.zeros((P_count, d))
    jac = np.tile(np.eye(d), (P_count, 1, 1))
    for n in range(len(states) - 1, -1, -1):
        st = states[n]
        if st.u.is_zero():
            continue
        Pm = np.array(st.P.entries, dtype=np.int64)
        Pinv = np.linalg.inv(Pm.astype(float))
        base = np.mod(x_int @ Pm.T, N) / N
        arg = base + disp @ Pm.T.astype(float)
        y = np.tile(pts[n], (P_count, 1))
        un = st.u.evaluate(arg, y).real
        Du = np.zeros((P_count, d, d))
        for a in range(d):
            for b_ in range(d):
                Du[:, a, b_] = st.u.component(a).dx(b_).evaluate(arg, y)[:, 0].real
        disp = disp + un @ Pinv.T
        # D W_n = I + P^{-1} Du(P z) P, applied to the inner Jacobian
        DW = np.eye(d) + np.einsum("ij,pjk,kl->pil", Pinv, Du, Pm.astype(float))
        jac = np.einsum("pij,pjk->pik", DW, jac)
    return disp, jac


def assemble_conjugacy(v, states, steps, *, s: float = 0.0, grid_exp: int | None = None, s_max: float | None = None) -> ConjugacyResult:
    """Compose the angle changes of a run into ``h`` and compute ``p^s``."""
    d = states[0].X.f.d
    m = (6 if d == 2 else 4) if grid_exp is None else grid_exp
    N = 2**m
    pts = parameter_curve_point(states, s)
    M0 = steps[0].M_red.as_array()
    axes = np.meshgrid(*([np.arange(N)] * d), indexing="ij")
    x_int = np.stack([a.reshape(-1) for a in axes], axis=1).astype(np.int64)
    disp, jac = _level_values(states, pts, x_int, N)
    values = disp.T.reshape((d,) + (N,) * d)
    h = TorusMap.fit(values.astype(complex))
    p_int = pts[0]
    p = M0 @ p_int

    b_min = min(st.window.r[1] for st in states)
    s_max = 0.5 * b_min if s_max is None else s_max
    nodes = np.cos(np.pi * (np.arange(9) + 0.5) / 9)
    samples = np.array([M0 @ parameter_curve_point(states, s_max * z)[0] for z in nodes])
    cheb = np.array([np.polynomial.chebyshev.chebfit(nodes, samples[:, i], 8) for i in range(d)])

    omega = step_base(steps[0]).omega
    x = x_int / N
    report = conjugacy_residual(v, h, p, omega, s, N)
    # the same residual with the exactly composed Jacobian instead of the fit
    vf = _field_evaluator(v)
    exact = np.abs(np.einsum("pij,j->pi", jac, (1 + s) * omega) - (vf(x + disp) + p)).max()
    report["max_direct"] = float(exact)
    report["periodic_sup"] = h.sup_periodic()
    report["reality_defect"] = h.reality_defect()
    return ConjugacyResult(h, p, p_int, cheb, s, s_max, report)


def _field_evaluator(v):
    if callable(v) and not isinstance(v, (TorusSeries, VectorFieldSeries)):
        return lambda x: np.asarray(v(x), dtype=float)
    series = v.full() if isinstance(v, VectorFieldSeries) else v
    return lambda x: series.evaluate(x).real


def residual_points(v, h, p, omega, s: float, grid: int):
    """Grid points, pointwise max-abs conjugacy residual and Jacobian determinants."""
    omega = np.asarray(omega, dtype=float)
    d = len(omega)
    axes = np.meshgrid(*([np.arange(grid) / grid] * d), indexing="ij")
    x = np.stack([a.reshape(-1) for a in axes], axis=1)
    J = h.jacobian(x)
    vf = _field_evaluator(v)
    res = np.abs(np.einsum("pij,j->pi", J, (1 + s) * omega) - (vf(h(x)) + np.asarray(p))).max(axis=1)
    return x, res, np.linalg.det(J)


def conjugacy_residual(v, h, p, omega, s: float, grid: int) -> dict:
    """Residual of ``Dh(x) (1 + s) omega = (v + p)(h(x))`` on a uniform grid.

    Parameters
    ----------
    v : TorusSeries or callable
        Field on the torus; a callable maps ``(P, d)`` points to values.
    h : TorusMap
    p : array
    omega : array
    s : float
    grid : int
        Points per axis.

    Returns
    -------
    dict
        ``max`` and ``mean`` of the max-abs residual over the grid and the
        number of samples whose Jacobian determinant is below ``1e-8``.
    """
    _, res, dets = residual_points(v, h, p, omega, s, grid)
    return {"max": float(res.max()), "mean": float(res.mean()), "singular_samples": int(np.sum(np.abs(dets) < 1e-8)), "grid": int(grid)}
