"""Renormalization of nearly integrable Hamiltonians and invariant tori.

A Hamiltonian ``H(x, y) = omega_n . y + y.Q_n y / 2 + F(x, y)`` is
renormalized step by step:

* the zero Fourier mode ``F0(y)`` is handled by moving the action origin to
  the critical point ``b`` of ``H0 + F0`` and by absorbing its Hessian into
  ``Q``,
* a symplectic change of basis ``(x, y) -> (T^{-1} x, mu T^T y + b)`` with
  energy rescaled by ``eta / mu``,
* the far-from-resonance modes are removed by a quadratically convergent
  sequence of Lie transforms.

Composing the maps of a run and evaluating on the final torus gives the
invariant torus ``gamma`` of the input Hamiltonian.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AnalyticityExhausted,
    ConfigError,
    DomainError,
    EliminationFailure,
    InvalidArgument,
    NondegeneracyError,
    ScheduleError,
)
from .lattice_flow import FrequencyVector, Schedule, UnimodularMatrix, continued_fraction_run
from .renorm_vf import TorusMap, step_base
from .torus_field import (
    AnalyticityWindow,
    FlatBase,
    HamiltonianSeries,
    ResonanceCone,
    TorusSeries,
    Truncation,
    affine_ymap,
    compose_with_shift,
    project_resonant,
    pullback_linear,
    small_divisor_inverse,
    weighted_norm,
)

def op_norm(A) -> float:
    """Spectral norm of a real matrix."""
    return float(np.linalg.norm(np.asarray(A, dtype=float), 2))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class HamEliminationConfig:
    """Settings of the Lie-transform elimination.

    ``tol`` is an absolute target for the far-mode norm; ``max_iter`` bounds
    the number of Lie transforms.  The generator equation is solved by a
    Neumann iteration to ``neumann_tol`` relative accuracy.
    """

    tol: float = 1e-14
    max_iter: int = 8
    neumann_tol: float = 1e-13
    neumann_max: int = 60

    def __post_init__(self):
        if not (self.tol > 0 and self.neumann_tol > 0) or self.max_iter < 1 or self.neumann_max < 1:
            raise InvalidArgument("elimination tolerances and iteration counts must be positive")


@dataclass(frozen=True)
class HamRenormConfig:
    """Parameters of a Hamiltonian renormalization run.

    Attributes
    ----------
    schedule : Schedule
        Must provide one step beyond the run.
    nu, delta : float
        Strip margins.
    r, r_prime : float
        Action radii with ``r < r_prime``; ``sigma_0 > 2 r' |Q|`` is checked
        against the input's ``Q`` by :meth:`check_base`.
    mu : float, optional
        Fixed action scaling, overriding ``mu_rule``.
    mu_rule : {"domain", "budget"}
        ``"domain"`` uses the largest scaling allowed by the domain
        condition, ``min(1, r / (8 r' |T^T|))``; ``"budget"`` derives it
        from the ratio of consecutive contraction budgets.
    rho0 : float, optional
        Initial strip width; by default the analyticity budget plus ``nu + 1``.
    working_rho : float, optional
        Strip width of the norm used by the solvers, default ``2.4 / K``.
    """

    schedule: Schedule
    nu: float = 0.5
    delta: float = 0.5
    r: float = 0.04
    r_prime: float = 0.06
    elimination: HamEliminationConfig = field(default_factory=HamEliminationConfig)
    K: int | None = None
    D: int = 3
    mu: float | None = None
    mu_rule: str = "budget"
    rho0: float | None = None
    permissive: bool = False
    working_rho: float | None = None

    def __post_init__(self):
        if self.mu_rule not in ("domain", "budget"):
            raise InvalidArgument(f"unknown mu rule {self.mu_rule!r}")
        if not (self.nu > 0 and self.delta > 0):
            raise InvalidArgument("nu and delta must be positive")
        if not 0 < self.r < self.r_prime:
            raise InvalidArgument("radii must satisfy 0 < r < r'")
        if self.mu is not None and not 0 < self.mu <= 1:
            raise InvalidArgument("mu must lie in (0, 1]")

    def truncation(self, d: int) -> Truncation:
        return Truncation.default(d, self.K, self.D)

    def solver_rho(self, trunc: Truncation) -> float:
        return self.working_rho if self.working_rho is not None else 2.4 / trunc.K

    def check_base(self, Q) -> None:
        """Raise :class:`ConfigError` unless ``sigma_0 > 2 r' |Q|``."""
        s0 = self.schedule.initial_sigma()
        bound = 2 * self.r_prime * op_norm(Q)
        if not s0 > bound:
            raise ConfigError(
                f"cone aperture {s0:.4g} must exceed 2 r' |Q| = {bound:.4g}; reduce r' or widen the cone",
                sigma0=s0, bound=bound,
            )

    def step_mu(self, T) -> float:
        """Action scaling of the domain rule (or the fixed override)."""
        if self.mu is not None:
            return self.mu
        return min(1.0, self.r / (8 * self.r_prime * op_norm(np.asarray(T, dtype=float).T)))


def _smallness(message, permissive, **details):
    if permissive:
        warnings.warn(message, RuntimeWarning, stacklevel=3)
        return False
    raise DomainError(message + " (use permissive mode to proceed)", **details)


def h0_norm(base: FlatBase, radius: float) -> float:
    """Coefficient norm of ``omega . y + y.Q y / 2`` on the polydisc of ``radius``."""
    Q = base.linear
    quad = 0.5 * np.abs(np.diag(Q)).sum() + np.abs(np.triu(Q, 1)).sum()
    return float(np.abs(base.omega).sum() * radius + quad * radius**2)


# --------------------------------------------------------------------------
# shift of the action origin


def _grad_at(series: TorusSeries, y) -> np.ndarray:
    """Gradient in ``y`` of the zero Fourier mode of a scalar series at ``y``."""
    f0 = series.zero_mode()
    pt = np.atleast_2d(np.asarray(y, dtype=float))
    return f0.grad_y().evaluate(np.zeros_like(pt), pt)[0].real


def _hessian_at(series: TorusSeries, y) -> np.ndarray:
    f0 = series.zero_mode()
    d = series.d
    pt = np.atleast_2d(np.asarray(y, dtype=float))
    out = np.zeros((d, d))
    for i in range(d):
        out[i] = f0.dy(i).grad_y().evaluate(np.zeros_like(pt), pt)[0].real
    return 0.5 * (out + out.T)


def solve_shift(H: HamiltonianSeries, *, r: float | None = None, tol: float = 1e-15, max_iter: int = 200):
    """Critical point ``b`` of ``H0 + F0``: ``Q b + grad F0(b) = 0``.

    Found by the contraction ``b <- -Q^{-1} grad F0(b)``.

    Parameters
    ----------
    H : HamiltonianSeries
    r : float, optional
        Action radius; defaults to the window's.  ``|F0|`` must stay below
        ``r^2 / (16 |Q^{-1}|)`` and the result below ``r / 8``.

    Returns
    -------
    b : ndarray
    report : dict
        Residual, contraction estimate and the smallness threshold.

    Raises
    ------
    DomainError
        When the iteration does not contract or ``|b| >= r / 8``.
    """
    r = H.window.r if r is None else r
    Q = H.Q
    Qinv = np.linalg.inv(Q)
    f0 = H.f.zero_mode()
    threshold = r**2 / (16 * op_norm(Qinv))
    size = weighted_norm(f0, AnalyticityWindow(H.window.rho, r))
    b = np.zeros(H.f.d)
    if f0.is_zero():
        return b, {"residual": 0.0, "threshold": threshold, "f0_norm": 0.0, "iterations": 0}
    prev_step = math.inf
    for it in range(1, max_iter + 1):
        nb = -Qinv @ _grad_at(H.f, b)
        step = float(np.abs(nb - b).max())
        b = nb
        if step <= tol * max(1.0, float(np.abs(b).max())):
            break
        if it > 3 and step > prev_step:
            raise DomainError("action shift iteration does not contract", f0_norm=size, threshold=threshold)
        prev_step = step
    residual = float(np.abs(Q @ b + _grad_at(H.f, b)).max())
    if not np.abs(b).max() < r / 8:
        raise DomainError("action shift leaves the admissible ball", b=b.tolist(), limit=r / 8)
    return b, {"residual": residual, "threshold": threshold, "f0_norm": size, "iterations": it}


# --------------------------------------------------------------------------
# symplectic rescaling


@dataclass
class HamRescaleReport:
    b: np.ndarray
    mu: float
    Q: np.ndarray
    hessian: np.ndarray
    remainder_norm: float
    truncation_loss: float
    shift_report: dict
    rho_prime: float
    rho_next: float


def symplectic_rescale(
    H: HamiltonianSeries,
    step,
    config: HamRenormConfig,
    *,
    mu: float | None = None,
    rho_prev: float | None = None,
    cutoff_factor: float = 1.0,
):
    """Apply ``(x, y) -> (T^{-1} x, mu T^T y + b)`` and scale energy by ``eta / mu``.

    The constant term is dropped, the linear term becomes ``omega_n . y``
    and the quadratic part becomes
    ``Q_n = eta mu T (Q + D^2 F0(b)) T^T``.  The degree-three-and-higher
    Taylor part of ``F0`` about ``b`` stays in the perturbation.

    Returns
    -------
    HamiltonianSeries, HamRescaleReport
    """
    trunc = H.f.trunc
    T = step.T.as_array()
    eta = float(step.eta_n)
    mu = config.step_mu(T) if mu is None else mu
    rho_prev = H.window.rho if rho_prev is None else rho_prev
    rho_prime = rho_prev / step.A_n - config.delta
    rho_next = rho_prime - math.log(cutoff_factor) - config.nu
    if rho_next <= 0:
        raise AnalyticityExhausted(f"strip budget exhausted at step {step.n}", rho_prime=rho_prime, rho_next=rho_next)

    b, shift_report = solve_shift(H, r=config.r)
    hess = _hessian_at(H.f, b)
    Q_new = eta * mu * T @ (H.Q + hess) @ T.T
    Q_new = 0.5 * (Q_new + Q_new.T)

    ymap = affine_ymap(trunc, mu * T.T, b)
    moved, loss = pullback_linear(H.f, step.T, ymap)
    # keep the nonconstant modes and the cubic-and-higher Taylor part of the zero mode
    zero = moved.zero_mode()
    remainder = zero.taylor_cut(3)
    new_f = (moved - zero + remainder).scale(eta / mu)
    if H.f.is_real(1e-12):
        new_f = new_f.real_part()

    base = FlatBase(step_base(step).omega, Q_new)
    work = config.solver_rho(trunc)
    out = HamiltonianSeries(new_f, AnalyticityWindow(min(rho_next, work), config.r), base)
    rem_norm = weighted_norm(remainder.scale(eta / mu), AnalyticityWindow(work, config.r))
    return out, HamRescaleReport(b, mu, Q_new, hess, rem_norm, loss, shift_report, rho_prime, rho_next)


# --------------------------------------------------------------------------
# Lie transforms


def poisson_bracket(A: TorusSeries, B: TorusSeries) -> TorusSeries:
    """``{A, B} = grad_x A . grad_y B - grad_y A . grad_x B``."""
    return A.grad_x().dot(B.grad_y()) - A.grad_y().dot(B.grad_x())


def _h0_series(H: HamiltonianSeries) -> TorusSeries:
    return H.base.hamiltonian_series(H.f.trunc)


def generator_solve(H: HamiltonianSeries, cone: ResonanceCone, tol: float = 1e-13, max_iter: int = 60):
    """Generator ``G`` on the far set with ``I^-(H + {H, G}) = 0``.

    With ``{H0, G} = -D0 G`` for ``D0 = (omega + Q y) . grad_x`` the
    equation reads ``G = D0^{-1} I^-(F + {F, G})``, solved by Neumann
    iteration.

    Returns
    -------
    G : TorusSeries
    report : dict
        Iteration count, relative residual and contraction ratio.

    Raises
    ------
    EliminationFailure
        When the Neumann iteration does not contract.
    """
    F = H.f
    minus = lambda s: project_resonant(s, cone)[1]  # noqa: E731
    rhs = minus(F)
    window = H.window
    scale = weighted_norm(rhs, window)
    if rhs.is_zero():
        return TorusSeries.zeros(F.trunc), {"iterations": 0, "residual": 0.0, "ratio": 0.0}
    G = small_divisor_inverse(rhs, H.base, cone, window)
    prev = None
    ratio = 0.0
    for it in range(1, max_iter + 1):
        nG = small_divisor_inverse(minus(F + poisson_bracket(F, G)), H.base, cone, window)
        change = weighted_norm(nG - G, window)
        if prev is not None and prev > 0:
            ratio = change / prev
            if ratio >= 1 and change > 1e-15 * scale:
                raise EliminationFailure("generator iteration diverges: perturbation too large for the cone", ratio=ratio)
        G = nG
        if change <= tol * max(weighted_norm(G, window), 1e-300) or change == 0:
            break
        prev = change
    full = _h0_series(H) + F
    residual = weighted_norm(minus(full + poisson_bracket(full, G)), window)
    return G, {"iterations": it, "residual": residual / scale, "ratio": ratio}


class LieMap:
    """Symplectic map ``(x, y) -> (x + grad_y G(x, Y), Y)`` with ``Y = y - grad_x G(x, Y)``.

    This is the map with mixed generating function ``x . Y + G(x, Y)``; to
    first order it is ``id + J grad G`` with ``J(x, y) = (y, -x)``.
    """

    def __init__(self, G: TorusSeries):
        self.G = G
        self.gx = G.grad_x()
        self.gy = G.grad_y()
        d = G.d
        self._hxx = [[G.dx(i).dx(j) for j in range(d)] for i in range(d)]
        self._hxy = [[G.dx(i).dy(j) for j in range(d)] for i in range(d)]
        self._hyy = [[G.dy(i).dy(j) for j in range(d)] for i in range(d)]

    def _solve_Y(self, x, y, tol=1e-16, max_iter=100):
        Y = y.copy()
        for _ in range(max_iter):
            nY = y - self.gx.evaluate(x, Y).real
            if np.abs(nY - Y).max() <= tol * max(1.0, np.abs(Y).max()):
                return nY
            Y = nY
        return Y

    def __call__(self, x, y):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if self.G.is_zero():
            return x.copy(), y.copy()
        Y = self._solve_Y(x, y)
        return x + self.gy.evaluate(x, Y).real, Y

    def _second(self, table, x, Y):
        d = len(table)
        out = np.zeros((x.shape[0], d, d))
        for i in range(d):
            for j in range(d):
                out[:, i, j] = table[i][j].evaluate(x, Y)[:, 0].real
        return out

    def jacobian(self, x, y):
        """Jacobian ``(P, 2d, 2d)`` by implicit differentiation of the ``Y`` equation."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        P, d = x.shape
        Y = self._solve_Y(x, y)
        Gxx = self._second(self._hxx, x, Y)
        Gxy = self._second(self._hxy, x, Y)  # [i, j] = d_xi d_yj G
        Gyy = self._second(self._hyy, x, Y)
        eye = np.broadcast_to(np.eye(d), (P, d, d))
        A = np.linalg.inv(eye + Gxy)
        dY_dx = -A @ Gxx
        dY_dy = A
        Gyx = np.transpose(Gxy, (0, 2, 1))
        dX_dx = eye + Gyx + Gyy @ dY_dx
        dX_dy = Gyy @ dY_dy
        top = np.concatenate([dX_dx, dX_dy], axis=2)
        bot = np.concatenate([dY_dx, dY_dy], axis=2)
        return np.concatenate([top, bot], axis=1)

    def symplecticity_defect(self, x, y) -> float:
        """``max |Dg^T J Dg - J|`` at the given points."""
        Dg = self.jacobian(x, y)
        d = Dg.shape[1] // 2
        Jm = np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])
        return float(np.abs(np.transpose(Dg, (0, 2, 1)) @ Jm @ Dg - Jm).max())


def lie_transform(H: HamiltonianSeries, G: TorusSeries, *, max_iter: int = 60):
    """Transform ``H`` by the symplectic map generated by ``G``.

    Returns
    -------
    g : LieMap
    H_new : HamiltonianSeries
        ``H o g``.
    report : dict
        ``second_order``: norm of ``H o g - H - {H, G}``.

    Raises
    ------
    EliminationFailure
        When the action equation does not contract (``G`` too large).
    """
    g = LieMap(G)
    if G.is_zero():
        return g, H, {"second_order": 0.0, "action_iterations": 0}
    gx, gy = g.gx, g.gy
    # action shift w with Y = y + w solves w = -grad_x G(x, y + w)
    w = -gx
    scale = max(w.l1(), 1e-300)
    prev = math.inf
    for it in range(1, max_iter + 1):
        nw = -compose_with_shift(gx, w=w)
        change = (nw - w).l1()
        w = nw
        if change <= 1e-16 * scale:
            break
        if change > prev and change > 1e-13 * scale:
            raise EliminationFailure("generator too large: action equation does not contract", change=change)
        prev = change
    u = compose_with_shift(gy, w=w)
    # H0 is quadratic in y, so its composition is exact: H0(y + w)
    Q = H.Q
    omega_t = TorusSeries.polynomial(H.f.trunc, {(0,) * H.f.d: H.base.omega}, ncomp=H.f.d)
    y_series = TorusSeries.polynomial(
        H.f.trunc, {tuple(int(i == v) for i in range(H.f.d)): np.eye(H.f.d)[:, v] for v in range(H.f.d)}, ncomp=H.f.d
    )
    Qw = w.linear_map(Q)
    h0_shift = omega_t.dot(w) + y_series.dot(Qw) + w.dot(Qw).scale(0.5)
    new_f = compose_with_shift(H.f, u, w) + h0_shift
    if H.f.is_real(1e-12):
        new_f = new_f.real_part()
    H_new = H.replace(f=new_f)
    full = _h0_series(H) + H.f
    second = weighted_norm(new_f - H.f - poisson_bracket(full, G), H.window)
    return g, H_new, {"second_order": second, "action_iterations": it}


# --------------------------------------------------------------------------
# elimination


@dataclass
class HamEliminationResult:
    """Outcome of the Lie-transform elimination.

    ``maps`` are applied right to left: ``H_plus = H o maps[0] o maps[1] ...``.
    """

    maps: list
    H_plus: HamiltonianSeries
    defects: list
    generator_norms: list
    symplecticity: list
    epsilon_prime: float
    envelope_ok: bool
    residual_max_mode: float
    reports: list

    def __call__(self, x, y):
        for g in reversed(self.maps):
            x, y = g(x, y)
        return x, y


def ham_epsilon(sigma: float, base: FlatBase, config: HamRenormConfig, tau: float | None) -> float:
    """Smallness bound for the elimination to apply."""
    m = min(1.0, config.nu / (2 * math.pi), config.r_prime - config.r)
    tau = 0.0 if tau is None else tau
    return sigma**2 * m**2 / (48 * h0_norm(base, config.r_prime) * (2 * math.pi + 1) ** 2 * (1 + 2 * math.pi + (tau + 1) / config.r_prime) ** 2)


def eliminate_ham(H: HamiltonianSeries, cone: ResonanceCone, config: HamRenormConfig, *, samples: int = 16, seed: int = 0):
    """Remove the far-from-resonance modes of ``H`` by successive Lie transforms.

    Each iteration solves for a generator and transforms ``H``; the far
    norm then squares from one iteration to the next.

    Returns
    -------
    HamEliminationResult

    Raises
    ------
    EliminationFailure
        When the far norm stops decreasing quadratically before ``tol``.
    """
    ec = config.elimination
    m = min(1.0, config.nu / (2 * math.pi), config.r_prime - config.r)
    tau = cone.tau if cone.tau is not None else 0.0
    eps_prime = min(
        0.5 * h0_norm(H.base, config.r),
        cone.sigma * m / 2 / ((2 * math.pi + 1) * (1 + 2 * math.pi + (tau + 1) / config.r_prime)),
    )
    eps = ham_epsilon(cone.sigma, H.base, config, cone.tau)
    size = weighted_norm(H.f, H.window, primed=True)
    if not size < eps:
        _smallness(f"perturbation {size:.3g} exceeds the elimination bound {eps:.3g}", config.permissive, perturbation=size, epsilon=eps)

    rng = np.random.default_rng(seed)
    d = H.f.d
    px = rng.random((samples, d))
    py = config.r * 0.5 * (2 * rng.random((samples, d)) - 1)

    minus = lambda s: project_resonant(s, cone)[1]  # noqa: E731
    defects = [weighted_norm(minus(H.f), H.window)]
    Hfull = weighted_norm(_h0_series(H) + H.f, H.window)
    seed_defect = defects[0]
    maps, gnorms, symp, reports = [], [], [], []
    current = H
    while defects[-1] > ec.tol:
        if len(maps) >= ec.max_iter:
            raise EliminationFailure("far modes not removed within the iteration limit", defects=defects)
        G, grep = generator_solve(current, cone, ec.neumann_tol, ec.neumann_max)
        g, current, lrep = lie_transform(current, G)
        maps.append(g)
        gnorms.append(weighted_norm(G, current.window, primed=True))
        symp.append(g.symplecticity_defect(px, py))
        reports.append({**grep, **lrep})
        defects.append(weighted_norm(minus(current.f), current.window))
        k = len(maps)
        if k >= 2 and defects[-1] > 0.5 * defects[-2]:
            if defects[-1] <= max(ec.tol, 1e-15 * Hfull) * 10:
                break
            raise EliminationFailure("far-mode elimination stalled", iteration=k, defects=defects, generator_norms=gnorms)

    # quadratic envelope with the measured constants
    base = 4 * Hfull / eps_prime**2
    envelope_ok = all(
        math.log(max(dk, 1e-300)) <= (2**k - 1) * math.log(base) + 2**k * math.log(max(seed_defect, 1e-300)) + 1e-9
        for k, dk in enumerate(defects)
    )
    plus, rest = project_resonant(current, cone)
    return HamEliminationResult(
        maps, plus, defects, gnorms, symp, eps_prime, envelope_ok, rest.f.max_abs(), reports,
    )


# --------------------------------------------------------------------------
# budget


@dataclass(frozen=True)
class HamBudget:
    theta: tuple
    epsilon: tuple
    tau: tuple
    mu: tuple
    cutoff: tuple
    B_script: tuple


def ham_budget(steps, Q0, config: HamRenormConfig) -> HamBudget:
    """Contraction budget, smallness bounds, cone exponents and cutoff factors.

    ``Q_n`` is predicted by ``eta mu T Q T^T`` (the recursion without zero
    modes); the strip width used in the cone exponent is ``config.rho0`` or
    the budget sum itself.
    """
    n_tot = len(steps) - 1
    rp, r = config.r_prime, config.r
    Q = np.asarray(Q0, dtype=float)
    mus, eps, taus, thetas, zetas = [1.0], [], [], [1.0], []
    B = [1.0]
    for n in range(1, n_tot + 1):
        B.append(B[-1] * steps[n].A_n)
    # the cone exponent needs rho0; use a provisional value, then the budget
    rho0 = config.rho0 if config.rho0 is not None else 1.0
    prod2 = prod3 = prod4 = 1.0
    Qs = [Q]
    for n in range(n_tot):
        s = steps[n]
        tau = None if n == 0 else 2 * rho0 * op_norm(np.linalg.inv(s.T.as_array()).T) / (B[n - 1] * math.log(2))
        if n == 0:
            e = ham_epsilon(s.sigma, FlatBase(step_base(s).omega, Q), config, tau)
        else:
            T = s.T.as_array()
            Ti = np.linalg.inv(T)
            eta = abs(float(s.eta_n))
            mu = config.step_mu(T)
            # the budget rule ties mu to Theta_n, which depends on mu through
            # |H0_n|; a few substitutions settle it
            for _ in range(1 if config.mu is not None or config.mu_rule == "domain" else 4):
                Qn = float(s.eta_n) * mu * T @ Q @ T.T
                base = FlatBase(step_base(s).omega, Qn)
                e = ham_epsilon(s.sigma, base, config, tau)
                zeta = (1 + math.sqrt(12 * h0_norm(base, rp) / e)) * (1 + 1 / (2 * rp)) * (rp / r) ** 3 * op_norm(T.T) ** 3
                p2 = prod2 * 2**6 * zeta**2 / (op_norm(T) ** 2 * op_norm(T.T) ** 2)
                p3 = prod3 * op_norm(Ti) ** 3
                p4 = prod4 * min(eta**-3, eta) / (2**10 * zeta**3 * op_norm(Ti) ** 2 * op_norm(Ti.T) ** 6)
                th = min(thetas[-1], s.sigma**2 / (4 * rp * op_norm(Q0)) ** 2 * p2, e**3 / p3, p4)
                if config.mu is None and config.mu_rule == "budget":
                    mu = math.sqrt(th / (2**8 * zeta * max(1.0, eta) * thetas[-1]))
                    if not mu > 1e-150:
                        raise ScheduleError(f"action scaling underflows at step {n}; lengthen the gaps", step=n, mu=mu)
            prod2, prod3, prod4, Q = p2, p3, p4, Qn
            zetas.append(zeta)
            thetas.append(th)
            mus.append(mu)
            Qs.append(Q)
        eps.append(e)
        taus.append(tau)
    cutoff = [1.0]
    for n in range(1, n_tot):
        s = steps[n]
        base = FlatBase(step_base(s).omega, Qs[n])
        fac = (
            2 * (1 + 2 * math.pi / config.delta + r / (2 * rp**2 * math.log(2)))
            * (1 + math.sqrt(12 * h0_norm(base, rp) / eps[n]))
            * abs(float(s.eta_n)) * thetas[n - 1] / (mus[n] * thetas[n])
        )
        cutoff.append(max(1.0, fac))
    Bs, total = [], 0.0
    for i in range(1, n_tot):
        total += B[i] * math.log(cutoff[i]) + (config.delta + config.nu) * B[i]
        Bs.append(total)
    return HamBudget(tuple(thetas[:n_tot]), tuple(eps), tuple(taus), tuple(mus), tuple(cutoff), tuple(Bs))


# --------------------------------------------------------------------------
# run and torus


@dataclass
class HamRenormState:
    """Record of one Hamiltonian renormalization step."""

    n: int
    H: HamiltonianSeries
    Q: np.ndarray
    mu: float
    chi: float
    lam: float
    b: np.ndarray
    theta: float
    window: AnalyticityWindow
    P: UnimodularMatrix
    T: UnimodularMatrix
    elimination: HamEliminationResult
    perturbation_norm: float
    rescale: HamRescaleReport | None = None

    def to_record(self) -> dict:
        el = self.elimination
        return {
            "n": self.n,
            "Q": [[repr(float(x)) for x in row] for row in self.Q],
            "Q_condition": repr(float(np.linalg.cond(self.Q))),
            "mu": repr(self.mu),
            "chi": repr(self.chi),
            "lambda": repr(self.lam),
            "b": [repr(float(x)) for x in self.b],
            "theta": repr(self.theta),
            "rho": repr(self.window.rho),
            "r": repr(self.window.r),
            "P": [[str(x) for x in row] for row in self.P.entries],
            "perturbation_norm": repr(self.perturbation_norm),
            "elimination": {
                "defects": [repr(x) for x in el.defects],
                "generator_norms": [repr(x) for x in el.generator_norms],
                "symplecticity": [repr(x) for x in el.symplecticity],
                "epsilon_prime": repr(el.epsilon_prime),
                "envelope_ok": el.envelope_ok,
            },
            "truncation_loss": repr(self.H.f.loss),
        }


@dataclass
class TorusResult:
    """Invariant torus ``gamma(x) = (x + g_x(x), a + g_y(x))``.

    ``x_map`` holds the angle part, ``y_map`` the periodic action part
    stored through the same interpolant (its ``periodic`` values).
    """

    a: np.ndarray
    x_map: TorusMap
    y_map: TorusMap
    residual_report: dict

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.x_map(x), self.y_map.periodic(x)

    def jacobian(self, x):
        """``(P, 2d, d)`` derivative of the embedding."""
        jx = self.x_map.jacobian(x)
        jy = self.y_map.jacobian(x) - np.eye(self.x_map.d)
        return np.concatenate([jx, jy], axis=1)

    def to_json(self):
        return {
            "a": [repr(float(v)) for v in self.a],
            "x_part": self.x_map.to_json(),
            "y_part": self.y_map.to_json(),
            "residual": {k: (repr(v) if isinstance(v, float) else v) for k, v in self.residual_report.items()},
        }


@dataclass
class HamRun:
    states: list
    torus: TorusResult
    budget: HamBudget
    calibrated_K: float
    envelope_ok: bool
    q_consistency: float
    final_shift: np.ndarray


def _input_ham(H) -> HamiltonianSeries:
    if not isinstance(H, HamiltonianSeries):
        raise InvalidArgument("input must be a HamiltonianSeries")
    if abs(np.linalg.det(H.Q)) < 1e-12 * max(1.0, np.abs(H.Q).max()) ** H.f.d:
        raise NondegeneracyError("Q must be nondegenerate")
    return H


def renorm_run_ham(H: HamiltonianSeries, alpha: FrequencyVector, config: HamRenormConfig, n_max: int | None = None, *, grid_exp: int | None = None) -> HamRun:
    """Renormalize ``H`` and construct its invariant torus.

    Parameters
    ----------
    H : HamiltonianSeries
        Input with ``omega = (alpha, 1)`` in its base.
    alpha : FrequencyVector
    config : HamRenormConfig
    n_max : int, optional
        Number of renormalization steps after the initial elimination.
    grid_exp : int, optional
        The torus is sampled on ``2**grid_exp`` points per axis.

    Returns
    -------
    HamRun
    """
    H = _input_ham(H)
    d = alpha.d
    trunc = config.truncation(d)
    if H.f.trunc != trunc:
        raise InvalidArgument("input truncation does not match the configuration")
    config.check_base(H.Q)
    n_max = config.schedule.n_max - 1 if n_max is None else n_max
    if config.schedule.n_max < n_max + 1:
        raise InvalidArgument("schedule must provide one step beyond n_max")
    steps = list(continued_fraction_run(alpha, config.schedule).steps)[: n_max + 2]
    omega0 = step_base(steps[0]).omega
    if np.abs(H.base.omega - omega0).max() > 1e-12:
        raise InvalidArgument("Hamiltonian frequency does not match alpha")
    budget = ham_budget(steps, H.Q, config)
    rho0 = config.rho0
    if rho0 is None:
        rho0 = (budget.B_script[-1] if budget.B_script else 0.0) + config.nu + 1.0
    work = config.solver_rho(trunc)
    current = H.replace(window=AnalyticityWindow(min(rho0, work), config.r))
    input_norm = weighted_norm(current.f, current.window)

    states = []
    rho = rho0
    chi = 1.0
    # Q_n = c_n P_n S_n P_n^T with c_n the product of eta_i mu_i and S_n
    # accumulating the pulled-back zero-mode Hessians
    c_acc = 1.0
    S_acc = H.Q.copy()
    q_dev = 0.0
    for n in range(n_max + 1):
        st = steps[n]
        rescale = None
        b = np.zeros(d)
        mu = 1.0
        if n >= 1:
            current, rescale = symplectic_rescale(current, st, config, mu=budget.mu[n], rho_prev=rho, cutoff_factor=budget.cutoff[n])
            rho, b, mu = rescale.rho_next, rescale.b, rescale.mu
            chi *= mu
            if np.linalg.cond(current.Q) > 1e12:
                raise NondegeneracyError(f"Q_n lost conditioning at step {n}", condition=float(np.linalg.cond(current.Q)))
            Pprev = np.linalg.inv(steps[n - 1].P.as_array())
            S_acc = S_acc + Pprev @ rescale.hessian @ Pprev.T / c_acc
            c_acc *= float(st.eta_n) * mu
        tau = budget.tau[n]
        cone = ResonanceCone(st.alpha_n, st.sigma, tau)
        el = eliminate_ham(current, cone, config)
        current = el.H_plus
        pert = weighted_norm(current.f, current.window)
        Pn = st.P.as_array()
        Qprod = c_acc * Pn @ S_acc @ Pn.T
        q_dev = max(q_dev, float(np.abs(current.Q - Qprod).max() / max(np.abs(Qprod).max(), 1e-300)))
        states.append(
            HamRenormState(
                n=n, H=current, Q=current.Q, mu=mu, chi=chi, lam=float(st.lambda_n), b=b,
                theta=budget.theta[n], window=AnalyticityWindow(rho, config.r), P=st.P, T=st.T,
                elimination=el, perturbation_norm=pert, rescale=rescale,
            )
        )

    K = states[0].perturbation_norm / (budget.theta[0] * input_norm) if input_norm > 0 else 0.0
    floor = 1e-15 * h0_norm(H.base, config.r)
    envelope_ok = all(s.perturbation_norm <= K * s.theta * input_norm * (1 + 1e-9) + floor for s in states)

    final_b, _ = solve_shift(states[-1].H, r=config.r)
    torus = assemble_torus(H, states, final_b, grid_exp=grid_exp)
    return HamRun(states, torus, budget, K, envelope_ok, q_dev, final_b)


def _apply_chain(states, final_b, x_int, N):
    """Evaluate ``g_0 o L_1 o g_1 o ... o L_N o g_N`` at ``(P_N x, b_final)``."""
    last = states[-1]
    Pm = np.array(last.P.entries, dtype=np.int64)
    x = np.mod(x_int @ Pm.T, N) / N
    y = np.tile(np.asarray(final_b, dtype=float), (x.shape[0], 1))
    for n in range(len(states) - 1, -1, -1):
        st = states[n]
        x, y = st.elimination(x, y)
        if n >= 1:
            T = st.T.as_array()
            x = x @ np.linalg.inv(T).T
            y = y @ (st.mu * T) + st.b  # mu T^T y + b, row-vector form
    return x, y


def assemble_torus(H: HamiltonianSeries, states, final_b, *, grid_exp: int | None = None) -> TorusResult:
    """Sample the invariant torus on a grid and fit its periodic parts."""
    d = H.f.d
    m = (6 if d == 2 else 4) if grid_exp is None else grid_exp
    N = 2**m
    axes = np.meshgrid(*([np.arange(N)] * d), indexing="ij")
    x_int = np.stack([a.reshape(-1) for a in axes], axis=1).astype(np.int64)
    xs, ys = _apply_chain(states, final_b, x_int, N)
    disp = xs - x_int / N
    disp = disp - np.round(disp)
    shape = (d,) + (N,) * d
    x_map = TorusMap.fit(disp.T.reshape(shape).astype(complex))
    y_map = TorusMap.fit(ys.T.reshape(shape).astype(complex))
    a = np.real(y_map.coeffs[(slice(None),) + (0,) * d])
    report = torus_residual(H, (x_map, y_map), H.base.omega, N)
    report["periodic_sup"] = x_map.sup_periodic()
    return TorusResult(a, x_map, y_map, report)


def residual_points(H: HamiltonianSeries, gamma, omega, grid: int):
    """Grid points, pointwise max-abs torus residual and energy values."""
    x_map, y_map = (gamma.x_map, gamma.y_map) if isinstance(gamma, TorusResult) else gamma
    d = x_map.d
    omega = np.asarray(omega, dtype=float)
    axes = np.meshgrid(*([np.arange(grid) / grid] * d), indexing="ij")
    x = np.stack([a.reshape(-1) for a in axes], axis=1)
    X = x_map(x)
    Y = y_map.periodic(x)
    jx = x_map.jacobian(x)
    jy = y_map.jacobian(x) - np.eye(d)
    full = H.full()
    gx = full.grad_x().evaluate(X, Y).real
    gy = full.grad_y().evaluate(X, Y).real
    # X_H = (d_y H, -d_x H)
    res_x = gy - jx @ omega
    res_y = -gx - jy @ omega
    res = np.maximum(np.abs(res_x).max(axis=1), np.abs(res_y).max(axis=1))
    energy = full.evaluate(X, Y)[:, 0].real
    return x, res, energy


def torus_residual(H: HamiltonianSeries, gamma, omega, grid: int) -> dict:
    """Residual of ``X_H(gamma(x)) = D gamma(x) omega`` and spread of ``H o gamma``.

    Parameters
    ----------
    H : HamiltonianSeries
    gamma : TorusResult or (TorusMap, TorusMap)
        Angle map and action part.
    omega : array
    grid : int
        Points per axis.

    Returns
    -------
    dict
        ``max`` and ``mean`` of the max-abs residual, ``energy_variance``
        and ``energy_mean``.
    """
    _, res, energy = residual_points(H, gamma, omega, grid)
    return {
        "max": float(res.max()),
        "mean": float(res.mean()),
        "energy_variance": float(energy.var()),
        "energy_mean": float(energy.mean()),
        "grid": int(grid),
    }
