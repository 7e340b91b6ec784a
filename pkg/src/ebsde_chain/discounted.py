"""Discounted equations: the stationary vector equation and the finite-horizon ODE system.

Sign convention: the discounted BSDE has drift ``f(X, Z) - alpha Y``, so the
stationary Markovian solution satisfies ``alpha v = f(., v) + A^T v`` and the
finite-horizon system is ``dv/dt = alpha v - f(., v) - A^T v``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from .chain_core import RateMatrix, as_rate_matrix
from .drivers import Balance, Driver
from .errors import BoundViolation, Nonconvergence, StepFailure

log = logging.getLogger(__name__)


@dataclass
class DiscountedSolution:
    alpha: float
    v: np.ndarray
    residual: float
    iterations: int
    method: str
    C: float
    bound_ok: bool

    @property
    def bound(self) -> float:
        return self.C / self.alpha


@dataclass
class HorizonSolution:
    grid: np.ndarray
    values: np.ndarray
    terminal: np.ndarray
    alpha: float
    nfev: int = 0
    bound_ok: bool | None = None

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.grid - t)))
        return self.values[k]


def _warn_if_not_strict(f: Driver):
    if f.declared_balance is not Balance.STRICT:
        warnings.warn(f"driver declared {f.declared_balance.value}; solver assumes strict balance",
                      RuntimeWarning, stacklevel=3)


def discounted_residual(A: RateMatrix, f: Driver, alpha: float, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return alpha * v - f.values(v) - A.adjoint_apply(v)


def _residual_scale(A: RateMatrix, f: Driver, alpha: float, v: np.ndarray, tol: float) -> float:
    """Magnitude of the terms in the residual, floored by their rounding error over ``tol``."""
    spread = float(v.max() - v.min()) if v.size else 0.0
    vmax = float(np.abs(v).max())
    rate = float(A.exit_rates.max())
    rounding = 64 * A.n * np.finfo(float).eps * (rate + alpha) * vmax / tol
    return max(1.0, float(np.abs(f.values(v)).max()), alpha * vmax, rate * spread, rounding)


def newton_solve(F, jac, v, *, tol, max_iter=100, scale=None):
    """Damped Newton on ``F(v) = 0`` with backtracking on the sup-norm residual.

    Returns ``(v, residual, iterations)``.  Singular Jacobians are handled
    with a least-squares step.
    """
    r = F(v)
    res = float(np.abs(r).max())
    for it in range(1, max_iter + 1):
        lim = tol * (scale(v) if scale else 1.0)
        if res <= lim:
            return v, res, it - 1
        J = jac(v)
        try:
            step = -np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(J, r, rcond=None)[0]
        t = 1.0
        for _ in range(40):
            cand = v + t * step
            rc = F(cand)
            rcs = float(np.abs(rc).max())
            if rcs < res or rcs <= lim:
                break
            t *= 0.5
        else:
            raise Nonconvergence("Newton line search failed", it, res)
        v, r, res = cand, rc, rcs
    if res <= tol * (scale(v) if scale else 1.0):
        return v, res, max_iter
    raise Nonconvergence(f"Newton did not converge: residual {res:.3e}", max_iter, res)


def damped_fixed_point(step_map, residual, v, *, tol, max_iter, stall, scale, trace=None):
    """Iterate ``v <- (1 - theta) v + theta step_map(v)``.

    ``theta`` starts at 1, is halved whenever a step would raise the
    residual and doubles back (capped at 1) after accepted steps.  Returns
    ``(v, residual, iterations, converged)``; ``converged`` is False when
    the iteration stalled (``stall`` iterations without a new best
    residual) or ran out of iterations.  Residuals are appended to
    ``trace`` when given.
    """
    theta = 1.0
    res = float(np.abs(residual(v)).max())
    best = res
    since_best = 0
    for it in range(1, max_iter + 1):
        if res <= tol * scale(v):
            return v, res, it - 1, True
        target = step_map(v)
        cand = (1 - theta) * v + theta * target
        rc = float(np.abs(residual(cand)).max())
        while rc > res and theta > 1e-8:
            theta *= 0.5
            cand = (1 - theta) * v + theta * target
            rc = float(np.abs(residual(cand)).max())
        if rc > res:
            return v, res, it, False
        v, res = cand, rc
        if trace is not None:
            trace.append(res)
        theta = min(1.0, 2.0 * theta)
        if res < best * (1 - 1e-3):
            best = res
            since_best = 0
        else:
            since_best += 1
            if since_best >= stall:
                return v, res, it, False
    return v, res, max_iter, res <= tol * scale(v)


def solve_stationary(A, f: Driver, alpha: float, *, tol: float = 1e-12, max_iter: int = 20000,
                     stall: int = 200, v0=None, check_bound: bool = True) -> DiscountedSolution:
    """Solve ``alpha v = f(., v) + A^T v``.

    Damped fixed point ``v <- (alpha I - A^T)^{-1} f(., v)`` from
    ``v0`` (zero by default), falling back to Newton when it stalls.  The
    a-priori bound ``|v|_inf <= C / alpha`` with ``C = max_x |f(x, 0)|``
    is checked on the result.

    Raises
    ------
    Nonconvergence
        Neither iteration reached ``tol``.
    BoundViolation
        The bound fails (only with ``check_bound``); this means the driver
        is not balanced as declared.
    """
    A = as_rate_matrix(A)
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    _warn_if_not_strict(f)
    n = A.n
    lu = scipy.linalg.lu_factor(alpha * np.eye(n) - A.rates.T)
    v = np.zeros(n) if v0 is None else np.array(v0, dtype=float)

    def residual(w):
        return discounted_residual(A, f, alpha, w)

    def step_map(w):
        return scipy.linalg.lu_solve(lu, f.values(w))

    def scale(w):
        return _residual_scale(A, f, alpha, w, tol)

    v, res, iters, ok = damped_fixed_point(step_map, residual, v, tol=tol, max_iter=max_iter,
                                           stall=stall, scale=scale)
    method = "fixed-point"
    if not ok:
        log.debug("fixed point stalled at residual %.3e after %d iterations; Newton", res, iters)
        v, res, extra = newton_solve(residual, lambda w: alpha * np.eye(n) - A.rates.T - f.jacobian(w),
                                     v, tol=tol, scale=scale)
        iters += extra
        method = "newton"
    C = f.bound_at_zero()
    bound_ok = bool(np.abs(v).max() <= C / alpha * (1 + 1e-9) + 1e-12)
    if check_bound and not bound_ok:
        raise BoundViolation(f"|v|_inf = {np.abs(v).max():.6g} exceeds C/alpha = {C / alpha:.6g}")
    return DiscountedSolution(alpha, v, res, iters, method, C, bound_ok)


def solve_finite_horizon(A, f: Driver, alpha: float, T: float, phi=None, *, grid=None,
                         rtol: float = 1e-10, atol: float = 1e-12) -> HorizonSolution:
    """Integrate ``dv/dt = alpha v - f(., v) - A^T v`` backward from ``v(T) = phi``.

    Uses an adaptive 8th-order Runge-Kutta scheme (DOP853) in reversed time
    and resamples the dense output on ``grid`` (101 evenly spaced points by
    default).
    """
    A = as_rate_matrix(A)
    if not T > 0:
        raise ValueError("T must be positive")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = A.n
    phi = np.zeros(n) if phi is None else np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("terminal condition must be finite")
    grid = np.linspace(0.0, T, 101) if grid is None else np.asarray(grid, dtype=float)

    def rhs(s, v):
        return -alpha * v + f.values(v) + A.adjoint_apply(v)

    sol = solve_ivp(rhs, (0.0, T), phi, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
    if sol.status < 0:
        raise StepFailure(f"integration failed: {sol.message}; try a smaller horizon")
    values = np.array([sol.sol(T - t) if t < T else phi for t in grid])
    bound_ok = None
    if alpha > 0 and not np.any(phi):
        C = f.bound_at_zero()
        bound_ok = bool(np.abs(values[0]).max() <= C / alpha * (1 + 1e-9) + 1e-12)
    return HorizonSolution(grid, values, phi.copy(), alpha, int(sol.nfev), bound_ok)


@dataclass
class HorizonConvergence:
    horizons: np.ndarray
    gaps: np.ndarray
    rate: float
    bounds: np.ndarray = field(repr=False)


def horizon_convergence(A, f: Driver, alpha: float, horizons=(5.0, 10.0, 15.0, 20.0)) -> HorizonConvergence:
    """Gap ``|v^T(0) - v^alpha|_inf`` for several horizons and its fitted decay rate.

    The theoretical envelope ``C exp(-alpha T) / alpha`` is returned alongside.
    """
    A = as_rate_matrix(A)
    stat = solve_stationary(A, f, alpha)
    horizons = np.asarray(horizons, dtype=float)
    gaps = np.array([np.abs(solve_finite_horizon(A, f, alpha, T, grid=[0.0, T]).values[0] - stat.v).max()
                     for T in horizons])
    slope = np.polyfit(horizons, np.log(gaps), 1)[0]
    C = f.bound_at_zero()
    return HorizonConvergence(horizons, gaps, float(-slope), C * np.exp(-alpha * horizons) / alpha)
