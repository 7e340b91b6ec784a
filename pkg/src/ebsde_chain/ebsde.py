"""Ergodic equation ``0 = f(., v) + A^T v - lambda 1``: two solvers and solution checks."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .chain_core import (RateMatrix, as_rate_matrix, deviation_measure, ergodicity_estimate,
                         is_irreducible, perturbed_rate_matrix, stationary_distribution)
from .discounted import damped_fixed_point, newton_solve, solve_stationary
from .drivers import Balance, Driver
from .errors import EbsdeError, Nonconvergence, Reducible, ScheduleExhausted

log = logging.getLogger(__name__)

ZERO_SUM = "zero-sum"
ANCHOR = "anchor"


@dataclass
class EbsdeSolution:
    v: np.ndarray
    lam: float
    normalization: str
    residual: float
    method: str
    x0: int = 0
    diagnostics: dict = field(default_factory=dict, repr=False)

    def centred(self) -> np.ndarray:
        return self.v - self.v.mean()

    def renormalized(self, normalization: str, x0: int = 0) -> "EbsdeSolution":
        return EbsdeSolution(normalize(self.v, normalization, x0), self.lam, normalization,
                             self.residual, self.method, x0, self.diagnostics)


def parse_normalization(text: str) -> tuple[str, int]:
    """Parse ``"zero-sum"``, ``"anchor"`` or ``"anchor:<x0>"``."""
    if text == ZERO_SUM:
        return ZERO_SUM, 0
    if text == ANCHOR:
        return ANCHOR, 0
    if text.startswith(ANCHOR + ":"):
        return ANCHOR, int(text.split(":", 1)[1])
    raise ValueError(f"unknown normalization {text!r}")


def normalize(v, normalization: str = ZERO_SUM, x0: int = 0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if normalization == ZERO_SUM:
        return v - v.mean()
    if normalization == ANCHOR:
        return v - v[x0]
    raise ValueError(f"unknown normalization {normalization!r}")


def ergodic_residual(A: RateMatrix, f: Driver, v, lam: float) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return f.values(v) + A.adjoint_apply(v) - lam


def _scale(A: RateMatrix, f: Driver, v: np.ndarray, tol: float) -> float:
    """Factor on ``tol``: 1 unless rounding in ``f(v) + A^T v`` exceeds ``tol``."""
    spread = float(v.max() - v.min())
    size = max(float(np.abs(f.values(v)).max()), float(A.exit_rates.max()) * spread)
    return max(1.0, 64 * A.n * np.finfo(float).eps * size / tol)


def _check_inputs(A: RateMatrix, f: Driver, normalization: str, x0: int):
    if not is_irreducible(A):
        raise Reducible("the ergodic equation needs an irreducible chain")
    if f.n is not None and f.n != A.n:
        raise ValueError(f"driver has {f.n} states, chain has {A.n}")
    if normalization not in (ZERO_SUM, ANCHOR):
        raise ValueError(f"unknown normalization {normalization!r}")
    if not 0 <= x0 < A.n:
        raise ValueError(f"anchor state {x0} out of range")
    if f.declared_balance is not Balance.STRICT:
        warnings.warn(f"driver declared {f.declared_balance.value}; solver assumes strict balance",
                      RuntimeWarning, stacklevel=3)


def _extended_newton(A: RateMatrix, f: Driver, v, lam, normalization, x0, tol):
    """Newton on ``F(v, lam) = [f(v) + A^T v - lam 1; normalization(v)]``."""
    n = A.n
    row = np.ones(n) if normalization == ZERO_SUM else np.eye(n)[x0]

    def F(u):
        return np.append(ergodic_residual(A, f, u[:n], u[n]), row @ u[:n])

    def J(u):
        top = np.hstack([A.rates.T + f.jacobian(u[:n]), -np.ones((n, 1))])
        return np.vstack([top, np.append(row, 0.0)])

    u0 = np.append(normalize(v, normalization, x0), lam)
    u, _, its = newton_solve(F, J, u0, tol=tol, scale=lambda u: _scale(A, f, u[:n], tol))
    return u[:n], float(u[n]), its


def _finish(A, f, v, normalization, x0, method, diagnostics) -> EbsdeSolution:
    v = normalize(v, normalization, x0)
    g = f.values(v) + A.adjoint_apply(v)
    lam = float(g.mean())
    res = float(np.abs(g - lam).max())
    return EbsdeSolution(v, lam, normalization, res, method, x0, diagnostics)


def solve_direct(A, f: Driver, *, tol: float = 1e-10, max_iter: int = 10000, stall: int = 200,
                 v0=None, normalization: str = ZERO_SUM, x0: int = 0) -> EbsdeSolution:
    """Pseudoinverse iteration for the ergodic equation.

    ``lam_n = mean(f(v_n) + A^T v_n)`` and
    ``v_{n+1} = pinv(A^T) (lam_n 1 - f(v_n))``, damped as in the discounted
    solver.  The pseudoinverse is formed once with relative singular-value
    cutoff 1e-12.  On stall the solver switches to Newton on the system
    extended by the normalization row.

    Raises
    ------
    Reducible
        ``A`` is not irreducible.
    Nonconvergence
        Neither iteration reached ``tol``.
    """
    A = as_rate_matrix(A)
    _check_inputs(A, f, normalization, x0)
    n = A.n
    P = np.linalg.pinv(A.rates.T, rcond=1e-12)
    v = np.zeros(n) if v0 is None else normalize(np.array(v0, dtype=float), ZERO_SUM)

    def step_map(w):
        fw = f.values(w)
        lam = np.mean(fw + A.adjoint_apply(w))
        return P @ (lam - fw)

    def residual(w):
        g = f.values(w) + A.adjoint_apply(w)
        return g - g.mean()

    trace: list[float] = []
    v, res, iters, ok = damped_fixed_point(step_map, residual, v, tol=tol, max_iter=max_iter,
                                           stall=stall, scale=lambda w: _scale(A, f, w, tol), trace=trace)
    method = "direct"
    if not ok:
        log.debug("pseudoinverse iteration stalled at %.3e; switching to Newton", res)
        v, _, extra = _extended_newton(A, f, v, float(np.mean(f.values(v) + A.adjoint_apply(v))),
                                       normalization, x0, tol)
        iters += extra
        method = "direct-newton"
    sol = _finish(A, f, v, normalization, x0, "direct",
                  {"iterations": iters, "trace": trace, "stage": method})
    if sol.residual > tol * _scale(A, f, sol.v, tol):
        raise Nonconvergence(f"residual {sol.residual:.3e} above tolerance", iters, sol.residual)
    return sol


def default_schedule(start: float = 0.1, floor: float = 1e-7) -> np.ndarray:
    """Geometric schedule ``start * 2**-k`` down to ``floor``."""
    k = int(np.floor(np.log2(start / floor) + 1e-12))
    return start * 0.5 ** np.arange(k + 1)


def _richardson(seq: list[np.ndarray]) -> np.ndarray:
    """Two-level Richardson extrapolation for halving steps, error ``O(alpha)`` then ``O(alpha^2)``."""
    if len(seq) == 1:
        return seq[-1]
    r1 = [2 * b - a for a, b in zip(seq[:-1], seq[1:])]
    if len(r1) == 1:
        return r1[-1]
    return (4 * r1[-1] - r1[-2]) / 3


def solve_vanishing_discount(A, f: Driver, schedule=None, x0: int = 0, *, tol: float = 1e-8,
                             polish_tol: float = 1e-10, normalization: str = ZERO_SUM,
                             polish: bool = True) -> EbsdeSolution:
    """Limit of discounted solutions as ``alpha -> 0``.

    For each ``alpha`` the stationary discounted equation is solved (warm
    started from the previous one); ``v^alpha - v^alpha(x0)`` and
    ``alpha v^alpha(x0)`` are extrapolated from the last three iterates.
    The iteration stops once successive extrapolations differ by less than
    ``tol`` and the ergodic residual is at most ``10 tol``.  A Newton polish
    on the direct system then makes the pair exact to ``polish_tol``.  The
    unpolished limit is kept in ``diagnostics``.

    Raises
    ------
    ScheduleExhausted
        The schedule ends before the extrapolated limits settle.
    """
    A = as_rate_matrix(A)
    _check_inputs(A, f, normalization, x0)
    schedule = default_schedule() if schedule is None else np.asarray(schedule, dtype=float)
    if schedule.ndim != 1 or schedule.size == 0 or np.any(schedule <= 0) or np.any(np.diff(schedule) >= 0):
        raise ValueError("schedule must be a strictly decreasing sequence of positive rates")

    ws: list[np.ndarray] = []
    trace = []
    prev = None
    warm = None
    converged = False
    for alpha in schedule:
        d = solve_stationary(A, f, float(alpha), v0=warm)
        w = d.v - d.v[x0]
        lam_a = alpha * d.v[x0]
        ws.append(np.append(w, lam_a))
        est = _richardson(ws[-3:])
        res = float(np.abs(ergodic_residual(A, f, est[:-1], est[-1])).max())
        step = np.inf if prev is None else float(np.abs(est - prev).max())
        trace.append({"alpha": float(alpha), "alpha_v_x0": float(lam_a), "iterations": d.iterations,
                      "residual": d.residual, "step": step, "ergodic_residual": res})
        prev = est
        if step < tol and res <= 10 * tol * _scale(A, f, est[:-1], tol):
            converged = True
            break
        warm = w + lam_a / (alpha / 2)
    if not converged:
        raise ScheduleExhausted(f"limits not Cauchy at alpha = {schedule[-1]:.3g}", len(schedule),
                                trace[-1]["ergodic_residual"])
    for row in trace:
        row["gap"] = abs(row["alpha_v_x0"] - float(prev[-1]))
    v_raw, lam_raw = normalize(prev[:-1], normalization, x0), float(prev[-1])
    diagnostics = {"trace": trace, "extrapolated_v": v_raw, "extrapolated_lambda": lam_raw}
    if not polish:
        res = float(np.abs(ergodic_residual(A, f, v_raw, lam_raw)).max())
        return EbsdeSolution(v_raw, lam_raw, normalization, res, "vanishing-discount", x0, diagnostics)
    v, _, its = _extended_newton(A, f, v_raw, lam_raw, normalization, x0, polish_tol)
    diagnostics["polish_steps"] = its
    return _finish(A, f, v, normalization, x0, "vanishing-discount", diagnostics)


def solve(A, f: Driver, method: str = "direct", **kw) -> EbsdeSolution:
    if method == "direct":
        return solve_direct(A, f, **kw)
    if method in ("vanishing", "vanishing-discount"):
        return solve_vanishing_discount(A, f, **kw)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class VerificationReport:
    equation_residual: float
    lambda_identity: float
    representation_residual: float
    C: float
    R: float | None
    rho: float | None
    lambda_bound_ok: bool
    v_bound_ok: bool | None
    tol: float = 1e-8

    @property
    def passed(self) -> bool:
        return max(self.equation_residual, self.lambda_identity, self.representation_residual) <= self.tol

    def as_dict(self) -> dict:
        return {"equation_residual": self.equation_residual, "lambda_identity": self.lambda_identity,
                "representation_residual": self.representation_residual, "C": self.C, "R": self.R,
                "rho": self.rho, "lambda_bound_ok": self.lambda_bound_ok, "v_bound_ok": self.v_bound_ok,
                "passed": self.passed}


def verify_solution(A, f: Driver, sol: EbsdeSolution, *, tol: float = 1e-8,
                    bounds: bool = True) -> VerificationReport:
    """Check the equation and the two representation identities.

    Reports (a) the equation residual, (b) ``|lam - sum_y pi(y) f(y, v)|``
    and (c) ``max_x |v(x) - c - sum_y mu^x(y) f(y, v)|`` with
    ``c = pi . v``.  With ``bounds``, ``|lam| <= C`` and the spread of
    ``v`` against ``C R / rho`` from an ergodicity estimate of the chain
    perturbed by ``v``.
    """
    A = as_rate_matrix(A)
    v = np.asarray(sol.v, dtype=float)
    fv = f.values(v)
    pi = stationary_distribution(A)
    eq = float(np.abs(fv + A.adjoint_apply(v) - sol.lam).max())
    lam_id = abs(sol.lam - float(pi @ fv))
    c = float(pi @ v)
    mu = np.array([deviation_measure(A, x) for x in range(A.n)])
    rep = float(np.abs(v - c - mu @ fv).max())
    C = f.bound_at_zero()
    R = rho = None
    v_ok = None
    if bounds:
        try:
            B = perturbed_rate_matrix(A, f, v, np.zeros(A.n)).matrix
            est = ergodicity_estimate(B)
            R, rho = est.R, est.rho
            v_ok = bool(v.max() - v.min() <= C * R / rho * (1 + 1e-9) + 1e-12)
        except EbsdeError as exc:
            log.debug("no ergodicity bound: %s", exc)
    return VerificationReport(eq, lam_id, rep, C, R, rho, bool(abs(sol.lam) <= C * (1 + 1e-12) + 1e-12),
                              v_ok, tol)


@dataclass
class ComparisonResult:
    lam: float
    lam_prime: float
    dominated: bool
    min_gap: float
    passed: bool


def lambda_comparison(A, f: Driver, f_prime: Driver, *, samples: int = 256, seed: int = 0,
                      method: str = "direct") -> ComparisonResult:
    """Solve both equations and check ``lam >= lam' - 1e-10``.

    Whether ``f >= f'`` holds is estimated by sampling random ``z`` at
    several scales plus both solutions; it is reported, not assumed.
    """
    A = as_rate_matrix(A)
    s = solve(A, f, method)
    sp = solve(A, f_prime, method)
    rng = np.random.default_rng(seed)
    zs = [s.v, sp.v] + [rng.standard_normal(A.n) * scale for scale in (1e-2, 1.0, 1e2)
                        for _ in range(samples // 3)]
    gap = min(float(np.min(f.values(z) - f_prime.values(z))) for z in zs)
    return ComparisonResult(s.lam, sp.lam, gap >= -1e-12, gap, s.lam >= sp.lam - 1e-10)
