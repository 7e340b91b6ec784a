"""Finite-state rate matrices and the quantities derived from them.

Convention: entry ``(i, j)`` of a rate matrix is the rate of jumping from
state ``j`` to state ``i``, so columns sum to zero.  The transpose is the
usual (row-sum-zero) generator.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
from scipy.integrate import quad_vec
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .errors import (
    ColumnSumNonzero,
    DimensionMismatch,
    NegativeOffDiagonal,
    NoDecay,
    NonSquare,
    NotBalanced,
    QuadratureNonconvergent,
    RateMatrixError,
    Reducible,
    SolveFailure,
)

COLUMN_TOL = 1e-12
PROJECT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RateMatrix:
    """Validated rate matrix.  Build instances with :func:`validate_rate_matrix`."""

    rates: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.rates.shape[0]

    @property
    def generator(self) -> np.ndarray:
        """Row-sum-zero transpose, i.e. the textbook generator ``Q``."""
        return self.rates.T

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def column(self, x: int) -> np.ndarray:
        return self.rates[:, x]

    def adjoint_apply(self, v) -> np.ndarray:
        """``A^T v``, centred first so large constant offsets in ``v`` cancel exactly."""
        v = np.asarray(v, dtype=float)
        return self.rates.T @ (v - v.mean())

    def __array__(self, dtype=None, copy=None):
        return self.rates if dtype is None else self.rates.astype(dtype)

    def __repr__(self):
        return f"RateMatrix(n={self.n})"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def validate_rate_matrix(raw, *, convention: str = "rates", tol: float = COLUMN_TOL,
                         project_tol: float = PROJECT_TOL) -> RateMatrix:
    """Check ``raw`` and wrap it as a :class:`RateMatrix`.

    Parameters
    ----------
    raw : array_like, shape (n, n)
        Entry ``(i, j)`` is the rate ``j -> i``.  With
        ``convention="generator"`` the transpose is expected instead.
    tol : float
        Column sums within ``tol`` (relative to the largest entry of the
        column, floored at 1) are accepted silently.
    project_tol : float
        Column sums within this looser tolerance are repaired by adjusting
        the diagonal, with a warning.  Larger defects raise.

    Raises
    ------
    NonSquare, NegativeOffDiagonal, ColumnSumNonzero
    """
    if isinstance(raw, RateMatrix):
        return raw
    arr = np.array(raw, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
        raise NonSquare(arr.shape)
    if not np.all(np.isfinite(arr)):
        raise RateMatrixError("rate matrix has non-finite entries")
    if convention == "generator":
        arr = arr.T.copy()
    elif convention != "rates":
        raise RateMatrixError(f"unknown convention {convention!r}")
    n = arr.shape[0]
    off = ~np.eye(n, dtype=bool)
    bad = np.argwhere((arr < 0) & off)
    if bad.size:
        i, j = (int(k) for k in bad[0])
        raise NegativeOffDiagonal(i, j, float(arr[i, j]))
    sums = arr.sum(axis=0)
    scale = np.maximum(1.0, np.abs(arr).max(axis=0))
    for j in range(n):
        if abs(sums[j]) <= tol * scale[j]:
            continue
        if abs(sums[j]) <= project_tol * scale[j]:
            warnings.warn(f"column {j} sum {sums[j]:.3e} projected to zero", RuntimeWarning,
                          stacklevel=2)
            continue
        raise ColumnSumNonzero(j, float(sums[j]))
    offsum = np.where(off, arr, 0.0).sum(axis=0)
    arr[np.diag_indices(n)] = -offsum
    return RateMatrix(_freeze(arr))


def as_rate_matrix(A) -> RateMatrix:
    return A if isinstance(A, RateMatrix) else validate_rate_matrix(A)


def rate_matrix_from_json(obj: dict) -> RateMatrix:
    """Parse ``{"n": 4, "rates": [[...]], "convention": "generator"}``."""
    if not isinstance(obj, dict) or "rates" not in obj:
        raise RateMatrixError("chain JSON needs a 'rates' key")
    unknown = set(obj) - {"n", "rates", "convention"}
    if unknown:
        raise RateMatrixError(f"unknown chain keys: {sorted(unknown)}")
    A = validate_rate_matrix(obj["rates"], convention=obj.get("convention", "rates"))
    if "n" in obj and obj["n"] != A.n:
        raise RateMatrixError(f"declared n={obj['n']} but rates are {A.n}x{A.n}")
    return A


def load_rate_matrix(path) -> RateMatrix:
    with open(path) as fh:
        return rate_matrix_from_json(json.load(fh))


def rate_matrix_to_json(A: RateMatrix) -> dict:
    return {"n": A.n, "rates": A.rates.tolist()}


def point_mass(n: int, x: int) -> np.ndarray:
    e = np.zeros(n)
    e[x] = 1.0
    return e


def tv_norm(signed) -> float:
    """Total variation as the plain sum of absolute values (no factor 1/2)."""
    return float(np.abs(np.asarray(signed, dtype=float)).sum())


def is_irreducible(A) -> bool:
    A = as_rate_matrix(A)
    adj = (A.rates > 0) & ~np.eye(A.n, dtype=bool)
    ncomp, _ = connected_components(adj.T, directed=True, connection="strong")
    return ncomp == 1


def _require_irreducible(A: RateMatrix):
    if not is_irreducible(A):
        raise Reducible("rate matrix is not irreducible")


def _as_probability(mu, n: int) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (n,):
        raise DimensionMismatch(f"probability vector of length {mu.shape} for n={n}")
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
        raise ValueError("not a probability vector")
    return mu


def stationary_distribution(A) -> np.ndarray:
    """Invariant law ``pi`` with ``A pi = 0``.

    Solved as the consistent overdetermined system ``[A; 1^T] pi = e_{n+1}``
    by an SVD least-squares solve.  Eigendecompositions are avoided on
    purpose, since generators can be defective.
    """
    A = as_rate_matrix(A)
    _require_irreducible(A)
    n = A.n
    M = np.vstack([A.rates, np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, _, rank, _ = scipy.linalg.lstsq(M, rhs, lapack_driver="gelsd")
    if rank < n:
        raise Reducible("stationary nullspace has dimension > 1")
    if np.any(pi < -1e-10):
        raise SolveFailure(f"stationary solve produced negative mass {pi.min():.3e}")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    scale = max(1.0, float(A.exit_rates.max()))
    resid = np.abs(A.rates @ pi).max()
    if resid > 1e-12 * scale:
        # one step of iterative refinement
        corr = scipy.linalg.lstsq(M, np.concatenate([-(A.rates @ pi), [0.0]]))[0]
        pi = np.clip(pi + corr, 0.0, None)
        pi /= pi.sum()
        resid = np.abs(A.rates @ pi).max()
        if resid > 1e-12 * scale:
            raise SolveFailure(f"stationary residual {resid:.3e}")
    return pi


def transition_matrix(A, t: float) -> np.ndarray:
    """``exp(tA)``; column ``x`` is the law at time ``t`` started from ``x``."""
    A = as_rate_matrix(A)
    if not np.isfinite(t) or t < 0:
        raise ValueError(f"time must be finite and >= 0, got {t}")
    return scipy.linalg.expm(t * A.rates)


def law_at(A, mu0, t: float) -> np.ndarray:
    """Law of the chain at time ``t`` from initial law ``mu0``."""
    A = as_rate_matrix(A)
    mu0 = _as_probability(mu0, A.n)
    if t == 0:
        return mu0.copy()
    p = transition_matrix(A, t) @ mu0
    p = np.clip(p, 0.0, None)
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise SolveFailure(f"matrix exponential lost mass: total {total!r}")
    return p / total


def psi(A, x: int) -> np.ndarray:
    """The symmetric PSD matrix ``diag(Ax) - A diag(x) - diag(x) A^T`` at state ``x``."""
    A = as_rate_matrix(A)
    a = A.column(x)
    ex = point_mass(A.n, x)
    return np.diag(a) - np.outer(a, ex) - np.outer(ex, a)


def _jump_increments(A: RateMatrix, x: int, z: np.ndarray) -> np.ndarray:
    """``a_{jx} (z_j - z_x)`` for every ``j`` (zero at ``j = x``)."""
    inc = A.column(x) * (z - z[x])
    inc[x] = 0.0
    return inc


def seminorm_sq(A, x: int, z) -> float:
    """``z^T psi^x z``, evaluated as ``sum_{j != x} a_{jx} (z_j - z_x)^2``.

    The jump-sum form is the same quadratic form but is nonnegative and
    exactly shift invariant in floating point.
    """
    A = as_rate_matrix(A)
    z = np.asarray(z, dtype=float)
    return float(np.sum(_jump_increments(A, x, z) * (z - z[x])))


def group_inverse(A) -> np.ndarray:
    """Drazin/group inverse ``A^#`` of an irreducible rate matrix.

    Uses ``A^# = (A - Pi)^{-1} + Pi`` with ``Pi = pi 1^T``: subtracting the
    rank-one projector moves the zero eigenvalue to ``-1`` and leaves the
    action on ``1^perp`` unchanged.
    """
    A = as_rate_matrix(A)
    pi = stationary_distribution(A)
    Pi = np.outer(pi, np.ones(A.n))
    return np.linalg.solve(A.rates - Pi, np.eye(A.n)) + Pi


def deviation_matrix(A) -> np.ndarray:
    """Matrix whose column ``x`` is ``int_0^inf (P_t e_x - pi) dt``."""
    return -group_inverse(A)


def _deviation_quadrature(A: RateMatrix, x: int, tol: float) -> np.ndarray:
    pi = stationary_distribution(A)
    ex = point_mass(A.n, x)

    def integrand(t):
        return scipy.linalg.expm(t * A.rates) @ ex - pi

    horizon = 1.0 / max(float(A.exit_rates.max()), 1e-300)
    while np.abs(integrand(horizon)).max() >= tol:
        horizon *= 2.0
        if horizon > 1e7:
            raise QuadratureNonconvergent("integrand did not decay below tolerance")
    # split at a geometric grid so the early transient is resolved
    edges = np.concatenate([[0.0], np.geomspace(horizon * 1e-4, horizon, 12)])
    total = np.zeros(A.n)
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, err = quad_vec(integrand, lo, hi, epsabs=1e-12, epsrel=1e-10, limit=500)
        if err > 1e-9:
            raise QuadratureNonconvergent(f"quadrature error {err:.2e} on [{lo}, {hi}]")
        total += val
    return total


def deviation_measure(A, x: int, method: str = "group_inverse", *, tol: float = 1e-12) -> np.ndarray:
    """Signed measure ``mu^x(y) = int_0^inf (P_t^x(y) - pi(y)) dt``.

    Parameters
    ----------
    method : {"group_inverse", "quadrature"}
        The group-inverse solve is exact up to rounding; quadrature of the
        transient law is kept as an independent cross-check.
    tol : float
        Quadrature only: the integrand must fall below ``tol`` before the
        upper limit is fixed.
    """
    A = as_rate_matrix(A)
    _require_irreducible(A)
    if method == "group_inverse":
        return deviation_matrix(A)[:, x]
    if method == "quadrature":
        return _deviation_quadrature(A, x, tol)
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class OrderViolation:
    kind: str
    i: int
    j: int
    value: float


@dataclass(frozen=True)
class RateOrderReport:
    gamma: float
    controlled: bool
    strictly: bool | None
    violation: OrderViolation | None = None


def rate_order_check(A, B, gamma: float, strict: bool = False, *, tol: float = 1e-12) -> RateOrderReport:
    """Is ``gamma * A`` below ``B`` in the rate-matrix order (``B - gamma A`` a rate matrix)?

    With ``strict`` the diagonal of ``B - gamma A`` must also be ``<= -gamma``.
    The first offending entry is returned in ``violation``.
    """
    A, B = as_rate_matrix(A), as_rate_matrix(B)
    if A.n != B.n:
        raise DimensionMismatch(f"{A.n} vs {B.n}")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    D = B.rates - gamma * A.rates
    scale = max(1.0, np.abs(B.rates).max(), gamma * np.abs(A.rates).max())
    n = A.n
    for j in range(n):
        for i in range(n):
            if i != j and D[i, j] < -tol * scale:
                return RateOrderReport(gamma, False, False if strict else None,
                                       OrderViolation("NegativeOffDiagonal", i, j, float(D[i, j])))
    if not strict:
        return RateOrderReport(gamma, True, None)
    for j in range(n):
        if D[j, j] > -gamma + tol * scale:
            return RateOrderReport(gamma, True, False,
                                   OrderViolation("DiagonalAboveMinusGamma", j, j, float(D[j, j])))
    return RateOrderReport(gamma, True, True)


def dominates(B, A) -> bool:
    """``B >= A`` in the partial order, i.e. ``B - A`` is a rate matrix."""
    return rate_order_check(A, B, 1.0).controlled


@dataclass(frozen=True)
class PerturbedRates:
    matrix: RateMatrix
    margin: float
    gamma_star: float
    degenerate_states: tuple = ()


def perturbed_rate_matrix(A, f: Callable[[int, np.ndarray], float], Z, Zp) -> PerturbedRates:
    """Rate matrix of the chain after the measure change driven by ``f`` at ``(Z, Z')``.

    Column ``x`` is ``A x + (f(x,Z) - f(x,Z')) / |Z-Z'|^2_x * psi^x (Z - Z')``.
    States where the seminorm vanishes keep their original column.

    ``margin`` is the smallest ratio ``B[i,x] / A[i,x]`` over allowed jumps;
    ``gamma_star = margin * min(min_x |a_xx|, 1) / 2`` is a constant for
    which ``B`` is strictly controlled by ``A``.
    """
    A = as_rate_matrix(A)
    Z = np.asarray(Z, dtype=float)
    Zp = np.asarray(Zp, dtype=float)
    d = Z - Zp
    n = A.n
    B = A.rates.copy()
    degenerate = []
    for x in range(n):
        inc = _jump_increments(A, x, d)
        nsq = float(np.sum(inc * (d - d[x])))
        if nsq <= 0.0:
            degenerate.append(x)
            continue
        k = (f(x, Z) - f(x, Zp)) / nsq
        # off-diagonal part of psi^x d is exactly inc; diagonal is rebuilt below
        B[:, x] = A.column(x) + k * inc
    off = ~np.eye(n, dtype=bool)
    scale = max(1.0, np.abs(A.rates).max())
    neg = np.argwhere((B < -1e-12 * scale) & off)
    if neg.size:
        i, j = (int(v) for v in neg[0])
        raise NotBalanced(f"perturbed rate ({i}, {j}) = {B[i, j]:.6g} is negative")
    B[off & (B < 0)] = 0.0
    # same zero pattern as A: psi^x d is supported on the jump targets of x
    B[off & (A.rates == 0)] = 0.0
    B[np.diag_indices(n)] = -np.where(off, B, 0.0).sum(axis=0)
    mask = off & (A.rates > 0)
    margin = float((B[mask] / A.rates[mask]).min()) if mask.any() else 1.0
    exits = A.exit_rates
    gamma_star = margin * min(float(exits.min()), 1.0) / 2.0
    return PerturbedRates(RateMatrix(_freeze(B)), margin, gamma_star, tuple(degenerate))


@dataclass(frozen=True)
class ErgodicityEstimate:
    R: float
    rho: float
    horizon: float
    max_tv_residual: float
    times: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)

    def bound(self, t):
        return self.R * np.exp(-self.rho * np.asarray(t, dtype=float))


def _worst_tv(A: RateMatrix, pi: np.ndarray, t: float) -> float:
    P = transition_matrix(A, t)
    return float(np.abs(P - pi[:, None]).sum(axis=0).max())


def ergodicity_estimate(A, horizon: float | None = None, samples: int = 64,
                        floor: float = 1e-12) -> ErgodicityEstimate:
    """Fit ``sup_mu |P_t mu - pi|_TV <= R exp(-rho t)``.

    The supremum over initial laws is attained at point masses, so only the
    ``n`` columns of ``exp(tA)`` are examined.  The exponent comes from a
    minimax (Chebyshev) line fit of ``log d(t)`` on a geometric time grid;
    the intercept is then raised until the envelope covers every sample.
    Samples with ``d(t) <= floor`` are rounding noise and are dropped, so
    the reported ``horizon`` is the last retained sample time.
    """
    A = as_rate_matrix(A)
    _require_irreducible(A)
    pi = stationary_distribution(A)
    if horizon is None:
        horizon = 1.0 / float(A.exit_rates.max())
        while _worst_tv(A, pi, horizon) > 1e-9:
            horizon *= 2.0
            if horizon > 1e7:
                raise NoDecay("distance to equilibrium did not decay")
    if _worst_tv(A, pi, horizon) >= 0.5:
        raise NoDecay(f"d(t) still >= 0.5 at horizon {horizon}")
    grid = np.concatenate([[0.0], np.geomspace(horizon * 1e-3, horizon, samples - 1)])
    dist = np.array([_worst_tv(A, pi, t) for t in grid])
    keep = dist > floor
    times, dist = grid[keep], dist[keep]
    if times.size < 2:
        raise NoDecay("too few samples above the rounding floor")
    y = np.log(dist)
    m = times.size
    # variables: c, rho, e ; minimise e subject to |y - (c - rho t)| <= e
    A_ub = np.vstack([
        np.column_stack([np.ones(m), -times, -np.ones(m)]),
        np.column_stack([-np.ones(m), times, -np.ones(m)]),
    ])
    b_ub = np.concatenate([y, -y])
    res = linprog([0, 0, 1], A_ub=A_ub, b_ub=b_ub, bounds=[(None, None)] * 3, method="highs")
    if not res.success:
        raise SolveFailure(f"envelope fit failed: {res.message}")
    rho = float(res.x[1])
    if rho <= 0:
        raise NoDecay(f"fitted rate {rho} is not positive")
    R = float(np.exp(np.max(y + rho * times)))
    resid = float(np.abs(R * np.exp(-rho * times) - dist).max())
    return ErgodicityEstimate(R, rho, float(times[-1]), resid, times, dist)


def random_rate_matrix(n: int, rng, *, density: float = 1.0, low: float = 0.2,
                       high: float = 2.0) -> RateMatrix:
    """Random irreducible rate matrix: a directed cycle plus random extra edges."""
    rng = np.random.default_rng(rng)
    R = np.zeros((n, n))
    perm = rng.permutation(n)
    for k in range(n):
        R[perm[(k + 1) % n], perm[k]] = rng.uniform(low, high)
    extra = (rng.random((n, n)) < density) & ~np.eye(n, dtype=bool) & (R == 0)
    R[extra] = rng.uniform(low, high, size=extra.sum())
    R[np.diag_indices(n)] = -R.sum(axis=0)
    return validate_rate_matrix(R)


def same_pattern(A, B) -> bool:
    A, B = as_rate_matrix(A), as_rate_matrix(B)
    off = ~np.eye(A.n, dtype=bool)
    return bool(np.array_equal((A.rates > 0) & off, (B.rates > 0) & off))


def path_matrix() -> RateMatrix:
    """Four-state chain whose rate matrix is defective (not diagonalizable)."""
    generator = np.array([
        [-3.0, 1.0, 2.0, 0.0],
        [1.0, -3.0, 2.0, 0.0],
        [0.0, 2.0, -3.0, 1.0],
        [0.0, 2.0, 1.0, -3.0],
    ])
    return validate_rate_matrix(generator, convention="generator")


__all__: Sequence[str] = [
    "RateMatrix", "validate_rate_matrix", "as_rate_matrix", "rate_matrix_from_json",
    "load_rate_matrix", "rate_matrix_to_json", "point_mass", "tv_norm", "is_irreducible",
    "stationary_distribution", "transition_matrix", "law_at", "psi", "seminorm_sq",
    "group_inverse", "deviation_matrix", "deviation_measure", "OrderViolation",
    "RateOrderReport", "rate_order_check", "dominates", "PerturbedRates",
    "perturbed_rate_matrix", "ErgodicityEstimate", "ergodicity_estimate",
    "random_rate_matrix", "same_pattern", "path_matrix",
]
