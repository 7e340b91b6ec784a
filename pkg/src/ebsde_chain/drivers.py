"""Drivers ``f(x, z)`` and their validity checks.

A driver sees ``z`` only up to constant shifts.  Every evaluation goes
through :meth:`Driver.__call__` or :meth:`Driver.values`, which subtract
the component at the current state before the concrete formula runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .chain_core import RateMatrix, as_rate_matrix, rate_order_check
from .errors import BadBeta, ControlNotDominated, DimensionMismatch


class Balance(str, Enum):
    FAILS = "fails"
    WEAK = "weakly balanced"
    BALANCED = "balanced"
    STRICT = "strictly balanced"


class Driver:
    """A time-independent driver ``f(x, z)`` on ``n`` states.

    Parameters
    ----------
    func : callable ``(x, z) -> float``
        Receives ``z`` already canonicalised so that ``z[x] == 0``.
    n : int
        Number of states.
    declared_balance : Balance or str
        What the caller claims; :func:`check_balanced` tests it.
    lipschitz : float, optional
        Declared Lipschitz constant with respect to the jump seminorm.
    """

    name = "custom"

    def __init__(self, func: Callable[[int, np.ndarray], float] | None = None, n: int | None = None,
                 *, declared_balance=Balance.STRICT, lipschitz: float | None = None,
                 name: str | None = None):
        self._func = func
        self.n = n
        self.declared_balance = Balance(declared_balance)
        self.lipschitz = lipschitz
        if name is not None:
            self.name = name

    def _eval(self, x: int, z: np.ndarray) -> float:
        return float(self._func(x, z))

    def __call__(self, x: int, z) -> float:
        z = np.asarray(z, dtype=float)
        return self._eval(x, z - z[x])

    def values(self, v) -> np.ndarray:
        """The vector ``(f(x, v))_x``."""
        v = np.asarray(v, dtype=float)
        return np.array([self(x, v) for x in range(len(v))])

    def jacobian(self, v) -> np.ndarray:
        """Row ``x`` is the gradient of ``f(x, .)`` at ``v`` (central differences)."""
        v = np.asarray(v, dtype=float)
        n = len(v)
        h = 1e-6 * (1.0 + np.abs(v).max())
        J = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            J[:, j] = (self.values(v + e) - self.values(v - e)) / (2 * h)
        return J

    def bound_at_zero(self) -> float:
        """``C = max_x |f(x, 0)|``."""
        return float(np.abs(self.values(np.zeros(self.n))).max())

    def margin_certificate(self, A) -> float | None:
        """Analytic lower bound on the balance margin, when one is known."""
        return None

    def lipschitz_certificate(self, A) -> float | None:
        return None

    def shifted(self, c: float) -> "Driver":
        return ShiftedDriver(self, c)

    def __repr__(self):
        return f"{type(self).__name__}(n={self.n})"


def _centre(v: np.ndarray) -> np.ndarray:
    return v - v.mean()


def vertex_certificates(A: RateMatrix, vertices: Sequence[np.ndarray]) -> tuple[float, float]:
    """Margin and Lipschitz bounds for a driver whose ``z``-gradients lie in a hull.

    If for every state ``x`` the gradient of ``f(x, .)`` lies in the convex
    hull of the columns ``(B_k - A) x``, then the balance ratio along jump
    ``x -> i`` is a Rayleigh-type quotient whose infimum over directions is
    ``(u.w - |u||w|) / 2`` with ``u = e_i / sqrt(a_ix)`` and
    ``w_j = (b_jx - a_jx) / sqrt(a_jx)``.  That expression is concave in
    ``w`` so its minimum over the hull sits at a vertex.

    Returns ``(margin, lipschitz)``; margin is ``-inf`` if some vertex puts
    rate on a jump that ``A`` forbids.
    """
    a = A.rates
    n = A.n
    margin = np.inf
    lip = 0.0
    for B in vertices:
        B = np.asarray(B, dtype=float)
        for x in range(n):
            targets = [j for j in range(n) if j != x and a[j, x] > 0]
            others = [j for j in range(n) if j != x and a[j, x] == 0]
            if any(B[j, x] != 0 for j in others):
                return -np.inf, np.inf
            if not targets:
                continue
            diff = B[targets, x] - a[targets, x]
            w = diff / np.sqrt(a[targets, x])
            wnorm = float(np.linalg.norm(w))
            lip = max(lip, wnorm)
            for k, i in enumerate(targets):
                uw = diff[k] / a[i, x]
                unorm = 1.0 / np.sqrt(a[i, x])
                margin = min(margin, 1.0 + 0.5 * (uw - unorm * wnorm))
    if margin == np.inf:
        margin = 1.0
    return float(margin), float(lip)


class ShiftedDriver(Driver):
    def __init__(self, base: Driver, c: float):
        super().__init__(n=base.n, declared_balance=base.declared_balance,
                         lipschitz=base.lipschitz, name=f"{base.name}+{c:g}")
        self.base = base
        self.c = float(c)

    def _eval(self, x, z):
        return self.base._eval(x, z) + self.c

    def values(self, v):
        return self.base.values(v) + self.c

    def jacobian(self, v):
        return self.base.jacobian(v)

    def margin_certificate(self, A):
        return self.base.margin_certificate(A)

    def lipschitz_certificate(self, A):
        return self.base.lipschitz_certificate(A)


class StateCostDriver(Driver):
    """``f(x, z) = g(x)``: the classical ergodic-cost case."""

    name = "state_cost"

    def __init__(self, g):
        g = np.asarray(g, dtype=float)
        super().__init__(n=len(g), declared_balance=Balance.STRICT, lipschitz=0.0)
        self.g = g

    def _eval(self, x, z):
        return float(self.g[x])

    def values(self, v):
        return self.g.copy()

    def jacobian(self, v):
        return np.zeros((self.n, self.n))

    def margin_certificate(self, A):
        return 1.0

    def lipschitz_certificate(self, A):
        return 0.0


def zero_driver(n: int) -> StateCostDriver:
    return StateCostDriver(np.zeros(n))


def state_cost_driver(g) -> StateCostDriver:
    return StateCostDriver(g)


class LinearDriver(Driver):
    """``f(x, z) = z^T M x + g(x)`` for a matrix with zero column sums."""

    name = "linear"

    def __init__(self, M, g=None, declared_balance=Balance.STRICT):
        M = np.asarray(M, dtype=float)
        n = M.shape[0]
        super().__init__(n=n, declared_balance=declared_balance)
        self.M = M
        self.g = np.zeros(n) if g is None else np.asarray(g, dtype=float)
        self._colsum = M.sum(axis=0)

    def _eval(self, x, z):
        return float(z @ self.M[:, x] + self.g[x])

    def values(self, v):
        vc = _centre(np.asarray(v, dtype=float))
        return self.M.T @ vc - self._colsum * vc + self.g

    def jacobian(self, v):
        return self.M.T - np.diag(self._colsum)

    def margin_certificate(self, A):
        A = as_rate_matrix(A)
        return vertex_certificates(A, [A.rates + self.M])[0]

    def lipschitz_certificate(self, A):
        A = as_rate_matrix(A)
        return vertex_certificates(A, [A.rates + self.M])[1]


class RateUncertaintyDriver(Driver):
    """``f(x, v) = 1{x in zeta} + min_{r in [1/beta, beta]} (r - 1) v^T A x``.

    A linear function of ``r`` is minimised at an endpoint, so the minimum
    is ``min((1/beta - 1) s, (beta - 1) s)`` with ``s = v^T A x``.
    """

    name = "rate_uncertainty"

    def __init__(self, zeta, beta: float, A, allow_classical: bool = False):
        A = as_rate_matrix(A)
        beta = float(beta)
        if beta < 1 or (beta == 1 and not allow_classical):
            raise BadBeta(f"beta must exceed 1 (got {beta}); pass allow_classical=True for beta=1")
        super().__init__(n=A.n, declared_balance=Balance.STRICT)
        self.A = A
        self.beta = beta
        self.zeta = tuple(sorted(set(int(x) for x in zeta)))
        if any(x < 0 or x >= A.n for x in self.zeta):
            raise DimensionMismatch(f"zeta {self.zeta} outside 0..{A.n - 1}")
        self.indicator = np.zeros(A.n)
        self.indicator[list(self.zeta)] = 1.0
        self.lipschitz = self.lipschitz_certificate(A)

    def _rates_term(self, s):
        lo, hi = 1.0 / self.beta - 1.0, self.beta - 1.0
        return np.minimum(lo * s, hi * s)

    def _eval(self, x, z):
        s = float(z @ self.A.column(x))
        return float(self.indicator[x] + self._rates_term(s))

    def values(self, v):
        s = self.A.adjoint_apply(v)
        return self.indicator + self._rates_term(s)

    def jacobian(self, v):
        s = self.A.adjoint_apply(v)
        # at s == 0 both slopes agree on the value; take the r = 1/beta branch
        slope = np.where(s >= 0, 1.0 / self.beta - 1.0, self.beta - 1.0)
        return slope[:, None] * self.A.rates.T

    def _vertices(self):
        a = self.A.rates
        return [a / self.beta, a * self.beta]

    def margin_certificate(self, A=None):
        return vertex_certificates(self.A, self._vertices())[0]

    def lipschitz_certificate(self, A=None):
        return vertex_certificates(self.A, self._vertices())[1]


def rate_uncertainty_driver(zeta, beta: float, A, allow_classical: bool = False) -> RateUncertaintyDriver:
    return RateUncertaintyDriver(zeta, beta, A, allow_classical=allow_classical)


def _check_dominated(reference: RateMatrix, matrices, gamma: float):
    off = ~np.eye(reference.n, dtype=bool)
    for key, M in matrices:
        report = rate_order_check(reference, M, gamma, strict=True)
        if not report.strictly:
            raise ControlNotDominated(key, report.violation)
        if np.any(off & (reference.rates == 0) & (M.rates > 0)):
            raise ControlNotDominated(key, "rate on a jump the reference forbids")


class HamiltonianDriver(Driver):
    """``f(x, z) = min_u { L(x, u) + z^T (A^u - A) x }`` over a finite control set.

    :meth:`selector` returns the minimising control, lowest index on ties.
    """

    name = "hamiltonian"

    def __init__(self, reference, rate_matrices, cost, gamma: float | None = None):
        reference = as_rate_matrix(reference)
        mats = [as_rate_matrix(M) for M in rate_matrices]
        cost = np.asarray(cost, dtype=float)
        if cost.shape != (reference.n, len(mats)):
            raise DimensionMismatch(f"cost table shape {cost.shape}, expected {(reference.n, len(mats))}")
        if gamma is not None:
            _check_dominated(reference, enumerate(mats), gamma)
        super().__init__(n=reference.n, declared_balance=Balance.STRICT)
        self.reference = reference
        self.rate_matrices = mats
        self.cost = cost
        self._deltas = np.stack([M.rates - reference.rates for M in mats])
        self.lipschitz = self.lipschitz_certificate(reference)

    def _terms(self, v):
        vc = _centre(np.asarray(v, dtype=float))
        # terms[u, x] = L(x, u) + v^T (A^u - A) x
        return self.cost.T + np.einsum("ujx,j->ux", self._deltas, vc)

    def _eval(self, x, z):
        return float(np.min(self.cost[x] + self._deltas[:, :, x] @ z))

    def values(self, v):
        return self._terms(v).min(axis=0)

    def policy(self, v) -> np.ndarray:
        return np.argmin(self._terms(v), axis=0)

    def selector(self, x: int, z) -> int:
        z = np.asarray(z, dtype=float)
        z = z - z[x]
        return int(np.argmin(self.cost[x] + self._deltas[:, :, x] @ z))

    def jacobian(self, v):
        pol = self.policy(v)
        return np.array([self._deltas[u, :, x] for x, u in enumerate(pol)])

    def margin_certificate(self, A=None):
        return vertex_certificates(self.reference, [M.rates for M in self.rate_matrices])[0]

    def lipschitz_certificate(self, A=None):
        return vertex_certificates(self.reference, [M.rates for M in self.rate_matrices])[1]


def hamiltonian_driver(P) -> HamiltonianDriver:
    """Hamiltonian of a control problem exposing ``reference``, ``rate_matrices``, ``cost``, ``gamma``."""
    return HamiltonianDriver(P.reference, P.rate_matrices, P.cost, gamma=P.gamma)


class RobustHamiltonianDriver(Driver):
    """``f(x, z) = min_u { L(x, u) + max_{w in W_u} z^T (A^{u,w} - A) x }``.

    Not concave in ``z``.  Ties go to the lowest ``u`` and, within it, the
    lowest ``w``.
    """

    name = "robust_hamiltonian"

    def __init__(self, reference, rate_matrices, cost, gamma: float | None = None):
        reference = as_rate_matrix(reference)
        families = [[as_rate_matrix(M) for M in fam] for fam in rate_matrices]
        if any(len(fam) == 0 for fam in families):
            raise ValueError("every control needs at least one adversary matrix")
        cost = np.asarray(cost, dtype=float)
        if cost.shape != (reference.n, len(families)):
            raise DimensionMismatch(f"cost table shape {cost.shape}, expected {(reference.n, len(families))}")
        if gamma is not None:
            pairs = [((u, w), M) for u, fam in enumerate(families) for w, M in enumerate(fam)]
            _check_dominated(reference, pairs, gamma)
        super().__init__(n=reference.n, declared_balance=Balance.STRICT)
        self.reference = reference
        self.rate_matrices = families
        self.cost = cost
        self._deltas = [np.stack([M.rates - reference.rates for M in fam]) for fam in families]
        self.lipschitz = self.lipschitz_certificate(reference)

    def _inner(self, vc):
        # inner[u] has shape (|W_u|, n)
        return [np.einsum("wjx,j->wx", D, vc) for D in self._deltas]

    def _terms(self, v):
        vc = _centre(np.asarray(v, dtype=float))
        inner = self._inner(vc)
        best_w = np.array([np.argmax(t, axis=0) for t in inner])
        sup = np.array([t.max(axis=0) for t in inner])
        return self.cost.T + sup, best_w

    def _eval(self, x, z):
        return float(min(self.cost[x, u] + (D[:, :, x] @ z).max() for u, D in enumerate(self._deltas)))

    def values(self, v):
        return self._terms(v)[0].min(axis=0)

    def policy(self, v):
        terms, best_w = self._terms(v)
        pol = np.argmin(terms, axis=0)
        worst = best_w[pol, np.arange(self.n)]
        return pol, worst

    def selector(self, x: int, z):
        z = np.asarray(z, dtype=float)
        z = z - z[x]
        vals = [self.cost[x, u] + (D[:, :, x] @ z) for u, D in enumerate(self._deltas)]
        u = int(np.argmin([t.max() for t in vals]))
        return u, int(np.argmax(vals[u]))

    def jacobian(self, v):
        pol, worst = self.policy(v)
        return np.array([self._deltas[u][w, :, x] for x, (u, w) in enumerate(zip(pol, worst))])

    def _all(self):
        return [M.rates for fam in self.rate_matrices for M in fam]

    def margin_certificate(self, A=None):
        return vertex_certificates(self.reference, self._all())[0]

    def lipschitz_certificate(self, A=None):
        return vertex_certificates(self.reference, self._all())[1]


def robust_hamiltonian_driver(P) -> RobustHamiltonianDriver:
    return RobustHamiltonianDriver(P.reference, P.rate_matrices, P.cost, gamma=P.gamma)


@dataclass
class BalanceSampler:
    """Deterministic probe pairs ``(z, z')`` for the sampled checks."""

    seed: int = 0
    n_random: int = 256
    n_bases: int = 4
    scales: tuple = (1e-3, 1.0, 1e3)
    base_scale: float = 10.0
    max_witnesses: int = 10
    margin_tol: float = 1e-9

    def pairs(self, n: int):
        rng = np.random.default_rng(self.seed)
        bases = [np.zeros(n)] + [rng.normal(size=n) * self.base_scale * (k + 1)
                                 for k in range(self.n_bases)]
        dirs = []
        eye = np.eye(n)
        for i in range(n):
            dirs += [eye[i], -eye[i]]
            for j in range(i + 1, n):
                dirs += [eye[i] - eye[j], eye[j] - eye[i]]
        for base in bases:
            for d in dirs:
                for s in self.scales:
                    yield base + s * d, base
        for _ in range(self.n_random):
            s1, s2 = 10.0 ** rng.uniform(-2, 2, size=2)
            yield rng.normal(size=n) * s1, rng.normal(size=n) * s2


@dataclass
class BalanceReport:
    cls: Balance
    margin: float
    witnesses: list = field(default_factory=list)
    samples: int = 0
    min_ratio: float = np.inf
    certificate: float | None = None


def _pair_ratios(f: Driver, A: RateMatrix, z, zp):
    """Per-state ``k_x = (f(x,z) - f(x,z')) / |z - z'|^2_x`` and jump increments ``d_i - d_x``."""
    d = z - zp
    D = d[None, :] - d[:, None]                # D[x, i] = d_i - d_x
    nsq = (A.rates.T * D * D).sum(axis=1)
    df = f.values(z) - f.values(zp)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(nsq > 0, df / nsq, 0.0)
    return k, D, nsq, df


def check_balanced(f: Driver, A, sampler: BalanceSampler | None = None) -> BalanceReport:
    """Classify ``f`` by sampling the balance ratio on every allowed jump.

    For each probe pair, state ``x`` and target ``i`` with ``a_ix > 0`` the
    ratio ``r = (f(x,z) - f(x,z')) (d_i - d_x) / |d|^2_x`` is formed
    (``d = z - z'``; ``r = 0`` when the seminorm vanishes).  Balanced means
    ``r > -1`` throughout, strictly balanced means ``r >= -1 + margin``.
    The weak condition clips the difference quotient at zero first.
    """
    A = as_rate_matrix(A)
    sampler = sampler or BalanceSampler()
    jump = (A.rates.T > 0) & ~np.eye(A.n, dtype=bool)   # jump[x, i]
    min_ratio = np.inf
    weak_fail = []
    samples = 0
    for z, zp in sampler.pairs(A.n):
        samples += 1
        k, D, _, _ = _pair_ratios(f, A, z, zp)
        r = k[:, None] * D
        rw = np.minimum(k, 0.0)[:, None] * D
        if jump.any():
            min_ratio = min(min_ratio, float(r[jump].min()))
        bad = np.argwhere(jump & (rw <= -1.0))
        for x, i in bad:
            if len(weak_fail) < sampler.max_witnesses:
                weak_fail.append((int(x), z.copy(), zp.copy(), int(i)))
    if not jump.any():
        min_ratio = 0.0
    cert = f.margin_certificate(A)
    if weak_fail:
        return BalanceReport(Balance.FAILS, 0.0, weak_fail, samples, min_ratio, cert)
    if min_ratio <= -1.0:
        return BalanceReport(Balance.WEAK, 0.0, [], samples, min_ratio, cert)
    margin = 1.0 + min_ratio
    if margin <= sampler.margin_tol:
        return BalanceReport(Balance.BALANCED, 0.0, [], samples, min_ratio, cert)
    return BalanceReport(Balance.STRICT, margin, [], samples, min_ratio, cert)


def lipschitz_estimate(f: Driver, A, sampler: BalanceSampler | None = None) -> float:
    """Largest sampled ``|f(x,z) - f(x,z')| / |z - z'|_x``: a lower bound on the true constant."""
    A = as_rate_matrix(A)
    sampler = sampler or BalanceSampler()
    best = 0.0
    for z, zp in sampler.pairs(A.n):
        _, _, nsq, df = _pair_ratios(f, A, z, zp)
        ok = nsq > 0
        if ok.any():
            best = max(best, float((np.abs(df[ok]) / np.sqrt(nsq[ok])).max()))
    return best


def driver_from_json(obj: dict, A) -> Driver:
    """Build a driver from its JSON description.

    Recognised forms::

        {"type": "rate_uncertainty", "zeta": [0], "beta": 2.0}
        {"type": "hamiltonian", "controls": [...], "costs": [...], "gamma": 0.1}
        {"type": "state_cost", "g": [...]}
    """
    A = as_rate_matrix(A)
    kind = obj.get("type")
    allowed = {
        "rate_uncertainty": {"type", "zeta", "beta", "allow_classical"},
        "hamiltonian": {"type", "controls", "costs", "gamma", "convention"},
        "robust_hamiltonian": {"type", "controls", "costs", "gamma", "convention"},
        "state_cost": {"type", "g"},
        "zero": {"type"},
    }
    if kind not in allowed:
        raise ValueError(f"unknown driver type {kind!r}")
    extra = set(obj) - allowed[kind]
    if extra:
        raise ValueError(f"unknown keys for {kind} driver: {sorted(extra)}")
    if kind == "rate_uncertainty":
        return RateUncertaintyDriver(obj["zeta"], obj["beta"], A, obj.get("allow_classical", False))
    if kind == "state_cost":
        g = obj["g"]
        if len(g) != A.n:
            raise DimensionMismatch(f"g has {len(g)} entries, chain has {A.n} states")
        return StateCostDriver(g)
    if kind == "zero":
        return zero_driver(A.n)
    from .chain_core import validate_rate_matrix

    conv = obj.get("convention", "rates")
    gamma = obj.get("gamma")
    if kind == "hamiltonian":
        mats = [validate_rate_matrix(M, convention=conv) for M in obj["controls"]]
        return HamiltonianDriver(A, mats, obj["costs"], gamma=gamma)
    fams = [[validate_rate_matrix(M, convention=conv) for M in fam] for fam in obj["controls"]]
    return RobustHamiltonianDriver(A, fams, obj["costs"], gamma=gamma)
