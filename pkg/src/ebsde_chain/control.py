"""Average-cost Markov decision problems solved through the ergodic equation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .chain_core import (RateMatrix, as_rate_matrix, is_irreducible, rate_matrix_from_json,
                         stationary_distribution, validate_rate_matrix)
from .drivers import (HamiltonianDriver, RobustHamiltonianDriver, hamiltonian_driver,
                      robust_hamiltonian_driver)
from .ebsde import EbsdeSolution, solve
from .errors import DimensionMismatch, Reducible, TooManyPolicies

ENUMERATION_CAP = 10**6


def _matrix(obj) -> RateMatrix:
    if isinstance(obj, dict):
        return rate_matrix_from_json(obj)
    return validate_rate_matrix(obj)


@dataclass(frozen=True)
class FeedbackPolicy:
    """Stationary feedback: state ``x`` uses control ``assignment[x]``."""

    assignment: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(u) for u in self.assignment))

    @property
    def n(self) -> int:
        return len(self.assignment)

    def __getitem__(self, x: int) -> int:
        return self.assignment[x]

    def as_array(self) -> np.ndarray:
        return np.array(self.assignment, dtype=int)


def _check_policy(pol: FeedbackPolicy, n: int, m: int):
    if pol.n != n:
        raise DimensionMismatch(f"policy covers {pol.n} states, problem has {n}")
    for x, u in enumerate(pol.assignment):
        if not 0 <= u < m:
            raise ValueError(f"control {u} at state {x} out of range")


def _policy_matrix(columns: list[np.ndarray]) -> RateMatrix:
    return validate_rate_matrix(np.column_stack(columns))


@dataclass
class ControlProblem:
    """Finite control set with per-control rate matrices ``A^u`` and cost ``L(x, u)``.

    Every ``A^u`` must be strictly controlled by ``reference`` with
    constant ``gamma`` and may not add jumps the reference forbids.
    """

    reference: RateMatrix
    rate_matrices: list
    cost: np.ndarray
    gamma: float
    controls: list | None = None

    def __post_init__(self):
        self.reference = as_rate_matrix(self.reference)
        self.rate_matrices = [as_rate_matrix(M) for M in self.rate_matrices]
        self.cost = np.asarray(self.cost, dtype=float)
        if not self.rate_matrices:
            raise ValueError("need at least one control")
        if self.controls is None:
            self.controls = list(range(len(self.rate_matrices)))
        if len(self.controls) != len(self.rate_matrices):
            raise DimensionMismatch("one rate matrix per control is required")
        if any(M.n != self.reference.n for M in self.rate_matrices):
            raise DimensionMismatch("control rate matrices must match the reference size")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("cost table must be finite")
        self.driver = HamiltonianDriver(self.reference, self.rate_matrices, self.cost, gamma=self.gamma)

    @property
    def n(self) -> int:
        return self.reference.n

    @property
    def m(self) -> int:
        return len(self.rate_matrices)

    def policy_matrix(self, pol: FeedbackPolicy) -> RateMatrix:
        """Column ``x`` taken from ``A^{pol(x)}``."""
        _check_policy(pol, self.n, self.m)
        return _policy_matrix([self.rate_matrices[u].rates[:, x] for x, u in enumerate(pol.assignment)])

    def policy_cost(self, pol: FeedbackPolicy) -> np.ndarray:
        return self.cost[np.arange(self.n), pol.as_array()]


@dataclass
class RobustControlProblem:
    """As :class:`ControlProblem` with a finite adversary family ``A^{u,w}`` per control.

    The family is used as given; closure under column interchange is not
    enforced, so the solved problem is the per-state decoupled one.
    """

    reference: RateMatrix
    rate_matrices: list
    cost: np.ndarray
    gamma: float
    controls: list | None = None

    def __post_init__(self):
        self.reference = as_rate_matrix(self.reference)
        self.rate_matrices = [[as_rate_matrix(M) for M in fam] for fam in self.rate_matrices]
        self.cost = np.asarray(self.cost, dtype=float)
        if not self.rate_matrices:
            raise ValueError("need at least one control")
        if self.controls is None:
            self.controls = list(range(len(self.rate_matrices)))
        if len(self.controls) != len(self.rate_matrices):
            raise DimensionMismatch("one adversary family per control is required")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("cost table must be finite")
        self.driver = RobustHamiltonianDriver(self.reference, self.rate_matrices, self.cost, gamma=self.gamma)

    @property
    def n(self) -> int:
        return self.reference.n

    @property
    def m(self) -> int:
        return len(self.rate_matrices)

    def policy_matrix(self, pol: FeedbackPolicy, worst) -> RateMatrix:
        _check_policy(pol, self.n, self.m)
        return _policy_matrix([self.rate_matrices[u][w].rates[:, x]
                               for x, (u, w) in enumerate(zip(pol.assignment, worst))])

    def nominal(self, w: int = 0) -> ControlProblem:
        """Control problem using adversary index ``w`` of every family."""
        return ControlProblem(self.reference, [fam[w] for fam in self.rate_matrices], self.cost,
                              self.gamma, self.controls)


def _ergodic_average(M: RateMatrix, costs: np.ndarray) -> float:
    if not is_irreducible(M):
        raise Reducible("policy-induced chain is not irreducible")
    return float(stationary_distribution(M) @ costs)


def evaluate_policy(P: ControlProblem, pol: FeedbackPolicy) -> float:
    """Long-run average cost ``sum_x pi_pol(x) L(x, pol(x))``; independent of the start state."""
    return _ergodic_average(P.policy_matrix(pol), P.policy_cost(pol))


def evaluate_robust_policy(P: RobustControlProblem, pol: FeedbackPolicy, worst) -> float:
    """Average cost when the adversary plays the stationary selection ``worst``."""
    return _ergodic_average(P.policy_matrix(pol, worst), P.cost[np.arange(P.n), pol.as_array()])


def _batch_averages(columns: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Ergodic averages for a batch of rate matrices ``columns[k]`` with costs ``costs[k]``.

    Solves ``M pi = 0`` with the last equation replaced by ``sum(pi) = 1``.
    """
    K, n, _ = columns.shape
    lhs = columns.copy()
    lhs[:, -1, :] = 1.0
    rhs = np.zeros((K, n, 1))
    rhs[:, -1, 0] = 1.0
    pis = np.linalg.solve(lhs, rhs)[..., 0]
    return np.einsum("kx,kx->k", pis, costs)


def brute_force_optimal(P: ControlProblem, *, cap: int = ENUMERATION_CAP,
                        chunk: int = 4096) -> tuple[float, FeedbackPolicy]:
    """Minimum average cost over all deterministic stationary policies.

    Policies are visited in lexicographic order and the first minimiser
    is kept (ties within 1e-12 go to the earlier policy).

    Raises
    ------
    TooManyPolicies
        ``m ** n`` exceeds ``cap``.
    """
    if P.m ** P.n > cap:
        raise TooManyPolicies(f"{P.m}^{P.n} policies exceed the cap {cap}")
    stack = np.stack([M.rates for M in P.rate_matrices])  # (m, n, n)
    xs = np.arange(P.n)
    best, best_pol = np.inf, None
    it = itertools.product(range(P.m), repeat=P.n)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=int)
        if block.size == 0:
            break
        cols = stack[block, :, xs]  # (K, n_x, n_i): column x of A^{pol(x)}
        mats = np.transpose(cols, (0, 2, 1))
        vals = _batch_averages(mats, P.cost[xs, block])
        k = int(np.argmin(vals))
        if vals[k] < best - 1e-12:
            best, best_pol = float(vals[k]), FeedbackPolicy(block[k])
    return best, best_pol


def brute_force_robust(P: RobustControlProblem, *, cap: int = ENUMERATION_CAP) -> tuple[float, FeedbackPolicy]:
    """``min`` over control policies of ``max`` over stationary adversary selections."""
    total = sum(math.prod(len(P.rate_matrices[u]) for u in pol)
                for pol in itertools.product(range(P.m), repeat=P.n))
    if total > cap:
        raise TooManyPolicies(f"{total} policy pairs exceed the cap {cap}")
    best, best_pol = np.inf, None
    for assignment in itertools.product(range(P.m), repeat=P.n):
        pol = FeedbackPolicy(assignment)
        worst = max(evaluate_robust_policy(P, pol, w)
                    for w in itertools.product(*[range(len(P.rate_matrices[u])) for u in assignment]))
        if worst < best - 1e-12:
            best, best_pol = worst, pol
    return best, best_pol


def solve_control(P: ControlProblem, method: str = "direct", **kw) -> tuple[EbsdeSolution, FeedbackPolicy]:
    """Optimal average cost, relative value and optimal feedback ``x -> argmin_u``."""
    f = hamiltonian_driver(P)
    sol = solve(P.reference, f, method, **kw)
    return sol, FeedbackPolicy(f.policy(sol.v))


def solve_robust_control(P: RobustControlProblem, method: str = "direct",
                         **kw) -> tuple[EbsdeSolution, FeedbackPolicy, tuple[int, ...]]:
    """Robust value, minimising policy and the per-state worst-case adversary index."""
    f = robust_hamiltonian_driver(P)
    sol = solve(P.reference, f, method, **kw)
    pol, worst = f.policy(sol.v)
    return sol, FeedbackPolicy(pol), tuple(int(w) for w in worst)


def certificate_residual(P: ControlProblem, sol: EbsdeSolution, pol: FeedbackPolicy) -> float:
    """``max_x |L(x, pol(x)) + v^T (A^{pol(x)} - A) x - f(x, v)|``."""
    v = sol.v - sol.v.mean()
    fv = P.driver.values(v)
    terms = [P.cost[x, u] + v @ (P.rate_matrices[u].rates[:, x] - P.reference.rates[:, x])
             for x, u in enumerate(pol.assignment)]
    return float(np.abs(np.array(terms) - fv).max())


_PROBLEM_KEYS = {"states", "controls", "reference", "rate_matrices", "cost", "gamma"}


def control_problem_from_json(obj: dict, robust: bool | None = None):
    """Build a (robust) control problem from a JSON object.

    Keys: ``reference`` and ``rate_matrices`` (matrices as nested lists in
    the rate convention, or chain objects), ``cost`` (``n x m``),
    ``gamma``, optional ``states`` and ``controls``.  A list of lists of
    matrices per control makes the problem robust.
    """
    unknown = set(obj) - _PROBLEM_KEYS
    if unknown:
        raise ValueError(f"unknown keys in problem: {sorted(unknown)}")
    for key in ("reference", "rate_matrices", "cost", "gamma"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    ref = _matrix(obj["reference"])
    if "states" in obj and obj["states"] != ref.n:
        raise DimensionMismatch(f"'states' = {obj['states']} but reference has {ref.n}")
    mats = obj["rate_matrices"]
    nested = bool(mats) and isinstance(mats[0], list) and bool(mats[0]) and (
        isinstance(mats[0][0], dict) or np.ndim(mats[0][0]) == 2)
    if robust is None:
        robust = nested
    if robust:
        fams = [[_matrix(M) for M in fam] if nested else [_matrix(fam)] for fam in mats]
        return RobustControlProblem(ref, fams, obj["cost"], float(obj["gamma"]), obj.get("controls"))
    if nested:
        raise ValueError("per-adversary matrices given; use the robust solver")
    return ControlProblem(ref, [_matrix(M) for M in mats], obj["cost"], float(obj["gamma"]), obj.get("controls"))


def random_control_problem(n: int, m: int, rng, *, gamma: float = 0.1, density: float = 1.0) -> ControlProblem:
    """Random instance with ``A^u = gamma A + E_u`` on the zero pattern of a random ``A``."""
    from .chain_core import random_rate_matrix

    A = random_rate_matrix(n, rng, density=density)
    mask = (A.rates > 0).astype(float)
    mats = []
    for _ in range(m):
        E = mask * rng.uniform(0.2, 2.0, size=(n, n))
        np.fill_diagonal(E, 0.0)
        np.fill_diagonal(E, -E.sum(axis=0))
        mats.append(validate_rate_matrix(gamma * A.rates + E))
    return ControlProblem(A, mats, rng.uniform(0.0, 1.0, size=(n, m)), gamma)
