"""Monte-Carlo checks: exact trajectories, coupling times, the split chain and rate estimation.

Every trajectory draws from its own counter-based stream
``Philox(SeedSequence([seed, index]))``, so ensembles are reproducible in
any evaluation order.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .chain_core import RateMatrix, as_rate_matrix, rate_order_check, validate_rate_matrix
from .errors import MeetingTimeout, NotStrictlyControlled

MAX_MEETING_JUMPS = 10**6
MIN_EXITS = 30
_BLOCK = 4096


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for trajectory ``index`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass
class Trajectory:
    """Piecewise-constant path: ``states[k]`` holds on ``[jump_times[k-1], jump_times[k])``.

    ``jump_times`` has one entry fewer than ``states``.  Split-chain paths
    store split indices ``layer * base_n + x`` in ``states`` and set
    ``base_n``.
    """

    jump_times: np.ndarray
    states: np.ndarray
    horizon: float
    seed: int | None = None
    n: int | None = None
    base_n: int | None = None

    @property
    def layers(self) -> np.ndarray | None:
        return None if self.base_n is None else self.states // self.base_n

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def state_at(self, t: float) -> int:
        return int(self.states[np.searchsorted(self.jump_times, t, side="right")])

    def holding_times(self) -> np.ndarray:
        edges = np.concatenate([[0.0], self.jump_times, [self.horizon]])
        return np.diff(edges)

    def occupation(self, n: int | None = None) -> np.ndarray:
        """Fraction of ``[0, horizon]`` spent in each state."""
        n = n or self.n or int(self.states.max()) + 1
        occ = np.bincount(self.states, weights=self.holding_times(), minlength=n)
        return occ / self.horizon if self.horizon > 0 else occ

    def layer_occupation(self) -> float:
        """Fraction of time in layer 1 (split-chain paths only)."""
        if self.layers is None:
            raise ValueError("not a split-chain trajectory")
        return float(self.holding_times() @ self.layers / self.horizon)

    def to_csv(self, path):
        """Write ``(time, state)`` rows, plus ``layer`` for split-chain paths."""
        times = np.concatenate([[0.0], self.jump_times])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "state"] + (["layer"] if self.layers is not None else []))
            for k, t in enumerate(times):
                row = [repr(float(t)), int(self.states[k])]
                if self.layers is not None:
                    row.append(int(self.layers[k]))
                w.writerow(row)

    def tobytes(self) -> bytes:
        parts = [self.jump_times.tobytes(), self.states.tobytes()]
        if self.layers is not None:
            parts.append(self.layers.tobytes())
        return b"".join(parts)


class _Jumper:
    """Holding times and jump targets for a rate matrix, drawing uniforms in blocks."""

    def __init__(self, rates: np.ndarray, rng: np.random.Generator, block: int = _BLOCK):
        n = rates.shape[0]
        off = rates.copy()
        np.fill_diagonal(off, 0.0)
        self.exit = off.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.cum = np.cumsum(off, axis=0) / np.where(self.exit > 0, self.exit, 1.0)
        self.cum[-1, :] = 1.0
        self.n = n
        self.rng = rng
        self._e = self._u = None
        self.block = block
        self._k = block

    def _refill(self):
        self._e = self.rng.standard_exponential(self.block)
        self._u = self.rng.random(self.block)
        self._k = 0

    def step(self, x: int) -> tuple[float, int]:
        """``(holding time, next state)``; ``(inf, x)`` for an absorbing state."""
        if self.exit[x] <= 0:
            return np.inf, x
        if self._k == self.block:
            self._refill()
        e, u = self._e[self._k], self._u[self._k]
        self._k += 1
        y = int(np.searchsorted(self.cum[:, x], u, side="right"))
        return e / self.exit[x], min(y, self.n - 1)


def _run(rates: np.ndarray, x0: int, horizon: float, rng, max_jumps: int | None):
    jumper = _Jumper(rates, rng)
    times, states = [], [int(x0)]
    t, x = 0.0, int(x0)
    limit = np.inf if max_jumps is None else max_jumps
    while len(times) < limit:
        h, y = jumper.step(x)
        if t + h >= horizon:
            break
        t += h
        x = y
        times.append(t)
        states.append(x)
    return np.array(times, dtype=float), np.array(states, dtype=np.int64)


def simulate(A, x0: int, horizon: float, seed: int = 0, *, index: int = 0,
             max_jumps: int | None = None) -> Trajectory:
    """Exact simulation: Exponential(|a_xx|) holding times, jumps proportional to column ``x``.

    With ``max_jumps`` the path stops at that jump and its horizon is the
    last jump time; ``horizon`` may then be infinite.
    """
    A = as_rate_matrix(A)
    if not 0 <= x0 < A.n:
        raise ValueError(f"initial state {x0} out of range")
    if horizon < 0 or (np.isinf(horizon) and max_jumps is None):
        raise ValueError("horizon must be finite and nonnegative unless max_jumps is given")
    times, states = _run(A.rates, x0, horizon, stream(seed, index), max_jumps)
    end = horizon if max_jumps is None or len(times) < max_jumps else float(times[-1])
    return Trajectory(times, states, float(end), seed, n=A.n)


def ensemble(A, x0: int, horizon: float, samples: int, seed: int = 0) -> list[Trajectory]:
    return [simulate(A, x0, horizon, seed, index=i) for i in range(samples)]


def empirical_law(trajectories, t: float, n: int) -> np.ndarray:
    """Fraction of trajectories in each state at time ``t``."""
    counts = np.bincount([tr.state_at(t) for tr in trajectories], minlength=n)
    return counts / len(trajectories)


# ---------------------------------------------------------------- coupling


@dataclass
class CouplingStats:
    meeting_times: np.ndarray
    jump_counts: np.ndarray
    betas: np.ndarray
    mgf: np.ndarray
    mgf_halfwidth: np.ndarray

    def tail_rate(self, fraction: float = 1 / 3, min_tail: int = 10) -> tuple[float, float]:
        return tail_rate(self.meeting_times, fraction, min_tail)


def tail_rate(samples, fraction: float = 1 / 3, min_tail: int = 10) -> tuple[float, float]:
    """Exponential decay rate of the empirical survival function over its tail.

    Fits ``log S(t)`` linearly on the largest ``fraction`` of the samples,
    leaving out the last ``min_tail`` points.  Returns ``(rate, R^2)``.
    """
    t = np.sort(np.asarray(samples, dtype=float))
    n = len(t)
    surv = 1.0 - np.arange(1, n + 1) / n
    lo = int(np.ceil(n * (1 - fraction)))
    hi = n - min_tail
    if hi - lo < 3:
        raise ValueError("too few samples for a tail fit")
    fit = stats.linregress(t[lo:hi], np.log(surv[lo:hi]))
    return float(-fit.slope), float(fit.rvalue ** 2)


def _meet(jumper_x: _Jumper, jumper_y: _Jumper, x: int, y: int, cap: int) -> tuple[float, int]:
    hx, nx = jumper_x.step(x)
    hy, ny = jumper_y.step(y)
    tx, ty = hx, hy
    jumps = 0
    while jumps < cap:
        jumps += 1
        if tx <= ty:
            x = nx
            t = tx
            if x == y:
                return t, jumps
            hx, nx = jumper_x.step(x)
            tx = t + hx
        else:
            y = ny
            t = ty
            if x == y:
                return t, jumps
            hy, ny = jumper_y.step(y)
            ty = t + hy
    raise MeetingTimeout(f"chains did not meet within {cap} jumps")


def coupling_times(A, x: int, y: int, samples: int = 1000, seed: int = 0, *, betas=(0.5, 1.0),
                   max_jumps: int = MAX_MEETING_JUMPS) -> CouplingStats:
    """Meeting times of two independent copies started at ``x != y``.

    Meetings can only happen at a jump of one of the chains, so only jump
    times are checked.  ``mgf`` holds the sample mean of ``exp(beta T)``
    with normal-approximation 95% half-widths.

    Raises
    ------
    ValueError
        ``x == y`` (the meeting time is 0).
    MeetingTimeout
        A pair did not meet within ``max_jumps`` jumps.
    """
    A = as_rate_matrix(A)
    if x == y:
        raise ValueError("start states must differ")
    if samples < 1000:
        warnings.warn("fewer than 1000 samples; normal-approximation intervals are rough", RuntimeWarning,
                      stacklevel=2)
    T = np.empty(samples)
    J = np.empty(samples, dtype=np.int64)
    for i in range(samples):
        rng = stream(seed, i)
        T[i], J[i] = _meet(_Jumper(A.rates, rng, 64), _Jumper(A.rates, rng, 64), x, y, max_jumps)
    betas = np.atleast_1d(np.asarray(betas, dtype=float))
    with np.errstate(over="ignore"):
        e = np.exp(np.outer(betas, T))
    mgf = e.mean(axis=1)
    half = 1.96 * e.std(axis=1, ddof=1) / np.sqrt(samples) if samples > 1 else np.full(len(betas), np.inf)
    return CouplingStats(T, J, betas, mgf, half)


# ------------------------------------------------------------- split chain


@dataclass(frozen=True)
class SplitChainState:
    base: int
    layer: int

    def __post_init__(self):
        if self.layer not in (0, 1):
            raise ValueError("layer must be 0 or 1")

    def index(self, n: int) -> int:
        return self.layer * n + self.base


def _split_parts(A, B, gamma):
    A, B = as_rate_matrix(A), as_rate_matrix(B)
    if not 0 < gamma < 1:
        raise ValueError("splitting weight must lie in (0, 1)")
    report = rate_order_check(A, B, gamma, strict=True)
    if not report.strictly:
        raise NotStrictlyControlled(f"B is not strictly controlled by A with gamma={gamma}: {report.violation}")
    G = (B.rates - gamma * A.rates) / (1 - gamma)
    return A, B, G


def split_rate_matrix(A, B, gamma: float, *, refresh: bool = False) -> RateMatrix:
    """Rate matrix of the split chain on ``n x {0, 1}`` (index ``layer * n + x``).

    Layer-1 copies jump with the columns of ``A``, layer-0 copies with
    ``G = (B - gamma A) / (1 - gamma)``; every destination is sent to layer
    0 or 1 with probabilities ``(1 - gamma, gamma)`` and each diagonal entry
    stays on its own copy.  The two layers have different holding rates, so
    the base process of this chain is not Markov with rates ``B``.  With
    ``refresh`` each copy also re-draws its layer at rate
    ``max(|a_xx|, |g_xx|) - |own diagonal|``; the base process is then
    exactly Markov with rates ``B`` and the layer is independent of it.
    """
    A, B, G = _split_parts(A, B, gamma)
    n = A.n
    S = np.zeros((2 * n, 2 * n))
    split = np.array([1 - gamma, gamma])
    for layer, M in ((1, A.rates), (0, G)):
        for x in range(n):
            col = layer * n + x
            off = M[:, x].copy()
            off[x] = 0.0
            for dest in (0, 1):
                S[dest * n:(dest + 1) * n, col] += split[dest] * off
    if refresh:
        q = np.maximum(np.abs(np.diag(A.rates)), np.abs(np.diag(G)))
        for layer, M in ((1, A.rates), (0, G)):
            for x in range(n):
                spare = q[x] - abs(M[x, x])
                other = 1 - layer
                S[other * n + x, layer * n + x] += spare * split[other]
    np.fill_diagonal(S, 0.0)
    np.fill_diagonal(S, -S.sum(axis=0))
    return validate_rate_matrix(S)


def project_split(traj: Trajectory) -> Trajectory:
    """Base-state path of a split-chain trajectory, dropping pure layer changes."""
    n = traj.base_n
    if n is None:
        raise ValueError("not a split-chain trajectory")
    base = traj.states % n
    keep = np.concatenate([[True], base[1:] != base[:-1]])
    return Trajectory(traj.jump_times[keep[1:]], base[keep], traj.horizon, traj.seed, n=n)


def split_chain_simulate(A, B, gamma: float, x0, horizon: float, seed: int = 0, *, index: int = 0,
                         refresh: bool = True, max_jumps: int | None = None) -> Trajectory:
    """Simulate the split chain; ``x0`` is a :class:`SplitChainState` or a base state.

    A bare base state gets its layer drawn with probabilities
    ``(1 - gamma, gamma)`` from the trajectory's stream.  The returned path
    lives on the split space; use :func:`project_split` for the base
    process.

    Raises
    ------
    NotStrictlyControlled
        ``B - gamma A`` fails the strict order.
    """
    S = split_rate_matrix(A, B, gamma, refresh=refresh)
    n = S.n // 2
    rng = stream(seed, index)
    if not isinstance(x0, SplitChainState):
        x0 = SplitChainState(int(x0), int(rng.random() < gamma))
    if not 0 <= x0.base < n:
        raise ValueError(f"initial state {x0.base} out of range")
    times, states = _run(S.rates, x0.index(n), horizon, rng, max_jumps)
    end = horizon if max_jumps is None or len(times) < max_jumps else float(times[-1])
    return Trajectory(times, states, float(end), seed, n=2 * n, base_n=n)


# ------------------------------------------------------- rate estimation


@dataclass
class EmpiricalGenerator:
    """Rate estimates ``a_ij = (jumps j -> i) / (time in j)`` with Poisson intervals."""

    rates: np.ndarray
    counts: np.ndarray
    exposure: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    low_confidence: np.ndarray = field(repr=False)

    @property
    def exits(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def zscores(self, B) -> np.ndarray:
        """``(a_hat - b) / sqrt(b / T_j)`` on off-diagonal entries with ``b > 0``; NaN elsewhere.

        Entries where ``b = 0`` but jumps were seen get ``inf``.
        """
        b = np.asarray(as_rate_matrix(B).rates)
        z = np.full(b.shape, np.nan)
        off = ~np.eye(b.shape[0], dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            sd = np.sqrt(b / self.exposure[None, :])
            pos = off & (b > 0)
            z[pos] = (self.rates[pos] - b[pos]) / sd[pos]
        z[off & (b == 0) & (self.counts > 0)] = np.inf
        return z

    def matrix(self) -> RateMatrix:
        return validate_rate_matrix(self.rates)


def empirical_generator(trajectories, n: int | None = None, *, level: float = 0.95) -> EmpiricalGenerator:
    """Estimate the rate matrix from one trajectory or an ensemble.

    States with fewer than 30 observed exits are flagged in
    ``low_confidence``; their estimates are still returned.
    """
    if isinstance(trajectories, Trajectory):
        trajectories = [trajectories]
    n = n or trajectories[0].n or max(int(tr.states.max()) for tr in trajectories) + 1
    counts = np.zeros((n, n))
    exposure = np.zeros(n)
    for tr in trajectories:
        exposure += np.bincount(tr.states, weights=tr.holding_times(), minlength=n)[:n]
        np.add.at(counts, (tr.states[1:], tr.states[:-1]), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = np.where(exposure > 0, counts / exposure, 0.0)
        a = 1 - level
        lo = np.where(counts > 0, stats.chi2.ppf(a / 2, 2 * counts) / 2, 0.0) / exposure
        hi = stats.chi2.ppf(1 - a / 2, 2 * counts + 2) / 2 / exposure
    np.fill_diagonal(rates, 0.0)
    np.fill_diagonal(rates, -rates.sum(axis=0))
    low = counts.sum(axis=0) < MIN_EXITS
    return EmpiricalGenerator(rates, counts, exposure, lo, hi, low)


def trajectories_to_csv(trajectories, path):
    """Stack several trajectories as ``(path, time, state)`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "time", "state"])
        for k, tr in enumerate(trajectories):
            for t, x in zip(np.concatenate([[0.0], tr.jump_times]), tr.states):
                w.writerow([k, repr(float(t)), int(x)])
