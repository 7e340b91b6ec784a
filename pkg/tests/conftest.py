import numpy as np
import pytest

from ebsde_chain.chain_core import path_matrix, random_rate_matrix, validate_rate_matrix


@pytest.fixture
def pathA():
    return path_matrix()


@pytest.fixture
def two_state():
    return validate_rate_matrix([[-1.0, 1.0], [1.0, -1.0]])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_chain(n, seed, density=0.6):
    return random_rate_matrix(n, np.random.default_rng(seed), density=density)


def cyclic_chain(rates):
    """Directed cycle 0 -> 1 -> ... -> 0 with the given exit rates."""
    n = len(rates)
    M = np.zeros((n, n))
    for x, r in enumerate(rates):
        M[(x + 1) % n, x] = r
        M[x, x] = -r
    return validate_rate_matrix(M)


def dominated_matrix(A, gamma, rng, low=0.4, high=2.0):
    """``gamma A + E`` with ``E`` a random rate matrix on the jump pattern of ``A``."""
    mask = (A.rates > 0) & ~np.eye(A.n, dtype=bool)
    E = mask * rng.uniform(low, high, size=A.rates.shape)
    np.fill_diagonal(E, -E.sum(axis=0))
    return validate_rate_matrix(gamma * A.rates + E)


def random_hamiltonian(A, rng, m=3, gamma=0.3):
    from ebsde_chain.drivers import HamiltonianDriver

    Bs = [dominated_matrix(A, gamma, rng) for _ in range(m)]
    return HamiltonianDriver(A, Bs, rng.uniform(-1, 1, size=(A.n, m)), gamma=gamma)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
