import numpy as np
import pytest

from hgconv import layer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _no_leaked_faults():
    yield
    layer.FAULTS.clear()


def naive_dft(x):
    """O(n^2) DFT straight from the definition."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n).T


def naive_idft(X):
    X = np.asarray(X, dtype=np.complex128)
    n = X.shape[-1]
    k = np.arange(n)
    return X @ np.exp(2j * np.pi * np.outer(k, k) / n).T / n


def loop_circ_conv(x, w, n):
    """out[m] = sum_j x[j] w[(m - j) mod n], with zero padding to n."""
    xp = np.zeros(n)
    wp = np.zeros(n)
    xp[: len(x)] = x
    wp[: len(w)] = w
    return np.array([sum(xp[j] * wp[(m - j) % n] for j in range(n)) for m in range(n)])


def loop_circ_corr(g, w, n):
    return np.array([sum(g[m] * w[(m - j) % n] for m in range(n)) for j in range(n)])


ACCEPTANCE_LINES = []


def record_acceptance(number, name, passed, detail):
    ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
