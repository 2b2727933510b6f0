import numpy as np
import pytest


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Literal triple loop; the matmul oracle."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kk):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def brute_force_covariance(tokens: np.ndarray) -> np.ndarray:
    """Mean-subtract + accumulate outer products; the covariance oracle."""
    n = tokens.shape[0]
    mu = tokens.mean(axis=0)
    sigma = np.zeros((tokens.shape[1], tokens.shape[1]))
    for i in range(n):
        d = tokens[i] - mu
        sigma += np.outer(d, d)
    return sigma / n


def random_spd(rng: np.random.Generator, n: int, eigenvalues: np.ndarray) -> np.ndarray:
    """SPD matrix with a prescribed spectrum in a random orthogonal basis."""
    basis, _ = np.linalg.qr(rng.normal(size=(n, n)))
    m = (basis * eigenvalues) @ basis.T
    return 0.5 * (m + m.T)


def unit_trace_spd(rng: np.random.Generator, n: int, min_eig: float = 0.02) -> np.ndarray:
    lam = rng.uniform(min_eig, 1.0, size=n)
    lam = lam / lam.sum()
    return random_spd(rng, n, lam)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240613)
