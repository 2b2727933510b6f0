"""Second-order pooling of visual tokens.

Forward pipeline, for a token matrix X with N rows (tokens) and r columns:

    sigma    = (1/N) * Xc^T Xc                 with Xc = X - mean(X)
    q        = sigma / tr(sigma)               trace pre-normalization
    j_k      = NewtonSchulz_k(q)               approximate sqrt of q
    s        = sqrt(tr(sigma)) * j_k           post-compensation
    features = upper triangle of s, row-major  length r(r+1)/2

The Newton-Schulz pair, from J_0 = Q and P_0 = I:

    J_k = 1/2 * J_{k-1} (3 I - P_{k-1} J_{k-1})
    P_k = 1/2 * (3 I - P_{k-1} J_{k-1}) P_{k-1}

uses matrix products only; trace pre-normalization keeps it in its local
convergence region, and the sqrt(trace) compensation undoes the scaling.

The backward pass reverses the unrolled iteration exactly, using the tape of
saved J/P iterates, so gradients agree with central finite differences of
the forward to first order in h^2.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateCovarianceError,
    DivergenceError,
    InsufficientDataError,
    ShapeError,
    ValidationError,
)
from .linalg import as_matrix, check_symmetric, matmul


@dataclass(frozen=True)
class SoPoolConfig:
    """Settings for the second-order pooling branch."""

    reduced_dim: int
    ns_iterations: int = 3
    trace_epsilon: float = 1e-8
    # Non-strict mode turns a zero-variance token set into zero features with
    # a flag instead of an error, so degenerate episodes still train on the
    # first-order path.
    strict_degeneracy: bool = False

    def __post_init__(self):
        if self.reduced_dim < 1:
            raise ConfigError(f"reduced_dim must be >= 1, got {self.reduced_dim}")
        if self.ns_iterations < 1:
            raise ConfigError(f"ns_iterations must be >= 1, got {self.ns_iterations}")
        if not self.trace_epsilon > 0:
            raise ConfigError(f"trace_epsilon must be > 0, got {self.trace_epsilon}")

    @property
    def feature_dim(self) -> int:
        r = self.reduced_dim
        return r * (r + 1) // 2


@dataclass
class SoPoolTape:
    """Intermediates saved by the forward pass for the backward pass."""

    config: SoPoolConfig
    n_tokens: int
    centered: np.ndarray
    sigma: np.ndarray
    trace: float
    degenerate: bool
    q: np.ndarray | None = None
    j_iters: list[np.ndarray] | None = None  # J_0 .. J_k
    p_iters: list[np.ndarray] | None = None  # P_0 .. P_k


def _center(tokens: np.ndarray) -> np.ndarray:
    return tokens - tokens.mean(axis=0)


def _validate_tokens(tokens, dim: int | None = None) -> np.ndarray:
    t = as_matrix(tokens, "tokens")
    if t.shape[0] < 2:
        raise InsufficientDataError(
            f"covariance pooling needs at least 2 tokens, got {t.shape[0]}"
        )
    if dim is not None and t.shape[1] != dim:
        raise ShapeError(f"tokens have dim {t.shape[1]}, config expects {dim}")
    return t


def covariance_pool(tokens) -> np.ndarray:
    """Token covariance (1/N) sum_i (x_i - mu)(x_i - mu)^T.

    Built as Xc^T Xc through the deterministic kernel, so the result is
    bitwise symmetric.
    """
    t = _validate_tokens(tokens)
    centered = _center(t)
    return matmul(centered.T, centered) / t.shape[0]


def trace_normalize(sigma, trace_epsilon: float = 1e-8) -> tuple[np.ndarray, float]:
    """Divide by the trace so the Newton-Schulz iteration converges locally."""
    s = as_matrix(sigma, "sigma")
    if s.shape[0] != s.shape[1]:
        raise ShapeError(f"sigma must be square, got {s.shape}")
    trace = float(np.trace(s))
    if trace <= trace_epsilon:
        raise DegenerateCovarianceError(
            f"covariance trace {trace:.3e} <= epsilon {trace_epsilon:.0e}"
        )
    return s / trace, trace


def newton_schulz_sqrt(q, k: int) -> tuple[np.ndarray, tuple[list[np.ndarray], list[np.ndarray]]]:
    """Run k coupled Newton-Schulz steps; returns J_k and all iterates."""
    if k < 1:
        raise ConfigError(f"iteration count must be >= 1, got {k}")
    q = as_matrix(q, "q")
    if q.shape[0] != q.shape[1]:
        raise ShapeError(f"q must be square, got {q.shape}")
    identity = np.eye(q.shape[0])
    j = q.copy()
    p = identity.copy()
    j_iters = [j]
    p_iters = [p]
    for step in range(1, k + 1):
        # Divergence shows up as overflow; it is detected and reported below,
        # so the intermediate warnings are noise.
        with np.errstate(over="ignore", invalid="ignore"):
            t = 3.0 * identity - matmul(p, j)
            j = 0.5 * matmul(j, t)
            p = 0.5 * matmul(t, p)
        if not (np.all(np.isfinite(j)) and np.all(np.isfinite(p))):
            raise DivergenceError(f"Newton-Schulz iterate became non-finite at step {step}")
        j_iters.append(j)
        p_iters.append(p)
    return j, (j_iters, p_iters)


def vech_upper(s, tol: float = 1e-9) -> np.ndarray:
    """Row-major upper triangle (diagonal included) of a symmetric matrix."""
    m = check_symmetric(s, tol, "input")
    iu = np.triu_indices(m.shape[0])
    return m[iu].copy()


def unvech(v, dim: int | None = None) -> np.ndarray:
    """Inverse of vech_upper; exact round trip on symmetric matrices."""
    vec = np.asarray(v, dtype=np.float64)
    if vec.ndim != 1:
        raise ShapeError(f"vech vector must be 1-D, got ndim={vec.ndim}")
    if dim is None:
        dim = int((np.sqrt(8 * vec.size + 1) - 1) / 2 + 0.5)
    if dim * (dim + 1) // 2 != vec.size:
        raise ShapeError(f"length {vec.size} is not a triangular number for dim {dim}")
    out = np.zeros((dim, dim))
    iu = np.triu_indices(dim)
    out[iu] = vec
    out.T[iu] = vec
    return out


def sopool_forward(tokens, cfg: SoPoolConfig) -> tuple[np.ndarray, SoPoolTape]:
    """Full pipeline: tokens -> vech(sqrt(tr) * NewtonSchulz(sigma / tr))."""
    t = _validate_tokens(tokens, cfg.reduced_dim)
    n = t.shape[0]
    centered = _center(t)
    sigma = matmul(centered.T, centered) / n
    trace = float(np.trace(sigma))
    if trace <= cfg.trace_epsilon:
        if cfg.strict_degeneracy:
            raise DegenerateCovarianceError(
                f"covariance trace {trace:.3e} <= epsilon {cfg.trace_epsilon:.0e}"
            )
        tape = SoPoolTape(
            config=cfg, n_tokens=n, centered=centered, sigma=sigma, trace=trace, degenerate=True
        )
        return np.zeros(cfg.feature_dim), tape
    q = sigma / trace
    j_k, (j_iters, p_iters) = newton_schulz_sqrt(q, cfg.ns_iterations)
    compensated = np.sqrt(trace) * j_k
    features = vech_upper(compensated)
    tape = SoPoolTape(
        config=cfg,
        n_tokens=n,
        centered=centered,
        sigma=sigma,
        trace=trace,
        degenerate=False,
        q=q,
        j_iters=j_iters,
        p_iters=p_iters,
    )
    return features, tape


def sopool_backward(grad_features, tape: SoPoolTape) -> np.ndarray:
    """Gradient of the pooled features w.r.t. the input tokens.

    Reverses, in order: vech, sqrt(trace) compensation, the unrolled
    Newton-Schulz steps, trace normalization, and the centered covariance.
    """
    g = np.asarray(grad_features, dtype=np.float64)
    cfg = tape.config
    r = cfg.reduced_dim
    if g.ndim != 1 or g.size != cfg.feature_dim:
        raise ValidationError(
            f"gradient length {g.size} does not match tape feature dim {cfg.feature_dim}"
        )
    n = tape.n_tokens
    if tape.degenerate:
        return np.zeros((n, r))
    if tape.j_iters is None or len(tape.j_iters) != cfg.ns_iterations + 1:
        raise ValidationError("tape iterates inconsistent with its configuration")

    # vech adjoint: the forward read only the upper triangle.
    grad_s = np.zeros((r, r))
    grad_s[np.triu_indices(r)] = g

    # s = sqrt(trace) * J_k
    root = np.sqrt(tape.trace)
    j_k = tape.j_iters[-1]
    grad_j = root * grad_s
    grad_trace = float(np.sum(grad_s * j_k)) * 0.5 / root

    # Unrolled Newton-Schulz steps, last to first. With A = P_{k-1},
    # B = J_{k-1}, T = 3I - A B, the step computed J = 1/2 B T, P = 1/2 T A.
    identity = np.eye(r)
    grad_p = np.zeros((r, r))
    for step in range(cfg.ns_iterations, 0, -1):
        a = tape.p_iters[step - 1]
        b = tape.j_iters[step - 1]
        t = 3.0 * identity - matmul(a, b)
        grad_t = 0.5 * (matmul(b.T, grad_j) + matmul(grad_p, a.T))
        new_grad_b = 0.5 * matmul(grad_j, t.T) - matmul(a.T, grad_t)
        new_grad_a = 0.5 * matmul(t.T, grad_p) - matmul(grad_t, b.T)
        grad_j, grad_p = new_grad_b, new_grad_a
    # grad_p now targets P_0 = I, a constant; grad_j targets J_0 = Q.

    # q = sigma / trace
    grad_sigma = grad_j / tape.trace
    grad_trace += -float(np.sum(grad_j * tape.sigma)) / (tape.trace * tape.trace)

    # trace = tr(sigma)
    grad_sigma = grad_sigma + grad_trace * identity

    # sigma = (1/N) Xc^T Xc
    grad_centered = matmul(tape.centered, grad_sigma + grad_sigma.T) / n

    # Xc = X - mean(X): subtract the column means of the incoming gradient.
    return grad_centered - grad_centered.mean(axis=0)
