"""Dense double-precision matrix kernels with a fixed summation order.

``matmul`` accumulates over the inner index in ascending order for every
output element, which makes it bitwise equal to the naive triple loop. That
buys two things the rest of the pipeline relies on: results are reproducible
across runs regardless of BLAS threading, and ``(A B)^T == B^T A^T`` holds
exactly (each output element sums the same products in the same order).

``jacobi_eigh`` is a cyclic Jacobi eigensolver for symmetric matrices. It is
a test oracle only: the forward path must never depend on an
eigendecomposition.
"""

import numpy as np

from .errors import ShapeError, ValidationError


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with deterministic ascending-k accumulation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        # Broadcast outer product; per element this is the triple loop's
        # s += a[i,k] * b[k,j] with k ascending, so the bits are identical.
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matvec(a, v) -> np.ndarray:
    """``a @ v`` through the deterministic kernel."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"vector must be 1-D, got ndim={v.ndim}")
    return matmul(a, v.reshape(-1, 1))[:, 0]


def frobenius(a) -> float:
    """Frobenius norm."""
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def trace_and_frobenius(a) -> tuple[float, float]:
    """Trace and Frobenius norm of a square matrix."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace requires a square matrix, got {a.shape}")
    return float(np.trace(a)), frobenius(a)


def check_symmetric(a, tol: float, name: str = "matrix") -> np.ndarray:
    """Validate symmetry within ``tol`` relative to max(1, max|a|)."""
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > tol * scale:
        raise ValidationError(
            f"{name} is not symmetric: max|a - a^T| = {asym:.3e} exceeds {tol:.0e} * {scale:.3e}"
        )
    return a


def jacobi_eigh(
    a,
    sym_tol: float = 1e-10,
    off_tol: float = 1e-12,
    max_sweeps: int = 100,
) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v)`` with eigenvalues ``w`` ascending and eigenvectors in
    the columns of ``v``, so that ``v @ diag(w) @ v.T`` reconstructs the
    input. Sweeps stop once every off-diagonal entry is below
    ``off_tol * ||a||_F``.
    """
    a = check_symmetric(a, sym_tol, "input")
    n = a.shape[0]
    m = 0.5 * (a + a.T)
    v = np.eye(n)
    if n == 1:
        return m[0].copy(), v
    threshold = off_tol * max(frobenius(m), np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        off = np.abs(m - np.diag(np.diag(m))).max()
        if off <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # m <- G^T m G with G rotating the (p, q) plane.
                col_p, col_q = m[:, p].copy(), m[:, q].copy()
                m[:, p] = c * col_p - s * col_q
                m[:, q] = s * col_p + c * col_q
                row_p, row_q = m[p, :].copy(), m[q, :].copy()
                m[p, :] = c * row_p - s * row_q
                m[q, :] = s * row_p + c * row_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(m).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]
