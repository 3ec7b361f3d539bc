"""Dense kernels behind the orthogonal transformation layer.

Matrices are plain ``float64`` numpy arrays. The exponential is computed by
scaling and squaring around a truncated Taylor core, and its Frechet
derivative reuses the same routine on a 2d x 2d block matrix, so there is a
single numerical path to validate.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, StructuralError

# ||A / 2**s||_1 <= 0.5 after scaling; 0.5**18 / 18! ~ 6e-22, far below eps.
_SCALED_NORM = 0.5
_TAYLOR_ORDER = 18


def n_skew_params(dim):
    """Number of free parameters of a ``dim x dim`` skew-symmetric matrix."""
    return dim * (dim - 1) // 2


@dataclass(frozen=True)
class SkewParams:
    """Strictly-lower-triangular entries of a skew-symmetric matrix, row-major."""

    dim: int
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.dim < 1:
            raise StructuralError(f"dim must be >= 1, got {self.dim}")
        if values.size != n_skew_params(self.dim):
            raise StructuralError(
                f"expected {n_skew_params(self.dim)} values for dim={self.dim}, "
                f"got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericError("skew parameters contain non-finite values")
        object.__setattr__(self, "values", values)


def _lower_indices(dim):
    # np.tril_indices walks rows then columns, which is the packing order.
    return np.tril_indices(dim, k=-1)


def _as_square(a, name="A"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise StructuralError(f"{name} must be square, got shape {a.shape}")
    return a


def skew_from_params(p):
    """Build the skew-symmetric matrix whose lower triangle holds ``p.values``."""
    a = np.zeros((p.dim, p.dim))
    rows, cols = _lower_indices(p.dim)
    a[rows, cols] = p.values
    a[cols, rows] = -p.values
    return a


def params_from_skew(a):
    """Inverse of :func:`skew_from_params` (reads the lower triangle only)."""
    a = _as_square(a)
    return SkewParams(a.shape[0], a[_lower_indices(a.shape[0])].copy())


def mat_exp(a):
    """Matrix exponential by scaling and squaring with a Taylor core."""
    a = _as_square(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("mat_exp input contains non-finite entries")
    d = a.shape[0]
    norm = np.abs(a).sum(axis=0).max() if d else 0.0
    s = 0
    if norm > _SCALED_NORM:
        s = int(np.ceil(np.log2(norm / _SCALED_NORM)))
    x = a / (2.0 ** s)

    result = np.eye(d)
    term = np.eye(d)
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ x / k
        result = result + term
    for _ in range(s):
        result = result @ result
    return result


def frechet_exp(a, e):
    """Frechet derivative ``d/dt exp(A + tE)`` at ``t = 0``.

    Uses the identity ``exp([[A, E], [0, A]]) = [[exp(A), L(A, E)], [0, exp(A)]]``.
    """
    a = _as_square(a, "A")
    e = _as_square(e, "E")
    if a.shape != e.shape:
        raise StructuralError(f"A and E differ in shape: {a.shape} vs {e.shape}")
    d = a.shape[0]
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = a
    block[:d, d:] = e
    block[d:, d:] = a
    return mat_exp(block)[:d, d:]


def skew_param_grad(a, grad_q):
    """Pull a gradient w.r.t. ``Q = exp(A)`` back to the packed skew parameters.

    The adjoint of ``E -> L(A, E)`` under the Frobenius inner product is
    ``G -> L(A^T, G)``; since ``A[i, j] = p`` and ``A[j, i] = -p`` the packed
    gradient is the antisymmetric part read off the lower triangle.
    """
    a = _as_square(a, "A")
    grad_a = frechet_exp(a.T, _as_square(grad_q, "dL/dQ"))
    rows, cols = _lower_indices(a.shape[0])
    return grad_a[rows, cols] - grad_a[cols, rows]


def orthogonality_defect(q):
    """Largest absolute entry of ``Q^T Q - I``."""
    q = _as_square(q, "Q")
    return float(np.abs(q.T @ q - np.eye(q.shape[0])).max()) if q.size else 0.0
