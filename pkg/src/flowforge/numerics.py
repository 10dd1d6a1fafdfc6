"""Dense real/complex linear algebra and 2-D discrete Fourier transforms.

Matrices are plain numpy arrays (real or complex, 2-D). The DFT uses the
unnormalized forward / 1/(h*w) inverse convention and is computed by
direct summation per axis (explicit DFT matrices); image planes here are
small enough that radix FFTs would buy nothing.

All functions are pure; there is no shared mutable state.
"""

from functools import lru_cache

import numpy as np

PIVOT_TOL = 1e-12


class SingularMatrixError(ValueError):
    """A linear system could not be solved because a pivot vanished."""

    def __init__(self, pivot_index: int):
        self.pivot_index = pivot_index
        super().__init__(f"matrix is singular (zero pivot at index {pivot_index})")


@lru_cache(maxsize=64)
def dft_matrix(n: int) -> np.ndarray:
    """Unnormalized forward DFT matrix F[u, k] = exp(-2*pi*i*u*k/n)."""
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(plane: np.ndarray) -> np.ndarray:
    """2-D DFT of a real (or complex) h x w plane, indexed by frequencies (u, v)."""
    plane = np.asarray(plane)
    h, w = plane.shape
    return dft_matrix(h) @ plane @ dft_matrix(w).T


def idft2(spec: np.ndarray, imag_tol: float = 1e-8) -> np.ndarray:
    """Inverse 2-D DFT, returning a real plane.

    Raises ValueError if the spectrum is not Hermitian-symmetric, i.e. the
    reconstructed plane has imaginary residue above ``imag_tol``. Use
    ``idft2_complex`` when complex output is acceptable.
    """
    out = idft2_complex(spec)
    residue = np.max(np.abs(out.imag)) if out.size else 0.0
    if residue > imag_tol:
        raise ValueError(
            f"spectrum is not Hermitian: imaginary residue {residue:.3e} "
            f"exceeds {imag_tol:.1e}"
        )
    return out.real


def idft2_complex(spec: np.ndarray) -> np.ndarray:
    spec = np.asarray(spec, dtype=complex)
    h, w = spec.shape
    fh_inv = dft_matrix(h).conj() / h
    fw_inv = dft_matrix(w).conj() / w
    return fh_inv @ spec @ fw_inv.T


def _lu_decompose(m: np.ndarray):
    """LU with partial pivoting. Returns (lu, pivot rows, swap count) or the
    offending pivot index when the matrix is numerically singular."""
    a = np.array(m, dtype=complex if np.iscomplexobj(m) else float)
    n = a.shape[0]
    piv = np.arange(n)
    swaps = 0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_TOL:
            return a, piv, swaps, k
        if p != k:
            a[[k, p]] = a[[p, k]]
            piv[[k, p]] = piv[[p, k]]
            swaps += 1
        a[k + 1 :, k] /= a[k, k]
        a[k + 1 :, k + 1 :] -= np.outer(a[k + 1 :, k], a[k, k + 1 :])
    return a, piv, swaps, -1


def lu_slogdet(m: np.ndarray):
    """(phase, logabsdet) of a square matrix via LU with partial pivoting.

    phase is a unit complex number (or +-1 for real input) such that
    det(m) = phase * exp(logabsdet). Singular input yields (0, -inf)
    rather than an exception.
    """
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        return 1.0, 0.0
    lu, _, swaps, bad = _lu_decompose(m)
    if bad >= 0:
        return 0.0, -np.inf
    diag = np.diagonal(lu)
    logabsdet = float(np.sum(np.log(np.abs(diag))))
    phase = (-1.0) ** swaps * np.prod(diag / np.abs(diag))
    if not np.iscomplexobj(m):
        phase = float(np.real(phase))
    return phase, logabsdet


def solve(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve m x = b for square nonsingular m (real or complex).

    Raises SingularMatrixError carrying the pivot index when a pivot
    magnitude falls below the singularity threshold.
    """
    m = np.asarray(m)
    b = np.asarray(b)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {m.shape}, rhs {b.shape}")
    lu, piv, _, bad = _lu_decompose(m)
    if bad >= 0:
        raise SingularMatrixError(bad)
    x = np.array(b[piv], dtype=lu.dtype)
    n = m.shape[0]
    for k in range(1, n):  # forward substitution, unit lower factor
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):  # back substitution
        x[k] = (x[k] - lu[k, k + 1 :] @ x[k + 1 :]) / lu[k, k]
    return x


def householder_orthogonal(vectors, n: int | None = None) -> np.ndarray:
    """Orthogonal Q as the product of Householder reflections.

    Q = Q_1 Q_2 ... Q_k with Q_i = I - 2 v_i v_i^T / (v_i^T v_i). An empty
    list yields the identity (pass n to fix the dimension). Vectors with
    norm below 1e-12 are rejected.
    """
    vectors = [np.asarray(v, dtype=float) for v in vectors]
    if not vectors:
        if n is None:
            raise ValueError("empty vector list needs an explicit dimension n")
        return np.eye(n)
    if n is None:
        n = vectors[0].shape[0]
    q = np.eye(n)
    for i, v in enumerate(vectors):
        if v.shape != (n,):
            raise ValueError(f"vector {i} has shape {v.shape}, expected ({n},)")
        vtv = float(v @ v)
        if vtv <= 1e-12**2:
            raise ValueError(f"vector {i} is numerically zero (norm^2 = {vtv:.3e})")
        q = q @ (np.eye(n) - (2.0 / vtv) * np.outer(v, v))
    return q
