"""Complex linear-algebra and random-stream primitives shared by all modules.

Matrices and vectors are plain ``numpy`` arrays with ``complex128`` entries in
row-major order. Block lengths never exceed 64, so everything is explicit
dense algebra; there is no need for FFT-grade transforms or sparse storage.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "Rng",
    "NotHermitianError",
    "NotPositiveDefiniteError",
    "dft_matrix",
    "cholesky_factor",
    "cholesky_solve",
    "gauss_cn",
]

# Hermitian deviation allowed relative to the largest entry magnitude.
HERMITIAN_RTOL = 1e-10
# A Cholesky pivot below PIVOT_RTOL * max diagonal counts as "not positive
# definite": near-singular covariances must fail loudly, not silently.
PIVOT_RTOL = 1e-12


class NotHermitianError(ValueError):
    """Input matrix deviates from its conjugate transpose beyond tolerance."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky pivot failed; carries the offending pivot index."""

    def __init__(self, pivot_index, pivot_value=None):
        self.pivot_index = pivot_index
        self.pivot_value = pivot_value
        msg = f"matrix not positive definite at pivot {pivot_index}"
        if pivot_value is not None:
            msg += f" (pivot {pivot_value:.3e})"
        super().__init__(msg)


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & (2**64 - 1)
    if isinstance(key, str):
        digest = hashlib.blake2s(key.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"sub-stream keys must be int or str, got {type(key)!r}")


class Rng:
    """Counter-based seeded random stream with keyed sub-stream derivation.

    The same (seed, key path) always reproduces the same sample stream, so
    experiments can be replayed exactly and parallel workers can derive
    independent streams without coordination. An ``Rng`` instance is
    single-owner: share sub-streams, not the instance itself.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self._path = tuple(_path)
        self._gen: np.random.Generator | None = None

    def substream(self, *keys) -> "Rng":
        """Derive an independent stream keyed by e.g. (channel id, burst id)."""
        return Rng(self.seed, self._path + tuple(_key_to_int(k) for k in keys))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            seq = np.random.SeedSequence((self.seed,) + self._path)
            self._gen = np.random.Generator(np.random.Philox(seq))
        return self._gen

    def standard_normal(self, size=None):
        return self.generator.standard_normal(size)

    def complex_normal(self, size=None):
        """I.i.d. circularly symmetric CN(0, 1) samples."""
        g = self.generator
        return (g.standard_normal(size) + 1j * g.standard_normal(size)) / np.sqrt(2.0)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self._path})"


def dft_matrix(n: int) -> np.ndarray:
    """N-point DFT matrix with entries exp(-2j*pi*k*j/n); F^H F = n I."""
    if n < 1:
        raise ValueError("dft_matrix requires n >= 1")
    idx = np.arange(n)
    return np.exp((-2j * np.pi / n) * np.outer(idx, idx))


def _check_hermitian(a):
    dev = np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))))
    scale = np.max(np.abs(a))
    if scale > 0 and dev > HERMITIAN_RTOL * scale:
        raise NotHermitianError(
            f"matrix deviates from Hermitian by {dev:.3e} (scale {scale:.3e})"
        )


def _first_bad_pivot(a):
    """Textbook Cholesky scan used only to name the failing pivot."""
    a = np.array(a, dtype=np.complex128)
    n = a.shape[-1]
    tol = PIVOT_RTOL * max(float(np.max(np.diagonal(a).real)), 0.0)
    low = np.zeros_like(a)
    for k in range(n):
        pivot = a[k, k].real - np.sum(np.abs(low[k, :k]) ** 2)
        if pivot <= tol:
            return k, pivot
        low[k, k] = np.sqrt(pivot)
        if k + 1 < n:
            col = a[k + 1 :, k] - low[k + 1 :, :k] @ np.conj(low[k, :k])
            low[k + 1 :, k] = col / low[k, k]
    return n - 1, float(a[n - 1, n - 1].real)


def cholesky_factor(a) -> np.ndarray:
    """Lower Cholesky factor of a Hermitian positive definite matrix (or stack).

    Raises ``NotHermitianError`` / ``NotPositiveDefiniteError``; the latter
    names the offending pivot index. Pivots below PIVOT_RTOL times the largest
    diagonal entry are rejected even when the factorization formally succeeds.
    """
    a = np.asarray(a, dtype=np.complex128)
    _check_hermitian(a)
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if a.ndim == 2:
            idx, piv = _first_bad_pivot(a)
        else:
            idx = piv = None
            for item_idx in np.ndindex(a.shape[:-2]):
                try:
                    np.linalg.cholesky(a[item_idx])
                except np.linalg.LinAlgError:
                    k, piv = _first_bad_pivot(a[item_idx])
                    idx = item_idx + (k,)
                    break
        raise NotPositiveDefiniteError(idx, piv) from None
    pivots = np.diagonal(low, axis1=-2, axis2=-1).real ** 2
    diag = np.diagonal(a, axis1=-2, axis2=-1).real
    tol = PIVOT_RTOL * max(float(diag.max()), 0.0)
    if np.any(pivots <= tol):
        flat = np.argwhere(pivots <= tol)[0]
        idx = tuple(int(i) for i in flat)
        raise NotPositiveDefiniteError(idx if len(idx) > 1 else idx[0])
    return low


def _solve_lower(low, b):
    n = low.shape[-1]
    x = np.zeros_like(b)
    for i in range(n):
        acc = np.einsum("...j,...jk->...k", low[..., i, :i], x[..., :i, :])
        x[..., i, :] = (b[..., i, :] - acc) / low[..., i, i][..., None]
    return x


def _solve_upper_from_lower(low, b):
    # Solves L^H x = b by backward substitution on the conjugate transpose.
    n = low.shape[-1]
    lh = np.conj(np.swapaxes(low, -1, -2))
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        acc = np.einsum("...j,...jk->...k", lh[..., i, i + 1 :], x[..., i + 1 :, :])
        x[..., i, :] = (b[..., i, :] - acc) / lh[..., i, i][..., None]
    return x


def cholesky_solve(a, b) -> np.ndarray:
    """Solve A X = B for Hermitian positive definite A (single or stacked).

    ``b`` may be a vector, a matrix of stacked right-hand-side columns, or a
    stack matching leading dimensions of ``a``.
    """
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    vector_rhs = b.ndim == a.ndim - 1
    if vector_rhs:
        b = b[..., None]
    low = cholesky_factor(a)
    x = _solve_upper_from_lower(low, _solve_lower(low, b))
    return x[..., 0] if vector_rhs else x


def gauss_cn(rng: Rng, cov, size=None) -> np.ndarray:
    """Zero-mean circularly symmetric complex Gaussian with covariance ``cov``.

    Sampling goes through the Hermitian matrix square root of ``cov``, so any
    positive semidefinite covariance (including singular ones) is accepted.
    With ``size=None`` one vector is returned, else an array (size, n).
    """
    cov = np.asarray(cov, dtype=np.complex128)
    _check_hermitian(cov)
    vals, vecs = np.linalg.eigh(cov)
    scale = max(float(vals.max(initial=0.0)), 0.0)
    if np.any(vals < -1e-10 * max(scale, 1e-300)):
        raise ValueError("covariance is not positive semidefinite")
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    n = cov.shape[0]
    if size is None:
        return root @ rng.complex_normal(n)
    z = rng.complex_normal((size, n))
    return z @ root.T
