"""Dense float64 linear-algebra kernels and seeded randomness.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64; the
functions here are thin, validated wrappers so every caller shares one
set of conventions (row-major, 64-bit, finite). Randomness comes from
counter-based Philox streams keyed by ``(seed, stream_id)``, so a draw
depends only on its key, never on call interleaving.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

# Default guard for row normalization; far below any embedding norm the
# encoders produce.
NORM_EPS = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array and validate finiteness."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size and not np.all(np.isfinite(m)):
        raise InputError(f"{name} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit dimension checking.

    Repeated calls on identical inputs are bit-identical (single fixed
    BLAS reduction per output element within one environment).
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InputError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    return a @ b


def l2_normalize_rows(m: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Divide each row by max(||row||_2, eps).

    Rows with norm below ``eps`` are scaled by 1/eps, which keeps exact
    zero rows at zero. Idempotent for already-normalized rows.
    """
    m = as_matrix(m)
    norms = np.sqrt(np.sum(m * m, axis=1, keepdims=True))
    return m / np.maximum(norms, eps)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    """Stable log(sum(exp(row))) per row, returned as a 1-D array."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def center_columns(m: np.ndarray) -> np.ndarray:
    """Subtract each column's mean (preprocessing for CKA)."""
    m = as_matrix(m)
    if m.shape[0] < 1:
        raise InputError("center_columns requires at least one row")
    return m - m.mean(axis=0, keepdims=True)


class RngStream:
    """Deterministic random stream keyed by ``(seed, stream_id)``.

    Built on the counter-based Philox generator, so identical keys give
    identical sequences on every platform and distinct stream ids give
    statistically independent sequences. Streams are cheap: make a fresh
    one per purpose (and per step, for stateless resume) rather than
    sharing one across call sites.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    _MASK = (1 << 64) - 1

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & self._MASK
        self.stream_id = int(stream_id) & self._MASK
        bitgen = np.random.Philox(key=[self.seed, self.stream_id])
        self._gen = np.random.Generator(bitgen)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size=None, replace: bool = True, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def split(self, offset: int) -> "RngStream":
        """Derive a sibling stream at ``stream_id + offset``."""
        return RngStream(self.seed, self.stream_id + int(offset))
