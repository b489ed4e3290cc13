"""The embedding batch wrapper shared by encoders, losses, and eval."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .numcore import as_matrix, l2_normalize_rows

NORMALIZED_TOL = 1e-9


@dataclass(frozen=True)
class EmbeddingBatch:
    """An n x d matrix of feature embeddings, one row per sample.

    ``normalized=True`` asserts every row has unit l2 norm (checked at
    construction; ``norm_tol`` exists because embeddings restored from
    32-bit dumps are only unit-norm to float32 precision).
    """

    rows: np.ndarray
    normalized: bool = True
    norm_tol: float = field(default=NORMALIZED_TOL, compare=False)

    def __post_init__(self):
        m = as_matrix(self.rows, "embedding rows")
        if m.shape[0] < 1:
            raise InputError("embedding batch must contain at least one row")
        object.__setattr__(self, "rows", m)
        if self.normalized:
            norms = np.sqrt(np.sum(m * m, axis=1))
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > self.norm_tol:
                raise InputError(
                    f"batch flagged normalized but a row norm is off by {worst:.3e}"
                )

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    @classmethod
    def from_rows(cls, rows, eps: float = 1e-12) -> "EmbeddingBatch":
        """Normalize arbitrary rows and wrap them."""
        return cls(l2_normalize_rows(as_matrix(rows), eps), normalized=True)


def require_same_shape(*batches: EmbeddingBatch) -> tuple[int, int]:
    """Validate that all batches share (n, d); returns the shape."""
    shapes = {b.rows.shape for b in batches}
    if len(shapes) != 1:
        raise InputError(f"embedding batches disagree on shape: {sorted(shapes)}")
    return batches[0].rows.shape


def require_same_n(*batches: EmbeddingBatch) -> int:
    ns = {b.n for b in batches}
    if len(ns) != 1:
        raise InputError(f"embedding batches disagree on row count: {sorted(ns)}")
    return batches[0].n
