import numpy as np
import pytest

from clipkd.batch import EmbeddingBatch
from clipkd.numcore import RngStream


def unit_rows(rng: RngStream, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))


def unit_batch(rng: RngStream, n: int, d: int) -> EmbeddingBatch:
    return EmbeddingBatch(unit_rows(rng, n, d))


@pytest.fixture
def rng() -> RngStream:
    return RngStream(1234, 0)
