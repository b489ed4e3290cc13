"""Retrieval, zero-shot classification, and teacher-student similarity.

All ranking is deterministic: ties break toward the lower index. CKA is
the linear (feature-space) variant with column centering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batch import EmbeddingBatch, require_same_shape
from .data import PairBatch
from .errors import ConfigError, InputError
from .numcore import as_matrix, center_columns


@dataclass(frozen=True)
class RetrievalReport:
    direction: str               # "i2t" or "t2i"
    recalls: dict                # k -> recall fraction in [0, 1]
    n: int

    def recall_at(self, k: int) -> float:
        return self.recalls[k]


@dataclass(frozen=True)
class SimilarityReport:
    """Teacher-student feature similarity statistics on one split."""

    cosine_image: float
    cosine_text: float
    cka_image: float
    cka_text: float
    pos_neg_gap: float

    def as_rows(self) -> list[tuple[str, float]]:
        return [("cosine_image", self.cosine_image), ("cosine_text", self.cosine_text),
                ("cka_image", self.cka_image), ("cka_text", self.cka_text),
                ("posneg_gap", self.pos_neg_gap)]


def recall_at_k(query: EmbeddingBatch, gallery: EmbeddingBatch,
                ks=(1, 5, 10), direction: str = "i2t") -> RetrievalReport:
    """Recall@k with index-paired ground truth.

    Gallery rows are ranked per query by dot product, descending, ties to
    the lower index; a query scores at k if its own index ranks in the
    top k.
    """
    require_same_shape(query, gallery)
    sims = query.rows @ gallery.rows.T
    order = np.argsort(-sims, axis=1, kind="stable")
    true_rank = np.argmax(order == np.arange(query.n)[:, None], axis=1)
    recalls = {int(k): float(np.mean(true_rank < k)) for k in ks}
    return RetrievalReport(direction=direction, recalls=recalls, n=query.n)


def zero_shot_accuracy(image_emb: EmbeddingBatch, prompt_emb: EmbeddingBatch,
                       labels) -> float:
    """Top-1 accuracy of nearest-prototype classification.

    Prompts are one embedding per class; prediction is the argmax dot
    product (ties to the lower class index).
    """
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape[0] != image_emb.n:
        raise InputError("labels must align with the image batch")
    if image_emb.d != prompt_emb.d:
        raise InputError("image and prompt embeddings must share dim")
    if labels.size and (labels.min() < 0 or labels.max() >= prompt_emb.n):
        raise InputError(f"labels must lie in [0, {prompt_emb.n})")
    scores = image_emb.rows @ prompt_emb.rows.T
    predictions = np.argmax(scores, axis=1)
    return float(np.mean(predictions == labels))


def linear_cka(x, y) -> float:
    """Linear centered kernel alignment between two representations.

    Columns are centered, then ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F).
    Invariant to orthogonal transforms and isotropic scaling; 0 when
    either centered matrix vanishes.
    """
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape[0] != y.shape[0]:
        raise InputError("representations must share the row (sample) count")
    if x.shape[0] < 2:
        raise InputError("CKA needs at least two rows")
    xc = center_columns(x)
    yc = center_columns(y)
    cross = float(np.sum((yc.T @ xc) ** 2))
    norm_x = float(np.sqrt(np.sum((xc.T @ xc) ** 2)))
    norm_y = float(np.sqrt(np.sum((yc.T @ yc) ** 2)))
    if norm_x == 0.0 or norm_y == 0.0:
        return 0.0
    return min(max(cross / (norm_x * norm_y), 0.0), 1.0)


def pos_neg_gap(image: EmbeddingBatch, text: EmbeddingBatch) -> float:
    """Mean paired similarity minus mean unpaired similarity."""
    require_same_shape(image, text)
    n = image.n
    if n < 2:
        raise InputError("pos/neg gap needs at least two pairs")
    sims = image.rows @ text.rows.T
    positive = float(np.trace(sims)) / n
    negative = (float(sims.sum()) - float(np.trace(sims))) / (n * (n - 1))
    return positive - negative


def similarity_report(teacher, student, pairs: PairBatch) -> SimilarityReport:
    """Encode a split with both models and aggregate similarity statistics.

    Cosines compare matched rows (student projected into the teacher's
    space when dims differ and a projection head exists); CKA compares
    the raw representations, which it can do across dims.
    """
    from .encoders import encode_image, encode_text, project_student

    teacher_image = encode_image(teacher, pairs.images)
    teacher_text = encode_text(teacher, pairs.texts)
    student_image = encode_image(student, pairs.images)
    student_text = encode_text(student, pairs.texts)

    if student_image.d != teacher_image.d and student.params.get("proj.w") is None:
        raise ConfigError(
            "teacher/student embedding dims differ and the student has no projection head")
    matched_image = project_student(student, student_image, target_dim=teacher_image.d)
    matched_text = project_student(student, student_text, target_dim=teacher_text.d)

    return SimilarityReport(
        cosine_image=float(np.mean(np.sum(teacher_image.rows * matched_image.rows, axis=1))),
        cosine_text=float(np.mean(np.sum(teacher_text.rows * matched_text.rows, axis=1))),
        cka_image=linear_cka(teacher_image.rows, student_image.rows),
        cka_text=linear_cka(teacher_text.rows, student_text.rows),
        pos_neg_gap=pos_neg_gap(student_image, student_text),
    )
