"""Task and distillation losses for dual-encoder training.

Implements the symmetric InfoNCE task loss and the six distillation
terms — contrastive relational (CRD), feature (FD), masked feature
(MFD), gradient (GD), interactive contrastive (ICL), and augmented
feature (AFD) — plus their weighted combination and a small harness
that checks the InfoNCE mutual-information lower bound on an exactly
solvable discrete joint.

All losses are pure functions of normalized embedding batches. Teacher
embeddings are constants everywhere (the teacher is frozen); that
contract is enforced where gradients are computed, not here.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .batch import EmbeddingBatch, require_same_shape
from .encoders import ClipModel, fuse_embeddings, project_student
from .errors import ConfigError, InputError
from .grads import clip_grad_analytic
from .numcore import RngStream, l2_normalize_rows, logsumexp_rows, softmax_rows

log = logging.getLogger(__name__)

KD_TERMS = ("crd", "fd", "mfd", "gd", "icl", "afd")

# Per-term loss weights used in the reference training recipe.
PAPER_WEIGHTS = {"crd": 1.0, "fd": 2000.0, "mfd": 2000.0, "gd": 1e8, "icl": 1.0, "afd": 1.0}

# Student probabilities are clamped here inside the KL (cannot trigger with
# finite logits; kept as a guard).
KL_PROB_FLOOR = 1e-30


# ---------------------------------------------------------------------------
# Raw kernels (shared with the finite-difference oracles, which perturb
# embeddings off the unit sphere and therefore bypass the batch wrappers)
# ---------------------------------------------------------------------------

def _check_tau(tau: float):
    if not (tau > 0.0 and math.isfinite(tau)):
        raise InputError(f"temperature must be positive and finite, got {tau}")


def infonce_raw(anchor_rows: np.ndarray, contrast_rows: np.ndarray, tau: float) -> float:
    """mean_k -log softmax_j(anchor_k . contrast_j / tau) at j = k."""
    z = (anchor_rows @ contrast_rows.T) / tau
    return float(np.mean(logsumexp_rows(z) - np.diag(z)))


def clip_loss_raw(image_rows: np.ndarray, text_rows: np.ndarray, tau: float) -> float:
    return 0.5 * (infonce_raw(image_rows, text_rows, tau) + infonce_raw(text_rows, image_rows, tau))


def _require_normalized(*batches: EmbeddingBatch):
    for b in batches:
        if not b.normalized:
            raise InputError("loss inputs must be normalized embedding batches")


# ---------------------------------------------------------------------------
# Task loss
# ---------------------------------------------------------------------------

def clip_loss(image: EmbeddingBatch, text: EmbeddingBatch, tau: float) -> float:
    """Symmetric contrastive task loss, averaged over anchors.

    Half the mean image-to-text InfoNCE plus half the mean text-to-image
    InfoNCE; negatives are the other rows of the batch. A single-pair
    batch scores exactly 0.
    """
    _check_tau(tau)
    _require_normalized(image, text)
    require_same_shape(image, text)
    return clip_loss_raw(image.rows, text.rows, tau)


# ---------------------------------------------------------------------------
# Contrastive distributions and CRD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContrastiveDistribution:
    """Row k = softmax over similarities of anchor k against the contrast set."""

    probs: np.ndarray
    direction: str                 # "i2t" or "t2i"
    temperature: float

    def __post_init__(self):
        if self.direction not in ("i2t", "t2i"):
            raise InputError(f"direction must be 'i2t' or 't2i', got {self.direction!r}")
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        row_err = float(np.max(np.abs(p.sum(axis=1) - 1.0)))
        if row_err > 1e-9 or np.any(p < 0):
            raise InputError(f"rows must be probability vectors (row-sum error {row_err:.3e})")


def contrastive_distribution(anchor: EmbeddingBatch, contrast: EmbeddingBatch,
                             tau: float, direction: str) -> ContrastiveDistribution:
    _check_tau(tau)
    _require_normalized(anchor, contrast)
    if anchor.d != contrast.d:
        raise InputError(f"anchor dim {anchor.d} != contrast dim {contrast.d}")
    probs = softmax_rows((anchor.rows @ contrast.rows.T) / tau)
    return ContrastiveDistribution(probs, direction, tau)


def _kl_rows(p_teacher: np.ndarray, p_student: np.ndarray) -> tuple[float, int]:
    """Sum over rows of KL(teacher_row || student_row); 0 log 0 := 0."""
    support = p_teacher > 0.0
    clamped = int(np.sum(support & (p_student < KL_PROB_FLOOR)))
    safe_t = np.where(support, p_teacher, 1.0)
    safe_s = np.maximum(p_student, KL_PROB_FLOOR)
    kl = np.where(support, p_teacher * (np.log(safe_t) - np.log(safe_s)), 0.0)
    return float(kl.sum()), clamped


def crd_loss(p_teacher: ContrastiveDistribution, q_teacher: ContrastiveDistribution,
             p_student: ContrastiveDistribution, q_student: ContrastiveDistribution) -> float:
    """KL alignment of teacher and student contrastive distributions.

    Mean-over-anchors KL for the image-to-text rows plus the same for
    text-to-image rows. Zero iff the distributions coincide.
    """
    shape = p_teacher.probs.shape
    for dist in (q_teacher, p_student, q_student):
        if dist.probs.shape != shape:
            raise InputError("all four distributions must share the batch shape")
    if p_teacher.direction != p_student.direction or q_teacher.direction != q_student.direction:
        raise InputError("teacher/student distribution directions disagree")
    batch = shape[0]
    kl_p, clamp_p = _kl_rows(p_teacher.probs, p_student.probs)
    kl_q, clamp_q = _kl_rows(q_teacher.probs, q_student.probs)
    if clamp_p or clamp_q:
        log.warning("crd_loss clamped %d student probabilities to %.0e",
                    clamp_p + clamp_q, KL_PROB_FLOOR)
    return (kl_p + kl_q) / batch


# ---------------------------------------------------------------------------
# Feature distillation (plain and masked)
# ---------------------------------------------------------------------------

def fd_loss(teacher_image: EmbeddingBatch, student_image: EmbeddingBatch,
            teacher_text: EmbeddingBatch, student_text: EmbeddingBatch) -> float:
    """Mean over the batch of squared embedding distances, both modalities."""
    require_same_shape(teacher_image, student_image)
    require_same_shape(teacher_text, student_text)
    if teacher_image.n != teacher_text.n:
        raise InputError("image and text batches disagree on row count")
    n = teacher_image.n
    dv = teacher_image.rows - student_image.rows
    ds = teacher_text.rows - student_text.rows
    return float((np.sum(dv * dv) + np.sum(ds * ds)) / n)


def mfd_loss(teacher_image: EmbeddingBatch, masked_student_image: EmbeddingBatch,
             teacher_text: EmbeddingBatch, student_text: EmbeddingBatch) -> float:
    """FD with the student's image embedding computed from a masked input.

    Same formula as ``fd_loss``; the masking lives in the forward pass that
    produced ``masked_student_image``, so a ratio-0 mask matches FD
    bit-for-bit.
    """
    return fd_loss(teacher_image, masked_student_image, teacher_text, student_text)


# ---------------------------------------------------------------------------
# Gradient distillation
# ---------------------------------------------------------------------------

def gd_loss(teacher_image: EmbeddingBatch, teacher_text: EmbeddingBatch,
            student_image: EmbeddingBatch, student_text: EmbeddingBatch,
            tau_teacher: float, tau_student: float, mode: str = "total") -> float:
    """MSE between the two models' task-loss gradient fields.

    Each side's gradients are taken w.r.t. its own normalized embeddings
    under its own temperature (the analytic closed form; see grads).
    ``mode`` selects how per-anchor terms are assembled — "total"
    (batch-mean loss gradient, the finite-difference-verifiable reading)
    or "anchor" (each row keeps only its own anchor's terms).
    """
    require_same_shape(teacher_image, teacher_text, student_image, student_text)
    g_teacher = clip_grad_analytic(teacher_image, teacher_text, tau_teacher, mode=mode)
    g_student = clip_grad_analytic(student_image, student_text, tau_student, mode=mode)
    n = teacher_image.n
    dv = g_teacher.d_image - g_student.d_image
    ds = g_teacher.d_text - g_student.d_text
    return float((np.sum(dv * dv) + np.sum(ds * ds)) / n)


# ---------------------------------------------------------------------------
# Interactive contrastive learning
# ---------------------------------------------------------------------------

def icl_loss(student_image: EmbeddingBatch, student_text: EmbeddingBatch,
             teacher_image: EmbeddingBatch, teacher_text: EmbeddingBatch,
             tau: float) -> float:
    """InfoNCE with student anchors contrasted against teacher embeddings."""
    _check_tau(tau)
    _require_normalized(student_image, student_text, teacher_image, teacher_text)
    require_same_shape(student_image, student_text, teacher_image, teacher_text)
    i2t = infonce_raw(student_image.rows, teacher_text.rows, tau)
    t2i = infonce_raw(student_text.rows, teacher_image.rows, tau)
    return 0.5 * (i2t + t2i)


# ---------------------------------------------------------------------------
# Augmented feature distillation
# ---------------------------------------------------------------------------

def afd_loss(model: ClipModel,
             student_image: EmbeddingBatch, student_text: EmbeddingBatch,
             teacher_image: EmbeddingBatch, teacher_text: EmbeddingBatch,
             tau: float) -> float:
    """Task loss on linearly fused student||teacher embeddings."""
    fused_image, fused_text = fuse_embeddings(
        model, student_image, teacher_image, student_text, teacher_text)
    return clip_loss(fused_image, fused_text, tau)


# ---------------------------------------------------------------------------
# Weighted combination
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KdWeights:
    """Scale factors selecting the distillation terms to train with.

    A term is enabled iff listed in ``enabled`` (default: every term with
    a positive weight). Disabled terms are never computed.
    """

    crd: float = 0.0
    fd: float = 0.0
    mfd: float = 0.0
    gd: float = 0.0
    icl: float = 0.0
    afd: float = 0.0
    enabled: frozenset = field(default=None)

    def __post_init__(self):
        for name in KD_TERMS:
            if getattr(self, name) < 0:
                raise ConfigError(f"weight {name} must be nonnegative")
        if self.enabled is None:
            derived = frozenset(n for n in KD_TERMS if getattr(self, n) > 0)
            object.__setattr__(self, "enabled", derived)
        else:
            enabled = frozenset(self.enabled)
            unknown = enabled - set(KD_TERMS)
            if unknown:
                raise ConfigError(f"unknown loss terms enabled: {sorted(unknown)}")
            object.__setattr__(self, "enabled", enabled)

    def weight(self, name: str) -> float:
        return getattr(self, name)

    @property
    def any_enabled(self) -> bool:
        return bool(self.enabled)

    @classmethod
    def unified(cls) -> "KdWeights":
        """The FD+CRD+ICL recipe with its reference weights."""
        return cls(crd=1.0, fd=2000.0, icl=1.0)

    @classmethod
    def single(cls, name: str, weight: Optional[float] = None) -> "KdWeights":
        """One term at its reference weight (or an explicit one)."""
        if name not in KD_TERMS:
            raise ConfigError(f"unknown loss term {name!r}")
        return cls(**{name: PAPER_WEIGHTS[name] if weight is None else weight})


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values plus their weighted total."""

    task: float
    terms: dict            # unweighted values, keyed by enabled term name
    weights: KdWeights
    total: float

    @classmethod
    def assemble(cls, task: float, terms: dict, weights: KdWeights) -> "LossBreakdown":
        total = task
        for name, value in terms.items():
            total += weights.weight(name) * value
        return cls(task=task, terms=dict(terms), weights=weights, total=total)


def combined_loss(weights: KdWeights, *,
                  student_image: EmbeddingBatch, student_text: EmbeddingBatch,
                  tau_student: float,
                  teacher_image: Optional[EmbeddingBatch] = None,
                  teacher_text: Optional[EmbeddingBatch] = None,
                  tau_teacher: Optional[float] = None,
                  model: Optional[ClipModel] = None,
                  masked_student_image: Optional[EmbeddingBatch] = None,
                  gd_mode: str = "total") -> LossBreakdown:
    """Task loss plus every enabled distillation term.

    The caller provides whatever the enabled set needs: teacher
    embeddings and temperature for any KD term, the model for projection
    (FD/MFD) and fusion heads (AFD), and the masked student image
    embedding for MFD. Missing requirements are config errors.
    """
    task = clip_loss(student_image, student_text, tau_student)
    terms: dict[str, float] = {}

    if weights.any_enabled:
        if teacher_image is None or teacher_text is None or tau_teacher is None:
            raise ConfigError("distillation terms enabled but teacher embeddings/temperature missing")

    def projected(batch: EmbeddingBatch) -> EmbeddingBatch:
        if model is not None:
            return project_student(model, batch, target_dim=teacher_image.d)
        if batch.d != teacher_image.d:
            raise ConfigError("student/teacher dims differ and no model with projection head given")
        return batch

    for name in KD_TERMS:
        if name not in weights.enabled:
            continue
        if name == "crd":
            p_t = contrastive_distribution(teacher_image, teacher_text, tau_teacher, "i2t")
            q_t = contrastive_distribution(teacher_text, teacher_image, tau_teacher, "t2i")
            p_s = contrastive_distribution(student_image, student_text, tau_student, "i2t")
            q_s = contrastive_distribution(student_text, student_image, tau_student, "t2i")
            terms[name] = crd_loss(p_t, q_t, p_s, q_s)
        elif name == "fd":
            terms[name] = fd_loss(teacher_image, projected(student_image),
                                  teacher_text, projected(student_text))
        elif name == "mfd":
            if masked_student_image is None:
                raise ConfigError("mfd enabled but no masked student image embedding provided")
            terms[name] = mfd_loss(teacher_image, projected(masked_student_image),
                                   teacher_text, projected(student_text))
        elif name == "gd":
            terms[name] = gd_loss(teacher_image, teacher_text, student_image, student_text,
                                  tau_teacher, tau_student, mode=gd_mode)
        elif name == "icl":
            terms[name] = icl_loss(student_image, student_text, teacher_image, teacher_text,
                                   tau_student)
        elif name == "afd":
            if model is None:
                raise ConfigError("afd enabled but no model with fusion heads provided")
            terms[name] = afd_loss(model, student_image, student_text,
                                   teacher_image, teacher_text, tau_student)

    return LossBreakdown.assemble(task, terms, weights)


# ---------------------------------------------------------------------------
# Mutual-information lower bound harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MiToyJoint:
    """A discrete joint over symbol pairs with per-modality codebooks.

    The joint table makes the mutual information exactly computable; the
    codebooks map symbols to unit vectors so the ICL-style critic
    (dot product over temperature) can score sampled pairs.
    """

    table: np.ndarray          # K x K joint probabilities
    v_codebook: np.ndarray     # K x dim unit rows (anchor modality)
    s_codebook: np.ndarray     # K x dim unit rows (contrast modality)
    negatives: int             # N negatives per positive

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise InputError("joint table must be square")
        if np.any(t < 0) or abs(float(t.sum()) - 1.0) > 1e-9:
            raise InputError("joint table must be a probability table")
        if self.negatives < 1:
            raise InputError("need at least one negative per positive")
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "v_codebook", np.asarray(self.v_codebook, dtype=np.float64))
        object.__setattr__(self, "s_codebook", np.asarray(self.s_codebook, dtype=np.float64))

    @property
    def symbols(self) -> int:
        return self.table.shape[0]

    def exact_mi(self) -> float:
        """Closed-form mutual information of the table (natural log)."""
        p = self.table
        marg_v = p.sum(axis=1)
        marg_s = p.sum(axis=0)
        denom = np.outer(marg_v, marg_s)
        nz = p > 0
        return float(np.sum(p[nz] * np.log(p[nz] / denom[nz])))

    @staticmethod
    def _codebooks(rng: RngStream, k: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
        v = l2_normalize_rows(rng.normal(size=(k, dim)))
        s = l2_normalize_rows(rng.normal(size=(k, dim)))
        return v, s

    @classmethod
    def independent(cls, k: int, rng: RngStream, negatives: int = 63, dim: int = 16) -> "MiToyJoint":
        """Product of random marginals: mutual information exactly 0."""
        marg_v = rng.generator.dirichlet(np.ones(k))
        marg_s = rng.generator.dirichlet(np.ones(k))
        v, s = cls._codebooks(rng, k, dim)
        return cls(np.outer(marg_v, marg_s), v, s, negatives)

    @classmethod
    def correlated(cls, k: int, rng: RngStream, negatives: int = 63, dim: int = 16) -> "MiToyJoint":
        """Uniform diagonal joint: mutual information exactly log k."""
        v, s = cls._codebooks(rng, k, dim)
        return cls(np.eye(k) / k, v, s, negatives)

    @classmethod
    def random(cls, k: int, rng: RngStream, negatives: int = 63, dim: int = 16) -> "MiToyJoint":
        """Dirichlet-random joint table."""
        table = rng.generator.dirichlet(np.ones(k * k)).reshape(k, k)
        v, s = cls._codebooks(rng, k, dim)
        return cls(table, v, s, negatives)


def mi_bound_check(joint: MiToyJoint, rng: RngStream, samples: int,
                   tau: float) -> tuple[float, float]:
    """Estimate the InfoNCE lower bound and return it with the exact MI.

    Draws ``samples`` positive pairs from the joint and N negatives per
    positive from the contrast marginal, scores them with the codebook
    critic at temperature ``tau``, and returns
    ``(log(N) - mean_loss, exact_mi)``. The caller asserts
    ``bound <= exact_mi + statistical_slack``; the inequality holds for
    an arbitrary critic, so any codebook/temperature is a valid probe.
    """
    if samples < 10_000:
        raise InputError(f"need at least 1e4 samples for a stable bound, got {samples}")
    _check_tau(tau)
    k = joint.symbols
    n_neg = joint.negatives

    flat = joint.table.ravel()
    pair_idx = rng.choice(k * k, size=samples, p=flat)
    anchor = pair_idx // k
    positive = pair_idx % k
    contrast_marginal = joint.table.sum(axis=0)
    negatives = rng.choice(k, size=(samples, n_neg), p=contrast_marginal)

    scores = (joint.v_codebook @ joint.s_codebook.T) / tau
    pos_scores = scores[anchor, positive]
    neg_scores = scores[anchor[:, None], negatives]
    candidates = np.concatenate([pos_scores[:, None], neg_scores], axis=1)
    mean_loss = float(np.mean(logsumexp_rows(candidates) - pos_scores))

    return math.log(n_neg) - mean_loss, joint.exact_mi()
