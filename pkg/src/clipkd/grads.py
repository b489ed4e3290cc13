"""Closed-form gradients, hand-written backprop, and finite-difference checks.

``clip_grad_analytic`` evaluates the task loss's gradient with respect to
the normalized embeddings in closed form. ``backprop_model`` composes
hand-derived layer-local rules in reverse topological order to produce
exact parameter gradients of the combined training loss, including the
second-order term that gradient distillation needs (its loss is built
from the student's own gradient field). ``finite_diff_grad`` is the
independent oracle both are checked against; ``grad_check_report`` runs
the whole grid and aggregates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .batch import EmbeddingBatch, require_same_shape
from .encoders import (ClipModel, MaskArg, ModelConfig, TowerConfig, Workspace,
                       _kept_index_matrix, _tower_forward, init_model,
                       parameter_shapes, sample_mask)
from .errors import ConfigError, InputError
from .numcore import NORM_EPS, RngStream, logsumexp_rows, softmax_rows


# ---------------------------------------------------------------------------
# Analytic gradient of the task loss w.r.t. embeddings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradField:
    """Gradients of a contrastive loss w.r.t. each embedding row."""

    d_image: np.ndarray
    d_text: np.ndarray
    tau: float

    def __post_init__(self):
        if self.d_image.shape != self.d_text.shape:
            raise InputError("gradient fields must share shapes")
        if not (np.all(np.isfinite(self.d_image)) and np.all(np.isfinite(self.d_text))):
            raise InputError("gradient field contains non-finite entries")


def clip_grad_analytic(image: EmbeddingBatch, text: EmbeddingBatch, tau: float,
                       mode: str = "total") -> GradField:
    """Closed-form gradient of the task loss w.r.t. normalized embeddings.

    mode="total": gradient of the batch-mean symmetric loss — every
    anchor's softmax contributes to every row. This is the reading that
    matches finite differences of ``clip_loss``.

    mode="anchor": row k keeps only anchor k's own terms (the per-anchor
    combination with the same 1/2 modality averaging, no batch mean).
    """
    if not (tau > 0.0 and math.isfinite(tau)):
        raise InputError(f"temperature must be positive and finite, got {tau}")
    require_same_shape(image, text)
    v, s = image.rows, text.rows
    n = v.shape[0]
    z = (v @ s.T) / tau
    p = softmax_rows(z)
    q = softmax_rows(z.T)
    eye = np.eye(n)
    if mode == "total":
        m = (p - eye) + (q - eye).T
        scale = 1.0 / (2.0 * n * tau)
        d_image = scale * (m @ s)
        d_text = scale * (m.T @ v)
    elif mode == "anchor":
        a = p - eye
        b = q - eye
        scale = 1.0 / (2.0 * tau)
        d_image = scale * (a @ s + np.diag(b)[:, None] * s)
        d_text = scale * (b @ v + np.diag(a)[:, None] * v)
    else:
        raise InputError(f"unknown gradient mode {mode!r}")
    return GradField(d_image, d_text, tau)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

DEFAULT_FD_STEP = 1e-5


def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], theta: np.ndarray,
                     step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    if step <= 0:
        raise InputError("finite-difference step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        original = theta[i]
        theta[i] = original + step
        f_plus = loss_fn(theta)
        theta[i] = original - step
        f_minus = loss_fn(theta)
        theta[i] = original
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def flatten_params(params: dict, names: list[str]) -> np.ndarray:
    return np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n in names])


def unflatten_params(theta: np.ndarray, names: list[str],
                     shapes: dict[str, tuple]) -> dict:
    out = {}
    pos = 0
    for name in names:
        shape = shapes[name]
        size = int(np.prod(shape)) if shape else 1
        out[name] = np.array(theta[pos:pos + size], dtype=np.float64).reshape(shape)
        pos += size
    return out


# ---------------------------------------------------------------------------
# Shared backward building blocks
# ---------------------------------------------------------------------------

def _softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - np.sum(d_probs * probs, axis=1, keepdims=True))


def _renorm_forward(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalize; returns (normalized, raw_norms, clamped denominators)."""
    raw = np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
    denom = np.maximum(raw, NORM_EPS)
    return rows / denom, raw, denom


def _renorm_backward(emb: np.ndarray, raw_norms: np.ndarray, denom: np.ndarray,
                     d_emb: np.ndarray) -> np.ndarray:
    """Backward of row normalization y -> y / max(||y||, eps)."""
    inner = np.sum(d_emb * emb, axis=1, keepdims=True)
    projected = d_emb - emb * inner
    return np.where(raw_norms >= NORM_EPS, projected, d_emb) / denom


def _tower_backward(params: dict, prefix: str, tower: TowerConfig, cache: dict,
                    d_emb: np.ndarray, grads: dict,
                    ws: Optional["Workspace"] = None):
    """Accumulate parameter gradients for one tower given d(normalized output)."""
    d_pre = _renorm_backward(cache["emb"], cache["raw_norms"], cache["denom"], d_emb)
    head_w = params[f"{prefix}.head.w"]
    grads[f"{prefix}.head.w"] += cache["pooled"].T @ d_pre
    grads[f"{prefix}.head.b"] += d_pre.sum(axis=0)
    d_pooled = d_pre @ head_w.T

    n, k = cache["n"], cache["k"]
    rows = n * k
    tag = cache["ws_tag"]

    def buffer(name, shape):
        if ws is None:
            return np.empty(shape)
        return ws.take((tag, name), shape)

    d_h = buffer("bw_dh", (rows, tower.width))
    d_h.reshape(n, k, tower.width)[:] = (d_pooled / k)[:, None, :]
    scratch_hidden = buffer("bw_sq", (rows, tower.hidden_dim))
    scratch_width = buffer("bw_dw", (rows, tower.width))
    for i in reversed(range(tower.blocks)):
        h_in, act = cache["blocks"][i]
        w1 = params[f"{prefix}.blk{i}.w1"]
        w2 = params[f"{prefix}.blk{i}.w2"]
        d_act = buffer(f"bw_dact{i}", (rows, tower.hidden_dim))
        np.matmul(d_h, w2.T, out=d_act)
        grads[f"{prefix}.blk{i}.w2"] += act.T @ d_h
        grads[f"{prefix}.blk{i}.b2"] += d_h.sum(axis=0)
        np.multiply(act, act, out=scratch_hidden)
        np.subtract(1.0, scratch_hidden, out=scratch_hidden)
        d_act *= scratch_hidden
        grads[f"{prefix}.blk{i}.w1"] += h_in.T @ d_act
        grads[f"{prefix}.blk{i}.b1"] += d_act.sum(axis=0)
        np.matmul(d_act, w1.T, out=scratch_width)
        d_h += scratch_width
    grads[f"{prefix}.embed.w"] += cache["tokens_flat"].T @ d_h
    grads[f"{prefix}.embed.b"] += d_h.sum(axis=0)


# ---------------------------------------------------------------------------
# Endpoint gradients (loss value + d/d embeddings + d/d tau per term)
# ---------------------------------------------------------------------------

def _symmetric_infonce_endpoint(v: np.ndarray, s: np.ndarray, tau: float):
    """Value and gradients of the batch-mean symmetric task loss.

    Used for the task term and (on fused embeddings) the AFD term, where
    both sides receive gradients.
    """
    n = v.shape[0]
    z = (v @ s.T) / tau
    p = softmax_rows(z)
    q = softmax_rows(z.T)
    eye = np.eye(n)
    dz = ((p - eye) + (q - eye).T) / (2.0 * n)
    d_v = dz @ s / tau
    d_s = dz.T @ v / tau
    d_tau = -float(np.sum(dz * z)) / tau
    value = 0.5 * float(np.mean(logsumexp_rows(z) - np.diag(z))
                        + np.mean(logsumexp_rows(z.T) - np.diag(z)))
    return value, d_v, d_s, d_tau


def _one_sided_infonce_endpoint(anchor: np.ndarray, contrast: np.ndarray, tau: float):
    """Mean InfoNCE with a constant contrast set: grads reach the anchor only."""
    n = anchor.shape[0]
    z = (anchor @ contrast.T) / tau
    p = softmax_rows(z)
    dz = (p - np.eye(n)) / n
    d_anchor = dz @ contrast / tau
    d_tau = -float(np.sum(dz * z)) / tau
    value = float(np.mean(logsumexp_rows(z) - np.diag(z)))
    return value, d_anchor, d_tau


def _crd_endpoint(v: np.ndarray, s: np.ndarray, tau: float,
                  p_teacher: np.ndarray, q_teacher: np.ndarray):
    """Value and student-side gradients of the KL-alignment term."""
    from .losses import _kl_rows  # late import; grads is imported by losses

    n = v.shape[0]
    z = (v @ s.T) / tau
    p = softmax_rows(z)
    q = softmax_rows(z.T)
    kl_p, _ = _kl_rows(p_teacher, p)
    kl_q, _ = _kl_rows(q_teacher, q)
    value = (kl_p + kl_q) / n
    dz = ((p - p_teacher) + (q - q_teacher).T) / n
    d_v = dz @ s / tau
    d_s = dz.T @ v / tau
    d_tau = -float(np.sum(dz * z)) / tau
    return value, d_v, d_s, d_tau


def _mse_pair_endpoint(student: np.ndarray, teacher: np.ndarray, n: int):
    """One modality of the feature-distillation MSE: value part and d(student)."""
    diff = student - teacher
    return float(np.sum(diff * diff)) / n, 2.0 * diff / n


def _projected_mse_endpoint(student_emb: np.ndarray, teacher_emb: np.ndarray,
                            proj_w: Optional[np.ndarray], n: int):
    """FD/MFD one modality with optional projection head.

    Returns (value, d_student_emb, d_proj_w_or_None).
    """
    if proj_w is None:
        value, d_student = _mse_pair_endpoint(student_emb, teacher_emb, n)
        return value, d_student, None
    projected_raw = student_emb @ proj_w
    projected, raw_norms, denom = _renorm_forward(projected_raw)
    value, d_projected = _mse_pair_endpoint(projected, teacher_emb, n)
    d_raw = _renorm_backward(projected, raw_norms, denom, d_projected)
    return value, d_raw @ proj_w.T, student_emb.T @ d_raw


def _gd_endpoint(v: np.ndarray, s: np.ndarray, tau: float,
                 teacher_field: GradField, mode: str):
    """Gradient-distillation value and its second-order student gradients.

    The student's own gradient field is an analytic function of (v, s,
    tau); differentiating the squared distance to the teacher's field
    therefore backpropagates through that closed form.
    """
    n = v.shape[0]
    z = (v @ s.T) / tau
    p = softmax_rows(z)
    q = softmax_rows(z.T)
    eye = np.eye(n)

    if mode == "total":
        m = (p - eye) + (q - eye).T
        scale = 1.0 / (2.0 * n * tau)
        g_v = scale * (m @ s)
        g_s = scale * (m.T @ v)
    elif mode == "anchor":
        a = p - eye
        b = q - eye
        scale = 1.0 / (2.0 * tau)
        g_v = scale * (a @ s + np.diag(b)[:, None] * s)
        g_s = scale * (b @ v + np.diag(a)[:, None] * v)
    else:
        raise InputError(f"unknown gradient mode {mode!r}")

    diff_v = g_v - teacher_field.d_image
    diff_s = g_s - teacher_field.d_text
    value = float(np.sum(diff_v * diff_v) + np.sum(diff_s * diff_s)) / n
    r_v = 2.0 * diff_v / n
    r_s = 2.0 * diff_s / n

    if mode == "total":
        d_scale = float(np.sum(r_v * (m @ s)) + np.sum(r_s * (m.T @ v)))
        d_m = scale * (r_v @ s.T) + scale * (v @ r_s.T)
        d_v = scale * (m @ r_s)
        d_s = scale * (m.T @ r_v)
        d_p = d_m
        d_q = d_m.T
        d_tau_scale = d_scale * (-scale / tau)  # d(1/(2 n tau))/d tau = -scale/tau
    else:
        aux_v = a @ s + np.diag(b)[:, None] * s
        aux_s = b @ v + np.diag(a)[:, None] * v
        d_scale = float(np.sum(r_v * aux_v) + np.sum(r_s * aux_s))
        d_a = scale * (r_v @ s.T)
        d_b = scale * (r_s @ v.T)
        idx = np.arange(n)
        d_b[idx, idx] += scale * np.sum(r_v * s, axis=1)
        d_a[idx, idx] += scale * np.sum(r_s * v, axis=1)
        d_v = scale * (b.T @ r_s) + scale * np.diag(a)[:, None] * r_s
        d_s = scale * (a.T @ r_v) + scale * np.diag(b)[:, None] * r_v
        d_p = d_a
        d_q = d_b
        d_tau_scale = d_scale * (-scale / tau)

    dz = _softmax_backward(p, d_p) + _softmax_backward(q, d_q).T
    d_v = d_v + dz @ s / tau
    d_s = d_s + dz.T @ v / tau
    d_tau = -float(np.sum(dz * z)) / tau + d_tau_scale
    return value, d_v, d_s, d_tau


def _afd_endpoint(sv: np.ndarray, ss: np.ndarray, tv: np.ndarray, ts: np.ndarray,
                  w_img: np.ndarray, w_txt: np.ndarray, tau: float):
    """AFD: task loss on fused student||teacher embeddings.

    Teacher halves of the concatenation are constants; gradients reach the
    student embeddings and the fusion heads. Returns
    (value, d_sv, d_ss, d_tau, d_w_img, d_w_txt).
    """
    d = sv.shape[1]
    cat_v = np.concatenate([sv, tv], axis=1)
    cat_s = np.concatenate([ss, ts], axis=1)
    fv, fv_norms, fv_denom = _renorm_forward(cat_v @ w_img)
    fs, fs_norms, fs_denom = _renorm_forward(cat_s @ w_txt)
    value, d_fv, d_fs, d_tau = _symmetric_infonce_endpoint(fv, fs, tau)
    d_raw_v = _renorm_backward(fv, fv_norms, fv_denom, d_fv)
    d_raw_s = _renorm_backward(fs, fs_norms, fs_denom, d_fs)
    d_sv = (d_raw_v @ w_img.T)[:, :d]
    d_ss = (d_raw_s @ w_txt.T)[:, :d]
    return value, d_sv, d_ss, d_tau, cat_v.T @ d_raw_v, cat_s.T @ d_raw_s


# ---------------------------------------------------------------------------
# Full-model backprop
# ---------------------------------------------------------------------------

def zero_like_params(params: dict) -> dict:
    return {name: np.zeros_like(p) for name, p in params.items()}


def backprop_model(model: ClipModel, batch, weights, teacher: Optional[ClipModel] = None,
                   *, masks: MaskArg = None,
                   teacher_embeddings: Optional[tuple] = None,
                   gd_mode: str = "total", workspace: Optional[Workspace] = None):
    """Exact gradients of the combined loss for every student parameter.

    ``batch`` is anything with ``images`` (n, patches*patch_dim) and
    ``texts`` (n, tokens*token_dim) arrays. Teacher embeddings may be
    passed precomputed as ``(image_rows, text_rows, tau)`` — useful when
    a frozen teacher's per-sample embeddings are cached across steps —
    otherwise they are computed from ``teacher``. Returns
    ``(LossBreakdown, grads_by_name)``; no teacher gradients exist.
    """
    from .losses import LossBreakdown  # late import; losses imports this module

    params = model.params
    tau_s = model.tau
    grads = zero_like_params(params)

    images = np.asarray(batch.images, dtype=np.float64)
    texts = np.asarray(batch.texts, dtype=np.float64)
    n = images.shape[0]

    sv, img_cache = _tower_forward(params, "img", model.cfg.image, images, None,
                                   want_cache=True, ws=workspace)
    ss, txt_cache = _tower_forward(params, "txt", model.cfg.text, texts, None,
                                   want_cache=True, ws=workspace)

    need_teacher = weights.any_enabled
    tv = ts = None
    tau_t = None
    if need_teacher:
        if teacher_embeddings is not None:
            tv, ts, tau_t = teacher_embeddings
            tv = np.asarray(tv, dtype=np.float64)
            ts = np.asarray(ts, dtype=np.float64)
        elif teacher is not None:
            tv, _ = _tower_forward(teacher.params, "img", teacher.cfg.image, images, None)
            ts, _ = _tower_forward(teacher.params, "txt", teacher.cfg.text, texts, None)
            tau_t = teacher.tau
        else:
            raise ConfigError("distillation terms enabled but no teacher provided")

    masked_sv = masked_cache = None
    if "mfd" in weights.enabled:
        if masks is None:
            raise ConfigError("mfd enabled but no patch masks provided")
        kept = _kept_index_matrix(masks, n, model.cfg.image.tokens)
        masked_sv, masked_cache = _tower_forward(params, "img", model.cfg.image,
                                                 images, kept, want_cache=True,
                                                 ws=workspace, ws_tag="img_masked")

    proj_w = params.get("proj.w")
    if need_teacher and proj_w is None and ("fd" in weights.enabled or "mfd" in weights.enabled):
        if sv.shape[1] != tv.shape[1]:
            raise ConfigError(
                f"student dim {sv.shape[1]} != teacher dim {tv.shape[1]} and no projection head"
            )

    d_sv = np.zeros_like(sv)
    d_ss = np.zeros_like(ss)
    d_masked = np.zeros_like(masked_sv) if masked_sv is not None else None
    d_tau = 0.0

    task, g_v, g_s, g_tau = _symmetric_infonce_endpoint(sv, ss, tau_s)
    d_sv += g_v
    d_ss += g_s
    d_tau += g_tau

    terms: dict[str, float] = {}
    from .losses import KD_TERMS
    for name in KD_TERMS:  # fixed order keeps gradient accumulation deterministic
        if name not in weights.enabled:
            continue
        lam = weights.weight(name)
        if name == "crd":
            p_t = softmax_rows((tv @ ts.T) / tau_t)
            q_t = softmax_rows((ts @ tv.T) / tau_t)
            value, g_v, g_s, g_tau = _crd_endpoint(sv, ss, tau_s, p_t, q_t)
            d_sv += lam * g_v
            d_ss += lam * g_s
            d_tau += lam * g_tau
        elif name == "fd":
            val_v, g_v, g_proj_v = _projected_mse_endpoint(sv, tv, proj_w, n)
            val_s, g_s, g_proj_s = _projected_mse_endpoint(ss, ts, proj_w, n)
            value = val_v + val_s
            d_sv += lam * g_v
            d_ss += lam * g_s
            if g_proj_v is not None:
                grads["proj.w"] += lam * (g_proj_v + g_proj_s)
        elif name == "mfd":
            val_v, g_v, g_proj_v = _projected_mse_endpoint(masked_sv, tv, proj_w, n)
            val_s, g_s, g_proj_s = _projected_mse_endpoint(ss, ts, proj_w, n)
            value = val_v + val_s
            d_masked += lam * g_v
            d_ss += lam * g_s
            if g_proj_v is not None:
                grads["proj.w"] += lam * (g_proj_v + g_proj_s)
        elif name == "gd":
            teacher_field = clip_grad_analytic(
                EmbeddingBatch(tv), EmbeddingBatch(ts), tau_t, mode=gd_mode)
            value, g_v, g_s, g_tau = _gd_endpoint(sv, ss, tau_s, teacher_field, gd_mode)
            d_sv += lam * g_v
            d_ss += lam * g_s
            d_tau += lam * g_tau
        elif name == "icl":
            val_i, g_v, tau_i = _one_sided_infonce_endpoint(sv, ts, tau_s)
            val_t, g_s, tau_x = _one_sided_infonce_endpoint(ss, tv, tau_s)
            value = 0.5 * (val_i + val_t)
            d_sv += lam * 0.5 * g_v
            d_ss += lam * 0.5 * g_s
            d_tau += lam * 0.5 * (tau_i + tau_x)
        elif name == "afd":
            w_img = params.get("fuse_img.w")
            w_txt = params.get("fuse_txt.w")
            if w_img is None or w_txt is None:
                raise ConfigError("afd enabled but fusion heads not configured")
            value, g_v, g_s, g_tau, g_wi, g_wt = _afd_endpoint(
                sv, ss, tv, ts, w_img, w_txt, tau_s)
            d_sv += lam * g_v
            d_ss += lam * g_s
            d_tau += lam * g_tau
            grads["fuse_img.w"] += lam * g_wi
            grads["fuse_txt.w"] += lam * g_wt
        else:  # pragma: no cover - weights validates term names
            raise ConfigError(f"unknown loss term {name!r}")
        terms[name] = value

    _tower_backward(params, "img", model.cfg.image, img_cache, d_sv, grads, ws=workspace)
    _tower_backward(params, "txt", model.cfg.text, txt_cache, d_ss, grads, ws=workspace)
    if masked_cache is not None:
        _tower_backward(params, "img", model.cfg.image, masked_cache, d_masked, grads,
                        ws=workspace)

    # tau = exp(-log_inv_tau), so d/d(log_inv_tau) = -tau * d/d(tau)
    grads["log_inv_tau"] = grads["log_inv_tau"] + np.array(-tau_s * d_tau)

    breakdown = LossBreakdown.assemble(task, terms, weights)
    return breakdown, grads


# ---------------------------------------------------------------------------
# Check harness
# ---------------------------------------------------------------------------

@dataclass
class GradReport:
    """Aggregated analytic-vs-finite-difference comparison.

    Per check block, the relative error is the max absolute deviation
    divided by the max absolute finite-difference gradient of that check
    (floored at 1e-12 so all-zero gradients compare cleanly).
    """

    blocks: dict            # name -> (relative, absolute, tolerance)
    max_relative_error: float
    max_absolute_error: float
    passed: bool

    @classmethod
    def from_blocks(cls, blocks: dict) -> "GradReport":
        max_rel = max((rel for rel, _, _ in blocks.values()), default=0.0)
        max_abs = max((ab for _, ab, _ in blocks.values()), default=0.0)
        passed = all(rel <= tol for rel, _, tol in blocks.values())
        return cls(blocks=blocks, max_relative_error=max_rel,
                   max_absolute_error=max_abs, passed=passed)


def _compare(analytic: np.ndarray, reference: np.ndarray) -> tuple[float, float]:
    abs_err = float(np.max(np.abs(analytic - reference))) if analytic.size else 0.0
    scale = max(float(np.max(np.abs(reference))) if reference.size else 0.0, 1e-12)
    return abs_err / scale, abs_err


def check_model_config(mode: str = "total") -> ModelConfig:
    """The width-8 configuration the end-to-end checks run on.

    Projection and fusion heads are always present so every parameter
    block gets exercised.
    """
    return ModelConfig(
        embed_dim=8,
        image=TowerConfig(tokens=4, token_dim=3, width=8, blocks=2),
        text=TowerConfig(tokens=3, token_dim=3, width=8, blocks=2),
        proj_to=8,
        fuse_with=8,
    )


class _RawBatch:
    def __init__(self, images: np.ndarray, texts: np.ndarray):
        self.images = images
        self.texts = texts


def model_loss_closure(cfg: ModelConfig, batch, weights, teacher_embeddings,
                       masks: MaskArg, gd_mode: str) -> Callable[[np.ndarray], float]:
    """Total combined loss as a function of the flattened parameter vector.

    Deliberately routed through the public forward + loss composition so
    the finite-difference check is independent of the backprop code.
    """
    from . import losses
    from .encoders import encode_image, encode_text

    names = list(parameter_shapes(cfg))
    shapes = parameter_shapes(cfg)

    def loss_of(theta: np.ndarray) -> float:
        params = unflatten_params(theta, names, shapes)
        model = ClipModel(cfg, params)
        student_image = encode_image(model, batch.images)
        student_text = encode_text(model, batch.texts)
        masked = encode_image(model, batch.images, masks) if "mfd" in weights.enabled else None
        teacher_kwargs = {}
        if weights.any_enabled:
            tv, ts, tau_t = teacher_embeddings
            teacher_kwargs = dict(
                teacher_image=EmbeddingBatch(tv), teacher_text=EmbeddingBatch(ts),
                tau_teacher=tau_t)
        breakdown = losses.combined_loss(
            weights, student_image=student_image, student_text=student_text,
            tau_student=float(np.exp(-params["log_inv_tau"])),
            model=model, masked_student_image=masked, gd_mode=gd_mode,
            **teacher_kwargs)
        return breakdown.total

    return loss_of


def _random_unit_rows(rng: RngStream, n: int, d: int) -> np.ndarray:
    rows = rng.normal(size=(n, d))
    return rows / np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))


def grad_check_report(batch_grid=((2, 4), (2, 8), (4, 4), (4, 8), (8, 4), (8, 8)),
                      taus=(0.07, 1.0), seeds=(0, 1, 2),
                      analytic_tolerance: float = 1e-6,
                      model_tolerance: float = 1e-4,
                      step: float = DEFAULT_FD_STEP,
                      include_model_checks: bool = True) -> GradReport:
    """Run the analytic and end-to-end gradient checks and aggregate.

    The analytic section compares ``clip_grad_analytic`` against central
    finite differences of the task loss over (n, d, tau, seed) grid
    points. The end-to-end section compares ``backprop_model`` against
    finite differences of the composed forward on the width-8 model, for
    each distillation term alone and for the unified FD+ICL+CRD set.
    """
    from . import losses

    blocks: dict = {}

    for n, d in batch_grid:
        for tau in taus:
            for seed in seeds:
                rng = RngStream(seed, stream_id=0xC0FFEE)
                v = _random_unit_rows(rng, n, d)
                s = _random_unit_rows(rng, n, d)
                field = clip_grad_analytic(EmbeddingBatch(v), EmbeddingBatch(s), tau)
                analytic = np.concatenate([field.d_image.ravel(), field.d_text.ravel()])

                def loss_of(theta, n=n, d=d, tau=tau):
                    vv = theta[:n * d].reshape(n, d)
                    ss = theta[n * d:].reshape(n, d)
                    return losses.clip_loss_raw(vv, ss, tau)

                theta0 = np.concatenate([v.ravel(), s.ravel()])
                reference = finite_diff_grad(loss_of, theta0, step)
                rel, ab = _compare(analytic, reference)
                blocks[f"clip_grad[n={n},d={d},tau={tau},seed={seed}]"] = (
                    rel, ab, analytic_tolerance)

    if include_model_checks:
        term_sets = [losses.KdWeights()]
        term_sets += [losses.KdWeights.single(name) for name in losses.KD_TERMS]
        term_sets += [losses.KdWeights.unified()]
        labels = ["task_only", *losses.KD_TERMS, "fd+icl+crd"]

        cfg = check_model_config()
        rng = RngStream(7, stream_id=0xBACC)
        batch = _RawBatch(rng.normal(size=(4, cfg.image.tokens * cfg.image.token_dim)),
                          rng.normal(size=(4, cfg.text.tokens * cfg.text.token_dim)))
        teacher = init_model(check_model_config(), RngStream(11, stream_id=0x7EAC))
        from .encoders import encode_image, encode_text
        tv = encode_image(teacher, batch.images).rows
        ts = encode_text(teacher, batch.texts).rows
        teacher_embeddings = (tv, ts, teacher.tau)
        masks = [sample_mask(rng, cfg.image.tokens, 0.5) for _ in range(4)]

        names = list(parameter_shapes(cfg))
        shapes = parameter_shapes(cfg)
        for label, weights in zip(labels, term_sets):
            model = init_model(cfg, RngStream(3, stream_id=0x57D))
            breakdown, grads = backprop_model(
                model, batch, weights, masks=masks,
                teacher_embeddings=teacher_embeddings if weights.any_enabled else None)
            analytic = flatten_params(grads, names)
            closure = model_loss_closure(cfg, batch, weights, teacher_embeddings,
                                         masks, "total")
            reference = finite_diff_grad(closure, flatten_params(model.params, names), step)
            rel, ab = _compare(analytic, reference)
            blocks[f"backprop[{label}]"] = (rel, ab, model_tolerance)

    return GradReport.from_blocks(blocks)
