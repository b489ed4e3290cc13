"""Toy dual encoders: paired image/text towers, masking, heads, temperature.

Each tower is a patch/token embedder, a stack of residual tanh-MLP blocks,
mean pooling over (kept) tokens, a linear head, and l2 normalization. The
architecture is deliberately small and smooth so its gradients can be
hand-derived and verified against finite differences.

The image tower optionally drops patches MAE-style: dropped patches are
removed from the token average rather than zeroed, so a mask that keeps
every patch reproduces the unmasked forward bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .batch import EmbeddingBatch
from .errors import ConfigError, InputError
from .numcore import NORM_EPS, RngStream

# exp(log_inv_tau) is clamped into (0, MAX_LOGIT_SCALE] after each
# optimizer step (standard CLIP practice).
MAX_LOGIT_SCALE = 100.0
INIT_TAU = 0.07


@dataclass(frozen=True)
class TowerConfig:
    tokens: int      # patches (image) or sequence length (text)
    token_dim: int   # raw feature size per patch/token
    width: int       # residual stream width
    blocks: int
    hidden: Optional[int] = None  # MLP bottleneck; defaults to width // 4

    @property
    def hidden_dim(self) -> int:
        return self.hidden if self.hidden is not None else max(self.width // 4, 2)

    def validate(self, name: str):
        for fld in ("tokens", "token_dim", "width", "blocks"):
            if getattr(self, fld) < 1:
                raise ConfigError(f"{name}.{fld} must be >= 1")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError(f"{name}.hidden must be >= 1 when set")


@dataclass(frozen=True)
class ModelConfig:
    """Sizes for one dual-encoder model.

    ``proj_to`` adds a student-side linear projection head mapping the
    embedding to a teacher-sized space (used by FD/MFD when dims differ).
    ``fuse_with`` adds the two fusion heads used by AFD; its value is the
    teacher embedding dim, and fused embeddings live in that space.
    """

    embed_dim: int = 32
    image: TowerConfig = TowerConfig(tokens=16, token_dim=8, width=128, blocks=4)
    text: TowerConfig = TowerConfig(tokens=8, token_dim=8, width=128, blocks=4)
    proj_to: Optional[int] = None
    fuse_with: Optional[int] = None

    def validate(self):
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        self.image.validate("image")
        self.text.validate("text")
        if self.proj_to is not None and self.proj_to < 1:
            raise ConfigError("proj_to must be >= 1 when set")
        if self.fuse_with is not None and self.fuse_with < 1:
            raise ConfigError("fuse_with must be >= 1 when set")


def teacher_config() -> ModelConfig:
    """Default large tower: width 128, 4 blocks, d=32."""
    return ModelConfig()


def student_config(**overrides) -> ModelConfig:
    """Default small tower: width 32, 2 blocks, d=32."""
    cfg = ModelConfig(
        image=TowerConfig(tokens=16, token_dim=8, width=32, blocks=2),
        text=TowerConfig(tokens=8, token_dim=8, width=32, blocks=2),
    )
    return replace(cfg, **overrides) if overrides else cfg


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical (ordered) name -> shape manifest for a model config."""
    shapes: dict[str, tuple[int, ...]] = {}
    for prefix, tower in (("img", cfg.image), ("txt", cfg.text)):
        shapes[f"{prefix}.embed.w"] = (tower.token_dim, tower.width)
        shapes[f"{prefix}.embed.b"] = (tower.width,)
        for i in range(tower.blocks):
            shapes[f"{prefix}.blk{i}.w1"] = (tower.width, tower.hidden_dim)
            shapes[f"{prefix}.blk{i}.b1"] = (tower.hidden_dim,)
            shapes[f"{prefix}.blk{i}.w2"] = (tower.hidden_dim, tower.width)
            shapes[f"{prefix}.blk{i}.b2"] = (tower.width,)
        shapes[f"{prefix}.head.w"] = (tower.width, cfg.embed_dim)
        shapes[f"{prefix}.head.b"] = (cfg.embed_dim,)
    if cfg.proj_to is not None:
        shapes["proj.w"] = (cfg.embed_dim, cfg.proj_to)
    if cfg.fuse_with is not None:
        fused_in = cfg.embed_dim + cfg.fuse_with
        shapes["fuse_img.w"] = (fused_in, cfg.fuse_with)
        shapes["fuse_txt.w"] = (fused_in, cfg.fuse_with)
    shapes["log_inv_tau"] = ()
    return shapes


@dataclass
class ClipModel:
    """Parameters for one dual encoder plus its learnable temperature.

    ``params['log_inv_tau']`` stores log(1/tau); the exp of it (the logit
    scale) is kept in (0, 100] by the optimizer's post-step clamp.
    """

    cfg: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def tau(self) -> float:
        return float(np.exp(-self.params["log_inv_tau"]))

    def copy(self) -> "ClipModel":
        return ClipModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def validate_finite(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise InputError(f"parameter {name} contains non-finite entries")


def init_model(cfg: ModelConfig, rng: RngStream) -> ClipModel:
    """Draw parameters: weights ~ N(0, 1/fan_in), biases zero, tau=0.07."""
    cfg.validate()
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "log_inv_tau":
            params[name] = np.array(math.log(1.0 / INIT_TAU))
        elif name.split(".")[-1].startswith("b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[0]
            params[name] = rng.normal(size=shape, scale=fan_in ** -0.5)
    return ClipModel(cfg, params)


def clamp_temperature(params: dict[str, np.ndarray]):
    """Project log_inv_tau so exp(log_inv_tau) <= MAX_LOGIT_SCALE."""
    cap = math.log(MAX_LOGIT_SCALE)
    t = params["log_inv_tau"]
    if t > cap:
        params["log_inv_tau"] = np.array(cap)


# ---------------------------------------------------------------------------
# Patch masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """A fixed subset of patch indices that survive masking."""

    ratio: float
    patch_count: int
    kept: tuple[int, ...]

    def __post_init__(self):
        expected = kept_count(self.patch_count, self.ratio)
        if len(self.kept) != expected:
            raise ConfigError(
                f"mask keeps {len(self.kept)} patches, expected {expected}"
            )
        if list(self.kept) != sorted(set(self.kept)):
            raise ConfigError("kept indices must be unique and strictly increasing")
        if self.kept and (self.kept[0] < 0 or self.kept[-1] >= self.patch_count):
            raise ConfigError("kept indices out of range")


def kept_count(patch_count: int, ratio: float) -> int:
    return max(1, round((1.0 - ratio) * patch_count))


def sample_mask(rng: RngStream, patch_count: int, ratio: float) -> MaskSpec:
    """Uniformly random kept-index subset of the mandated size."""
    if not (0.0 <= ratio < 1.0):
        raise ConfigError(f"mask ratio must be in [0, 1), got {ratio}")
    k = kept_count(patch_count, ratio)
    kept = np.sort(rng.choice(patch_count, size=k, replace=False))
    return MaskSpec(ratio=ratio, patch_count=patch_count, kept=tuple(int(i) for i in kept))


MaskArg = Union[MaskSpec, Sequence[MaskSpec], None]


def _kept_index_matrix(mask: MaskArg, n: int, patch_count: int) -> Optional[np.ndarray]:
    """Resolve the mask argument to an (n, K) gather-index matrix, or None."""
    if mask is None:
        return None
    if isinstance(mask, MaskSpec):
        masks = [mask] * n
    else:
        masks = list(mask)
        if len(masks) != n:
            raise InputError(f"got {len(masks)} masks for a batch of {n} images")
    ks = {len(m.kept) for m in masks}
    if len(ks) != 1:
        raise InputError("all masks in a batch must keep the same patch count")
    for m in masks:
        if m.patch_count != patch_count:
            raise InputError(
                f"mask patch count {m.patch_count} != image patch grid {patch_count}"
            )
    return np.array([m.kept for m in masks], dtype=np.intp)


# ---------------------------------------------------------------------------
# Tower forward (with optional cache for backprop)
# ---------------------------------------------------------------------------

class Workspace:
    """Reusable buffers for the training hot path.

    The per-step forward/backward passes write their large token-level
    intermediates into persistent arrays instead of allocating ~10 MB of
    fresh pages every step. One workspace belongs to one training loop;
    buffers are fully overwritten before each use.
    """

    def __init__(self):
        self._buffers: dict = {}

    def take(self, key, shape) -> np.ndarray:
        buf = self._buffers.get(key)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._buffers[key] = buf
        return buf


def _tower_forward(params: dict[str, np.ndarray], prefix: str, tower: TowerConfig,
                   raw: np.ndarray, kept_idx: Optional[np.ndarray],
                   want_cache: bool = False, ws: Optional[Workspace] = None,
                   ws_tag: str = ""):
    """Run one tower. ``raw`` is (n, tokens*token_dim) row-major.

    Returns (normalized n x d embeddings, cache-or-None). The cache holds
    every intermediate the hand-written backward pass needs. With a
    workspace, big intermediates live in reused buffers, so results are
    only valid until the next forward with the same (workspace, tag).
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = raw.shape[0]
    if raw.ndim != 2 or raw.shape[1] != tower.tokens * tower.token_dim:
        raise InputError(
            f"{prefix} input must be (n, {tower.tokens * tower.token_dim}), got {raw.shape}"
        )
    tokens = raw.reshape(n, tower.tokens, tower.token_dim)
    if kept_idx is not None:
        tokens = tokens[np.arange(n)[:, None], kept_idx]
    k = tokens.shape[1]
    rows = n * k
    tag = ws_tag or prefix

    def buffer(name, shape):
        if ws is None:
            return np.empty(shape)
        return ws.take((tag, name), shape)

    flat = np.ascontiguousarray(tokens.reshape(rows, tower.token_dim))
    h = buffer("h0", (rows, tower.width))
    np.matmul(flat, params[f"{prefix}.embed.w"], out=h)
    h += params[f"{prefix}.embed.b"]
    block_cache = []
    for i in range(tower.blocks):
        pre = buffer(f"pre{i}", (rows, tower.hidden_dim))
        np.matmul(h, params[f"{prefix}.blk{i}.w1"], out=pre)
        pre += params[f"{prefix}.blk{i}.b1"]
        act = np.tanh(pre, out=pre)
        if want_cache:
            block_cache.append((h, act))
        nxt = buffer(f"h{i + 1}", (rows, tower.width))
        np.matmul(act, params[f"{prefix}.blk{i}.w2"], out=nxt)
        nxt += params[f"{prefix}.blk{i}.b2"]
        nxt += h
        h = nxt

    pooled = h.reshape(n, k, tower.width).mean(axis=1)
    preout = pooled @ params[f"{prefix}.head.w"] + params[f"{prefix}.head.b"]
    raw_norms = np.sqrt(np.sum(preout * preout, axis=1, keepdims=True))
    denom = np.maximum(raw_norms, NORM_EPS)
    with np.errstate(invalid="ignore"):  # non-finite inputs are caught downstream
        emb = preout / denom

    cache = None
    if want_cache:
        cache = {
            "tokens_flat": flat,
            "blocks": block_cache,
            "h_final": h,
            "pooled": pooled,
            "preout": preout,
            "raw_norms": raw_norms,
            "denom": denom,
            "emb": emb,
            "n": n,
            "k": k,
            "kept_idx": kept_idx,
            "ws_tag": tag,
        }
    return emb, cache


def encode_image(model: ClipModel, images: np.ndarray, mask: MaskArg = None) -> EmbeddingBatch:
    """Embed raw images (n, patches*patch_dim) -> normalized (n, d).

    With a mask, only kept patches enter the token average; a ratio-0 mask
    reproduces the unmasked forward exactly.
    """
    images = np.asarray(images, dtype=np.float64)
    idx = _kept_index_matrix(mask, images.shape[0], model.cfg.image.tokens)
    emb, _ = _tower_forward(model.params, "img", model.cfg.image, images, idx)
    return EmbeddingBatch(emb, normalized=True)


def encode_text(model: ClipModel, texts: np.ndarray) -> EmbeddingBatch:
    """Embed raw texts (n, tokens*token_dim) -> normalized (n, d)."""
    emb, _ = _tower_forward(model.params, "txt", model.cfg.text, np.asarray(texts, dtype=np.float64), None)
    return EmbeddingBatch(emb, normalized=True)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def project_student(model: ClipModel, e: EmbeddingBatch,
                    target_dim: Optional[int] = None) -> EmbeddingBatch:
    """Map student embeddings into the teacher's space for FD/MFD.

    Applies the linear projection head then re-normalizes. Without a head
    this is the identity; if ``target_dim`` is given and disagrees with the
    embedding dim, the missing head is a config error.
    """
    w = model.params.get("proj.w")
    if w is None:
        if target_dim is not None and target_dim != e.d:
            raise ConfigError(
                f"student dim {e.d} != teacher dim {target_dim} and no projection head configured"
            )
        return e
    if e.d != w.shape[0]:
        raise ConfigError(f"projection head expects dim {w.shape[0]}, got {e.d}")
    return EmbeddingBatch.from_rows(e.rows @ w)


def fuse_embeddings(model: ClipModel,
                    student_image: EmbeddingBatch, teacher_image: EmbeddingBatch,
                    student_text: EmbeddingBatch, teacher_text: EmbeddingBatch,
                    ) -> tuple[EmbeddingBatch, EmbeddingBatch]:
    """Concatenate student||teacher per modality, apply the fusion heads,
    and re-normalize. Teacher inputs are constants (gradients never flow
    into them); that contract matters to backprop, not to this forward.
    """
    wi = model.params.get("fuse_img.w")
    wt = model.params.get("fuse_txt.w")
    if wi is None or wt is None:
        raise ConfigError("fusion heads not configured (set fuse_with on the model config)")
    if student_image.n != teacher_image.n or student_text.n != teacher_text.n:
        raise InputError("fusion inputs must share row counts")
    cat_i = np.concatenate([student_image.rows, teacher_image.rows], axis=1)
    cat_t = np.concatenate([student_text.rows, teacher_text.rows], axis=1)
    if cat_i.shape[1] != wi.shape[0] or cat_t.shape[1] != wt.shape[0]:
        raise ConfigError(
            f"fusion head expects input dim {wi.shape[0]}, got {cat_i.shape[1]}"
        )
    return EmbeddingBatch.from_rows(cat_i @ wi), EmbeddingBatch.from_rows(cat_t @ wt)
