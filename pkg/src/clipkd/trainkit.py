"""Optimization, training loops, and checkpoint persistence.

AdamW with decoupled weight decay drives a cosine schedule with linear
warmup. One optimizer covers every student-side parameter including the
log-inverse-temperature (clamped after each step), the projection head,
and the fusion heads.

Determinism contract: (seed, config) fixes every logged metric
bit-for-bit. Per-step randomness (batch indices, patch masks) comes from
counter-based streams keyed by (seed, step), so a resumed run continues
exactly where the interrupted one left off.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import PairBatch, SyntheticSpec, generate_dataset
from .encoders import (ClipModel, ModelConfig, TowerConfig, Workspace,
                       clamp_temperature, encode_image, encode_text, init_model,
                       parameter_shapes, sample_mask)
from .errors import ConfigError, FormatError, InputError, TrainingDiverged
from .evalkit import pos_neg_gap
from .grads import backprop_model
from .losses import KD_TERMS, KdWeights, LossBreakdown
from .numcore import RngStream

STREAM_MODEL_INIT = 0x01
STREAM_BATCH_BASE = 1 << 32
STREAM_MASK_BASE = 2 << 32

METRICS_COLUMNS = ("step", "lr", "loss_task", "loss_crd", "loss_fd", "loss_mfd",
                   "loss_gd", "loss_icl", "loss_afd", "loss_total", "tau",
                   "posneg_gap")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Linear warmup to base_lr, then cosine decay to min_lr (default 0)."""

    warmup_steps: int
    total_steps: int
    base_lr: float
    min_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("schedule steps must be nonnegative")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        if self.base_lr < 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be nonnegative")


def cosine_warmup_lr(step: int, schedule: Schedule) -> float:
    """lr at ``step``; exact at the boundaries (0, warmup end, total end)."""
    if step < 0 or step > schedule.total_steps:
        raise InputError(
            f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    if schedule.total_steps == schedule.warmup_steps:
        return schedule.base_lr
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (
        1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """First/second moment accumulators plus the step counter."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.1

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "OptimState":
        zeros = lambda: {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=zeros(), v=zeros(), **hyper)


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float):
    """One decoupled-weight-decay Adam update, in place.

    Weight decay shrinks parameters before the moment update; moments are
    bias-corrected. The temperature clamp runs after the update so the
    logit scale stays in (0, 100].
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in params:
        g = grads[name]
        if state.weight_decay:
            params[name] -= lr * state.weight_decay * params[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    clamp_temperature(params)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


def _write_bytes(out: bytearray, blob: bytes, len_struct):
    out += len_struct.pack(len(blob))
    out += blob


def _write_tensor(out: bytearray, name: str, array: np.ndarray):
    _write_bytes(out, name.encode("utf-8"), _U16)
    arr = np.asarray(array, dtype=np.float64)
    out += _U8.pack(arr.ndim)
    for dim in arr.shape:
        out += _U32.pack(dim)
    out += arr.astype("<f8").tobytes()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        blob = self.raw[self.pos:self.pos + count]
        self.pos += count
        return blob

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))[0]

    def read_tensor(self, what: str) -> tuple[str, np.ndarray]:
        name_len = self.unpack(_U16, f"{what} name length")
        name = self.take(name_len, f"{what} name").decode("utf-8")
        rank = self.unpack(_U8, f"{name} rank")
        shape = tuple(self.unpack(_U32, f"{name} dim") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = self.take(count * 8, f"{name} payload")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
        return name, arr


def _config_to_json(cfg: ModelConfig) -> bytes:
    return json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")


def _config_from_json(blob: bytes) -> ModelConfig:
    raw = json.loads(blob.decode("utf-8"))
    raw["image"] = TowerConfig(**raw["image"])
    raw["text"] = TowerConfig(**raw["text"])
    return ModelConfig(**raw)


def save_checkpoint(path, model: ClipModel, optim: Optional[OptimState] = None,
                    digest: str = ""):
    """Serialize model (and optionally optimizer) state, float64 exact.

    Tensors are stored at full float64 precision so save/load round trips
    restore training bit-exactly (a resumed run reproduces the
    uninterrupted run's metrics).
    """
    out = bytearray()
    out += CKPT_MAGIC
    out += _U8.pack(CKPT_VERSION)
    _write_bytes(out, digest.encode("utf-8"), _U16)
    _write_bytes(out, _config_to_json(model.cfg), _U32)
    names = list(parameter_shapes(model.cfg))
    out += _U32.pack(len(names))
    for name in names:
        _write_tensor(out, name, model.params[name])
    if optim is None:
        out += _U8.pack(0)
    else:
        out += _U8.pack(1)
        out += _U64.pack(optim.step)
        for value in (optim.beta1, optim.beta2, optim.eps, optim.weight_decay):
            out += _F64.pack(value)
        for name in names:
            _write_tensor(out, name, optim.m[name])
        for name in names:
            _write_tensor(out, name, optim.v[name])
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, cfg: Optional[ModelConfig] = None
                    ) -> tuple[ClipModel, Optional[OptimState], str]:
    """Read a checkpoint; returns (model, optim state or None, digest).

    Validates magic/version and every tensor's shape against the model
    config manifest (the embedded config, or ``cfg`` when the caller
    wants to enforce an expected architecture).
    """
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", offset=0)
    version = reader.unpack(_U8, "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    digest = reader.take(reader.unpack(_U16, "digest length"), "digest").decode("utf-8")
    stored_cfg = _config_from_json(reader.take(reader.unpack(_U32, "config length"), "config"))
    use_cfg = cfg if cfg is not None else stored_cfg
    manifest = parameter_shapes(use_cfg)

    count = reader.unpack(_U32, "tensor count")
    if count != len(manifest):
        raise FormatError(
            f"checkpoint holds {count} tensors, model config expects {len(manifest)}")
    params = {}
    for _ in range(count):
        name, arr = reader.read_tensor("model tensor")
        if name not in manifest:
            raise FormatError(f"unexpected tensor {name!r} for this model config")
        if arr.shape != manifest[name]:
            raise FormatError(
                f"tensor {name!r} has shape {arr.shape}, model config expects {manifest[name]}")
        params[name] = arr
    missing = set(manifest) - set(params)
    if missing:
        raise FormatError(f"checkpoint missing tensors: {sorted(missing)}")

    optim = None
    if reader.unpack(_U8, "optimizer flag"):
        step = reader.unpack(_U64, "optimizer step")
        beta1 = reader.unpack(_F64, "beta1")
        beta2 = reader.unpack(_F64, "beta2")
        eps = reader.unpack(_F64, "eps")
        weight_decay = reader.unpack(_F64, "weight_decay")
        moments = []
        for label in ("first", "second"):
            tensors = {}
            for _ in range(count):
                name, arr = reader.read_tensor(f"{label} moment")
                if name not in manifest or arr.shape != manifest[name]:
                    raise FormatError(f"optimizer tensor {name!r} mismatches the model config")
                tensors[name] = arr
            moments.append(tensors)
        optim = OptimState(m=moments[0], v=moments[1], step=step, beta1=beta1,
                           beta2=beta2, eps=eps, weight_decay=weight_decay)
    if reader.pos != len(reader.raw):
        raise FormatError("trailing bytes after checkpoint payload", offset=reader.pos)
    ordered = {name: params[name] for name in manifest}
    return ClipModel(use_cfg, ordered), optim, digest


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

def format_metrics_row(step: int, lr: float, breakdown: LossBreakdown, tau: float,
                       gap: float) -> str:
    cells = [str(step), repr(float(lr)), repr(float(breakdown.task))]
    for name in KD_TERMS:
        value = breakdown.terms.get(name)
        cells.append("" if value is None else repr(float(value)))
    cells += [repr(float(breakdown.total)), repr(float(tau)), repr(float(gap))]
    return ",".join(cells)


def write_metrics(path, rows: list[str], digest: str, seed: int):
    header = f"# config_digest={digest} seed={seed}\n" + ",".join(METRICS_COLUMNS)
    Path(path).write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSettings:
    """Desk-scale defaults of the training recipe."""

    steps: int = 2000
    batch_size: int = 128
    warmup_steps: int = 100
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    eval_interval: int = 100
    mask_ratio: float = 0.25
    gd_mode: str = "total"

    def validate(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigError("steps must be >= 0, batch_size and eval_interval >= 1")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError("mask_ratio must be in [0, 1)")
        if self.gd_mode not in ("total", "anchor"):
            raise ConfigError("gd_mode must be 'total' or 'anchor'")
        if self.steps > 0:
            Schedule(self.warmup_steps, self.steps, self.base_lr)


@dataclass
class TrainResult:
    model: ClipModel
    optim: OptimState
    metrics_rows: list
    final_breakdown: Optional[LossBreakdown]
    checkpoint_path: Optional[Path] = None
    metrics_path: Optional[Path] = None

    @property
    def final_gap(self) -> float:
        return float(self.metrics_rows[-1].split(",")[-1]) if self.metrics_rows else float("nan")


def batch_indices(seed: int, step: int, population: int, batch_size: int) -> np.ndarray:
    """Stateless per-step batch sampling (without replacement)."""
    rng = RngStream(seed, STREAM_BATCH_BASE + step)
    return rng.choice(population, size=min(batch_size, population), replace=False)


def step_masks(seed: int, step: int, count: int, patches: int, ratio: float):
    rng = RngStream(seed, STREAM_MASK_BASE + step)
    return [sample_mask(rng, patches, ratio) for _ in range(count)]


def encode_split(model: ClipModel, pairs: PairBatch, chunk: int = 1024):
    """Encode a whole split in chunks; returns (image_rows, text_rows)."""
    image_rows = []
    text_rows = []
    for start in range(0, pairs.n, chunk):
        part = pairs.take(np.arange(start, min(start + chunk, pairs.n)))
        image_rows.append(encode_image(model, part.images).rows)
        text_rows.append(encode_text(model, part.texts).rows)
    return np.concatenate(image_rows), np.concatenate(text_rows)


def _params_finite(params: dict) -> bool:
    return all(np.all(np.isfinite(p)) for p in params.values())


def _train_loop(model: ClipModel, optim: OptimState, train: PairBatch,
                weights: KdWeights, settings: TrainSettings, seed: int,
                teacher_cache: Optional[tuple], start_step: int = 0,
                stop_after: Optional[int] = None) -> tuple[list, Optional[LossBreakdown]]:
    schedule = Schedule(settings.warmup_steps, settings.steps, settings.base_lr) \
        if settings.steps > 0 else None
    end_step = settings.steps if stop_after is None else min(stop_after, settings.steps)
    rows: list[str] = []
    last_finite = start_step - 1
    breakdown = None
    workspace = Workspace()
    for step in range(start_step, end_step):
        lr = cosine_warmup_lr(step, schedule)
        idx = batch_indices(seed, step, train.n, settings.batch_size)
        batch = train.take(idx)
        masks = None
        if "mfd" in weights.enabled:
            masks = step_masks(seed, step, batch.n, model.cfg.image.tokens,
                               settings.mask_ratio)
        teacher_embeddings = None
        if teacher_cache is not None:
            cached_image, cached_text, tau_t = teacher_cache
            teacher_embeddings = (cached_image[idx], cached_text[idx], tau_t)
        try:
            breakdown, grads = backprop_model(model, batch, weights, masks=masks,
                                              teacher_embeddings=teacher_embeddings,
                                              gd_mode=settings.gd_mode,
                                              workspace=workspace)
        except InputError as err:
            # overflowing parameters produce non-finite intermediates that
            # trip the forward-pass validation; translate to a divergence
            # abort carrying the last finite step
            raise TrainingDiverged(step, last_finite) from err
        if not math.isfinite(breakdown.total):
            raise TrainingDiverged(step, last_finite)
        last_finite = step
        if step % settings.eval_interval == 0 or step == settings.steps - 1:
            student_image = encode_image(model, batch.images)
            student_text = encode_text(model, batch.texts)
            gap = pos_neg_gap(student_image, student_text)
            rows.append(format_metrics_row(step, lr, breakdown, model.tau, gap))
        adamw_step(model.params, grads, optim, lr)
        if not _params_finite(model.params):
            raise TrainingDiverged(step + 1, last_finite)
    return rows, breakdown


def _make_optim(params: dict, settings: TrainSettings) -> OptimState:
    return OptimState.for_params(params, beta1=settings.beta1, beta2=settings.beta2,
                                 eps=settings.adam_eps,
                                 weight_decay=settings.weight_decay)


def _finish(model, optim, rows, breakdown, out_dir, ckpt_name, digest, seed) -> TrainResult:
    result = TrainResult(model=model, optim=optim, metrics_rows=rows,
                         final_breakdown=breakdown)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out_dir / "metrics.csv"
        write_metrics(result.metrics_path, rows, digest, seed)
        result.checkpoint_path = out_dir / ckpt_name
        save_checkpoint(result.checkpoint_path, model, optim, digest)
    return result


def train_teacher(data_spec: SyntheticSpec, model_cfg: ModelConfig,
                  settings: TrainSettings, seed: int,
                  out_dir=None, digest: str = "") -> TrainResult:
    """Train a model on the task loss alone (producing the frozen teacher)."""
    settings.validate()
    train = generate_dataset(data_spec)["train"]
    model = init_model(model_cfg, RngStream(seed, STREAM_MODEL_INIT))
    optim = _make_optim(model.params, settings)
    rows, breakdown = _train_loop(model, optim, train, KdWeights(), settings, seed, None)
    return _finish(model, optim, rows, breakdown, out_dir, "teacher.ckpt", digest, seed)


def distill(teacher: Optional[ClipModel], data_spec: SyntheticSpec,
            student_cfg: ModelConfig, weights: KdWeights,
            settings: TrainSettings, seed: int, out_dir=None, digest: str = "",
            resume_from=None, stop_after: Optional[int] = None) -> TrainResult:
    """Train a student on the combined loss under a frozen teacher.

    The teacher's per-sample train-split embeddings are computed once and
    reused every step (they depend only on the sample, not the batch).
    With all weights zero this runs the plain no-KD baseline and its
    trajectory is bit-identical to a task-only run of the same seed.

    ``stop_after`` interrupts the run after that many optimizer steps
    (the schedule keeps its full horizon); resuming from the interrupted
    checkpoint reproduces the uninterrupted run exactly.
    """
    settings.validate()
    if weights.any_enabled and teacher is None:
        raise ConfigError("distillation weights enabled but no teacher given")
    train = generate_dataset(data_spec)["train"]

    teacher_cache = None
    if weights.any_enabled:
        teacher_image, teacher_text = encode_split(teacher, train)
        teacher_cache = (teacher_image, teacher_text, teacher.tau)

    if resume_from is not None:
        model, optim, _ = load_checkpoint(resume_from, student_cfg)
        if optim is None:
            raise ConfigError("resume checkpoint lacks optimizer state")
        start_step = optim.step
    else:
        model = init_model(student_cfg, RngStream(seed, STREAM_MODEL_INIT))
        optim = _make_optim(model.params, settings)
        start_step = 0

    rows, breakdown = _train_loop(model, optim, train, weights, settings, seed,
                                  teacher_cache, start_step=start_step,
                                  stop_after=stop_after)
    return _finish(model, optim, rows, breakdown, out_dir, "student.ckpt", digest, seed)


def train_student_baseline(data_spec: SyntheticSpec, student_cfg: ModelConfig,
                           settings: TrainSettings, seed: int, out_dir=None,
                           digest: str = "") -> TrainResult:
    """The no-KD reference run (identical trajectory to all-zero distill)."""
    return distill(None, data_spec, student_cfg, KdWeights(), settings, seed,
                   out_dir=out_dir, digest=digest)
