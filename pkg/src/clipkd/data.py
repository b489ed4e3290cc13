"""Synthetic paired image/text data and the binary embedding-dump format.

Each sample draws a class, jitters that class's latent prototype, and
renders the latent through fixed per-patch and per-token linear maps
plus per-modality Gaussian noise. Paired image/text rows share the same
latent draw, so the mutual information between modalities is controlled
by the noise scales. Everything regenerates from (spec, seed); nothing
is serialized except embedding dumps.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .batch import EmbeddingBatch
from .errors import ConfigError, FormatError, InputError
from .numcore import RngStream

# Sub-stream ids under the dataset seed. Splits draw from disjoint
# streams, so they cannot collide for any seed.
STREAM_PROTOTYPES = 0x10
STREAM_RENDER_MAPS = 0x11
STREAM_SPLIT_BASE = 0x20  # + 0 train, + 1 val, + 2 test

SPLIT_NAMES = ("train", "val", "test")

DUMP_MAGIC = b"CKDE"
DUMP_VERSION = 1
DUMP_ROLES = {"image": 0, "text": 1}
DUMP_HEADER = struct.Struct("<4sBBII")  # magic, version, role, n, d
DUMP_NORM_TOL = 1e-6


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs for the paired dataset."""

    latent_dim: int = 16
    classes: int = 32
    patches: int = 16
    patch_dim: int = 8
    tokens: int = 8
    token_dim: int = 8
    noise_std_image: float = 0.3
    noise_std_text: float = 0.3
    latent_jitter_std: float = 1.0
    train_size: int = 8192
    val_size: int = 1024
    test_size: int = 1024
    seed: int = 0

    def validate(self):
        for name in ("latent_dim", "classes", "patches", "patch_dim",
                     "tokens", "token_dim", "train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("noise_std_image", "noise_std_text", "latent_jitter_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def image_dim(self) -> int:
        return self.patches * self.patch_dim

    @property
    def text_dim(self) -> int:
        return self.tokens * self.token_dim

    def sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "val": self.val_size, "test": self.test_size}

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class PairBatch:
    """Raw paired inputs: images (n, patches*patch_dim), texts
    (n, tokens*token_dim), labels (n,) in [0, classes)."""

    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (self.images.shape[0] == self.texts.shape[0] == self.labels.shape[0]):
            raise InputError("images, texts, and labels must share row count")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def take(self, idx: np.ndarray) -> "PairBatch":
        return PairBatch(self.images[idx], self.texts[idx], self.labels[idx])


def _shared_structure(spec: SyntheticSpec):
    """Class prototypes and the fixed per-modality rendering maps."""
    proto_rng = RngStream(spec.seed, STREAM_PROTOTYPES)
    prototypes = proto_rng.normal(size=(spec.classes, spec.latent_dim))
    map_rng = RngStream(spec.seed, STREAM_RENDER_MAPS)
    scale = spec.latent_dim ** -0.5
    image_map = map_rng.normal(size=(spec.latent_dim, spec.image_dim), scale=scale)
    text_map = map_rng.normal(size=(spec.latent_dim, spec.text_dim), scale=scale)
    return prototypes, image_map, text_map


def _render_split(spec: SyntheticSpec, size: int, rng: RngStream,
                  prototypes, image_map, text_map) -> PairBatch:
    labels = rng.integers(0, spec.classes, size=size)
    latents = prototypes[labels]
    if spec.latent_jitter_std > 0:
        latents = latents + rng.normal(size=(size, spec.latent_dim),
                                       scale=spec.latent_jitter_std)
    images = latents @ image_map
    if spec.noise_std_image > 0:
        images = images + rng.normal(size=images.shape, scale=spec.noise_std_image)
    texts = latents @ text_map
    if spec.noise_std_text > 0:
        texts = texts + rng.normal(size=texts.shape, scale=spec.noise_std_text)
    return PairBatch(images, texts, labels)


def generate_dataset(spec: SyntheticSpec) -> dict[str, PairBatch]:
    """Materialize the train/val/test splits, bit-identical per spec."""
    spec.validate()
    prototypes, image_map, text_map = _shared_structure(spec)
    splits = {}
    for offset, name in enumerate(SPLIT_NAMES):
        rng = RngStream(spec.seed, STREAM_SPLIT_BASE + offset)
        splits[name] = _render_split(spec, spec.sizes()[name], rng,
                                     prototypes, image_map, text_map)
    return splits


def class_prompts(spec: SyntheticSpec) -> PairBatch:
    """One noiseless text rendering per class prototype.

    These act as classification prototypes for zero-shot evaluation; the
    image side is the matching noiseless rendering, included so prompts
    round-trip through the same PairBatch shape.
    """
    spec.validate()
    prototypes, image_map, text_map = _shared_structure(spec)
    labels = np.arange(spec.classes)
    return PairBatch(prototypes @ image_map, prototypes @ text_map, labels)


# ---------------------------------------------------------------------------
# Embedding dump format: 14-byte header, float32 little-endian payload
# ---------------------------------------------------------------------------

def write_dump(path, role: str, batch: EmbeddingBatch):
    """Serialize a normalized embedding batch.

    Layout: magic "CKDE", version byte, role byte (0=image, 1=text),
    u32 n, u32 d (little-endian), then n*d float32 little-endian values
    in row-major order.
    """
    if role not in DUMP_ROLES:
        raise InputError(f"role must be one of {sorted(DUMP_ROLES)}, got {role!r}")
    if not batch.normalized:
        raise InputError("refusing to dump an unnormalized embedding batch")
    payload = batch.rows.astype("<f4").tobytes()
    header = DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, DUMP_ROLES[role],
                              batch.n, batch.d)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_dump(path) -> tuple[str, EmbeddingBatch]:
    """Read and validate a dump; returns (role, batch).

    Values are promoted to float64 exactly as stored, so a write/read/
    write round trip is byte-identical. Row norms are validated to the
    float32-appropriate tolerance.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < DUMP_HEADER.size:
        raise FormatError(
            f"file too short for header: {len(raw)} < {DUMP_HEADER.size} bytes", offset=0)
    magic, version, role_byte, n, d = DUMP_HEADER.unpack_from(raw, 0)
    if magic != DUMP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DUMP_MAGIC!r}", offset=0)
    if version != DUMP_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    roles = {v: k for k, v in DUMP_ROLES.items()}
    if role_byte not in roles:
        raise FormatError(f"unknown role byte {role_byte}", offset=5)
    expected = n * d * 4
    actual = len(raw) - DUMP_HEADER.size
    if actual != expected:
        raise FormatError(
            f"payload length mismatch: expected {expected} bytes for n={n} d={d}, got {actual}",
            offset=DUMP_HEADER.size)
    rows = np.frombuffer(raw, dtype="<f4", offset=DUMP_HEADER.size).reshape(n, d)
    rows = rows.astype(np.float64)
    norms = np.sqrt(np.sum(rows * rows, axis=1))
    worst = float(np.max(np.abs(norms - 1.0))) if n else 0.0
    if worst > DUMP_NORM_TOL:
        raise FormatError(
            f"rows not l2-normalized within {DUMP_NORM_TOL:g} (worst deviation {worst:.3e})",
            offset=DUMP_HEADER.size)
    return roles[role_byte], EmbeddingBatch(rows, normalized=True, norm_tol=DUMP_NORM_TOL * 2)
