import struct
from dataclasses import replace

import numpy as np
import pytest

from clipkd.batch import EmbeddingBatch
from clipkd.data import (DUMP_HEADER, PairBatch, SyntheticSpec, class_prompts,
                         generate_dataset, read_dump, write_dump)
from clipkd.errors import ConfigError, FormatError, InputError

from conftest import unit_rows

SMALL_SPEC = SyntheticSpec(latent_dim=4, classes=5, patches=4, patch_dim=3,
                           tokens=3, token_dim=3, train_size=64, val_size=16,
                           test_size=16, seed=11)


class TestGeneration:
    def test_bit_identical_across_calls(self):
        a = generate_dataset(SMALL_SPEC)
        b = generate_dataset(SMALL_SPEC)
        for split in ("train", "val", "test"):
            assert np.array_equal(a[split].images, b[split].images)
            assert np.array_equal(a[split].texts, b[split].texts)
            assert np.array_equal(a[split].labels, b[split].labels)

    def test_noiseless_same_class_identical(self):
        spec = replace(SMALL_SPEC, noise_std_image=0.0, noise_std_text=0.0,
                       latent_jitter_std=0.0)
        train = generate_dataset(spec)["train"]
        labels = train.labels
        for cls in np.unique(labels):
            idx = np.flatnonzero(labels == cls)
            if len(idx) < 2:
                continue
            assert np.array_equal(train.images[idx[0]], train.images[idx[1]])
            assert np.array_equal(train.texts[idx[0]], train.texts[idx[1]])

    def test_single_class_labels_all_zero(self):
        spec = replace(SMALL_SPEC, classes=1)
        splits = generate_dataset(spec)
        for split in splits.values():
            assert np.all(split.labels == 0)

    def test_splits_differ(self):
        splits = generate_dataset(SMALL_SPEC)
        assert not np.array_equal(splits["train"].images[:16], splits["val"].images)
        assert not np.array_equal(splits["val"].images, splits["test"].images)

    def test_sizes_and_shapes(self):
        splits = generate_dataset(SMALL_SPEC)
        assert splits["train"].n == 64
        assert splits["val"].n == 16
        assert splits["train"].images.shape == (64, 12)
        assert splits["train"].texts.shape == (64, 9)

    def test_seed_changes_data(self):
        a = generate_dataset(SMALL_SPEC)["train"]
        b = generate_dataset(SMALL_SPEC.with_seed(12))["train"]
        assert not np.array_equal(a.images, b.images)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigError):
            generate_dataset(replace(SMALL_SPEC, noise_std_image=-0.1))
        with pytest.raises(ConfigError):
            generate_dataset(replace(SMALL_SPEC, classes=0))

    def test_pair_batch_take(self):
        train = generate_dataset(SMALL_SPEC)["train"]
        sub = train.take(np.array([3, 1, 2]))
        assert sub.n == 3
        assert np.array_equal(sub.images[0], train.images[3])

    def test_mismatched_rows_rejected(self):
        with pytest.raises(InputError):
            PairBatch(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros(3, dtype=int))


class TestClassPrompts:
    def test_one_prompt_per_class(self):
        prompts = class_prompts(SMALL_SPEC)
        assert prompts.n == SMALL_SPEC.classes
        assert np.array_equal(prompts.labels, np.arange(5))

    def test_repeated_calls_identical(self):
        a = class_prompts(SMALL_SPEC)
        b = class_prompts(SMALL_SPEC)
        assert np.array_equal(a.texts, b.texts)
        assert np.array_equal(a.images, b.images)

    def test_prompts_are_noiseless_renderings(self):
        # with zero jitter and zero noise, a sample of class c equals the
        # class prompt rendering exactly
        spec = replace(SMALL_SPEC, noise_std_image=0.0, noise_std_text=0.0,
                       latent_jitter_std=0.0)
        prompts = class_prompts(spec)
        train = generate_dataset(spec)["train"]
        for cls in np.unique(train.labels):
            idx = int(np.flatnonzero(train.labels == cls)[0])
            assert np.allclose(train.texts[idx], prompts.texts[cls], atol=1e-15)


class TestDumpFormat:
    def batch(self, rng, n=3, d=2):
        return EmbeddingBatch(unit_rows(rng, n, d))

    def test_round_trip_bytes_identical(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        write_dump(path, "image", self.batch(rng))
        first = path.read_bytes()
        role, loaded = read_dump(path)
        assert role == "image"
        write_dump(path, "image", loaded)
        assert path.read_bytes() == first

    def test_header_layout(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        write_dump(path, "text", self.batch(rng, n=3, d=2))
        raw = path.read_bytes()
        # header: magic(4) + version(1) + role(1) + n(4) + d(4) = 14 bytes,
        # payload 3*2*4 = 24 bytes
        assert DUMP_HEADER.size == 14
        assert len(raw) == 14 + 24
        magic, version, role, n, d = struct.unpack("<4sBBII", raw[:14])
        assert magic == b"CKDE"
        assert (version, role, n, d) == (1, 1, 3, 2)

    def test_truncated_payload(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        write_dump(path, "image", self.batch(rng))
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        with pytest.raises(FormatError) as err:
            read_dump(path)
        assert "expected 24" in str(err.value) and "got 20" in str(err.value)

    def test_bad_magic(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        write_dump(path, "image", self.batch(rng))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_dump(path)

    def test_bad_version(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        write_dump(path, "image", self.batch(rng))
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_dump(path)

    def test_unnormalized_rows_rejected_on_read(self, rng, tmp_path):
        path = tmp_path / "emb.ckde"
        rows = unit_rows(rng, 2, 3) * 2.0  # norm 2
        payload = rows.astype("<f4").tobytes()
        path.write_bytes(struct.pack("<4sBBII", b"CKDE", 1, 0, 2, 3) + payload)
        with pytest.raises(FormatError):
            read_dump(path)

    def test_unnormalized_batch_rejected_on_write(self, rng, tmp_path):
        batch = EmbeddingBatch(np.full((2, 2), 3.0), normalized=False)
        with pytest.raises(InputError):
            write_dump(tmp_path / "x.ckde", "image", batch)

    def test_unknown_role_rejected(self, rng, tmp_path):
        with pytest.raises(InputError):
            write_dump(tmp_path / "x.ckde", "audio", self.batch(rng))

    def test_short_file(self, tmp_path):
        path = tmp_path / "tiny.ckde"
        path.write_bytes(b"CK")
        with pytest.raises(FormatError):
            read_dump(path)
