import math

import numpy as np
import pytest

from clipkd.batch import EmbeddingBatch
from clipkd.data import SyntheticSpec, generate_dataset
from clipkd.encoders import ModelConfig, TowerConfig, init_model
from clipkd.errors import InputError
from clipkd.evalkit import (linear_cka, pos_neg_gap, recall_at_k,
                            similarity_report, zero_shot_accuracy)
from clipkd.numcore import RngStream, l2_normalize_rows

from conftest import unit_batch, unit_rows


def brute_force_recall(query, gallery, k):
    hits = 0
    n = query.shape[0]
    for i in range(n):
        scored = sorted(range(n), key=lambda j: (-float(query[i] @ gallery[j]), j))
        if i in scored[:k]:
            hits += 1
    return hits / n


def brute_force_zero_shot(images, prompts, labels):
    correct = 0
    for i in range(images.shape[0]):
        best = min(range(prompts.shape[0]),
                   key=lambda c: (-float(images[i] @ prompts[c]), c))
        correct += int(best == labels[i])
    return correct / images.shape[0]


def brute_force_gap(v, s):
    n = v.shape[0]
    pos = sum(float(v[i] @ s[i]) for i in range(n)) / n
    neg = sum(float(v[i] @ s[j]) for i in range(n) for j in range(n) if i != j)
    return pos - neg / (n * (n - 1))


class TestRecallAtK:
    def test_identity_similarity(self, rng):
        b = unit_batch(rng, 6, 8)
        report = recall_at_k(b, b)
        assert report.recall_at(1) == 1.0

    def test_adversarial_permutation(self):
        eye = np.eye(4)
        query = EmbeddingBatch(eye)
        gallery = EmbeddingBatch(eye[[1, 2, 3, 0]])  # partner never ranks first
        report = recall_at_k(query, gallery, ks=(1,))
        assert report.recall_at(1) == 0.0

    def test_matches_brute_force(self):
        for seed in range(20):
            r = RngStream(seed, 40)
            n = 2 + seed % 7
            q, g = unit_batch(r, n, 5), unit_batch(r, n, 5)
            report = recall_at_k(q, g, ks=(1, 5, 10))
            for k in (1, 5, 10):
                assert report.recall_at(k) == brute_force_recall(q.rows, g.rows, k)

    def test_monotone_in_k(self, rng):
        q, g = unit_batch(rng, 8, 4), unit_batch(rng, 8, 4)
        rep = recall_at_k(q, g)
        assert 0.0 <= rep.recall_at(1) <= rep.recall_at(5) <= rep.recall_at(10) <= 1.0

    def test_pair_permutation_invariance(self, rng):
        q, g = unit_batch(rng, 7, 4), unit_batch(rng, 7, 4)
        perm = RngStream(2, 2).permutation(7)
        a = recall_at_k(q, g).recalls
        b = recall_at_k(EmbeddingBatch(q.rows[perm]), EmbeddingBatch(g.rows[perm])).recalls
        assert a == b

    def test_tie_breaks_to_lower_index(self):
        rows = np.array([[1.0, 0.0], [1.0, 0.0]])
        report = recall_at_k(EmbeddingBatch(rows), EmbeddingBatch(rows), ks=(1,))
        # both gallery rows tie; query 0 hits (lower index first), query 1 misses
        assert report.recall_at(1) == 0.5


class TestZeroShot:
    def test_one_hot_prototypes(self):
        prompts = EmbeddingBatch(np.eye(3))
        images = EmbeddingBatch(np.eye(3)[[2, 0, 1, 1]])
        labels = [2, 0, 1, 1]
        assert zero_shot_accuracy(images, prompts, labels) == 1.0

    def test_single_class_always_correct(self, rng):
        images = unit_batch(rng, 5, 4)
        prompts = unit_batch(rng, 1, 4)
        assert zero_shot_accuracy(images, prompts, np.zeros(5, dtype=int)) == 1.0

    def test_matches_brute_force(self):
        for seed in range(20):
            r = RngStream(seed, 41)
            n, k = 2 + seed % 7, 2 + seed % 4
            images = unit_batch(r, n, 5)
            prompts = unit_batch(r, k, 5)
            labels = r.integers(0, k, size=n)
            assert zero_shot_accuracy(images, prompts, labels) == \
                brute_force_zero_shot(images.rows, prompts.rows, labels)

    def test_invariant_to_common_prompt_rescale(self, rng):
        images = unit_batch(rng, 6, 4)
        prompts = unit_batch(rng, 3, 4)
        labels = rng.integers(0, 3, size=6)
        base = zero_shot_accuracy(images, prompts, labels)
        scaled = EmbeddingBatch(prompts.rows * 7.5, normalized=False)
        assert zero_shot_accuracy(images, scaled, labels) == base

    def test_label_range_checked(self, rng):
        images = unit_batch(rng, 3, 4)
        prompts = unit_batch(rng, 2, 4)
        with pytest.raises(InputError):
            zero_shot_accuracy(images, prompts, [0, 1, 2])


class TestLinearCka:
    def test_self_similarity_is_one(self, rng):
        x = rng.normal(size=(12, 5))
        assert math.isclose(linear_cka(x, x), 1.0, abs_tol=1e-12)

    def test_rotation_invariance(self, rng):
        x = rng.normal(size=(12, 5))
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        assert math.isclose(linear_cka(x, x @ q), 1.0, abs_tol=1e-9)

    def test_isotropic_scale_invariance(self, rng):
        x = rng.normal(size=(10, 4))
        assert math.isclose(linear_cka(x, 3.0 * x), 1.0, abs_tol=1e-9)

    def test_symmetry(self, rng):
        x = rng.normal(size=(9, 4))
        y = rng.normal(size=(9, 6))
        assert abs(linear_cka(x, y) - linear_cka(y, x)) <= 1e-12

    def test_range(self, rng):
        for seed in range(10):
            r = RngStream(seed, 60)
            value = linear_cka(r.normal(size=(8, 3)), r.normal(size=(8, 5)))
            assert 0.0 <= value <= 1.0

    def test_zero_matrix_gives_zero(self, rng):
        x = rng.normal(size=(6, 3))
        assert linear_cka(x, np.zeros((6, 4))) == 0.0

    def test_needs_two_rows(self, rng):
        with pytest.raises(InputError):
            linear_cka(np.ones((1, 3)), np.ones((1, 3)))

    def test_row_count_mismatch(self, rng):
        with pytest.raises(InputError):
            linear_cka(np.ones((3, 2)), np.ones((4, 2)))


class TestPosNegGap:
    def test_orthonormal_aligned(self):
        eye = EmbeddingBatch(np.eye(4))
        assert math.isclose(pos_neg_gap(eye, eye), 1.0, abs_tol=1e-15)

    def test_identical_rows_gap_zero(self):
        rows = l2_normalize_rows(np.ones((5, 3)))
        b = EmbeddingBatch(rows)
        assert abs(pos_neg_gap(b, b)) <= 1e-12

    def test_matches_brute_force(self):
        for seed in range(20):
            r = RngStream(seed, 42)
            n = 2 + seed % 6
            v, s = unit_batch(r, n, 4), unit_batch(r, n, 4)
            assert math.isclose(pos_neg_gap(v, s), brute_force_gap(v.rows, s.rows),
                                rel_tol=1e-12, abs_tol=1e-12)

    def test_needs_two_pairs(self, rng):
        b = unit_batch(rng, 1, 4)
        with pytest.raises(InputError):
            pos_neg_gap(b, b)


class TestSimilarityReport:
    CFG = ModelConfig(embed_dim=6,
                      image=TowerConfig(tokens=4, token_dim=3, width=8, blocks=1),
                      text=TowerConfig(tokens=3, token_dim=3, width=8, blocks=1))
    SPEC = SyntheticSpec(latent_dim=4, classes=4, patches=4, patch_dim=3,
                         tokens=3, token_dim=3, train_size=32, val_size=16,
                         test_size=16, seed=0)

    def test_identical_models_perfect_similarity(self):
        model = init_model(self.CFG, RngStream(0, 1))
        val = generate_dataset(self.SPEC)["val"]
        report = similarity_report(model, model, val)
        assert math.isclose(report.cosine_image, 1.0, abs_tol=1e-12)
        assert math.isclose(report.cosine_text, 1.0, abs_tol=1e-12)
        assert math.isclose(report.cka_image, 1.0, abs_tol=1e-9)
        assert math.isclose(report.cka_text, 1.0, abs_tol=1e-9)

    def test_fields_finite_for_random_models(self):
        teacher = init_model(self.CFG, RngStream(0, 1))
        student = init_model(self.CFG, RngStream(1, 1))
        report = similarity_report(teacher, student, generate_dataset(self.SPEC)["val"])
        for _, value in report.as_rows():
            assert math.isfinite(value)
        assert -1.0 <= report.cosine_image <= 1.0
        assert 0.0 <= report.cka_image <= 1.0

    def test_zero_shot_separable_limit(self):
        # identical towers fed identical raw inputs embed prompts and
        # images identically, the separable "well-trained" limit
        spec = SyntheticSpec(latent_dim=4, classes=6, patches=3, patch_dim=3,
                             tokens=3, token_dim=3, train_size=16, val_size=16,
                             test_size=16, seed=2, noise_std_image=0.0,
                             noise_std_text=0.0, latent_jitter_std=0.0)
        cfg = ModelConfig(embed_dim=5,
                          image=TowerConfig(tokens=3, token_dim=3, width=8, blocks=1),
                          text=TowerConfig(tokens=3, token_dim=3, width=8, blocks=1))
        model = init_model(cfg, RngStream(3, 1))
        for name in list(model.params):
            if name.startswith("img."):
                model.params[name] = model.params["txt" + name[3:]].copy()
        from clipkd.data import class_prompts
        from clipkd.encoders import encode_image, encode_text
        test = generate_dataset(spec)["test"]
        prompts = class_prompts(spec)
        image_emb = encode_image(model, test.texts)   # same raw space by construction
        prompt_emb = encode_text(model, prompts.texts)
        assert zero_shot_accuracy(image_emb, prompt_emb, test.labels) == 1.0
