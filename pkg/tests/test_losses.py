import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipkd.batch import EmbeddingBatch
from clipkd.encoders import (ModelConfig, TowerConfig, encode_image, init_model,
                             sample_mask)
from clipkd.errors import ConfigError, InputError
from clipkd.grads import clip_grad_analytic, finite_diff_grad
from clipkd.losses import (KD_TERMS, PAPER_WEIGHTS, ContrastiveDistribution,
                           KdWeights, LossBreakdown, MiToyJoint, afd_loss,
                           clip_loss, clip_loss_raw, combined_loss,
                           contrastive_distribution, crd_loss, fd_loss,
                           gd_loss, icl_loss, mfd_loss, mi_bound_check)
from clipkd.numcore import RngStream

from conftest import unit_batch, unit_rows

# -log(e / (e + 1)), the symmetric loss of perfectly-aligned orthonormal
# pairs at tau=1 (scalar oracle: both softmax rows are [sigmoid(1), ...])
ALIGNED_EYE_LOSS = math.log(1.0 + math.exp(-1.0))


def eye_batch(n=2):
    return EmbeddingBatch(np.eye(n))


class TestClipLoss:
    def test_single_pair_is_zero(self, rng):
        b = unit_batch(rng, 1, 4)
        assert clip_loss(b, b, 0.07) == 0.0

    def test_identity_rows_tau_one(self):
        value = clip_loss(eye_batch(), eye_batch(), 1.0)
        assert math.isclose(value, ALIGNED_EYE_LOSS, rel_tol=1e-12)
        assert math.isclose(value, 0.31326169, rel_tol=1e-7)

    def test_permutation_invariance(self, rng):
        v, s = unit_batch(rng, 6, 5), unit_batch(rng, 6, 5)
        perm = RngStream(0, 2).permutation(6)
        a = clip_loss(v, s, 0.3)
        b = clip_loss(EmbeddingBatch(v.rows[perm]), EmbeddingBatch(s.rows[perm]), 0.3)
        assert math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(InputError):
            clip_loss(unit_batch(rng, 3, 4), unit_batch(rng, 4, 4), 1.0)

    def test_requires_positive_tau(self, rng):
        b = unit_batch(rng, 2, 4)
        with pytest.raises(InputError):
            clip_loss(b, b, 0.0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 6), st.floats(0.05, 5.0))
    def test_nonnegative_and_finite(self, n, tau):
        rng = RngStream(n, 17)
        value = clip_loss(unit_batch(rng, n, 4), unit_batch(rng, n, 4), tau)
        assert math.isfinite(value) and value >= 0.0


class TestContrastiveDistribution:
    def test_high_temperature_flattens(self, rng):
        anchor = eye_batch(2)
        dist = contrastive_distribution(anchor, anchor, 1e6, "i2t")
        assert np.allclose(dist.probs, 0.5, atol=1e-6)

    def test_identity_rows_sigmoid(self):
        dist = contrastive_distribution(eye_batch(), eye_batch(), 1.0, "i2t")
        sig = 1.0 / (1.0 + math.exp(-1.0))
        assert np.allclose(dist.probs, [[sig, 1 - sig], [1 - sig, sig]], atol=1e-9)
        assert np.allclose(dist.probs, [[0.7311, 0.2689], [0.2689, 0.7311]], atol=1e-4)

    def test_rows_sum_to_one(self, rng):
        dist = contrastive_distribution(unit_batch(rng, 5, 3), unit_batch(rng, 5, 3),
                                        0.07, "t2i")
        assert np.max(np.abs(dist.probs.sum(axis=1) - 1.0)) <= 1e-12

    def test_direction_validated(self, rng):
        with pytest.raises(InputError):
            ContrastiveDistribution(np.array([[1.0]]), "sideways", 1.0)


class TestCrdLoss:
    def dists(self, probs, direction="i2t"):
        return ContrastiveDistribution(np.asarray(probs, dtype=float), direction, 1.0)

    def test_equal_distributions_zero(self, rng):
        t = contrastive_distribution(unit_batch(rng, 4, 3), unit_batch(rng, 4, 3), 0.5, "i2t")
        q = contrastive_distribution(unit_batch(rng, 4, 3), unit_batch(rng, 4, 3), 0.5, "t2i")
        assert crd_loss(t, q, t, q) == 0.0

    def test_hand_kl(self):
        p_t = self.dists([[1.0, 0.0], [0.0, 1.0]])
        p_s = self.dists([[0.5, 0.5], [0.5, 0.5]])
        q = self.dists([[0.5, 0.5], [0.5, 0.5]], "t2i")
        # each mismatched row contributes log 2; mean over |B|=2 anchors
        assert math.isclose(crd_loss(p_t, q, p_s, q), math.log(2.0), rel_tol=1e-12)

    def test_gibbs_nonnegative(self, rng):
        for seed in range(5):
            r = RngStream(seed, 31)
            t_i = contrastive_distribution(unit_batch(r, 4, 3), unit_batch(r, 4, 3), 0.3, "i2t")
            t_t = contrastive_distribution(unit_batch(r, 4, 3), unit_batch(r, 4, 3), 0.3, "t2i")
            s_i = contrastive_distribution(unit_batch(r, 4, 3), unit_batch(r, 4, 3), 0.5, "i2t")
            s_t = contrastive_distribution(unit_batch(r, 4, 3), unit_batch(r, 4, 3), 0.5, "t2i")
            assert crd_loss(t_i, t_t, s_i, s_t) >= 0.0

    def test_shape_mismatch(self, rng):
        a = self.dists(np.full((2, 2), 0.5))
        b = ContrastiveDistribution(np.full((3, 3), 1 / 3), "t2i", 1.0)
        with pytest.raises(InputError):
            crd_loss(a, b, a, b)


class TestFdMfd:
    def test_equal_embeddings_zero(self, rng):
        b = unit_batch(rng, 4, 6)
        s = unit_batch(rng, 4, 6)
        assert fd_loss(b, b, s, s) == 0.0

    def test_swap_example(self):
        v_t = EmbeddingBatch(np.eye(2))
        v_s = EmbeddingBatch(np.eye(2)[::-1].copy())
        s = EmbeddingBatch(np.eye(2))
        # each image row differs by a unit-vector swap: ||a - b||^2 = 2
        assert fd_loss(v_t, v_s, s, s) == 2.0

    def test_upper_bound_for_normalized(self, rng):
        for seed in range(8):
            r = RngStream(seed, 7)
            value = fd_loss(unit_batch(r, 5, 4), unit_batch(r, 5, 4),
                            unit_batch(r, 5, 4), unit_batch(r, 5, 4))
            assert 0.0 <= value <= 8.0

    def test_mfd_is_fd_formula(self, rng):
        a, b, c, d = (unit_batch(rng, 3, 4) for _ in range(4))
        assert mfd_loss(a, b, c, d) == fd_loss(a, b, c, d)

    def test_mfd_ratio_zero_bitwise_equal(self, rng):
        cfg = ModelConfig(embed_dim=5,
                          image=TowerConfig(tokens=4, token_dim=3, width=8, blocks=1),
                          text=TowerConfig(tokens=2, token_dim=3, width=8, blocks=1))
        model = init_model(cfg, RngStream(0, 3))
        teacher = init_model(cfg, RngStream(1, 3))
        images = rng.normal(size=(4, 12))
        texts_emb = unit_batch(rng, 4, 5)
        t_img = encode_image(teacher, images)
        mask = sample_mask(rng, 4, 0.0)
        masked = encode_image(model, images, mask)
        unmasked = encode_image(model, images)
        assert mfd_loss(t_img, masked, texts_emb, texts_emb) == \
            fd_loss(t_img, unmasked, texts_emb, texts_emb)


class TestGdLoss:
    def test_identical_embeddings_and_tau_zero(self, rng):
        v, s = unit_batch(rng, 4, 6), unit_batch(rng, 4, 6)
        assert gd_loss(v, s, v, s, 0.07, 0.07) == 0.0

    def test_paper_default_weight(self):
        assert PAPER_WEIGHTS["gd"] == 1e8

    @pytest.mark.parametrize("mode", ["total", "anchor"])
    def test_matches_finite_difference_oracle(self, mode, rng):
        n, d = 4, 5
        tv, ts = unit_batch(rng, n, d), unit_batch(rng, n, d)
        sv, ss = unit_batch(rng, n, d), unit_batch(rng, n, d)
        tau_t, tau_s = 0.09, 0.13

        def field_by_fd(v, s, tau):
            if mode == "anchor":
                return clip_grad_analytic(v, s, tau, mode="anchor")
            theta = np.concatenate([v.rows.ravel(), s.rows.ravel()])

            def loss(th):
                return clip_loss_raw(th[:n * d].reshape(n, d),
                                     th[n * d:].reshape(n, d), tau)

            g = finite_diff_grad(loss, theta, 1e-5)
            class FdField:
                d_image = g[:n * d].reshape(n, d)
                d_text = g[n * d:].reshape(n, d)
            return FdField

        gt, gs = field_by_fd(tv, ts, tau_t), field_by_fd(sv, ss, tau_s)
        oracle = (np.sum((gt.d_image - gs.d_image) ** 2)
                  + np.sum((gt.d_text - gs.d_text) ** 2)) / n
        value = gd_loss(tv, ts, sv, ss, tau_t, tau_s, mode=mode)
        assert math.isclose(value, oracle, rel_tol=1e-6)


class TestIclLoss:
    def test_single_pair_zero(self, rng):
        b = unit_batch(rng, 1, 4)
        assert icl_loss(b, b, b, b, 0.07) == 0.0

    def test_identity_rows_reduce_to_clip(self):
        e = eye_batch()
        assert math.isclose(icl_loss(e, e, e, e, 1.0), ALIGNED_EYE_LOSS, rel_tol=1e-12)

    def test_student_equals_teacher_reduces_to_clip(self, rng):
        tv, ts = unit_batch(rng, 5, 4), unit_batch(rng, 5, 4)
        assert abs(icl_loss(tv, ts, tv, ts, 0.2) - clip_loss(tv, ts, 0.2)) <= 1e-12

    def test_paper_default_weight(self):
        assert PAPER_WEIGHTS["icl"] == 1.0


class TestAfdLoss:
    def fused_model(self, d, select=None):
        cfg = ModelConfig(embed_dim=d,
                          image=TowerConfig(tokens=2, token_dim=2, width=4, blocks=1),
                          text=TowerConfig(tokens=2, token_dim=2, width=4, blocks=1),
                          fuse_with=d)
        model = init_model(cfg, RngStream(0, 11))
        if select is not None:
            top = np.eye(d) if select == "student" else np.zeros((d, d))
            bottom = np.zeros((d, d)) if select == "student" else np.eye(d)
            for name in ("fuse_img.w", "fuse_txt.w"):
                model.params[name][:] = np.vstack([top, bottom])
        return model

    def test_student_selection_reduces_to_clip(self, rng):
        sv, ss = unit_batch(rng, 4, 3), unit_batch(rng, 4, 3)
        tv, ts = unit_batch(rng, 4, 3), unit_batch(rng, 4, 3)
        model = self.fused_model(3, "student")
        assert abs(afd_loss(model, sv, ss, tv, ts, 0.2) - clip_loss(sv, ss, 0.2)) <= 1e-12

    def test_teacher_selection_reduces_to_clip(self, rng):
        sv, ss = unit_batch(rng, 4, 3), unit_batch(rng, 4, 3)
        tv, ts = unit_batch(rng, 4, 3), unit_batch(rng, 4, 3)
        model = self.fused_model(3, "teacher")
        assert abs(afd_loss(model, sv, ss, tv, ts, 0.2) - clip_loss(tv, ts, 0.2)) <= 1e-12

    def test_single_pair_zero(self, rng):
        b = unit_batch(rng, 1, 3)
        assert afd_loss(self.fused_model(3), b, b, b, b, 0.1) == 0.0

    def test_missing_heads(self, rng):
        cfg = ModelConfig(embed_dim=3,
                          image=TowerConfig(tokens=2, token_dim=2, width=4, blocks=1),
                          text=TowerConfig(tokens=2, token_dim=2, width=4, blocks=1))
        model = init_model(cfg, RngStream(0, 1))
        b = unit_batch(rng, 2, 3)
        with pytest.raises(ConfigError):
            afd_loss(model, b, b, b, b, 0.1)


class TestKdWeightsAndCombined:
    def test_enabled_derived_from_positive(self):
        w = KdWeights(fd=2000.0, icl=1.0)
        assert w.enabled == {"fd", "icl"}

    def test_unified_defaults(self):
        w = KdWeights.unified()
        assert (w.crd, w.fd, w.icl) == (1.0, 2000.0, 1.0)
        assert w.enabled == {"crd", "fd", "icl"}

    def test_paper_weight_table(self):
        assert PAPER_WEIGHTS == {"crd": 1.0, "fd": 2000.0, "mfd": 2000.0,
                                 "gd": 1e8, "icl": 1.0, "afd": 1.0}

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            KdWeights(fd=-1.0)

    def test_unknown_enabled_rejected(self):
        with pytest.raises(ConfigError):
            KdWeights(enabled=frozenset({"nope"}))

    def test_all_zero_total_equals_task(self, rng):
        sv, ss = unit_batch(rng, 4, 5), unit_batch(rng, 4, 5)
        out = combined_loss(KdWeights(), student_image=sv, student_text=ss,
                            tau_student=0.07)
        assert out.total == out.task
        assert out.terms == {}

    def test_breakdown_bookkeeping(self, rng):
        sv, ss = unit_batch(rng, 4, 5), unit_batch(rng, 4, 5)
        tv, ts = unit_batch(rng, 4, 5), unit_batch(rng, 4, 5)
        w = KdWeights(crd=1.0, fd=2000.0, icl=1.0, gd=1e8)
        out = combined_loss(w, student_image=sv, student_text=ss, tau_student=0.08,
                            teacher_image=tv, teacher_text=ts, tau_teacher=0.05)
        recomputed = out.task + sum(w.weight(k) * v for k, v in out.terms.items())
        assert abs(out.total - recomputed) <= 1e-9 * max(1.0, abs(out.total))
        assert set(out.terms) == {"crd", "fd", "icl", "gd"}

    def test_missing_teacher_rejected(self, rng):
        sv, ss = unit_batch(rng, 4, 5), unit_batch(rng, 4, 5)
        with pytest.raises(ConfigError):
            combined_loss(KdWeights(fd=1.0), student_image=sv, student_text=ss,
                          tau_student=0.07)

    def test_mfd_without_mask_rejected(self, rng):
        sv, ss = unit_batch(rng, 4, 5), unit_batch(rng, 4, 5)
        with pytest.raises(ConfigError):
            combined_loss(KdWeights(mfd=1.0), student_image=sv, student_text=ss,
                          tau_student=0.07, teacher_image=sv, teacher_text=ss,
                          tau_teacher=0.07)

    def test_permutation_invariance_of_terms(self, rng):
        n = 5
        sv, ss = unit_batch(rng, n, 4), unit_batch(rng, n, 4)
        tv, ts = unit_batch(rng, n, 4), unit_batch(rng, n, 4)
        w = KdWeights(crd=1.0, fd=1.0, icl=1.0)
        base = combined_loss(w, student_image=sv, student_text=ss, tau_student=0.1,
                             teacher_image=tv, teacher_text=ts, tau_teacher=0.05)
        perm = RngStream(0, 9).permutation(n)
        permuted = combined_loss(
            w, student_image=EmbeddingBatch(sv.rows[perm]),
            student_text=EmbeddingBatch(ss.rows[perm]), tau_student=0.1,
            teacher_image=EmbeddingBatch(tv.rows[perm]),
            teacher_text=EmbeddingBatch(ts.rows[perm]), tau_teacher=0.05)
        assert math.isclose(base.total, permuted.total, rel_tol=1e-9, abs_tol=1e-9)
        for key in base.terms:
            assert math.isclose(base.terms[key], permuted.terms[key],
                                rel_tol=1e-9, abs_tol=1e-9)


class TestMiBound:
    def test_independent_joint_mi_zero(self):
        joint = MiToyJoint.independent(8, RngStream(0, 1))
        assert abs(joint.exact_mi()) <= 1e-12

    def test_correlated_joint_mi_log_k(self):
        joint = MiToyJoint.correlated(8, RngStream(0, 2))
        assert math.isclose(joint.exact_mi(), math.log(8.0), rel_tol=1e-12)

    def test_random_joint_mi_in_range(self):
        joint = MiToyJoint.random(8, RngStream(0, 3))
        assert 0.0 <= joint.exact_mi() <= math.log(8.0) + 1e-12

    def test_bound_holds_small_sample(self):
        rng = RngStream(5, 0)
        joint = MiToyJoint.correlated(8, rng, negatives=15)
        bound, exact = mi_bound_check(joint, rng, samples=20_000, tau=0.5)
        assert bound <= exact + 0.05

    def test_sample_floor_enforced(self):
        rng = RngStream(5, 0)
        joint = MiToyJoint.correlated(4, rng)
        with pytest.raises(InputError):
            mi_bound_check(joint, rng, samples=100, tau=1.0)

    def test_zero_probability_symbols_never_sampled(self):
        rng = RngStream(7, 0)
        table = np.zeros((4, 4))
        table[0, 0] = table[1, 1] = 0.5
        joint = MiToyJoint(table, unit_rows(rng, 4, 8), unit_rows(rng, 4, 8), negatives=7)
        bound, exact = mi_bound_check(joint, rng, samples=10_000, tau=1.0)
        assert math.isfinite(bound)
        assert math.isclose(exact, math.log(2.0), rel_tol=1e-12)
