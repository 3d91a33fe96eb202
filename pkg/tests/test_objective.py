"""Tests for SOP probabilities, the SOP losses and the parametric baselines"""
import math

import numpy as np
import pytest

from app.exceptions import DimMismatch, EmptyViews, MaskLengthMismatch, NonPositiveTemperature
from app.memory import ContributionMode, init_bank
from app.model import MaskSpec
from app.numerics import Tensor, l2_normalize, precision, rowwise_l2_normalize, softmax_temp
from app.objective import (
    LossWeights,
    PrototypeBaseline,
    cls_loss,
    mean_entropy,
    parametric_cls_loss,
    parametric_mim_loss,
    sop_mim_loss,
    sop_probs,
    teacher_temperature,
    total_loss,
)


def _random_probs(rng, shape):
    p = rng.uniform(0.05, 1.0, size=shape)
    return p / p.sum(axis=-1, keepdims=True)


def _sop(N=32, d=8, K=4, k=2, seed=0, mode=None):
    bank = init_bank(N, d, seed=seed)
    anchors = bank.sample_anchors(K, np.random.default_rng(seed))
    return bank, bank.build_sop(anchors, k, mode or ContributionMode.smoothed(0.1))


class TestSopProbs:

    def test_single_anchor_gives_certainty(self, rng):
        _, sop = _sop(K=1, k=3)
        U = rowwise_l2_normalize(rng.standard_normal((5, 8)))
        np.testing.assert_allclose(sop_probs(U, sop, 0.1), np.ones((5, 1)), atol=1e-6)

    def test_identity_contribution_is_plain_softmax(self, rng):
        _, sop = _sop(K=6, k=0, mode=ContributionMode.one_hot())
        U = rowwise_l2_normalize(rng.standard_normal((3, 8)))
        np.testing.assert_allclose(sop_probs(U, sop, 0.2), softmax_temp(U @ sop.D.T, 0.2), atol=1e-6)

    def test_matches_scalar_oracle(self, rng):
        _, sop = _sop(K=3, k=2, mode=ContributionMode.similarity_soft(0.1))
        U = rowwise_l2_normalize(rng.standard_normal((4, 8)))
        tau = 0.1
        expected = np.zeros((4, 3))
        for b in range(4):
            logits = [float(np.dot(U[b], member)) / tau for member in sop.D]
            top = max(logits)
            weights = [math.exp(l - top) for l in logits]
            total = sum(weights)
            for j in range(len(weights)):
                for i in range(3):
                    expected[b, i] += weights[j] / total * sop.Y[j, i]
        np.testing.assert_allclose(sop_probs(U, sop, tau), expected, atol=1e-5)

    def test_rows_sum_to_one(self, rng):
        modes = (ContributionMode.one_hot(), ContributionMode.smoothed(0.2), ContributionMode.similarity_soft(0.1))
        for trial in range(1000):
            K = int(rng.integers(1, 9))
            k = int(rng.integers(0, 5))
            _, sop = _sop(N=64, d=16, K=K, k=k, seed=trial, mode=modes[trial % 3])
            U = rowwise_l2_normalize(rng.standard_normal((50, 16)))
            P = sop_probs(U, sop, float(rng.uniform(0.01, 1.0)))
            assert P.shape == (50, K)
            np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-5)
            assert np.all(P >= 0)

    def test_works_on_patch_grids(self, rng):
        _, sop = _sop(K=3, k=1)
        Z = rng.standard_normal((2, 5, 8))
        Z /= np.linalg.norm(Z, axis=-1, keepdims=True)
        P = sop_probs(Z, sop, 0.1)
        assert P.shape == (2, 5, 3)
        np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-5)

    def test_full_bank_one_hot_reduces_to_bank_softmax(self, rng):
        bank = init_bank(12, 8, seed=3)
        anchors = np.arange(12)
        sop = bank.build_sop(anchors, 0, ContributionMode.one_hot())
        U = rowwise_l2_normalize(rng.standard_normal((4, 8)))
        np.testing.assert_allclose(sop_probs(U, sop, 0.1), softmax_temp(U @ bank.storage.T, 0.1), atol=1e-6)

    def test_anchor_permutation_permutes_columns(self, rng):
        bank = init_bank(40, 8, seed=5)
        anchors = np.array([3, 17, 25, 31])
        perm = np.array([2, 0, 3, 1])
        mode = ContributionMode.smoothed(0.1)
        U = rowwise_l2_normalize(rng.standard_normal((6, 8)))
        P = sop_probs(U, bank.build_sop(anchors, 2, mode), 0.1)
        P_perm = sop_probs(U, bank.build_sop(anchors[perm], 2, mode), 0.1)
        np.testing.assert_allclose(P_perm, P[:, perm], atol=1e-6)

    def test_rejects_bad_temperature(self, rng):
        _, sop = _sop()
        with pytest.raises(NonPositiveTemperature):
            sop_probs(np.ones((1, 8)) / math.sqrt(8), sop, 0.0)

    def test_rejects_width_mismatch(self):
        _, sop = _sop()
        with pytest.raises(DimMismatch):
            sop_probs(np.ones((1, 4)) / 2.0, sop, 0.1)


class TestClsLoss:

    def test_uniform_distributions_give_log_k(self):
        K = 5
        uniform = np.full((3, K), 1.0 / K)
        loss = cls_loss([uniform] * 4, [uniform] * 2)
        assert loss == pytest.approx(math.log(K), abs=1e-5)

    def test_matches_pair_enumeration(self, rng):
        students = [_random_probs(rng, (3, 4)) for _ in range(4)]
        teachers = [_random_probs(rng, (3, 4)) for _ in range(2)]
        terms = []
        for g, t in enumerate(teachers):
            for v, s in enumerate(students):
                if v != g:
                    terms.append(np.mean(-np.sum(t * np.log(s), axis=1)))
        assert cls_loss(students, teachers) == pytest.approx(float(np.mean(terms)), abs=1e-5)

    def test_empty_views(self):
        p = np.full((2, 3), 1.0 / 3)
        with pytest.raises(EmptyViews):
            cls_loss([], [p])
        with pytest.raises(EmptyViews):
            cls_loss([p], [p])

    def test_gradient_step_descends(self, rng):
        with precision(np.float64):
            _, sop = _sop(K=4, k=2)
            raw = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
            teachers = [sop_probs(rowwise_l2_normalize(rng.standard_normal((6, 8))), sop, 0.07) for _ in range(2)]

            def loss_of(x):
                U = l2_normalize(x)
                return cls_loss([sop_probs(U, sop, 0.1) for _ in range(3)], teachers)

            before = loss_of(raw)
            before.backward()
            stepped = Tensor(raw.data - 1e-2 * raw.grad)
            assert float(loss_of(stepped).data) < float(before.data)

    def test_teacher_receives_no_gradient(self, rng):
        teacher = Tensor(_random_probs(rng, (2, 3)), requires_grad=True)
        student = Tensor(_random_probs(rng, (2, 3)), requires_grad=True)
        cls_loss([student, student], [teacher]).backward()
        assert teacher.grad is None
        assert student.grad is not None


class TestSopMimLoss:

    def test_no_masked_tokens_gives_zero(self, rng):
        p = _random_probs(rng, (2, 4, 3))
        assert sop_mim_loss([p], [p], [np.zeros((2, 4), dtype=bool)]) == 0.0

    def test_half_masked_equals_masked_entropy(self, rng):
        p = _random_probs(rng, (2, 4, 3))
        mask = np.array([[1, 0, 1, 0], [0, 1, 0, 1]], dtype=bool)
        entropy = -np.sum(p * np.log(p), axis=-1)
        assert sop_mim_loss([p], [p], [mask]) == pytest.approx(float(entropy[mask].mean()), abs=1e-5)

    def test_views_are_summed(self, rng):
        p = _random_probs(rng, (1, 4, 3))
        mask = np.ones((1, 4), dtype=bool)
        single = sop_mim_loss([p], [p], [mask])
        assert sop_mim_loss([p, p], [p, p], [mask, mask]) == pytest.approx(2 * single, abs=1e-5)

    def test_accepts_mask_specs(self, rng):
        p = _random_probs(rng, (2, 4, 3))
        specs = [MaskSpec(np.array([1, 1, 0, 0], dtype=bool), 0.5), MaskSpec(np.array([0, 0, 1, 1], dtype=bool), 0.5)]
        as_array = np.stack([s.mask for s in specs])
        assert sop_mim_loss([p], [p], [specs]) == pytest.approx(sop_mim_loss([p], [p], [as_array]), abs=1e-7)

    def test_mask_length_mismatch(self, rng):
        p = _random_probs(rng, (2, 4, 3))
        with pytest.raises(MaskLengthMismatch):
            sop_mim_loss([p], [p], [np.ones((2, 5), dtype=bool)])

    def test_view_count_mismatch(self, rng):
        p = _random_probs(rng, (2, 4, 3))
        with pytest.raises(EmptyViews):
            sop_mim_loss([p, p], [p], [np.ones((2, 4), dtype=bool)])


class TestParametricBaseline:

    def test_single_prototype_gives_zero_loss(self, rng):
        baseline = PrototypeBaseline.create(1, 8, seed=0, centering=False)
        views = [rowwise_l2_normalize(rng.standard_normal((3, 8))) for _ in range(3)]
        loss = parametric_cls_loss(views, views[:2], baseline, 0.1, 0.07)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-6)

    def test_matches_manual_computation(self, rng):
        baseline = PrototypeBaseline.create(5, 8, seed=1, centering=False)
        students = [rowwise_l2_normalize(rng.standard_normal((4, 8))) for _ in range(3)]
        teachers = students[:2]
        theta = baseline.theta.data
        s_probs = [softmax_temp(u @ theta.T, 0.1) for u in students]
        t_probs = [softmax_temp(u @ baseline.teacher_theta.T, 0.04) for u in teachers]
        expected = cls_loss(s_probs, t_probs)
        assert float(parametric_cls_loss(students, teachers, baseline, 0.1, 0.04).data) == pytest.approx(expected, abs=1e-5)

    def test_mim_variant_runs_on_grids(self, rng):
        baseline = PrototypeBaseline.create(4, 8, seed=2)
        Z = rng.standard_normal((2, 3, 8))
        Z /= np.linalg.norm(Z, axis=-1, keepdims=True)
        mask = np.array([[1, 0, 1], [0, 1, 1]], dtype=bool)
        loss = parametric_mim_loss([Z], [Z], baseline, [mask], 0.1, 0.04)
        assert np.isfinite(float(loss.data))
        loss.backward()
        assert baseline.theta.grad.shape == (4, 8)

    def test_centering_tracks_running_mean(self, rng):
        baseline = PrototypeBaseline.create(3, 4, seed=0, center_momentum=0.5)
        views = [rowwise_l2_normalize(rng.standard_normal((6, 4)))]
        batch_mean = (views[0] @ baseline.teacher_theta.T).mean(axis=0)
        baseline.update_center(views)
        np.testing.assert_allclose(baseline.center, 0.5 * batch_mean, atol=1e-6)

    def test_centering_disabled_leaves_center(self, rng):
        baseline = PrototypeBaseline.create(3, 4, seed=0, centering=False)
        baseline.update_center([rowwise_l2_normalize(rng.standard_normal((6, 4)))])
        np.testing.assert_array_equal(baseline.center, np.zeros(3))

    def test_normalize_projects_to_sphere(self):
        baseline = PrototypeBaseline.create(3, 4, seed=0)
        baseline.theta.data = baseline.theta.data * 3.0
        baseline.normalize_()
        np.testing.assert_allclose(np.linalg.norm(baseline.theta.data, axis=1), 1.0, atol=1e-6)


class TestSchedulesAndWeights:

    def test_total_loss(self):
        assert total_loss(1.0, 2.0) == 3.0
        assert total_loss(1.0, 2.0, LossWeights(0.5, 0.0)) == 0.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)

    def test_teacher_temperature_warmup(self):
        assert teacher_temperature(0, 100) == pytest.approx(0.04)
        assert teacher_temperature(5, 100) == pytest.approx(0.055)
        assert teacher_temperature(10, 100) == pytest.approx(0.07)
        assert teacher_temperature(99, 100) == pytest.approx(0.07)

    def test_no_warmup_for_short_runs(self):
        assert teacher_temperature(0, 5) == pytest.approx(0.07)

    def test_mean_entropy(self):
        assert mean_entropy(np.full((4, 8), 1.0 / 8)) == pytest.approx(math.log(8), abs=1e-9)
        assert mean_entropy(np.eye(3)) == pytest.approx(0.0, abs=1e-9)
