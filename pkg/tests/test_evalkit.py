"""Tests for k-NN evaluation, the linear probe, collapse metrics and exports"""
import logging
import math

import numpy as np
import pandas as pd
import pytest
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis

from app.evalkit import (
    FeatureTable,
    append_results,
    collapse_metrics,
    evaluate_tables,
    export_embeddings,
    extract_features,
    knn_eval,
    knn_predict,
    knn_sweep,
    label_subset,
    linear_probe,
    load_embeddings,
    split_indices,
    write_embeddings,
)
from app.exceptions import EmptyTable, KTooLarge, NoValidK
from app.data import generate_synthetic
from app.model import EncoderConfig, init_encoder


def _blobs(rng, n_per_class, num_classes, d, spread):
    centers = rng.standard_normal((num_classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    features = np.concatenate([c + spread * rng.standard_normal((n_per_class, d)) for c in centers])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return FeatureTable.from_features(features, labels)


def _split(table, rng):
    order = rng.permutation(table.n)
    half = table.n // 2
    return table.subset(order[:half]), table.subset(order[half:])


class TestFeatureTable:

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            FeatureTable(np.array([[2.0, 0.0]]), [0])

    def test_from_features_normalizes(self):
        table = FeatureTable.from_features([[3.0, 4.0]], [1])
        np.testing.assert_allclose(table.features, [[0.6, 0.8]])

    def test_split_is_seeded_partition(self):
        train, test = split_indices(10, 0.7, seed=3)
        assert len(train) == 7 and len(test) == 3
        assert sorted(np.concatenate([train, test])) == list(range(10))
        np.testing.assert_array_equal(split_indices(10, 0.7, seed=3)[0], train)


class TestKnn:

    def test_single_train_row(self):
        train = FeatureTable(np.array([[1.0, 0.0]]), [0])
        test = FeatureTable(np.array([[0.0, 1.0]]), [0])
        assert knn_eval(train, test, 1) == 1.0

    def test_nearest_label_wins(self):
        train = FeatureTable(np.eye(2), [0, 1])
        test = FeatureTable(np.array([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(0.99)]]), [0, 1])
        assert knn_eval(train, test, 1) == 1.0

    def test_matches_exhaustive_oracle(self, rng):
        table = _blobs(rng, 20, 3, 6, spread=0.8)
        train, test = _split(table, rng)
        k, tau = 7, 0.07
        expected = []
        for row in test.features:
            sims = train.features @ row
            neighbours = sorted(range(train.n), key=lambda j: -sims[j])[:k]
            scores = np.zeros(3)
            for j in neighbours:
                scores[train.labels[j]] += math.exp(sims[j] / tau)
            expected.append(int(np.argmax(scores)))
        np.testing.assert_array_equal(knn_predict(train, test, k, tau), expected)

    def test_invariant_to_rotation_and_scaling(self, rng):
        table = _blobs(rng, 15, 3, 5, spread=0.6)
        train, test = _split(table, rng)
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        rotated_train = FeatureTable.from_features(3.0 * train.features @ q, train.labels)
        rotated_test = FeatureTable.from_features(0.5 * test.features @ q, test.labels)
        assert knn_eval(rotated_train, rotated_test, 5) == knn_eval(train, test, 5)

    def test_k_too_large(self):
        table = FeatureTable(np.eye(3), [0, 1, 2])
        with pytest.raises(KTooLarge):
            knn_eval(table, table, 4)

    def test_empty(self):
        empty = FeatureTable(np.zeros((0, 3)), [])
        with pytest.raises(EmptyTable):
            knn_eval(empty, FeatureTable(np.eye(3), [0, 1, 2]), 1)


class TestLabelFractions:

    def test_subset_is_stratified(self, rng):
        table = _blobs(rng, 50, 4, 6, spread=0.5)
        subset = label_subset(table, 0.1, seed=2)
        assert subset.n == 20
        np.testing.assert_array_equal(np.bincount(subset.labels), [5, 5, 5, 5])

    def test_every_class_keeps_a_row(self, rng):
        table = _blobs(rng, 30, 3, 6, spread=0.5)
        subset = label_subset(table, 0.01, seed=0)
        np.testing.assert_array_equal(np.bincount(subset.labels), [1, 1, 1])

    def test_subset_is_seeded(self, rng):
        table = _blobs(rng, 40, 2, 4, spread=0.5)
        a, b = label_subset(table, 0.25, seed=1), label_subset(table, 0.25, seed=1)
        np.testing.assert_array_equal(a.features, b.features)
        assert not np.array_equal(a.features, label_subset(table, 0.25, seed=2).features)

    def test_full_fraction_keeps_everything(self, rng):
        table = _blobs(rng, 10, 3, 4, spread=0.5)
        np.testing.assert_array_equal(label_subset(table, 1.0).features, table.features)

    @pytest.mark.parametrize('frac', [0.0, 1.5])
    def test_fraction_out_of_range(self, rng, frac):
        with pytest.raises(ValueError):
            label_subset(_blobs(rng, 4, 2, 3, spread=0.5), frac)

    def test_knn_uses_only_the_labelled_rows(self, rng):
        train, test = _split(_blobs(rng, 40, 3, 6, spread=0.6), rng)
        expected = knn_eval(label_subset(train, 0.1, seed=4), test, 3)
        assert knn_eval(train, test, 3, label_frac=0.1, seed=4) == expected

    def test_sweep_skips_k_beyond_the_subset(self, rng):
        train, test = _split(_blobs(rng, 40, 2, 4, spread=0.3), rng)
        result = knn_sweep(train, test, ks=(1, 50), label_frac=0.1)
        assert list(result.accuracies) == [1]
        assert result.train_rows == 4


class TestKnnSweep:

    def test_single_k_matches_knn_eval(self, rng):
        train, test = _split(_blobs(rng, 10, 2, 4, spread=0.5), rng)
        result = knn_sweep(train, test, ks=(3,))
        assert result.best_k == 3
        assert result.best_accuracy == knn_eval(train, test, 3)

    def test_skips_oversized_k(self, rng, caplog):
        train, test = _split(_blobs(rng, 10, 2, 4, spread=0.5), rng)
        with caplog.at_level(logging.WARNING):
            result = knn_sweep(train, test, ks=(3, 500))
        assert list(result.accuracies) == [3]
        assert 'skipping k=500' in caplog.text

    def test_no_valid_k(self, rng):
        train, test = _split(_blobs(rng, 5, 2, 4, spread=0.5), rng)
        with pytest.raises(NoValidK):
            knn_sweep(train, test, ks=(10, 20))


class TestLinearProbe:

    def test_separable_classes(self, rng):
        train, test = _split(_blobs(rng, 30, 3, 8, spread=0.05), rng)
        assert linear_probe(train, test, epochs=100) == 1.0

    def test_gradient_descent_variant(self, rng):
        train, test = _split(_blobs(rng, 30, 3, 8, spread=0.05), rng)
        assert linear_probe(train, test, epochs=200, lr=0.5, optimizer='gd') == 1.0

    def test_shuffled_labels_near_chance(self):
        rng = np.random.default_rng(0)
        features = rng.standard_normal((400, 8))
        labels = rng.integers(0, 4, size=400)
        table = FeatureTable.from_features(features, labels)
        train, test = table.subset(np.arange(200)), table.subset(np.arange(200, 400))
        assert linear_probe(train, test, epochs=100) < 0.45

    def test_unknown_optimizer(self, rng):
        train, test = _split(_blobs(rng, 5, 2, 3, spread=0.1), rng)
        with pytest.raises(ValueError):
            linear_probe(train, test, optimizer='sgd')

    def test_agrees_with_discriminant_analysis(self, rng):
        train, test = _split(_blobs(rng, 80, 4, 10, spread=0.2), rng)
        reference = LinearDiscriminantAnalysis().fit(train.features, train.labels).score(test.features, test.labels)
        assert abs(linear_probe(train, test) - reference) <= 0.02


class TestUntrainedEncoder:

    def _knn_accuracy(self, dataset):
        encoder = init_encoder(EncoderConfig(image_size=dataset.height, patch_size=4, local_size=8, embed_dim=16,
                                             depth=1, heads=2, proj_hidden=32, proj_out=16), seed=0)
        table = extract_features(encoder, dataset)
        train_idx, test_idx = split_indices(table.n, 0.5, seed=0)
        return knn_eval(table.subset(train_idx), table.subset(test_idx), 5)

    def test_separates_template_classes(self):
        assert self._knn_accuracy(generate_synthetic(5, 40, size=16, seed=3)) > 0.8

    def test_cannot_separate_dot_layouts(self):
        assert self._knn_accuracy(generate_synthetic(5, 40, size=32, seed=3, hard=True)) < 0.5


class TestCollapseMetrics:

    def test_identical_rows(self):
        metrics = collapse_metrics(np.tile([[0.6, 0.8, 0.0]], (10, 1)))
        assert metrics.mean_pairwise_cos == pytest.approx(1.0)
        assert metrics.per_dim_std_mean == pytest.approx(0.0, abs=1e-12)
        assert metrics.effective_rank == pytest.approx(1.0)

    def test_orthonormal_rows(self):
        metrics = collapse_metrics(np.eye(6))
        assert metrics.mean_pairwise_cos == pytest.approx(0.0)
        assert metrics.effective_rank == pytest.approx(6.0)

    def test_rank_matches_svd_oracle(self, rng):
        F = rng.standard_normal((50, 7))
        s = np.linalg.svd(F, compute_uv=False)
        p = s / s.sum()
        assert collapse_metrics(F).effective_rank == pytest.approx(math.exp(-(p * np.log(p)).sum()))

    def test_rank_bounds(self, rng):
        for _ in range(20):
            F = rng.standard_normal((int(rng.integers(2, 30)), int(rng.integers(1, 10))))
            rank = collapse_metrics(F).effective_rank
            assert 1.0 <= rank <= min(F.shape) + 1e-9

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            collapse_metrics(np.ones((1, 3)))


class TestExports:

    @pytest.fixture
    def encoder(self):
        return init_encoder(EncoderConfig(image_size=8, patch_size=4, local_size=4, embed_dim=8, depth=1,
                                          heads=2, proj_hidden=16, proj_out=8), seed=0)

    def test_extract_features_are_unit_norm(self, encoder, tiny_dataset):
        table = extract_features(encoder, tiny_dataset, batch_size=5)
        assert table.n == tiny_dataset.n
        assert table.d == 8
        np.testing.assert_allclose(np.linalg.norm(table.features, axis=1), 1.0, atol=1e-6)

    def test_embedding_file(self, encoder, tiny_dataset, tmp_path):
        path = tmp_path / 'emb.tsv'
        table = export_embeddings(encoder, tiny_dataset, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == f'{tiny_dataset.n} 8'
        assert len(lines) == tiny_dataset.n + 1
        loaded = load_embeddings(str(path))
        np.testing.assert_allclose(loaded.features, table.features, atol=1e-7)
        np.testing.assert_array_equal(loaded.labels, tiny_dataset.labels)

    def test_write_empty_table(self, tmp_path):
        path = tmp_path / 'empty.tsv'
        write_embeddings(FeatureTable(np.zeros((0, 4)), []), str(path))
        assert path.read_text() == '0 4\n'

    def test_append_results_writes_header_once(self, tmp_path):
        path = tmp_path / 'results.csv'
        append_results(str(path), 'run-a', [(10, 0.5), (20, 0.75)])
        append_results(str(path), 'run-b', [(10, 0.25)])
        frame = pd.read_csv(path)
        assert list(frame.columns) == ['tag', 'k', 'accuracy']
        assert list(frame['tag']) == ['run-a', 'run-a', 'run-b']
        assert frame['accuracy'].tolist() == [0.5, 0.75, 0.25]


def test_evaluate_tables_summary(rng):
    train, test = _split(_blobs(rng, 20, 2, 6, spread=0.1), rng)
    report = evaluate_tables(train, test, ks=(1, 5), probe_epochs=50)
    summary = report.summary()
    assert summary['knn_best_accuracy'] == 1.0
    assert summary['knn_best_k'] == 1
    assert 1.0 <= summary['effective_rank'] <= 6.0
