"""
Evaluation Kit
Frozen-feature evaluation: weighted k-NN, linear probe, collapse diagnostics
and embedding export
"""
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from app.data import normalize_pixels
from app.exceptions import EmptyTable, IoError, KTooLarge, NoValidK
from app.model import GlobalFeature, global_feature
from app.numerics import Tensor, cross_entropy, matmul, mean, no_grad, precision, softmax, topk_rowwise
from app.optim import AdamW
from app.rng import make_rng

logger = logging.getLogger(__name__)

TAU_KNN = 0.07
DEFAULT_KS = (10, 20, 100, 200)
NORM_TOLERANCE = 1e-5


@dataclass
class FeatureTable:
    """n x d unit-norm features with one integer label per row"""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be n x d with one label per row")
        if self.n:
            norms = np.linalg.norm(self.features, axis=1)
            if np.max(np.abs(norms - 1.0)) > NORM_TOLERANCE:
                raise ValueError("feature rows must be unit-norm")

    @classmethod
    def from_features(cls, features, labels):
        """Normalize rows, then build the table"""
        features = np.asarray(features, dtype=np.float64)
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        return cls(features / np.maximum(norms, 1e-12), labels)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def subset(self, indices):
        return FeatureTable(self.features[indices], self.labels[indices])


def split_indices(n, train_frac, seed):
    """Seeded shuffle, then the first round(train_frac * n) indices train"""
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    order = make_rng(seed, 'split').permutation(n)
    cut = int(round(train_frac * n))
    return order[:cut], order[cut:]


def label_subset(table, frac, seed=0):
    """
    Seeded stratified subset of a labelled table

    Keeps round(frac * n_c) rows of every class c, at least one, so even a
    1% split covers every class the table has.
    """
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"label fraction must be in (0, 1], got {frac}")
    rng = make_rng(seed, 'labels', repr(float(frac)))
    keep = [np.zeros(0, dtype=np.int64)]
    for c in np.unique(table.labels):
        rows = np.flatnonzero(table.labels == c)
        count = max(1, int(round(frac * len(rows))))
        keep.append(rng.choice(rows, size=count, replace=False))
    return table.subset(np.sort(np.concatenate(keep)))


def extract_features(encoder, dataset, batch_size=256, mode=GlobalFeature.CLS):
    """Un-augmented global features of every image, computed without a graph"""
    chunks = []
    with no_grad():
        for start in range(0, dataset.n, batch_size):
            images = normalize_pixels(dataset.pixels[start:start + batch_size])
            chunks.append(np.asarray(global_feature(encoder, images, mode).data, dtype=np.float64))
    features = np.concatenate(chunks) if chunks else np.zeros((0, encoder.config.proj_out))
    return FeatureTable.from_features(features, dataset.labels)


# ----------------------------------------------------------------------------
# k-NN
# ----------------------------------------------------------------------------

def knn_predict(train, test, k, tau_knn=TAU_KNN, chunk=1024):
    """Predicted labels of the weighted k-NN classifier"""
    if train.n == 0 or test.n == 0:
        raise EmptyTable("k-NN needs non-empty train and test tables")
    if k > train.n:
        raise KTooLarge(f"k={k} exceeds the {train.n} train rows")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    predictions = np.empty(test.n, dtype=np.int64)
    for start in range(0, test.n, chunk):
        sims = test.features[start:start + chunk] @ train.features.T
        values, indices = topk_rowwise(sims, k)
        weights = np.exp(values / tau_knn)
        scores = np.zeros((len(sims), num_classes))
        rows = np.repeat(np.arange(len(sims)), k)
        np.add.at(scores, (rows, train.labels[indices].reshape(-1)), weights.reshape(-1))
        predictions[start:start + chunk] = np.argmax(scores, axis=1)
    return predictions


def knn_eval(train, test, k, tau_knn=TAU_KNN, label_frac=None, seed=0):
    """
    Weighted k-NN top-1 accuracy

    Each test row votes with its k most similar train rows, weighted by
    exp(cos / tau_knn); ties go to the lower class index. With label_frac
    only a stratified fraction of the train rows keeps its label and votes.
    """
    if label_frac is not None:
        train = label_subset(train, label_frac, seed)
    predictions = knn_predict(train, test, k, tau_knn)
    return float(np.mean(predictions == test.labels))


@dataclass
class SweepResult:
    best_accuracy: float
    best_k: int
    accuracies: dict = field(default_factory=dict)
    train_rows: int = 0


def knn_sweep(train, test, ks=DEFAULT_KS, tau_knn=TAU_KNN, label_frac=None, seed=0):
    """Best k-NN accuracy over the ks that fit the (optionally label-subsampled) train table"""
    if label_frac is not None:
        train = label_subset(train, label_frac, seed)
    valid = []
    for k in ks:
        if k > train.n:
            logger.warning("skipping k=%d: train split has only %d rows", k, train.n)
        else:
            valid.append(k)
    if not valid:
        raise NoValidK(f"no k in {list(ks)} fits a train split of {train.n} rows")

    accuracies = {k: knn_eval(train, test, k, tau_knn) for k in valid}
    best_k = max(valid, key=lambda k: (accuracies[k], -k))
    return SweepResult(best_accuracy=accuracies[best_k], best_k=best_k, accuracies=accuracies, train_rows=train.n)


# ----------------------------------------------------------------------------
# linear probe
# ----------------------------------------------------------------------------

def linear_probe(train, test, epochs=200, lr=0.05, optimizer='adamw', weight_decay=0.0):
    """
    Multinomial logistic regression on frozen features

    Full-batch training on features standardized with train statistics;
    returns test top-1 accuracy.

    Args:
        train (FeatureTable): fit set
        test (FeatureTable): scored set
        epochs (int): full-batch steps
        lr (float): step size
        optimizer (str): 'adamw' or 'gd' (plain gradient descent)
    """
    if optimizer not in ('adamw', 'gd'):
        raise ValueError(f"optimizer must be 'adamw' or 'gd', got '{optimizer}'")
    if train.n == 0 or test.n == 0:
        raise EmptyTable("linear probe needs non-empty train and test tables")
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    mu = train.features.mean(axis=0)
    sigma = train.features.std(axis=0) + 1e-6

    with precision(np.float64):
        X = (train.features - mu) / sigma
        targets = np.eye(num_classes)[train.labels]
        W = Tensor(np.zeros((train.d, num_classes)), requires_grad=True)
        b = Tensor(np.zeros(num_classes), requires_grad=True)
        params = {'weight': W, 'bias': b}
        adam = AdamW(params, lr=lr, weight_decay=weight_decay, no_decay={'bias'}) if optimizer == 'adamw' else None

        for _ in range(epochs):
            loss = mean(cross_entropy(targets, softmax(matmul(X, W) + b, axis=-1)))
            for p in params.values():
                p.zero_grad()
            loss.backward()
            if adam is not None:
                adam.step()
            else:
                for p in params.values():
                    p.data -= lr * p.grad

        logits = ((test.features - mu) / sigma) @ W.data + b.data
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


# ----------------------------------------------------------------------------
# collapse diagnostics
# ----------------------------------------------------------------------------

@dataclass
class CollapseMetrics:
    mean_pairwise_cos: float
    per_dim_std_mean: float
    effective_rank: float


def collapse_metrics(features):
    """
    Collapse diagnostics of a feature matrix

    mean off-diagonal cosine, mean per-dimension std, and the effective rank
    exp(entropy of the normalized singular values)
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("collapse_metrics needs at least 2 rows")
    n = F.shape[0]

    unit = F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), 1e-12)
    gram = unit @ unit.T
    off_diagonal = (gram.sum() - np.trace(gram)) / (n * (n - 1))

    s = np.linalg.svd(F, compute_uv=False)
    p = s / s.sum()
    p = p[p > 0]
    rank = math.exp(float(-(p * np.log(p)).sum()))
    rank = min(max(rank, 1.0), float(min(F.shape)))

    return CollapseMetrics(
        mean_pairwise_cos=float(off_diagonal),
        per_dim_std_mean=float(F.std(axis=0).mean()),
        effective_rank=rank,
    )


# ----------------------------------------------------------------------------
# export / results
# ----------------------------------------------------------------------------

def write_embeddings(table, out_path):
    """Header "n d", then per row d values and the label, tab-separated"""
    try:
        with open(out_path, 'w') as f:
            f.write(f'{table.n} {table.d}\n')
            for row, label in zip(table.features, table.labels):
                f.write('\t'.join('%.9g' % v for v in row) + f'\t{int(label)}\n')
    except OSError as e:
        raise IoError(f"cannot write embeddings to {out_path}: {e}") from e
    return out_path


def export_embeddings(encoder, dataset, out_path, batch_size=256, mode=GlobalFeature.CLS):
    table = extract_features(encoder, dataset, batch_size=batch_size, mode=mode)
    write_embeddings(table, out_path)
    logger.info("exported %d embeddings to %s", table.n, out_path)
    return table


def load_embeddings(path):
    try:
        with open(path, 'r') as f:
            n, d = (int(x) for x in f.readline().split())
            frame = pd.read_csv(f, sep='\t', header=None)
    except (OSError, ValueError) as e:
        raise IoError(f"cannot read embeddings {path}: {e}") from e
    if frame.shape != (n, d + 1):
        raise IoError(f"{path}: expected {n} rows of {d + 1} fields, found {frame.shape}")
    return FeatureTable(frame.iloc[:, :d].to_numpy(dtype=np.float64), frame.iloc[:, d].to_numpy(dtype=np.int64))


def append_results(path, tag, rows):
    """Append (k, accuracy) rows to a tag,k,accuracy CSV"""
    frame = pd.DataFrame([{'tag': tag, 'k': k, 'accuracy': acc} for k, acc in rows],
                         columns=['tag', 'k', 'accuracy'])
    try:
        frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)
    except OSError as e:
        raise IoError(f"cannot append results to {path}: {e}") from e
    return frame


@dataclass
class EvalReport:
    knn: SweepResult
    linear_accuracy: float
    collapse: CollapseMetrics

    def summary(self):
        return {
            'knn_best_accuracy': self.knn.best_accuracy,
            'knn_best_k': self.knn.best_k,
            'linear_accuracy': self.linear_accuracy,
            'mean_pairwise_cos': self.collapse.mean_pairwise_cos,
            'per_dim_std_mean': self.collapse.per_dim_std_mean,
            'effective_rank': self.collapse.effective_rank,
        }


def evaluate_tables(train, test, ks=DEFAULT_KS, tau_knn=TAU_KNN, probe_epochs=200, probe_optimizer='adamw',
                    probe_lr=0.05):
    """k-NN sweep, linear probe and collapse diagnostics on one split"""
    sweep = knn_sweep(train, test, ks, tau_knn)
    return EvalReport(
        knn=sweep,
        linear_accuracy=linear_probe(train, test, epochs=probe_epochs, lr=probe_lr, optimizer=probe_optimizer),
        collapse=collapse_metrics(np.concatenate([train.features, test.features])),
    )
