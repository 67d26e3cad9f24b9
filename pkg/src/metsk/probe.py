"""Zero-shot feature extraction and linear probing.

Features come from the frozen extractor: each subject's graph is built
from its full time-series, a fixed number of seeded sub-sequences run
through the extractor, and the outputs are averaged over sub-sequences
and time, leaving one channel vector per node.  Downstream, a PCA
reduction and simple classifiers (hinge-loss linear SVM trained by
deterministic subgradient descent, or a small MLP on the autodiff engine)
measure how separable those features are under repeated stratified
cross-validation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import losses
from .data import BrainGraph, Dataset
from .model import ModelConfig, extractor_forward
from .optim import AdamState, adam_step
from .seeding import stream
from .tensor import Tensor, value_and_grad


@dataclass
class ZeroShotFeatures:
    features: np.ndarray  # (N, P, C) per-subject node features
    subject_ids: list
    model_id: str
    dataset_id: str
    reduced: Optional[np.ndarray] = None  # (N, n_components) after PCA

    @property
    def flat(self) -> np.ndarray:
        N = self.features.shape[0]
        return self.features.reshape(N, -1)

    def roi_layout(self) -> np.ndarray:
        """Feature index -> node index for the flattened layout."""
        _, P, C = self.features.shape
        return np.repeat(np.arange(P), C)


def extract_features(
    phi: dict,
    dataset: Dataset,
    model_cfg: ModelConfig,
    seed: int = 0,
    model_id: str = "",
) -> ZeroShotFeatures:
    """Frozen-extractor features: mean over R sub-sequences and time.

    Deterministic per seed and independent of call order across subjects;
    the model parameters are never modified.
    """
    expected_p = None
    feats = []
    ids = []
    for idx, record in enumerate(dataset.records):
        if expected_p is None:
            expected_p = record.n_parcels
        graph = Tensor(BrainGraph.from_timeseries(record.timeseries).normalized)
        rng = stream(seed, "extract", idx)
        L = model_cfg.subseq_len
        T_len = record.n_timepoints
        if L > T_len:
            raise ValueError(
                f"{record.subject_id}: sub-sequence length {L} exceeds series length {T_len}"
            )
        acc = None
        for _ in range(model_cfg.subseq_count):
            start = int(rng.integers(0, T_len - L + 1))
            x = Tensor(record.timeseries[:, start : start + L, None])
            out = extractor_forward(x, graph, phi, model_cfg).data  # (P, L, C)
            pooled = out.mean(axis=1)  # (P, C)
            acc = pooled if acc is None else acc + pooled
        feats.append(acc / model_cfg.subseq_count)
        ids.append(record.subject_id)
    return ZeroShotFeatures(
        features=np.stack(feats),
        subject_ids=ids,
        model_id=model_id,
        dataset_id=f"{dataset.domain_tag}:{len(dataset)}x{dataset.n_parcels}",
    )


# ---------------------------------------------------------------------------
# PCA


def pca_reduce(features: np.ndarray, n_components: int) -> tuple:
    """Project centered features onto the top principal directions.

    Uses the eigendecomposition of the feature covariance; each
    component's sign is fixed by making its largest-magnitude loading
    positive.  Returns (projected, explained-variance ratios).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected N x D features, got {X.shape}")
    N, D = X.shape
    if not (1 <= n_components <= min(N, D)):
        raise ValueError(f"n_components must lie in [1, {min(N, D)}], got {n_components}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / max(N - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order]
    for c in range(components.shape[1]):
        pivot = np.argmax(np.abs(components[:, c]))
        if components[pivot, c] < 0:
            components[:, c] = -components[:, c]
    total = eigvals.sum()
    ratios = eigvals[order] / total if total > 0 else np.zeros(n_components)
    return centered @ components, ratios


def default_pca_components(n_subjects: int, cap: int = 16) -> int:
    return max(1, min(n_subjects - 1, cap))


# ---------------------------------------------------------------------------
# classifiers


def train_linear_svm(features, labels, C: float = 1.0, iters: int = 2000, seed: int = 0) -> tuple:
    """Hinge-loss linear SVM by deterministic full-batch subgradient descent.

    Objective: 0.5 ||w||^2 + C * sum_i hinge(1 - y_i (w.x_i + b)), labels
    mapped to +-1, step size 1/(C*t).  The seed argument exists for
    interface symmetry with train_mlp; the solver itself has no
    randomness.
    """
    X = np.asarray(features, dtype=np.float64)
    y01 = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != y01.size:
        raise ValueError(f"features {X.shape} do not match {y01.size} labels")
    classes = np.unique(y01)
    if classes.size < 2:
        raise ValueError("need both classes to train a classifier")
    if np.all(X == X[0]):
        raise ValueError("features are identical across samples; nothing to separate")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    y = np.where(y01 == 1, 1.0, -1.0)
    w = np.zeros(X.shape[1])
    b = 0.0
    for t in range(1, iters + 1):
        margins = y * (X @ w + b)
        active = margins < 1.0
        gw = w - C * ((active * y) @ X)
        gb = -C * float((active * y).sum())
        step = 1.0 / (C * t)
        w = w - step * gw
        b = b - step * gb
    return w, b


@dataclass
class MLPModel:
    params: dict
    hidden: tuple

    def logits(self, features: np.ndarray) -> np.ndarray:
        h = np.asarray(features, dtype=np.float64)
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            h = h @ self.params[f"w{i}"].data + self.params[f"b{i}"].data
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def scores(self, features: np.ndarray) -> np.ndarray:
        out = self.logits(features)
        return out[:, 1] - out[:, 0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        out = self.logits(features)
        return (out[:, 1] > out[:, 0]).astype(np.int64)


def train_mlp(features, labels, hidden=(32, 16, 16), iters: int = 200, seed: int = 0,
              lr: float = 0.001) -> MLPModel:
    """Small ReLU MLP with 2-logit output, full-batch Adam training.

    hidden=() degenerates to plain logistic regression.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if np.unique(y).size < 2:
        raise ValueError("need both classes to train a classifier")
    dims = [X.shape[1], *hidden, 2]
    rng = stream(seed, "mlp-init")
    params = {}
    for i in range(len(dims) - 1):
        bound = np.sqrt(1.0 / dims[i])
        params[f"w{i}"] = Tensor(rng.uniform(-bound, bound, size=(dims[i], dims[i + 1])),
                                 requires_grad=True)
        params[f"b{i}"] = Tensor(np.zeros(dims[i + 1]), requires_grad=True)
    x_const = Tensor(X)
    n_layers = len(dims) - 1

    def loss_fn(p):
        h = x_const
        for i in range(n_layers):
            h = (h @ p[f"w{i}"]) + p[f"b{i}"]
            if i < n_layers - 1:
                h = h.relu()
        return losses.cross_entropy(h, y)

    adam = AdamState.init(params)
    for _ in range(iters):
        _, grads = value_and_grad(loss_fn, params)
        adam, params = adam_step(adam, params, grads, lr)
    return MLPModel(params=params, hidden=tuple(hidden))


def svm_feature_importance(w: np.ndarray, roi_layout: np.ndarray) -> np.ndarray:
    """Per-node importance: sum of positive SVM coefficients per node."""
    w = np.asarray(w, dtype=np.float64)
    roi_layout = np.asarray(roi_layout)
    if w.shape != roi_layout.shape:
        raise ValueError(f"weights {w.shape} do not match layout {roi_layout.shape}")
    n_rois = int(roi_layout.max()) + 1
    positive = np.maximum(w, 0.0)
    return np.bincount(roi_layout, weights=positive, minlength=n_rois)


def importance_csv(importance: np.ndarray) -> str:
    lines = ["roi_index,importance"]
    lines.extend("%d,%.17g" % (i, v) for i, v in enumerate(importance))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics and cross-validation


def auc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg), ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes")
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


def accuracy(predicted, labels) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    return float((predicted == labels).mean())


def stratified_fold_indices(labels, folds: int, rng) -> list:
    """Class-stratified fold assignment; per-class counts differ by <= 1."""
    labels = np.asarray(labels)
    assignments = [[] for _ in range(folds)]
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if idx.size < folds:
            raise ValueError(f"class {c} has {idx.size} subjects, fewer than {folds} folds")
        perm = rng.permutation(idx)
        for pos, subject in enumerate(perm):
            assignments[pos % folds].append(int(subject))
    return [sorted(fold) for fold in assignments]


def _fit_and_score(train_x, train_y, test_x, test_y, classifier: str, seed: int, options) -> tuple:
    if classifier == "svm":
        w, b = train_linear_svm(
            train_x, train_y, C=options.get("C", 1.0), iters=options.get("iters", 2000), seed=seed
        )
        scores = test_x @ w + b
        preds = (scores > 0).astype(np.int64)
    elif classifier == "mlp":
        mdl = train_mlp(
            train_x, train_y,
            hidden=options.get("hidden", (32, 16, 16)),
            iters=options.get("iters", 200),
            seed=seed,
        )
        scores = mdl.scores(test_x)
        preds = mdl.predict(test_x)
    else:
        raise ValueError(f"unknown classifier {classifier!r}")
    return auc(scores, test_y), accuracy(preds, test_y)


def evaluate_cv(
    features,
    labels,
    classifier: str = "svm",
    folds: int = 5,
    repeats: int = 1,
    seed: int = 0,
    **options,
) -> dict:
    """Repeated stratified k-fold evaluation; deterministic per seed."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if repeats < 1:
        raise ValueError("need at least 1 repeat")
    per_fold = []
    for rep in range(repeats):
        fold_sets = stratified_fold_indices(y, folds, stream(seed, "cv", rep))
        for f, test_idx in enumerate(fold_sets):
            test_mask = np.zeros(y.size, dtype=bool)
            test_mask[test_idx] = True
            fold_auc, fold_acc = _fit_and_score(
                X[~test_mask], y[~test_mask], X[test_mask], y[test_mask],
                classifier, seed=seed * 1000 + rep, options=options,
            )
            per_fold.append({"repeat": rep, "fold": f, "auc": fold_auc, "acc": fold_acc})
    aucs = np.array([r["auc"] for r in per_fold])
    accs = np.array([r["acc"] for r in per_fold])
    return {
        "classifier": classifier,
        "folds": folds,
        "repeats": repeats,
        "auc_mean": float(aucs.mean()),
        "auc_std": float(aucs.std()),
        "acc_mean": float(accs.mean()),
        "acc_std": float(accs.std()),
        "per_fold": per_fold,
    }
