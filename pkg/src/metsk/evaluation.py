"""Cross-validated comparison of training strategies.

For each fold of a stratified split over target subjects, a strategy is
trained from scratch on the fold's training subjects (plus the source
dataset when the strategy uses one).  Before scoring, the target head is
re-fit for every strategy identically: the extractor is frozen, a fresh
head is trained with Adam on the fold-training sub-sequence features.
That mirrors how meta-learned models adapt on the support set at
deployment and keeps the comparison about feature quality rather than
how converged each strategy's incidental head happens to be.  Held-out
subjects are then scored by voting over sub-sequence predictions.
"""

from __future__ import annotations

import numpy as np

from . import losses
from . import tensor as T
from .data import BrainGraph, Dataset, SynthSpec, generate_synthetic
from .model import ModelConfig, extractor_forward, head_forward, init_head, model_forward, vote
from .optim import AdamState, adam_step
from .probe import accuracy, auc, stratified_fold_indices
from .seeding import stream
from .tensor import Tensor, value_and_grad
from .training import MetaConfig, TrainState, train


def vote_scores(state: TrainState, dataset: Dataset, model_cfg: ModelConfig, seed: int) -> tuple:
    """Per-subject class-1 probability and predicted class via voting."""
    scores, preds = [], []
    for idx, record in enumerate(dataset.records):
        graph = Tensor(BrainGraph.from_timeseries(record.timeseries).normalized)
        rng = stream(seed, "vote", idx)
        T_len = record.n_timepoints
        L = model_cfg.subseq_len
        logits = []
        for _ in range(model_cfg.subseq_count):
            start = int(rng.integers(0, T_len - L + 1))
            x = Tensor(record.timeseries[:, start : start + L, None])
            logits.append(model_forward(x, graph, state.phi, state.theta_t, model_cfg))
        probs, predicted = vote(logits)
        scores.append(float(probs[1]))
        preds.append(predicted)
    return np.array(scores), np.array(preds)


def refit_target_head(
    state: TrainState,
    fold_target: Dataset,
    model_cfg: ModelConfig,
    seed: int,
    steps: int = 120,
    batch_size: int = 32,
    lr: float = 0.01,
) -> TrainState:
    """Fit a fresh target head on frozen-extractor features of the fold.

    Feature tensors are computed once per sub-sequence (the extractor
    never enters the optimization), then the head trains with Adam on
    class-balanced batches.  Deterministic per seed.
    """
    rng = stream(seed, "refit")
    pool = []
    by_class = {0: [], 1: []}
    L = model_cfg.subseq_len
    for record in fold_target.records:
        graph = Tensor(BrainGraph.from_timeseries(record.timeseries).normalized)
        for _ in range(model_cfg.subseq_count):
            start = int(rng.integers(0, record.n_timepoints - L + 1))
            x = Tensor(record.timeseries[:, start : start + L, None])
            feats = extractor_forward(x, graph, state.phi, model_cfg).detached()
            by_class[record.label].append(len(pool))
            pool.append((feats, graph, record.label))
    head = init_head(model_cfg, 2, stream(seed, "refit-head"))
    adam = AdamState.init(head)
    half = batch_size // 2
    for _ in range(steps):
        idxs = []
        for c in (0, 1):
            candidates = by_class[c]
            idxs.extend(
                int(i) for i in rng.choice(candidates, size=half, replace=len(candidates) < half)
            )
        chosen = [pool[i] for i in idxs]

        def loss_fn(params):
            rows = [head_forward(f, g, params).reshape(1, 2) for f, g, _ in chosen]
            return losses.cross_entropy(T.concat(rows, axis=0), [l for _, _, l in chosen])

        _, grads = value_and_grad(loss_fn, head)
        adam, head = adam_step(adam, head, grads, lr)
    state.theta_t = head
    return state


def probe_scores(state: TrainState, fold_target: Dataset, test_set: Dataset,
                 model_cfg: ModelConfig, seed: int) -> tuple:
    """Linear probe on zero-shot features: fit on the fold's training
    subjects, score held-out subjects."""
    from .probe import extract_features, train_linear_svm

    train_feats = extract_features(state.phi, fold_target, model_cfg, seed=seed).flat
    test_feats = extract_features(state.phi, test_set, model_cfg, seed=seed).flat
    w, b = train_linear_svm(train_feats, fold_target.labels(), C=1.0, iters=2000, seed=seed)
    scores = test_feats @ w + b
    return scores, (scores > 0).astype(np.int64)


def evaluate_strategy_cv(
    strategy: str,
    source,
    target: Dataset,
    config: MetaConfig,
    model_cfg: ModelConfig,
    folds: int = 5,
    seed: int = 0,
    eval_mode: str = "probe",
    refit_steps: int = 120,
) -> list:
    """Train per fold, score held-out subjects; returns [(auc, acc)] per fold.

    eval_mode "probe" scores folds with a linear probe on zero-shot
    extractor features (low variance, measures feature quality directly);
    "vote" re-fits a fresh target head on frozen features and soft-votes
    over sub-sequence predictions (the model's own classification path).
    """
    if eval_mode not in ("probe", "vote"):
        raise ValueError(f"unknown eval_mode {eval_mode!r}")
    labels = target.labels()
    fold_sets = stratified_fold_indices(labels, folds, stream(seed, "strategy-folds"))
    results = []
    for f, test_idx in enumerate(fold_sets):
        train_idx = sorted(set(range(len(target))) - set(test_idx))
        fold_target = target.subset(train_idx)
        fold_config = MetaConfig(
            **{**config.__dict__, "seed": int(stream(seed, "fold-seed", f).integers(0, 2**31))}
        )
        state, _ = train(strategy, source, fold_target, fold_config, model_cfg)
        test_set = target.subset(test_idx)
        if eval_mode == "probe":
            scores, preds = probe_scores(state, fold_target, test_set, model_cfg, fold_config.seed)
        else:
            if refit_steps > 0:
                state = refit_target_head(
                    state, fold_target, model_cfg, fold_config.seed, steps=refit_steps
                )
            scores, preds = vote_scores(state, test_set, model_cfg, seed=fold_config.seed)
        results.append((auc(scores, test_set.labels()), accuracy(preds, test_set.labels())))
    return results


def compare_strategies(
    strategies,
    seeds,
    config: MetaConfig,
    model_cfg: ModelConfig,
    synth_spec: SynthSpec = None,
    source: Dataset = None,
    target: Dataset = None,
    folds: int = 5,
    eval_mode: str = "probe",
    refit_steps: int = 120,
    per_strategy: dict = None,
) -> dict:
    """Mean AUC/ACC per strategy over seeds; data fixed or synthetic per seed.

    per_strategy maps a strategy name to MetaConfig field overrides, e.g.
    different iteration budgets for single-loop and bi-level strategies.
    """
    if synth_spec is None and (source is None or target is None):
        raise ValueError("provide synth_spec or both datasets")
    table = {}
    for strategy in strategies:
        overrides = (per_strategy or {}).get(strategy, {})
        strategy_config = MetaConfig(**{**config.__dict__, **overrides})
        per_seed = []
        for seed in seeds:
            if synth_spec is not None:
                src, tgt = generate_synthetic(synth_spec, seed)
            else:
                src, tgt = source, target
            fold_results = evaluate_strategy_cv(
                strategy, src, tgt, strategy_config, model_cfg,
                folds=folds, seed=seed, eval_mode=eval_mode, refit_steps=refit_steps,
            )
            per_seed.append(
                {
                    "seed": int(seed),
                    "auc": float(np.mean([a for a, _ in fold_results])),
                    "acc": float(np.mean([c for _, c in fold_results])),
                }
            )
        table[strategy] = {
            "auc_mean": float(np.mean([r["auc"] for r in per_seed])),
            "auc_std": float(np.std([r["auc"] for r in per_seed])),
            "acc_mean": float(np.mean([r["acc"] for r in per_seed])),
            "acc_std": float(np.std([r["acc"] for r in per_seed])),
            "per_seed": per_seed,
        }
    return {
        "strategies": table,
        "seeds": [int(s) for s in seeds],
        "folds": folds,
        "eval_mode": eval_mode,
    }
