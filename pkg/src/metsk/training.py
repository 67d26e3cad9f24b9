"""Bi-level training and the comparison strategies.

The main strategy alternates three steps inside every outer iteration:
re-initialize the target head and resample the meta train/validation
split, adapt the target head alone with k SGD steps on the meta-training
subjects, then take one Adam step on extractor + source head against the
source loss plus the scaled target loss on the held-out validation
subjects, with the adapted target head held constant (first-order
meta-gradient; the inner trajectory is not differentiated through).

The other strategies reuse the same machinery: supervised training on the
target only (baseline), contrastive pre-training followed by supervised
fine-tuning (ft), one joint loop over both losses (mtl), bi-level
training without any source (mel), and contrastive-only training (ssl).

Reproducibility note: every stochastic concern draws from its own named
stream, so e.g. target-side sampling can never shift the source batch
schedule.  With lam=0 and k=0 the extractor/source-head trajectory is
bitwise identical to ssl's under the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from . import tensor as T
from .data import BrainGraph, Dataset, note_tensor_build
from .model import (
    ModelConfig,
    extractor_forward,
    head_forward,
    init_head,
    init_params,
    model_forward,
    serialize_model,
)
from .optim import AdamState, adam_step, sgd_step
from .seeding import stream
from .tensor import Tensor, value_and_grad

_NAN = float("nan")

STRATEGIES = ("metsk", "baseline", "ft", "mtl", "mel", "ssl")


@dataclass
class MetaConfig:
    alpha: float = 0.01  # inner-loop SGD rate
    beta: float = 0.001  # outer-loop Adam rate
    k: int = 25  # inner update steps
    lam: float = 30.0  # target-loss scale
    tau: float = 30.0  # contrastive temperature
    iterations: int = 40  # total outer iterations M
    batch_size: int = 32  # subjects per batch
    warmup_fraction: float = 0.5  # leading fraction trained source-only
    meta_train: Optional[int] = None  # subjects in the meta-training split
    meta_val: Optional[int] = None  # subjects in the meta-validation split
    embed_dim: int = 32  # source-head embedding width E
    seed: int = 0
    source_task: str = "contrastive"  # or "supervised"
    ssl_include_target: bool = False
    freeze_extractor: bool = False  # ft: fine-tune the head only

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("learning rates must be positive")
        if self.k < 0:
            raise ValueError(f"inner step count must be >= 0, got {self.k}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if (self.meta_train is None) != (self.meta_val is None):
            raise ValueError("set both meta_train and meta_val or neither")
        if self.embed_dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.source_task not in ("contrastive", "supervised"):
            raise ValueError(f"unknown source task {self.source_task!r}")


@dataclass
class TrainState:
    phi: dict
    theta_s: dict
    theta_t: dict
    adam: Optional[AdamState]
    iteration: int = 0
    history: list = field(default_factory=list)  # (iter, phase, L_S, L_T_inner_last, L_T_val)


# ---------------------------------------------------------------------------
# batching


class Batcher:
    """Per-dataset sampling: cached graphs, balanced batches, view pairs.

    Owns one RNG; every sample consumes it in a fixed order, which is what
    makes training trajectories reproducible and comparable across
    strategies.
    """

    def __init__(self, records, domains, model_cfg: ModelConfig, rng):
        self.records = list(records)
        self.domains = list(domains)
        parcels = {r.n_parcels for r in self.records}
        if len(parcels) > 1:
            raise ValueError(f"records mix parcel counts {sorted(parcels)}")
        self.L = model_cfg.subseq_len
        self.rng = rng
        self.graphs = [
            Tensor(BrainGraph.from_timeseries(r.timeseries).normalized) for r in self.records
        ]
        self.by_class = {0: [], 1: []}
        for i, r in enumerate(self.records):
            if r.label is not None:
                self.by_class[r.label].append(i)

    @classmethod
    def for_dataset(cls, dataset: Dataset, model_cfg: ModelConfig, rng):
        domains = [dataset.domain_tag] * len(dataset)
        return cls(dataset.records, domains, model_cfg, rng)

    def graph(self, idx: int) -> Tensor:
        return self.graphs[idx]

    def label(self, idx: int) -> int:
        return self.records[idx].label

    def _start(self, idx: int) -> int:
        T_len = self.records[idx].n_timepoints
        return int(self.rng.integers(0, T_len - self.L + 1))

    def subsequence(self, idx: int) -> Tensor:
        start = self._start(idx)
        note_tensor_build(self.domains[idx])
        r = self.records[idx]
        return Tensor(r.timeseries[:, start : start + self.L, None])

    def view_pair(self, idx: int) -> tuple:
        """Two sub-sequences with distinct starts whenever the series allows."""
        r = self.records[idx]
        span = r.n_timepoints - self.L + 1
        s1 = self._start(idx)
        s2 = self._start(idx)
        if span >= 2 and s2 == s1:
            s2 = (s2 + 1) % span
        note_tensor_build(self.domains[idx])
        note_tensor_build(self.domains[idx])
        x1 = Tensor(r.timeseries[:, s1 : s1 + self.L, None])
        x2 = Tensor(r.timeseries[:, s2 : s2 + self.L, None])
        return x1, x2

    def pick_subjects(self, count: int) -> list:
        n = len(self.records)
        return [int(i) for i in self.rng.choice(n, size=count, replace=n < count)]

    def balanced_indices(self, half: int, pools: Optional[dict] = None) -> list:
        """`half` subjects per class, with replacement when a class is short."""
        pools = pools if pools is not None else self.by_class
        out = []
        for c in (0, 1):
            pool = pools[c]
            if not pool:
                raise ValueError(f"no subjects of class {c} to sample from")
            out.extend(
                int(i) for i in self.rng.choice(pool, size=half, replace=len(pool) < half)
            )
        return out


def sample_contrastive_batch(batcher: Batcher, batch_size: int) -> list:
    """[(x1, x2, graph)] for a fresh subject draw."""
    batch = []
    for idx in batcher.pick_subjects(batch_size):
        x1, x2 = batcher.view_pair(idx)
        batch.append((x1, x2, batcher.graph(idx)))
    return batch


def sample_labeled_batch(batcher: Batcher, half: int, pools: Optional[dict] = None) -> list:
    """[(x, graph, label)] class-balanced."""
    batch = []
    for idx in batcher.balanced_indices(half, pools):
        batch.append((batcher.subsequence(idx), batcher.graph(idx), batcher.label(idx)))
    return batch


# ---------------------------------------------------------------------------
# loss assembly (pure in the parameters, batches fixed up front)


def contrastive_batch_loss(phi, theta_s, batch, tau, model_cfg) -> Tensor:
    rows1, rows2 = [], []
    E = theta_s["dense.w"].shape[1]
    for x1, x2, graph in batch:
        rows1.append(model_forward(x1, graph, phi, theta_s, model_cfg).reshape(1, E))
        rows2.append(model_forward(x2, graph, phi, theta_s, model_cfg).reshape(1, E))
    view1 = T.concat(rows1, axis=0)
    view2 = T.concat(rows2, axis=0)
    return losses.contrastive_loss(losses.ContrastiveBatch(view1, view2, tau))


def supervised_batch_loss(phi, head, batch, model_cfg) -> Tensor:
    rows, labels = [], []
    for x, graph, label in batch:
        rows.append(model_forward(x, graph, phi, head, model_cfg).reshape(1, 2))
        labels.append(label)
    return losses.cross_entropy(T.concat(rows, axis=0), labels)


def supervised_head_loss(features_batch, head) -> Tensor:
    """Cross-entropy through the head only; features are fixed inputs."""
    rows, labels = [], []
    for feats, graph, label in features_batch:
        rows.append(head_forward(feats, graph, head).reshape(1, 2))
        labels.append(label)
    return losses.cross_entropy(T.concat(rows, axis=0), labels)


def supervised_source_task(source: Dataset) -> Callable:
    """Source loss closure for a labeled source: 2-logit cross-entropy.

    Swaps the contrastive objective for plain classification; everything
    else in the outer loop stays the same.
    """
    if not source.is_labeled:
        raise ValueError("supervised source task needs a labeled source dataset")

    def build(phi, theta_s, batch, config, model_cfg):
        return supervised_batch_loss(phi, theta_s, batch, model_cfg)

    return build


# ---------------------------------------------------------------------------
# parameter-set merging for joint updates


def merge_params(**groups) -> dict:
    merged = {}
    for prefix, params in groups.items():
        for name, t in params.items():
            merged[f"{prefix}.{name}"] = t
    return merged


def split_params(merged: dict, prefixes) -> tuple:
    out = []
    for prefix in prefixes:
        tag = prefix + "."
        out.append({k[len(tag):]: v for k, v in merged.items() if k.startswith(tag)})
    return tuple(out)


# ---------------------------------------------------------------------------
# meta split


def split_meta_indices(labels: np.ndarray, n_tr: int, n_val: int, rng) -> tuple:
    """Stratified disjoint exhaustive split of range(len(labels))."""
    labels = np.asarray(labels)
    n = labels.size
    if n_tr + n_val != n:
        raise ValueError(f"n_tr + n_val = {n_tr + n_val} must equal {n}")
    if n_tr < 1 or n_val < 1:
        raise ValueError("both split sides need at least one subject")
    class_idx = {c: np.nonzero(labels == c)[0] for c in (0, 1)}
    counts = {c: idx.size for c, idx in class_idx.items()}
    if any(v < 2 for v in counts.values()):
        raise ValueError("class starvation: each class needs >= 2 subjects to split")
    # proportional quotas, remainder to the largest fractional part
    raw = {c: n_tr * counts[c] / n for c in (0, 1)}
    quota = {c: int(math.floor(raw[c])) for c in (0, 1)}
    rest = n_tr - sum(quota.values())
    order = sorted((0, 1), key=lambda c: (raw[c] - quota[c], -c), reverse=True)
    for c in order[:rest]:
        quota[c] += 1
    # each side must keep >= 1 subject of each class
    for c in (0, 1):
        other = 1 - c
        if quota[c] < 1 and quota[other] > 1:
            quota[c] += 1
            quota[other] -= 1
        if quota[c] > counts[c] - 1 and quota[other] < counts[other] - 1:
            quota[other] += quota[c] - (counts[c] - 1)
            quota[c] = counts[c] - 1
    for c in (0, 1):
        if not (1 <= quota[c] <= counts[c] - 1):
            raise ValueError("class starvation: cannot give each side one subject per class")
    tr, val = [], []
    for c in (0, 1):
        perm = rng.permutation(class_idx[c])
        tr.extend(int(i) for i in perm[: quota[c]])
        val.extend(int(i) for i in perm[quota[c] :])
    return sorted(tr), sorted(val)


def split_meta(target: Dataset, n_tr: int, n_val: int, rng) -> tuple:
    """Stratified (meta-train, meta-validation) datasets, disjoint and exhaustive."""
    if not target.is_labeled:
        raise ValueError("meta split needs a labeled target dataset")
    tr, val = split_meta_indices(target.labels(), n_tr, n_val, rng)
    return target.subset(tr), target.subset(val)


def _auto_split(config: MetaConfig, n: int) -> tuple:
    if config.meta_train is not None:
        return config.meta_train, config.meta_val
    n_val = min(max(2, int(round(0.2 * n))), n - 2)
    return n - n_val, n_val


# ---------------------------------------------------------------------------
# inner loop / outer step


def inner_loop(state: TrainState, tr_indices, batcher: Batcher, config: MetaConfig,
               model_cfg: ModelConfig) -> tuple:
    """k SGD steps on the target head only; extractor output is computed
    outside the tape, so gradients cannot reach phi or theta_s.

    Returns (adapted head, per-step losses).
    """
    pools = {c: [i for i in tr_indices if batcher.label(i) == c] for c in (0, 1)}
    theta = state.theta_t
    step_losses = []
    half = config.batch_size // 2
    for _ in range(config.k):
        idxs = batcher.balanced_indices(half, pools)
        feats_batch = []
        for i in idxs:
            x = batcher.subsequence(i)
            feats = extractor_forward(x, batcher.graph(i), state.phi, model_cfg)
            feats_batch.append((feats.detached(), batcher.graph(i), batcher.label(i)))

        def loss_fn(params):
            return supervised_head_loss(feats_batch, params)

        val, grads = value_and_grad(loss_fn, theta)
        theta = sgd_step(theta, grads, config.alpha)
        step_losses.append(val)
    return theta, step_losses


def outer_step(
    state: TrainState,
    source_batch,
    val_batch,
    config: MetaConfig,
    model_cfg: ModelConfig,
    source_loss_builder=None,
    param_groups=("phi", "src"),
) -> tuple:
    """One Adam step on extractor (+ source head) for L_S + lam * L_T(val).

    The adapted target head enters as a constant (first-order
    approximation): its parameters are detached, so the tape never
    records gradients into it.  Returns (L_S, L_T_val) values.
    """
    theta_t_const = {k: v.detached() for k, v in state.theta_t.items()}
    groups = {}
    if "phi" in param_groups:
        groups["phi"] = state.phi
    if "src" in param_groups:
        groups["src"] = state.theta_s
    merged = merge_params(**groups)
    traced = {"ls": _NAN, "lt": _NAN}

    def loss_fn(params):
        parts = split_params(params, param_groups)
        phi = parts[param_groups.index("phi")] if "phi" in param_groups else state.phi
        ths = parts[param_groups.index("src")] if "src" in param_groups else state.theta_s
        total = None
        if source_batch is not None:
            if source_loss_builder is not None:
                ls = source_loss_builder(phi, ths, source_batch, config, model_cfg)
            else:
                ls = contrastive_batch_loss(phi, ths, source_batch, config.tau, model_cfg)
            traced["ls"] = ls.item()
            total = ls
        if val_batch is not None and config.lam > 0.0:
            lt = supervised_batch_loss(phi, theta_t_const, val_batch, model_cfg)
            traced["lt"] = lt.item()
            scaled = lt * config.lam
            total = scaled if total is None else losses.meta_loss(total, lt, config.lam)
        if total is None:
            raise ValueError("outer step has no loss terms")
        return total

    _, grads = value_and_grad(loss_fn, merged)
    if state.adam is None:
        state.adam = AdamState.init(merged)
    state.adam, updated = adam_step(state.adam, merged, grads, config.beta)
    parts = split_params(updated, param_groups)
    if "phi" in param_groups:
        state.phi = parts[param_groups.index("phi")]
    if "src" in param_groups:
        state.theta_s = parts[param_groups.index("src")]
    return traced["ls"], traced["lt"]


# ---------------------------------------------------------------------------
# full training


def _require(condition: bool, message: str):
    if not condition:
        raise ValueError(message)


def _call(hook, event, state, info=None):
    if hook is not None:
        hook(event, state, info or {})


def train(
    strategy: str,
    source: Optional[Dataset],
    target: Optional[Dataset],
    config: MetaConfig,
    model_cfg: ModelConfig = ModelConfig(),
    phase_hook=None,
) -> tuple:
    """Run one training strategy to completion.

    Returns (TrainState, serialized model text).  Deterministic per
    config.seed: rerunning produces bitwise-identical parameters.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    needs_source = strategy in ("metsk", "ft", "mtl", "ssl")
    needs_target = strategy in ("metsk", "baseline", "ft", "mtl", "mel")
    _require(not needs_source or source is not None, f"strategy {strategy!r} needs a source dataset")
    _require(not needs_target or target is not None, f"strategy {strategy!r} needs a target dataset")
    if needs_target:
        _require(target.is_labeled, f"strategy {strategy!r} needs a labeled target dataset")
    supervised_source = config.source_task == "supervised" and needs_source
    if supervised_source:
        _require(source.is_labeled, "supervised source task needs a labeled source dataset")
    if strategy == "ssl" and config.ssl_include_target:
        _require(target is not None, "ssl with ssl_include_target needs a target dataset")

    seed = config.seed
    source_dim = 2 if supervised_source else config.embed_dim
    phi, theta_s, theta_t = init_params(model_cfg, source_dim, stream(seed, "init"))
    state = TrainState(phi=phi, theta_s=theta_s, theta_t=theta_t, adam=None)

    src_batcher = None
    if needs_source:
        pool_records = list(source.records)
        pool_domains = ["source"] * len(source)
        if strategy == "ssl" and config.ssl_include_target:
            pool_records += list(target.records)
            pool_domains += ["target"] * len(target)
        src_batcher = Batcher(pool_records, pool_domains, model_cfg, stream(seed, "source-batches"))
    tgt_batcher = None
    if target is not None and strategy != "ssl":
        tgt_batcher = Batcher.for_dataset(target, model_cfg, stream(seed, "target-batches"))

    source_loss_builder = supervised_source_task(source) if supervised_source else None

    def sample_source():
        if supervised_source:
            return sample_labeled_batch(src_batcher, config.batch_size // 2)
        return sample_contrastive_batch(src_batcher, config.batch_size)

    M = config.iterations
    half = config.batch_size // 2

    if strategy in ("metsk", "mel"):
        labels = target.labels()
        n_tr, n_val = _auto_split(config, len(target))
        with_source = strategy == "metsk"
        warmup = int(math.floor(config.warmup_fraction * M)) if with_source else 0
        groups = ("phi", "src") if with_source else ("phi",)
        for i in range(warmup):
            ls, _ = outer_step(
                state, sample_source(), None, config, model_cfg,
                source_loss_builder=source_loss_builder, param_groups=groups,
            )
            state.iteration = i + 1
            state.history.append((i, "warmup", ls, _NAN, _NAN))
            _call(phase_hook, "warmup", state, {"iteration": i})
        for i in range(warmup, M):
            state.theta_t = init_head(model_cfg, 2, stream(seed, "theta-t", i))
            tr_idx, val_idx = split_meta_indices(labels, n_tr, n_val, stream(seed, "meta-split", i))
            _call(phase_hook, "step1", state,
                  {"iteration": i, "train_indices": tr_idx, "val_indices": val_idx})
            state.theta_t, inner_losses = inner_loop(state, tr_idx, tgt_batcher, config, model_cfg)
            _call(phase_hook, "inner", state, {"iteration": i, "inner_losses": inner_losses})
            src_batch = sample_source() if with_source else None
            val_batch = None
            if config.lam > 0.0:
                val_pools = {c: [j for j in val_idx if labels[j] == c] for c in (0, 1)}
                val_batch = sample_labeled_batch(tgt_batcher, half, val_pools)
            ls, lt = outer_step(
                state, src_batch, val_batch, config, model_cfg,
                source_loss_builder=source_loss_builder, param_groups=groups,
            )
            state.iteration = i + 1
            last_inner = inner_losses[-1] if inner_losses else _NAN
            state.history.append((i, "meta", ls, last_inner, lt))
            _call(phase_hook, "outer", state, {"iteration": i})

    elif strategy == "ssl":
        for i in range(M):
            ls, _ = outer_step(
                state, sample_source(), None, config, model_cfg,
                source_loss_builder=source_loss_builder, param_groups=("phi", "src"),
            )
            state.iteration = i + 1
            state.history.append((i, "ssl", ls, _NAN, _NAN))
            _call(phase_hook, "ssl", state, {"iteration": i})

    elif strategy == "baseline":
        merged = merge_params(phi=state.phi, tgt=state.theta_t)
        adam = AdamState.init(merged)
        for i in range(M):
            batch = sample_labeled_batch(tgt_batcher, half)

            def loss_fn(params):
                p, h = split_params(params, ("phi", "tgt"))
                return supervised_batch_loss(p, h, batch, model_cfg)

            val, grads = value_and_grad(loss_fn, merged)
            adam, merged = adam_step(adam, merged, grads, config.beta)
            state.phi, state.theta_t = split_params(merged, ("phi", "tgt"))
            state.adam = adam
            state.iteration = i + 1
            state.history.append((i, "target", _NAN, val, _NAN))
            _call(phase_hook, "target", state, {"iteration": i})

    elif strategy == "mtl":
        merged = merge_params(phi=state.phi, src=state.theta_s, tgt=state.theta_t)
        adam = AdamState.init(merged)
        for i in range(M):
            src_batch = sample_source()
            tgt_batch = sample_labeled_batch(tgt_batcher, half)
            traced = {"ls": _NAN, "lt": _NAN}

            def loss_fn(params):
                p, s, h = split_params(params, ("phi", "src", "tgt"))
                if source_loss_builder is not None:
                    ls = source_loss_builder(p, s, src_batch, config, model_cfg)
                else:
                    ls = contrastive_batch_loss(p, s, src_batch, config.tau, model_cfg)
                lt = supervised_batch_loss(p, h, tgt_batch, model_cfg)
                traced["ls"], traced["lt"] = ls.item(), lt.item()
                return losses.meta_loss(ls, lt, config.lam)

            _, grads = value_and_grad(loss_fn, merged)
            adam, merged = adam_step(adam, merged, grads, config.beta)
            state.phi, state.theta_s, state.theta_t = split_params(merged, ("phi", "src", "tgt"))
            state.adam = adam
            state.iteration = i + 1
            state.history.append((i, "mtl", traced["ls"], _NAN, traced["lt"]))
            _call(phase_hook, "mtl", state, {"iteration": i})

    elif strategy == "ft":
        warmup = int(math.floor(config.warmup_fraction * M))
        for i in range(warmup):
            ls, _ = outer_step(
                state, sample_source(), None, config, model_cfg,
                source_loss_builder=source_loss_builder, param_groups=("phi", "src"),
            )
            state.iteration = i + 1
            state.history.append((i, "pretrain", ls, _NAN, _NAN))
            _call(phase_hook, "pretrain", state, {"iteration": i})
        groups = ("tgt",) if config.freeze_extractor else ("phi", "tgt")
        merged = merge_params(**{g: (state.phi if g == "phi" else state.theta_t) for g in groups})
        adam = AdamState.init(merged)
        for i in range(warmup, M):
            batch = sample_labeled_batch(tgt_batcher, half)

            def loss_fn(params):
                parts = split_params(params, groups)
                p = parts[groups.index("phi")] if "phi" in groups else state.phi
                h = parts[groups.index("tgt")]
                return supervised_batch_loss(p, h, batch, model_cfg)

            val, grads = value_and_grad(loss_fn, merged)
            adam, merged = adam_step(adam, merged, grads, config.beta)
            parts = split_params(merged, groups)
            if "phi" in groups:
                state.phi = parts[groups.index("phi")]
            state.theta_t = parts[groups.index("tgt")]
            state.adam = adam
            state.iteration = i + 1
            state.history.append((i, "finetune", _NAN, val, _NAN))
            _call(phase_hook, "finetune", state, {"iteration": i})

    return state, serialize_model(state.phi, state.theta_s, state.theta_t)


def format_training_log(history) -> str:
    """One tab-separated line per iteration: iter phase L_S L_T_inner_last L_T_val."""
    lines = []
    for it, phase, ls, lt_inner, lt_val in history:
        lines.append(
            "%d\t%s\t%.17g\t%.17g\t%.17g" % (it, phase, ls, lt_inner, lt_val)
        )
    return "\n".join(lines) + ("\n" if lines else "")
