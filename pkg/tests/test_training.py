import numpy as np
import pytest

from metsk import data as data_mod
from metsk.data import Dataset, SubjectRecord, SynthSpec, attach_source_labels, generate_synthetic
from metsk.model import ModelConfig, init_params, params_digest
from metsk.seeding import stream
from metsk.training import (
    Batcher,
    MetaConfig,
    TrainState,
    format_training_log,
    inner_loop,
    merge_params,
    outer_step,
    sample_contrastive_batch,
    sample_labeled_batch,
    split_meta,
    split_meta_indices,
    split_params,
    supervised_source_task,
    train,
)
from metsk.tensor import Tensor, value_and_grad


def _labeled_target(n_per_class=5, P=6, T=32, seed=0):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(2 * n_per_class):
        records.append(SubjectRecord(f"t{i:03d}", rng.normal(size=(P, T)), label=i % 2))
    return Dataset(records=records, domain_tag="target")


# ---------------------------------------------------------------------------
# split_meta


def test_split_forces_stratified_validation():
    target = _labeled_target(5)
    tr, val = split_meta(target, 8, 2, stream(0, "s"))
    assert len(tr) == 8 and len(val) == 2
    assert sorted(val.labels().tolist()) == [0, 1]


def test_split_wrong_total_rejected():
    with pytest.raises(ValueError, match="equal"):
        split_meta(_labeled_target(5), 8, 3, stream(0, "s"))


def test_split_disjoint_exhaustive_and_seeded():
    target = _labeled_target(6)
    ids = lambda ds: {r.subject_id for r in ds.records}
    tr1, val1 = split_meta(target, 9, 3, stream(4, "s"))
    tr2, val2 = split_meta(target, 9, 3, stream(4, "s"))
    assert ids(tr1) == ids(tr2) and ids(val1) == ids(val2)
    assert ids(tr1) & ids(val1) == set()
    assert ids(tr1) | ids(val1) == ids(target)
    distinct = {
        tuple(sorted(ids(split_meta(target, 9, 3, stream(seed, "s"))[0])))
        for seed in range(20)
    }
    assert len(distinct) > 1


def test_split_class_starvation_rejected():
    rng = np.random.default_rng(1)
    records = [SubjectRecord("a", rng.normal(size=(4, 16)), label=0)]
    records += [SubjectRecord(f"b{i}", rng.normal(size=(4, 16)), label=1) for i in range(5)]
    with pytest.raises(ValueError, match="starvation"):
        split_meta(Dataset(records=records, domain_tag="target"), 4, 2, stream(0, "s"))


# ---------------------------------------------------------------------------
# inner loop


def _setup_state(model_cfg, embed=4, seed=0):
    phi, ths, tht = init_params(model_cfg, embed, stream(seed, "init"))
    return TrainState(phi=phi, theta_s=ths, theta_t=tht, adam=None)


def test_inner_loop_k0_returns_head_unmodified(toy_model_cfg):
    target = _labeled_target(4)
    state = _setup_state(toy_model_cfg)
    cfg = MetaConfig(k=0, batch_size=4, iterations=1, embed_dim=4)
    batcher = Batcher.for_dataset(target, toy_model_cfg, stream(0, "b"))
    theta, losses = inner_loop(state, list(range(8)), batcher, cfg, toy_model_cfg)
    assert theta is state.theta_t
    assert losses == []


def test_inner_loop_touches_only_target_head(toy_model_cfg):
    target = _labeled_target(4)
    state = _setup_state(toy_model_cfg)
    cfg = MetaConfig(k=3, batch_size=4, iterations=1, embed_dim=4)
    batcher = Batcher.for_dataset(target, toy_model_cfg, stream(0, "b"))
    d_phi, d_src, d_tgt = (
        params_digest(state.phi),
        params_digest(state.theta_s),
        params_digest(state.theta_t),
    )
    theta, losses = inner_loop(state, list(range(8)), batcher, cfg, toy_model_cfg)
    assert params_digest(state.phi) == d_phi
    assert params_digest(state.theta_s) == d_src
    assert params_digest(state.theta_t) == d_tgt  # state untouched; new head returned
    assert params_digest(theta) != d_tgt
    assert len(losses) == 3


def test_inner_loop_descends_on_separable_toy(toy_model_cfg):
    # strong planted signal makes the inner problem easy for a frozen phi
    spec = SynthSpec(P=8, T=48, n_source=2, n_target_per_class=4, effect_size=2.5)
    _, target = generate_synthetic(spec, seed=5)
    state = _setup_state(toy_model_cfg, seed=3)
    cfg = MetaConfig(k=25, alpha=0.05, batch_size=8, iterations=1, embed_dim=4)
    batcher = Batcher.for_dataset(target, toy_model_cfg, stream(1, "b"))
    _, losses = inner_loop(state, list(range(8)), batcher, cfg, toy_model_cfg)
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# outer step


def test_outer_step_lambda_zero_matches_ssl_gradient(toy_model_cfg):
    spec = SynthSpec(P=6, T=40, n_source=6, n_target_per_class=3)
    source, target = generate_synthetic(spec, seed=2)
    model_cfg = toy_model_cfg
    cfg = MetaConfig(lam=0.0, batch_size=4, iterations=1, embed_dim=4, tau=2.0)
    state = _setup_state(model_cfg, seed=1)
    batcher = Batcher.for_dataset(source, model_cfg, stream(3, "src"))
    batch = sample_contrastive_batch(batcher, 4)

    from metsk.training import contrastive_batch_loss

    merged = merge_params(phi=state.phi, src=state.theta_s)

    def combined(params):
        p, s = split_params(params, ("phi", "src"))
        return contrastive_batch_loss(p, s, batch, cfg.tau, model_cfg)

    _, g_ssl = value_and_grad(combined, merged)

    # outer_step with lam=0 must produce an identical update (same batch)
    state2 = _setup_state(model_cfg, seed=1)
    ls, lt = outer_step(state2, batch, None, cfg, model_cfg)
    assert np.isnan(lt)
    # compare the resulting parameters against a manual Adam step
    from metsk.optim import AdamState, adam_step

    adam = AdamState.init(merged)
    _, expected = adam_step(adam, merged, g_ssl, cfg.beta)
    exp_phi, exp_src = split_params(expected, ("phi", "src"))
    assert params_digest(exp_phi) == params_digest(state2.phi)
    assert params_digest(exp_src) == params_digest(state2.theta_s)


def test_outer_step_keeps_target_head_bitwise(toy_model_cfg):
    spec = SynthSpec(P=6, T=40, n_source=6, n_target_per_class=3)
    source, target = generate_synthetic(spec, seed=7)
    cfg = MetaConfig(lam=5.0, batch_size=4, iterations=1, embed_dim=4)
    state = _setup_state(toy_model_cfg, seed=2)
    src_b = Batcher.for_dataset(source, toy_model_cfg, stream(1, "s"))
    tgt_b = Batcher.for_dataset(target, toy_model_cfg, stream(2, "t"))
    d_tgt = params_digest(state.theta_t)
    src_batch = sample_contrastive_batch(src_b, 4)
    val_batch = sample_labeled_batch(tgt_b, 2)
    ls, lt = outer_step(state, src_batch, val_batch, cfg, toy_model_cfg)
    assert params_digest(state.theta_t) == d_tgt
    assert np.isfinite(ls) and np.isfinite(lt)


def test_outer_step_gradient_passes_finite_difference(toy_model_cfg):
    from conftest import kink_free_fd

    from metsk.losses import meta_loss
    from metsk.training import contrastive_batch_loss, supervised_batch_loss

    spec = SynthSpec(P=4, T=32, n_source=4, n_target_per_class=2)

    def make(seed):
        source, target = generate_synthetic(spec, seed=seed)
        cfg = MetaConfig(lam=3.0, batch_size=2, iterations=1, embed_dim=3, tau=2.0)
        state = _setup_state(toy_model_cfg, embed=3, seed=seed)
        src_b = Batcher.for_dataset(source, toy_model_cfg, stream(seed, "s"))
        tgt_b = Batcher.for_dataset(target, toy_model_cfg, stream(seed, "t"))
        src_batch = sample_contrastive_batch(src_b, 2)
        val_batch = sample_labeled_batch(tgt_b, 1)
        theta_const = {k: v.detached() for k, v in state.theta_t.items()}
        merged = merge_params(phi=state.phi, src=state.theta_s)

        def loss(params):
            p, s = split_params(params, ("phi", "src"))
            ls = contrastive_batch_loss(p, s, src_batch, cfg.tau, toy_model_cfg)
            lt = supervised_batch_loss(p, theta_const, val_batch, toy_model_cfg)
            return meta_loss(ls, lt, cfg.lam)

        return loss, merged

    _, err = kink_free_fd(make)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# full strategies


def test_metsk_smoke_two_iterations(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=2, k=1, batch_size=4, embed_dim=5, seed=1)
    events = []
    state, text = train(
        "metsk", source, target, cfg, toy_model_cfg,
        phase_hook=lambda e, s, i: events.append(e),
    )
    phases = [row[1] for row in state.history]
    assert phases == ["warmup", "meta"]
    assert events == ["warmup", "step1", "inner", "outer"]
    assert text.startswith("METSK-MODEL v1")


def test_baseline_ignores_source(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=3, batch_size=4, embed_dim=5, seed=9)
    _, with_source = train("baseline", source, target, cfg, toy_model_cfg)
    _, without_source = train("baseline", None, target, cfg, toy_model_cfg)
    assert with_source == without_source


def test_ssl_deterministic_bitwise(tiny_data, toy_model_cfg):
    source, _ = tiny_data
    cfg = MetaConfig(iterations=3, batch_size=4, embed_dim=5, seed=4)
    _, m1 = train("ssl", source, None, cfg, toy_model_cfg)
    _, m2 = train("ssl", source, None, cfg, toy_model_cfg)
    assert m1 == m2


def test_metsk_lambda0_k0_matches_ssl_trajectory_bitwise(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=4, k=0, lam=0.0, batch_size=4, embed_dim=5, seed=8)
    state_m, _ = train("metsk", source, target, cfg, toy_model_cfg)
    state_s, _ = train("ssl", source, None, cfg, toy_model_cfg)
    assert params_digest(state_m.phi) == params_digest(state_s.phi)
    assert params_digest(state_m.theta_s) == params_digest(state_s.theta_s)


def test_warmup_never_builds_target_tensors(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=4, k=1, batch_size=4, embed_dim=5, seed=2, warmup_fraction=0.5)
    counts_after_warmup = {}

    def hook(event, state, info):
        if event == "warmup":
            counts_after_warmup.update(data_mod.tensor_build_counts())

    data_mod.reset_tensor_build_counts()
    train("metsk", source, target, cfg, toy_model_cfg, phase_hook=hook)
    assert counts_after_warmup["target"] == 0
    assert counts_after_warmup["source"] > 0
    assert data_mod.tensor_build_counts()["target"] > 0  # meta phase does touch target


def test_bilevel_isolation_over_ten_iterations(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=10, k=1, batch_size=4, embed_dim=5, seed=3, warmup_fraction=0.0)
    snapshots = {}
    violations = []

    def hook(event, state, info):
        digests = (
            params_digest(state.phi),
            params_digest(state.theta_s),
            params_digest(state.theta_t),
        )
        if event == "inner":
            if snapshots["step1"][0] != digests[0] or snapshots["step1"][1] != digests[1]:
                violations.append(("inner touched phi or theta_s", info))
            if snapshots["step1"][2] == digests[2]:
                violations.append(("inner did not adapt theta_t", info))
        if event == "outer":
            if snapshots["inner"][2] != digests[2]:
                violations.append(("outer touched theta_t", info))
            if snapshots["inner"][0] == digests[0]:
                violations.append(("outer did not update phi", info))
        snapshots[event] = digests
        if event == "step1":
            tr, val = set(info["train_indices"]), set(info["val_indices"])
            if tr & val or (tr | val) != set(range(len(target))):
                violations.append(("split not disjoint/exhaustive", info))

    train("metsk", source, target, cfg, toy_model_cfg, phase_hook=hook)
    assert violations == []


def test_theta_t_reinitialized_each_outer_iteration(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=4, k=0, batch_size=4, embed_dim=5, seed=6, warmup_fraction=0.0)
    step1_digests = []

    def hook(event, state, info):
        if event == "step1":
            step1_digests.append(params_digest(state.theta_t))

    train("metsk", source, target, cfg, toy_model_cfg, phase_hook=hook)
    assert len(step1_digests) == 4
    assert len(set(step1_digests)) == 4  # fresh initialization every iteration


def test_missing_dataset_rejected(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=1, batch_size=4, embed_dim=5)
    with pytest.raises(ValueError, match="source"):
        train("metsk", None, target, cfg, toy_model_cfg)
    with pytest.raises(ValueError, match="target"):
        train("baseline", source, None, cfg, toy_model_cfg)
    with pytest.raises(ValueError, match="strategy"):
        train("nope", source, target, cfg, toy_model_cfg)


def test_mel_runs_without_source(tiny_data, toy_model_cfg):
    _, target = tiny_data
    cfg = MetaConfig(iterations=2, k=1, batch_size=4, embed_dim=5, seed=12)
    state, _ = train("mel", None, target, cfg, toy_model_cfg)
    assert [row[1] for row in state.history] == ["meta", "meta"]
    assert all(np.isnan(row[2]) for row in state.history)  # no source loss


def test_ft_freeze_flag_keeps_extractor(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(
        iterations=4, batch_size=4, embed_dim=5, seed=13, warmup_fraction=0.5,
        freeze_extractor=True,
    )
    phi_digest_after_pretrain = []

    def hook(event, state, info):
        if event == "pretrain":
            phi_digest_after_pretrain.append(params_digest(state.phi))

    state, _ = train("ft", source, target, cfg, toy_model_cfg, phase_hook=hook)
    assert params_digest(state.phi) == phi_digest_after_pretrain[-1]


# ---------------------------------------------------------------------------
# supervised source task


def test_supervised_source_task_requires_labels(tiny_data):
    source, _ = tiny_data
    with pytest.raises(ValueError, match="label"):
        supervised_source_task(source)


def test_supervised_source_head_is_two_logits(tiny_data, toy_model_cfg):
    source, target = tiny_data
    labeled = attach_source_labels(source)
    cfg = MetaConfig(iterations=2, k=1, batch_size=4, embed_dim=5, seed=1, source_task="supervised")
    state, _ = train("ssl", labeled, None, cfg, toy_model_cfg)
    assert state.theta_s["dense.w"].shape[1] == 2


def test_supervised_source_training_loss_decreases(toy_model_cfg):
    spec = SynthSpec(P=8, T=64, n_source=20, n_target_per_class=2, effect_size=1.0)
    source, _ = generate_synthetic(spec, seed=21)
    labeled = attach_source_labels(source)
    cfg = MetaConfig(
        iterations=50, batch_size=8, embed_dim=5, seed=3, source_task="supervised", beta=0.01
    )
    state, _ = train("ssl", labeled, None, cfg, toy_model_cfg)
    first = np.mean([row[2] for row in state.history[:5]])
    last = np.mean([row[2] for row in state.history[-5:]])
    assert last < first


def test_training_log_format(tiny_data, toy_model_cfg):
    source, target = tiny_data
    cfg = MetaConfig(iterations=2, k=1, batch_size=4, embed_dim=5, seed=1)
    state, _ = train("metsk", source, target, cfg, toy_model_cfg)
    text = format_training_log(state.history)
    lines = text.strip().split("\n")
    assert len(lines) == 2
    first = lines[0].split("\t")
    assert first[0] == "0" and first[1] == "warmup"
    assert len(first) == 5
    float(first[2])  # parses
