"""Command-line surface.

Subcommands: train, extract, probe, domsim, synth, eval.  Every command
is a pure function of its config, flags, input files and seed; outputs
land under --out and repeated invocations are byte-identical.  Exit
codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, meta_config, model_config, parse_config, synth_spec
from .data import Dataset, generate_synthetic, load_dataset, save_dataset
from .domainsim import similarity_report
from .evaluation import compare_strategies
from .model import config_from_params, load_model
from .probe import (
    default_pca_components,
    evaluate_cv,
    extract_features,
    importance_csv,
    pca_reduce,
    svm_feature_importance,
    train_linear_svm,
)
from .training import format_training_log, train


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_pair(cfg: RunConfig, need_source: bool, need_target: bool):
    if cfg.use_synthetic:
        return generate_synthetic(synth_spec(cfg), cfg.seed)
    source = target = None
    if need_source:
        if not cfg.source_path:
            raise ConfigError("source_path is required for this strategy")
        source = load_dataset(cfg.source_path, "source")
    if need_target:
        if not cfg.target_path:
            raise ConfigError("target_path is required for this strategy")
        target = load_dataset(cfg.target_path, "target")
    return source, target


def cmd_train(args) -> int:
    cfg = _load_config(args)
    strategy = args.strategy or cfg.strategy
    need_source = strategy in ("metsk", "ft", "mtl", "ssl")
    need_target = strategy != "ssl" or cfg.ssl_include_target
    source, target = _load_pair(cfg, need_source, need_target)
    state, model_text = train(strategy, source, target, meta_config(cfg), model_config(cfg))
    out = _out_dir(args)
    (out / "model.txt").write_text(model_text, encoding="utf-8")
    (out / "train_log.tsv").write_text(format_training_log(state.history), encoding="utf-8")
    return 0


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    phi, _, _ = load_model(args.model)
    mdl_cfg = config_from_params(phi, subseq_len=cfg.subseq_len, subseq_count=cfg.subseq_count)
    dataset = load_dataset(args.data, args.domain)
    feats = extract_features(phi, dataset, mdl_cfg, seed=cfg.seed, model_id=str(args.model))
    out = _out_dir(args)
    lines = []
    for sid, row in zip(feats.subject_ids, feats.flat):
        lines.append(sid + "," + ",".join("%.17g" % v for v in row))
    (out / "features.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def _read_features_csv(path) -> tuple:
    ids, rows = [], []
    width = None
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        try:
            row = [float(c) for c in cells[1:]]
        except ValueError:
            raise ValueError(f"{path}:{line_no}: non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ValueError(f"{path}:{line_no}: ragged feature row")
        ids.append(cells[0])
        rows.append(row)
    if not rows:
        raise ValueError(f"{path}: empty feature file")
    return ids, np.array(rows)


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    ids, features = _read_features_csv(args.features)
    dataset = load_dataset(args.data, "target")
    labels_by_id = {r.subject_id: r.label for r in dataset.records}
    missing = [sid for sid in ids if labels_by_id.get(sid) is None]
    if missing:
        raise ValueError(f"no labels for subjects: {missing[:5]}")
    labels = np.array([labels_by_id[sid] for sid in ids])
    n_components = cfg.pca_components or default_pca_components(len(ids))
    reduced, _ = pca_reduce(features, min(n_components, min(features.shape)))
    report = evaluate_cv(
        reduced,
        labels,
        classifier=cfg.classifier,
        folds=cfg.folds,
        repeats=cfg.repeats,
        seed=cfg.seed,
        C=cfg.svm_c,
        iters=cfg.svm_iters if cfg.classifier == "svm" else cfg.mlp_iters,
    )
    out = _out_dir(args)
    _write_json(out / "probe_report.json", report)
    if args.importance:
        if args.model:
            phi, _, _ = load_model(args.model)
            per_roi = phi["block2.w"].shape[1]
        else:
            per_roi = args.per_roi
        if not per_roi or features.shape[1] % per_roi != 0:
            raise ValueError("cannot infer per-node feature count; pass --model or --per-roi")
        layout = np.repeat(np.arange(features.shape[1] // per_roi), per_roi)
        w, _ = train_linear_svm(features, labels, C=cfg.svm_c, iters=cfg.svm_iters, seed=cfg.seed)
        (out / "importance.csv").write_text(
            importance_csv(svm_feature_importance(w, layout)), encoding="utf-8"
        )
    return 0


def cmd_domsim(args) -> int:
    cfg = _load_config(args)
    _, feats_a = _read_features_csv(args.features_a)
    _, feats_b = _read_features_csv(args.features_b)
    report = similarity_report(
        feats_a.mean(axis=0),
        feats_b.mean(axis=0),
        bins=cfg.bins,
        gamma=cfg.gamma,
        include_flow=args.flow,
    )
    out = _out_dir(args)
    _write_json(out / "domsim_report.json", report)
    return 0


def cmd_synth(args) -> int:
    cfg = parse_config(args.spec) if args.spec else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    source, target = generate_synthetic(synth_spec(cfg), cfg.seed)
    out = _out_dir(args)
    save_dataset(source, out / "source")
    save_dataset(target, out / "target")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not strategies or not seeds:
        raise ConfigError("eval needs at least one strategy and one seed")
    kwargs = {}
    if cfg.use_synthetic:
        kwargs["synth_spec"] = synth_spec(cfg)
    else:
        need_source = any(s in ("metsk", "ft", "mtl", "ssl") for s in strategies)
        source, target = _load_pair(cfg, need_source, True)
        kwargs["source"] = source
        kwargs["target"] = target
    report = compare_strategies(
        strategies, seeds, meta_config(cfg), model_config(cfg),
        folds=cfg.folds, eval_mode=cfg.eval_mode, **kwargs
    )
    out = _out_dir(args)
    _write_json(out / "eval_report.json", report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metsk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a strategy; writes model.txt and train_log.tsv")
    common(p)
    p.add_argument("--strategy", choices=["metsk", "baseline", "ft", "mtl", "mel", "ssl"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="zero-shot features; writes features.csv")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", choices=["source", "target"], default="target")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("probe", help="PCA + classifier CV; writes probe_report.json")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--data", required=True, help="dataset directory holding labels.csv")
    p.add_argument("--importance", action="store_true", help="also write importance.csv")
    p.add_argument("--model", help="model file, used to infer the per-node feature count")
    p.add_argument("--per-roi", type=int, default=0, help="features per node for --importance")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("domsim", help="domain similarity between two feature files")
    common(p)
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--flow", action="store_true", help="include the optimal flow matrix")
    p.set_defaults(func=cmd_domsim)

    p = sub.add_parser("synth", help="generate synthetic source/ and target/ datasets")
    p.add_argument("--spec", help="config file with synthesis keys")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="cross-validated strategy comparison table")
    common(p)
    p.add_argument("--strategies", required=True, help="comma-separated strategy names")
    p.add_argument("--seeds", required=True, help="comma-separated integer seeds")
    p.set_defaults(func=cmd_eval)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
