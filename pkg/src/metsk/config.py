"""Line-oriented run configuration: `key = value`, `#` comments.

Later keys override earlier ones, unknown keys are rejected with their
line number, and every key has the documented default so an empty file is
a valid configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # optimization
    alpha: float = 0.01
    beta: float = 0.001
    k: int = 25
    lam: float = 30.0
    tau: float = 30.0
    iterations: int = 40
    batch_size: int = 32
    warmup_fraction: float = 0.5
    meta_train: Optional[int] = None
    meta_val: Optional[int] = None
    embed_dim: int = 32
    seed: int = 0
    strategy: str = "metsk"
    source_task: str = "contrastive"
    ssl_include_target: bool = False
    freeze_extractor: bool = False
    # architecture and sampling
    channels: tuple = (1, 16, 16, 16)
    kernel_t: int = 9
    subseq_len: int = 64
    subseq_count: int = 8
    # data
    source_path: str = ""
    target_path: str = ""
    use_synthetic: bool = False
    P: int = 16
    T: int = 128
    n_source: int = 200
    n_target_per_class: int = 20
    effect_size: float = 1.0
    noise_sd: float = 1.0
    # probing
    pca_components: int = 0  # 0 -> min(N - 1, 16)
    classifier: str = "svm"
    folds: int = 5
    repeats: int = 20
    svm_c: float = 1.0
    svm_iters: int = 2000
    mlp_iters: int = 200
    # domain similarity
    bins: int = 32
    gamma: float = 0.01
    # strategy comparison
    eval_mode: str = "probe"



_KEY_ALIASES = {"lambda": "lam", "m": "iterations"}

_RANGES = {
    "alpha": lambda v: v > 0,
    "beta": lambda v: v > 0,
    "k": lambda v: v >= 0,
    "lam": lambda v: v >= 0,
    "tau": lambda v: v > 0,
    "iterations": lambda v: v >= 1,
    "batch_size": lambda v: v >= 2,
    "warmup_fraction": lambda v: 0.0 <= v < 1.0,
    "embed_dim": lambda v: v >= 1,
    "kernel_t": lambda v: v >= 1 and v % 2 == 1,
    "subseq_len": lambda v: v >= 1,
    "subseq_count": lambda v: v >= 1,
    "P": lambda v: v >= 2,
    "T": lambda v: v >= 8,
    "n_source": lambda v: v >= 1,
    "n_target_per_class": lambda v: v >= 1,
    "effect_size": lambda v: v >= 0,
    "noise_sd": lambda v: v > 0,
    "pca_components": lambda v: v >= 0,
    "folds": lambda v: v >= 2,
    "repeats": lambda v: v >= 1,
    "svm_c": lambda v: v > 0,
    "svm_iters": lambda v: v >= 1,
    "mlp_iters": lambda v: v >= 1,
    "bins": lambda v: v >= 1,
    "gamma": lambda v: v > 0,
    "strategy": lambda v: v in ("metsk", "baseline", "ft", "mtl", "mel", "ssl"),
    "source_task": lambda v: v in ("contrastive", "supervised"),
    "classifier": lambda v: v in ("svm", "mlp"),
    "eval_mode": lambda v: v in ("probe", "vote"),
}


def _parse_value(key: str, raw: str, line_no: int):
    target_type = None
    for f in fields(RunConfig):
        if f.name == key:
            target_type = f.type
            default = f.default
            break
    try:
        if key in ("meta_train", "meta_val"):
            return None if raw.lower() in ("none", "auto") else int(raw)
        if key == "channels":
            parts = tuple(int(p.strip()) for p in raw.split(","))
            return parts
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {line_no}: cannot parse value {raw!r} for key {key!r}") from None


def parse_config(path) -> RunConfig:
    """Parse a config file into a RunConfig, validating keys and ranges."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_config_text(text)


def parse_config_text(text: str) -> RunConfig:
    values = {}
    known = {f.name.lower(): f.name for f in fields(RunConfig)}
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip().lower()
        key = _KEY_ALIASES.get(key, key)
        raw = raw.strip()
        if key not in known:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        key = known[key]
        value = _parse_value(key, raw, line_no)
        check = _RANGES.get(key)
        if check is not None and value is not None and not check(value):
            raise ConfigError(f"line {line_no}: value {raw!r} out of range for {key!r}")
        values[key] = value  # later keys override earlier ones
    cfg = RunConfig(**values)
    if len(cfg.channels) != 4 or cfg.channels[0] != 1 or any(c < 1 for c in cfg.channels):
        raise ConfigError(f"channels must be four positive values starting with 1, got {cfg.channels}")
    return cfg


def meta_config(cfg: RunConfig, seed: Optional[int] = None):
    from .training import MetaConfig

    return MetaConfig(
        alpha=cfg.alpha,
        beta=cfg.beta,
        k=cfg.k,
        lam=cfg.lam,
        tau=cfg.tau,
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        warmup_fraction=cfg.warmup_fraction,
        meta_train=cfg.meta_train,
        meta_val=cfg.meta_val,
        embed_dim=cfg.embed_dim,
        seed=cfg.seed if seed is None else seed,
        source_task=cfg.source_task,
        ssl_include_target=cfg.ssl_include_target,
        freeze_extractor=cfg.freeze_extractor,
    )


def model_config(cfg: RunConfig):
    from .model import ModelConfig

    return ModelConfig(
        channels=cfg.channels,
        kernel_t=cfg.kernel_t,
        subseq_len=cfg.subseq_len,
        subseq_count=cfg.subseq_count,
    )


def synth_spec(cfg: RunConfig):
    from .data import SynthSpec

    return SynthSpec(
        P=cfg.P,
        T=cfg.T,
        n_source=cfg.n_source,
        n_target_per_class=cfg.n_target_per_class,
        effect_size=cfg.effect_size,
        noise_sd=cfg.noise_sd,
    )
