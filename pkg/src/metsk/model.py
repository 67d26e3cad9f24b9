"""Spatio-temporal graph-convolutional backbone, heads, voting, serialization.

One block applies, per time point, the graph convolution
normalized @ x @ W, then a 1-D temporal convolution per node, then bias
and ReLU.  The feature extractor stacks three blocks; each head is one
more block followed by global mean pooling and a dense layer.  Parameters
live in flat name->Tensor dicts so the optimizers, the tape, hashing and
serialization all share one representation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import BrainGraph
from .tensor import Tensor

MODEL_HEADER = "METSK-MODEL v1"


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (1, 16, 16, 16)
    kernel_t: int = 9
    subseq_len: int = 64
    subseq_count: int = 8

    def __post_init__(self):
        if len(self.channels) != 4:
            raise ValueError(f"channel plan must have 4 entries, got {self.channels}")
        if self.channels[0] != 1:
            raise ValueError("input channel count must be 1")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.kernel_t % 2 != 1 or self.kernel_t < 1:
            raise ValueError(f"temporal kernel width must be odd, got {self.kernel_t}")
        if self.subseq_len < 1 or self.subseq_count < 1:
            raise ValueError("sub-sequence length and count must be >= 1")

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


# ---------------------------------------------------------------------------
# initialization


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, c_in: int, c_out: int, kernel_t: int, prefix: str) -> dict:
    return {
        f"{prefix}.w": Tensor(_uniform(rng, c_in, (c_in, c_out)), requires_grad=True),
        f"{prefix}.tk": Tensor(
            _uniform(rng, c_out * kernel_t, (c_out, c_out, kernel_t)), requires_grad=True
        ),
        f"{prefix}.b": Tensor(np.zeros(c_out), requires_grad=True),
    }


def init_extractor(config: ModelConfig, rng) -> dict:
    params = {}
    for i in range(3):
        params.update(
            _init_block(rng, config.channels[i], config.channels[i + 1], config.kernel_t, f"block{i}")
        )
    return params


def init_head(config: ModelConfig, out_dim: int, rng) -> dict:
    c = config.feature_dim
    params = _init_block(rng, c, c, config.kernel_t, "block")
    params["dense.w"] = Tensor(_uniform(rng, c, (c, out_dim)), requires_grad=True)
    params["dense.b"] = Tensor(np.zeros(out_dim), requires_grad=True)
    return params


def init_params(config: ModelConfig, source_dim: int, rng) -> tuple:
    """Fresh (extractor, source head, target head) parameter dicts."""
    phi = init_extractor(config, rng)
    theta_s = init_head(config, source_dim, rng)
    theta_t = init_head(config, 2, rng)
    return phi, theta_s, theta_t


# ---------------------------------------------------------------------------
# forward passes


def stgcn_block_forward(x: Tensor, graph, w: Tensor, tk: Tensor, b: Tensor) -> Tensor:
    """Graph convolution per time point, temporal convolution, bias, ReLU."""
    normalized = graph.normalized if isinstance(graph, BrainGraph) else graph
    if not isinstance(normalized, Tensor):
        normalized = Tensor(normalized)
    if x.ndim != 3:
        raise ValueError(f"block input must be (P, L, C), got {x.shape}")
    P, L, c_in = x.shape
    if normalized.shape != (P, P):
        raise ValueError(f"graph is {normalized.shape}, expected ({P}, {P})")
    if w.shape[0] != c_in:
        raise ValueError(f"channel mismatch: input has {c_in}, weight expects {w.shape[0]}")
    c_out = w.shape[1]
    h = T.matmul(normalized, x.reshape(P, L * c_in)).reshape(P, L, c_in)
    h = T.matmul(h.reshape(P * L, c_in), w).reshape(P, L, c_out)
    h = T.conv1d_time(h, tk)
    return T.relu(h + b)


def extractor_forward(x: Tensor, graph, phi: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Three stacked blocks; (P, L, 1) -> (P, L, c3), length preserved."""
    h = x
    for i in range(3):
        h = stgcn_block_forward(h, graph, phi[f"block{i}.w"], phi[f"block{i}.tk"], phi[f"block{i}.b"])
    return h


def head_forward(feat: Tensor, graph, head: Mapping[str, Tensor]) -> Tensor:
    """Head block, global mean pool over nodes and time, dense layer."""
    h = stgcn_block_forward(feat, graph, head["block.w"], head["block.tk"], head["block.b"])
    pooled = h.mean(axis=(0, 1))  # (c,)
    c = pooled.shape[0]
    if head["dense.w"].shape[0] != c:
        raise ValueError(
            f"dense layer expects {head['dense.w'].shape[0]} inputs, pooled gives {c}"
        )
    out = T.matmul(pooled.reshape(1, c), head["dense.w"]).reshape(head["dense.w"].shape[1])
    return out + head["dense.b"]


def model_forward(x: Tensor, graph, phi, head, config: ModelConfig) -> Tensor:
    return head_forward(extractor_forward(x, graph, phi, config), graph, head)


def vote(per_subsequence_logits) -> tuple:
    """Softmax each logit pair, average the probabilities, argmax (tie -> 0).

    Accumulation happens in a canonical sort order so the result is
    bitwise identical under any permutation of the input list.
    """
    logits = [np.asarray(l.data if isinstance(l, Tensor) else l, dtype=np.float64) for l in per_subsequence_logits]
    if not logits:
        raise ValueError("vote: empty logit list")
    rows = []
    for l in logits:
        if l.shape != (2,):
            raise ValueError(f"vote expects 2-vectors, got shape {l.shape}")
        shifted = l - l.max()
        e = np.exp(shifted)
        rows.append(e / e.sum())
    stacked = np.stack(rows)
    order = np.lexsort((stacked[:, 1], stacked[:, 0]))
    probs = np.zeros(2)
    for i in order:
        probs += stacked[i]
    probs /= len(rows)
    predicted = 0 if probs[0] >= probs[1] else 1
    return probs, predicted


# ---------------------------------------------------------------------------
# hashing and serialization


def params_digest(params: Mapping[str, Tensor]) -> str:
    """SHA-256 over names and raw float bytes; detects any parameter change."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def serialize_model(phi, theta_s, theta_t) -> str:
    """Text serialization, bitwise round-trip via 17 significant digits."""
    named = {}
    for prefix, params in (("extractor", phi), ("source_head", theta_s), ("target_head", theta_t)):
        for name, t in params.items():
            named[f"{prefix}.{name}"] = t
    lines = [MODEL_HEADER]
    for name in sorted(named):
        arr = named[name].data
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {arr.ndim}{' ' + dims if dims else ''}")
        lines.append(" ".join("%.17g" % v for v in arr.reshape(-1)))
    return "\n".join(lines) + "\n"


def deserialize_model(text: str) -> tuple:
    lines = text.splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise ValueError(f"bad model header, expected {MODEL_HEADER!r}")
    groups = {"extractor": {}, "source_head": {}, "target_head": {}}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = lines[i].split()
        name, ndims = header[0], int(header[1])
        dims = tuple(int(d) for d in header[2 : 2 + ndims])
        if len(dims) != ndims:
            raise ValueError(f"malformed tensor header: {lines[i]!r}")
        values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
        expected = int(np.prod(dims)) if dims else 1
        if values.size != expected:
            raise ValueError(f"value count mismatch for {name}")
        arr = values.reshape(dims)
        prefix, _, rest = name.partition(".")
        if prefix not in groups:
            raise ValueError(f"unknown parameter group {prefix!r}")
        groups[prefix][rest] = Tensor(arr, requires_grad=True)
        i += 2
    return groups["extractor"], groups["source_head"], groups["target_head"]


def save_model(path, phi, theta_s, theta_t):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_model(phi, theta_s, theta_t))


def load_model(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        return deserialize_model(fh.read())


def config_from_params(phi: Mapping[str, Tensor], subseq_len=64, subseq_count=8) -> ModelConfig:
    """Recover the channel plan and kernel width from extractor parameters."""
    channels = [phi["block0.w"].shape[0]]
    for i in range(3):
        channels.append(phi[f"block{i}.w"].shape[1])
    kernel_t = phi["block0.tk"].shape[2]
    return ModelConfig(
        channels=tuple(channels),
        kernel_t=kernel_t,
        subseq_len=subseq_len,
        subseq_count=subseq_count,
    )
