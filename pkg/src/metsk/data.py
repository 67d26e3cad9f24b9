"""Datasets of regional time-series, correlation graphs, and synthetic data.

A subject is a P x T matrix of parcel time-series plus an optional binary
label.  Graphs use absolute Pearson correlations as edge weights with the
symmetric normalization D^{-1/2}(A + I)D^{-1/2}.  The synthetic generator
plants a class difference in the correlation structure of a fixed set of
parcel pairs via a latent-factor model, so the graph pipeline has a real
signal to find at desk scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .seeding import stream
from .tensor import Tensor


class DegenerateRowWarning(UserWarning):
    """A zero-variance parcel produced all-zero correlations."""


# Counters used to verify that a training phase never builds tensors from
# a domain it must not touch (e.g. no target data during warm-up).
_TENSOR_BUILDS = {"source": 0, "target": 0}


def note_tensor_build(domain_tag: str):
    if domain_tag in _TENSOR_BUILDS:
        _TENSOR_BUILDS[domain_tag] += 1


def tensor_build_counts() -> dict:
    return dict(_TENSOR_BUILDS)


def reset_tensor_build_counts():
    for key in _TENSOR_BUILDS:
        _TENSOR_BUILDS[key] = 0


@dataclass
class SubjectRecord:
    subject_id: str
    timeseries: np.ndarray  # (P, T)
    label: Optional[int] = None

    def __post_init__(self):
        ts = np.asarray(self.timeseries, dtype=np.float64)
        if ts.ndim != 2:
            raise ValueError(f"{self.subject_id}: timeseries must be 2-D, got {ts.shape}")
        P, T = ts.shape
        if P < 2 or T < 8:
            raise ValueError(f"{self.subject_id}: needs P >= 2 and T >= 8, got {ts.shape}")
        if not np.all(np.isfinite(ts)):
            raise ValueError(f"{self.subject_id}: non-finite values in timeseries")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"{self.subject_id}: label must be 0 or 1, got {self.label}")
        ts.setflags(write=False)
        self.timeseries = ts

    @property
    def n_parcels(self) -> int:
        return self.timeseries.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.timeseries.shape[1]


@dataclass
class Dataset:
    records: list
    domain_tag: str
    class_names: Optional[list] = None

    def __post_init__(self):
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be 'source' or 'target', got {self.domain_tag!r}")
        if self.records:
            P = self.records[0].n_parcels
            for r in self.records:
                if r.n_parcels != P:
                    raise ValueError(
                        f"inconsistent parcel count: {r.subject_id} has {r.n_parcels}, expected {P}"
                    )
            labeled = [r.label is not None for r in self.records]
            if any(labeled) and not all(labeled):
                raise ValueError("either all records carry labels or none do")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_parcels(self) -> int:
        if not self.records:
            raise ValueError("empty dataset has no parcel count")
        return self.records[0].n_parcels

    @property
    def is_labeled(self) -> bool:
        return bool(self.records) and self.records[0].label is not None

    def labels(self) -> np.ndarray:
        if not self.is_labeled:
            raise ValueError("dataset is unlabeled")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset(
            records=[self.records[i] for i in indices],
            domain_tag=self.domain_tag,
            class_names=self.class_names,
        )


@dataclass
class BrainGraph:
    adjacency: np.ndarray  # (P, P) symmetric, zero diagonal, entries in [0, 1]
    normalized: np.ndarray  # D^{-1/2}(A + I)D^{-1/2}
    degenerate_rows: tuple = ()

    @classmethod
    def from_timeseries(cls, ts: np.ndarray) -> "BrainGraph":
        A, degenerate = pearson_adjacency(ts, return_degenerate=True)
        return cls(adjacency=A, normalized=normalize_adjacency(A), degenerate_rows=degenerate)


@dataclass
class SubSequence:
    subject_index: int
    start: int
    values: Tensor  # (P, L, 1)


@dataclass
class SynthSpec:
    P: int = 16
    T: int = 128
    n_source: int = 200
    n_target_per_class: int = 20
    effect_size: float = 1.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.P < 2 or self.T < 8:
            raise ValueError(f"need P >= 2 and T >= 8, got P={self.P}, T={self.T}")
        if self.n_source < 1 or self.n_target_per_class < 1:
            raise ValueError("subject counts must be >= 1")
        if self.effect_size < 0:
            raise ValueError(f"effect_size must be >= 0, got {self.effect_size}")
        if self.noise_sd <= 0:
            raise ValueError(f"noise_sd must be > 0, got {self.noise_sd}")


# ---------------------------------------------------------------------------
# graph construction


def pearson_adjacency(ts: np.ndarray, return_degenerate: bool = False):
    """Absolute Pearson correlations as edge weights, zero diagonal.

    Zero-variance rows correlate 0 with everything; they are reported via
    DegenerateRowWarning rather than rejected, so flat parcels degrade
    gracefully instead of killing the pipeline.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.ndim != 2:
        raise ValueError(f"expected P x T matrix, got shape {ts.shape}")
    P, T = ts.shape
    if T < 2:
        raise ValueError(f"need at least 2 time points for correlation, got {T}")
    centered = ts - ts.mean(axis=1, keepdims=True)
    sd = np.sqrt((centered * centered).sum(axis=1))
    degenerate = tuple(int(i) for i in np.nonzero(sd == 0.0)[0])
    if degenerate:
        warnings.warn(
            f"zero-variance rows {list(degenerate)} produce zero correlations",
            DegenerateRowWarning,
        )
    safe_sd = np.where(sd == 0.0, 1.0, sd)
    unit = centered / safe_sd[:, None]
    corr = unit @ unit.T
    A = np.abs(np.clip(corr, -1.0, 1.0))
    A[np.arange(P), np.arange(P)] = 0.0
    if degenerate:
        idx = list(degenerate)
        A[idx, :] = 0.0
        A[:, idx] = 0.0
    A = (A + A.T) / 2.0
    if return_degenerate:
        return A, degenerate
    return A


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """Symmetric normalization D^{-1/2}(A + I)D^{-1/2}, D_ii = sum_j A_ij + 1."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    if np.any(A < 0.0):
        raise ValueError("adjacency has negative entries")
    if np.max(np.abs(A - A.T)) > 1e-9:
        raise ValueError("adjacency is not symmetric within 1e-9")
    if np.max(np.abs(np.diag(A))) > 0.0:
        raise ValueError("adjacency diagonal must be zero")
    d = A.sum(axis=1) + 1.0
    inv_sqrt = 1.0 / np.sqrt(d)
    P = A.shape[0]
    return inv_sqrt[:, None] * (A + np.eye(P)) * inv_sqrt[None, :]


# ---------------------------------------------------------------------------
# sub-sequence sampling


def sample_subsequences(
    record: SubjectRecord,
    L: int,
    R: int,
    rng: np.random.Generator,
    subject_index: int = 0,
) -> list:
    """R sub-sequences of length L with starts uniform on [0, T - L]."""
    T = record.n_timepoints
    if L < 1 or L > T:
        raise ValueError(f"sub-sequence length {L} outside [1, {T}]")
    if R < 1:
        raise ValueError(f"need at least one sample, got R={R}")
    starts = rng.integers(0, T - L + 1, size=R)
    out = []
    for s in starts:
        s = int(s)
        values = Tensor(record.timeseries[:, s : s + L, None])
        out.append(SubSequence(subject_index=subject_index, start=s, values=values))
    return out


# ---------------------------------------------------------------------------
# synthetic data

_SOURCE_ATTR_EFFECT = 1.5  # strength of the planted binary attribute in source data
_TARGET_MIXING_SHIFT = 0.35  # fixed source-to-target domain gap in factor loadings
_SOURCE_PAIR_VARIABILITY = 1.0  # class-free per-subject spread along the target pairs
_PAIR_FACTOR_DAMPING = 0.3  # planted-pair parcels load weakly on shared factors
_N_FACTORS = 4


def _planted_pairs(P: int) -> tuple:
    """Fixed disjoint pair sets: target-class pairs then source-attribute pairs."""
    n_pairs = max(1, P // 4)
    target_pairs = [(2 * j, 2 * j + 1) for j in range(n_pairs)]
    offset = 2 * n_pairs
    source_pairs = [
        (offset + 2 * j, offset + 2 * j + 1)
        for j in range(n_pairs)
        if offset + 2 * j + 1 < P
    ]
    if not source_pairs:
        source_pairs = target_pairs  # P too small to keep them disjoint
    return target_pairs, source_pairs


def _apply_pair_effect(ts, mixing, pairs, pair_effect, rng):
    for p, q in pairs:
        # co-load along the pair's existing correlation sign so the
        # absolute edge weight strictly grows with the effect
        sign = 1.0 if mixing[p] @ mixing[q] >= 0 else -1.0
        shared = rng.normal(0.0, 1.0, size=ts.shape[1])
        ts[p] += pair_effect * shared
        ts[q] += sign * pair_effect * shared


def _synth_subject(spec, mixing, pairs, pair_effect, rng, extra=None) -> np.ndarray:
    z = rng.normal(0.0, 1.0, size=(_N_FACTORS, spec.T))
    ts = mixing @ z + spec.noise_sd * rng.normal(0.0, 1.0, size=(spec.P, spec.T))
    if pair_effect > 0.0:
        _apply_pair_effect(ts, mixing, pairs, pair_effect, rng)
    if extra is not None:
        extra_pairs, extra_effect = extra
        if extra_effect > 0.0:
            _apply_pair_effect(ts, mixing, extra_pairs, extra_effect, rng)
    return ts


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple:
    """Deterministic (source, target) datasets with a planted class signal.

    Subjects within a domain share one latent-factor mixing structure;
    the target domain's mixing is a fixed perturbation of the source's,
    giving the two domains a genuine representation gap.  Target class 1
    additionally co-loads a per-pair factor on a fixed set of parcel pairs
    scaled by effect_size; source subjects carry a hidden binary attribute
    (the parity of their index) acting on a disjoint pair set, which
    attach_source_labels can expose for a supervised source task.
    """
    rng_struct = stream(seed, "synthetic-structure")
    mixing = rng_struct.normal(0.0, 0.6, size=(spec.P, _N_FACTORS))
    target_mixing = mixing + _TARGET_MIXING_SHIFT * rng_struct.normal(
        0.0, 1.0, size=(spec.P, _N_FACTORS)
    )
    target_pairs, source_pairs = _planted_pairs(spec.P)
    # keep planted-pair correlations governed by the planted effects rather
    # than the luck of the factor draw, so task difficulty is stable per seed
    pair_parcels = sorted({p for pair in target_pairs for p in pair})
    mixing[pair_parcels] *= _PAIR_FACTOR_DAMPING
    target_mixing[pair_parcels] *= _PAIR_FACTOR_DAMPING

    source_records = []
    for i in range(spec.n_source):
        rng = stream(seed, "synthetic-source", i)
        attr = i % 2
        # healthy subjects spread continuously along the axis the target
        # classes separate on, so subject-level structure is learnable
        spread = float(rng.uniform(0.0, _SOURCE_PAIR_VARIABILITY))
        ts = _synth_subject(
            spec, mixing, source_pairs, _SOURCE_ATTR_EFFECT if attr else 0.0, rng,
            extra=(target_pairs, spread),
        )
        source_records.append(SubjectRecord(f"src{i:04d}", ts, label=None))

    target_records = []
    for i in range(2 * spec.n_target_per_class):
        rng = stream(seed, "synthetic-target", i)
        label = i % 2
        ts = _synth_subject(
            spec, target_mixing, target_pairs, spec.effect_size if label else 0.0, rng
        )
        target_records.append(SubjectRecord(f"tgt{i:04d}", ts, label=label))

    source = Dataset(records=source_records, domain_tag="source")
    target = Dataset(records=target_records, domain_tag="target", class_names=["c0", "c1"])
    return source, target


def attach_source_labels(source: Dataset) -> Dataset:
    """Expose the planted source attribute (index parity) as labels.

    Only meaningful for datasets produced by generate_synthetic, where
    subject src{i} was generated with attribute i % 2.
    """
    records = []
    for r in source.records:
        if not r.subject_id.startswith("src"):
            raise ValueError(f"{r.subject_id}: not a synthetic source subject")
        idx = int(r.subject_id[3:])
        records.append(SubjectRecord(r.subject_id, r.timeseries, label=idx % 2))
    return Dataset(records=records, domain_tag="source", class_names=["attr0", "attr1"])


def target_pair_indices(P: int) -> list:
    """The fixed parcel pairs carrying the planted target-class signal."""
    return _planted_pairs(P)[0]


# ---------------------------------------------------------------------------
# directory ingestion / export


def load_dataset(path, domain_tag: str) -> Dataset:
    """Load `<dir>/labels.csv` (optional) plus `<dir>/ts/<subject>.csv` files.

    Each ts file holds P lines of T comma-separated floats, no header.
    Records come back sorted by subject id; every malformed input is
    rejected with the offending file and line.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ts_dir = root / "ts"
    if not ts_dir.is_dir():
        raise FileNotFoundError(f"missing time-series directory: {ts_dir}")

    labels = None
    labels_file = root / "labels.csv"
    if labels_file.exists():
        labels = {}
        lines = labels_file.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != "subject_id,label":
            raise ValueError(f"{labels_file}:1: expected header 'subject_id,label'")
        for ln, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{labels_file}:{ln}: expected 'subject_id,label'")
            sid, raw = parts[0].strip(), parts[1].strip()
            if raw not in ("0", "1"):
                raise ValueError(f"{labels_file}:{ln}: label must be 0 or 1, got {raw!r}")
            labels[sid] = int(raw)

    records = []
    for ts_file in sorted(ts_dir.glob("*.csv")):
        sid = ts_file.stem
        rows = []
        width = None
        for ln, line in enumerate(ts_file.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            cells = line.split(",")
            try:
                row = [float(c) for c in cells]
            except ValueError:
                raise ValueError(f"{ts_file}:{ln}: non-numeric cell") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ValueError(f"{ts_file}:{ln}: ragged row, expected {width} values")
            rows.append(row)
        if not rows:
            raise ValueError(f"{ts_file}: empty time-series file")
        label = labels.get(sid) if labels is not None else None
        if labels is not None and sid not in labels:
            raise ValueError(f"{labels_file}: no label for subject {sid}")
        try:
            records.append(SubjectRecord(sid, np.array(rows), label=label))
        except ValueError as err:
            raise ValueError(f"{ts_file}: {err}") from None
    if not records:
        raise ValueError(f"no subject files in {ts_dir}")
    return Dataset(records=records, domain_tag=domain_tag)


def save_dataset(dataset: Dataset, path):
    """Write a dataset in the directory layout load_dataset reads."""
    root = Path(path)
    ts_dir = root / "ts"
    ts_dir.mkdir(parents=True, exist_ok=True)
    for r in dataset.records:
        lines = [",".join("%.17g" % v for v in row) for row in r.timeseries]
        (ts_dir / f"{r.subject_id}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if dataset.is_labeled:
        lines = ["subject_id,label"]
        lines.extend(f"{r.subject_id},{r.label}" for r in dataset.records)
        (root / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
