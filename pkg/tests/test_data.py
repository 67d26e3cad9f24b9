import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metsk.data import (
    BrainGraph,
    Dataset,
    DegenerateRowWarning,
    SubjectRecord,
    SynthSpec,
    attach_source_labels,
    generate_synthetic,
    load_dataset,
    normalize_adjacency,
    pearson_adjacency,
    sample_subsequences,
    save_dataset,
    target_pair_indices,
)
from metsk.seeding import stream


# ---------------------------------------------------------------------------
# pearson adjacency


def test_perfect_correlation():
    ts = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    A = pearson_adjacency(ts)
    assert A[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert A[0, 0] == 0.0


def test_anticorrelation_absolute_value():
    ts = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    assert pearson_adjacency(ts)[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_rows_zero_correlation():
    ts = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]])
    assert pearson_adjacency(ts)[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_zero_variance_row_flagged():
    ts = np.array([[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]])
    with pytest.warns(DegenerateRowWarning):
        A, degenerate = pearson_adjacency(ts, return_degenerate=True)
    assert degenerate == (0,)
    assert np.all(A[0] == 0.0)


def test_adjacency_is_symmetric_zero_diagonal_unit_range():
    rng = np.random.default_rng(1)
    ts = rng.normal(size=(6, 40))
    A = pearson_adjacency(ts)
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 0.0)
    assert np.all((A >= 0.0) & (A <= 1.0))


def test_too_few_timepoints_rejected():
    with pytest.raises(ValueError):
        pearson_adjacency(np.array([[1.0], [2.0]]))


@settings(max_examples=25, deadline=None)
@given(
    scale=st.floats(min_value=0.01, max_value=100.0),
    shift=st.floats(min_value=-50.0, max_value=50.0),
    row=st.integers(min_value=0, max_value=3),
)
def test_affine_transform_invariance(scale, shift, row):
    rng = np.random.default_rng(7)
    ts = rng.normal(size=(4, 30))
    base = pearson_adjacency(ts)
    ts2 = ts.copy()
    ts2[row] = scale * ts2[row] + shift
    assert np.max(np.abs(pearson_adjacency(ts2) - base)) < 1e-9


# ---------------------------------------------------------------------------
# normalization


def test_zero_adjacency_normalizes_to_identity_exactly():
    assert np.array_equal(normalize_adjacency(np.zeros((3, 3))), np.eye(3))


def test_two_node_full_graph():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(normalize_adjacency(A), 0.5, atol=1e-15)


def test_normalized_spectral_radius_bounded():
    rng = np.random.default_rng(5)
    raw = rng.uniform(0, 1, size=(5, 5))
    A = (raw + raw.T) / 2
    np.fill_diagonal(A, 0.0)
    N = normalize_adjacency(A)
    assert np.max(np.abs(N - N.T)) < 1e-12
    # power-iteration oracle for the dominant eigenvalue
    v = rng.normal(size=5)
    for _ in range(500):
        v = N @ v
        v /= np.linalg.norm(v)
    radius = abs(v @ (N @ v))
    assert radius <= 1.0 + 1e-9


def test_normalize_rejects_bad_input():
    with pytest.raises(ValueError, match="negative"):
        normalize_adjacency(np.array([[0.0, -0.1], [-0.1, 0.0]]))
    with pytest.raises(ValueError, match="symmetric"):
        normalize_adjacency(np.array([[0.0, 0.5], [0.2, 0.0]]))
    with pytest.raises(ValueError, match="diagonal"):
        normalize_adjacency(np.array([[0.5, 0.0], [0.0, 0.0]]))


def test_brain_graph_invariants():
    rng = np.random.default_rng(2)
    g = BrainGraph.from_timeseries(rng.normal(size=(5, 40)))
    d = g.adjacency.sum(axis=1) + 1.0
    assert np.all(d > 0.0)
    assert np.max(np.abs(g.normalized - g.normalized.T)) < 1e-12


# ---------------------------------------------------------------------------
# sub-sequences


def _record(P=4, T=20, seed=0):
    rng = np.random.default_rng(seed)
    return SubjectRecord("s0", rng.normal(size=(P, T)))


def test_full_length_subsequence_forced_start():
    rec = _record(T=100)
    subs = sample_subsequences(rec, L=100, R=1, rng=stream(0, "t"))
    assert subs[0].start == 0
    assert subs[0].values.shape == (4, 100, 1)


def test_same_seed_same_starts():
    rec = _record()
    s1 = [s.start for s in sample_subsequences(rec, 8, 5, stream(7, "x"))]
    s2 = [s.start for s in sample_subsequences(rec, 8, 5, stream(7, "x"))]
    assert s1 == s2


def test_seeded_starts_regression_fixture():
    rec = _record(T=10)
    starts = [s.start for s in sample_subsequences(rec, 4, 3, stream(7, "fixture"))]
    assert all(0 <= s <= 6 for s in starts)
    # pinned from the first run of the seeded generator
    assert starts == [6, 0, 1]


def test_subsequence_values_match_source_bitwise():
    rec = _record()
    for sub in sample_subsequences(rec, 6, 4, stream(3, "y")):
        expected = rec.timeseries[:, sub.start : sub.start + 6, None]
        assert sub.values.data.tobytes() == np.ascontiguousarray(expected).tobytes()


def test_too_long_subsequence_rejected():
    with pytest.raises(ValueError):
        sample_subsequences(_record(T=20), 21, 1, stream(0, "z"))


# ---------------------------------------------------------------------------
# synthetic generation


def test_synthetic_deterministic_bitwise():
    spec = SynthSpec(P=6, T=32, n_source=4, n_target_per_class=3, effect_size=1.0)
    s1, t1 = generate_synthetic(spec, seed=9)
    s2, t2 = generate_synthetic(spec, seed=9)
    for a, b in zip(s1.records + t1.records, s2.records + t2.records):
        assert a.subject_id == b.subject_id
        assert a.timeseries.tobytes() == b.timeseries.tobytes()
        assert a.label == b.label


def test_synthetic_shapes_and_labels():
    spec = SynthSpec(P=6, T=32, n_source=5, n_target_per_class=4)
    source, target = generate_synthetic(spec, seed=1)
    assert len(source) == 5 and len(target) == 8
    assert not source.is_labeled
    assert sorted(target.labels().tolist()) == [0] * 4 + [1] * 4
    assert source.n_parcels == target.n_parcels == 6


def test_large_effect_separates_planted_pair_correlations():
    spec = SynthSpec(P=16, T=128, n_source=2, n_target_per_class=15, effect_size=2.0)
    _, target = generate_synthetic(spec, seed=3)
    pairs = target_pair_indices(16)
    gap = []
    for label in (0, 1):
        vals = []
        for r in target.records:
            if r.label != label:
                continue
            A = pearson_adjacency(r.timeseries)
            vals.append(np.mean([A[p, q] for p, q in pairs]))
        gap.append(np.mean(vals))
    assert gap[1] - gap[0] > 0.2


def test_attach_source_labels_parity():
    spec = SynthSpec(P=6, T=32, n_source=6, n_target_per_class=2)
    source, _ = generate_synthetic(spec, seed=2)
    labeled = attach_source_labels(source)
    assert labeled.labels().tolist() == [0, 1, 0, 1, 0, 1]
    # original timeseries untouched
    for a, b in zip(source.records, labeled.records):
        assert a.timeseries.tobytes() == b.timeseries.tobytes()


# ---------------------------------------------------------------------------
# dataset IO


def test_save_load_round_trip(tmp_path, tiny_data):
    _, target = tiny_data
    save_dataset(target, tmp_path / "d")
    loaded = load_dataset(tmp_path / "d", "target")
    assert [r.subject_id for r in loaded.records] == [r.subject_id for r in target.records]
    for a, b in zip(loaded.records, target.records):
        assert a.timeseries.tobytes() == b.timeseries.tobytes()
        assert a.label == b.label


def test_load_unlabeled_directory(tmp_path):
    d = tmp_path / "d" / "ts"
    d.mkdir(parents=True)
    for sid in ("a", "b", "c"):
        d.joinpath(f"{sid}.csv").write_text("1,2,3,4,5,6,7,8\n" * 3, encoding="utf-8")
    ds = load_dataset(tmp_path / "d", "source")
    assert len(ds) == 3
    assert not ds.is_labeled


def test_ragged_rows_error_names_file(tmp_path):
    d = tmp_path / "d" / "ts"
    d.mkdir(parents=True)
    d.joinpath("bad.csv").write_text("1,2,3\n1,2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.csv"):
        load_dataset(tmp_path / "d", "source")


def test_non_numeric_cell_error(tmp_path):
    d = tmp_path / "d" / "ts"
    d.mkdir(parents=True)
    d.joinpath("bad.csv").write_text("1,2,x\n1,2,3\n", encoding="utf-8")
    with pytest.raises(ValueError, match="bad.csv:1"):
        load_dataset(tmp_path / "d", "source")


def test_inconsistent_parcels_rejected(tmp_path):
    d = tmp_path / "d" / "ts"
    d.mkdir(parents=True)
    d.joinpath("a.csv").write_text("\n".join(["1,2,3,4,5,6,7,8"] * 4) + "\n", encoding="utf-8")
    d.joinpath("b.csv").write_text("\n".join(["1,2,3,4,5,6,7,8"] * 5) + "\n", encoding="utf-8")
    with pytest.raises(ValueError, match="parcel"):
        load_dataset(tmp_path / "d", "source")


def test_bad_label_rejected(tmp_path):
    root = tmp_path / "d"
    (root / "ts").mkdir(parents=True)
    (root / "ts" / "a.csv").write_text("\n".join(["1,2,3,4,5,6,7,8"] * 2) + "\n", encoding="utf-8")
    (root / "labels.csv").write_text("subject_id,label\na,2\n", encoding="utf-8")
    with pytest.raises(ValueError, match="labels.csv:2"):
        load_dataset(root, "target")


def test_missing_directory_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope", "source")


def test_mixed_labeling_rejected():
    recs = [
        SubjectRecord("a", np.zeros((2, 8)) + np.arange(8), label=0),
        SubjectRecord("b", np.zeros((2, 8)) + np.arange(8)),
    ]
    with pytest.raises(ValueError, match="labels"):
        Dataset(records=recs, domain_tag="target")
