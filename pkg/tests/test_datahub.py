import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggda import models
from ggda.datahub import (
    CorruptionRecord,
    Dataset,
    ScoreFile,
    atomic_write_text,
    flip_labels,
    load_csv,
    make_blobs,
    read_scores,
    write_dataset_csv,
    write_scores,
)
from ggda.errors import MissingColumn, ParseError, SchemaError
from ggda.numkit import make_rng


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadCSV:
    def test_three_rows(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,4,1\n5.5,-6,0\n")
        ds = load_csv(p)
        assert (ds.n, ds.d) == (3, 2)
        assert ds.feature_names == ("a", "b")
        np.testing.assert_array_equal(ds.labels, [0, 1, 0])

    def test_missing_label(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,b,y\n1,2,0\n")
        with pytest.raises(MissingColumn):
            load_csv(p)

    def test_heloc_shaped(self, tmp_path):
        rng = make_rng(0)
        cols = [f"f{j}" for j in range(23)]
        lines = [",".join(cols + ["RiskPerformance"])]
        for i in range(50):
            lines.append(",".join([str(int(v)) for v in rng.integers(-9, 100, 23)] + [str(i % 2)]))
        p = _write(tmp_path / "heloc.csv", "\n".join(lines) + "\n")
        ds = load_csv(p, label_column="RiskPerformance")
        assert ds.d == 23 and ds.n == 50 and ds.n_train == 40

    def test_label_column_anywhere(self, tmp_path):
        p = _write(tmp_path / "d.csv", "label,a\n1,0.5\n0,1.5\n")
        ds = load_csv(p)
        np.testing.assert_array_equal(ds.features[:, 0], [0.5, 1.5])

    def test_non_numeric_cell_locus(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,oops,1\n")
        with pytest.raises(ParseError) as info:
            load_csv(p)
        assert info.value.row == 3 and info.value.column == "b"

    def test_bad_label(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,label\n1,cat\n")
        with pytest.raises(ParseError) as info:
            load_csv(p)
        assert info.value.column == "label"

    def test_ragged_row(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,1\n")
        with pytest.raises(ParseError):
            load_csv(p)

    def test_explicit_split(self, tmp_path):
        p = _write(tmp_path / "d.csv", "a,label,split\n1,0,train\n2,1,test\n3,1,train\n")
        ds = load_csv(p)
        np.testing.assert_array_equal(ds.is_train, [True, False, True])

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError):
            load_csv(_write(tmp_path / "d.csv", ""))

    def test_dataset_round_trip(self, tmp_path):
        ds = make_blobs(30, 3, 3, 2.0, make_rng(4))
        write_dataset_csv(ds, tmp_path / "ds.csv")
        back = load_csv(tmp_path / "ds.csv", n_classes=3)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.is_train, ds.is_train)


class TestBlobs:
    def test_separable_logreg(self):
        ds = make_blobs(100, 2, 2, 10.0, make_rng(0))
        m, _ = models.train(models.Architecture.logreg(2, 2), ds, models.TrainConfig(learning_rate=0.1, epochs=200))
        assert models.test_accuracy(m, ds) >= 0.95

    def test_single_class(self):
        ds = make_blobs(20, 3, 1, 5.0, make_rng(1))
        assert np.all(ds.labels == 0)

    def test_split_counts(self):
        ds = make_blobs(10, 2, 2, 1.0, make_rng(2))
        assert ds.n_train == 8 and ds.n_test == 2

    def test_center_separation(self):
        rng = make_rng(3)
        ds = make_blobs(4000, 3, 4, 6.0, rng)
        centers = np.stack([ds.features[ds.labels == c].mean(0) for c in range(4)])
        dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)[np.triu_indices(4, 1)]
        assert dist.min() > 6.0 - 0.3

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(2, 200),
        d=st.integers(1, 5),
        classes=st.integers(1, 5),
        sep=st.floats(0, 10),
        seed=st.integers(0, 2**31),
    )
    def test_type_invariants(self, n, d, classes, sep, seed):
        if n < classes:
            return
        ds = make_blobs(n, d, classes, sep, make_rng(seed))
        assert ds.features.shape == (n, d)
        assert ds.labels.min() >= 0 and ds.labels.max() < classes
        assert np.all(np.isfinite(ds.features))
        for c in range(classes):
            members = ds.labels == c
            assert (ds.is_train & members).sum() == int(round(0.8 * members.sum()))


class TestFlip:
    def test_exact_count(self):
        ds = make_blobs(125, 2, 5, 2.0, make_rng(0))
        assert ds.n_train == 100
        flipped, rec = flip_labels(ds, 0.2, make_rng(1))
        assert len(rec.flipped_indices) == 20 == len(set(rec.flipped_indices))
        y0, y1 = ds.y_train, flipped.y_train
        assert np.all(y1[list(rec.flipped_indices)] != y0[list(rec.flipped_indices)])
        np.testing.assert_array_equal(y0[list(rec.flipped_indices)], rec.original_labels)
        untouched = np.setdiff1d(np.arange(100), rec.flipped_indices)
        np.testing.assert_array_equal(y0[untouched], y1[untouched])

    def test_binary_complement(self):
        ds = make_blobs(100, 2, 2, 2.0, make_rng(0))
        flipped, rec = flip_labels(ds, 0.2, make_rng(1))
        idx = list(rec.flipped_indices)
        np.testing.assert_array_equal(flipped.y_train[idx], 1 - ds.y_train[idx])

    def test_deterministic(self):
        ds = make_blobs(100, 2, 4, 2.0, make_rng(0))
        assert flip_labels(ds, 0.3, make_rng(9))[1] == flip_labels(ds, 0.3, make_rng(9))[1]

    def test_features_and_test_rows_preserved(self):
        ds = make_blobs(100, 2, 4, 2.0, make_rng(0))
        flipped, _ = flip_labels(ds, 0.5, make_rng(2))
        assert flipped.features.tobytes() == ds.features.tobytes()
        np.testing.assert_array_equal(flipped.y_test, ds.y_test)

    def test_bad_fraction(self):
        ds = make_blobs(10, 2, 2, 2.0, make_rng(0))
        with pytest.raises(ValueError):
            flip_labels(ds, 1.0, make_rng(0))

    def test_record_round_trip(self):
        rec = CorruptionRecord((1, 5), (0, 2), 0.1)
        assert CorruptionRecord.from_json(json.loads(json.dumps(rec.to_json()))) == rec


def _sf(**kw):
    base = dict(method="tracin", grouping="random", group_size=2, scores=[0.5, -1.25], group_members=[[0, 2], [1, 3]])
    base.update(kw)
    return ScoreFile(**base)


class TestScoreFile:
    def test_round_trip(self, tmp_path):
        sf = _sf(seed=7)
        write_scores(sf, tmp_path / "s.json")
        assert read_scores(tmp_path / "s.json") == sf
        csv_text = (tmp_path / "s.csv").read_text()
        assert csv_text.splitlines()[0] == "group_id,score,size"
        assert csv_text.splitlines()[2] == "1,-1.25,2"

    @settings(max_examples=30, deadline=None)
    @given(
        sizes=st.lists(st.integers(1, 5), min_size=1, max_size=8),
        seed=st.integers(0, 2**31),
    )
    def test_round_trip_property(self, tmp_path_factory, sizes, seed):
        rng = make_rng(seed)
        perm = rng.permutation(sum(sizes)).tolist()
        groups, start = [], 0
        for s in sizes:
            groups.append(perm[start : start + s])
            start += s
        sf = ScoreFile("influence-exact", "kmeans", 3, rng.standard_normal(len(sizes)).tolist(), groups, seed)
        path = tmp_path_factory.mktemp("sf") / "s.json"
        write_scores(sf, path)
        assert read_scores(path) == sf

    def test_length_mismatch(self, tmp_path):
        obj = _sf().to_json()
        del obj["groups"][1]["score"]
        (tmp_path / "s.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            read_scores(tmp_path / "s.json")

    def test_length_mismatch_constructor(self):
        with pytest.raises(SchemaError):
            _sf(scores=[1.0])

    def test_empty_groups(self, tmp_path):
        obj = _sf().to_json()
        obj["groups"] = []
        (tmp_path / "s.json").write_text(json.dumps(obj))
        with pytest.raises(SchemaError):
            read_scores(tmp_path / "s.json")

    def test_overlapping_groups(self):
        with pytest.raises(SchemaError):
            _sf(group_members=[[0, 1], [1, 2]])

    def test_invalid_json(self, tmp_path):
        (tmp_path / "s.json").write_text("{nope")
        with pytest.raises(SchemaError):
            read_scores(tmp_path / "s.json")


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "sub" / "a.txt", "hello")
    assert (tmp_path / "sub" / "a.txt").read_text() == "hello"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["a.txt"]


def test_dataset_is_immutable():
    ds = make_blobs(10, 2, 2, 1.0, make_rng(0))
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 2]), np.array([True, False]), 2)


def test_keep_and_drop_train():
    ds = make_blobs(20, 2, 2, 1.0, make_rng(0))
    kept = ds.keep_train([0, 3, 5])
    np.testing.assert_array_equal(kept.X_train, ds.X_train[[0, 3, 5]])
    assert kept.n_test == ds.n_test
    dropped = ds.drop_train([0, 3, 5])
    assert dropped.n_train == ds.n_train - 3
