import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sourcetrace.data import (
    ABSTAIN,
    LabelMatrix,
    SyntheticSpec,
    generate_synthetic,
    load_bundle,
    load_features,
    load_gold,
    load_label_matrix,
    save_bundle,
    save_features,
    save_label_matrix,
    split,
    vote_rows,
)
from sourcetrace.exceptions import DomainError, ParseError, ShapeError


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_label_matrix_parse(tmp_path):
    lm = load_label_matrix(write(tmp_path, "L.csv", "1,-1,2\n2,2,-1"), n_classes=2)
    assert lm.shape == (2, 3)
    np.testing.assert_array_equal(lm.votes, [[1, -1, 2], [2, 2, -1]])


def test_label_matrix_vote_out_of_range(tmp_path):
    with pytest.raises(DomainError):
        load_label_matrix(write(tmp_path, "L.csv", "1,3"), n_classes=2)


def test_label_matrix_empty_file(tmp_path):
    with pytest.raises(ShapeError):
        load_label_matrix(write(tmp_path, "L.csv", ""), n_classes=2)


def test_label_matrix_directive_and_header(tmp_path):
    lm = load_label_matrix(write(tmp_path, "L.csv", "#classes=3\nlf_1,lf_2\n3,-1\n1,2\n"))
    assert lm.n_classes == 3
    assert lm.shape == (2, 2)


def test_label_matrix_malformed_reports_position(tmp_path):
    with pytest.raises(ParseError) as err:
        load_label_matrix(write(tmp_path, "L.csv", "1,2\n2,x\n"), n_classes=2)
    assert err.value.row == 2 and err.value.col == 2


def test_label_matrix_ragged(tmp_path):
    with pytest.raises(ShapeError):
        load_label_matrix(write(tmp_path, "L.csv", "1,2\n2\n"), n_classes=2)


def test_label_matrix_needs_classes(tmp_path):
    with pytest.raises(DomainError):
        load_label_matrix(write(tmp_path, "L.csv", "1,2\n"))


def test_label_matrix_invariants():
    with pytest.raises(DomainError):
        LabelMatrix(np.array([[0, 1]]), 2)
    with pytest.raises(DomainError):
        LabelMatrix(np.array([[1]]), 1)
    with pytest.raises(ShapeError):
        LabelMatrix(np.zeros((0, 2), dtype=int), 2)


def test_vote_rows_mapping():
    np.testing.assert_array_equal(vote_rows(np.array([[-1, 1, 3]])), [[0, 1, 3]])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.data())
def test_label_matrix_round_trip(tmp_path_factory, c, data):
    n = data.draw(st.integers(1, 6))
    m = data.draw(st.integers(1, 5))
    grid = data.draw(st.lists(st.lists(st.sampled_from([ABSTAIN] + list(range(1, c + 1))), min_size=m, max_size=m),
                              min_size=n, max_size=n))
    lm = LabelMatrix(np.array(grid), c)
    p = tmp_path_factory.mktemp("rt") / "L.csv"
    save_label_matrix(lm, p, header=data.draw(st.booleans()))
    assert load_label_matrix(p) == lm


def test_features_parse(tmp_path):
    X = load_features(write(tmp_path, "X.csv", "0.5,1.0\n-1.0,2.0"))
    np.testing.assert_array_equal(X, [[0.5, 1.0], [-1.0, 2.0]])
    assert load_features(write(tmp_path, "one.csv", "3.14")).shape == (1, 1)


def test_features_reject_nan_and_ragged(tmp_path):
    with pytest.raises(DomainError):
        load_features(write(tmp_path, "X.csv", "1.0,nan\n"))
    with pytest.raises(ShapeError):
        load_features(write(tmp_path, "X2.csv", "1.0,2.0\n3.0\n"))


def test_features_round_trip_exact(tmp_path, rng):
    X = rng.standard_normal((7, 3))
    save_features(X, tmp_path / "X.csv")
    np.testing.assert_array_equal(load_features(tmp_path / "X.csv"), X)


def test_gold_parse(tmp_path):
    np.testing.assert_array_equal(load_gold(write(tmp_path, "y.csv", "1\n2\n2\n"), 2), [1, 2, 2])
    with pytest.raises(DomainError):
        load_gold(write(tmp_path, "y2.csv", "1\n3\n"), 2)


def test_synthetic_accuracy_one_votes_match_gold():
    b = generate_synthetic(SyntheticSpec(n_train=300, n_features=5, n_classes=3, n_lfs=6, lf_accuracy=1.0,
                                         lf_coverage=1.0, seed=1))
    v = b.train.L.votes
    assert np.all(v == b.train.y[:, None])


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_train=300, n_lfs=6, seed=9)
    assert generate_synthetic(spec).equals(generate_synthetic(spec))
    assert not generate_synthetic(spec).equals(generate_synthetic(SyntheticSpec(n_train=300, n_lfs=6, seed=10)))


def test_synthetic_rates_by_counting():
    b = generate_synthetic(SyntheticSpec(n_train=10000, n_lfs=3, lf_accuracy=0.7, lf_coverage=0.8, seed=2))
    v, y = b.train.L.votes, b.train.y
    covered = v != ABSTAIN
    for j in range(3):
        assert abs(covered[:, j].mean() - 0.8) <= 0.02
        assert abs((v[covered[:, j], j] == y[covered[:, j]]).mean() - 0.7) <= 0.02


def test_synthetic_cluster_separation():
    b = generate_synthetic(SyntheticSpec(n_train=20000, n_valid=1, n_test=1, n_features=4, n_classes=3,
                                         class_separation=3.0, seed=4))
    X, y = b.train.X, b.train.y
    means = np.array([X[y == c].mean(axis=0) for c in (1, 2, 3)])
    d = np.linalg.norm(means[0] - means[1])
    assert abs(d - 3.0) < 0.1


@pytest.mark.parametrize("kwargs", [dict(n_train=0), dict(n_classes=1), dict(lf_accuracy=0.0),
                                    dict(lf_coverage=1.5), dict(lf_accuracy=[0.9, 0.9])])
def test_synthetic_invalid_spec(kwargs):
    with pytest.raises(DomainError):
        generate_synthetic(SyntheticSpec(**kwargs))


def _corpus(n=10, seed=0):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, 2))
    y = r.integers(1, 3, size=n)
    return X, y, LabelMatrix(np.where(r.random((n, 3)) < 0.5, y[:, None], -1), 2)


def test_split_sizes_and_partition():
    X, y, L = _corpus()
    b = split(X, y, L, (0.8, 0.1, 0.1), seed=5)
    assert (len(b.train), len(b.valid), len(b.test)) == (8, 1, 1)
    rows = np.vstack([b.train.X, b.valid.X, b.test.X])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, X))
    # votes travel with their rows
    for k in range(len(b.train)):
        i = int(np.flatnonzero(np.all(X == b.train.X[k], axis=1))[0])
        np.testing.assert_array_equal(b.train.L.votes[k], L.votes[i])


def test_split_repeatable_and_validated():
    X, y, L = _corpus()
    assert split(X, y, L, seed=1).equals(split(X, y, L, seed=1))
    with pytest.raises(DomainError):
        split(X, y, L, (0.5, 0.5, 0.0))


def test_bundle_round_trip(tmp_path):
    b = generate_synthetic(SyntheticSpec(n_train=30, n_valid=10, n_test=10, seed=0))
    save_bundle(b, tmp_path)
    back = load_bundle(tmp_path)
    np.testing.assert_array_equal(back.train.X, b.train.X)
    assert back.train.L == b.train.L
    np.testing.assert_array_equal(back.test.y, b.test.y)


def test_bundle_missing_features_message(tmp_path):
    with pytest.raises(FileNotFoundError, match="features not found"):
        load_bundle(tmp_path)
