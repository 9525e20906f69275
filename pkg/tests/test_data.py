import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ldlib.data import (
    BinarizeStrategy,
    DataError,
    Dataset,
    binarize,
    file_checksum,
    generate_synthetic,
    load_dataset,
    normalize_logical,
    save_dataset,
    standardize,
)

GOOD = """f:a,f:b,d:x,d:y,d:z
1.0,2.0,0.5,0.3,0.2
3.0,-1.0,0.1,0.1,0.8
2.0,0.5,0.3,0.3,0.4
"""


def write(tmp_path, text, name="ds.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoad:
    def test_happy_path(self, tmp_path):
        ds = load_dataset(write(tmp_path, GOOD))
        assert ds.X.shape == (3, 2) and ds.D.shape == (3, 3) and ds.L is None
        assert ds.label_names == ["x", "y", "z"]
        assert ds.feature_names == ["a", "b"]
        assert ds.name == "ds"
        np.testing.assert_allclose(ds.X.mean(axis=0), 0.0, atol=1e-15)
        np.testing.assert_allclose(ds.X.std(axis=0), 1.0)

    def test_raw_features(self, tmp_path):
        ds = load_dataset(write(tmp_path, GOOD), standardize_features=False)
        np.testing.assert_array_equal(ds.X[:, 0], [1.0, 3.0, 2.0])

    def test_logical_columns(self, tmp_path):
        ds = load_dataset(write(tmp_path, "f:a,l:x,l:y\n1,1,0\n2,1,1\n"))
        np.testing.assert_array_equal(ds.L, [[1, 0], [1, 1]])
        assert ds.D is None

    def test_sum_error_names_row(self, tmp_path):
        bad = GOOD.replace("0.1,0.1,0.8", "0.1,0.1,0.6")
        with pytest.raises(DataError) as info:
            load_dataset(write(tmp_path, bad))
        assert info.value.row == 2
        assert "row 2" in str(info.value) and "0.8" in str(info.value)

    def test_non_numeric_names_row(self, tmp_path):
        bad = GOOD.replace("2.0,0.5,0.3,0.3", "2.0,abc,0.3,0.3")
        with pytest.raises(DataError) as info:
            load_dataset(write(tmp_path, bad))
        assert info.value.row == 3
        assert "abc" in str(info.value)

    @pytest.mark.parametrize(
        "text",
        [
            "",
            "d:x,d:y\n0.5,0.5\n",
            "f:a\n1\n",
            "f:a,d:x,d:y\n",
            "f:a,d:x,d:y\n1,0.5\n",
            "f:a,d:x,d:y\n1,-0.5,1.5\n",
            "f:a,d:x,d:y\nnan,0.5,0.5\n",
            "f:a,l:x,l:y\n1,0,0\n",
            "f:a,l:x,l:y\n1,0.5,1\n",
            "f:a,d:x,d:y,l:x,l:q\n1,0.5,0.5,1,0\n",
        ],
    )
    def test_rejects(self, tmp_path, text):
        with pytest.raises(DataError):
            load_dataset(write(tmp_path, text))

    def test_round_trip(self, tmp_path):
        ds = generate_synthetic(20, 4, 3, seed=1)
        save_dataset(ds, tmp_path / "a.csv")
        back = load_dataset(tmp_path / "a.csv", standardize_features=False)
        assert np.array_equal(back.X, ds.X)
        assert np.array_equal(back.D, ds.D)
        assert np.array_equal(back.L, ds.L)
        assert back.label_names == ds.label_names

    def test_restandardizing_is_idempotent(self, tmp_path):
        ds = load_dataset(write(tmp_path, GOOD))
        save_dataset(ds, tmp_path / "b.csv")
        again = load_dataset(tmp_path / "b.csv")
        np.testing.assert_allclose(again.X, ds.X, atol=1e-12)
        np.testing.assert_array_equal(again.D, ds.D)

    def test_checksum_changes_with_content(self, tmp_path):
        a = write(tmp_path, GOOD, "a.csv")
        b = write(tmp_path, GOOD.replace("3.0", "3.5"), "b.csv")
        assert file_checksum(a) == file_checksum(write(tmp_path, GOOD, "c.csv"))
        assert file_checksum(a) != file_checksum(b)
        assert len(file_checksum(a)) == 64


def test_standardize_constant_column():
    X = np.array([[1.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(standardize(X), [[-1.0, 0.0], [1.0, 0.0]])


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset("x", np.ones((2, 2)), D=np.full((3, 2), 0.5))
    with pytest.raises(DataError):
        Dataset("x", np.ones((2, 2)), D=np.full((2, 2), 0.5), L=np.ones((2, 3)))
    ds = Dataset("x", np.ones((2, 2)), L=np.ones((2, 3)))
    assert ds.n == 2 and ds.n_labels == 3


class TestBinarize:
    def test_mean_threshold(self):
        np.testing.assert_array_equal(binarize([[0.5, 0.3, 0.2]]), [[1, 0, 0]])

    def test_uniform_row_falls_back_to_first_argmax(self):
        np.testing.assert_array_equal(binarize([[1 / 3, 1 / 3, 1 / 3]]), [[1, 0, 0]])

    def test_top_k(self):
        np.testing.assert_array_equal(binarize([[0.4, 0.35, 0.25]], "top-k:2"), [[1, 1, 0]])

    def test_top_k_ties_prefer_lower_index(self):
        np.testing.assert_array_equal(binarize([[0.25, 0.25, 0.25, 0.25]], "top-k:2"), [[1, 1, 0, 0]])

    def test_fixed_threshold(self):
        np.testing.assert_array_equal(binarize([[0.5, 0.3, 0.2]], "fixed-threshold:0.25"), [[1, 1, 0]])
        np.testing.assert_array_equal(binarize([[0.5, 0.3, 0.2]], "fixed-threshold:0.9"), [[1, 0, 0]])

    @pytest.mark.parametrize("text", ["top-k:0", "top-k:4", "fixed-threshold:0", "fixed-threshold:1"])
    def test_invalid_configuration(self, text):
        with pytest.raises(ValueError):
            binarize([[0.5, 0.3, 0.2]], text)

    @pytest.mark.parametrize("text", ["bogus", "mean-threshold:1", "top-k:x"])
    def test_unparseable(self, text):
        with pytest.raises(ValueError):
            BinarizeStrategy.parse(text)

    def test_strategy_text_round_trip(self):
        for text in ("mean-threshold", "top-k:3", "fixed-threshold:0.2"):
            assert str(BinarizeStrategy.parse(text)) == text

    @given(arrays(np.float64, (6, 5), elements=st.floats(0.01, 1.0)), st.integers(1, 5))
    def test_top_k_properties(self, raw, k):
        D = raw / raw.sum(axis=1, keepdims=True)
        L = binarize(D, BinarizeStrategy("top-k", k=k))
        assert np.all(L.sum(axis=1) == k)
        assert np.array_equal(binarize(normalize_logical(L), BinarizeStrategy("top-k", k=k)), L)

    @given(arrays(np.float64, (6, 4), elements=st.floats(0.0, 1.0)))
    def test_every_row_has_a_label(self, raw):
        raw = raw + 1e-9
        D = raw / raw.sum(axis=1, keepdims=True)
        for text in ("mean-threshold", "fixed-threshold:0.6"):
            L = binarize(D, text)
            assert np.all(L.sum(axis=1) >= 1)
            assert set(np.unique(L)) <= {0.0, 1.0}


def test_normalize_logical():
    np.testing.assert_array_equal(normalize_logical(np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])),
                                  [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])


class TestSynthetic:
    def test_deterministic(self):
        a, b = generate_synthetic(30, 5, 4, seed=3), generate_synthetic(30, 5, 4, seed=3)
        assert np.array_equal(a.X, b.X) and np.array_equal(a.D, b.D) and np.array_equal(a.L, b.L)
        assert not np.array_equal(a.X, generate_synthetic(30, 5, 4, seed=4).X)

    def test_zero_weights_give_uniform(self):
        ds = generate_synthetic(10, 3, 2, W=np.zeros((3, 2)), b=np.zeros(2))
        np.testing.assert_allclose(ds.D, 0.5, atol=1e-15)

    def test_shapes_and_ranges(self):
        ds = generate_synthetic(200, 10, 4, seed=0)
        assert ds.X.shape == (200, 10) and ds.D.shape == (200, 4) and ds.L.shape == (200, 4)
        assert ds.X.min() >= -1 and ds.X.max() <= 1
        np.testing.assert_allclose(ds.D.sum(axis=1), 1.0, atol=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_synthetic(1, 3, 2)
