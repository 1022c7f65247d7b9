import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shapinfer.core_data import (
    DataError,
    Dataset,
    ShapleyDistribution,
    enumerate_subsets,
    load_dataset,
    mix_vectors,
    popcount,
    sample_shapley_subset,
    sample_shapley_subsets,
    save_dataset,
    shapley_weight,
    subset_from_indices,
    subset_mask,
    subset_to_indices,
)


class TestDataset:
    def test_shapes(self):
        ds = Dataset(np.zeros((3, 2)), np.zeros(3))
        assert (ds.n, ds.d) == (3, 2)

    def test_rejects_mismatch_and_tiny(self):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.zeros(4))
        with pytest.raises(DataError):
            Dataset(np.zeros((1, 2)), np.zeros(1))

    def test_rejects_nonfinite(self):
        x = np.zeros((3, 2))
        x[1, 1] = np.nan
        with pytest.raises(DataError):
            Dataset(x, np.zeros(3))


class TestShapleyWeight:
    def test_small_values(self):
        assert shapley_weight(3, 0) == pytest.approx(1 / 3, abs=1e-15)
        assert shapley_weight(3, 1) == pytest.approx(1 / 6, abs=1e-15)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            shapley_weight(3, 3)
        with pytest.raises(ValueError):
            shapley_weight(3, -1)

    @pytest.mark.parametrize("d", range(1, 13))
    def test_weights_sum_to_one(self, d):
        for a in range(d):
            codes = enumerate_subsets(d, a)
            total = np.sum(shapley_weight(d, popcount(codes)))
            assert abs(total - 1.0) < 1e-12

    def test_large_d_log_space(self):
        # C(39, 19) overflows nothing but exercises the log-space branch
        w = shapley_weight(40, 19)
        assert w == pytest.approx(1 / (40 * math.comb(39, 19)), rel=1e-10)

    def test_distribution_weight(self):
        dist = ShapleyDistribution(5, 2)
        assert dist.weight(0) == pytest.approx(1 / 5)
        assert dist.weight(1 << 2) == 0.0


class TestEnumerate:
    def test_examples(self):
        assert list(enumerate_subsets(2, 0)) == [0, 0b10]
        assert list(enumerate_subsets(3, 1)) == [0, 0b001, 0b100, 0b101]

    def test_count_at_cap(self):
        codes = enumerate_subsets(15, 0)
        assert codes.size == 2 ** 14
        assert np.unique(codes).size == codes.size
        assert not np.any(codes & 1)

    def test_above_cap(self):
        with pytest.raises(ValueError, match="sampled"):
            enumerate_subsets(16, 0)

    def test_index_round_trip(self):
        code = subset_from_indices([0, 3])
        assert code == 0b1001
        assert subset_to_indices(code, 5) == (0, 3)
        np.testing.assert_array_equal(subset_mask(code, 4), [True, False, False, True])


class TestSampling:
    def test_d1_only_empty(self, rng):
        dist = ShapleyDistribution(1, 0)
        assert all(sample_shapley_subset(dist, rng) == 0 for _ in range(20))

    def test_frequencies_d3(self, rng):
        m = 100_000
        draws = sample_shapley_subsets(ShapleyDistribution(3, 0), rng, m)
        # ground truth from shapley_weight: |S|=0 -> 1/3, each singleton -> 1/6, pair -> 1/3
        for code, w in ((0, 1 / 3), (0b010, 1 / 6), (0b100, 1 / 6), (0b110, 1 / 3)):
            freq = np.mean(draws == code)
            assert abs(freq - w) <= 3 * math.sqrt(w * (1 - w) / m)

    @pytest.mark.parametrize("d", range(1, 9))
    def test_never_contains_target(self, d, rng):
        for a in range(d):
            draws = sample_shapley_subsets(ShapleyDistribution(d, a), rng, 100_000 // d)
            assert not np.any((draws >> a) & 1)
            assert np.all(draws < 2 ** d)

    def test_seed_determinism(self):
        dist = ShapleyDistribution(6, 2)
        a = sample_shapley_subsets(dist, np.random.default_rng(3), 50)
        b = sample_shapley_subsets(dist, np.random.default_rng(3), 50)
        np.testing.assert_array_equal(a, b)


class TestMix:
    def test_examples(self):
        x, xp = np.array([1.0, 2, 3]), np.array([9.0, 8, 7])
        np.testing.assert_array_equal(mix_vectors(x, xp, 0b001), [1, 8, 7])
        np.testing.assert_array_equal(mix_vectors(x, xp, 0b111), x)
        np.testing.assert_array_equal(mix_vectors(x, xp, 0), xp)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            mix_vectors(np.zeros(3), np.zeros(2), 1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.integers(0, 255))
    def test_idempotent_on_equal_inputs(self, values, code):
        x = np.asarray(values)
        code &= (1 << x.size) - 1
        np.testing.assert_array_equal(mix_vectors(x, x, code), x)


class TestCsv:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n")
        ds = load_dataset(path)
        assert ds.n == 3 and ds.d == 2
        save_dataset(ds, tmp_path / "e.csv")
        again = load_dataset(tmp_path / "e.csv")
        np.testing.assert_array_equal(again.x, ds.x)
        np.testing.assert_array_equal(again.y, ds.y)

    def test_single_covariate_and_crlf(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_bytes(b"x1,y\r\n0.5,1\r\n1.5,2\r\n")
        assert load_dataset(path).d == 1

    def test_nan_cell_named(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x1,x2,y\n1,2,3\n4,NaN,6\n")
        with pytest.raises(DataError, match=r"row 3, column x2"):
            load_dataset(path)

    def test_bad_header_and_missing(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n3,4\n")
        with pytest.raises(DataError, match="header"):
            load_dataset(path)
        with pytest.raises(DataError, match="no such file"):
            load_dataset(tmp_path / "missing.csv")
