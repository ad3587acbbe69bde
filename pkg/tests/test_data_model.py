import numpy as np
import pytest

from clvm import data_model
from clvm.clvm_em import ClvmParams
from clvm.data_model import ContrastivePair
from clvm.errors import DimensionError, ParseError


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestCsv:
    def test_one_empty_cell(self, tmp_path):
        p = _write(tmp_path / "a.csv", "a,b\n1,2\n3,\n5,6\n")
        values, mask, header = data_model.load_csv(p)
        assert header == ["a", "b"]
        assert (~mask).sum() == 1
        assert not mask[1, 1]
        assert values[2, 1] == 6.0

    def test_all_zeros(self, tmp_path):
        p = _write(tmp_path / "z.csv", "a,b,c\n0,0,0\n0,0,0\n")
        values, mask, _ = data_model.load_csv(p)
        assert np.array_equal(values, np.zeros((2, 3)))
        assert mask.all()

    def test_round_trip_bit_equal(self, tmp_path):
        rng = np.random.default_rng(3)
        m = rng.normal(size=(10, 5)) * 10.0 ** rng.integers(-8, 8, size=(10, 5))
        p = tmp_path / "r.csv"
        data_model.write_csv(p, m)
        values, mask, _ = data_model.load_csv(p)
        assert mask.all()
        assert np.array_equal(values, m)

    def test_missing_round_trip(self, tmp_path):
        m = np.array([[1.0, np.nan], [np.nan, 2.5]])
        p = tmp_path / "m.csv"
        data_model.write_csv(p, m)
        values, mask, _ = data_model.load_csv(p)
        assert np.array_equal(mask, [[True, False], [False, True]])
        assert values[0, 0] == 1.0

    def test_ragged_reports_row(self, tmp_path):
        p = _write(tmp_path / "bad.csv", "a,b\n1,2\n3\n")
        with pytest.raises(ParseError, match="row 3"):
            data_model.load_csv(p)

    def test_non_numeric_reports_coordinates(self, tmp_path):
        p = _write(tmp_path / "bad.csv", "a,b\n1,2\n3,x\n")
        with pytest.raises(ParseError, match="row 3, column 2"):
            data_model.load_csv(p)

    def test_custom_missing_token(self, tmp_path):
        p = _write(tmp_path / "t.csv", "a,b\n1,?\n")
        _, mask, _ = data_model.load_csv(p, missing_tokens=("", "?"))
        assert not mask[0, 1]


class TestPair:
    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ContrastivePair(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_unequal_counts_allowed(self):
        pair = ContrastivePair(np.zeros((5, 3)), np.zeros((2, 3)))
        assert (pair.n, pair.m, pair.d) == (5, 2, 3)

    def test_immutable(self):
        pair = ContrastivePair(np.zeros((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            pair.target[0, 0] = 1.0

    def test_mask_sentinel_consistency(self):
        mask = np.array([[True, False], [True, True]])
        pair = ContrastivePair(np.ones((2, 2)), np.ones((2, 2)), target_mask=mask)
        assert np.isnan(pair.target[0, 1])
        assert np.array_equal(pair.target_mask, mask)
        t, _ = pair.filled(0.0)
        assert t[0, 1] == 0.0


class TestStandardize:
    def _pair(self, seed=0):
        rng = np.random.default_rng(seed)
        return ContrastivePair(rng.normal(3, 2, size=(40, 4)), rng.normal(-1, 5, size=(30, 4)))

    def test_none_is_identity(self):
        pair = self._pair()
        out, params = data_model.standardize(pair, "none")
        assert out is pair
        assert np.all(params.scale == 1)

    def test_constant_column_centered(self):
        pair = ContrastivePair(np.full((3, 2), 5.0), np.full((2, 2), 5.0))
        out, _ = data_model.standardize(pair, "center")
        assert np.all(out.target == 0) and np.all(out.background == 0)

    def test_recomputed_means_vanish(self):
        out, _ = data_model.standardize(self._pair(1), "center")
        pooled = np.vstack([out.target, out.background])
        assert np.max(np.abs(pooled.mean(axis=0))) < 1e-12

    def test_zero_variance_flagged(self):
        pair = ContrastivePair(np.c_[np.full(4, 2.0), np.arange(4.0)], np.c_[np.full(3, 2.0), np.arange(3.0)])
        with pytest.warns(RuntimeWarning):
            out, params = data_model.standardize(pair, "zscore")
        assert params.flagged == (0,)
        assert params.scale[0] == 1.0

    def test_missing_untouched_and_round_trip(self):
        pair = self._pair(2)
        mask = np.ones_like(pair.target_mask)
        mask[3, 1] = False
        pair = ContrastivePair(pair.target, pair.background, target_mask=mask)
        out, params = data_model.standardize(pair, "zscore")
        assert np.isnan(out.target[3, 1])
        assert np.array_equal(out.target_mask, mask)
        back = params.invert(out.target)
        obs = pair.target_mask
        assert np.max(np.abs(back[obs] - pair.target[obs])) < 1e-12
        back_b = params.invert(out.background)
        assert np.max(np.abs(back_b - pair.background)) < 1e-12

    def test_statistics_use_observed_only(self):
        tgt = np.array([[0.0], [2.0], [1000.0]])
        mask = np.array([[True], [True], [False]])
        pair = ContrastivePair(tgt, np.array([[1.0]]), target_mask=mask)
        _, params = data_model.standardize(pair, "center")
        assert params.center[0] == pytest.approx(1.0)


class TestSyntheticSubgroups:
    def test_default_sizes(self):
        pair = data_model.generate_synthetic_subgroups(seed=7)
        assert pair.target.shape == (400, 30)
        assert pair.background.shape == (400, 30)
        assert np.array_equal(np.bincount(pair.target_labels), [100] * 4)

    def test_subgroup_c_block_one_mean(self):
        pair = data_model.generate_synthetic_subgroups(n_per_subgroup=1000, m_background=1000, seed=1)
        c = pair.target[pair.target_labels == 2][:, :10]
        assert abs(c.mean() - 6.0) < 0.1

    def test_background_block_two_variance(self):
        pair = data_model.generate_synthetic_subgroups(n_per_subgroup=10, m_background=1000, seed=2)
        block = pair.background[:, 10:20]
        assert abs(block.var() - 1.0) < 0.05

    def test_block_means_within_four_sigma(self):
        pair = data_model.generate_synthetic_subgroups(n_per_subgroup=500, m_background=500, seed=3)
        for lab, key in enumerate("ABCD"):
            rows = pair.target[pair.target_labels == lab]
            for b, (mu, sd) in enumerate(data_model.SUBGROUP_BLOCKS[key]):
                vals = rows[:, 10 * b: 10 * (b + 1)].ravel()
                assert abs(vals.mean() - mu) < 4 * sd / np.sqrt(vals.size)
        for b, (mu, sd) in enumerate(data_model.BACKGROUND_BLOCKS):
            vals = pair.background[:, 10 * b: 10 * (b + 1)].ravel()
            assert abs(vals.mean() - mu) < 4 * sd / np.sqrt(vals.size)

    def test_deterministic(self):
        a = data_model.generate_synthetic_subgroups(seed=11)
        b = data_model.generate_synthetic_subgroups(seed=11)
        assert np.array_equal(a.target, b.target) and np.array_equal(a.background, b.background)

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            data_model.generate_synthetic_subgroups(n_per_subgroup=0)


class TestGenerateFromModel:
    def test_noiseless_degenerate(self):
        d = 4
        params = ClvmParams(np.zeros((d, 2)), np.zeros((d, 2)), np.arange(d), -np.arange(d), 0.0)
        pair = data_model.generate_from_model(params, [[0, 0], [5, 5]], 10, 6, seed=0)
        assert np.array_equal(pair.target, np.tile(np.arange(d, dtype=float), (10, 1)))

    def test_background_covariance_matches_marginal(self):
        rng = np.random.default_rng(0)
        d = 5
        S = rng.normal(size=(d, 2))
        params = ClvmParams(S, rng.normal(size=(d, 1)), np.zeros(d), np.ones(d), 0.5)
        pair = data_model.generate_from_model(params, [[0.0]], 10, 100_000, seed=1)
        emp = np.cov(pair.background, rowvar=False)
        expected = S @ S.T + 0.5 * np.eye(d)
        assert np.linalg.norm(emp - expected) / np.linalg.norm(expected) < 0.02

    def test_k_zero_background_is_mean_plus_noise(self):
        d = 3
        params = ClvmParams(np.zeros((d, 0)), np.ones((d, 1)), np.zeros(d), np.full(d, 2.0), 1.0)
        pair = data_model.generate_from_model(params, [[0.0]], 5, 50_000, seed=4)
        np.testing.assert_allclose(pair.background.mean(axis=0), 2.0, atol=0.03)
        np.testing.assert_allclose(np.cov(pair.background, rowvar=False), np.eye(d), atol=0.03)


class TestOutliers:
    def test_zero_count_unchanged(self):
        pair = data_model.generate_synthetic_subgroups(n_per_subgroup=5, m_background=5)
        assert data_model.inject_outliers(pair, 0) is pair

    def test_twenty_each(self):
        pair = data_model.generate_synthetic_subgroups(seed=1)
        out = data_model.inject_outliers(pair, 20, -20, 20, seed=2)
        assert out.n == 420 and out.m == 420
        extra = np.vstack([out.target[400:], out.background[400:]])
        assert extra.min() >= -20 and extra.max() <= 20
        assert np.all(out.target_labels[400:] == data_model.OUTLIER_LABEL)
        assert np.array_equal(out.target[:400], pair.target)

    def test_uniform_mean(self):
        pair = ContrastivePair(np.zeros((1, 10)), np.zeros((1, 10)))
        out = data_model.inject_outliers(pair, 20_000, -20, 20, seed=5)
        vals = out.target[1:].ravel()
        # std of U[-20,20] is 40/sqrt(12)
        assert abs(vals.mean()) < 4 * (40 / np.sqrt(12)) / np.sqrt(vals.size)

    def test_bad_bounds(self):
        pair = ContrastivePair(np.zeros((1, 2)), np.zeros((1, 2)))
        with pytest.raises(ValueError):
            data_model.inject_outliers(pair, 1, 5, -5)


class TestDeleteCells:
    def test_fraction_and_target_only(self):
        pair = data_model.generate_synthetic_subgroups(seed=0)
        out = data_model.delete_target_cells(pair, 0.25, seed=1)
        frac = 1 - out.target_mask.mean()
        assert abs(frac - 0.25) < 0.005
        assert out.background_mask.all()
        obs = out.target_mask
        assert np.array_equal(out.target[obs], pair.target[obs])

    def test_no_empty_rows(self):
        pair = ContrastivePair(np.ones((50, 2)), np.ones((3, 2)))
        out = data_model.delete_target_cells(pair, 0.75, seed=3)
        assert out.target_mask.any(axis=1).all()
