"""
Unit tests for Scripts/data.py: CSV ingestion, synthetic data, splits, masks.
"""

from __future__ import annotations

import numpy as np
import pytest

from Scripts.core.models import SynthConfig
from Scripts.data import Dataset, concat_unsupervised, gen_synthetic, load_csv, mask_outputs, split, write_csv


# ============================================================================
# Synthetic data
# ============================================================================

class TestGenSynthetic:
    def test_shapes_and_unit_ball(self):
        ds = gen_synthetic(SynthConfig(n=200, input_dim=3, output_dim=4, seed=1))
        assert (ds.n, ds.d_x, ds.d_y) == (200, 3, 4)
        assert (np.linalg.norm(ds.X, axis=1) <= 1.0 + 1e-12).all()
        assert ds.mask.all()

    def test_noise_free_outputs(self):
        ds = gen_synthetic(SynthConfig(n=50, noise=0.0))
        expected = np.cos(4 * np.linalg.norm(ds.X, axis=1))
        assert np.allclose(ds.Y, expected[:, None])

    def test_seeded(self):
        a, b = gen_synthetic(SynthConfig(seed=4)), gen_synthetic(SynthConfig(seed=4))
        assert np.array_equal(a.Y, b.Y)


# ============================================================================
# CSV
# ============================================================================

class TestCsv:
    def test_load_with_missing_output(self, data_csv):
        ds = load_csv(data_csv, 2)
        assert (ds.n, ds.d_x, ds.d_y) == (60, 2, 3)
        assert ds.x_names == ["x1", "x2"]
        assert not ds.mask[3, 1]
        assert np.isnan(ds.Y[3, 1])
        assert ds.mask.sum() == 60 * 3 - 1

    def test_missing_tokens(self, tmp_path):
        path = tmp_path / "tokens.csv"
        path.write_text("x,a,b,c\n1,NaN,2,null\n2,3,NA,4\n", encoding="utf-8")
        ds = load_csv(path, 1)
        assert ds.mask.tolist() == [[False, True, False], [True, False, True]]

    def test_round_trip_is_bit_exact(self, tmp_path):
        ds = gen_synthetic(SynthConfig(n=2000, input_dim=2, output_dim=3, seed=4))
        ds = mask_outputs(ds, 1, seed=0)
        back = load_csv(write_csv(ds, tmp_path / "sub" / "out.csv"), 2)
        assert np.array_equal(back.X, ds.X)
        assert np.array_equal(back.mask, ds.mask)
        assert np.array_equal(back.Y[ds.mask], ds.Y[ds.mask])

    def test_non_numeric_cell(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y\n1,2\n2,abc\n", encoding="utf-8")
        with pytest.raises(ValueError, match="abc"):
            load_csv(path, 1)

    def test_ragged_row(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("x,y\n1,2\n2,3,4\n", encoding="utf-8")
        with pytest.raises(ValueError, match="[Rr]agged"):
            load_csv(path, 1)

    def test_missing_input(self, tmp_path):
        path = tmp_path / "noinput.csv"
        path.write_text("x,y\n,2\n2,3\n", encoding="utf-8")
        with pytest.raises(ValueError, match="input"):
            load_csv(path, 1)

    def test_too_many_input_columns(self, data_csv):
        with pytest.raises(ValueError):
            load_csv(data_csv, 5)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_csv(tmp_path / "absent.csv", 1)


# ============================================================================
# Split and standardisation
# ============================================================================

class TestSplit:
    def test_sizes_and_disjoint(self, small_dataset):
        train, test = split(small_dataset, 0.25, seed=0, standardize=False)
        assert (train.n, test.n) == (30, 10)
        rows = {tuple(r) for r in train.X} | {tuple(r) for r in test.X}
        assert len(rows) == 40

    def test_standardised_with_train_statistics(self, small_dataset):
        train, test = split(small_dataset, 0.25, seed=0)
        assert train.standardized and test.standardized
        assert np.allclose(train.X.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(train.Y.std(axis=0), 1.0)
        assert np.array_equal(test.y_mean, train.y_mean)

    def test_raw_inverts_standardisation(self, small_dataset):
        train, test = split(small_dataset, 0.25, seed=0)
        raw_train, _ = split(small_dataset, 0.25, seed=0, standardize=False)
        assert np.allclose(train.raw().Y, raw_train.Y)
        assert not train.raw().standardized

    def test_seeded(self, small_dataset):
        a, _ = split(small_dataset, 0.2, seed=3)
        b, _ = split(small_dataset, 0.2, seed=3)
        assert np.array_equal(a.X, b.X)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 0.001])
    def test_invalid_fraction(self, small_dataset, fraction):
        with pytest.raises(ValueError):
            split(small_dataset, fraction, seed=0)

    def test_constant_column_keeps_unit_scale(self):
        ds = Dataset.from_arrays(np.ones((10, 1)), np.arange(10.0).reshape(-1, 1))
        train, _ = split(ds, 0.2, seed=0)
        assert train.x_std.tolist() == [1.0]


# ============================================================================
# Masks and the unsupervised view
# ============================================================================

class TestMasks:
    def test_exact_count_per_point(self, small_dataset):
        masked = mask_outputs(small_dataset, 2, seed=0)
        assert ((~masked.mask).sum(axis=1) == 2).all()
        assert np.isnan(masked.Y[~masked.mask]).all()

    def test_zero_is_identity(self, small_dataset):
        assert mask_outputs(small_dataset, 0, seed=0) is small_dataset

    def test_cannot_hide_every_output(self, small_dataset):
        with pytest.raises(ValueError):
            mask_outputs(small_dataset, 3, seed=0)

    def test_concat_unsupervised(self, small_dataset):
        ds = concat_unsupervised(small_dataset)
        assert (ds.d_x, ds.d_y) == (0, 5)
        assert np.array_equal(ds.Y[:, :2], small_dataset.X)
        assert ds.y_names[:2] == small_dataset.x_names

    def test_concat_twice_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            concat_unsupervised(concat_unsupervised(small_dataset))

    def test_inputs_cannot_be_missing(self):
        with pytest.raises(ValueError):
            Dataset.from_arrays(np.array([[np.nan]]), np.array([[1.0]]))
