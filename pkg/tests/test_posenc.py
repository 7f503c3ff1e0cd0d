import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from geomae.errors import InvalidArgumentError
from geomae.patchify import TokenGrid
from geomae.posenc import (
    GeoTemporalMetadata,
    MetadataBiasParams,
    apply_metadata_bias,
    default_split,
    draw_drop_flags,
    encode_date,
    encode_location,
    sample_drop_flags,
    sincos_1d,
    sincos_3d,
)


def scalar_sincos(p, dim):
    """Reference: one position, written out term by term."""
    half = dim // 2
    sins = [math.sin(p * 10000.0 ** (-2.0 * k / dim)) for k in range(half)]
    coss = [math.cos(p * 10000.0 ** (-2.0 * k / dim)) for k in range(half)]
    return sins + coss


class TestSincos1D:
    def test_zero_position(self):
        np.testing.assert_array_equal(sincos_1d([0], 4), [[0.0, 0.0, 1.0, 1.0]])

    def test_position_one_dim_four(self):
        expected = [math.sin(1), math.sin(0.01), math.cos(1), math.cos(0.01)]
        np.testing.assert_allclose(sincos_1d([1], 4)[0], expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(sincos_1d([1], 4)[0], [0.84147, 0.01000, 0.54030, 0.99995], atol=5e-6)

    def test_position_two_dim_two(self):
        np.testing.assert_allclose(sincos_1d([2], 2)[0], [math.sin(2), math.cos(2)], atol=1e-15)

    @pytest.mark.parametrize("dim", [0, 1, 3, 7])
    def test_bad_dim(self, dim):
        with pytest.raises(InvalidArgumentError):
            sincos_1d([0.0], dim)

    @given(
        st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=8),
        st.integers(1, 16).map(lambda k: 2 * k),
    )
    @settings(max_examples=50, deadline=None)
    def test_matches_scalar_formula_and_bounded(self, positions, dim):
        table = sincos_1d(positions, dim)
        assert table.shape == (len(positions), dim)
        assert np.all(np.abs(table) <= 1.0)
        for row, p in zip(table, positions):
            np.testing.assert_allclose(row, scalar_sincos(p, dim), atol=1e-9)


class TestSincos3D:
    def test_default_split_d8(self):
        assert default_split(8) == (2, 4, 2)

    def test_single_cell(self):
        table = sincos_3d(1, 1, 1, 8)
        np.testing.assert_array_equal(table.values, [[0, 1, 0, 0, 1, 1, 0, 1]])

    def test_index_decoding(self):
        table = sincos_3d(2, 2, 2, 8)
        assert table.values.shape == (8, 8)
        assert table.coords(5) == (1, 0, 1)

    @pytest.mark.parametrize("dims,D", [((4, 14, 14), 16), ((4, 8, 8), 8), ((3, 5, 7), 12), ((1, 2, 3), 64)])
    def test_rows_equal_concat_of_coordinate_codes(self, dims, D):
        T, gh, gw = dims
        table = sincos_3d(T, gh, gw, D)
        dt, dh, dw = table.split
        assert table.values.shape == (T * gh * gw, D)
        l = 0
        for t in range(T):
            for i in range(gh):
                for j in range(gw):
                    expected = scalar_sincos(t, dt) + scalar_sincos(i, dh) + scalar_sincos(j, dw)
                    np.testing.assert_allclose(table.values[l], expected, atol=1e-12)
                    assert table.coords(l) == (t, i, j)
                    l += 1

    def test_custom_split(self):
        table = sincos_3d(2, 2, 2, 12, split=(4, 4, 4))
        assert table.split == (4, 4, 4)

    @pytest.mark.parametrize("split", [(2, 2, 2), (3, 3, 2), (0, 4, 4), (2, 4)])
    def test_invalid_split(self, split):
        with pytest.raises(InvalidArgumentError):
            sincos_3d(2, 2, 2, 8, split=split)


class TestMetadataEncodings:
    def test_location_zero(self):
        np.testing.assert_array_equal(encode_location(0, 0, 8), [0, 0, 1, 1, 0, 0, 1, 1])

    def test_location_raw_degrees(self):
        expected = [math.sin(45), math.cos(45), math.sin(-120), math.cos(-120)]
        np.testing.assert_allclose(encode_location(45, -120, 4), expected, atol=1e-15)

    @pytest.mark.parametrize("lat,lon", [(90.5, 0), (-91, 0), (0, 180.5), (0, -181)])
    def test_location_out_of_range(self, lat, lon):
        with pytest.raises(InvalidArgumentError):
            encode_location(lat, lon, 8)

    def test_date_formula(self):
        expected = [math.sin(2020), math.cos(2020), math.sin(1), math.cos(1)]
        np.testing.assert_allclose(encode_date(2020, 1, 4), expected, atol=1e-12)
        eight = encode_date(2020, 1, 8)
        np.testing.assert_allclose(eight, scalar_sincos(2020, 4) + scalar_sincos(1, 4), atol=1e-12)

    def test_equal_dates_equal_vectors(self):
        np.testing.assert_array_equal(encode_date(2019, 200, 16), encode_date(2019, 200, 16))

    @pytest.mark.parametrize("doy", [0, 367, 400])
    def test_date_out_of_range(self, doy):
        with pytest.raises(InvalidArgumentError):
            encode_date(2020, doy, 8)

    def test_leap_day_accepted(self):
        assert encode_date(2020, 366, 8).shape == (8,)

    @pytest.mark.parametrize("D", [2, 6, 10])
    def test_dim_must_be_multiple_of_four(self, D):
        with pytest.raises(InvalidArgumentError):
            encode_location(0, 0, D)


def _grid(B=2, dims=(2, 2, 2), D=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    T, gh, gw = dims
    return TokenGrid(torch.randn(B, T * gh * gw, D, generator=g, dtype=torch.float64), dims)


META = GeoTemporalMetadata(12.5, -40.0, ((2019, 10), (2019, 200)))


class TestMetadataBias:
    def test_both_dropped_is_identity(self):
        grid = _grid()
        out = apply_metadata_bias(grid, META, MetadataBiasParams(), drop_time=True, drop_loc=True)
        assert torch.equal(out.data, grid.data)

    def test_zero_weights_is_identity(self):
        grid = _grid()
        out = apply_metadata_bias(grid, META, MetadataBiasParams(w_time=0.0, w_loc=0.0))
        assert torch.equal(out.data, grid.data)

    def test_single_token_location_only(self):
        grid = _grid(B=1, dims=(1, 1, 1))
        meta = GeoTemporalMetadata(12.5, -40.0, ((2019, 10),))
        out = apply_metadata_bias(grid, meta, MetadataBiasParams(w_loc=1.0), drop_time=True)
        expected = grid.data[0, 0].numpy() + np.array(scalar_sincos(12.5, 4) + scalar_sincos(-40.0, 4))
        np.testing.assert_allclose(out.data[0, 0].numpy(), expected, atol=1e-15)

    def test_per_frame_dates_and_shared_location(self):
        grid = TokenGrid(torch.zeros(1, 8, 8, dtype=torch.float64), (2, 2, 2))
        out = apply_metadata_bias(grid, META, MetadataBiasParams(w_time=2.0, w_loc=3.0)).data[0].numpy()
        loc = encode_location(META.lat, META.lon, 8)
        for l in range(8):
            t = l // 4
            expected = 2.0 * encode_date(*META.dates[t], 8) + 3.0 * loc
            np.testing.assert_allclose(out[l], expected, atol=1e-12)

    def test_linear_in_weights(self):
        grid = TokenGrid(torch.zeros(2, 8, 8, dtype=torch.float64), (2, 2, 2))
        once = apply_metadata_bias(grid, META, MetadataBiasParams(w_time=0.7, w_loc=-1.3)).data
        half = apply_metadata_bias(grid, META, MetadataBiasParams(w_time=0.35, w_loc=-0.65)).data
        torch.testing.assert_close(2 * half, once, rtol=0, atol=1e-12)

    def test_per_sample_flags(self):
        grid = _grid()
        out = apply_metadata_bias(grid, META, MetadataBiasParams(), drop_time=[True, False], drop_loc=[True, False])
        assert torch.equal(out.data[0], grid.data[0])
        assert not torch.equal(out.data[1], grid.data[1])

    def test_frame_count_mismatch(self):
        grid = _grid(dims=(3, 2, 2))
        with pytest.raises(InvalidArgumentError):
            apply_metadata_bias(grid, META, MetadataBiasParams())

    def test_batch_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            apply_metadata_bias(_grid(B=2), [META] * 3, MetadataBiasParams())

    def test_metadata_validation(self):
        with pytest.raises(InvalidArgumentError):
            GeoTemporalMetadata(95.0, 0.0, ((2020, 1),))
        with pytest.raises(InvalidArgumentError):
            GeoTemporalMetadata(0.0, 0.0, ((2020, 0),))


class TestDropFlags:
    @pytest.mark.parametrize("p,expected", [(0.0, (False, False)), (1.0, (True, True))])
    def test_degenerate_probabilities(self, p, expected):
        for seed in range(20):
            assert sample_drop_flags(p, seed) == expected

    def test_deterministic(self):
        assert sample_drop_flags(0.5, 123) == sample_drop_flags(0.5, 123)

    def test_rate_and_independence(self):
        flags = draw_drop_flags(0.1, np.random.default_rng(2024), 100_000)
        rates = flags.mean(axis=0)
        assert np.all(np.abs(rates - 0.1) <= 0.01)
        corr = np.corrcoef(flags[:, 0].astype(float), flags[:, 1].astype(float))[0, 1]
        assert abs(corr) < 0.02

    def test_bad_probability(self):
        with pytest.raises(InvalidArgumentError):
            sample_drop_flags(1.5, 0)
        with pytest.raises(InvalidArgumentError):
            MetadataBiasParams(drop_prob=-0.1)
