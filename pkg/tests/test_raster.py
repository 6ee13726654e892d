import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lczmap.errors import (
    GeometryMismatchError,
    MalformedRasterError,
    NodataContaminationError,
    OutOfBoundsError,
)
from lczmap.raster import (
    DEFAULT_NODATA,
    RasterGrid,
    compute_ndvi,
    extract_patch,
    load_raster,
    map_point_to_pixel,
    payload_path,
    resample_mean,
    save_raster,
)

from .conftest import make_grid

ND = DEFAULT_NODATA


def write_raw(tmp_path, header: dict, payload: bytes):
    hp = tmp_path / "r.json"
    base = {"magic": "RAWG", "version": 1, "pixel_size_m": 10.0, "origin_x": 0.0,
            "origin_y": 0.0, "nodata": ND, "dtype": "f32le", "interleave": "bsq"}
    hp.write_text(json.dumps({**base, **header}))
    payload_path(hp).write_bytes(payload)
    return hp


def test_load_4x4_single_band(tmp_path):
    hp = write_raw(tmp_path, {"width": 4, "height": 4, "bands": 1}, np.arange(16, dtype="<f4").tobytes())
    g = load_raster(hp)
    assert (g.n_bands, g.height, g.width) == (1, 4, 4)
    assert g.data[0, 3, 2] == 14


def test_load_size_mismatch(tmp_path):
    hp = write_raw(tmp_path, {"width": 4, "height": 4, "bands": 2}, bytes(64))
    with pytest.raises(MalformedRasterError):
        load_raster(hp)


def test_load_rejects_nan(tmp_path):
    data = np.zeros(16, "<f4")
    data[3] = np.nan
    hp = write_raw(tmp_path, {"width": 4, "height": 4, "bands": 1}, data.tobytes())
    with pytest.raises(MalformedRasterError):
        load_raster(hp)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_raster(tmp_path / "nope.json")


def test_round_trip_bit_exact(tmp_path, rng):
    data = rng.standard_normal((3, 7, 5)).astype(np.float32)
    data[1, 2, 3] = ND
    g = RasterGrid(data, pixel_size_m=2.5, origin_x=100.0, origin_y=-3.0)
    save_raster(g, tmp_path / "a.json")
    back = load_raster(tmp_path / "a.json")
    assert back.data.tobytes() == g.data.tobytes()
    assert (back.pixel_size_m, back.origin_x, back.origin_y, back.nodata) == (2.5, 100.0, -3.0, ND)
    save_raster(back, tmp_path / "b.json")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_header_fields(tmp_path):
    save_raster(make_grid(np.zeros((2, 3))), tmp_path / "h.json")
    h = json.loads((tmp_path / "h.json").read_text())
    assert h["magic"] == "RAWG" and h["version"] == 1
    assert (h["width"], h["height"], h["bands"]) == (3, 2, 1)
    assert h["dtype"] == "f32le" and h["interleave"] == "bsq"


def test_grid_rejects_bad_pixel_size():
    with pytest.raises(MalformedRasterError):
        RasterGrid(np.zeros((1, 2, 2), np.float32), pixel_size_m=0)


@pytest.mark.parametrize("nir,red,expected", [(0.8, 0.2, 0.6), (0.3, 0.3, 0.0)])
def test_ndvi_values(nir, red, expected):
    data = np.zeros((4, 1, 1), np.float32)
    data[3], data[2] = nir, red
    assert compute_ndvi(make_grid(data)).data[0, 0, 0] == pytest.approx(expected, abs=1e-6)


def test_ndvi_zero_sum_and_nodata():
    data = np.zeros((4, 1, 3), np.float32)
    data[3, 0] = [0.0, ND, 0.5]
    data[2, 0] = [0.0, 0.2, 0.5]
    out = compute_ndvi(make_grid(data)).data[0, 0]
    assert out[0] == ND and out[1] == ND and out[2] == 0.0


def test_ndvi_band_out_of_range():
    with pytest.raises(IndexError):
        compute_ndvi(make_grid(np.zeros((2, 2, 2))), nir_band=3, red_band=2)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, (4, 3, 3), elements=st.floats(-1e4, 1e4, width=32)))
def test_ndvi_in_range_or_nodata(data):
    out = compute_ndvi(make_grid(data)).data
    ok = (out == ND) | ((out >= -1) & (out <= 1))
    assert ok.all()


def test_resample_identity(rng):
    g = make_grid(rng.random((2, 5, 5)))
    assert np.array_equal(resample_mean(g, 10.0).data, g.data)


def test_resample_mean_and_nodata():
    g = make_grid([[1, 2], [3, 4]])
    assert resample_mean(g, 20.0).data[0, 0, 0] == 2.5
    g = make_grid([[1, ND], [3, ND]])
    assert resample_mean(g, 20.0).data[0, 0, 0] == 2.0
    g = make_grid([[ND, ND], [ND, ND]])
    assert resample_mean(g, 20.0).data[0, 0, 0] == ND


def test_resample_floor_dims_and_ratio_error():
    g = make_grid(np.ones((7, 9)))
    out = resample_mean(g, 30.0)
    assert (out.height, out.width, out.pixel_size_m) == (2, 3, 30.0)
    with pytest.raises(GeometryMismatchError):
        resample_mean(g, 25.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2))
def test_resample_commutes_with_band_selection(k, band):
    data = np.random.default_rng(k * 10 + band).random((3, 6, 6)).astype(np.float32)
    g = make_grid(data)
    a = resample_mean(g, 10.0 * k).select_bands([band])
    b = resample_mean(g.select_bands([band]), 10.0 * k)
    assert np.array_equal(a.data, b.data)


def test_extract_whole_grid(rng):
    g = make_grid(rng.random((2, 32, 32)))
    p = extract_patch(g, 16, 16, 32)
    assert np.array_equal(p.data, g.data) and (p.center_row, p.center_col) == (16, 16)


def test_extract_out_of_bounds():
    with pytest.raises(OutOfBoundsError):
        extract_patch(make_grid(np.zeros((32, 32))), 10, 16, 32)


def test_extract_window_origin():
    data = np.zeros((64, 64), np.float32)
    data[5, 7] = 99
    p = extract_patch(make_grid(data), 21, 23, 32)
    assert p.data[0, 0, 0] == 99


def test_extract_nodata_rejected():
    data = np.zeros((40, 40), np.float32)
    data[20, 20] = ND
    with pytest.raises(NodataContaminationError):
        extract_patch(make_grid(data), 20, 20, 32)


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 28), st.integers(4, 28), st.integers(0, 7), st.integers(0, 7))
def test_patch_elements_match_source(r, c, i, j):
    data = np.random.default_rng(r * 31 + c).random((2, 32, 32)).astype(np.float32)
    p = extract_patch(make_grid(data), r, c, 8)
    assert p.data[1, i, j] == data[1, r - 4 + i, c - 4 + j]


def test_map_point_to_pixel():
    g = make_grid(np.zeros((100, 100)), origin_x=0.0, origin_y=1000.0)
    assert map_point_to_pixel(g, 5, 995) == (0, 0)
    assert map_point_to_pixel(g, 995, 5) == (99, 99)
    with pytest.raises(OutOfBoundsError):
        map_point_to_pixel(g, -1, 500)


def test_nodata_default_is_float32_exact():
    assert np.float32(ND) == ND and not math.isnan(ND)
