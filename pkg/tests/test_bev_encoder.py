import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import naive_encode

from bevkit.bev_encoder import (
    BevImage,
    GridConfig,
    band_of,
    cell_of,
    corrected_reflectance,
    encode,
    read_png,
    read_raw,
    render_png,
    write_raw,
)
from bevkit.errors import DomainError, MalformedFile

GRID = GridConfig()
SMALL = GridConfig(x_range=(0.0, 3.0), y_range=(-2.0, 2.0), cell_size=0.1)


def test_grid_defaults():
    assert (GRID.width, GRID.height) == (700, 800)
    assert GRID.shape == (800, 700, 3)


def test_grid_rejects_fractional_cells():
    with pytest.raises(ValueError):
        GridConfig(x_range=(0.0, 70.05))
    with pytest.raises(ValueError):
        GridConfig(band_edges=(1.3, 0.65))


def test_grid_text_round_trip():
    assert GridConfig.from_text(GRID.to_text()) == GRID
    assert GridConfig.from_text("cell_size=0.2\n").width == 350


@pytest.mark.parametrize("xy, cell", [((0.0, -40.0), (0, 0)), ((69.99, 39.99), (699, 799)), ((70.0, 0.0), None),
                                      ((-0.01, 0.0), None), ((10.0, 40.0), None)])
def test_cell_of(xy, cell):
    assert cell_of(*xy) == cell


@pytest.mark.parametrize("z, band", [(-1.5, 1), (-0.73, 2), (-1.08, 2), (-1.080002, 1), (-1.0800001, 2), (-0.43, 3), (5.0, 3),
                                     (-10.0, 1)])
def test_band_of(z, band):
    assert band_of(z) == band


def test_corrected_reflectance():
    assert corrected_reflectance(0.0) == pytest.approx(0.13)
    assert corrected_reflectance(1.0) == pytest.approx(1.43)
    assert corrected_reflectance(0.669230769) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DomainError):
        corrected_reflectance(1.01)


def test_empty_cloud():
    img = encode(np.zeros((0, 4), np.float32))
    assert img.pixels.shape == (800, 700, 3) and not img.pixels.any()


def test_single_point():
    img = encode(np.float32([[10.0, 0.0, -1.5, 0.5]]))
    assert img.pixels[400, 100, 0] == 199
    assert np.count_nonzero(img.pixels) == 1


def test_max_aggregation():
    pts = np.float32([[10.02, 0.03, -1.5, 0.2], [10.05, 0.01, -1.6, 0.4]])
    img = encode(pts)
    assert img.pixels[400, 100, 0] == round(255 * 1.3 * 0.5)


def test_out_of_roi_ignored():
    pts = np.float32([[-1, 0, 0, 0.5], [70, 0, 0, 0.5], [10, 40, 0, 0.5], [10, -40.01, 0, 0.5]])
    assert not encode(pts).pixels.any()


def test_saturation():
    img = encode(np.float32([[1.0, 1.0, 0.0, 0.67], [2.0, 1.0, 0.0, 1.0]]))
    assert img.pixels[410, 10, 2] == 255 and img.pixels[410, 20, 2] == 255


clouds = st.integers(0, 60).flatmap(lambda n: arrays(
    np.float32, (n, 4),
    elements=st.floats(-3, 4, width=32),
)).map(lambda a: np.column_stack([a[:, 0], a[:, 1] - 0.5, a[:, 2] - 2, np.abs(a[:, 3]) / 4]).astype(np.float32))


@given(clouds)
def test_oracle_small_grid(cloud):
    assert np.array_equal(encode(cloud, SMALL).pixels, naive_encode(cloud, SMALL))


@given(clouds, st.randoms(use_true_random=False))
def test_permutation_invariance(cloud, rnd):
    perm = list(range(len(cloud)))
    rnd.shuffle(perm)
    assert np.array_equal(encode(cloud, SMALL).pixels, encode(cloud[perm], SMALL).pixels)


@given(clouds, clouds)
def test_adding_points_is_monotone(a, b):
    base = encode(a, SMALL).pixels
    more = encode(np.concatenate([a, b]), SMALL).pixels
    assert (more >= base).all()


@given(clouds)
def test_sparsity(cloud):
    img = encode(cloud, SMALL)
    n_in = sum(cell_of(float(x), float(y), SMALL) is not None for x, y in cloud[:, :2])
    assert np.count_nonzero(img.pixels) <= n_in


def test_png_round_trip_and_channels(tmp_path):
    img = encode(np.float32([[10.0, 0.0, 1.0, 0.5]]))  # band 3 -> blue
    render_png(img, tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    assert back == img
    from PIL import Image

    with Image.open(tmp_path / "a.png") as im:
        assert im.size == (700, 800) and im.mode == "RGB"
        assert im.getpixel((100, 400)) == (0, 0, 199)


def test_black_png(tmp_path):
    render_png(BevImage(np.zeros(GRID.shape, np.uint8), GRID), tmp_path / "z.png")
    assert not read_png(tmp_path / "z.png").pixels.any()


def test_raw_round_trip(tmp_path):
    img = encode(np.random.default_rng(0).uniform(0, 1, (500, 4)).astype(np.float32) * [70, 80, 3, 1] - [0, 40, 2, 0])
    write_raw(img, tmp_path / "a.bev")
    assert read_raw(tmp_path / "a.bev") == img
    (tmp_path / "bad.bev").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(MalformedFile):
        read_raw(tmp_path / "bad.bev")
