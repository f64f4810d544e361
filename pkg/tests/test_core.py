import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbill.core import (ColorGridConfig, ImagePlaneCamera, SplatFileError, SplatSet, activate,
                        logit, parse, serialize, sigmoid)
from gbill.raster import RasterConfig, render

from .conftest import make_splats


def test_activate_examples():
    s = make_splats([[0, 0]], scale=1.0, logit=0.0)
    alpha, su, sv = activate(s, 0)
    assert alpha == 0.5
    assert su == 1.0 and sv == 1.0
    s.opacity_logits[0] = 20.0
    assert abs(activate(s, 0)[0] - 1.0) < 1e-8


def test_activate_index_out_of_range():
    s = make_splats([[0, 0]])
    with pytest.raises(IndexError):
        activate(s, 1)
    with pytest.raises(IndexError):
        activate(s, -1)


def test_scale_underflow_is_clamped():
    s = make_splats([[0, 0]])
    s.log_scales[0] = (-50.0, 0.0)
    assert activate(s, 0)[1] == 1e-8


@pytest.mark.parametrize("x", [-8.0, -3.0, -0.2, 0.0, 0.7, 4.0, 8.0])
def test_activation_derivatives_match_finite_differences(x):
    h = 1e-5
    fd_sig = (sigmoid(x + h) - sigmoid(x - h)) / (2 * h)
    s = sigmoid(x)
    assert fd_sig == pytest.approx(s * (1 - s), rel=1e-6, abs=1e-300)
    fd_exp = (math.exp(x / 10 + h) - math.exp(x / 10 - h)) / (2 * h)
    assert fd_exp == pytest.approx(math.exp(x / 10), rel=1e-6)


def test_activations_monotone():
    xs = np.linspace(-30, 30, 1001)
    assert np.all(np.diff(sigmoid(xs)) >= 0)
    assert np.all(np.diff(np.exp(xs)) > 0)
    assert logit(0.5) == 0.0


@pytest.mark.parametrize("n,sigma", [(0, 0.5), (2, 0.0), (2, -1.0), (1.5, 0.5)])
def test_grid_config_rejects_invalid(n, sigma):
    with pytest.raises(ValueError):
        ColorGridConfig(n, sigma)


def test_camera_rejects_empty():
    with pytest.raises(ValueError):
        ImagePlaneCamera(0, 4)


def test_splat_set_checks_grid_size():
    with pytest.raises(ValueError):
        SplatSet(np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.zeros((2, 2)), np.zeros(2),
                 np.zeros((2, 2, 2, 3)), ColorGridConfig(4, 0.5))


# serialization ---------------------------------------------------------------

def test_empty_set_is_header_only():
    data = serialize(SplatSet.empty(ColorGridConfig(2, 0.5)))
    assert len(data) == 4 + 4 * 4
    assert data[:4] == b"GBIL"
    back = parse(data)
    assert back.count == 0 and back.grid_config == ColorGridConfig(2, 0.5)


def test_record_layout():
    grids = np.arange(2 * 2 * 3, dtype=float).reshape(1, 2, 2, 3)
    s = SplatSet([[1, 2]], [3], [4], [[5, 6]], [7], grids, ColorGridConfig(2, 0.25))
    data = serialize(s)
    values = np.frombuffer(data[20:], dtype="<f4")
    np.testing.assert_array_equal(values, np.concatenate([np.arange(1, 8), np.arange(12)]))


def test_truncated_file_names_record():
    s = make_splats(np.zeros((5, 2)), n=2)
    data = serialize(s)
    record = (len(data) - 20) // 5
    with pytest.raises(SplatFileError, match="record 4"):
        parse(data[:-record])
    with pytest.raises(SplatFileError, match="record 4"):
        parse(data[:-3])


def test_bad_magic_and_version():
    data = bytearray(serialize(make_splats([[0, 0]])))
    with pytest.raises(SplatFileError, match="magic"):
        parse(b"XXXX" + bytes(data[4:]))
    data[4] = 2
    with pytest.raises(SplatFileError, match="version"):
        parse(bytes(data))
    with pytest.raises(SplatFileError, match="header"):
        parse(b"GBI")


@st.composite
def splat_sets(draw):
    k = draw(st.integers(0, 6))
    n = draw(st.sampled_from([1, 2, 3, 4, 8]))
    sigma = draw(st.floats(0.015625, 10.0, width=32))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)

    def f32(shape, scale):
        return (rng.standard_normal(shape) * scale).astype(np.float32)

    return SplatSet(f32((k, 2), 100), f32(k, 1), f32(k, 3), f32((k, 2), 2), f32(k, 5),
                    f32((k, n, n, 3), 1), ColorGridConfig(n, sigma))


@settings(max_examples=200, deadline=None)
@given(splat_sets())
def test_round_trip_identity(s):
    data = serialize(s)
    back = parse(data)
    assert back.equals(s)
    assert serialize(back) == data


def test_quantized_round_trip(rng):
    s = make_splats(rng.uniform(0, 10, (3, 2)), n=2, grids=rng.uniform(size=(3, 2, 2, 3)))
    q = s.quantized()
    assert parse(serialize(s)).equals(q)


def test_n1_grid_renders_as_solid_color(rng):
    camera = ImagePlaneCamera(24, 24)
    colors = rng.uniform(size=(4, 3))
    base = make_splats(rng.uniform(4, 20, (4, 2)), n=1, scale=3.0, logit=1.0,
                       grids=colors.reshape(4, 1, 1, 3))
    img = render(base, camera, RasterConfig.exact()).color
    # same geometry composited by hand with one color per splat
    xs, ys = camera.pixel_centers()
    trans = np.ones(xs.shape)
    acc = np.zeros(xs.shape + (3,))
    for k in np.argsort(base.depth_keys):
        r2 = ((xs - base.positions[k, 0]) ** 2 + (ys - base.positions[k, 1]) ** 2) / 9.0
        a = sigmoid(1.0) * np.exp(-0.5 * r2)
        acc += colors[k] * (a * trans)[..., None]
        trans *= 1 - a
    np.testing.assert_allclose(img, acc, atol=1e-6)
