from pathlib import Path

import numpy as np
import pytest

from fervgg.data import synthetic_records
from fervgg.errors import ShapeError
from fervgg.model import SCALED_CONFIG, VggConfig, build
from fervgg.nn import Conv2d, Flatten, Linear
from fervgg.saliency import (colormap, decode_image, encode_image, quantize, read_image, record_saliency,
                             saliency, superimpose, write_image, write_triptych)
from fervgg.tensor import SeededRng

GOLDEN = Path(__file__).parent / "golden"


class LinearToy:
    """conv(3x3) -> flatten -> linear with rank-one logit rows; no nonlinearity."""

    def __init__(self, rng, size=12):
        self.conv = Conv2d(rng.normal(size=(1, 1, 3, 3)), np.zeros(1))
        u = rng.normal(size=size * size)
        self.fc = Linear(np.outer(np.arange(1.0, 8.0), u) * 0.01, np.zeros(7))
        self.layers = [self.conv, Flatten(), self.fc]
        self.input_grad = None

    def forward(self, x, mode="eval", rng=None):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        return {}


def _model(seed=0):
    return build(VggConfig(**SCALED_CONFIG, dtype="float64"), SeededRng(seed))


def test_zero_weight_model_gives_zero_map():
    model = _model()
    for name, p in model.params.items():
        if name.endswith("weight"):
            p[:] = 0
    img = np.random.default_rng(0).random((40, 40))
    sal = saliency(model, img, 3)
    assert sal.shape == (40, 40)
    assert not sal.any()


@pytest.mark.parametrize("seed", range(4))
def test_map_is_normalized(seed):
    model = _model(seed)
    img = np.random.default_rng(seed).random((40, 40))
    for target in ("loss", "logit"):
        sal = saliency(model, img, seed % 7, target)
        assert sal.min() >= 0 and sal.max() == 1.0


def test_linear_toy_argmax_stable_under_weight_doubling():
    toy = LinearToy(np.random.default_rng(1))
    img = np.random.default_rng(2).random((12, 12))
    before = saliency(toy, img, 2)
    raw_before = np.abs(toy.input_grad).copy()
    toy.conv.params["weight"] *= 2
    after = saliency(toy, img, 2)
    raw_after = np.abs(toy.input_grad)
    assert not np.allclose(raw_before, raw_after)
    assert np.argmax(before) == np.argmax(after)
    np.testing.assert_allclose(before, after, atol=1e-12)


def test_record_saliency_pads_centre_crop():
    rec = synthetic_records({"Training": 1}, seed=0)[0]
    original, full = record_saliency(_model(), rec)
    assert original.shape == full.shape == (48, 48)
    assert not full[:4].any() and not full[44:].any() and not full[:, :4].any() and not full[:, 44:].any()
    assert full.max() == 1.0


def test_colormap_table():
    lut = colormap()
    assert lut.shape == (256, 3) and lut.dtype == np.uint8
    assert tuple(lut[0]) == (0, 0, 128)
    assert tuple(lut[255]) == (128, 0, 0)


def test_superimpose_cases():
    img = np.random.default_rng(0).random((5, 5))
    sal = np.random.default_rng(1).random((5, 5))
    np.testing.assert_array_equal(superimpose(sal, img, 0.0), np.repeat(img[..., None], 3, axis=2))
    floor = superimpose(np.zeros((5, 5)), img, 1.0)
    np.testing.assert_array_equal(floor, np.broadcast_to(colormap()[0] / 255.0, (5, 5, 3)))
    out = superimpose(sal, img * 3, 0.3)
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ShapeError):
        superimpose(np.zeros((4, 4)), img)


def test_quantization_convention():
    assert quantize(np.array([0.5]))[0] == 128
    assert quantize(np.array([0.0, 1.0, -1.0, 2.0])).tolist() == [0, 255, 0, 255]


def test_golden_files():
    assert encode_image(np.ones((2, 2))) == (GOLDEN / "white_2x2.pgm").read_bytes()
    ramp = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 1 / 255]])
    assert encode_image(ramp) == (GOLDEN / "ramp_3x2.pgm").read_bytes()
    overlay = superimpose(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), 0.5)
    assert encode_image(overlay) == (GOLDEN / "overlay_2x1.ppm").read_bytes()


def test_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    gray = rng.random((7, 5))
    color = rng.random((4, 6, 3))
    for name, img in (("g.pgm", gray), ("c.ppm", color)):
        write_image(img, tmp_path / name)
        back = read_image(tmp_path / name)
        np.testing.assert_array_equal(quantize(back), quantize(img))
    assert decode_image(b"P5\n# comment\n1 1\n255\n\x80")[0, 0] == 128 / 255


def test_write_triptych_files(tmp_path):
    img = np.random.default_rng(0).random((6, 6))
    sal = np.random.default_rng(1).random((6, 6))
    paths = write_triptych(img, sal, tmp_path, "x")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["x_original.pgm", "x_overlay.ppm", "x_saliency.pgm"]
    assert Path(paths[2]).read_bytes()[:2] == b"P6"
