"""Vanilla-gradient saliency maps, overlays and netpbm output.

A map is ``|d loss / d input|`` for a single grayscale image, divided by its
maximum when that is positive. Overlays blend the grayscale image with the
map coloured through the fixed lookup table in ``resources/colormap.txt``.

Bytes are written as ``floor(v * 255 + 0.5)`` after clamping to [0, 1].
"""

from __future__ import annotations

import functools
import os
from importlib import resources
from typing import Tuple

import numpy as np

from .data import IMAGE_SIZE, FerRecord, crop_offsets
from .errors import ShapeError
from .nn import softmax_cross_entropy


@functools.lru_cache(maxsize=1)
def colormap() -> np.ndarray:
    """The 256 x 3 uint8 lookup table."""
    text = resources.files("fervgg").joinpath("resources/colormap.txt").read_text()
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    lut = np.array(rows, dtype=np.uint8)
    assert lut.shape == (256, 3)
    return lut


def quantize(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def saliency(model, image: np.ndarray, label: int, target: str = "loss") -> np.ndarray:
    """Saliency of one image (``h x w`` or ``1 x 1 x h x w``) w.r.t. ``label``.

    ``target="loss"`` differentiates the cross-entropy against ``label``;
    ``target="logit"`` differentiates that class's logit instead.
    """
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None, None]
    if x.ndim != 4 or x.shape[:2] != (1, 1):
        raise ShapeError(f"saliency expects a single grayscale image, got {x.shape}")
    logits = model.forward(x, "eval")
    if target == "loss":
        upstream = softmax_cross_entropy(logits, np.array([label])).logit_grad
    elif target == "logit":
        upstream = np.zeros_like(logits)
        upstream[0, label] = 1
    else:
        raise ValueError(f"unknown saliency target {target!r}")
    model.backward(upstream)
    sal = np.abs(model.input_grad[0, 0]).astype(np.float64)
    peak = sal.max()
    if peak > 0:
        sal /= peak
    return sal


def record_saliency(model, record: FerRecord, crop_size: int = 40, target: str = "loss"):
    """Map of the centre crop, zero-padded back to 48 x 48.

    Returns ``(original in [0, 1], map)``, both 48 x 48.
    """
    original = record.pixels.astype(np.float64) / 255.0
    r, c = crop_offsets(IMAGE_SIZE, crop_size)[4]
    crop = original[r:r + crop_size, c:c + crop_size]
    full = np.zeros_like(original)
    full[r:r + crop_size, c:c + crop_size] = saliency(model, crop, record.label, target)
    return original, full


def colorize(sal_map: np.ndarray) -> np.ndarray:
    return colormap()[quantize(sal_map)].astype(np.float64) / 255.0


def superimpose(sal_map: np.ndarray, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """``(1 - alpha) * gray + alpha * colorized(map)`` as an ``h x w x 3`` image in [0, 1]."""
    if sal_map.shape != image.shape or image.ndim != 2:
        raise ShapeError(f"map {sal_map.shape} and image {image.shape} must be equal 2-d shapes")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    gray = np.repeat(np.asarray(image, dtype=np.float64)[..., None], 3, axis=2)
    return np.clip((1 - alpha) * gray + alpha * colorize(sal_map), 0.0, 1.0)


def encode_image(image: np.ndarray) -> bytes:
    """Binary netpbm: P5 for ``h x w``, P6 for ``h x w x 3``."""
    image = np.asarray(image)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot encode image of shape {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + quantize(image).tobytes()


def write_image(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(image))


def decode_image(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError("only 8-bit P5/P6 images are supported")
    channels = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    if raw.size != w * h * channels:
        raise ValueError("truncated netpbm payload")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raw.reshape(shape).astype(np.float64) / 255.0


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def write_triptych(original: np.ndarray, sal_map: np.ndarray, out_dir, stem: str,
                   alpha: float = 0.5) -> Tuple[str, str, str]:
    """Write original (P5), map (P5) and overlay (P6); returns the three paths."""
    paths = (os.path.join(out_dir, f"{stem}_original.pgm"),
             os.path.join(out_dir, f"{stem}_saliency.pgm"),
             os.path.join(out_dir, f"{stem}_overlay.ppm"))
    write_image(original, paths[0])
    write_image(sal_map, paths[1])
    write_image(superimpose(sal_map, original, alpha), paths[2])
    return paths
