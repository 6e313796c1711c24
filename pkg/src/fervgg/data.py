"""FER2013 ingestion, augmentation, ten-crop generation and batching.

The CSV has the header ``emotion,pixels,Usage`` with 2304 space-separated
pixel values per row. Usage is one of Training, PublicTest, PrivateTest;
by default these serve as train, validation and test splits.

Train-mode pipeline per image: ``augment`` (rescale, shift, rotate, each
with probability 0.5, in that order) -> ``ten_crop`` -> ``random_erase`` on
every crop -> divide by 255. Randomness for each record is drawn from its
own substream keyed by ``(epoch, record index)``.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, TextIO, Tuple

import numpy as np
from scipy import ndimage

from .errors import DataError, ParseError, ShapeError
from .tensor import SeededRng

IMAGE_SIZE = 48
N_PIXELS = IMAGE_SIZE * IMAGE_SIZE
N_CLASSES = 7
CLASS_NAMES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
SPLITS = ("Training", "PublicTest", "PrivateTest")
HEADER = ["emotion", "pixels", "Usage"]

OFFICIAL_SPLIT_SIZES = {"Training": 28709, "PublicTest": 3589, "PrivateTest": 3589}
QUOTED_TOTAL = 35888


class DatasetSizeWarning(UserWarning):
    pass


@dataclass
class FerRecord:
    label: int
    pixels: np.ndarray  # 48 x 48 uint8
    split: str
    index: int = 0

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeError(f"record pixels must be 48x48, got {self.pixels.shape}")
        if not 0 <= self.label < N_CLASSES:
            raise DataError(f"label {self.label} out of range")


@dataclass
class AugmentConfig:
    rescale: float = 0.2
    shift: float = 0.2
    rotation: float = 10.0
    p_transform: float = 0.5
    p_erase: float = 0.5
    erase_area_min: float = 0.02
    erase_area_max: float = 0.33
    erase_aspect_min: float = 0.3
    erase_aspect_max: float = 3.3
    crop_size: int = 40

    def __post_init__(self):
        for name in ("p_transform", "p_erase"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.crop_size < IMAGE_SIZE:
            raise ValueError("crop_size must be smaller than the 48-pixel image")
        if not 0 < self.erase_area_min <= self.erase_area_max <= 1:
            raise ValueError("erase area range must satisfy 0 < min <= max <= 1")
        if not 0 < self.erase_aspect_min <= self.erase_aspect_max:
            raise ValueError("erase aspect range must satisfy 0 < min <= max")


@dataclass
class Batch:
    images: np.ndarray        # (m, 1, crop, crop), values in [0, 1]
    labels: np.ndarray        # (m,)
    record_ids: np.ndarray    # (m,) source record index per crop
    crop_ids: np.ndarray      # (m,) 0..9 position in the ten-crop order

    def __len__(self):
        return len(self.labels)


# -- CSV -------------------------------------------------------------------

def parse_csv(stream: TextIO, warn_on_size: bool = True):
    """Parse and validate a FER2013 CSV.

    Returns ``(records, counts)`` with ``counts`` mapping split name to row
    count. Malformed rows raise :class:`ParseError` carrying the line number.
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty file", line=1) from None
    if [h.strip() for h in header] != HEADER:
        raise ParseError(f"expected header {','.join(HEADER)}, got {','.join(header)}", line=1)
    records = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line=line)
        label_s, pixels_s, usage = row
        try:
            label = int(label_s)
        except ValueError:
            raise ParseError(f"non-integer label {label_s!r}", line=line) from None
        if not 0 <= label < N_CLASSES:
            raise ParseError(f"label {label} outside [0, 6]", line=line)
        usage = usage.strip()
        if usage not in SPLITS:
            raise ParseError(f"unknown Usage {usage!r}", line=line)
        tokens = pixels_s.split()
        if len(tokens) != N_PIXELS:
            raise ParseError(f"expected {N_PIXELS} pixels, got {len(tokens)}", line=line)
        try:
            values = np.array(tokens, dtype=np.int64)
        except ValueError:
            bad = next(t for t in tokens if not t.lstrip("-").isdigit())
            raise ParseError(f"non-integer pixel {bad!r}", line=line) from None
        if values.min() < 0 or values.max() > 255:
            raise ParseError("pixel value outside [0, 255]", line=line)
        records.append(FerRecord(label, values.astype(np.uint8).reshape(IMAGE_SIZE, IMAGE_SIZE),
                                 usage, index=len(records)))
    counts = split_counts(records)
    if warn_on_size:
        check_official_size(counts)
    return records, counts


def read_csv(path, warn_on_size: bool = True):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh, warn_on_size=warn_on_size)


def split_counts(records: Iterable[FerRecord]) -> Dict[str, int]:
    counts = Counter(r.split for r in records)
    return {s: counts.get(s, 0) for s in SPLITS}


def check_official_size(counts: Dict[str, int]) -> bool:
    """Warn when a full official file is loaded: it holds one image fewer than the commonly quoted 35888."""
    total = sum(counts.values())
    if counts == OFFICIAL_SPLIT_SIZES and total != QUOTED_TOTAL:
        warnings.warn(f"dataset has {total} images (28709/3589/3589); "
                      f"published description says {QUOTED_TOTAL}", DatasetSizeWarning, stacklevel=3)
        return True
    return False


def write_csv(records: Iterable[FerRecord], stream: TextIO) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(HEADER)
    for r in records:
        writer.writerow([r.label, " ".join(map(str, r.pixels.ravel().tolist())), r.split])


def stats_table(records: Sequence[FerRecord]) -> List[str]:
    """Per-class per-split counts as tab-separated lines (header first, totals last)."""
    counts = Counter((r.split, r.label) for r in records)
    lines = ["class\tname\t" + "\t".join(SPLITS) + "\ttotal"]
    for c in range(N_CLASSES):
        row = [counts.get((s, c), 0) for s in SPLITS]
        lines.append(f"{c}\t{CLASS_NAMES[c]}\t" + "\t".join(map(str, row)) + f"\t{sum(row)}")
    totals = [sum(counts.get((s, c), 0) for c in range(N_CLASSES)) for s in SPLITS]
    lines.append("total\t-\t" + "\t".join(map(str, totals)) + f"\t{sum(totals)}")
    return lines


# -- record selection ----------------------------------------------------

def select_split(records: Sequence[FerRecord], split: str) -> List[FerRecord]:
    return [r for r in records if r.split == split]


def limit_per_class(records: Sequence[FerRecord], n: int) -> List[FerRecord]:
    """Keep the first ``n`` records of every (split, class) pair, in file order."""
    seen: Counter = Counter()
    out = []
    for r in records:
        key = (r.split, r.label)
        if seen[key] < n:
            seen[key] += 1
            out.append(r)
    return out


def merge_train_val(records: Sequence[FerRecord], val_split: str = "PublicTest",
                    train_split: str = "Training") -> List[FerRecord]:
    out = []
    for r in records:
        if r.split == val_split:
            r = FerRecord(r.label, r.pixels, train_split, r.index)
        out.append(r)
    return out


def synthetic_records(per_class: Dict[str, int], seed: int = 0, noise: float = 40.0) -> List[FerRecord]:
    """FER-format stand-in data: a face-like blob carrying a class-specific texture.

    Classes 0-5 are horizontal, vertical or crossed stripes at a low or a high
    spatial frequency; class 6 has no texture. These cues survive horizontal
    mirroring, small rotations and rescaling, so the classes stay learnable
    under the full augmentation pipeline. ``per_class`` maps split name to the
    number of images per class.
    """
    rng = SeededRng(seed, stream=7)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) - (IMAGE_SIZE - 1) / 2
    face = np.exp(-(xx ** 2 + (yy / 1.2) ** 2) / (2 * 14.0 ** 2))
    records = []
    for split in SPLITS:
        n = per_class.get(split, 0)
        for i in range(n * N_CLASSES):
            label = i % N_CLASSES
            freq = (0.3, 0.9)[label % 2] * rng.uniform(0.9, 1.1)
            rows = np.cos(freq * yy + rng.uniform(0, 2 * math.pi))
            cols = np.cos(freq * xx + rng.uniform(0, 2 * math.pi))
            texture = (rows, cols, (rows + cols) / math.sqrt(2), np.zeros_like(face))[min(label // 2, 3)]
            img = 110 + 60 * face + 50 * texture * face + rng.normal(0, noise, face.shape)
            pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            records.append(FerRecord(label, pixels, split, index=len(records)))
    return records


# -- geometric augmentation ----------------------------------------------

_CENTER = (IMAGE_SIZE - 1) / 2.0


def _resample(image: np.ndarray, matrix: np.ndarray, offset) -> np.ndarray:
    # output[o] = input[matrix @ o + offset], bilinear, zero outside
    return ndimage.affine_transform(image.astype(np.float64), matrix, offset=offset,
                                    order=1, mode="constant", cval=0.0, prefilter=False)


def rescale(image: np.ndarray, factor: float) -> np.ndarray:
    """Zoom about the centre, keeping the 48x48 frame (crop or zero-pad)."""
    c = np.array([_CENTER, _CENTER])
    m = np.eye(2) / factor
    return _resample(image, m, c - m @ c)


def shift(image: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Translate content by ``dx`` columns and ``dy`` rows, zero-filling vacated pixels."""
    return _resample(image, np.eye(2), (-dy, -dx))


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre (counter-clockwise on screen for positive angles)."""
    t = math.radians(degrees)
    # maps output (row, col) back to input coordinates
    m = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    c = np.array([_CENTER, _CENTER])
    return _resample(image, m, c - m @ c)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: SeededRng) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    p = cfg.p_transform
    if rng.random() < p:
        out = rescale(out, rng.uniform(1 - cfg.rescale, 1 + cfg.rescale))
    if rng.random() < p:
        limit = cfg.shift * IMAGE_SIZE
        out = shift(out, rng.uniform(-limit, limit), rng.uniform(-limit, limit))
    if rng.random() < p:
        out = rotate(out, rng.uniform(-cfg.rotation, cfg.rotation))
    return out


# -- crops -----------------------------------------------------------------

def crop_offsets(image_size: int = IMAGE_SIZE, crop_size: int = 40) -> List[Tuple[int, int]]:
    """(row, col) offsets: four corners then the centre."""
    d = image_size - crop_size
    return [(0, 0), (0, d), (d, 0), (d, d), (d // 2, d // 2)]


def ten_crop(image: np.ndarray, crop_size: int = 40) -> np.ndarray:
    """Ten crops of ``crop_size``: the five offsets, then the horizontal mirror of each."""
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"ten_crop expects a 48x48 image, got {image.shape}")
    crops = [image[r:r + crop_size, c:c + crop_size] for r, c in crop_offsets(IMAGE_SIZE, crop_size)]
    crops += [c[:, ::-1] for c in crops]
    return np.stack(crops)


def random_erase(crop: np.ndarray, cfg: AugmentConfig, rng: SeededRng) -> np.ndarray:
    out = np.array(crop, dtype=np.float64)
    if rng.random() >= cfg.p_erase:
        return out
    h, w = out.shape
    area = rng.uniform(cfg.erase_area_min, cfg.erase_area_max) * h * w
    aspect = rng.uniform(cfg.erase_aspect_min, cfg.erase_aspect_max)
    eh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
    ew = min(w, max(1, int(round(math.sqrt(area / aspect)))))
    top = int(rng.integers(0, h - eh + 1))
    left = int(rng.integers(0, w - ew + 1))
    out[top:top + eh, left:left + ew] = 0.0
    return out


# -- batching --------------------------------------------------------------

def prepare_record(record: FerRecord, cfg: AugmentConfig, rng: Optional[SeededRng],
                   mode: str, train_crops: str = "ten"):
    """Crops for one record as ``(crops in [0, 1], crop ids)``."""
    if mode == "train":
        img = augment(record.pixels, cfg, rng)
        crops = ten_crop(img, cfg.crop_size)
        ids = np.arange(10)
        if train_crops == "random-one":
            pick = int(rng.integers(0, 10))
            crops, ids = crops[pick:pick + 1], ids[pick:pick + 1]
        crops = np.stack([random_erase(c, cfg, rng) for c in crops])
    else:
        crops = ten_crop(record.pixels.astype(np.float64), cfg.crop_size)
        ids = np.arange(10)
    return np.clip(crops / 255.0, 0.0, 1.0), ids


def make_batches(records: Sequence[FerRecord], cfg: AugmentConfig, rng: Optional[SeededRng],
                 mode: str = "train", batch_size: int = 64, epoch: int = 0,
                 train_crops: str = "ten", dtype=np.float32) -> Iterator[Batch]:
    """Yield batches of ``batch_size`` source images (``10 * batch_size`` crops).

    Train mode shuffles per epoch and augments; eval mode keeps file order and
    each record's ten crops stay contiguous for averaging.
    """
    if not records:
        raise DataError("no records to batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if train_crops not in ("ten", "random-one"):
        raise ValueError(f"train_crops must be ten or random-one, got {train_crops!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(records))
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode batching requires an rng")
        order = rng.child(0, epoch).permutation(len(records))
    for start in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        images, labels, rids, cids = [], [], [], []
        for rec in chunk:
            sub = rng.child(1, epoch, rec.index) if mode == "train" else None
            crops, ids = prepare_record(rec, cfg, sub, mode, train_crops)
            images.append(crops)
            labels.append(np.full(len(ids), rec.label))
            rids.append(np.full(len(ids), rec.index))
            cids.append(ids)
        yield Batch(np.concatenate(images)[:, None].astype(dtype),
                    np.concatenate(labels), np.concatenate(rids), np.concatenate(cids))
