"""Images, IIW-style judgement files, dataset splits and crops.

Pixel values are treated as linear intensities in [0, 1]; no gamma or
colour-profile handling is applied, so pre-linearise sRGB inputs if that
matters for your data.
"""
import json
import math
import os
from dataclasses import dataclass, field, replace

import cv2
import numpy as np

# internal label codes; "E" (equal) is 0
LABEL_CODES = {"1": 1, "2": 2, "E": 0}
LABEL_NAMES = {v: k for k, v in LABEL_CODES.items()}


class ImageFormatError(ValueError):
    pass


class JudgementError(ValueError):
    pass


# ---------------------------------------------------------------- images

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _sniff(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(_PNG_SIG):
        return "png"
    if head[:2] in (b"P5", b"P6"):
        return "pnm"
    raise ImageFormatError(f"{path}: not a PNG or binary PPM/PGM file")


def load_image(path):
    """Read an 8/16-bit PNG or binary PPM/PGM as a float32 C x H x W array in [0, 1]."""
    _sniff(path)
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ImageFormatError(f"{path}: unreadable or truncated image")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    if raw.ndim == 2:
        arr = raw[None]
    else:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        arr = raw[:, :, ::-1].transpose(2, 0, 1)
    return (arr.astype(np.float64) / scale).astype(np.float32)


def quantize(values, bit_depth=8):
    """Clamp to [0, 1] and round half up to integer codes."""
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    top = 255 if bit_depth == 8 else 65535
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * top + 0.5).astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(tensor, path, bit_depth=8):
    """Write a 1- or 3-channel C x H x W array as PNG (or PPM/PGM by extension)."""
    arr = np.asarray(tensor)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot save array of shape {arr.shape}")
    q = quantize(arr, bit_depth)
    q = q[0] if q.shape[0] == 1 else q[::-1].transpose(1, 2, 0)
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        expected = ".pgm" if q.ndim == 2 else ".ppm"
        if ext != ".pnm" and ext != expected:
            raise ImageFormatError(f"{ext} cannot hold {arr.shape[0]} channels")
    elif ext != ".png":
        raise ImageFormatError(f"unsupported output extension {ext!r}")
    if not cv2.imwrite(path, np.ascontiguousarray(q)):
        raise OSError(f"failed to write {path}")


# ---------------------------------------------------------------- judgements


@dataclass(frozen=True)
class Comparison:
    point1: int
    point2: int
    darker: str  # "1", "2" or "E"
    weight: float


@dataclass
class JudgementSet:
    points: dict = field(default_factory=dict)  # id -> (x, y) as fractions
    comparisons: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for pid, (x, y) in self.points.items():
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise JudgementError(f"point {pid} has coordinates outside [0, 1]")
        for c in self.comparisons:
            if c.point1 not in self.points or c.point2 not in self.points:
                raise JudgementError(f"comparison references unknown point ({c.point1}, {c.point2})")
            if c.point1 == c.point2:
                raise JudgementError(f"comparison compares point {c.point1} with itself")
            if c.darker not in LABEL_CODES:
                raise JudgementError(f"invalid darker label {c.darker!r}")
            if not c.weight >= 0 or not math.isfinite(c.weight):
                raise JudgementError(f"invalid weight {c.weight}")

    def __len__(self):
        return len(self.comparisons)

    def pixel_arrays(self, height, width):
        """Return (y1, x1, y2, x2, labels, weights) with pixel indices.

        Coordinates map to round(x * (W - 1)), round(y * (H - 1)).
        """
        n = len(self.comparisons)
        y1, x1, y2, x2 = (np.empty(n, dtype=np.intp) for _ in range(4))
        labels = np.empty(n, dtype=np.int8)
        weights = np.empty(n, dtype=np.float64)
        for k, c in enumerate(self.comparisons):
            y1[k], x1[k] = point_to_pixel(self.points[c.point1], height, width)
            y2[k], x2[k] = point_to_pixel(self.points[c.point2], height, width)
            labels[k] = LABEL_CODES[c.darker]
            weights[k] = c.weight
        return y1, x1, y2, x2, labels, weights

    def to_json(self):
        return {
            "intrinsic_points": [
                {"id": pid, "x": x, "y": y} for pid, (x, y) in sorted(self.points.items())
            ],
            "intrinsic_comparisons": [
                {"point1": c.point1, "point2": c.point2, "darker": c.darker, "darker_score": c.weight}
                for c in self.comparisons
            ],
        }

    @classmethod
    def from_json(cls, doc):
        try:
            points = {}
            for p in doc["intrinsic_points"]:
                pid = int(p["id"])
                if pid in points:
                    raise JudgementError(f"duplicate point id {pid}")
                points[pid] = (float(p["x"]), float(p["y"]))
            comps = []
            for c in doc["intrinsic_comparisons"]:
                darker = c["darker"]
                if darker not in LABEL_CODES:
                    raise JudgementError(f"invalid darker label {darker!r}")
                comps.append(Comparison(int(c["point1"]), int(c["point2"]), darker,
                                        float(c["darker_score"])))
        except (KeyError, TypeError) as exc:
            raise JudgementError(f"malformed judgement document: {exc!r}") from exc
        return cls(points, comps)


def point_to_pixel(point, height, width):
    x, y = point
    return int(math.floor(y * (height - 1) + 0.5)), int(math.floor(x * (width - 1) + 0.5))


def load_judgements(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise JudgementError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise JudgementError(f"{path}: top level must be an object")
    return JudgementSet.from_json(doc)


def save_judgements(judgements, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(judgements.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- samples


@dataclass
class DecompositionSample:
    image: np.ndarray
    albedo: np.ndarray = None
    shading: np.ndarray = None
    mask: np.ndarray = None
    judgements: JudgementSet = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        hw = self.image.shape[1:]
        for label in ("albedo", "shading", "mask"):
            arr = getattr(self, label)
            if arr is not None and arr.shape[1:] != hw:
                raise ValueError(f"{label} shape {arr.shape} does not match image {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape[0] != 1 or not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask must be 1 x H x W with entries in {0, 1}")

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]


def iiw_split(image_ids):
    """Sort ids ascending; every fifth one starting with the first is test."""
    ids = sorted(image_ids)
    if not ids:
        raise ValueError("iiw_split needs at least one id")
    test = ids[0::5]
    train = [i for k, i in enumerate(ids) if k % 5 != 0]
    return train, test


def crop_offsets(height, width, size, count, rng):
    if size > min(height, width) or size < 1:
        raise ValueError(f"crop size {size} does not fit a {height}x{width} image")
    ys = rng.integers(0, height - size + 1, size=count)
    xs = rng.integers(0, width - size + 1, size=count)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def _crop_judgements(judgements, height, width, oy, ox, size):
    if judgements is None:
        return None
    kept = {}
    for pid, pt in judgements.points.items():
        py, px = point_to_pixel(pt, height, width)
        if oy <= py < oy + size and ox <= px < ox + size:
            denom = max(size - 1, 1)
            kept[pid] = ((px - ox) / denom, (py - oy) / denom)
    comps = [c for c in judgements.comparisons if c.point1 in kept and c.point2 in kept]
    return JudgementSet(kept, comps)


def crop_sample(sample, oy, ox, size):
    sl = (slice(None), slice(oy, oy + size), slice(ox, ox + size))
    pick = lambda a: None if a is None else a[sl].copy()  # noqa: E731
    return replace(
        sample,
        image=sample.image[sl].copy(),
        albedo=pick(sample.albedo),
        shading=pick(sample.shading),
        mask=pick(sample.mask),
        judgements=_crop_judgements(sample.judgements, sample.height, sample.width, oy, ox, size),
        meta={**sample.meta, "crop": [oy, ox, size]},
    )


def random_crops(sample, size, count, rng):
    """``count`` aligned crops of every layer; judgement pairs leaving the crop are dropped."""
    offsets = crop_offsets(sample.height, sample.width, size, count, rng)
    return [crop_sample(sample, oy, ox, size) for oy, ox in offsets]


def write_crop_sidecar(path, offsets, size, seed):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "size": size, "offsets": [list(o) for o in offsets]}, fh, indent=1)
        fh.write("\n")
