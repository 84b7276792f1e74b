"""Procedural source and driving-scene datasets.

Source samples: one large class-specific shape on a class-specific plain
background. Target samples: sky/road scenes in five weather and lighting
conditions with 1-4 small vehicles and their boxes. Distant (smaller)
vehicles sit nearer the horizon and are hazed toward the background, so
contrast grows with apparent size.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
NUM_CLASSES = 10
CONDITIONS = ("sunny", "cloudy", "rainy", "snowy", "night")
NUM_CONDITIONS = len(CONDITIONS)
MIN_VEHICLE, MAX_VEHICLE = 3, 8

DATASET_MAGIC = b"SCN1"
DATASET_VERSION = 1
_HEADER = struct.Struct("<HIHHH")


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 2 or self.h < 2:
            raise ValueError(f"box too small: {self}")
        if self.x < 0 or self.y < 0 or self.x + self.w > IMAGE_SIZE or self.y + self.h > IMAGE_SIZE:
            raise ValueError(f"box outside image: {self}")

    @property
    def size(self) -> int:
        return max(self.w, self.h)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x, self.y, self.w, self.h)


@dataclass
class SceneSample:
    image: np.ndarray
    condition_id: int
    boxes: list[BBox] = field(default_factory=list)
    object_mask: np.ndarray | None = field(default=None, compare=False, repr=False)


def luminance(image: np.ndarray) -> np.ndarray:
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114


# -- source distribution ------------------------------------------------------

# (shape, foreground RGB, background RGB)
SOURCE_CLASSES = [
    ("disk", (0.85, 0.15, 0.10), (0.75, 0.75, 0.72)),
    ("square", (0.10, 0.60, 0.20), (0.95, 0.95, 0.95)),
    ("triangle", (0.15, 0.25, 0.80), (0.95, 0.85, 0.30)),
    ("disk", (0.95, 0.90, 0.50), (0.05, 0.05, 0.10)),
    ("diamond", (0.95, 0.55, 0.10), (0.45, 0.70, 0.95)),
    ("cross", (0.55, 0.20, 0.65), (0.70, 0.90, 0.60)),
    ("ring", (0.95, 0.95, 0.95), (0.25, 0.25, 0.28)),
    ("wide_rect", (0.50, 0.30, 0.15), (0.95, 0.70, 0.75)),
    ("ellipse", (0.10, 0.80, 0.80), (0.40, 0.05, 0.05)),
    ("frame", (0.05, 0.05, 0.05), (0.55, 0.80, 0.75)),
]


def _shape_mask(shape: str, cy: float, cx: float, k: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "disk":
        return dx ** 2 + dy ** 2 <= (11.0 * k) ** 2
    if shape == "square":
        return (np.abs(dx) <= 9.0 * k) & (np.abs(dy) <= 9.0 * k)
    if shape == "triangle":
        half_h = 12.0 * k
        rel = (dy + half_h) / (2 * half_h)  # 0 at apex, 1 at base
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= 13.0 * k * rel)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 13.0 * k
    if shape == "cross":
        arm, half = 4.0 * k, 13.0 * k
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    if shape == "ring":
        r2 = dx ** 2 + dy ** 2
        return (r2 <= (13.0 * k) ** 2) & (r2 >= (7.0 * k) ** 2)
    if shape == "wide_rect":
        return (np.abs(dx) <= 13.0 * k) & (np.abs(dy) <= 7.0 * k)
    if shape == "ellipse":
        return (dx / (9.0 * k)) ** 2 + (dy / (14.0 * k)) ** 2 <= 1.0
    if shape == "frame":
        outer = (np.abs(dx) <= 12.0 * k) & (np.abs(dy) <= 12.0 * k)
        inner = (np.abs(dx) <= 6.0 * k) & (np.abs(dy) <= 6.0 * k)
        return outer & ~inner
    raise ValueError(shape)


def gen_source_sample(class_id: int, rng: np.random.Generator) -> SceneSample:
    """One large centred class shape; ``condition_id`` holds the class id."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class id {class_id} outside [0, {NUM_CLASSES})")
    shape, fg, bg = SOURCE_CLASSES[class_id]
    cy = IMAGE_SIZE / 2 + rng.uniform(-1.5, 1.5)
    cx = IMAGE_SIZE / 2 + rng.uniform(-1.5, 1.5)
    k = rng.uniform(0.95, 1.05)
    mask = _shape_mask(shape, cy, cx, k)
    fg = np.clip(np.asarray(fg) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    bg = np.clip(np.asarray(bg) + rng.uniform(-0.05, 0.05, 3), 0, 1)
    img = np.where(mask[..., None], fg, bg)
    img = img + rng.normal(0.0, 0.02, img.shape)
    return SceneSample(np.clip(img, 0, 1).astype(np.float32), class_id, [], mask)


# -- driving scenes ---------------------------------------------------------

# sky top, sky at horizon, road
_PALETTES = {
    "sunny": ((0.30, 0.55, 0.95), (0.70, 0.85, 1.00), (0.45, 0.45, 0.46)),
    "cloudy": ((0.55, 0.56, 0.60), (0.74, 0.75, 0.77), (0.40, 0.40, 0.41)),
    "rainy": ((0.20, 0.22, 0.27), (0.33, 0.35, 0.39), (0.20, 0.21, 0.24)),
    "snowy": ((0.78, 0.80, 0.84), (0.88, 0.89, 0.92), (0.93, 0.94, 0.96)),
    "night": ((0.01, 0.01, 0.04), (0.05, 0.05, 0.10), (0.07, 0.07, 0.09)),
}
_BODY_COLORS = np.array([
    (0.80, 0.10, 0.10), (0.10, 0.20, 0.75), (0.95, 0.80, 0.10),
    (0.05, 0.05, 0.05), (0.10, 0.55, 0.20), (0.60, 0.10, 0.60),
])
_NIGHT_BODY = np.array((0.16, 0.16, 0.20))
_HEADLIGHT = np.array((1.00, 0.95, 0.65))


def _haze(size: int) -> float:
    return 0.12 * (MAX_VEHICLE - size)


def _background(cond: str, horizon: int) -> np.ndarray:
    top, hor, road = (np.asarray(c) for c in _PALETTES[cond])
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3))
    for r in range(horizon):
        a = r / max(1, horizon - 1)
        img[r] = (1 - a) * top + a * hor
    img[horizon:] = road
    return img


def _place_vehicles(rng: np.random.Generator, horizon: int, n: int) -> list[BBox]:
    boxes: list[BBox] = []
    occupied = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    span = IMAGE_SIZE - 1 - (horizon + 1)
    for _ in range(200):
        if len(boxes) == n:
            break
        s = int(rng.integers(MIN_VEHICLE, MAX_VEHICLE + 1))
        w, h = s, max(3, int(round(0.75 * s)))
        bottom = horizon + 1 + int(round((s - MIN_VEHICLE) / (MAX_VEHICLE - MIN_VEHICLE) * span))
        bottom += int(rng.integers(-1, 2))
        y = int(np.clip(bottom - h + 1, horizon - h // 2, IMAGE_SIZE - h))
        x = int(rng.integers(0, IMAGE_SIZE - w + 1))
        y0, y1 = max(0, y - 1), min(IMAGE_SIZE, y + h + 1)
        x0, x1 = max(0, x - 1), min(IMAGE_SIZE, x + w + 1)
        if occupied[y0:y1, x0:x1].any():
            continue
        occupied[y0:y1, x0:x1] = True
        boxes.append(BBox(x, y, w, h))
    return boxes


def gen_target_sample(condition_id: int, rng: np.random.Generator) -> SceneSample:
    """Driving scene for condition 0..4 (sunny, cloudy, rainy, snowy, night)."""
    if not 0 <= condition_id < NUM_CONDITIONS:
        raise ValueError(f"condition id {condition_id} outside [0, {NUM_CONDITIONS})")
    cond = CONDITIONS[condition_id]
    horizon = 12 + int(rng.integers(-1, 2))
    img = _background(cond, horizon)
    img *= 1.0 + rng.uniform(-0.04, 0.04)
    if cond == "rainy":
        for col in rng.choice(IMAGE_SIZE, size=6, replace=False):
            r0 = int(rng.integers(0, IMAGE_SIZE - 8))
            img[r0:r0 + int(rng.integers(4, 9)), col] += 0.15
    n = int(rng.integers(1, 5))
    boxes = _place_vehicles(rng, horizon, n)
    obj = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    for b in boxes:
        bg = img[b.y:b.y + b.h, b.x:b.x + b.w].mean(axis=(0, 1))
        hz = _haze(b.w)
        if cond == "night":
            body = _NIGHT_BODY
        else:
            body = _BODY_COLORS[int(rng.integers(len(_BODY_COLORS)))]
        patch = np.broadcast_to(body, (b.h, b.w, 3)).copy()
        if b.h >= 4:
            patch[0] = body * 0.5 + 0.25  # window band
        if cond == "night":
            lamp = max(1, b.w // 3)
            patch[-1, :lamp] = _HEADLIGHT
            patch[-1, -lamp:] = _HEADLIGHT
        patch = (1 - hz) * patch + hz * bg
        img[b.y:b.y + b.h, b.x:b.x + b.w] = patch
        obj[b.y:b.y + b.h, b.x:b.x + b.w] = True
        if cond == "rainy":
            ry0, ry1 = b.y + b.h, min(IMAGE_SIZE, b.y + b.h + 2)
            img[ry0:ry1, b.x:b.x + b.w] = 0.7 * img[ry0:ry1, b.x:b.x + b.w] + 0.3 * patch.mean(axis=(0, 1))
    img = img + rng.normal(0.0, 0.015, img.shape)
    return SceneSample(np.clip(img, 0, 1).astype(np.float32), condition_id, boxes, obj)


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_source_dataset(count: int, seed: int = 0) -> list[SceneSample]:
    """Balanced source set: sample i has class i % 10 and its own (seed, i) stream."""
    return [gen_source_sample(i % NUM_CLASSES, _sample_rng(seed, i)) for i in range(count)]


def gen_target_dataset(count: int, seed: int = 0) -> list[SceneSample]:
    return [gen_target_sample(i % NUM_CONDITIONS, _sample_rng(seed, i)) for i in range(count)]


def gen_dataset(kind: str, count: int, seed: int = 0) -> list[SceneSample]:
    if kind == "source":
        return gen_source_dataset(count, seed)
    if kind == "target":
        return gen_target_dataset(count, seed)
    raise ValueError(f"unknown dataset kind {kind!r}")


def stack_images(samples: list[SceneSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    return np.stack([s.image for s in samples])


# -- file format ------------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


def write_dataset(samples: list[SceneSample], path) -> None:
    """SCN1 file: magic, header (version, count, H, W, C), crc32, records."""
    H = W = IMAGE_SIZE
    C = 3
    body = bytearray()
    for s in samples:
        if s.image.shape != (H, W, C):
            raise ValueError(f"image shape {s.image.shape} != {(H, W, C)}")
        body += struct.pack("<BB", s.condition_id, len(s.boxes))
        for b in s.boxes:
            body += struct.pack("<4B", *b.as_tuple())
        body += np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).tobytes()
    header = _HEADER.pack(DATASET_VERSION, len(samples), H, W, C)
    crc = zlib.crc32(header + bytes(body))
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + header + struct.pack("<I", crc) + bytes(body))


def read_dataset(path) -> list[SceneSample]:
    blob = Path(path).read_bytes()
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {blob[:4]!r}")
    hend = 4 + _HEADER.size
    if len(blob) < hend + 4:
        raise DatasetFormatError(f"{path}: truncated header")
    header = blob[4:hend]
    version, count, H, W, C = _HEADER.unpack(header)
    (crc,) = struct.unpack("<I", blob[hend:hend + 4])
    body = blob[hend + 4:]
    if zlib.crc32(header + body) != crc:
        raise DatasetFormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported layout version {version}")
    npix = H * W * C
    out: list[SceneSample] = []
    pos = 0
    for _ in range(count):
        if pos + 2 > len(body):
            raise DatasetFormatError(f"{path}: truncated record")
        cid, nb = struct.unpack_from("<BB", body, pos)
        pos += 2
        boxes = []
        for _ in range(nb):
            if pos + 4 > len(body):
                raise DatasetFormatError(f"{path}: truncated record")
            boxes.append(BBox(*struct.unpack_from("<4B", body, pos)))
            pos += 4
        if pos + npix > len(body):
            raise DatasetFormatError(f"{path}: truncated record")
        img = np.frombuffer(body, dtype=np.uint8, count=npix, offset=pos).reshape(H, W, C)
        pos += npix
        out.append(SceneSample(img.astype(np.float32) / 255.0, cid, boxes))
    if pos != len(body):
        raise DatasetFormatError(f"{path}: {len(body) - pos} trailing bytes")
    return out


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 pixmap, max value 255."""
    img = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    H, W = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode())
        fh.write(img.tobytes())
