"""Synthetic rooftop scenes, resolution pyramids, splits and Netpbm I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .tensor import Rng

# -- scene generation ----------------------------------------------------------

ROOF_COLORS = np.array([
    [0.78, 0.78, 0.80],   # light concrete
    [0.62, 0.36, 0.30],   # terracotta
    [0.42, 0.44, 0.48],   # dark grey
    [0.86, 0.84, 0.74],   # pale sand
], dtype=np.float64)


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene. Lengths are in pixels at ``size``."""

    size: int = 64
    buildings: tuple = (2, 6)          # inclusive count range
    building_size: tuple = (6, 18)     # side length range
    rotated_fraction: float = 0.5
    roof_noise: float = 0.04
    background_noise: float = 0.05
    roads: tuple = (0, 2)
    road_width: tuple = (3, 5)
    cars: tuple = (2, 8)               # distractors, never in the mask
    car_size: tuple = (1, 3)
    margin: int = 1                    # minimum gap between buildings
    max_tries: int = 200
    seed: int = 0


@dataclass
class Building:
    cx: float
    cy: float
    w: float
    h: float
    angle: float

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        pts = []
        for u, v in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            du, dv = u * self.w / 2, v * self.h / 2
            pts.append((self.cx + du * c - dv * s, self.cy + du * s + dv * c))
        return np.array(pts)


def rasterize(b: Building, size: int) -> np.ndarray:
    """Boolean (size, size) mask of pixels whose centers fall inside ``b``."""
    centers = np.arange(size) + 0.5
    dx = centers[None, :] - b.cx
    dy = centers[:, None] - b.cy
    c, s = math.cos(b.angle), math.sin(b.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= b.w / 2) & (np.abs(v) <= b.h / 2)


def _smooth_field(rng: Rng, size: int, grid: int = 5) -> np.ndarray:
    """Low-frequency noise: a coarse random grid, bilinearly interpolated."""
    coarse = rng.normal(0.0, 1.0, (grid, grid))
    pos = (np.arange(size) + 0.5) / size * (grid - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, grid - 2)
    frac = pos - lo
    m = np.zeros((size, grid))
    m[np.arange(size), lo] = 1 - frac
    m[np.arange(size), lo + 1] = frac
    return m @ coarse @ m.T


def _sample_building(spec: SceneSpec, rng: Rng) -> Building:
    lo, hi = spec.building_size
    w = int(rng.integers(lo, hi + 1))
    h = int(rng.integers(lo, hi + 1))
    if rng.uniform() < spec.rotated_fraction:
        angle = float(rng.uniform(0.0, math.pi))
        reach = math.hypot(w, h) / 2
        cx = float(rng.uniform(reach, spec.size - reach))
        cy = float(rng.uniform(reach, spec.size - reach))
        return Building(cx, cy, w, h, angle)
    x0 = int(rng.integers(0, spec.size - w + 1))
    y0 = int(rng.integers(0, spec.size - h + 1))
    return Building(x0 + w / 2, y0 + h / 2, w, h, 0.0)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(r):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def place_buildings(spec: SceneSpec, rng: Rng) -> list:
    """Non-overlapping buildings by rejection sampling."""
    if spec.building_size[1] > spec.size:
        raise DataError(f"building side {spec.building_size[1]} exceeds canvas {spec.size}")
    count = int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))
    placed, occupied = [], np.zeros((spec.size, spec.size), dtype=bool)
    for i in range(count):
        for _ in range(spec.max_tries):
            b = _sample_building(spec, rng)
            cover = rasterize(b, spec.size)
            if cover.any() and not (_dilate(cover, spec.margin) & occupied).any():
                placed.append(b)
                occupied |= cover
                break
        else:
            raise DataError(
                f"could not place building {i + 1} of {count} on a {spec.size}px canvas "
                f"after {spec.max_tries} tries (seed {spec.seed}); lower the building "
                f"count or size")
    return placed


def generate_scene(spec: SceneSpec):
    """Render one scene. Returns (image (3,H,W) float32 in [0,1], mask (H,W) uint8).

    The mask is exactly the union of the rasterized buildings. Roads and small
    bright "car" rectangles appear only in the image.
    """
    rng = Rng(spec.seed, "scene")
    n = spec.size
    buildings = place_buildings(spec, rng)
    mask = np.zeros((n, n), dtype=bool)
    for b in buildings:
        mask |= rasterize(b, n)

    ground = np.array([0.36, 0.42, 0.28]) + rng.uniform(-0.06, 0.06, 3)
    img = ground[:, None, None] + 0.08 * _smooth_field(rng, n)[None]
    img = img + rng.normal(0.0, spec.background_noise, (3, n, n))

    for _ in range(int(rng.integers(spec.roads[0], spec.roads[1] + 1))):
        width = int(rng.integers(spec.road_width[0], spec.road_width[1] + 1))
        start = int(rng.integers(0, n - width + 1))
        tone = 0.48 + rng.uniform(-0.05, 0.05)
        if rng.uniform() < 0.5:
            img[:, start:start + width, :] = tone
        else:
            img[:, :, start:start + width] = tone
    img = img + rng.normal(0.0, 0.01, (3, n, n))

    for b in buildings:
        cover = rasterize(b, n)
        color = ROOF_COLORS[int(rng.integers(0, len(ROOF_COLORS)))] + rng.uniform(-0.05, 0.05, 3)
        texture = rng.normal(0.0, spec.roof_noise, (3, n, n))
        img = np.where(cover[None], color[:, None, None] + texture, img)

    for _ in range(int(rng.integers(spec.cars[0], spec.cars[1] + 1))):
        cw = int(rng.integers(spec.car_size[0], spec.car_size[1] + 1))
        ch = int(rng.integers(spec.car_size[0], spec.car_size[1] + 1))
        x0 = int(rng.integers(0, n - cw + 1))
        y0 = int(rng.integers(0, n - ch + 1))
        color = ROOF_COLORS[int(rng.integers(0, len(ROOF_COLORS)))] + 0.1
        if mask[y0:y0 + ch, x0:x0 + cw].any():
            continue
        img[:, y0:y0 + ch, x0:x0 + cw] = color[:, None, None]

    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


# -- pyramids ------------------------------------------------------------------

def reduce_image(img: np.ndarray) -> np.ndarray:
    """2×2 box average over the last two axes (accumulated in float64)."""
    h, w = img.shape[-2:]
    blocks = img.astype(np.float64).reshape(img.shape[:-2] + (h // 2, 2, w // 2, 2))
    return blocks.mean(axis=(-3, -1)).astype(np.float32)


def reduce_mask(mask: np.ndarray) -> np.ndarray:
    """2×2 majority vote over the last two axes; a 2:2 tie votes positive."""
    h, w = mask.shape[-2:]
    votes = mask.astype(np.int32).reshape(mask.shape[:-2] + (h // 2, 2, w // 2, 2)).sum(axis=(-3, -1))
    return (votes >= 2).astype(np.uint8)


def _levels(full: int, min_res: int) -> list:
    if min_res <= 0 or full % min_res:
        raise DataError(f"resolution {full} is not min_res {min_res} times a power of two")
    ratio = full // min_res
    if ratio & (ratio - 1):
        raise DataError(f"resolution ratio {full}/{min_res} is not a power of two")
    out, r = [], full
    while r >= min_res:
        out.append(r)
        r //= 2
    return out


def build_pyramid(image: np.ndarray, mask: np.ndarray, min_res: int) -> dict:
    """{resolution: (image, mask)} from full size down to ``min_res``.

    Works on single samples or stacked batches (leading axes are kept).
    """
    levels = _levels(image.shape[-1], min_res)
    out = {levels[0]: (image.astype(np.float32), mask.astype(np.uint8))}
    img, m = image, mask
    for r in levels[1:]:
        img, m = reduce_image(img), reduce_mask(m)
        out[r] = (img, m)
    return out


@dataclass
class Dataset:
    """Stacked samples with their pyramids.

    images: (n, 3, R, R) float32 in [0, 1]; masks: (n, R, R) uint8 in {0, 1}.
    """

    images: np.ndarray
    masks: np.ndarray
    min_res: int = 8
    levels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise DataError(f"bad dataset shapes {self.images.shape}, {self.masks.shape}")
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise DataError(f"images {self.images.shape} and masks {self.masks.shape} disagree")
        if not self.levels:
            self.levels = build_pyramid(self.images, self.masks, self.min_res)

    def __len__(self):
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def masks_at(self, res: int) -> np.ndarray:
        if res not in self.levels:
            raise DataError(f"dataset has no {res}px level (has {sorted(self.levels)})")
        return self.levels[res][1]

    def images_at(self, res: int) -> np.ndarray:
        if res not in self.levels:
            raise DataError(f"dataset has no {res}px level (has {sorted(self.levels)})")
        return self.levels[res][0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        levels = {r: (im[idx], m[idx]) for r, (im, m) in self.levels.items()}
        return Dataset(self.images[idx], self.masks[idx], self.min_res, levels)


def synthetic_dataset(n: int, spec: SceneSpec | None = None, seed: int = 0,
                      min_res: int = 8) -> Dataset:
    """``n`` scenes; scene ``i`` is rendered from seed ``seed * 1_000_003 + i``."""
    spec = spec or SceneSpec()
    images = np.empty((n, 3, spec.size, spec.size), dtype=np.float32)
    masks = np.empty((n, spec.size, spec.size), dtype=np.uint8)
    for i in range(n):
        images[i], masks[i] = generate_scene(replace(spec, seed=seed * 1_000_003 + i))
    return Dataset(images, masks, min_res)


def split(n: int, fraction: float = 0.7, seed: int = 0):
    """Random disjoint (train_idx, test_idx) covering range(n); train gets round(fraction*n)."""
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"split fraction {fraction} outside [0, 1]")
    perm = Rng(seed, "split").permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


# -- Netpbm ---------------------------------------------------------------------

_WS = b" \t\n\r\v\f"


def _parse_header(data: bytes):
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"expected magic P5 or P6, got {data[:2]!r}", 0)
    magic = data[:2].decode()
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError("header ends early", pos)
        if data[pos] not in _WS:
            raise FormatError(f"expected whitespace, got {data[pos:pos + 1]!r}", pos)
        while pos < len(data) and data[pos] in _WS:
            pos += 1
        while pos < len(data) and data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated header comment", pos)
            pos = end + 1
            while pos < len(data) and data[pos] in _WS:
                pos += 1
        start = pos
        while pos < len(data) and 48 <= data[pos] <= 57:
            pos += 1
        if start == pos:
            raise FormatError("expected a decimal header field", start)
        fields.append((int(data[start:pos]), start))
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad image size {width}x{height}", wpos if width <= 0 else hpos)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", mpos)
    if pos >= len(data) or data[pos] not in _WS:
        raise FormatError("expected a single whitespace byte after maxval", pos)
    return magic, width, height, pos + 1


def decode_pnm(data: bytes):
    """Parse binary P5/P6 bytes into (magic, uint8 array (H,W) or (H,W,3))."""
    magic, width, height, offset = _parse_header(data)
    ch = 3 if magic == "P6" else 1
    need = width * height * ch
    have = len(data) - offset
    if have < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {have}", len(data))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset + need)
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    shape = (height, width, 3) if ch == 3 else (height, width)
    return magic, arr.reshape(shape).copy()


def encode_pnm(arr: np.ndarray) -> bytes:
    """uint8 (H,W) -> P5 bytes, (H,W,3) -> P6 bytes."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"encode_pnm needs uint8 data, got {arr.dtype}")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise FormatError(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def to_bytes(values: np.ndarray) -> np.ndarray:
    """[0,1] floats to 0..255 with round-half-up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _write_atomic(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def read_ppm(path) -> np.ndarray:
    """RGB image as float32 (3, H, W) in [0, 1]."""
    magic, arr = decode_pnm(_read(path))
    if magic != "P6":
        raise FormatError(f"{path}: expected P6, got {magic}", 0)
    return (arr.transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    data = image if image.dtype == np.uint8 else to_bytes(image)
    _write_atomic(path, encode_pnm(np.ascontiguousarray(data.transpose(1, 2, 0))))


def read_pgm(path) -> np.ndarray:
    """Grey image as float32 (H, W) in [0, 1]."""
    magic, arr = decode_pnm(_read(path))
    if magic != "P5":
        raise FormatError(f"{path}: expected P5, got {magic}", 0)
    return (arr / np.float32(255.0)).astype(np.float32)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    data = image if image.dtype == np.uint8 else to_bytes(image)
    _write_atomic(path, encode_pnm(data))


# -- manifests -------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"


def write_manifest(path, pairs) -> None:
    lines = "".join(f"{img}\t{mask}\n" for img, mask in pairs)
    _write_atomic(path, lines.encode("utf-8"))


def read_manifest(path) -> list:
    """(image_path, mask_path) pairs, resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    pairs = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected '<image>\\t<mask>'")
            pairs.append((base / parts[0], base / parts[1]))
    if not pairs:
        raise DataError(f"{path}: manifest is empty")
    return pairs


def load_manifest(path, min_res: int = 8) -> Dataset:
    """Load image/mask pairs; mask pixels >= 128 count as positive."""
    images, masks = [], []
    for img_path, mask_path in read_manifest(path):
        img = read_ppm(img_path)
        m = read_pgm(mask_path)
        if img.shape[1:] != m.shape:
            raise DataError(f"{img_path} and {mask_path} differ in size")
        images.append(img)
        masks.append((m >= 0.5).astype(np.uint8))
    return Dataset(np.stack(images), np.stack(masks), min_res)


def write_dataset(directory, dataset: Dataset) -> Path:
    """Write images/NNNNN.ppm, masks/NNNNN.pgm and the manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for i in range(len(dataset)):
        img_rel = f"images/{i:05d}.ppm"
        mask_rel = f"masks/{i:05d}.pgm"
        write_ppm(directory / img_rel, dataset.images[i])
        write_pgm(directory / mask_rel, dataset.masks[i].astype(np.uint8) * 255)
        pairs.append((img_rel, mask_rel))
    manifest = directory / MANIFEST_NAME
    write_manifest(manifest, pairs)
    return manifest
