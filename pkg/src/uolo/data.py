"""Synthetic fundus-like scenes, FOV preprocessing, augmentation, batch
streams and on-disk dataset I/O.

Coordinates are continuous pixels: pixel ``(row, col)`` covers
``[col, col + 1) x [row, row + 1)``, so its centre is ``(col + 0.5, row + 0.5)``.
Box centres use ``(x, y)`` = (column axis, row axis).

Dataset directory layout::

    images/<id>.pgm|.ppm   8-bit binary P5/P6
    masks/<id>.pgm         0/255, only for mask-annotated samples
    manifest.tsv           id<TAB>image<TAB>mask|-<TAB>class,cx,cy,side;...[<TAB>od_radius]
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError, GenerationError, PreprocessingError

__all__ = [
    "CLASS_OD",
    "CLASS_FV",
    "CLASS_NAMES",
    "REFERENCE_SIZE",
    "REFERENCE_SIDES",
    "Box",
    "Sample",
    "SceneSpec",
    "Batch",
    "BatchStream",
    "generate",
    "box_side",
    "otsu_threshold",
    "crop_and_resize",
    "augment",
    "flip",
    "translate",
    "streams",
    "strip_masks",
    "to_gray_u8",
    "read_pnm",
    "write_pnm",
    "write_dataset",
    "read_dataset",
]

CLASS_OD = 0
CLASS_FV = 1
CLASS_NAMES = ("OD", "FV")
REFERENCE_SIZE = 256
REFERENCE_SIDES = {CLASS_OD: 64, CLASS_FV: 32}


def box_side(class_id: int, image_size: int) -> float:
    """Fixed square GT box side for a class, scaled from the 256 px reference."""
    return REFERENCE_SIDES[class_id] * image_size / REFERENCE_SIZE


@dataclass(frozen=True)
class Box:
    class_id: int
    cx: float
    cy: float
    side: float

    def as_xywh(self) -> tuple[int, float, float, float, float]:
        return self.class_id, self.cx, self.cy, self.side, self.side


@dataclass
class Sample:
    image: np.ndarray
    seg_mask: np.ndarray | None
    boxes: list[Box]
    metadata: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.metadata.get("id", "")

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def box_for(self, class_id: int) -> Box | None:
        for b in self.boxes:
            if b.class_id == class_id:
                return b
        return None


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    channels: int = 1
    disc_radius_range: tuple[float, float] = (7.0, 8.5)
    disc_intensity: float = 0.92
    spot_radius_range: tuple[float, float] = (3.0, 4.0)
    spot_intensity: float = 0.12
    distractor_count: tuple[int, int] = (1, 3)
    distractor_radius_range: tuple[float, float] = (1.0, 2.0)
    distractor_intensity: float = 0.7
    texture_amplitude: float = 0.06
    background_intensity: float = 0.45
    border: int = 0
    rng_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.disc_radius_range
        slo, shi = self.spot_radius_range
        if not (0 < lo <= hi and 0 < slo <= shi):
            raise ConfigurationError("radius ranges must be positive and ordered")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be at least 16")


def _disc(size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _smooth_noise(rng: np.random.Generator, size: int, cells: int = 4) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-1, 1]."""
    coarse = rng.uniform(-1.0, 1.0, (cells + 1, cells + 1))
    t = (np.arange(size) + 0.5) / size * cells
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def generate(spec: SceneSpec, n: int) -> list[Sample]:
    """``n`` deterministic scenes: bright disc (OD, with mask) and dark spot (FV)."""
    spec.validate()
    size = spec.image_size
    total = size + 2 * spec.border
    margin = math.ceil(0.1 * size)
    out = []
    for idx in range(n):
        rng = np.random.default_rng([spec.rng_seed, idx])
        r_disc = rng.uniform(*spec.disc_radius_range)
        r_spot = rng.uniform(*spec.spot_radius_range)
        od_half = max(box_side(CLASS_OD, size) / 2, r_disc)
        fv_half = max(box_side(CLASS_FV, size) / 2, r_spot)
        for _ in range(100):
            dx, dy = rng.uniform(od_half + margin, size - od_half - margin, 2)
            fx, fy = rng.uniform(fv_half + margin, size - fv_half - margin, 2)
            if math.hypot(dx - fx, dy - fy) > r_disc + r_spot + 2.0:
                break
        else:
            raise GenerationError(
                f"sample {idx}: could not place disc and spot apart in 100 attempts")

        img = spec.background_intensity + spec.texture_amplitude * _smooth_noise(rng, size)
        img += 0.25 * spec.texture_amplitude * rng.standard_normal((size, size))
        # fundus-like vignetting inside the field of view
        yy, xx = np.mgrid[0:size, 0:size] + 0.5
        rad = np.hypot(xx - size / 2, yy - size / 2) / (size / 2)
        img *= 1.0 - 0.25 * np.clip(rad, 0, 1) ** 2
        n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
        for _ in range(n_distract):
            r = rng.uniform(*spec.distractor_radius_range)
            cx, cy = rng.uniform(r, size - r, 2)
            if (math.hypot(cx - dx, cy - dy) > r + r_disc + 1
                    and math.hypot(cx - fx, cy - fy) > r + r_spot + 1):
                img[_disc(size, cx, cy, r)] = spec.distractor_intensity
        mask = _disc(size, dx, dy, r_disc)
        img[mask] = spec.disc_intensity
        img[_disc(size, fx, fy, r_spot)] = spec.spot_intensity
        img = np.clip(img, 0.02, 1.0)

        if spec.border:
            canvas = np.zeros((total, total))
            canvas[spec.border:spec.border + size, spec.border:spec.border + size] = img
            full_mask = np.zeros((total, total), dtype=bool)
            full_mask[spec.border:spec.border + size, spec.border:spec.border + size] = mask
            img, mask = canvas, full_mask
            dx, dy, fx, fy = dx + spec.border, dy + spec.border, fx + spec.border, fy + spec.border

        img = np.round(img * 255.0) / 255.0
        if spec.channels == 3:
            img = np.round(np.stack([img, img * 0.7, img * 0.45], axis=-1) * 255.0) / 255.0
        else:
            img = img[:, :, None]
        boxes = [Box(CLASS_OD, float(dx), float(dy), box_side(CLASS_OD, size)),
                 Box(CLASS_FV, float(fx), float(fy), box_side(CLASS_FV, size))]
        od_radius = math.sqrt(mask.sum() / math.pi)
        out.append(Sample(img, mask.astype(np.uint8), boxes,
                          {"id": f"s{idx:05d}", "provenance": f"synthetic seed={spec.rng_seed}",
                           "od_radius": od_radius}))
    return out


def strip_masks(samples: list[Sample], n_masked: int) -> list[Sample]:
    """Copy of ``samples`` where only the first ``n_masked`` keep their masks."""
    return [s if i < n_masked else replace(s, seg_mask=None, metadata=dict(s.metadata))
            for i, s in enumerate(samples)]


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def to_gray_u8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.int64)


def otsu_threshold(gray) -> int:
    """Threshold ``t`` in ``1..255`` maximising between-class variance.

    ``gray`` holds integer levels 0..255.  The classes are ``< t`` and
    ``>= t``; the smallest maximiser wins.  Comparisons use exact rational
    arithmetic so ties are resolved identically on every platform.
    """
    levels = np.asarray(gray).reshape(-1).astype(np.int64)
    if levels.size == 0 or levels.min() == levels.max():
        raise PreprocessingError("otsu_threshold: image needs at least two distinct gray levels")
    if levels.min() < 0 or levels.max() > 255:
        raise ConfigurationError("otsu_threshold expects integer levels in 0..255")
    hist = np.bincount(levels, minlength=256)
    n_total = int(hist.sum())
    s_total = int((hist * np.arange(256)).sum())
    best_t, best = None, None
    n0 = s0 = 0
    for t in range(1, 256):
        n0 += int(hist[t - 1])
        s0 += (t - 1) * int(hist[t - 1])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        # N^2 * sigma_B^2 = (S*n0 - s0*N)^2 / (n0 * n1)
        score = Fraction((s_total * n0 - s0 * n_total) ** 2, n0 * n1)
        if best is None or score > best:
            best, best_t = score, t
    return best_t


def _bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    ri = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    ci = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[ri][:, ci]


def crop_and_resize(sample: Sample, target_size: int) -> Sample:
    """Crop to the Otsu field of view's bounding box, then resize to a square.

    Images are resampled bilinearly, masks by nearest neighbour followed by
    re-binarisation.  Box centres follow the same affine map; square box
    sides scale by the geometric mean of the two axis scales.
    """
    try:
        t = otsu_threshold(to_gray_u8(sample.image))
    except PreprocessingError as exc:
        raise PreprocessingError(f"sample {sample.id}: {exc}") from exc
    fov = to_gray_u8(sample.image) >= t
    rows = np.flatnonzero(fov.any(axis=1))
    cols = np.flatnonzero(fov.any(axis=0))
    if rows.size == 0:
        raise PreprocessingError(f"sample {sample.id}: empty field of view")
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    image = sample.image[r0:r1, c0:c1]
    sy, sx = target_size / (r1 - r0), target_size / (c1 - c0)
    resized = np.round(np.clip(_bilinear(image, target_size, target_size), 0, 1) * 255) / 255
    mask = None
    if sample.seg_mask is not None:
        mask = (_nearest(sample.seg_mask[r0:r1, c0:c1], target_size, target_size) > 0).astype(np.uint8)
    side_scale = math.sqrt(sx * sy)
    boxes = [Box(b.class_id, (b.cx - c0) * sx, (b.cy - r0) * sy, b.side * side_scale)
             for b in sample.boxes]
    meta = dict(sample.metadata)
    if "od_radius" in meta:
        meta["od_radius"] = meta["od_radius"] * side_scale
    meta["crop"] = (int(r0), int(r1), int(c0), int(c1))
    return Sample(resized, mask, boxes, meta)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def _clamp_box(b: Box, size: int) -> Box:
    hi = math.nextafter(float(size), 0.0)
    return Box(b.class_id, min(max(b.cx, 0.0), hi), min(max(b.cy, 0.0), hi), b.side)


def flip(sample: Sample, horizontal: bool = False, vertical: bool = False) -> Sample:
    img, mask, size = sample.image, sample.seg_mask, sample.size
    boxes = list(sample.boxes)
    if horizontal:
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
        boxes = [Box(b.class_id, size - b.cx, b.cy, b.side) for b in boxes]
    if vertical:
        img = img[::-1]
        mask = None if mask is None else mask[::-1]
        boxes = [Box(b.class_id, b.cx, size - b.cy, b.side) for b in boxes]
    return Sample(np.ascontiguousarray(img), None if mask is None else np.ascontiguousarray(mask),
                  boxes, dict(sample.metadata))


def _shift(a: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape[:2]
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


def translate(sample: Sample, dx: int, dy: int) -> Sample:
    """Integer shift with zero fill; box centres are clamped into the image."""
    mask = None if sample.seg_mask is None else _shift(sample.seg_mask, dx, dy)
    boxes = [_clamp_box(Box(b.class_id, b.cx + dx, b.cy + dy, b.side), sample.size)
             for b in sample.boxes]
    return Sample(_shift(sample.image, dx, dy), mask, boxes, dict(sample.metadata))


def augment(sample: Sample, rng: np.random.Generator, flips: bool = True,
            max_shift: float = 0.1) -> Sample:
    """Random flips and an integer translation of up to ``max_shift`` of the side."""
    h = v = False
    if flips:
        h, v = bool(rng.integers(2)), bool(rng.integers(2))
    limit = int(math.floor(max_shift * sample.size))
    dx = int(rng.integers(-limit, limit + 1)) if limit else 0
    dy = int(rng.integers(-limit, limit + 1)) if limit else 0
    return translate(flip(sample, h, v), dx, dy)


# --------------------------------------------------------------------------
# batch streams
# --------------------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    masks: np.ndarray
    has_mask: np.ndarray
    boxes: list[list[Box]]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def _to_batch(samples: list[Sample]) -> Batch:
    images = np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float64)
    size = samples[0].size
    masks = np.zeros((len(samples), 1, size, size))
    has = np.zeros(len(samples), dtype=bool)
    for i, s in enumerate(samples):
        if s.seg_mask is not None:
            masks[i, 0] = s.seg_mask
            has[i] = True
    return Batch(images, masks, has, [list(s.boxes) for s in samples], [s.id for s in samples])


class BatchStream:
    """Endless batches cycling over ``samples``.

    Every epoch is a fresh permutation drawn from ``(seed, stream_id, epoch)``;
    batches may straddle epoch boundaries.  Augmentation draws are seeded by
    ``(seed, stream_id, batch index)``, so the sequence depends only on the
    seed and the number of batches already taken.
    """

    def __init__(self, samples: list[Sample], batch_size: int, seed: int = 0,
                 stream_id: int = 0, augment_flips: bool = False, augment_shift: float = 0.0):
        if not samples:
            raise ConfigurationError("a batch stream needs at least one sample")
        if batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.stream_id = stream_id
        self.augment_flips = augment_flips
        self.augment_shift = augment_shift
        self.batches_consumed = 0
        self._epoch = 0
        self._order = self._permutation(0)
        self._pos = 0

    @property
    def period(self) -> int:
        return len(self.samples)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, self.stream_id, epoch]).permutation(len(self.samples))

    def _next_indices(self) -> list[int]:
        idx = []
        while len(idx) < self.batch_size:
            if self._pos == len(self._order):
                self._epoch += 1
                self._order = self._permutation(self._epoch)
                self._pos = 0
            idx.append(int(self._order[self._pos]))
            self._pos += 1
        return idx

    def skip(self, n: int) -> None:
        """Advance by ``n`` batches without materialising them."""
        for _ in range(n):
            self._next_indices()
            self.batches_consumed += 1

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        idx = self._next_indices()
        chosen = [self.samples[i] for i in idx]
        if self.augment_flips or self.augment_shift:
            rng = np.random.default_rng([self.seed, self.stream_id, 1_000_003, self.batches_consumed])
            chosen = [augment(s, rng, self.augment_flips, self.augment_shift) for s in chosen]
        self.batches_consumed += 1
        return _to_batch(chosen)


def streams(samples: list[Sample], batch_size: int, seed: int = 0, need_seg: bool = True,
            augment_flips: bool = False, augment_shift: float = 0.0
            ) -> tuple[BatchStream, BatchStream | None]:
    """Detection stream over box-annotated samples and segmentation stream over masked ones."""
    det = [s for s in samples if s.boxes]
    seg = [s for s in samples if s.seg_mask is not None]
    if not det:
        raise ConfigurationError("no box-annotated samples for the detection stream")
    if need_seg and not seg:
        raise ConfigurationError("segmentation stream requested but no sample has a mask")
    kw = dict(augment_flips=augment_flips, augment_shift=augment_shift)
    det_stream = BatchStream(det, batch_size, seed, 0, **kw)
    seg_stream = BatchStream(seg, batch_size, seed, 1, **kw) if seg else None
    return det_stream, seg_stream


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def write_pnm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] (H x W or H x W x {1, 3}) as binary PGM/PPM."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    magic = b"P5" if img.ndim == 2 else b"P6"
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read binary PGM/PPM; returns uint8 ``H x W x {1, 3}``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DataError(f"{path}: only 8-bit binary P5/P6 is supported")
    ch = 1 if magic == b"P5" else 3
    payload = np.frombuffer(raw, dtype=np.uint8, count=w * h * ch, offset=pos) \
        if len(raw) - pos >= w * h * ch else None
    if payload is None:
        raise DataError(f"{path}: truncated pixel data")
    return payload.reshape(h, w, ch).copy()


def _format_boxes(boxes: list[Box]) -> str:
    return ";".join(f"{b.class_id},{b.cx!r},{b.cy!r},{b.side!r}" for b in boxes)


def write_dataset(out_dir, samples: list[Sample]) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    lines = []
    for s in samples:
        ext = "pgm" if s.image.shape[2] == 1 else "ppm"
        img_rel = f"images/{s.id}.{ext}"
        write_pnm(out / img_rel, s.image)
        mask_rel = "-"
        if s.seg_mask is not None:
            mask_rel = f"masks/{s.id}.pgm"
            write_pnm(out / mask_rel, (s.seg_mask > 0).astype(np.uint8) * 255)
        fields = [s.id, img_rel, mask_rel, _format_boxes(s.boxes)]
        if "od_radius" in s.metadata:
            fields.append(repr(float(s.metadata["od_radius"])))
        lines.append("\t".join(fields))
    tmp = out / "manifest.tsv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / "manifest.tsv")
    return out


def read_dataset(dataset_dir) -> list[Sample]:
    root = Path(dataset_dir)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DataError(f"{root}: no manifest.tsv")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (4, 5):
            raise DataError(f"manifest line {lineno}: expected 4 or 5 tab-separated fields")
        sid, img_rel, mask_rel, box_field = parts[:4]
        try:
            boxes = []
            for chunk in filter(None, box_field.split(";")):
                c, cx, cy, side = chunk.split(",")
                boxes.append(Box(int(c), float(cx), float(cy), float(side)))
            meta = {"id": sid, "provenance": str(root)}
            if len(parts) == 5:
                meta["od_radius"] = float(parts[4])
        except ValueError as exc:
            raise DataError(f"manifest line {lineno}: malformed field ({exc})") from exc
        image = read_pnm(root / img_rel).astype(np.float64) / 255.0
        mask = None
        if mask_rel != "-":
            mask = (read_pnm(root / mask_rel)[:, :, 0] > 127).astype(np.uint8)
        samples.append(Sample(image, mask, boxes, meta))
    return samples
