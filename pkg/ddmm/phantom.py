"""Procedural radiograph-like phantoms with exact lung masks, the 80:20 split
protocol, ingestion of user image/mask folders, and the oracle segmenter.

Implementation notes:
    * A phantom is drawn in intensity space [0, 1]: background, a bright
      elliptical body, two dark rotated elliptical lungs inside it, sinusoidal
      rib bands that brighten the body by ``rib_gain``, then Gaussian pixel
      noise. The result is clipped and mapped affinely to [-1, 1].
    * ``rib_gain`` is kept small enough that a rib crossing a lung stays below
      the lung/body midpoint, so the oracle threshold still sees the lung.
    * Every phantom is a pure function of ``(cfg.seed, index)``: its draws come
      from the ``phantom`` stream with the index as counter.
    * Datasets hold images in [-1, 1] and masks in the model encoding
      {-1, +1}, as float32 arrays shaped (N, 1, H, W). Generated and ingested
      data use the same container.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ValidationError
from .rng import stream

logger = logging.getLogger(__name__)

MAX_REDRAWS = 10
MIN_AXIS_PX = 2.0

Pair = Tuple[np.ndarray, np.ndarray]
Range = Tuple[float, float]


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry and intensity knobs of the phantom generator."""

    size: int = 32
    seed: int = 0
    noise_sigma: float = 0.03
    background_level: float = 0.10
    lung_level: float = 0.35
    body_level: float = 0.75
    rib_gain: float = 0.08
    rib_count: Tuple[int, int] = (3, 6)
    body_width: Range = (0.40, 0.46)  # semi-axes as fractions of size
    body_height: Range = (0.44, 0.49)
    lung_width: Range = (0.13, 0.16)
    lung_aspect: Range = (1.35, 1.85)  # height / width of each lung ellipse
    lung_offset: Range = (0.20, 0.24)  # horizontal distance of lung centres from the midline
    lung_rotation: float = 0.25  # max absolute rotation, radians
    unlabeled_jitter: float = 1.5

    def __post_init__(self) -> None:
        if self.size < 4:
            raise ValidationError(f"phantom size must be at least 4; got {self.size}")
        if not self.background_level < self.lung_level < self.body_level:
            raise ValidationError("intensity levels must satisfy background < lung < body")
        if self.lung_level + self.rib_gain >= 0.5 * (self.lung_level + self.body_level):
            raise ValidationError("rib_gain must keep ribbed lung pixels below the lung/body midpoint")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be nonnegative; got {self.noise_sigma}")
        lo, hi = self.rib_count
        if lo < 0 or hi < lo:
            raise ValidationError(f"rib_count must be an ordered nonnegative range; got {self.rib_count}")
        for name in ("body_width", "body_height", "lung_width", "lung_aspect", "lung_offset"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValidationError(f"{name} must be an ordered positive range; got {(a, b)}")
        if self.seed < 0:
            raise ValidationError(f"seed must be nonnegative; got {self.seed}")

    def shifted(self) -> "PhantomConfig":
        """Configuration of the unlabeled pool: wider lung shapes, more noise."""
        j = self.unlabeled_jitter

        def widen(r: Range) -> Range:
            mid, half = 0.5 * (r[0] + r[1]), 0.5 * (r[1] - r[0])
            return (max(mid - j * half, 1e-3), mid + j * half)

        return replace(
            self,
            noise_sigma=self.noise_sigma * j,
            lung_aspect=widen(self.lung_aspect),
            lung_width=widen(self.lung_width),
            lung_rotation=self.lung_rotation * j,
        )

    def to_model(self, level: float) -> float:
        """Map an intensity in [0, 1] to model space [-1, 1]."""
        return 2.0 * level - 1.0


@dataclass
class PairDataset:
    """Images (N,1,H,W) in [-1, 1], optional masks (N,1,H,W) in {-1, +1}, and item names."""

    images: np.ndarray
    masks: Optional[np.ndarray]
    names: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValidationError(f"images must be (N, 1, H, W); got {self.images.shape}")
        if self.masks is not None and self.masks.shape != self.images.shape:
            raise ValidationError(f"mask shape {self.masks.shape} does not match image shape {self.images.shape}")
        if len(self.names) != len(self.images):
            raise ValidationError("one name per item is required")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def size(self) -> int:
        return int(self.images.shape[-1])

    def binary_masks(self) -> np.ndarray:
        """Masks decoded to {0, 1} uint8."""
        if self.masks is None:
            raise ValidationError("dataset has no masks")
        return (self.masks > 0).astype(np.uint8)


@dataclass
class DatasetSplit:
    labeled_train: PairDataset
    labeled_test: PairDataset
    unlabeled: PairDataset


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """{0, 1} -> {-1, +1} as float32."""
    return np.where(mask > 0, 1.0, -1.0).astype(np.float32)


def _ellipse(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _draw_shapes(cfg: PhantomConfig, gen: np.random.Generator, yy: np.ndarray, xx: np.ndarray):
    n = cfg.size
    centre = (n - 1) / 2.0
    body_rx = gen.uniform(*cfg.body_width) * n
    body_ry = gen.uniform(*cfg.body_height) * n
    body = _ellipse(yy, xx, centre + gen.uniform(-0.02, 0.02) * n, centre, body_ry, body_rx, 0.0)
    lungs = np.zeros_like(body)
    axes = []
    for side in (-1.0, 1.0):
        rx = gen.uniform(*cfg.lung_width) * n
        ry = rx * gen.uniform(*cfg.lung_aspect)
        cx = centre + side * gen.uniform(*cfg.lung_offset) * n
        cy = centre + gen.uniform(-0.05, 0.03) * n
        angle = side * gen.uniform(-cfg.lung_rotation, cfg.lung_rotation)
        lungs |= _ellipse(yy, xx, cy, cx, ry, rx, angle)
        axes.extend([rx, ry])
    return body, lungs & body, min(axes + [body_rx, body_ry])


def generate_phantom(cfg: PhantomConfig, index: int) -> Pair:
    """Return ``(image, mask)``: image float32 (1,H,W) in [-1, 1], mask uint8 (1,H,W) in {0, 1}."""
    if index < 0:
        raise ValidationError(f"phantom index must be nonnegative; got {index}")
    gen = stream(cfg.seed, "phantom", index)
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for attempt in range(MAX_REDRAWS + 1):
        body, lungs, smallest = _draw_shapes(cfg, gen, yy, xx)
        if smallest >= MIN_AXIS_PX and lungs.any():
            break
        logger.debug("phantom %d: degenerate ellipse (axis %.2f px), redraw %d", index, smallest, attempt + 1)
    else:
        raise ValidationError(f"phantom {index}: no non-degenerate ellipse after {MAX_REDRAWS} redraws")

    img = np.full((n, n), cfg.background_level, dtype=np.float64)
    img[body] = cfg.body_level
    img[lungs] = cfg.lung_level
    ribs = np.zeros((n, n), dtype=bool)
    lo, hi = cfg.rib_count
    count = int(gen.integers(lo, hi + 1))
    for k in range(count):
        base = (0.18 + 0.64 * (k + gen.uniform(0.2, 0.8)) / max(count, 1)) * n
        amp = gen.uniform(0.02, 0.06) * n
        period = gen.uniform(0.8, 1.4) * n
        phase = gen.uniform(0.0, 2.0 * math.pi)
        thick = gen.uniform(0.03, 0.05) * n
        centre_line = base + amp * np.sin(2.0 * math.pi * xx / period + phase)
        ribs |= np.abs(yy - centre_line) <= max(thick / 2.0, 0.5)
    img[ribs & body] += cfg.rib_gain
    if cfg.noise_sigma > 0:
        img = img + gen.normal(0.0, cfg.noise_sigma, size=(n, n))
    img = np.clip(img, 0.0, 1.0)
    image = (2.0 * img - 1.0).astype(np.float32)[None]
    return image, lungs.astype(np.uint8)[None]


def _collect(cfg: PhantomConfig, indices: Sequence[int], with_masks: bool) -> PairDataset:
    n = cfg.size
    images = np.empty((len(indices), 1, n, n), dtype=np.float32)
    masks = np.empty_like(images) if with_masks else None
    for row, idx in enumerate(indices):
        image, mask = generate_phantom(cfg, int(idx))
        images[row] = image
        if masks is not None:
            masks[row] = encode_mask(mask)
    return PairDataset(images, masks, [f"phantom-{int(i):06d}" for i in indices])


def make_splits(cfg: PhantomConfig, n_labeled: int, n_unlabeled: int) -> DatasetSplit:
    """Generate labeled phantoms split 80:20 plus a distribution-shifted unlabeled pool.

    Labeled items use indices [0, n_labeled); unlabeled items use
    [n_labeled, n_labeled + n_unlabeled) under ``cfg.shifted()``.
    """
    if n_labeled < 5:
        raise ValidationError(f"need at least 5 labeled phantoms; got {n_labeled}")
    if n_unlabeled < 0:
        raise ValidationError(f"n_unlabeled must be nonnegative; got {n_unlabeled}")
    order = stream(cfg.seed, "split").permutation(n_labeled)
    n_train = int(round(0.8 * n_labeled))
    train_idx = sorted(int(i) for i in order[:n_train])
    test_idx = sorted(int(i) for i in order[n_train:])
    unlabeled_idx = list(range(n_labeled, n_labeled + n_unlabeled))
    return DatasetSplit(
        labeled_train=_collect(cfg, train_idx, True),
        labeled_test=_collect(cfg, test_idx, True),
        unlabeled=_collect(cfg.shifted(), unlabeled_idx, False),
    )


def foreground_census(cfg: PhantomConfig, count: int, start: int = 0) -> np.ndarray:
    """Foreground fraction of ``count`` consecutive phantoms."""
    fractions = np.empty(count, dtype=np.float64)
    for k in range(count):
        _, mask = generate_phantom(cfg, start + k)
        fractions[k] = mask.mean()
    return fractions


def oracle_segment(image: np.ndarray, cfg: Optional[PhantomConfig] = None) -> np.ndarray:
    """Rule-based lung segmentation of a phantom-style image in [-1, 1].

    Pixels darker than the lung/body midpoint inside the body silhouette
    (hole-filled region brighter than the background/lung midpoint) are lung
    candidates; the two largest connected components are kept.
    """
    cfg = cfg or PhantomConfig()
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[0]
    body_cut = cfg.to_model(0.5 * (cfg.background_level + cfg.lung_level))
    lung_cut = cfg.to_model(0.5 * (cfg.lung_level + cfg.body_level))
    body = ndimage.binary_fill_holes(img > body_cut)
    labels, count = ndimage.label(body)
    if count > 1:
        sizes = ndimage.sum(body, labels, index=np.arange(1, count + 1))
        body = labels == (int(np.argmax(sizes)) + 1)
    candidates = body & (img < lung_cut)
    labels, count = ndimage.label(candidates)
    mask = np.zeros(img.shape, dtype=np.uint8)
    if count:
        sizes = ndimage.sum(candidates, labels, index=np.arange(1, count + 1))
        keep = np.argsort(-sizes, kind="stable")[:2] + 1
        mask[np.isin(labels, keep)] = 1
    return mask[None] if squeeze else mask


# ---------- image files ----------

_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _pgm_maxval(path: Path) -> int:
    head = path.read_bytes()[:512]
    match = _PGM_HEADER.match(head)
    if match is None:
        raise ValidationError(f"{path.name}: not a binary (P5) PGM file")
    return int(match.group(3))


def read_gray(path: Path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (maxval 255) or PNG as a uint8 (H, W) array."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        maxval = _pgm_maxval(path)
        if maxval != 255:
            raise ValidationError(f"{path.name}: PGM maxval must be 255; got {maxval}")
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise ValidationError(f"{path.name}: expected 8-bit grayscale, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as e:
        raise ValidationError(f"{path.name}: unreadable image ({e})") from e


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    """Write a uint8 (H, W) array as a binary PGM with maxval 255."""
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="L").save(Path(path), format="PPM")


def to_pixels(image: np.ndarray) -> np.ndarray:
    """Model-space image [-1, 1] (any leading singleton dims) -> uint8 (H, W)."""
    img = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    return np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def mask_pixels(mask: np.ndarray) -> np.ndarray:
    """Binary or model-space mask -> uint8 (H, W) in {0, 255}."""
    m = np.asarray(mask).reshape(mask.shape[-2:])
    return np.where(m > 0, 255, 0).astype(np.uint8)


def _center_resize(pixels: np.ndarray, size: int, resample: int) -> np.ndarray:
    h, w = pixels.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    square = pixels[top:top + side, left:left + side]
    if side == size:
        return square
    return np.asarray(Image.fromarray(square, mode="L").resize((size, size), resample=resample), dtype=np.uint8)


def image_files(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".png"))


def ingest_folder(image_dir: Path, mask_dir: Optional[Path], size: int) -> PairDataset:
    """Load images (and masks paired by file stem) into a ``PairDataset``.

    Images are center-cropped to a square, resized to ``size``, and mapped to
    [-1, 1]. Masks must be binary ({0, 1} or {0, 255}); they are resized with
    nearest-neighbour sampling and stored as {-1, +1}. Files are read in
    lexicographic order.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ValidationError(f"image folder {image_dir} does not exist")
    files = image_files(image_dir)
    if not files:
        raise ValidationError(f"no .pgm or .png files in {image_dir}")
    masks_by_stem = {}
    if mask_dir is not None:
        mask_dir = Path(mask_dir)
        if not mask_dir.is_dir():
            raise ValidationError(f"mask folder {mask_dir} does not exist")
        masks_by_stem = {p.stem: p for p in image_files(mask_dir)}
    images = np.empty((len(files), 1, size, size), dtype=np.float32)
    masks = np.empty_like(images) if mask_dir is not None else None
    names: List[str] = []
    for row, path in enumerate(files):
        pixels = read_gray(path)
        images[row, 0] = _center_resize(pixels, size, Image.BILINEAR).astype(np.float32) / 127.5 - 1.0
        names.append(f"file:{path.stem}")
        if masks is None:
            continue
        mpath = masks_by_stem.get(path.stem)
        if mpath is None:
            raise ValidationError(f"{path.name}: no mask named {path.stem}.* in {mask_dir}")
        mpix = read_gray(mpath)
        if mpix.shape != pixels.shape:
            raise ValidationError(f"{mpath.name}: mask shape {mpix.shape} does not match image shape {pixels.shape}")
        values = set(np.unique(mpix).tolist())
        if not (values <= {0, 1} or values <= {0, 255}):
            bad = sorted(values - {0, 1, 255}) or sorted(values)
            raise ValidationError(f"{mpath.name}: mask is not binary (found value {bad[0]})")
        binary = (mpix > 0).astype(np.uint8) * 255
        masks[row, 0] = encode_mask(_center_resize(binary, size, Image.NEAREST))
    logger.info("ingested %d items from %s", len(files), image_dir)
    return PairDataset(images, masks, names)
