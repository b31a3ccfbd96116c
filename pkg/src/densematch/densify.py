"""Target densification by mosaic and mixup.

Both operate on annotations first: mosaic shrinks four images into the
quadrants of one canvas of unchanged size, mixup takes the union of two
target lists.  Pixel composition is optional and lives in
:func:`compose_raster`.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .geometry import Target, transform
from .schedule import AugState

logger = logging.getLogger(__name__)

ImageId = Union[int, str]

# Quadrant offsets in mosaic input order: top-left, top-right, bottom-left, bottom-right.
QUADRANTS = ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5))

# Mixup ratios only affect pixels; they are drawn from this range.
MIXUP_RATIO_RANGE = (0.3, 0.7)

_BOX_TOL = 1e-9


@dataclass(frozen=True)
class ImageAnnotations:
    image_id: ImageId
    canvas: Tuple[int, int]  # (width, height) in pixels
    targets: Tuple[Target, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "canvas", (int(self.canvas[0]), int(self.canvas[1])))
        if self.canvas[0] <= 0 or self.canvas[1] <= 0:
            raise ValueError(f"image {self.image_id!r}: canvas must be positive, got {self.canvas}")
        for t in self.targets:
            x0, y0, x1, y1 = t.box.corners
            if x0 < -_BOX_TOL or y0 < -_BOX_TOL or x1 > 1 + _BOX_TOL or y1 > 1 + _BOX_TOL:
                raise ValueError(f"image {self.image_id!r}: box {t.box} leaves the unit canvas")
            if t.box.area <= 0:
                raise ValueError(f"image {self.image_id!r}: zero-area box {t.box}")

    def __len__(self) -> int:
        return len(self.targets)


@dataclass(frozen=True)
class AugPolicy:
    mosaic_prob: float = 0.5
    mixup_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("mosaic_prob", "mixup_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "AugPolicy":
        """Named densification levels.

        ``base`` disables densification, ``default`` is the 0.5/0.5 setting,
        ``max`` always applies both.  They stand in for the low/medium/high
        objects-per-image settings and only approximate any specific
        average target count.
        """
        try:
            mosaic, mixup = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(mosaic, mixup, seed)


PRESETS = {"base": (0.0, 0.0), "default": (0.5, 0.5), "max": (1.0, 1.0)}


def mosaic4(
    a: ImageAnnotations, b: ImageAnnotations, c: ImageAnnotations, d: ImageAnnotations
) -> ImageAnnotations:
    """Place four images at half scale into the quadrants of ``a``'s canvas."""
    targets: List[Target] = []
    for src, (dx, dy) in zip((a, b, c, d), QUADRANTS):
        for t in src.targets:
            box = transform(t.box, 0.5, dx, dy)
            if box is not None:
                targets.append(Target(box, t.label))
    image_id = "mosaic(" + ",".join(str(x.image_id) for x in (a, b, c, d)) + ")"
    return ImageAnnotations(image_id, a.canvas, tuple(targets))


def mixup(a: ImageAnnotations, b: ImageAnnotations, ratio: float = 0.5) -> ImageAnnotations:
    """Overlay ``b`` on ``a``.  Annotations are the union; ``ratio`` matters only for pixels."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mixup ratio must lie in (0, 1), got {ratio}")
    if a.canvas != b.canvas:
        raise ValueError(f"mixup needs equal canvases, got {a.canvas} and {b.canvas}")
    return ImageAnnotations(f"mixup({a.image_id},{b.image_id})", a.canvas, a.targets + b.targets)


def policy_rng(policy: AugPolicy, batch_index: int) -> np.random.Generator:
    return np.random.default_rng([int(policy.seed), int(batch_index)])


def apply_policy(
    batch: Sequence[ImageAnnotations],
    policy: AugPolicy,
    epoch_flags: AugState,
    batch_index: int = 0,
) -> List[ImageAnnotations]:
    """Densify one minibatch.

    When the schedule allows dense O2O, mosaic fires for the whole minibatch
    with ``policy.mosaic_prob`` (each image combined with three partners
    drawn from the batch with replacement), then mixup fires with
    ``policy.mixup_prob`` (one partner per image).  Randomness comes from
    ``(policy.seed, batch_index)`` only.
    """
    batch = list(batch)
    if not epoch_flags.dense_o2o_on or not batch:
        return batch
    rng = policy_rng(policy, batch_index)
    fire_mosaic, fire_mixup = rng.random(2)
    n = len(batch)
    if fire_mosaic < policy.mosaic_prob:
        partners = rng.integers(0, n, size=(n, 3))
        batch = [mosaic4(img, *(batch[j] for j in partners[i])) for i, img in enumerate(batch)]
    if fire_mixup < policy.mixup_prob:
        partners = rng.integers(0, n, size=n)
        ratios = rng.uniform(*MIXUP_RATIO_RANGE, size=n)
        mixed = []
        for i, img in enumerate(batch):
            other = batch[partners[i]]
            if other.canvas != img.canvas:
                logger.debug("mixup skipped for %s: canvas mismatch", img.image_id)
                mixed.append(img)
                continue
            mixed.append(mixup(img, other, float(ratios[i])))
        batch = mixed
    return batch


# -- rasters ---------------------------------------------------------------------------


def _resize_nearest(img: np.ndarray, height: int, width: int) -> np.ndarray:
    rows = np.minimum(((np.arange(height) + 0.5) * img.shape[0] / height).astype(int), img.shape[0] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * img.shape[1] / width).astype(int), img.shape[1] - 1)
    return img[rows][:, cols]


def compose_raster(inputs: Sequence[Optional[np.ndarray]], mode: str, ratio: float = 0.5) -> Optional[np.ndarray]:
    """Pixel counterpart of :func:`mosaic4` (four inputs) or :func:`mixup` (two inputs).

    Images are ``(H, W)`` or ``(H, W, C)`` arrays.  The output has the shape
    of the first input.  Returns ``None`` with a warning if any raster is
    missing.
    """
    if any(x is None for x in inputs):
        warnings.warn("raster data missing for a composite input; skipping raster composition")
        return None
    imgs = [np.asarray(x) for x in inputs]
    base = imgs[0]
    if mode == "mosaic":
        if len(imgs) != 4:
            raise ValueError(f"mosaic needs 4 rasters, got {len(imgs)}")
        H, W = base.shape[:2]
        hh, hw = H // 2, W // 2
        out = np.empty_like(base)
        spans = (((0, hh), (0, hw)), ((0, hh), (hw, W)), ((hh, H), (0, hw)), ((hh, H), (hw, W)))
        for img, ((r0, r1), (c0, c1)) in zip(imgs, spans):
            if img.ndim != base.ndim or img.shape[2:] != base.shape[2:]:
                raise ValueError("mosaic rasters must share channel layout")
            out[r0:r1, c0:c1] = _resize_nearest(img, r1 - r0, c1 - c0)
        return out
    if mode == "mixup":
        if len(imgs) != 2:
            raise ValueError(f"mixup needs 2 rasters, got {len(imgs)}")
        if imgs[1].shape != base.shape:
            raise ValueError(f"mixup rasters differ in shape: {base.shape} vs {imgs[1].shape}")
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"mixup ratio must lie in (0, 1), got {ratio}")
        blend = ratio * base.astype(float) + (1.0 - ratio) * imgs[1].astype(float)
        if np.issubdtype(base.dtype, np.integer):
            return np.rint(blend).astype(base.dtype)
        return blend.astype(base.dtype)
    raise ValueError(f"unknown raster mode {mode!r}")


def save_raster(path, img: np.ndarray) -> None:
    from PIL import Image

    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm", ".pgm"):
        raise ValueError(f"only PNG/PPM rasters are supported, got {path.suffix}")
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


def load_raster(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)
