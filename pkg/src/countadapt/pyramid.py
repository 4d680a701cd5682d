"""Co-centred multi-scale crops of a patch.

Rectangles are ``(x0, y0, x1, y1)`` in source-image pixels, half-open.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import resize_bilinear
from .density import PointAnnotation

DEFAULT_SCALES = (0.4, 0.6, 0.8)
MIN_CROP = 8


@dataclass
class Crop:
    image: np.ndarray  # (C, h, w) at the network input size
    rect: tuple[int, int, int, int]
    gt_count: float | None = None
    # annotated points inside the crop, mapped into resized-crop pixels
    points: np.ndarray | None = None
    # indices of those points in the source annotation
    point_index: np.ndarray | None = None

    @property
    def zoom(self) -> tuple[float, float]:
        """Resize factor (y, x) from source pixels to crop pixels."""
        x0, y0, x1, y1 = self.rect
        return self.image.shape[-2] / (y1 - y0), self.image.shape[-1] / (x1 - x0)


@dataclass
class PatchPyramid:
    crops: list[Crop]
    scales: tuple[float, ...]
    patch_rect: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))

    def __len__(self):
        return len(self.crops)

    def batch(self) -> np.ndarray:
        """All crops stacked smallest-first into an (S, C, h, w) grid."""
        return np.stack([c.image for c in self.crops])

    @property
    def gt_counts(self) -> list[float] | None:
        if any(c.gt_count is None for c in self.crops):
            return None
        return [c.gt_count for c in self.crops]


def normalize_scales(scales: Sequence[float]) -> tuple[float, ...]:
    """Sorted, de-duplicated scales in (0, 1] with 1.0 included."""
    out = sorted(set(float(s) for s in scales) | {1.0})
    if out[0] <= 0 or out[-1] > 1:
        raise ValueError(f"scales must lie in (0, 1], got {list(scales)}")
    return tuple(out)


def _snap(v: float) -> float:
    # drop float noise such as 0.6 * 100 = 60.00000000000001 before floor/ceil
    return round(v, 9)


def crop_rect(patch_rect, scale: float) -> tuple[int, int, int, int]:
    """Integer rectangle for ``scale`` times the patch, sharing its centre.

    The ideal rectangle's top-left is floored and bottom-right ceiled so nested
    ideal rectangles stay nested after rounding.
    """
    x0, y0, x1, y1 = patch_rect
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hw, hh = scale * (x1 - x0) / 2, scale * (y1 - y0) / 2
    return (
        math.floor(_snap(cx - hw)),
        math.floor(_snap(cy - hh)),
        math.ceil(_snap(cx + hw)),
        math.ceil(_snap(cy + hh)),
    )


def points_in_rect(points: np.ndarray, rect) -> np.ndarray:
    x0, y0, x1, y1 = rect
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return (p[:, 0] >= x0) & (p[:, 0] < x1) & (p[:, 1] >= y0) & (p[:, 1] < y1)


def _chw(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W) or (C, H, W) image, got shape {img.shape}")
    return img


def build_pyramid(
    image,
    patch_rect,
    scales: Sequence[float] = DEFAULT_SCALES,
    input_size: tuple[int, int] = (128, 128),
    ann: PointAnnotation | None = None,
) -> PatchPyramid:
    """Crop ``patch_rect`` of ``image`` at each scale and resize every crop to ``input_size``.

    Crops are ordered smallest first and the last one is the patch itself.
    With an annotation, each crop carries the number of points inside its
    rectangle and their positions in resized-crop coordinates.
    """
    img = _chw(image)
    scales = normalize_scales(scales)
    _, H, W = img.shape
    px0, py0, px1, py1 = patch_rect
    if not (0 <= px0 < px1 <= W and 0 <= py0 < py1 <= H):
        raise ValueError(f"patch rect {patch_rect} not inside image {W}x{H}")
    oh, ow = input_size
    crops = []
    for s in scales:
        rect = crop_rect(patch_rect, s)
        x0, y0, x1, y1 = rect
        if x1 - x0 < MIN_CROP or y1 - y0 < MIN_CROP:
            raise ValueError(
                f"crop at scale {s} is {x1 - x0}x{y1 - y0} px, below the {MIN_CROP} px minimum"
            )
        pixels = img[:, y0:y1, x0:x1].astype(np.float64)
        resized = resize_bilinear(pixels, oh, ow)
        crop = Crop(image=resized, rect=rect)
        if ann is not None:
            inside = points_in_rect(ann.points, rect)
            idx = np.flatnonzero(inside)
            pts = ann.points[idx]
            crop.point_index = idx
            crop.points = np.column_stack(
                [(pts[:, 0] - x0) * (ow / (x1 - x0)), (pts[:, 1] - y0) * (oh / (y1 - y0))]
            ) if len(idx) else np.zeros((0, 2))
            crop.gt_count = float(len(idx))
        crops.append(crop)
    return PatchPyramid(crops=crops, scales=scales, patch_rect=tuple(patch_rect))


def sample_patch(image, rng: np.random.Generator, patch_fraction: float = 0.5):
    """Uniformly placed crop covering ``patch_fraction`` of each image side.

    Returns ``(patch_pixels, rect)``.
    """
    if not 0 < patch_fraction <= 1:
        raise ValueError(f"patch_fraction must be in (0, 1], got {patch_fraction}")
    img = _chw(image)
    _, H, W = img.shape
    pw, ph = max(1, round(patch_fraction * W)), max(1, round(patch_fraction * H))
    x0 = int(rng.integers(0, W - pw + 1))
    y0 = int(rng.integers(0, H - ph + 1))
    rect = (x0, y0, x0 + pw, y0 + ph)
    return img[:, y0 : y0 + ph, x0 : x0 + pw], rect
