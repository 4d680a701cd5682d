"""Point annotations and ground-truth density maps.

Each annotated point becomes a truncated, renormalised Gaussian so the map
integrates to the point count exactly (up to float rounding), even for points
near the image border.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .core import block_sum_downsample

SIGMA_MIN = 0.5
SIGMA_MAX = 15.0


class AnnotationError(ValueError):
    """Malformed or out-of-bounds annotation data."""


class TooFewPoints(ValueError):
    pass


@dataclass(eq=False)
class PointAnnotation:
    image_id: str
    points: np.ndarray
    image_size: tuple[int, int]  # (H, W)
    roi: np.ndarray | None = None
    roi_path: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.points = pts
        h, w = (int(v) for v in self.image_size)
        self.image_size = (h, w)
        if len(pts):
            bad = ~((pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h))
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise AnnotationError(
                    f"{self.image_id}: points[{i}] = ({pts[i, 0]:g}, {pts[i, 1]:g}) "
                    f"outside [0, {w}) x [0, {h})"
                )
        if self.roi is not None:
            roi = np.asarray(self.roi)
            if roi.shape != (h, w):
                raise AnnotationError(
                    f"{self.image_id}: roi shape {roi.shape} does not match image size {(h, w)}"
                )
            self.roi = roi.astype(bool)

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointAnnotation):
            return NotImplemented
        same_roi = (self.roi is None and other.roi is None) or (
            self.roi is not None and other.roi is not None and np.array_equal(self.roi, other.roi)
        )
        return (
            self.image_id == other.image_id
            and self.image_size == other.image_size
            and np.array_equal(self.points, other.points)
            and same_roi
            and self.roi_path == other.roi_path
        )


@dataclass(frozen=True)
class FixedSigma:
    sigma: float = 4.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"fixed sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class AdaptiveSigma:
    k: int = 3
    beta: float = 0.3
    fallback: float = 4.0
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        if self.k < 1 or not self.beta > 0:
            raise ValueError(f"adaptive sigma needs k >= 1 and beta > 0, got k={self.k}, beta={self.beta}")


SigmaMode = Union[FixedSigma, AdaptiveSigma]


@dataclass
class DensityMap:
    grid: np.ndarray  # (1, 1, H // scale, W // scale)
    scale_factor: int = 1

    @property
    def count(self) -> float:
        return float(self.grid.sum())


def adaptive_sigma(
    points,
    k: int = 3,
    beta: float = 0.3,
    sigma_min: float = SIGMA_MIN,
    sigma_max: float = SIGMA_MAX,
) -> np.ndarray:
    """beta times the mean distance to each point's k nearest other points, clamped."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < k + 1:
        raise TooFewPoints(f"adaptive sigma with k={k} needs at least {k + 1} points, got {len(pts)}")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    sigma = beta * dist[:, 1:].mean(axis=1)
    return np.clip(sigma, sigma_min, sigma_max)


def point_sigmas(points, mode: SigmaMode) -> np.ndarray:
    """Per-point kernel widths; adaptive mode falls back to ``mode.fallback`` when
    there are too few points for the neighbour search."""
    n = len(np.asarray(points).reshape(-1, 2))
    if isinstance(mode, FixedSigma):
        return np.full(n, float(mode.sigma))
    try:
        return adaptive_sigma(points, mode.k, mode.beta, mode.sigma_min, mode.sigma_max)
    except TooFewPoints:
        return np.full(n, float(mode.fallback))


def _kernel_1d(coord: float, sigma: float, size: int):
    centre = math.floor(coord)
    radius = math.ceil(3 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    lo, hi = max(centre - radius, 0), min(centre + radius + 1, size)
    offsets = offsets[lo - (centre - radius) : hi - (centre - radius)]
    # pixel i covers [i, i + 1); distance from its centre to the point
    dist = offsets + (0.5 - (coord - centre))
    k = np.exp(-(dist * dist) / (2 * sigma * sigma))
    return lo, hi, k / k.sum()


def render_density(points, sigmas, size: tuple[int, int]) -> np.ndarray:
    """Sum of truncated Gaussians (support radius ceil(3 sigma)), each normalised to 1."""
    h, w = size
    out = np.zeros((h, w), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    for (x, y), s in zip(pts, np.broadcast_to(sigmas, len(pts))):
        x0, x1, kx = _kernel_1d(x, s, w)
        y0, y1, ky = _kernel_1d(y, s, h)
        out[y0:y1, x0:x1] += np.outer(ky, kx)
    return out


def generate_density(ann: PointAnnotation, sigma_mode: SigmaMode = FixedSigma(), out_scale: int = 1) -> DensityMap:
    if out_scale not in (1, 2, 4, 8):
        raise ValueError(f"out_scale must be one of 1, 2, 4, 8; got {out_scale}")
    sigmas = point_sigmas(ann.points, sigma_mode)
    full = render_density(ann.points, sigmas, ann.image_size)
    grid = block_sum_downsample(full[None, None], out_scale)
    return DensityMap(grid=grid, scale_factor=out_scale)


# -- files -------------------------------------------------------------------


def read_pgm_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_pgm_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8), mode="L").save(path)


def load_annotations(path) -> list[PointAnnotation]:
    """Read the JSON annotation format; ROI masks are resolved relative to the file."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise AnnotationError(f"{path}: top level must be a JSON array")
    out = []
    for i, entry in enumerate(doc):
        where = f"{path}: annotations[{i}]"
        if not isinstance(entry, dict):
            raise AnnotationError(f"{where}: expected an object")
        for key, kind in (("image_id", str), ("width", int), ("height", int), ("points", list)):
            if key not in entry:
                raise AnnotationError(f"{where}: missing field {key!r}")
            if not isinstance(entry[key], kind) or isinstance(entry[key], bool):
                raise AnnotationError(f"{where}.{key}: expected {kind.__name__}")
        unknown = set(entry) - {"image_id", "width", "height", "points", "roi"}
        if unknown:
            raise AnnotationError(f"{where}: unknown fields {sorted(unknown)}")
        h, w = entry["height"], entry["width"]
        if h < 1 or w < 1:
            raise AnnotationError(f"{where}: width and height must be >= 1")
        pts = entry["points"]
        for j, p in enumerate(pts):
            if (
                not isinstance(p, list)
                or len(p) != 2
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
            ):
                raise AnnotationError(f"{where}.points[{j}]: expected [x, y]")
            if not (0 <= p[0] < w and 0 <= p[1] < h):
                raise AnnotationError(f"{where}.points[{j}]: ({p[0]}, {p[1]}) outside [0, {w}) x [0, {h})")
        roi = roi_path = None
        if entry.get("roi") is not None:
            roi_path = entry["roi"]
            if not isinstance(roi_path, str):
                raise AnnotationError(f"{where}.roi: expected a path string")
            try:
                roi = read_pgm_mask(path.parent / roi_path)
            except OSError as exc:
                raise AnnotationError(f"{where}.roi: cannot read mask {roi_path!r}: {exc}") from exc
            if roi.shape != (h, w):
                raise AnnotationError(f"{where}.roi: mask shape {roi.shape} != ({h}, {w})")
        out.append(
            PointAnnotation(
                image_id=entry["image_id"],
                points=np.asarray(pts, dtype=np.float64).reshape(-1, 2),
                image_size=(h, w),
                roi=roi,
                roi_path=roi_path,
            )
        )
    return out


def save_annotations(anns: Sequence[PointAnnotation], path) -> None:
    """Write annotations as JSON.  ROI masks with a ``roi_path`` are written next to the file."""
    path = Path(path)
    doc = []
    for ann in anns:
        entry = {
            "image_id": ann.image_id,
            "width": ann.image_size[1],
            "height": ann.image_size[0],
            "points": [[float(x), float(y)] for x, y in ann.points],
        }
        if ann.roi is not None:
            if ann.roi_path is None:
                raise AnnotationError(f"{ann.image_id}: roi mask has no roi_path to write to")
            write_pgm_mask(path.parent / ann.roi_path, ann.roi)
            entry["roi"] = ann.roi_path
        doc.append(entry)
    path.write_text(json.dumps(doc, indent=1))
