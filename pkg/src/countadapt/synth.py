"""Seeded synthetic scenes: radially shaded blobs on a background, with exact
centre annotations.  Two presets differ in object density and object size."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .density import PointAnnotation, load_annotations, save_annotations

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"


@dataclass(frozen=True)
class DomainSpec:
    name: str = "domain"
    count_dist: tuple = ("poisson", 20.0)  # ("poisson", lam) or ("uniform", a, b)
    blob_radius_range: tuple[float, float] = (3.0, 5.0)
    blob_intensity_range: tuple[float, float] = (0.5, 1.0)
    background: tuple = ("noise", 0.03)  # ("flat", level) | ("gradient", lo, hi) | ("noise", sigma)
    background_level: float = 0.2
    image_size: tuple[int, int] = (256, 256)
    seed: int = 0

    def __post_init__(self):
        for attr in ("count_dist", "blob_radius_range", "blob_intensity_range", "background", "image_size"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        r0, r1 = self.blob_radius_range
        if not 0 < r0 <= r1:
            raise ValueError(f"blob radius range must satisfy 0 < r_min <= r_max, got {self.blob_radius_range}")
        kind = self.count_dist[0]
        if kind == "poisson":
            if self.count_dist[1] < 0:
                raise ValueError("poisson rate must be >= 0")
        elif kind == "uniform":
            a, b = self.count_dist[1:]
            if not 0 <= a <= b:
                raise ValueError(f"uniform count range must satisfy 0 <= a <= b, got {self.count_dist}")
        else:
            raise ValueError(f"unknown count distribution {kind!r}")
        if self.background[0] not in ("flat", "gradient", "noise"):
            raise ValueError(f"unknown background {self.background[0]!r}")

    @property
    def mean_count(self) -> float:
        if self.count_dist[0] == "poisson":
            return float(self.count_dist[1])
        return (self.count_dist[1] + self.count_dist[2]) / 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


def preset_shift_pair(seed: int = 0) -> tuple[DomainSpec, DomainSpec]:
    """Dense scenes of small objects (source) vs sparse scenes of large ones (target)."""
    source = DomainSpec(
        name="dense-small",
        count_dist=("poisson", 40.0),
        blob_radius_range=(2.0, 3.0),
        image_size=(256, 256),
        seed=seed,
    )
    target = DomainSpec(
        name="sparse-large",
        count_dist=("poisson", 10.0),
        blob_radius_range=(5.0, 8.0),
        image_size=(256, 256),
        seed=seed + 1,
    )
    return source, target


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float in [0, 1]
    ann: PointAnnotation | None = None
    image_id: str = ""
    extra: dict = field(default_factory=dict)


def _background(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_size
    kind = spec.background[0]
    base = np.full((h, w), spec.background_level)
    if kind == "flat":
        if len(spec.background) > 1:
            base[:] = spec.background[1]
        return base
    if kind == "gradient":
        lo, hi = spec.background[1:3]
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        proj = (np.cos(angle) * xx / max(w - 1, 1) + np.sin(angle) * yy / max(h - 1, 1))
        proj = (proj - proj.min()) / max(np.ptp(proj), 1e-12)
        return lo + (hi - lo) * proj
    return base + rng.normal(0.0, spec.background[1], size=(h, w))


def render_scene(spec: DomainSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """One image (uint8, H x W) and its blob centres (K x 2, x then y)."""
    h, w = spec.image_size
    r0, r1 = spec.blob_radius_range
    if 2 * r1 > min(h, w):
        raise ValueError(f"blob diameter {2 * r1} exceeds image size {spec.image_size}")
    rng = np.random.default_rng([spec.seed, index])
    if spec.count_dist[0] == "poisson":
        k = int(rng.poisson(spec.count_dist[1]))
    else:
        k = int(rng.integers(spec.count_dist[1], spec.count_dist[2] + 1))
    img = _background(spec, rng)
    centres = np.column_stack([rng.uniform(0, w, k), rng.uniform(0, h, k)])
    radii = rng.uniform(r0, r1, k)
    levels = rng.uniform(*spec.blob_intensity_range, k)
    for (cx, cy), r, a in zip(centres, radii, levels):
        x0, x1 = max(int(cx - r) - 1, 0), min(int(cx + r) + 2, w)
        y0, y1 = max(int(cy - r) - 1, 0), min(int(cy + r) + 2, h)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / (r * r)
        bump = a * np.clip(1.0 - d2, 0.0, None)
        img[y0:y1, x0:x1] = np.maximum(img[y0:y1, x0:x1], bump)
    pixels = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return pixels, centres


def generate_domain(spec: DomainSpec, n_images: int, start: int = 0) -> list[Sample]:
    """``n_images`` scenes, image ``i`` determined by ``(spec.seed, start + i)``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = []
    for i in range(start, start + n_images):
        pixels, centres = render_scene(spec, i)
        image_id = f"{spec.name}_{i:05d}"
        ann = PointAnnotation(image_id=image_id, points=centres, image_size=pixels.shape)
        out.append(Sample(image=pixels[None].astype(np.float64) / 255.0, ann=ann, image_id=image_id))
    return out


# -- directories -------------------------------------------------------------


def save_dataset(samples: Sequence[Sample], root, with_annotations: bool = True) -> None:
    """Write ``root/images/<id>.png`` and, optionally, ``root/annotations.json``."""
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(root / IMAGE_DIR / f"{s.image_id}.png", s.image)
    if with_annotations:
        save_annotations([s.ann for s in samples], root / ANNOTATION_FILE)


def save_image(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)
    Image.fromarray(np.clip(np.round(img * 255), 0, 255).astype(np.uint8)).save(path)


def load_image(path, channels: int = 1) -> np.ndarray:
    """Read a PNG/PGM as a (C, H, W) float array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def image_files(directory) -> list[Path]:
    directory = Path(directory)
    files = [p for p in directory.iterdir() if p.suffix.lower() in (".png", ".pgm")]
    return sorted(files)


def load_dataset(root, channels: int = 1, require_annotations: bool = True) -> list[Sample]:
    """Load a directory written by :func:`save_dataset`.

    Images may sit in ``root/images`` or directly in ``root``.  Missing image
    files are collected and reported together.
    """
    root = Path(root)
    img_dir = root / IMAGE_DIR if (root / IMAGE_DIR).is_dir() else root
    ann_path = root / ANNOTATION_FILE
    if not ann_path.exists():
        if require_annotations:
            raise FileNotFoundError(f"{ann_path}: annotation file not found")
        return [
            Sample(image=load_image(p, channels), image_id=p.stem) for p in image_files(img_dir)
        ]
    anns = load_annotations(ann_path)
    missing = [a.image_id for a in anns if not _find_image(img_dir, a.image_id)]
    if missing:
        raise FileNotFoundError(f"{img_dir}: missing images for {', '.join(missing)}")
    out = []
    for a in anns:
        img = load_image(_find_image(img_dir, a.image_id), channels)
        if img.shape[1:] != a.image_size:
            raise ValueError(f"{a.image_id}: image is {img.shape[1:]}, annotation says {a.image_size}")
        out.append(Sample(image=img, ann=a, image_id=a.image_id))
    return out


def _find_image(directory: Path, image_id: str) -> Path | None:
    for ext in (".png", ".pgm", ".PNG", ".PGM"):
        p = directory / f"{image_id}{ext}"
        if p.exists():
            return p
    return None


def has_annotations(directory) -> bool:
    directory = Path(directory)
    return any(p.suffix.lower() == ".json" for p in directory.iterdir())


def load_spec_pair(path) -> tuple[DomainSpec, DomainSpec]:
    """Read ``{"source": {...}, "target": {...}}`` DomainSpec JSON."""
    doc = json.loads(Path(path).read_text())
    return DomainSpec.from_dict(doc["source"]), DomainSpec.from_dict(doc["target"])
