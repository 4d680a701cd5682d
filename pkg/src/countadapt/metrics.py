"""Counting metrics: MAE, root-mean-square MSE and grid-level GMAE."""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .losses import roi_at


def _pairs(pairs) -> np.ndarray:
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("need at least one (ground truth, prediction) pair")
    return arr


def mae(pairs: Iterable[tuple[float, float]]) -> float:
    arr = _pairs(pairs)
    return float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))


def mse(pairs: Iterable[tuple[float, float]]) -> float:
    """Square root of the mean squared count error (the usual crowd-counting 'MSE')."""
    arr = _pairs(pairs)
    return math.sqrt(float(np.mean((arr[:, 0] - arr[:, 1]) ** 2)))


def cell_bounds(size: int, level: int) -> np.ndarray:
    """2**level + 1 boundaries floor(k * size / 2**level)."""
    parts = 2**level
    if size < parts:
        raise ValueError(f"map side {size} too small for {parts} cells at level {level}")
    return np.array([(k * size) // parts for k in range(parts + 1)])


def cell_sums(dmap, level: int) -> np.ndarray:
    m = _as_2d(dmap)
    rows = cell_bounds(m.shape[0], level)
    cols = cell_bounds(m.shape[1], level)
    # reduceat sums each [bound_k, bound_{k+1}) slice
    return np.add.reduceat(np.add.reduceat(m, rows[:-1], axis=0), cols[:-1], axis=1)


def _as_2d(dmap) -> np.ndarray:
    m = np.asarray(dmap, dtype=np.float64)
    while m.ndim > 2:
        if m.shape[0] != 1:
            raise ValueError(f"expected a single map, got shape {np.shape(dmap)}")
        m = m[0]
    return m


def gmae(density_pred, density_gt, level: int, roi=None) -> float:
    """Per-image grid error: sum over the 4**level cells of |pred cell sum - gt cell sum|."""
    if level < 0:
        raise ValueError("level must be >= 0")
    pred, gt = _as_2d(density_pred), _as_2d(density_gt)
    if pred.shape != gt.shape:
        raise ValueError(f"map shapes differ: {pred.shape} vs {gt.shape}")
    if roi is not None:
        mask = roi_at(roi, pred.shape)
        pred, gt = pred * mask, gt * mask
    return float(np.abs(cell_sums(pred, level) - cell_sums(gt, level)).sum())


def evaluate_dataset(
    predict: Callable[[int], np.ndarray],
    gt_maps: Sequence[np.ndarray],
    levels: Sequence[int] = (0, 1, 2, 3),
    rois: Sequence | None = None,
    name: str = "dataset",
) -> dict:
    """Score ``predict(i)`` against ``gt_maps[i]`` for every image.

    Counts for MAE/MSE come from the (ROI-masked) map integrals, so GMAE(0)
    equals MAE exactly.  Returns ``{dataset, n_images, mae, mse, gmae: {L: value}}``.
    """
    if not len(gt_maps):
        raise ValueError("dataset is empty")
    pairs = []
    per_level = {int(L): [] for L in levels}
    for i, gt in enumerate(gt_maps):
        pred = _as_2d(predict(i))
        gt = _as_2d(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"image {i}: prediction {pred.shape} vs ground truth {gt.shape}")
        roi = None if rois is None else rois[i]
        if roi is not None:
            mask = roi_at(roi, gt.shape)
            pred, gt = pred * mask, gt * mask
        # same summation path as gmae() so GMAE(0) == MAE bit for bit
        pairs.append((float(cell_sums(gt, 0)[0, 0]), float(cell_sums(pred, 0)[0, 0])))
        for L in per_level:
            per_level[L].append(gmae(pred, gt, L))
    return {
        "dataset": name,
        "n_images": len(gt_maps),
        "mae": mae(pairs),
        "mse": mse(pairs),
        "gmae": {str(L): float(np.mean(v)) for L, v in per_level.items()},
    }


def format_report(report: dict) -> str:
    lines = [f"{report['dataset']}: {report['n_images']} images"]
    lines.append(f"  MAE  {report['mae']:.4f}")
    lines.append(f"  MSE  {report['mse']:.4f}")
    for L, v in report["gmae"].items():
        lines.append(f"  GMAE({L}) {v:.4f}")
    return "\n".join(lines)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
