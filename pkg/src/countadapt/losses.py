"""Training objectives: density regression, source/target classification,
adversarial confusion, the nested-crop count ranking hinge, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    Var,
    add,
    concat,
    grid_sum,
    item_means,
    item_sums,
    log_sigmoid,
    matvec,
    mul,
    neg,
    reduce_sum,
    relu,
    square,
    stack,
    sub,
)


@dataclass(frozen=True)
class LossWeights:
    disc: float = 0.001  # lambda_1, discriminator step only
    adv: float = 0.001  # lambda_2
    rank: float = 0.001  # lambda_3
    margin: float = 0.0  # epsilon in the ranking hinge

    def __post_init__(self):
        if min(self.disc, self.adv, self.rank) < 0 or self.margin < 0:
            raise ValueError("loss weights and margin must be non-negative")


def _shape(x):
    return np.shape(x.value if isinstance(x, Var) else x)


def density_loss(pred, gt):
    """(1 / 2N) * sum over items of the squared L2 distance between maps."""
    if _shape(pred) != _shape(gt):
        raise ValueError(f"density_loss shape mismatch: pred {_shape(pred)} vs gt {_shape(gt)}")
    n = _shape(pred)[0]
    return mul(grid_sum(square(sub(pred, gt))), 1.0 / (2 * n))


def _as_batch(maps) -> object:
    if isinstance(maps, (list, tuple)):
        if not maps:
            raise ValueError("expected at least one logit map")
        return maps[0] if len(maps) == 1 else concat(maps, axis=0)
    if _shape(maps)[0] < 1:
        raise ValueError("expected at least one logit map")
    return maps


def discriminator_loss(logits_src, logits_tgt):
    """Binary cross-entropy with label 1 for source maps and 0 for target maps.

    Each argument is a list of N*S logit maps (or one batched grid).  Pixel
    losses are averaged per map, then all maps are summed and scaled by 1/(2NS).
    """
    src = _as_batch(logits_src)
    tgt = _as_batch(logits_tgt)
    m = _shape(src)[0]
    if _shape(tgt)[0] != m:
        raise ValueError(f"need as many source maps as target maps, got {m} and {_shape(tgt)[0]}")
    # -log sigmoid(x) for z=1, -log(1 - sigmoid(x)) = -log sigmoid(-x) for z=0
    per_src = item_means(log_sigmoid(src))
    per_tgt = item_means(log_sigmoid(neg(tgt)))
    total = add(reduce_sum(per_src), reduce_sum(per_tgt))
    return mul(total, -1.0 / (2 * m))


def adversarial_loss(logits_tgt):
    """-(1 / 2NS) * sum over target maps of the pixel-mean log sigmoid(logit)."""
    tgt = _as_batch(logits_tgt)
    m = _shape(tgt)[0]
    return mul(reduce_sum(item_means(log_sigmoid(tgt))), -1.0 / (2 * m))


def ranking_loss(counts, margin: float = 0.0):
    """sum over pairs i > j of max(0, n_j - n_i + margin); counts ordered smallest crop first."""
    if isinstance(counts, (list, tuple)):
        if len(counts) < 2:
            return np.asarray(0.0)
        counts = stack(counts)
    n = _shape(counts)[0]
    if n < 2:
        return np.asarray(0.0)
    j, i = np.triu_indices(n, k=1)  # j < i
    cv = counts.value if isinstance(counts, Var) else np.asarray(counts)
    pick_lo = np.zeros((len(j), n), dtype=cv.dtype)
    pick_hi = np.zeros((len(j), n), dtype=cv.dtype)
    pick_lo[np.arange(len(j)), j] = 1
    pick_hi[np.arange(len(j)), i] = 1
    diff = matvec(pick_lo - pick_hi, counts)
    return grid_sum(relu(add(diff, margin)))


def predicted_count(density, roi=None):
    """Integral of a density map, optionally restricted to an ROI mask.

    ``roi`` may be given at the density resolution or at an integer multiple of
    it; in the latter case it is reduced to per-cell coverage fractions.
    """
    if roi is None:
        return grid_sum(density)
    mask = roi_at(roi, _shape(density)[-2:])
    return grid_sum(mul(density, mask.astype(_dtype(density))))


def _dtype(x):
    return (x.value if isinstance(x, Var) else np.asarray(x)).dtype


def roi_at(roi, size) -> np.ndarray:
    """ROI mask resampled to ``size`` by block averaging (cell coverage fraction)."""
    m = np.asarray(roi, dtype=np.float64)
    while m.ndim > 2:
        m = m[0]
    h, w = size
    if m.shape == (h, w):
        return m
    fh, fw = m.shape[0] // h, m.shape[1] // w
    if fh < 1 or fh != fw or m.shape != (h * fh, w * fw):
        raise ValueError(f"roi shape {m.shape} is not an integer multiple of density shape {(h, w)}")
    return m.reshape(h, fh, w, fw).mean(axis=(1, 3))


def combined_generator_loss(dens, adv, rank_src, rank_tgt, weights: LossWeights = LossWeights()):
    """Generator objective: L_dens + lambda_2 L_adv + lambda_3 (L_rank(src) + L_rank(tgt))."""
    return add(add(dens, mul(adv, weights.adv)), mul(add(rank_src, rank_tgt), weights.rank))


def pyramid_counts(density_batch) -> Var:
    """Per-crop integrals of an (S, 1, h, w) batch of predicted maps."""
    return item_sums(density_batch)

