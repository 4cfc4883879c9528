"""Training objective: equal mix of per-channel BCE and soft Jaccard."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import ops
from ..tensor import NumericError, Tensor

JACCARD_EPS = 1e-7


def targets_from_labels(labels: np.ndarray, n_objects: int, dtype=np.float64) -> np.ndarray:
    """One-hot [G, G, n_objects + 1] targets; channel 0 is background."""
    return (labels[..., None] == np.arange(-1, n_objects)).astype(dtype)


def soft_jaccard(probs: Tensor, targets: np.ndarray, eps: float = JACCARD_EPS) -> Tensor:
    """Per-channel 1 - (sum p*g + eps) / (sum (p + g - p*g) + eps), shape [C]."""
    g = Tensor(targets.astype(probs.dtype))
    pg = ops.mul(probs, g)
    axes = tuple(range(probs.data.ndim - 1))
    inter = ops.sum(pg, axis=axes)
    union = ops.sum(ops.sub(ops.add(probs, g), pg), axis=axes)
    ratio = ops.div(ops.add(inter, Tensor(eps)), ops.add(union, Tensor(eps)))
    return ops.sub(Tensor(np.ones(ratio.shape, dtype=ratio.dtype)), ratio)


def segmentation_loss(logits: Tensor, labels: np.ndarray, n_objects: int,
                      channels: Sequence[int] | None = None) -> Tensor:
    """0.5 * mean BCE + 0.5 * mean soft Jaccard over background and each object channel.

    ``channels`` restricts scoring to the listed channels (0 = background), for
    streams whose objects occupy a sparse subset of identity slots.
    """
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("non-finite logits")
    c = n_objects + 1
    if logits.shape[-1] < c:
        raise ValueError(f"logits have {logits.shape[-1]} channels, need {c}")
    z = logits if logits.shape[-1] == c else ops.index(logits, (..., slice(0, c)))
    t = targets_from_labels(np.asarray(labels), n_objects, z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"logits {z.shape} vs targets {t.shape}")
    if channels is not None:
        idx = np.asarray(channels, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= c or len(set(idx.tolist())) != idx.size:
            raise ValueError(f"channels must be distinct indices in [0, {c}), got {list(channels)}")
        z = ops.index(z, (..., idx))
        t = t[..., idx]
    bce = ops.mean(ops.bce_with_logits(z, t))
    sj = ops.mean(soft_jaccard(ops.sigmoid(z), t))
    return ops.add(ops.scale(bce, 0.5), ops.scale(sj, 0.5))
