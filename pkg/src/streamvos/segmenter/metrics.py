"""Region (J), boundary (F) and combined J&F scores for binary masks."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

BOUNDARY_TOLERANCE = 1


def j_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbor outside the mask or on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def f_metric(pred: np.ndarray, gt: np.ndarray, tolerance: int = BOUNDARY_TOLERANCE) -> float:
    """Boundary F-measure with matches allowed within ``tolerance`` pixels (Euclidean)."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    disk = _disk(tolerance)
    near_g = ndimage.binary_dilation(bg, structure=disk)
    near_p = ndimage.binary_dilation(bp, structure=disk)
    precision = np.count_nonzero(bp & near_g) / n_p
    recall = np.count_nonzero(bg & near_p) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def frame_scores(pred_labels: np.ndarray, gt_labels: np.ndarray, n_objects: int) -> tuple[float, float]:
    """Object-averaged (J, F) for one frame of label maps (-1 = background)."""
    js, fs = [], []
    for m in range(n_objects):
        p, g = pred_labels == m, gt_labels == m
        js.append(j_metric(p, g))
        fs.append(f_metric(p, g))
    return float(np.mean(js)), float(np.mean(fs))


def jf_score(pred: np.ndarray, gt: np.ndarray, n_objects: int | None = None) -> dict[str, float]:
    """Mean J, F and J&F over objects, then frames.

    ``pred``/``gt`` are label maps [T, G, G] (or a single [G, G] frame) with -1
    as background. With ``n_objects`` None, binary masks are scored as one object.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {gt.shape}")
    if n_objects is None:
        pred = np.where(pred.astype(bool), 0, -1)
        gt = np.where(gt.astype(bool), 0, -1)
        n_objects = 1
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    scores = [frame_scores(p, g, n_objects) for p, g in zip(pred, gt)]
    j = float(np.mean([s[0] for s in scores]))
    f = float(np.mean([s[1] for s in scores]))
    return {"J": j, "F": f, "JF": (j + f) / 2}
