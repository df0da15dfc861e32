"""Segmentation losses, Dice metrics and tumour region composition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CE_CLIP = 1e-7
REGIONS = ("tc", "wt", "et")
# label codes: 0 background, 1 necrotic core, 2 edema, 3 enhancing
REGION_LABELS = {"et": (3,), "tc": (1, 3), "wt": (1, 2, 3)}


@dataclass
class RegionMaskSet:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __getitem__(self, region):
        return getattr(self, region)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x, dtype=np.float64))


def _check_shapes(p, g):
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and target {g.shape} differ in shape")


def dice_loss(p, g, class_axis=None):
    """Soft Dice loss ``1 - 2 sum(p g) / (sum p + sum g)``.

    With ``class_axis`` the Dice is computed per class (summing over every
    other axis) and averaged over classes; classes absent from both inputs
    are counted as a perfect match.
    """
    p = _as_tensor(p)
    g = _as_tensor(g, p)
    _check_shapes(p, g)
    if class_axis is None:
        denom = p.data.sum() + g.data.sum()
        if denom == 0:
            return T.sum(p * 0.0)
        return 1.0 - 2.0 * T.sum(p * g) / T.sum(p + g)
    axis = class_axis % p.ndim
    others = tuple(i for i in range(p.ndim) if i != axis)
    inter = T.sum(p * g, axis=others)
    denom = T.sum(p + g, axis=others)
    empty = denom.data == 0
    safe = denom + Tensor(empty.astype(p.dtype))
    score = (2.0 * inter + Tensor(empty.astype(p.dtype))) / safe
    return 1.0 - T.mean(score)


def _class_axis(p, axis):
    if axis is not None:
        return axis % p.ndim
    return 1 if p.ndim > 1 else 0


def ce_loss(p, g, class_axis=None):
    """Cross-entropy ``-(1/N) sum g log p`` with ``p`` clipped to [1e-7, 1].

    N counts positions, i.e. every element along axes other than the class
    axis (axis 1 for batched maps, axis 0 for a single probability vector).
    """
    p = _as_tensor(p)
    g = _as_tensor(g, p)
    _check_shapes(p, g)
    axis = _class_axis(p, class_axis)
    n = p.size // p.shape[axis]
    if n <= 0:
        raise ValueError("cross-entropy needs at least one position")
    return -T.sum(g * T.log(T.clip(p, CE_CLIP, 1.0))) / float(n)


def combined_loss(p, g, class_axis=None):
    """``0.5 * dice + 0.5 * cross-entropy``."""
    return 0.5 * dice_loss(p, g, class_axis) + 0.5 * ce_loss(p, g, class_axis)


def dsc(pred, target) -> float:
    """Dice similarity of two binary masks; both empty scores 1, one empty 0."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {target.shape}")
    total = int(pred.sum()) + int(target.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, target).sum()) / total


def region_masks(labels) -> RegionMaskSet:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise ValueError(f"labels must lie in {{0,1,2,3}}, got range [{labels.min()}, {labels.max()}]")
    return RegionMaskSet(
        wt=np.isin(labels, REGION_LABELS["wt"]),
        tc=np.isin(labels, REGION_LABELS["tc"]),
        et=np.isin(labels, REGION_LABELS["et"]),
    )


def region_dice(pred_labels, true_labels) -> dict:
    """DSC per region (tc, wt, et) between two label maps."""
    pm, tm = region_masks(pred_labels), region_masks(true_labels)
    return {r: dsc(pm[r], tm[r]) for r in REGIONS}


def mean_dice(tc, wt, et) -> float:
    return (tc + wt + et) / 3.0


def one_hot(labels, n_classes=4, dtype=np.float32):
    """(B, H, W) integer labels -> (B, n_classes, H, W) one-hot."""
    labels = np.asarray(labels)
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)
