"""Training loss: per-pixel cross-entropy plus per-class soft Dice.

The cross-entropy term is averaged over every pixel (the void class
included); the Dice term averages (1 - soft Dice) over the non-void
classes. Soft Dice is smoothed with an additive constant in numerator
and denominator, which makes a class absent from both prediction mass
and ground truth score a neutral 1.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import ClassSet
from .errors import DataError
from .tensor import Tensor

DICE_SMOOTHING = 1.0


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) int labels -> (N, K, H, W) one-hot planes."""
    if target.min() < 0 or target.max() >= num_classes:
        raise DataError(f"target labels outside [0, {num_classes}): found range "
                        f"[{int(target.min())}, {int(target.max())}]")
    n, h, w = target.shape
    planes = np.zeros((n, num_classes, h, w), dtype=dtype)
    np.put_along_axis(planes, target[:, None, :, :].astype(np.int64), 1.0, axis=1)
    return planes


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean per-pixel negative log-likelihood of the target class."""
    num_classes = logits.shape[1]
    hot = one_hot(target, num_classes, dtype=logits.dtype)
    if ignore_index is not None:
        hot[:, ignore_index, :, :] = 0.0
        count = int((target != ignore_index).sum())
    else:
        count = int(target.size)
    if count == 0:
        raise DataError("cross_entropy: no pixels left to evaluate")
    logp = T.log_softmax(logits, axis=1)
    return T.mul(T.tsum(T.mul(logp, Tensor(hot))), -1.0 / count)


def soft_dice(probs: Tensor, target: np.ndarray, class_index: int, smoothing: float = DICE_SMOOTHING) -> Tensor:
    """Differentiable Dice for one class over the whole batch.

    (2 * sum(p*g) + s) / (sum(p) + sum(g) + s); equals 1 for an exact
    one-hot match and for a class absent from both sides.
    """
    gt = (target == class_index).astype(probs.dtype)
    p = probs[:, class_index, :, :]
    intersection = T.tsum(T.mul(p, Tensor(gt)))
    total = T.add(T.tsum(p), float(gt.sum()))
    return T.div(T.add(T.mul(intersection, 2.0), smoothing), T.add(total, smoothing))


def composite_loss(logits: Tensor, target: np.ndarray, class_set: ClassSet,
                   smoothing: float = DICE_SMOOTHING, ignore_void_ce: bool = False) -> Tensor:
    """Cross-entropy over all classes plus mean non-void Dice loss.

    Zero (up to smoothing) exactly when predictions are saturated one-hot
    matches of the ground truth.
    """
    num_classes = logits.shape[1]
    if len(class_set) != num_classes:
        raise DataError(f"class set has {len(class_set)} classes but logits have {num_classes}")
    ce = cross_entropy(logits, target, ignore_index=class_set.void_index if ignore_void_ce else None)
    dice_classes = [c for c in range(num_classes) if c != class_set.void_index]
    if not dice_classes:
        return ce
    probs = T.softmax(logits, axis=1)
    total = None
    for c in dice_classes:
        term = T.sub(1.0, soft_dice(probs, target, c, smoothing))
        total = term if total is None else T.add(total, term)
    dice_loss = T.mul(total, 1.0 / len(dice_classes))
    return T.add(ce, dice_loss)
