"""Training objectives and segmentation metrics."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError
from .tensor import Tensor, absolute, clamp, log, mean

PROB_FLOOR = 1e-7
THRESHOLD = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_bce: float = 0.4
    lambda_dice: float = 0.6
    lambda_emb: float = 0.01

    def __post_init__(self):
        for name in ("lambda_bce", "lambda_dice", "lambda_emb"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"{name} must be finite and >= 0, got {value}")


def _check_pair(p, y):
    if p.shape != y.shape:
        raise DimensionError(f"prediction {p.shape} and target {y.shape} differ in shape")


def _target(y, like):
    if isinstance(y, Tensor):
        return y
    return Tensor(np.asarray(y, dtype=like.dtype))


def bce_loss(p, y):
    """Mean binary cross-entropy; ``p`` is clamped to ``[1e-7, 1 - 1e-7]``."""
    y = _target(y, p)
    _check_pair(p, y)
    pc = clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = y * log(pc) + (1.0 - y) * log(1.0 - pc)
    return -mean(terms)


def dice_loss(p, y, epsilon=1.0, per_sample=False):
    """``1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)``.

    With ``per_sample`` the ratio is taken per leading-axis sample and the
    losses are averaged over the batch.
    """
    y = _target(y, p)
    _check_pair(p, y)
    if per_sample:
        axes = tuple(range(1, p.ndim))
        inter = (p * y).sum(axis=axes)
        denom = p.sum(axis=axes) + y.sum(axis=axes) + epsilon
        return mean(1.0 - (2.0 * inter + epsilon) / denom)
    inter = (p * y).sum()
    denom = p.sum() + y.sum() + epsilon
    return 1.0 - (2.0 * inter + epsilon) / denom


def embedding_loss(encoder_embeddings, decoder_embeddings):
    """Sum over pairs of the mean absolute difference between embeddings.

    Each pair contributes ``||E - D||_1 / Q`` with ``Q`` its element count,
    so the batch is averaged together with the features.
    """
    if len(encoder_embeddings) != len(decoder_embeddings):
        raise DimensionError(
            f"{len(encoder_embeddings)} encoder embeddings vs {len(decoder_embeddings)} decoder embeddings"
        )
    total = None
    for i, (e, d) in enumerate(zip(encoder_embeddings, decoder_embeddings)):
        if e.shape != d.shape:
            raise DimensionError(f"embedding pair {i}: {e.shape} vs {d.shape}")
        term = mean(absolute(e - d))
        total = term if total is None else total + term
    if total is None:
        raise DimensionError("embedding_loss needs at least one pair")
    return total


def total_loss(p, y, trace, weights=LossWeights()):
    """Weighted objective; returns ``(total, components)``.

    ``components`` maps ``"bce"``, ``"dice"`` and ``"emb"`` to the unweighted
    scalar tensors.  The embedding term is always computed so it can be
    logged even when its weight is zero.  The Dice term is averaged over
    per-sample Dice losses.
    """
    l_bce = bce_loss(p, y)
    l_dsc = dice_loss(p, y, per_sample=True)
    l_emb = embedding_loss(trace.encoder_embeddings, trace.decoder_embeddings)
    total = weights.lambda_dice * l_dsc + weights.lambda_bce * l_bce + weights.lambda_emb * l_emb
    return total, {"bce": l_bce, "dice": l_dsc, "emb": l_emb}


# metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def _as_binary(x, what):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{what} must be binary (0/1)")
    return arr.astype(bool)


def binarize(probs, threshold=THRESHOLD):
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (arr >= threshold).astype(np.uint8)


def confusion_counts(pred_mask, y):
    pred = _as_binary(pred_mask, "prediction")
    truth = _as_binary(y, "target")
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and target {truth.shape} differ in shape")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num, den, trivially_met=True):
    if den == 0:
        return 1.0 if trivially_met else 0.0
    return num / den


def metrics_from_counts(c):
    # zero denominators score 1 only when prediction and target agree on emptiness
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "miou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "sen": _ratio(c.tp, c.tp + c.fn, trivially_met=c.fp == 0),
        "spe": _ratio(c.tn, c.tn + c.fp, trivially_met=c.fn == 0),
    }


def seg_metrics(pred_mask, y):
    """Dice, mIoU, sensitivity and specificity of a binary prediction.

    Returns ``(metrics, counts)``.  A ratio with a zero denominator is 1.0
    when the prediction is also empty on the relevant class, else 0.0.
    """
    counts = confusion_counts(pred_mask, y)
    return metrics_from_counts(counts), counts


METRIC_FIELDS = ("id", "tp", "fp", "fn", "tn", "dice", "miou", "sen", "spe")


def summarize(rows):
    """Per-image mean row and globally pooled metrics for a list of report rows."""
    keys = ("dice", "miou", "sen", "spe")
    mean_row = {"id": "mean"}
    pooled = ConfusionCounts(0, 0, 0, 0)
    for r in rows:
        pooled = pooled + ConfusionCounts(r["tp"], r["fp"], r["fn"], r["tn"])
    for k in ("tp", "fp", "fn", "tn"):
        mean_row[k] = getattr(pooled, k)
    for k in keys:
        mean_row[k] = float(np.mean([r[k] for r in rows])) if rows else float("nan")
    return mean_row, metrics_from_counts(pooled)


def write_metrics_csv(path, rows):
    """One row per image plus a trailing ``mean`` row (counts summed, ratios averaged)."""
    mean_row, _ = summarize(rows)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for r in list(rows) + [mean_row]:
            writer.writerow({k: (repr(float(r[k])) if k in ("dice", "miou", "sen", "spe") else r[k])
                             for k in METRIC_FIELDS})
    return mean_row
