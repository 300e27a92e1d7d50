import csv

import numpy as np
import pytest

from sftnet.errors import DimensionError, ParameterError, ValidationError
from sftnet.losses import (ConfusionCounts, LossWeights, bce_loss, binarize, confusion_counts, dice_loss,
                           embedding_loss, metrics_from_counts, seg_metrics, summarize, total_loss,
                           write_metrics_csv)
from sftnet.model import ForwardTrace
from sftnet.tensor import Tensor

from conftest import check_op


def pixel_loop_counts(pred, truth):
    tp = fp = fn = tn = 0
    for p, t in zip(pred.reshape(-1), truth.reshape(-1)):
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_metrics_against_pixel_loop_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        density = rng.uniform(0.02, 0.6)
        pred = (rng.random((16, 16)) < density).astype(np.uint8)
        truth = (rng.random((16, 16)) < density).astype(np.uint8)
        tp, fp, fn, tn = pixel_loop_counts(pred, truth)
        m, counts = seg_metrics(pred, truth)
        assert (counts.tp, counts.fp, counts.fn, counts.tn) == (tp, fp, fn, tn)
        if tp + fp + fn:
            assert m["dice"] == 2 * tp / (2 * tp + fp + fn)
            assert m["miou"] == tp / (tp + fp + fn)
        if tp + fn:
            assert m["sen"] == tp / (tp + fn)
        if tn + fp:
            assert m["spe"] == tn / (tn + fp)
        assert abs(m["dice"] - 2 * m["miou"] / (1 + m["miou"])) <= 1e-12


def test_degenerate_metric_rules():
    empty = np.zeros((4, 4), dtype=np.uint8)
    full = np.ones((4, 4), dtype=np.uint8)
    m, _ = seg_metrics(empty, empty)
    assert m == {"dice": 1.0, "miou": 1.0, "sen": 1.0, "spe": 1.0}
    m, _ = seg_metrics(full, empty)      # no positives in target, but false alarms
    assert m["sen"] == 0.0 and m["dice"] == 0.0 and m["spe"] == 0.0
    m, _ = seg_metrics(full, full)       # no negatives in target
    assert m["spe"] == 1.0 and m["dice"] == 1.0
    m, _ = seg_metrics(empty, full)      # all-zero predictor on a nonempty target
    assert m["sen"] == 0.0 and m["spe"] == 0.0


def test_metric_input_validation():
    with pytest.raises(ValidationError):
        confusion_counts(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        confusion_counts(np.zeros((2, 2)), np.zeros((3, 2)))
    np.testing.assert_array_equal(binarize(np.array([0.49, 0.5, 0.9])), [0, 1, 1])


def test_dice_identities():
    rng = np.random.default_rng(0)
    y = (rng.random((2, 8, 8, 1)) < 0.3).astype(float)
    assert dice_loss(Tensor(y), y).item() == 0.0
    assert dice_loss(Tensor(y), y, per_sample=True).item() == 0.0
    z = np.zeros((1, 4, 4, 1))
    assert dice_loss(Tensor(z), z).item() == 0.0
    assert dice_loss(Tensor(1 - y), y).item() > 0.9


def test_dice_per_sample_is_mean_of_single_losses():
    rng = np.random.default_rng(1)
    p = rng.random((3, 4, 4, 1))
    y = (rng.random((3, 4, 4, 1)) < 0.4).astype(float)
    singles = [dice_loss(Tensor(p[i:i + 1]), y[i:i + 1]).item() for i in range(3)]
    assert abs(dice_loss(Tensor(p), y, per_sample=True).item() - np.mean(singles)) < 1e-15


def test_bce_matches_formula_and_clamps():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.01, 0.99, (2, 4, 4, 1))
    y = (rng.random(p.shape) < 0.5).astype(float)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(bce_loss(Tensor(p), y).item() - ref) < 1e-14
    hard = bce_loss(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0])).item()
    assert np.isfinite(hard) and abs(hard + np.log(1e-7)) < 1e-6


def test_embedding_loss_values():
    rng = np.random.default_rng(3)
    es = [Tensor(rng.standard_normal((2, 16, 4))), Tensor(rng.standard_normal((2, 4, 8)))]
    assert embedding_loss(es, [Tensor(e.data.copy()) for e in es]).item() == 0.0
    ds = [Tensor(e.data + 0.5) for e in es]
    assert abs(embedding_loss(es, ds).item() - 1.0) < 1e-14  # 0.5 per pair, two pairs
    with pytest.raises(DimensionError):
        embedding_loss(es, ds[:1])
    with pytest.raises(DimensionError):
        embedding_loss(es, ds[::-1])


def _trace(rng, p):
    enc = [Tensor(rng.standard_normal((2, 4, 3))) for _ in range(3)]
    dec = [Tensor(rng.standard_normal((2, 4, 3))) for _ in range(3)]
    return ForwardTrace(p, None, enc, dec, {})


def test_total_loss_is_linear_in_each_weight():
    rng = np.random.default_rng(4)
    for _ in range(3):
        p = Tensor(rng.uniform(0.05, 0.95, (2, 4, 4, 1)))
        y = (rng.random((2, 4, 4, 1)) < 0.3).astype(float)
        trace = _trace(rng, p)
        lam = rng.uniform(0, 2, 3)
        total, parts = total_loss(p, y, trace, LossWeights(*lam))
        expected = lam[0] * parts["bce"].item() + lam[1] * parts["dice"].item() + lam[2] * parts["emb"].item()
        assert abs(total.item() - expected) <= 1e-7
        for k, key in enumerate(("bce", "dice", "emb")):
            bumped = lam.copy()
            bumped[k] += 1.0
            t2, _ = total_loss(p, y, trace, LossWeights(*bumped))
            assert abs(t2.item() - total.item() - parts[key].item()) <= 1e-7


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(0.4, 0.6, 0.01)
    with pytest.raises(ParameterError):
        LossWeights(-0.1, 0.6, 0.01)
    with pytest.raises(ParameterError):
        LossWeights(0.4, float("nan"), 0.01)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    r = np.random.default_rng(seed)
    y = (r.random((2, 3, 3, 1)) < 0.4).astype(float)
    p = r.uniform(0.05, 0.95, y.shape)
    check_op(lambda t: bce_loss(t, y), [p])
    check_op(lambda t: dice_loss(t, y, per_sample=True), [p])
    e = r.standard_normal((2, 4, 3))
    d = e + np.where(r.random(e.shape) < 0.5, -1, 1) * r.uniform(0.1, 1.0, e.shape)
    check_op(lambda a, b: embedding_loss([a], [b]), [e, d])


def test_summary_and_csv(tmp_path):
    rows = []
    for i, (tp, fp, fn, tn) in enumerate([(3, 1, 0, 12), (0, 0, 2, 14)]):
        c = ConfusionCounts(tp, fp, fn, tn)
        rows.append({"id": f"s{i}", "tp": tp, "fp": fp, "fn": fn, "tn": tn, **metrics_from_counts(c)})
    mean_row, pooled = summarize(rows)
    assert mean_row["tp"] == 3 and mean_row["fn"] == 2
    assert mean_row["dice"] == pytest.approx((6 / 7 + 0.0) / 2)
    assert pooled["dice"] == pytest.approx(6 / 9)
    path = tmp_path / "m.csv"
    write_metrics_csv(path, rows)
    with open(path) as fh:
        lines = list(csv.DictReader(fh))
    assert len(lines) == len(rows) + 1 and lines[-1]["id"] == "mean"
