"""Training loop, evaluation, inference and the gradient-check harness."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .data import SynthSpec, generate_synthetic, gray_to_3ch
from .errors import ConfigError, DimensionError, NonFiniteError, ParameterError
from .losses import binarize, seg_metrics, total_loss
from .optim import AdamState, adam_step
from .tensor import BranchTape, Tensor, backward, branch_tape, no_grad

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "bce", "dice", "emb", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, step, reason):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)


def epoch_permutation(seed, epoch, n):
    """Sample order for one epoch: a permutation drawn from ``seed + epoch``."""
    return np.random.default_rng(int(seed) + int(epoch)).permutation(n)


def stack_samples(samples, dtype):
    images = np.stack([gray_to_3ch(s.image) for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    return images, masks


def check_samples(samples, config):
    if not samples:
        raise ConfigError("dataset is empty")
    for s in samples:
        if s.image.shape != (config.H, config.W, 1):
            raise DimensionError(
                f"sample {s.id} is {s.image.shape[:2]}, model expects {config.H}x{config.W}"
            )


def _fmt(x):
    return repr(float(x))


def refresh_bn_statistics(store, config, images, batch_size):
    """Set batch-norm running statistics to their average over ``images`` at the current weights.

    Batches are taken in index order in training mode; the k-th batch
    (from 0) is folded in with momentum ``k / (k + 1)``, so the result is
    the plain mean of the per-batch statistics and ignores the old values.
    """
    with no_grad():
        for k, start in enumerate(range(0, len(images), batch_size)):
            x = Tensor(images[start:start + batch_size])
            M.forward(store, x, config, mode="train", bn_momentum=k / (k + 1))


def train(run, samples, resume=None, log_path=None, ckpt_path=None):
    """Train on ``samples`` following ``run``; returns ``(store, adam_state, train_state)``.

    ``resume`` is an optional ``(store, adam_state)`` pair; training then
    continues from ``adam_state.t``.  Each step appends a row to the loss log
    and a checkpoint is written at the end of every epoch and at the end.
    With ``run.refresh_bn`` the running batch-norm statistics are recomputed
    from the final weights before the last checkpoint (see
    ``refresh_bn_statistics``); they never feed back into training, so a
    resumed run still matches an uninterrupted one bitwise.
    """
    run.validate()
    config = run.model_config()
    check_samples(samples, config)
    dtype = run.np_dtype
    weights = run.loss_weights()
    images, masks = stack_samples(samples, dtype)
    n = len(samples)
    b = run.batch_size
    steps_per_epoch = math.ceil(n / b)
    total_steps = run.epochs * steps_per_epoch
    if run.max_steps:
        total_steps = min(total_steps, run.max_steps)

    if resume is None:
        store = M.build(config, run.seed, dtype)
        state = AdamState.for_params(store, alpha=run.alpha, beta1=run.beta1,
                                     beta2=run.beta2, eps=run.adam_eps)
    else:
        store, state = resume
    tstate = TrainState(step=state.t, seed=run.seed)

    log_fh = None
    if log_path:
        mode = "a" if resume is not None and os.path.exists(log_path) else "w"
        log_fh = open(log_path, mode, newline="")
        writer = csv.writer(log_fh)
        if mode == "w":
            writer.writerow(LOG_FIELDS)
    try:
        for step in range(state.t, total_steps):
            epoch, k = divmod(step, steps_per_epoch)
            idx = epoch_permutation(run.seed, epoch, n)[k * b:(k + 1) * b]
            try:
                trace = M.forward(store, Tensor(images[idx]), config, mode="train")
                loss, parts = total_loss(trace.probs, masks[idx], trace, weights)
                store.zero_grad()
                backward(loss)
            except NonFiniteError as exc:
                raise TrainingAborted(step, str(exc)) from exc
            adam_step(store, state)
            row = (step, epoch, parts["bce"].item(), parts["dice"].item(), parts["emb"].item(),
                   loss.item())
            tstate.history.append(row)
            tstate.step, tstate.epoch = step + 1, epoch
            if log_fh:
                writer.writerow([row[0], row[1]] + [_fmt(v) for v in row[2:]])
            if step % 25 == 0:
                logger.info("step %d epoch %d loss %.5f", step, epoch, row[-1])
            if ckpt_path and k == steps_per_epoch - 1 and step < total_steps - 1:
                M.save_checkpoint(ckpt_path, config, store, state, run.seed)
    finally:
        if log_fh:
            log_fh.close()
    if run.refresh_bn:
        refresh_bn_statistics(store, config, images, b)
    if ckpt_path:
        M.save_checkpoint(ckpt_path, config, store, state, run.seed)
    return store, state, tstate


def predict(store, config, images, batch_size=8):
    """Probabilities for ``N x H x W x 3`` images in eval mode."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[start:start + batch_size], dtype=store.dtype))
            out.append(M.forward(store, x, config, mode="eval").probs.data)
    return np.concatenate(out) if out else np.zeros((0, config.H, config.W, 1))


def evaluate(store, config, samples, batch_size=8, predictions=None):
    """Per-image metric rows; ``predictions`` overrides the model output."""
    check_samples(samples, config)
    if predictions is None:
        images, _ = stack_samples(samples, store.dtype)
        predictions = binarize(predict(store, config, images, batch_size))
    rows = []
    for s, pred in zip(samples, predictions):
        metrics, counts = seg_metrics(pred, s.mask.astype(np.uint8))
        rows.append({"id": s.id, "tp": counts.tp, "fp": counts.fp, "fn": counts.fn,
                     "tn": counts.tn, **metrics})
    return rows


def mean_dice(rows):
    return float(np.mean([r["dice"] for r in rows]))


# gradient check ----------------------------------------------------------

GRADCHECK_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    errors: dict
    tolerance: float
    kink_crossings: int = 0
    evaluations: int = 0

    @property
    def failures(self):
        return [name for name, err in self.errors.items() if err > self.tolerance]

    @property
    def passed(self):
        return not self.failures

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def report(self):
        lines = [f"{'tensor':40s} max_rel_err"]
        for name, err in self.errors.items():
            flag = "  FAIL" if err > self.tolerance else ""
            lines.append(f"{name:40s} {err:.3e}{flag}")
        lines.append(f"coordinates whose +-h step crossed a relu/abs/clamp kink: "
                     f"{self.kink_crossings} of {self.evaluations}")
        verdict = "PASS" if self.passed else f"FAIL ({len(self.failures)} tensors)"
        lines.append(f"max {self.max_error:.3e} tolerance {self.tolerance:.1e} {verdict}")
        return "\n".join(lines) + "\n"


def relative_error(analytic, numeric, floor=GRADCHECK_FLOOR):
    """``|a - n| / max(|a|, |n|, floor)``."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck_batch(config, seed=0, batch=2):
    spec = SynthSpec(count=batch, H=config.H, W=config.W,
                     mass_area_range=(8, max(8, config.H * config.W // 40)),
                     distractor_count=(1, 1), seed=seed)
    return stack_samples(generate_synthetic(spec), np.float64)


GRADCHECK_MIN_STEP = 1e-6


def run_gradcheck(run, tolerance=1e-5, h=1e-4, coords=5, corrupt=None, seed=0, freeze_kinks=True,
                  adaptive=True, min_step=GRADCHECK_MIN_STEP):
    """Compare analytic gradients of the training objective against central differences.

    Works in 64-bit on a two-sample synthetic batch with batch-norm in
    training mode (running statistics frozen).

    With ``freeze_kinks`` the relu/abs/clamp branches chosen at the
    unperturbed point are replayed for the perturbed evaluations, so the
    differences measure the smooth piece the analytic gradient belongs to;
    the number of coordinates where a kink was actually crossed is reported.

    With ``adaptive`` the numeric derivative is a Richardson estimate
    ``(4 D(s/2) - D(s)) / 3`` built from central differences ``D``, starting
    at ``s = h`` and halving ``s`` while the estimated truncation error
    ``|D(s/2) - D(s)| / 3`` exceeds ``tolerance`` relative to the estimate,
    down to ``min_step``.  Without it a single central difference at ``h``
    is used.  ``corrupt`` names parameters whose analytic gradient is
    deliberately perturbed first (fault injection).
    """
    config = run.model_config()
    if (config.H, config.W) != (32, 32):
        raise ConfigError(f"grad-check runs only on the 32x32 toy config, got {config.H}x{config.W}")
    store = M.build(config, run.seed, np.float64)
    unknown = [name for name in corrupt or () if name not in store.params]
    if unknown:
        raise ParameterError(f"cannot corrupt unknown parameter(s): {', '.join(unknown)}")
    weights = run.loss_weights()
    images, masks = gradcheck_batch(config, seed)
    x = Tensor(images)
    tape = BranchTape() if freeze_kinks else None

    def objective():
        with branch_tape(tape):
            trace = M.forward(store, x, config, mode="train", update_running=False)
            return total_loss(trace.probs, masks, trace, weights)[0]

    store.zero_grad()
    backward(objective())
    for name in corrupt or ():
        store[name].grad.flat[0] += 1.0 + abs(store[name].grad.flat[0])

    rng = np.random.default_rng(seed)
    errors = {}
    crossings = evaluations = 0
    with no_grad():
        for name, p in store.named_parameters():
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
            if corrupt and name in corrupt:
                picks = np.union1d(picks, [0])
            worst = 0.0
            for i in picks:
                old = flat[i]
                crossed = False

                def central(step):
                    nonlocal crossed
                    values = []
                    for delta in (step, -step):
                        flat[i] = old + delta
                        if tape is not None:
                            tape.rewind()
                        values.append(objective().item())
                        crossed |= tape is not None and tape.crossed
                    return (values[0] - values[1]) / (2 * step)

                step = h
                coarse = central(step)
                numeric = coarse
                if adaptive:
                    best_err = math.inf
                    while step / 2 >= min_step:
                        fine = central(step / 2)
                        estimate = (4.0 * fine - coarse) / 3.0
                        err = abs(fine - coarse) / 3.0
                        if err < best_err:
                            numeric, best_err = estimate, err
                        if err <= tolerance * max(abs(estimate), GRADCHECK_FLOOR):
                            break
                        step, coarse = step / 2, fine
                flat[i] = old
                worst = max(worst, relative_error(p.grad.flat[i], numeric))
                crossings += crossed
                evaluations += 1
            errors[name] = worst
    return GradCheckResult(errors, tolerance, crossings, evaluations)
