"""``sftnet`` command-line interface.

Exit codes: 0 success, 1 a check or tolerance failed (or training
aborted), 2 file or format problem, 3 invalid or incompatible configuration.
"""

import argparse
import logging
import sys

import numpy as np

from . import model as M
from .config import load_run_config, load_synth_spec
from .data import generate_synthetic, load_pgm, read_dataset, resize, save_mask, write_dataset
from .errors import ConfigError, DimensionError, FormatError, ParameterError, ValidationError
from .losses import binarize, summarize, write_metrics_csv
from .train import TrainingAborted, evaluate, predict, run_gradcheck, train

EXIT_OK, EXIT_FAIL, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3

logger = logging.getLogger("sftnet")


def cmd_gen_data(args):
    spec, threshold = load_synth_spec(args.spec)
    samples = generate_synthetic(spec)
    write_dataset(args.out, samples, threshold)
    n_test = sum(s.mass_area_px < threshold for s in samples)
    print(f"wrote {len(samples)} samples to {args.out} ({len(samples) - n_test} train, {n_test} test)")
    return EXIT_OK


def _run_config(args):
    run = load_run_config(args.config)
    changes = {}
    for key in ("data_dir", "ckpt", "log", "resume", "seed", "max_steps"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "no_emb_loss", False):
        changes["emb_loss_enabled"] = False
    return run.replace(**changes).validate() if changes else run


def cmd_train(args):
    run = _run_config(args)
    samples = read_dataset(run.data_dir, split="train")
    resume = None
    if run.resume:
        _, store, state, _ = M.load_checkpoint(run.resume, run.model_config())
        resume = (store, state)
    _, state, tstate = train(run, samples, resume=resume, log_path=run.log, ckpt_path=run.ckpt)
    last = tstate.history[-1] if tstate.history else None
    if last is not None:
        print(f"step {state.t} bce {last[2]:.5f} dice {last[3]:.5f} emb {last[4]:.5f} total {last[5]:.5f}")
    print(f"checkpoint {run.ckpt}, loss log {run.log}")
    return EXIT_OK


def cmd_eval(args):
    config, store, _, _ = M.load_checkpoint(args.ckpt)
    samples = read_dataset(args.data, split=args.split)
    rows = evaluate(store, config, samples, batch_size=args.batch_size)
    write_metrics_csv(args.out, rows)
    mean_row, pooled = summarize(rows)
    print(f"{len(rows)} images; mean dice {mean_row['dice']:.4f} miou {mean_row['miou']:.4f} "
          f"sen {mean_row['sen']:.4f} spe {mean_row['spe']:.4f}")
    print(f"pooled dice {pooled['dice']:.4f} miou {pooled['miou']:.4f} "
          f"sen {pooled['sen']:.4f} spe {pooled['spe']:.4f}")
    print(f"metrics written to {args.out}")
    return EXIT_OK


def cmd_infer(args):
    config, store, _, _ = M.load_checkpoint(args.ckpt)
    image = load_pgm(args.input)
    in_hw = image.shape[:2]
    if in_hw != (config.H, config.W):
        if not args.resize:
            raise DimensionError(f"image is {in_hw[0]}x{in_hw[1]}, model expects {config.H}x{config.W}; "
                                 "pass --resize to rescale")
        image = resize(image, config.H, config.W, "bilinear")
    x = np.repeat(image, 3, axis=2)[None]
    mask = binarize(predict(store, config, x))[0].astype(np.float64)
    if mask.shape[:2] != in_hw:
        mask = resize(mask, in_hw[0], in_hw[1], "nearest")
    save_mask(args.output, mask)
    print(f"mass area {int(mask.sum())} px")
    return EXIT_OK


def cmd_grad_check(args):
    run = load_run_config(args.config)
    result = run_gradcheck(run, tolerance=args.tol, h=args.h, coords=args.coords,
                           corrupt=args.corrupt, seed=args.seed,
                           freeze_kinks=not args.plain, adaptive=not args.plain)
    sys.stdout.write(result.report())
    if not result.passed:
        print("offending tensors: " + ", ".join(result.failures))
        return EXIT_FAIL
    return EXIT_OK


def cmd_audit(args):
    run = load_run_config(args.config)
    sys.stdout.write(M.render_audit(run.model_config()))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sftnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", required=True, help="data spec file or bundled name (synth_toy)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True, help="run config file or preset (full, toy, gradcheck)")
    p.add_argument("--data", dest="data_dir", help="dataset directory (overrides data_dir)")
    p.add_argument("--ckpt", help="checkpoint path (overrides ckpt)")
    p.add_argument("--log", help="loss log CSV path (overrides log)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps")
    p.add_argument("--no-emb-loss", action="store_true",
                   help="set the embedding-loss weight to 0 (the term is still logged)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-image metrics of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), help="only this split (default: all)")
    p.add_argument("--out", default="metrics.csv", help="metrics CSV path")
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="input PGM")
    p.add_argument("--out", dest="output", required=True, help="output mask PGM (0/255)")
    p.add_argument("--resize", action="store_true",
                   help="rescale the image to the model resolution and the mask back")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("grad-check", help="compare analytic and numeric gradients")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--h", type=float, default=1e-4, help="initial finite-difference step")
    p.add_argument("--coords", type=int, default=5, help="coordinates sampled per tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plain", action="store_true",
                   help="single central difference at h, without kink freezing or step refinement")
    p.add_argument("--corrupt", action="append", metavar="TENSOR",
                   help="perturb this tensor's analytic gradient first (fault injection)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("audit", help="print the model dimension table")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, FormatError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, DimensionError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
