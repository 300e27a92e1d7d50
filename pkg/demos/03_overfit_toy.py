"""Generate a synthetic set, overfit the toy model on it and evaluate.

Usage: python3 demos/03_overfit_toy.py [steps] [workdir]

The default 300 steps take a few minutes on a laptop CPU.  The same flow
through the command line:

    sftnet gen-data --spec synth_toy --out data
    sftnet train --config toy --data data --max-steps 300
    sftnet eval --ckpt checkpoint.sftc --data data
"""

import os
import sys
import tempfile

import numpy as np

from sftnet.config import load_run_config, load_synth_spec
from sftnet.data import generate_synthetic
from sftnet.losses import summarize
from sftnet.train import evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
workdir = sys.argv[2] if len(sys.argv) > 2 else tempfile.mkdtemp(prefix="sftnet_")
os.makedirs(workdir, exist_ok=True)

spec, _ = load_synth_spec("synth_toy")
samples = generate_synthetic(spec)
areas = [s.mass_area_px for s in samples]
print(f"{len(samples)} images of {spec.H}x{spec.W}, mass areas {min(areas)}-{max(areas)} px")

run = load_run_config("toy").replace(max_steps=steps)
print(f"model C={run.C} window={run.window}, Adam lr {run.alpha}, batch {run.batch_size}")
store, state, tstate = train(run, samples, log_path=os.path.join(workdir, "loss_log.csv"),
                             ckpt_path=os.path.join(workdir, "checkpoint.sftc"))

total = np.array([row[-1] for row in tstate.history])
for end in range(50, len(total) + 1, 50):
    print(f"steps {end - 50:3d}-{end - 1:3d}: mean loss {total[end - 50:end].mean():.4f}")

rows = evaluate(store, run.model_config(), samples)
mean_row, pooled = summarize(rows)
print(f"train-set mean Dice {mean_row['dice']:.4f}, mIoU {mean_row['miou']:.4f}, "
      f"SEN {mean_row['sen']:.4f}, SPE {mean_row['spe']:.4f}")
print("outputs in", workdir)
