"""The score surface over aggregation weightings, from a checkpoint.

Trains FedAvg for the first half of the default schedule, then scores all
66 weightings of a 0.1-spaced lattice on the three validators using the
saved local backbones.  The best weighting is usually far from the
size-proportional default, which is the gap federated validation exploits.
By mid-training the differences sit in the third decimal, so the surface
is flat with some ripple; earlier checkpoints show a sharper peak.

    python demos/04_grid_search.py
"""

from pathlib import Path

import numpy as np

from fedface import sim
from fedface.config import ExperimentConfig
from fedface.data import generate
from fedface.fed_core import load_checkpoint
from fedface.fv import grid_search

cfg = ExperimentConfig().replace(method="fedavg", hyper__R=200, checkpoint_every=100)
out = Path("demo_runs") / "grid"
sim.run(cfg, out_dir=out)
ckpt = load_checkpoint(out / "checkpoints" / "round_00100.ckpt")

parties, shards = generate(cfg.data)
surface = grid_search(ckpt.thetas, sim.build_validators(cfg, shards), resolution=10)
totals = {pt: float(s.sum()) for pt, s in surface.items()}

# print the surface as a triangle: rows are w0, columns w1, w2 fills the rest
print("summed score by (w0 down, w1 across)")
for i in range(11):
    cells = [f"{totals[(i / 10, j / 10, (10 - i - j) / 10)]:.4f}" for j in range(11 - i)]
    print(f"w0={i / 10:.1f}  " + " ".join(cells))

best = max(totals, key=totals.get)
sizes = np.array([len(p) for p in parties], dtype=float)
print("best weighting:", best, f"score {totals[best]:.4f}")
print("size-proportional weighting:", np.round(sizes / sizes.sum(), 3))
