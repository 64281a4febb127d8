"""Federated validation moving the aggregation weighting during training.

Runs the default PFM + FV experiment and prints the weighting every 20
rounds, next to the validators' raw scores of the weighting in force.  The
run starts from size-proportional weights; validators only ever see the
aggregated backbone and return one scalar each.  A full per-round trace is
written to ``demo_runs/fv/fv_trace.csv``.

    python demos/03_fv_trajectory.py
"""

from pathlib import Path

from fedface import sim
from fedface.config import ExperimentConfig

cfg = ExperimentConfig().replace(method="pfm_fv", fv__phi=0.05)
out = Path("demo_runs") / "fv"
res = sim.run(cfg, out_dir=out)

print("round   w0     w1     w2    scores of current weighting")
for rec in res.fv_records:
    if rec.round % 20 == 0 or rec.round == 1:
        w = " ".join(f"{x:.3f}" for x in rec.w)
        s = " ".join(f"{x:.4f}" for x in rec.S[:, 0])
        print(f"{rec.round:5d}  {w}   {s}")
picked = sum(rec.t_hat != 0 for rec in res.fv_records)
print(f"a sampled candidate beat the current weighting in {picked} of {len(res.fv_records)} rounds")
print(f"trace written to {out / 'fv_trace.csv'}")
