"""One party, one local step per round: PFM is classical momentum SGD.

With a single trainer, K = 1 and the weighting fixed at [1], the server's
momentum estimate (Theta_old - Theta_new) / eta is exactly the momentum
buffer a centralized optimizer would hold.  This script trains both the
federated and the centralized arm on the same data and seeds and prints how
far apart the two trajectories drift.

    python demos/01_pfm_equivalence.py
"""

import numpy as np

from fedface import sim
from fedface.config import ExperimentConfig

cfg = ExperimentConfig().replace(
    hyper__R=100, hyper__K=1,
    data__num_parties=1, data__classes_per_party=(4,), data__sample_scale=(1,),
)

fed = sim.run(cfg.replace(method="pfm"), record_trajectory=True)
cen = sim.run(cfg.replace(method="centralized"), record_trajectory=True)

print("round  |Theta_fed - Theta_cen|_inf  |M_fed - M_cen|_inf")
for r, ((T1, M1), (T2, M2)) in enumerate(zip(fed.trajectory, cen.trajectory), start=1):
    if r in (1, 2, 5, 10, 25, 50, 100):
        print(f"{r:5d}  {np.max(np.abs(T1 - T2)):26.3e}  {np.max(np.abs(M1 - M2)):19.3e}")
print(f"final smoothed loss: federated {fed.final_losses[0]:.5f}, "
      f"centralized {cen.final_losses[0]:.5f}")
