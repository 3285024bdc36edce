"""Two seeds of the coarse ablation grid at reduced size.

Run ``rise ablate`` or the acceptance suite for the full multi-seed version.
"""

from rise.experiments import run_arms, summarize, table_text
from rise.trainer import TrainConfig, coarse_arms

config = TrainConfig(lr=5e-5, batch_size=48, epochs=4, grid=(4, 4))
records = run_arms(config, coarse_arms(), seeds=[0, 1], bench_kwargs={"n_per_domain": 800},
                   log=lambda r: print(f"{r.arm:<10} seed {r.seed}  HTER {r.hter:.3f}", flush=True))
print(table_text(summarize(records)))
