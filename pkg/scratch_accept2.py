"""Scratch: metadata ordering, cross-metadata, overlap-0, correlation."""
import sys
import time

import numpy as np

from neighborlab.harness import (
    ExperimentConfig,
    run_correlation_analysis,
    run_cross_metadata,
    run_vocab_overlap,
)
from neighborlab.optim import TrainConfig
from neighborlab.synthgen import SynthConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = f"/tmp/accept_seed{seed}"  # shares cache with scratch_accept.py

synth = SynthConfig(seed=seed)
cfg = ExperimentConfig(
    out_dir=out, synth=synth, fractions=(0.6, 0.2), split_seed=seed,
    train=TrainConfig(h=64, seed=seed), m=3, max_rank=6, samples_test=10,
)

t0 = time.perf_counter()
cross = run_cross_metadata(cfg)
t1 = time.perf_counter()
print(f"cross-metadata: {t1 - t0:.1f}s  visual_only mAP_L="
      f"{cross['visual_only']['mAP_L']['mean']:.2f}")
for tk in cross["kinds"]:
    cells = [f"{cross['cells'][f'{tk}->{ek}']['mAP_L']['mean']:6.2f}"
             for ek in cross["kinds"]]
    print(f"  train={tk:7s} -> " + " ".join(cells))

diag = {k: cross["cells"][f"{k}->{k}"]["mAP_L"]["mean"] for k in cross["kinds"]}
print(f"  ordering: tags={diag['tags']:.2f} groups={diag['groups']:.2f} "
      f"sets={diag['sets']:.2f} "
      f"{'OK' if diag['tags'] > diag['groups'] > diag['sets'] else 'VIOLATED'}")

t2 = time.perf_counter()
rows = run_vocab_overlap(cfg, overlaps=[0.0])
t3 = time.perf_counter()
print(f"overlap 0%: {t3 - t2:.1f}s mAP_L={rows[0]['mAP_L']:.2f} "
      f"(visual {cross['visual_only']['mAP_L']['mean']:.2f})")

t4 = time.perf_counter()
corr = run_correlation_analysis(cfg, k_max=20)
t5 = time.perf_counter()
for kind, res in corr.items():
    mean = res.mean_curve()
    base = np.mean(list(res.base_rates.values()))
    print(f"correlation {kind:7s}: curve[min..max]=({np.nanmin(mean):.3f}, "
          f"{np.nanmax(mean):.3f}) base={base:.3f} ratio_min={np.nanmin(mean)/base:.2f}")
print(f"correlation: {t5 - t4:.1f}s")
