"""Scratch: measure acceptance-scale behavior for one master seed."""
import sys
import time

import numpy as np

from neighborlab.corpus import MetadataKind, make_splits
from neighborlab.harness import ExperimentConfig, run_annotation_experiment
from neighborlab.optim import TrainConfig
from neighborlab.synthgen import SynthConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = f"/tmp/accept_seed{seed}"

synth = SynthConfig(seed=seed)  # defaults: N=6000 K=12 L=24 d=64 rho=0.3
cfg = ExperimentConfig(
    out_dir=out,
    synth=synth,
    fractions=(0.6, 0.2),
    split_seed=seed,
    train=TrainConfig(h=64, seed=seed),  # lr 1e-4, l2 3e-3, batch 50, epochs 10
    m=3,
    max_rank=6,
    samples_test=10,
    upper_bound_lr=1e-2,
    upper_bound_epochs=30,
)

t0 = time.perf_counter()
bundle = run_annotation_experiment(cfg)
elapsed = time.perf_counter() - t0

print(f"\nseed={seed} elapsed={elapsed:.1f}s")
for name, reports in bundle.rows.items():
    mv = reports[0].metric_values()
    print(f"  {name:22s} mAP_L={mv['mAP_L']:6.2f} mAP_I={mv['mAP_I']:6.2f} "
          f"Prec_I={mv['Prec_I']:6.2f} Rec_I={mv['Rec_I']:6.2f}")
gap = (bundle.rows["neighbor_model"][0].metric_values()["mAP_L"]
       - bundle.rows["visual_only"][0].metric_values()["mAP_L"])
print(f"  neighborhood gain (mAP_L): {gap:+.2f}")
