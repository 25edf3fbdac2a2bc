"""Train a small forecaster on a noisy sine and evaluate it.

    python demos/04_training.py [steps]
"""

import sys

import numpy as np

from timesqueeze.backbone import BackboneConfig
from timesqueeze.forecaster import Forecaster, ModelConfig, evaluate
from timesqueeze.series_io import WindowSpec, make_windows, synth
from timesqueeze.trainer import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
series = synth("sine_noise", 3000, seed=0)
train_w = make_windows(series.values[:2400], WindowSpec(64, 8, 4))
test_w = make_windows(series.values[2400:], WindowSpec(64, 8, 16))

cfg = ModelConfig(d_model=16, horizons=(1, 8),
                  backbone=BackboneConfig(d_model=16, heads=2, experts=4, top_k=2, d_expert=16))
result = train(train_w, cfg, TrainConfig(steps=steps, warmup_steps=steps // 10, seed=0))
print(f"loss {result.losses[0]:.4f} -> {np.mean(result.losses[-20:]):.4f} over {steps} steps")
print(f"expert usage entropy {result.entropy:.3f} (max {np.log(4):.3f})")

metrics = evaluate(Forecaster(cfg), result.store, test_w, [1, 8])
for h, m in metrics.items():
    print(f"horizon {h}: mse {m['mse']:.4f} mae {m['mae']:.4f} on {m['windows']} windows")

# zero forecast baseline in the same standardized units
zero = np.mean([np.mean(w.target ** 2) for w in test_w])
print(f"zero-forecast mse {zero:.4f}")
