"""Dynamic patching against fixed patches, no residual and relative positions.

The full protocol (3 seeds x 2000 steps) takes roughly 25 minutes on one core;
pass a smaller step count for a quick look.

    python demos/05_ablation.py [steps] [seeds]
"""

import sys

from timesqueeze.ablation import AblationConfig, run

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
seeds = [int(s) for s in sys.argv[2].split(",")] if len(sys.argv) > 2 else [0]


def show(seed, name, mse):
    print(f"  seed {seed} {name:<9} test mse {mse:.4f}", flush=True)


result = run(AblationConfig(steps=steps, warmup_steps=max(1, steps // 20)), seeds, progress=show)
print(f"calibrated tau per seed: {[round(t, 4) for t in result.tau]}")
for name in result.mse:
    extra = "" if name == "dynamic" else f"  (margin {result.margin(name):+.4f})"
    print(f"{name:<9} mean mse {result.mean(name):.4f}{extra}")
