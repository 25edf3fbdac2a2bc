"""Dynamic patching on a bursty series.

Quiet stretches become long patches and bursts are cut finely. The threshold
is then calibrated so that a corpus compresses 4x on average.

    python demos/01_patching.py
"""

import numpy as np

from timesqueeze.patcher import PatchConfig, calibrate_tau, compress, compression_ratio, detect_boundaries, unpatch
from timesqueeze.series_io import reference_corpus, standardize, synth

x, _, _ = standardize(synth("piecewise_bursty", 256, seed=3).values)

plan = detect_boundaries(x, PatchConfig(tau=0.3, power_window=16, max_patch=8))
print(f"{plan.T} steps -> {plan.num_patches} patches (ratio {compression_ratio(plan):.2f})")

# patch sizes follow the signal: short inside bursts, max_patch on plateaus
sizes = np.array(plan.sizes)
print("size histogram:", {int(s): int(c) for s, c in zip(*np.unique(sizes, return_counts=True))})

# compression keeps one row per patch, unpatching repeats it over the patch
H = np.arange(plan.T, dtype=float)[:, None]
Z = compress(H, plan)
back = unpatch(Z, plan)
assert np.array_equal(back[:, 0], np.repeat(plan.boundaries, plan.sizes))
print("every timestep now carries its patch's first index:", back[:12, 0].astype(int).tolist())

# a constant signal can only be split by the max_patch cap
flat = detect_boundaries(np.zeros(64), PatchConfig(max_patch=8))
print("constant length-64 signal:", flat.num_patches, "patches")

# tau=0.3 cuts this series finely; calibrate so a white-noise + bursty
# corpus averages 4x compression instead
corpus = reference_corpus()
tau = calibrate_tau(corpus, target_ratio=4.0)
ratios = [compression_ratio(detect_boundaries(c, PatchConfig(tau))) for c in corpus]
print(f"calibrated tau = {tau:.4f}, corpus mean ratio {np.mean(ratios):.3f}")
again = detect_boundaries(x, PatchConfig(tau))
print(f"same series at calibrated tau: {again.num_patches} patches (ratio {compression_ratio(again):.2f})")
