"""Desk-scale ablation: dynamic patching against its switched-off variants.

Every variant is trained on the same bursty series with the same seed and
scored on a held-out series from a different seed.  The dynamic variants use a
threshold calibrated to a mean compression of 4x on the training contexts;
the fixed variant uses size-4 patches, which gives the same compression.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import BackboneConfig
from .forecaster import Forecaster, ModelConfig, evaluate
from .patcher import PatchConfig, calibrate_tau
from .series_io import WindowSpec, make_windows, synth
from .trainer import TrainConfig, train

VARIANTS: dict[str, dict] = {
    "dynamic": {},
    "fixed": {"patching": "fixed", "fixed_patch": 4},
    "nores": {"residual": False},
    "relative": {"positions": "relative"},
    "linear": {"encoder": "linear"},
}
DEFAULT_VARIANTS = ("dynamic", "fixed", "nores", "relative")


@dataclass(frozen=True)
class AblationConfig:
    context_length: int = 256
    horizon: int = 32
    train_length: int = 12000
    test_length: int = 6000
    train_stride: int = 8
    test_stride: int = 32
    target_ratio: float = 4.0
    d_model: int = 16
    steps: int = 2000
    batch_size: int = 16
    warmup_steps: int = 100
    test_seed_offset: int = 1000


@dataclass
class AblationResult:
    mse: dict[str, list[float]] = field(default_factory=dict)
    seconds: dict[str, list[float]] = field(default_factory=dict)
    tau: list[float] = field(default_factory=list)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.mse[variant]))

    def margin(self, variant: str, reference: str = "dynamic") -> float:
        """Mean MSE of ``variant`` minus the reference; positive favors the reference."""
        return self.mean(variant) - self.mean(reference)

    def to_dict(self) -> dict:
        out = {"tau": self.tau, "variants": {}}
        for v, vals in self.mse.items():
            out["variants"][v] = {"mse": vals, "mean_mse": self.mean(v), "seconds": self.seconds[v]}
        return out


def model_config(cfg: AblationConfig, tau: float, variant: str) -> ModelConfig:
    base = ModelConfig(
        d_model=cfg.d_model,
        backbone=BackboneConfig(d_model=cfg.d_model, d_expert=cfg.d_model),
        patch=PatchConfig(tau, 16, 8),
    )
    return replace(base, **VARIANTS[variant])


def run_seed(cfg: AblationConfig, seed: int, variants=DEFAULT_VARIANTS, result: AblationResult | None = None,
             progress=None) -> AblationResult:
    result = result if result is not None else AblationResult()
    spec = WindowSpec(cfg.context_length, cfg.horizon, cfg.train_stride)
    train_w = make_windows(synth("piecewise_bursty", cfg.train_length, seed), spec)
    test_w = make_windows(
        synth("piecewise_bursty", cfg.test_length, seed + cfg.test_seed_offset),
        WindowSpec(cfg.context_length, cfg.horizon, cfg.test_stride),
    )
    tau = calibrate_tau([w.context for w in train_w], cfg.target_ratio, PatchConfig(0.3, 16, 8))
    result.tau.append(tau)
    tcfg = TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, warmup_steps=cfg.warmup_steps, seed=seed)
    for name in variants:
        mcfg = model_config(cfg, tau, name)
        t0 = time.perf_counter()
        fit = train(train_w, mcfg, tcfg)
        mse = evaluate(Forecaster(mcfg), fit.store, test_w, [cfg.horizon])[str(cfg.horizon)]["mse"]
        result.mse.setdefault(name, []).append(mse)
        result.seconds.setdefault(name, []).append(time.perf_counter() - t0)
        if progress is not None:
            progress(seed, name, mse)
    return result


def run(cfg: AblationConfig = AblationConfig(), seeds=(0, 1, 2), variants=DEFAULT_VARIANTS,
        progress=None, workers: int = 1) -> AblationResult:
    """All variants for every seed; seeds may run on ``workers`` threads.

    Results are merged in seed order, so the output does not depend on the
    worker count.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    seeds = list(seeds)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: run_seed(cfg, s, variants, None, progress), seeds))
    else:
        parts = [run_seed(cfg, s, variants, None, progress) for s in seeds]
    result = AblationResult()
    for part in parts:
        result.tau += part.tau
        for name in variants:
            result.mse.setdefault(name, []).extend(part.mse[name])
            result.seconds.setdefault(name, []).extend(part.seconds[name])
    return result
