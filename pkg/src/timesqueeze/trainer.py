"""AdamW training loop with linear warmup and cosine decay."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .forecaster import Forecaster, LossConfig, ModelConfig, build_config
from .series_io import StandardizedWindow
from .tensor import ParamStore, Tape

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 5e-5
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("need 0 <= warmup_steps < steps")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return build_config(cls, d, "train")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based ``step``.

    Warmup ramps ``lr_max * (step + 1) / warmup`` so the first step is not
    wasted; from ``step == warmup`` the rate follows a half cosine that lands
    on ``lr_min`` at the last step.
    """
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_max * (step + 1) / w
    span = cfg.steps - 1 - w
    if span == 0:
        return cfg.lr_max
    progress = (step - w) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to matrices only.

    One-dimensional parameters (norm gains, biases, decay logits) are not
    decayed.
    """

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.store.items():
            g = self.store.grad(name)
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if p.data.ndim >= 2:
                update = update + c.weight_decay * p.data
            p.data -= lr * update


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(store.grad(n), store.grad(n))) for n in store))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for n in store:
            store.grad(n)[...] *= scale
    return norm


def routing_entropy(f: np.ndarray) -> float:
    p = np.asarray(f, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class TrainResult:
    store: ParamStore
    losses: list[float]
    entropy: float


def _batch(windows: list[StandardizedWindow], idx) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([windows[i].context for i in idx]), np.stack([windows[i].target for i in idx]))


def train(
    windows: list[StandardizedWindow],
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    loss_cfg: LossConfig = LossConfig(),
    out_dir: str | Path | None = None,
    store: ParamStore | None = None,
) -> TrainResult:
    """Fit a forecaster on standardized windows.

    Batches are drawn without replacement per epoch from a generator seeded by
    ``train_cfg.seed``; parameters are initialized from the same seed unless a
    store is passed in.  With ``out_dir`` the loss curve, config and final
    checkpoint are written there (plus ``ckpt-<step>`` every
    ``checkpoint_every`` steps).
    """
    if len(windows) < train_cfg.batch_size:
        raise ValueError(f"need at least {train_cfg.batch_size} windows, got {len(windows)}")
    model = Forecaster(model_cfg)
    store = model.init_params(train_cfg.seed) if store is None else store
    opt = AdamW(store, train_cfg)
    rng = np.random.default_rng(train_cfg.seed + 1)
    out_dir = Path(out_dir) if out_dir is not None else None

    order = rng.permutation(len(windows))
    cursor = 0
    losses: list[float] = []
    f_sum = np.zeros(model_cfg.backbone.experts)
    for step in range(train_cfg.steps):
        if cursor + train_cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(windows)), 0
        idx = order[cursor:cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        X, F = _batch(windows, idx)

        store.zero_grad()
        with Tape() as tape:
            loss, out = model.loss(store, X, F, loss_cfg)
        value = loss.item()
        if not math.isfinite(value):
            norms = {n: float(np.linalg.norm(p.data)) for n, p in store.items()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1])[:3]
            raise NumericalError(f"non-finite loss at step {step}; largest parameter norms {worst}")
        store.backward(tape, loss)
        clip_grad_norm(store, train_cfg.grad_clip)
        opt.step(lr_at(step, train_cfg))
        losses.append(value)
        if step >= train_cfg.steps - 100:
            f_sum += out.trace.f
        if step % 100 == 0:
            log.debug("step %d loss %.6f", step, value)
        if out_dir is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            store.save(out_dir / f"ckpt-{step + 1}")

    entropy = routing_entropy(f_sum / f_sum.sum())
    if out_dir is not None:
        save_run(out_dir, store, model_cfg, train_cfg, loss_cfg, losses)
    return TrainResult(store, losses, entropy)


def save_run(out_dir, store, model_cfg, train_cfg, loss_cfg, losses) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.save(out_dir / "checkpoint")
    config = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "loss": asdict(loss_cfg)}
    (out_dir / "checkpoint" / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    with (out_dir / "loss_curve.csv").open("w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v!r}\n")


def load_checkpoint(directory) -> tuple[Forecaster, ParamStore]:
    """Model and parameters from a ``checkpoint`` directory written by :func:`train`."""
    directory = Path(directory)
    config = json.loads((directory / "config.json").read_text())
    model = Forecaster(ModelConfig.from_dict(config["model"]))
    return model, ParamStore.load(directory)
