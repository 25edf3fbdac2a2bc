"""End-to-end hybrid forecaster: encode, patch, backbone, unpatch, decode, heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as tn
from .backbone import Backbone, BackboneConfig, RouterTrace, aux_loss
from .encoder_decoder import Decoder, Encoder, LinearDecoder, init_linear_tokenizer, linear_tokenizer
from .patcher import PatchConfig, PatchPlan, detect_boundaries
from .series_io import standardize
from .tensor import ParamStore, Tensor

DEFAULT_HORIZONS = (1, 8, 32, 64)


@dataclass(frozen=True)
class LossConfig:
    huber_delta: float = 1.0
    aux_weight: float = 0.02

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the ablation switches.

    ``patching``: ``"dynamic"`` (relative-deviation rule) or ``"fixed"``
    (every ``fixed_patch``-th step).  ``positions``: ``"absolute"`` feeds the
    boundary timesteps to the rotary embedding, ``"relative"`` uses token
    indices ``0..P-1``.  ``encoder``: ``"ssm"`` or ``"linear"``.
    """

    d_model: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    patch: PatchConfig = field(default_factory=PatchConfig)
    patching: str = "dynamic"
    fixed_patch: int = 4
    positions: str = "absolute"
    encoder: str = "ssm"
    residual: bool = True
    fusion: str = "add"

    def __post_init__(self):
        h = tuple(int(p) for p in self.horizons)
        if not h or any(p < 1 for p in h) or any(b <= a for a, b in zip(h, h[1:])):
            raise ValueError(f"horizons must be strictly increasing positive ints, got {h}")
        object.__setattr__(self, "horizons", h)
        if self.backbone.d_model != self.d_model:
            object.__setattr__(self, "backbone", replace(self.backbone, d_model=self.d_model))
        for name, allowed in (
            ("patching", ("dynamic", "fixed")),
            ("positions", ("absolute", "relative")),
            ("encoder", ("ssm", "linear")),
            ("fusion", ("add", "concat")),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.fixed_patch < 1:
            raise ValueError("fixed_patch must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("backbone"), dict):
            d["backbone"] = build_config(BackboneConfig, d["backbone"], "backbone")
        if isinstance(d.get("patch"), dict):
            d["patch"] = build_config(PatchConfig, d["patch"], "patch")
        if "horizons" in d:
            d["horizons"] = tuple(d["horizons"])
        return build_config(cls, d, "model")


def build_config(cls, d: dict, what: str):
    """Construct dataclass ``cls`` from ``d``, rejecting keys it does not define."""
    if not isinstance(d, dict):
        raise ValueError(f"{what} config must be an object, got {type(d).__name__}")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {what} config keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ForwardOutput:
    Y: Tensor
    predictions: list[Tensor]
    trace: RouterTrace
    plans: list[PatchPlan]
    backbone_tokens: int


def huber(e, delta: float = 1.0):
    """Huber penalty of a scalar error (elementwise over arrays)."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    e = np.asarray(e, dtype=np.float64)
    a = np.abs(e)
    c = np.minimum(a, delta)
    out = c * (a - 0.5 * c)
    return float(out) if out.ndim == 0 else out


def schedule_horizons(H: int, horizons) -> list[tuple[int, int]]:
    """Split an ``H``-step request into ``(head, emit_count)`` blocks.

    The smallest head covering what remains finishes the request (truncated);
    otherwise the largest head emits in full and the rest is scheduled again.
    """
    heads = sorted(int(p) for p in horizons)
    if not heads:
        raise ValueError("schedule_horizons: empty head set")
    if H < 1:
        raise ValueError("schedule_horizons: H must be >= 1")
    out, remaining = [], H
    while remaining > 0:
        cover = [p for p in heads if p >= remaining]
        if cover:
            out.append((cover[0], remaining))
            remaining = 0
        else:
            out.append((heads[-1], heads[-1]))
            remaining -= heads[-1]
    return out


class Forecaster:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        d = cfg.d_model
        self.encoder = Encoder(d, cfg.enc_layers) if cfg.encoder == "ssm" else None
        if cfg.encoder == "ssm":
            self.decoder = Decoder(d, cfg.dec_layers, cfg.fusion, cfg.residual)
        else:
            self.decoder = LinearDecoder(d, cfg.fusion, cfg.residual)
        self.backbone = Backbone(cfg.backbone)

    def init_params(self, seed: int = 0) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_linear_tokenizer(store, "embed", self.cfg.d_model, rng)
        if self.encoder is not None:
            self.encoder.init(store, rng)
        self.backbone.init(store, rng)
        self.decoder.init(store, rng)
        d = self.cfg.d_model
        for p in self.cfg.horizons:
            store.add(f"heads.h{p}.W", rng.normal(0.0, 1.0 / np.sqrt(d), (d, p)))
            store.add(f"heads.h{p}.b", np.zeros(p))
        return store

    def plan(self, context) -> PatchPlan:
        context = np.asarray(context, dtype=np.float64)
        if self.cfg.patching == "fixed":
            return PatchPlan.fixed(context.size, self.cfg.fixed_patch)
        return detect_boundaries(context, self.cfg.patch)

    def forward(self, store: ParamStore, contexts, plans: list[PatchPlan] | None = None) -> ForwardOutput:
        """Run the model on standardized contexts ``(B, T)`` (or one ``(T,)`` context).

        Predictions are ``(B, T, p)`` per head: row ``t`` is the ``p``-step
        forecast issued after observing steps ``0..t``.
        """
        X = np.asarray(contexts, dtype=np.float64)
        if X.ndim == 1:
            X = X[None]
        B, T = X.shape
        if T < 1:
            raise ValueError("forward: empty context")
        if plans is None:
            plans = [self.plan(x) for x in X]

        E = linear_tokenizer(store, "embed", X[..., None])
        H = self.encoder(store, E) if self.encoder is not None else E

        P = max(p.num_patches for p in plans)
        idx = np.zeros((B, P), dtype=np.int64)
        valid = np.zeros((B, P), dtype=bool)
        positions = np.zeros((B, P), dtype=np.int64)
        for b, plan in enumerate(plans):
            n = plan.num_patches
            idx[b, :n] = plan.boundaries
            valid[b, :n] = True
            positions[b, :n] = plan.position_ids if self.cfg.positions == "absolute" else np.arange(n)
        rows = np.arange(B)[:, None]
        Zin = H[rows, idx]
        Z, trace = self.backbone(store, Zin, positions, valid)

        patch_of = np.stack([plan.patch_index() for plan in plans])
        U = Z[rows, patch_of]
        Y = self.decoder(store, H, U)
        preds = [Y @ store[f"heads.h{p}.W"] + store[f"heads.h{p}.b"] for p in self.cfg.horizons]
        return ForwardOutput(Y, preds, trace, list(plans), P)

    # ------------------------------------------------------------ loss

    def loss(self, store: ParamStore, contexts, futures=None, loss_cfg: LossConfig = LossConfig(),
             plans=None) -> tuple[Tensor, ForwardOutput]:
        X = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
        out = self.forward(store, X, plans)
        seq = X if futures is None else np.concatenate([X, np.atleast_2d(futures)], axis=1)
        return composite_loss(out.predictions, seq, self.cfg.horizons, out.trace, loss_cfg, X.shape[1]), out

    # ------------------------------------------------------- inference

    def predict(self, store: ParamStore, context, H: int) -> np.ndarray:
        """``H``-step forecast in the units of ``context``.

        Each block standardizes the most recent ``len(context)`` values
        (history plus forecasts so far), runs the scheduled head at the last
        position, and maps its output back with that block's statistics.
        """
        history = list(np.asarray(context, dtype=np.float64))
        T = len(history)
        out = []
        for head, count in schedule_horizons(H, self.cfg.horizons):
            z, mu, scale = standardize(history[-T:])
            fwd = self.forward(store, z)
            j = self.cfg.horizons.index(head)
            block = fwd.predictions[j].data[0, -1, :count] * scale + mu
            out.extend(block)
            history.extend(block)
        return np.asarray(out)


def composite_loss(predictions, sequence, horizons, trace: RouterTrace | None,
                   cfg: LossConfig = LossConfig(), context_length: int | None = None) -> Tensor:
    """Mean over heads of the dense teacher-forced Huber loss, plus ``alpha * aux``.

    ``sequence`` is ``(B, S)`` of standardized values; predictions for head
    ``p`` are ``(B, T, p)`` with ``T = context_length``.  Position ``t`` is
    scored against ``sequence[:, t+1 : t+1+p]`` for every ``t < T`` with
    ``t + p < S``.
    """
    seq = np.atleast_2d(np.asarray(sequence, dtype=np.float64))
    S = seq.shape[1]
    T = S if context_length is None else context_length
    terms = []
    for pred, p in zip(predictions, horizons):
        n = min(T, S - p)
        if n < 1:
            raise ValueError(f"composite_loss: no valid issue positions for horizon {p} (S={S})")
        target = np.lib.stride_tricks.sliding_window_view(seq[:, 1:], p, axis=1)[:, :n]
        head = pred if n == pred.shape[1] else pred[:, :n, :]
        terms.append(tn.huber_mean(head, target, cfg.huber_delta))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    total = total * (1.0 / len(terms))
    if trace is not None and cfg.aux_weight > 0:
        total = total + aux_loss(trace) * cfg.aux_weight
    return total


def forecast_windows(model: Forecaster, store: ParamStore, windows, H: int, chunk: int = 64) -> np.ndarray:
    """``H``-step forecasts for standardized windows, in each window's standardized units.

    Single-block schedules run batched; longer requests fall back to the rolling
    :meth:`Forecaster.predict`.
    """
    schedule = schedule_horizons(H, model.cfg.horizons)
    contexts = np.stack([w.context for w in windows])
    if len(schedule) == 1:
        j = model.cfg.horizons.index(schedule[0][0])
        out = []
        for s in range(0, len(contexts), chunk):
            fwd = model.forward(store, contexts[s:s + chunk])
            out.append(fwd.predictions[j].data[:, -1, :H])
        return np.concatenate(out)
    return np.stack([model.predict(store, c, H) for c in contexts])


def evaluate(model: Forecaster, store: ParamStore, windows, horizons) -> dict:
    """MSE and MAE per horizon over windows whose targets cover that horizon."""
    metrics = {}
    for H in horizons:
        usable = [w for w in windows if len(w.target) >= H]
        if not usable:
            raise ValueError(f"no window has a target of length {H}")
        pred = forecast_windows(model, store, usable, H)
        truth = np.stack([w.target[:H] for w in usable])
        err = pred - truth
        metrics[str(H)] = {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err))),
                           "windows": len(usable)}
    return metrics
