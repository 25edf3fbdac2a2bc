"""Causal Transformer with top-K mixture-of-experts over compressed patch tokens.

Token tensors are ``(B, P, D)`` with ``positions`` (original timestep of each
token, ``(B, P)``) and a ``valid`` mask marking real tokens when windows with
different patch counts share a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 32
    experts: int = 4
    top_k: int = 2
    d_expert: int = 32
    rope_base: float = 10000.0
    renormalize: bool = True
    shared_gate: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head_dim must be even for rotary embeddings")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError(f"need 1 <= top_k <= experts, got K={self.top_k}, N={self.experts}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class RouterTrace:
    """Routing record over the real (non-padding) tokens.

    ``f[i]`` is the share of the ``K * n_tokens`` expert slots given to expert
    ``i``; ``r[i]`` the mean router probability of expert ``i``.  ``r`` stays a
    :class:`Tensor` so the auxiliary loss can differentiate through it.
    """

    selected: np.ndarray
    probs: np.ndarray
    f: np.ndarray
    r: Tensor

    @property
    def n_tokens(self) -> int:
        return self.selected.shape[0]


def rope_apply(x, position_ids, base: float = 10000.0):
    """Rotate ``(tokens, heads, head_dim)`` query/key vectors by position."""
    pos = np.asarray(position_ids)
    if isinstance(x, Tensor):
        return tn.rope(x, pos[:, None], base)
    return tn.rope(tn.Tensor(x), pos[:, None], base).data


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def aux_loss(trace: RouterTrace, n_experts: int | None = None):
    """Load-balancing penalty ``N * sum_i f_i r_i`` (1 under uniform routing)."""
    n = len(trace.f) if n_experts is None else n_experts
    r = trace.r
    if isinstance(r, Tensor):
        return tn.sum(r * trace.f) * float(n)
    return float(n * np.dot(trace.f, r))


def merge_traces(traces: list[RouterTrace]) -> RouterTrace:
    """Average ``f`` and ``r`` across layers; token records are stacked."""
    if len(traces) == 1:
        return traces[0]
    inv = 1.0 / len(traces)
    r = traces[0].r
    for t in traces[1:]:
        r = r + t.r
    return RouterTrace(
        selected=np.concatenate([t.selected for t in traces]),
        probs=np.concatenate([t.probs for t in traces]),
        f=np.mean([t.f for t in traces], axis=0),
        r=r * inv,
    )


def _normal(rng, shape, scale):
    return rng.normal(0.0, scale, size=shape)


class Backbone:
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        self.cfg = cfg

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        c = self.cfg
        d, de = c.d_model, c.d_expert
        s = 1.0 / np.sqrt(d)
        for i in range(c.layers):
            a = f"backbone.layer{i}.attn"
            store.add(f"{a}.norm", np.ones(d))
            for w in ("Wq", "Wk", "Wv"):
                store.add(f"{a}.{w}", _normal(rng, (d, d), s))
            store.add(f"{a}.Wo", _normal(rng, (d, d), s / np.sqrt(2 * c.layers)))
            m = f"backbone.layer{i}.moe"
            store.add(f"{m}.norm", np.ones(d))
            store.add(f"{m}.router", _normal(rng, (d, c.experts), s))
            for name in ["shared"] + [f"expert{j}" for j in range(c.experts)]:
                store.add(f"{m}.{name}.w1", _normal(rng, (d, de), s))
                store.add(f"{m}.{name}.w2", _normal(rng, (de, d), 1.0 / np.sqrt(de) / np.sqrt(2 * c.layers)))
            if c.shared_gate:
                store.add(f"{m}.shared_gate", np.zeros((d, 1)))
        store.add("backbone.norm", np.ones(d))

    # ------------------------------------------------------------ blocks

    def attention(self, store: ParamStore, i: int, Z: Tensor, positions: np.ndarray,
                  valid: np.ndarray) -> Tensor:
        c = self.cfg
        B, P, D = Z.shape
        a = f"backbone.layer{i}.attn"
        x = tn.rmsnorm(Z, store[f"{a}.norm"])

        def heads(t):
            return tn.transpose(tn.reshape(t, (B, P, c.heads, c.head_dim)), (0, 2, 1, 3))

        pos = positions[:, None, :]
        q = tn.rope(heads(x @ store[f"{a}.Wq"]), pos, c.rope_base)
        k = tn.rope(heads(x @ store[f"{a}.Wk"]), pos, c.rope_base)
        v = heads(x @ store[f"{a}.Wv"])
        scores = (q @ tn.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(c.head_dim))
        mask = np.tril(np.ones((P, P), dtype=bool))[None, None] & valid[:, None, None, :]
        w = tn.softmax(scores, axis=-1, mask=mask)
        out = tn.reshape(tn.transpose(w @ v, (0, 2, 1, 3)), (B, P, D))
        return Z + out @ store[f"{a}.Wo"]

    def attention_weights(self, store: ParamStore, i: int, Z, positions) -> np.ndarray:
        """Causal attention weights ``(heads, P, P)`` of one unbatched layer."""
        c = self.cfg
        Z = np.asarray(Z)[None]
        P = Z.shape[1]
        a = f"backbone.layer{i}.attn"
        x = tn.rmsnorm(tn.Tensor(Z), store[f"{a}.norm"]).data

        def heads(t):
            return t.reshape(1, P, c.heads, c.head_dim).transpose(0, 2, 1, 3)

        pos = np.asarray(positions)[None, None, :]
        q = tn.rope(tn.Tensor(heads(x @ store[f"{a}.Wq"].data)), pos, c.rope_base).data
        k = tn.rope(tn.Tensor(heads(x @ store[f"{a}.Wk"].data)), pos, c.rope_base).data
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(c.head_dim)
        mask = np.tril(np.ones((P, P), dtype=bool))[None, None]
        return tn.softmax(tn.Tensor(scores), mask=mask).data[0]

    def moe(self, store: ParamStore, i: int, Z: Tensor, valid: np.ndarray) -> tuple[Tensor, RouterTrace]:
        c = self.cfg
        B, P, D = Z.shape
        m = f"backbone.layer{i}.moe"
        x = tn.rmsnorm(Z, store[f"{m}.norm"])
        probs = tn.softmax(x @ store[f"{m}.router"], axis=-1)
        sel = top_k_mask(probs.data, c.top_k)
        gates = probs * sel
        if c.renormalize:
            gates = gates / tn.sum(gates, axis=-1, keepdims=True)

        experts = [f"{m}.expert{j}" for j in range(c.experts)]
        W1 = tn.concat([store[f"{e}.w1"] for e in experts], axis=1)
        W2 = tn.concat([store[f"{e}.w2"] for e in experts], axis=0)
        h = tn.reshape(tn.silu(x @ W1), (B, P, c.experts, c.d_expert))
        h = tn.reshape(h * tn.reshape(gates, (B, P, c.experts, 1)), (B, P, c.experts * c.d_expert))
        routed = h @ W2
        shared = tn.silu(x @ store[f"{m}.shared.w1"]) @ store[f"{m}.shared.w2"]
        if c.shared_gate:
            shared = shared * tn.sigmoid(x @ store[f"{m}.shared_gate"])

        n_valid = int(valid.sum())
        vmask = valid[..., None].astype(np.float64)
        r = tn.sum(probs * vmask, axis=(0, 1)) * (1.0 / n_valid)
        flat_sel = sel[valid]
        f = flat_sel.sum(axis=0) / (c.top_k * n_valid)
        selected = np.argsort(-probs.data[valid], axis=-1, kind="stable")[:, : c.top_k]
        trace = RouterTrace(selected=selected, probs=probs.data[valid], f=f, r=r)
        return Z + shared + routed, trace

    # ----------------------------------------------------------- forward

    def __call__(self, store: ParamStore, Z, positions, valid=None) -> tuple[Tensor, RouterTrace]:
        """Run all layers on ``(B, P, D)`` tokens (a ``(P, D)`` input is batched as B=1)."""
        Z = tn.as_tensor(Z)
        positions = np.asarray(positions)
        if Z.ndim == 2:
            Z = tn.reshape(Z, (1,) + Z.shape)
            positions = positions[None]
        B, P, D = Z.shape
        if D != self.cfg.d_model:
            raise ShapeError(f"backbone: expected width {self.cfg.d_model}, got {Z.shape}")
        if positions.shape != (B, P):
            raise ShapeError(f"backbone: positions shape {positions.shape} != {(B, P)}")
        valid = np.ones((B, P), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        traces = []
        for i in range(self.cfg.layers):
            Z = self.attention(store, i, Z, positions, valid)
            Z, trace = self.moe(store, i, Z, valid)
            traces.append(trace)
        return tn.rmsnorm(Z, store["backbone.norm"]), merge_traces(traces)
