"""Full-resolution causal encoder and decoder built from gated linear recurrences.

Each layer maps ``u`` (``(..., T, D)``) to::

    v = u @ W_in
    a = sigmoid(decay + u @ W_g)          # per-step, per-channel forget gate
    h[t] = a[t] * h[t-1] + (1 - a[t]) * v[t]
    out = u + silu(h) @ W_out

This keeps the properties the hybrid model needs from an SSM (strict
causality, input-dependent gating, cost linear in ``T``) without a selective
scan kernel.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import ParamStore, ShapeError, Tensor


def _normal(rng, shape, scale):
    return rng.normal(0.0, scale, size=shape)


def init_ssm_layer(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W_in", _normal(rng, (d, d), 1.0 / np.sqrt(d)))
    store.add(f"{prefix}.W_g", _normal(rng, (d, d), 0.1 / np.sqrt(d)))
    store.add(f"{prefix}.W_out", _normal(rng, (d, d), 0.5 / np.sqrt(d)))
    # forget gates spread from short (a=0.5) to long (a=0.95) memory
    a0 = np.linspace(0.5, 0.95, d)
    store.add(f"{prefix}.decay", np.log(a0 / (1.0 - a0)))


def ssm_layer(store: ParamStore, prefix: str, u: Tensor) -> Tensor:
    v = u @ store[f"{prefix}.W_in"]
    a = tn.sigmoid(u @ store[f"{prefix}.W_g"] + store[f"{prefix}.decay"])
    h = tn.gated_scan(a, v)
    return u + tn.silu(h) @ store[f"{prefix}.W_out"]


def hidden_states(store: ParamStore, prefix: str, u) -> np.ndarray:
    """Recurrent state ``h`` of one layer (no output map), for inspection."""
    u = tn.as_tensor(u)
    v = u @ store[f"{prefix}.W_in"]
    a = tn.sigmoid(u @ store[f"{prefix}.W_g"] + store[f"{prefix}.decay"])
    return tn.gated_scan(a, v).data


def _check(x: Tensor, d: int, where: str) -> None:
    if x.shape[-1] != d:
        raise ShapeError(f"{where}: expected width {d}, got shape {x.shape}")


class SsmStack:
    """Ordered stack of gated recurrent layers under ``{prefix}.layer{i}``."""

    def __init__(self, prefix: str, d_model: int, layers: int = 2):
        self.prefix = prefix
        self.d_model = d_model
        self.layers = layers

    def layer_prefix(self, i: int) -> str:
        return f"{self.prefix}.layer{i}"

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        for i in range(self.layers):
            init_ssm_layer(store, self.layer_prefix(i), self.d_model, rng)

    def __call__(self, store: ParamStore, x) -> Tensor:
        x = tn.as_tensor(x)
        _check(x, self.d_model, self.prefix)
        for i in range(self.layers):
            x = ssm_layer(store, self.layer_prefix(i), x)
        if not np.isfinite(x.data).all():
            raise FloatingPointError(f"{self.prefix}: non-finite activations")
        return x


class Encoder(SsmStack):
    def __init__(self, d_model: int, layers: int = 2):
        super().__init__("encoder", d_model, layers)


class Decoder(SsmStack):
    """Fuses fine-grained encoder features ``H`` with upsampled backbone output ``U``.

    ``fusion="add"`` feeds ``H + U @ W_mix`` to the stack; ``"concat"`` feeds
    ``[H, U] @ W_mix`` with ``W_mix`` of shape ``(2D, D)``.  With
    ``residual=False`` the stack sees only ``U @ W_mix``.
    """

    def __init__(self, d_model: int, layers: int = 2, fusion: str = "add", residual: bool = True):
        if fusion not in ("add", "concat"):
            raise ValueError(f"unknown fusion {fusion!r}")
        super().__init__("decoder", d_model, layers)
        self.fusion = fusion
        self.residual = residual

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        d = self.d_model
        rows = 2 * d if self.fusion == "concat" and self.residual else d
        store.add("decoder.W_mix", _normal(rng, (rows, d), 1.0 / np.sqrt(rows)))
        super().init(store, rng)

    def fuse(self, store: ParamStore, H, U) -> Tensor:
        H, U = tn.as_tensor(H), tn.as_tensor(U)
        if H.shape != U.shape:
            raise ShapeError(f"decode: H shape {H.shape} != U shape {U.shape}")
        W = store["decoder.W_mix"]
        if not self.residual:
            return U @ W
        if self.fusion == "concat":
            return tn.concat([H, U], axis=-1) @ W
        return H + U @ W

    def __call__(self, store: ParamStore, H, U) -> Tensor:
        return super().__call__(store, self.fuse(store, H, U))


# ------------------------------------------------------- linear variants


def init_linear_tokenizer(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", _normal(rng, (1, d), 1.0))
    store.add(f"{prefix}.b", _normal(rng, (d,), 0.1))


def linear_tokenizer(store: ParamStore, prefix: str, X) -> Tensor:
    """Per-timestep affine map ``(..., T, 1) -> (..., T, D)``."""
    X = tn.as_tensor(X)
    if X.shape[-1] != 1:
        raise ShapeError(f"linear_tokenizer: expected trailing axis 1, got {X.shape}")
    return X @ store[f"{prefix}.W"] + store[f"{prefix}.b"]


class LinearDecoder(Decoder):
    """Decoder ablation: one affine map in place of the recurrent stack."""

    def __init__(self, d_model: int, fusion: str = "add", residual: bool = True):
        super().__init__(d_model, 0, fusion, residual)

    def init(self, store: ParamStore, rng: np.random.Generator) -> None:
        super().init(store, rng)
        d = self.d_model
        store.add("decoder.linear.W", _normal(rng, (d, d), 1.0 / np.sqrt(d)))
        store.add("decoder.linear.b", np.zeros(d))

    def __call__(self, store: ParamStore, H, U) -> Tensor:
        x = self.fuse(store, H, U)
        return x @ store["decoder.linear.W"] + store["decoder.linear.b"]
