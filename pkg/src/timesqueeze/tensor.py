"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` of the
calling thread.  Outside a tape nothing is recorded, so inference costs only
the numpy forward pass.  Parameters live in a :class:`ParamStore`, which owns
both the values and their accumulated gradients.
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

RMS_EPS = 1e-6

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------- tape


class Tape:
    """Ordered record of primitive applications on the current thread.

    Use as a context manager; records are appended in execution order, which
    is already a topological order for the reverse sweep.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar; returns ``{id(leaf): grad}`` for leaves."""
        if loss.data.size != 1:
            raise ShapeError(f"gradients: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _finish(out_data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.records.append((out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _finish(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _finish(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold leading axes into one contraction
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _finish(ad @ bd, (a, b), backward)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get exactly 0."""
    x = as_tensor(x)
    if mask is None:
        out = x.data - np.max(x.data, axis=axis, keepdims=True)
    else:
        out = np.where(mask, x.data, -np.inf)
        out -= np.max(out, axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= np.sum(out, axis=axis, keepdims=True)

    def backward(g):
        gx = g * out
        gx -= out * np.sum(gx, axis=axis, keepdims=True)
        return (gx,)

    return _finish(out, (x,), backward)


def rmsnorm(x, gain, eps: float = RMS_EPS) -> Tensor:
    """Row-wise ``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} does not match rows of {x.shape}")
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def backward(g):
        gx = gg = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return gx, gg

    return _finish(xhat * gd, (x, gain), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _finish(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = 0.5 * (1.0 + np.tanh(0.5 * xd))
    return _finish(xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _finish(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def _leading_int_arrays(index, ndim: int) -> bool:
    return (isinstance(index, tuple) and 0 < len(index) <= ndim
            and all(isinstance(i, np.ndarray) and i.dtype.kind in "iu" for i in index))


def take(x, index) -> Tensor:
    """Basic or advanced indexing (``x[index]``); covers slicing and gathers."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: {err} for shape {x.shape}") from None
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        if _is_basic(index):
            full[index] = g  # a basic index never repeats an element
        elif _leading_int_arrays(index, len(shape)):
            # scatter-add over the flattened leading axes, one bincount per trailing column
            lead = shape[:len(index)]
            flat = np.ravel_multi_index(np.broadcast_arrays(*index), lead).ravel()
            rows = int(np.prod(lead))
            g2 = g.reshape(flat.size, -1)
            acc = full.reshape(rows, -1)
            for j in range(g2.shape[1]):
                acc[:, j] = np.bincount(flat, g2[:, j], rows)
        else:
            np.add.at(full, index, g)
        return (full,)

    return _finish(np.array(out, copy=True), (x,), backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inverse = np.argsort(axes)
    return _finish(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _finish(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def huber(e, delta: float) -> Tensor:
    """Elementwise Huber penalty: quadratic inside ``delta``, linear outside."""
    e = as_tensor(e)
    ed = e.data
    a = np.abs(ed)
    c = np.minimum(a, delta)
    return _finish(c * (a - 0.5 * c), (e,), lambda g: (g * np.clip(ed, -delta, delta),))


def huber_mean(pred, target: np.ndarray, delta: float) -> Tensor:
    """``mean(huber(pred - target))`` as one fused op; ``target`` is a constant."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"huber_mean: shapes {pred.shape} and {target.shape} differ")
    err = pred.data - target
    a = np.abs(err)
    c = np.minimum(a, delta)
    scale = 1.0 / err.size
    value = np.sum(c * (a - 0.5 * c)) * scale
    return _finish(np.asarray(value), (pred,),
                   lambda g: (np.clip(err, -delta, delta) * (g * scale),))


def rope(x, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary embedding over the last axis of ``(..., tokens, head_dim)``.

    ``positions`` broadcasts against ``x.shape[:-1]``.  Pairs ``(2j, 2j+1)``
    rotate by ``pos * base**(-2j/head_dim)``.
    """
    x = as_tensor(x)
    hd = x.shape[-1]
    if hd % 2:
        raise ShapeError(f"rope: head_dim must be even, got {hd}")
    freqs = base ** (-np.arange(0, hd, 2, dtype=np.float64) / hd)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    cos, sin = np.cos(ang), np.sin(ang)

    def rotate(v, s):
        ev, od = v[..., 0::2], v[..., 1::2]
        out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (hd,)))
        out[..., 0::2] = ev * cos - s * od * sin
        out[..., 1::2] = ev * s * sin + od * cos
        return out

    return _finish(rotate(x.data, 1.0), (x,), lambda g: (_unbroadcast(rotate(g, -1.0), x.shape),))


def gated_scan(a, v) -> Tensor:
    """Convex-combination recurrence along axis -2.

    ``h[t] = a[t] * h[t-1] + (1 - a[t]) * v[t]`` with ``h[-1] = 0``; inputs are
    ``(..., T, D)``.
    """
    a, v = as_tensor(a), as_tensor(v)
    if a.shape != v.shape:
        raise ShapeError(f"gated_scan: shapes {a.shape} and {v.shape} differ")
    ad, vd = a.data, v.data
    T = ad.shape[-2]
    # time-major copies keep each step's slice contiguous
    at = np.ascontiguousarray(np.moveaxis(ad, -2, 0))
    ht = np.moveaxis((1.0 - ad) * vd, -2, 0).copy()
    for t in range(1, T):
        ht[t] += at[t] * ht[t - 1]
    h = np.moveaxis(ht, 0, -2)

    def backward(g):
        gs = np.moveaxis(g, -2, 0).copy()
        for t in range(T - 1, 0, -1):
            gs[t - 1] += at[t] * gs[t]
        gs = np.moveaxis(gs, 0, -2)
        prev = np.zeros_like(h)
        prev[..., 1:, :] = h[..., :-1, :]
        return gs * (prev - vd), gs * (1.0 - ad)

    return _finish(h, (a, v), backward)


# -------------------------------------------------------------- param store


class ParamStore:
    """Named parameters with matching gradient buffers, in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self._grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def accumulate(self, grads: dict[int, np.ndarray]) -> None:
        """Merge tape gradients in fixed parameter order."""
        for name, p in self._params.items():
            g = grads.get(id(p))
            if g is not None:
                self._grads[name] += g

    def backward(self, tape: Tape, loss: Tensor) -> None:
        self.accumulate(tape.gradients(loss))

    def size(self) -> int:
        return int(np.sum([p.data.size for p in self._params.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            out.add(name, p.data.copy())
        return out

    def manifest(self) -> list[dict]:
        return [{"name": n, "shape": list(p.shape)} for n, p in self._params.items()]

    def save(self, directory: str | Path) -> None:
        """Write ``params.bin`` (little-endian float64) and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        flat = np.concatenate([p.data.ravel() for p in self._params.values()])
        flat.astype("<f8").tofile(directory / "params.bin")
        (directory / "manifest.json").write_text(json.dumps({"params": self.manifest()}, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "ParamStore":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())["params"]
        flat = np.fromfile(directory / "params.bin", dtype="<f8")
        store, offset = cls(), 0
        for entry in manifest:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            store.add(entry["name"], flat[offset:offset + n].reshape(entry["shape"]))
            offset += n
        if offset != flat.size:
            raise ValueError(f"checkpoint holds {flat.size} values, manifest expects {offset}")
        return store


# ------------------------------------------------------------ grad checking


def grad_check(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    step: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    Samples ``n_coords`` coordinates (all of them if fewer exist) uniformly over
    the selected parameters.  Error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(store.names() if names is None else names)

    with Tape() as tape:
        loss = f(store)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: loss is not finite")
    grads = tape.gradients(loss)

    coords = [(n, i) for n in names for i in range(store[n].data.size)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, i in coords:
        p = store[name]
        flat = p.data.reshape(-1)
        g = grads.get(id(p))
        analytic = 0.0 if g is None else float(g.reshape(-1)[i])
        orig = flat[i]
        flat[i] = orig + step
        up = f(store).item()
        flat[i] = orig - step
        down = f(store).item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteError(f"grad_check: non-finite loss perturbing {name}[{i}]")
        numeric = (up - down) / (2 * step)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
