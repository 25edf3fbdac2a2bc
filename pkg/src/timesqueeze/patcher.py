"""Relative-deviation dynamic patching, compression and causal unpatching.

A boundary is declared at step ``i`` when the jump from the previous sample
is large compared with the RMS of the preceding ``power_window`` samples::

    |x[i] - x[i-1]| > tau * sqrt(mean(x[i-L:i] ** 2))

Index 0 always opens a patch, and a patch is cut once it reaches
``max_patch`` samples.  Each patch is represented downstream by the embedding
of its first element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, take

DEFAULT_TAU = 0.3
DEFAULT_MAX_PATCH = 8
DEFAULT_POWER_WINDOW = 16


@dataclass(frozen=True)
class PatchConfig:
    tau: float = DEFAULT_TAU
    power_window: int = DEFAULT_POWER_WINDOW
    max_patch: int = DEFAULT_MAX_PATCH

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.power_window < 1:
            raise ValueError(f"power_window must be >= 1, got {self.power_window}")
        if self.max_patch < 1:
            raise ValueError(f"max_patch must be >= 1, got {self.max_patch}")


@dataclass(frozen=True)
class PatchPlan:
    """Boundaries (first index of each patch) over a length-``T`` sequence."""

    boundaries: tuple[int, ...]
    T: int
    sizes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        b = tuple(int(i) for i in self.boundaries)
        if not b or b[0] != 0:
            raise ValueError("plan must start with boundary 0")
        if any(j <= i for i, j in zip(b, b[1:])) or b[-1] >= self.T:
            raise ValueError(f"boundaries must be strictly increasing within [0, {self.T})")
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "sizes", tuple(np.diff(b + (self.T,)).tolist()))

    @property
    def position_ids(self) -> tuple[int, ...]:
        return self.boundaries

    @property
    def num_patches(self) -> int:
        return len(self.boundaries)

    def patch_index(self) -> np.ndarray:
        """Patch id of every timestep, shape ``(T,)``."""
        return np.repeat(np.arange(self.num_patches), self.sizes)

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "sizes": list(self.sizes),
            "ratio": compression_ratio(self),
        }

    @classmethod
    def fixed(cls, T: int, size: int) -> "PatchPlan":
        """Uniform plan keeping every ``size``-th element."""
        return cls(tuple(range(0, T, size)), T)


def local_power(x, i: int, L: int) -> float:
    """Mean of squares over ``x[i-L:i]``, shrinking to ``x[:i]`` while ``i < L``."""
    if i < 1:
        raise ValueError("local_power is undefined at i = 0")
    x = np.asarray(x, dtype=np.float64)
    w = x[max(0, i - L):i]
    return float(np.dot(w, w) / len(w))


def _check_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"expected a non-empty 1-D signal, got shape {x.shape}")
    if not np.isfinite(x).all():
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise ValueError(f"signal contains a non-finite value at index {bad}")
    return x


def rule_fires(x, tau: float, L: int) -> np.ndarray:
    """Boolean mask of rule-triggered boundaries (index 0 excluded, no forcing).

    All window sums are built together from ``L`` shifted vector adds.
    """
    x = _check_signal(x)
    T = x.size
    fires = np.zeros(T, dtype=bool)
    if T < 2:
        return fires
    i = np.arange(1, T)
    count = i - np.maximum(0, i - L)
    power = _window_sums(x * x, L) / count
    jump = np.abs(np.diff(x))
    fires[1:] = jump > tau * np.sqrt(power)
    return fires


def _window_sums(sq: np.ndarray, L: int) -> np.ndarray:
    """``sum(sq[max(0,i-L):i])`` for i = 1..T-1.

    Lag ``k`` contributes ``sq[i-1-k]``.  Unlike an add/subtract running sum
    this never cancels, so a loud sample leaving the window cannot leave
    residue behind in a quiet one.
    """
    T = sq.size
    out = np.zeros(T - 1)
    for k in range(min(L, T - 1)):
        out[k:] += sq[: T - 1 - k]
    return out


def detect_boundaries(x, cfg: PatchConfig = PatchConfig()) -> PatchPlan:
    """Patch plan of ``x`` under the relative-deviation rule plus forced splits."""
    x = _check_signal(x)
    fires = rule_fires(x, cfg.tau, cfg.power_window)
    bounds = [0]
    run = 1
    for i in range(1, x.size):
        if fires[i] or run >= cfg.max_patch:
            bounds.append(i)
            run = 1
        else:
            run += 1
    return PatchPlan(tuple(bounds), x.size)


def compression_ratio(plan: PatchPlan) -> float:
    return plan.T / plan.num_patches


def compress(H, plan: PatchPlan):
    """Keep the rows of ``H`` at the plan's boundaries."""
    rows = H.shape[0]
    if rows != plan.T:
        raise ShapeError(f"compress: H has {rows} rows, plan covers T={plan.T}")
    idx = np.asarray(plan.boundaries)
    if isinstance(H, Tensor):
        return take(H, idx)
    return np.asarray(H)[idx]


def unpatch(Z, plan: PatchPlan):
    """Repeat each patch row over the timesteps of its patch."""
    rows = Z.shape[0]
    if rows != plan.num_patches:
        raise ShapeError(f"unpatch: Z has {rows} rows, plan has P={plan.num_patches}")
    idx = plan.patch_index()
    if isinstance(Z, Tensor):
        return take(Z, idx)
    return np.asarray(Z)[idx]


class CalibrationError(ValueError):
    pass


def mean_ratio(corpus, cfg: PatchConfig) -> float:
    return float(np.mean([compression_ratio(detect_boundaries(x, cfg)) for x in corpus]))


def calibrate_tau(
    corpus,
    target_ratio: float = 4.0,
    cfg: PatchConfig = PatchConfig(),
    lo: float = 1e-4,
    hi: float = 10.0,
    rel_tol: float = 0.02,
    max_iter: int = 60,
) -> float:
    """Bisect ``tau`` until the corpus mean compression ratio is within ``rel_tol``.

    Larger ``tau`` fires fewer boundaries, so the mean ratio is non-decreasing
    in ``tau``; bisection is done in log space over ``[lo, hi]``.
    """
    corpus = [np.asarray(x, dtype=np.float64) for x in corpus]
    if not corpus:
        raise CalibrationError("calibrate_tau: empty corpus")
    if not 1.0 < target_ratio <= cfg.max_patch:
        raise CalibrationError(
            f"calibrate_tau: target {target_ratio} outside (1, max_patch={cfg.max_patch}]"
        )

    def ratio(tau):
        return mean_ratio(corpus, PatchConfig(tau, cfg.power_window, cfg.max_patch))

    r_lo, r_hi = ratio(lo), ratio(hi)
    for tau, r in ((lo, r_lo), (hi, r_hi)):
        if abs(r - target_ratio) <= rel_tol * target_ratio:
            return tau
    if not r_lo < target_ratio < r_hi:
        raise CalibrationError(
            f"calibrate_tau: target {target_ratio} unreachable; "
            f"tau={lo:g} gives {r_lo:.4f}, tau={hi:g} gives {r_hi:.4f}"
        )
    a, b = np.log(lo), np.log(hi)
    best_tau, best_err = lo, abs(r_lo - target_ratio)
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        tau = float(np.exp(mid))
        r = ratio(tau)
        err = abs(r - target_ratio)
        if err < best_err:
            best_tau, best_err = tau, err
        if err <= rel_tol * target_ratio:
            return tau
        if r < target_ratio:
            a = mid
        else:
            b = mid
    raise CalibrationError(
        f"calibrate_tau: no tau within {rel_tol:.0%} of {target_ratio} after {max_iter} steps; "
        f"closest tau={best_tau:.6g} off by {best_err:.4f}"
    )
