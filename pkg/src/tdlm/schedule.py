"""Noise schedule over tree levels.

Continuous time t in [0, 1] is partitioned by thresholds 0 = t_0 < ... < t_H = 1
into one interval per tree level.  Within level h the retention weight alpha
decreases from 1 at t_h to 0 at t_{h+1}; a state at height h survives with
probability alpha and is otherwise absorbed into its height-(h+1) parent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


def thresholds(H: int) -> np.ndarray:
    """Uniformly spaced level thresholds t_h = h/H."""
    if H < 1:
        raise ScheduleError(f"degenerate schedule: H must be >= 1, got {H}")
    return np.arange(H + 1, dtype=np.float64) / H


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear in-level schedule with uniform thresholds.

    clip_cap bounds the training weight; denom_floor clamps the 1 - alpha
    denominator.  Raw (unclipped) weights are used for ELBO evaluation,
    clipped ones for training.
    """

    H: int
    family: str = "linear"
    clip_cap: float = 10.0
    denom_floor: float = 1e-4
    t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.family != "linear":
            raise ScheduleError(f"unsupported schedule family {self.family!r}")
        if self.clip_cap <= 0 or self.denom_floor <= 0:
            raise ScheduleError("clip_cap and denom_floor must be positive")
        object.__setattr__(self, "t", thresholds(self.H))

    def level_of(self, t):
        """Level index h with t in [t_h, t_{h+1}); t = 1 maps to H - 1."""
        t = np.asarray(t, dtype=np.float64)
        h = np.searchsorted(self.t, t, side="right") - 1
        h = np.clip(h, 0, self.H - 1)
        return h if h.ndim else int(h)

    def alpha(self, t):
        """Return (h, alpha, alpha') at time t (vectorized)."""
        t_arr = np.asarray(t, dtype=np.float64)
        h = np.searchsorted(self.t, t_arr, side="right") - 1
        h = np.clip(h, 0, self.H - 1)
        lo = self.t[h]
        hi = self.t[h + 1]
        width = hi - lo
        a = (hi - t_arr) / width
        da = -1.0 / width
        if t_arr.ndim:
            return h, a, np.broadcast_to(da, a.shape).copy()
        return int(h), float(a), float(da)

    def time_weight(self, t):
        """Return (w_raw, w_clipped) at time t (vectorized).

        w_raw = (t_{h+1} - t_h) * (-alpha') / max(1 - alpha, denom_floor),
        which reduces to 1 / max(1 - alpha, denom_floor) for the linear family.
        """
        _, a, da = self.alpha(t)
        h = self.level_of(t)
        width = self.t[np.asarray(h) + 1] - self.t[np.asarray(h)]
        denom = np.maximum(1.0 - a, self.denom_floor)
        w_raw = width * (-da) / denom
        w_clipped = np.minimum(w_raw, self.clip_cap)
        if np.asarray(t).ndim:
            return w_raw, w_clipped
        return float(w_raw), float(w_clipped)

    def level_width(self, h):
        h = np.asarray(h)
        return self.t[h + 1] - self.t[h]


@dataclass(frozen=True)
class LevelWeightConfig:
    """Per-level training weight schedule: none, linear, or exponential."""

    kind: str = "none"
    gamma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "linear", "exponential"):
            raise ScheduleError(f"unknown level-weight kind {self.kind!r}")
        if self.gamma < 0:
            raise ScheduleError("gamma must be nonnegative")


def height_weights(H: int, cfg: LevelWeightConfig) -> np.ndarray:
    """Mean-normalized per-level weights, increasing with height.

    Exponential: w(b) = exp(gamma * b).  Linear: w(b) = 1 + gamma * b / (H - 1)
    (H = 1 returns [1]).  The result is divided by its mean so that the overall
    loss scale is preserved.
    """
    if H < 1:
        raise ScheduleError("H must be >= 1")
    beta = np.arange(H, dtype=np.float64)
    if cfg.kind == "none":
        return np.ones(H)
    if cfg.kind == "exponential":
        w = np.exp(cfg.gamma * beta)
    else:
        if H == 1:
            return np.ones(1)
        w = 1.0 + cfg.gamma * beta / (H - 1)
    return w / w.mean()


def parse_level_weight(spec: str) -> LevelWeightConfig:
    """Parse 'none', 'linear:G', or 'exp:G' into a LevelWeightConfig."""
    if spec in ("none", ""):
        return LevelWeightConfig("none", 0.0)
    try:
        kind, gamma = spec.split(":")
        gamma = float(gamma)
    except ValueError:
        raise ScheduleError(f"bad level-weight spec {spec!r}; want kind:gamma")
    kind = {"lin": "linear", "linear": "linear", "exp": "exponential",
            "exponential": "exponential"}.get(kind)
    if kind is None:
        raise ScheduleError(f"bad level-weight kind in {spec!r}")
    return LevelWeightConfig(kind, gamma)
