"""Noise schedules: the beta_t sequence and every coefficient derived from it.

Implementation notes:
    * All schedule math is float64 numpy, stored in read-only arrays, so the
      golden tests on schedule values are exact even though the networks
      train in float32.
    * Timesteps are 1-based in every public accessor (``t`` runs 1..T).
      ``alpha_bar(0)`` is defined as 1, which makes the t = 1 posterior
      degenerate (zero variance).
    * The stored arrays are 0-based: ``betas[t - 1]`` is beta_t.
    * Only ``kind``, ``t_max`` and ``betas`` are needed to rebuild a schedule;
      checkpoints store exactly those and call ``NoiseSchedule.from_betas``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import ValidationError

SCHEDULE_KINDS = ("cosine", "linear")


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable beta_t schedule with its derived per-timestep coefficients."""

    kind: str
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    posterior_variances: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"schedule kind must be one of {SCHEDULE_KINDS}; got {self.kind!r}")
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValidationError("betas must be a nonempty 1-D sequence")
        if not np.all(np.isfinite(betas)):
            raise ValidationError("betas contain non-finite values")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValidationError("every beta_t must lie in the open interval (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate(([1.0], alpha_bars[:-1]))
        posterior = betas * (1.0 - prev) / (1.0 - alpha_bars)
        for name, arr in (("alpha_bars", alpha_bars), ("posterior_variances", posterior)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"schedule produced non-finite {name}")
        if np.any(np.diff(alpha_bars) >= 0.0) or not (0.0 < alpha_bars[-1] < 1.0):
            raise ValidationError("alpha_bars must be strictly decreasing and end inside (0, 1)")
        object.__setattr__(self, "betas", _frozen(betas))
        object.__setattr__(self, "alphas", _frozen(alphas))
        object.__setattr__(self, "alpha_bars", _frozen(alpha_bars))
        object.__setattr__(self, "posterior_variances", _frozen(posterior))

    @classmethod
    def from_betas(cls, kind: str, betas: np.ndarray) -> "NoiseSchedule":
        """Rebuild a schedule from its stored betas (derived arrays are recomputed)."""
        return cls(kind=kind, betas=np.asarray(betas, dtype=np.float64))

    @property
    def t_max(self) -> int:
        """Total number of diffusion steps T."""
        return int(self.betas.size)

    def check_t(self, t: int, lowest: int = 1) -> int:
        """Return ``t`` as an int, raising ValidationError unless lowest <= t <= T."""
        t = int(t)
        if t < lowest or t > self.t_max:
            raise ValidationError(f"timestep must be in [{lowest}, {self.t_max}]; got {t}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Return alpha_bar_t, with alpha_bar_0 = 1."""
        t = self.check_t(t, lowest=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        return float(self.posterior_variances[self.check_t(t) - 1])

    @property
    def alpha_bars_from_zero(self) -> np.ndarray:
        """alpha_bar_0..alpha_bar_T (length T + 1), indexable directly by t."""
        return np.concatenate(([1.0], self.alpha_bars))

    def ddim_timesteps(self, steps: int) -> List[int]:
        """Return an evenly strided, strictly decreasing subsequence of 1..T.

        The subsequence always starts at T and ends at 1. ``steps == T``
        returns every timestep.
        """
        steps = int(steps)
        if steps < 2 or steps > self.t_max:
            raise ValidationError(f"ddim steps must be in [2, {self.t_max}]; got {steps}")
        ts = np.rint(np.linspace(self.t_max, 1, steps)).astype(np.int64)
        if np.any(np.diff(ts) >= 0):
            raise ValidationError(f"{steps} steps do not form a strictly decreasing subsequence of 1..{self.t_max}")
        return [int(t) for t in ts]


def make_cosine_schedule(t_max: int, offset: float = 0.008, beta_cap: float = 0.999) -> NoiseSchedule:
    """Squared-cosine schedule: alpha_bar(t) = f(t)/f(0), f(t) = cos^2(((t/T)+s)/(1+s) * pi/2).

    beta_t = 1 - alpha_bar(t)/alpha_bar(t-1), clipped to at most ``beta_cap``.
    """
    t_max = int(t_max)
    if t_max < 2:
        raise ValidationError(f"cosine schedule needs t_max >= 2; got {t_max}")
    if not offset > 0.0:
        raise ValidationError(f"cosine offset must be positive; got {offset}")
    if not 0.0 < beta_cap < 1.0:
        raise ValidationError(f"beta_cap must be in (0, 1); got {beta_cap}")

    def f(t: int) -> float:
        return math.cos(((t / t_max) + offset) / (1.0 + offset) * math.pi / 2.0) ** 2

    f0 = f(0)
    bars = [f(t) / f0 for t in range(t_max + 1)]
    betas = np.array([min(1.0 - bars[t] / bars[t - 1], beta_cap) for t in range(1, t_max + 1)], dtype=np.float64)
    if not np.all(np.isfinite(betas)):
        raise ValidationError("cosine schedule produced non-finite betas")
    return NoiseSchedule(kind="cosine", betas=betas)


def make_linear_schedule(t_max: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly interpolated from ``beta_start`` to ``beta_end`` over T steps."""
    t_max = int(t_max)
    if t_max < 1:
        raise ValidationError(f"linear schedule needs t_max >= 1; got {t_max}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1; got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    return NoiseSchedule(kind="linear", betas=betas)


@dataclass(frozen=True)
class ScheduleConfig:
    """The ``[model]`` keys that pick and parameterize the noise schedule."""

    kind: str = "cosine"
    t_max: int = 100
    cosine_offset: float = 0.008
    beta_cap: float = 0.999
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"schedule kind must be one of {SCHEDULE_KINDS}; got {self.kind!r}")

    def build(self) -> NoiseSchedule:
        if self.kind == "cosine":
            return make_cosine_schedule(self.t_max, self.cosine_offset, self.beta_cap)
        return make_linear_schedule(self.t_max, self.beta_start, self.beta_end)
