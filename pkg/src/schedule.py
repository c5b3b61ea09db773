"""Continuous-time noise schedule, timestep sampling and the SDS weight w(t).

Marginal: q(x_t | x) = N(alpha(t) x, sigma(t)^2 I) with alpha^2 + sigma^2 = 1.
Convention: t -> 0 is clean data, t -> 1 is pure noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Union

import torch

from src.errors import ConfigError

TimeLike = Union[float, torch.Tensor]


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    LINEAR_VARIANCE = "linear-variance"


def _as_tensor(t: TimeLike) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t
    return torch.tensor(float(t), dtype=torch.float64)


def _like(value: torch.Tensor, t: TimeLike) -> TimeLike:
    return value if isinstance(t, torch.Tensor) else float(value)


# w(t) choices; each receives (alpha, sigma) tensors
WEIGHTINGS: dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    "sigma_squared": lambda a, s: s * s,
    "uniform": lambda a, s: torch.ones_like(s),
    "snr": lambda a, s: a * a,
}


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha/sigma/weight tables over continuous t in (0, 1]."""

    kind: ScheduleKind
    t_min: float
    t_max: float
    weighting: Union[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = "sigma_squared"

    def alpha(self, t: TimeLike) -> TimeLike:
        tt = _as_tensor(t)
        if self.kind is ScheduleKind.COSINE:
            out = torch.cos(tt * (math.pi / 2))
        else:
            out = torch.sqrt((1.0 - tt).clamp_min(0.0))
        return _like(out, t)

    def sigma(self, t: TimeLike) -> TimeLike:
        tt = _as_tensor(t)
        if self.kind is ScheduleKind.COSINE:
            out = torch.sin(tt * (math.pi / 2))
        else:
            out = torch.sqrt(tt.clamp_min(0.0))
        return _like(out, t)

    def weight(self, t: TimeLike) -> TimeLike:
        tt = _as_tensor(t)
        fn = WEIGHTINGS[self.weighting] if isinstance(self.weighting, str) else self.weighting
        out = fn(_as_tensor(self.alpha(tt)), _as_tensor(self.sigma(tt)))
        return _like(out.clamp_min(0.0), t)

    def describe(self) -> dict[str, object]:
        """Plain-data description stored in checkpoints."""
        weighting = self.weighting if isinstance(self.weighting, str) else "custom"
        return {
            "kind": self.kind.value,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "weighting": weighting,
        }


def make_schedule(
    kind: Union[str, ScheduleKind] = ScheduleKind.COSINE,
    t_min: float = 0.02,
    t_max: float = 0.98,
    weighting: Union[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = "sigma_squared",
) -> NoiseSchedule:
    """Build a validated schedule. Rejects ranges outside 0 < t_min < t_max <= 1."""
    try:
        kind = ScheduleKind(kind)
    except ValueError as e:
        valid = ", ".join(k.value for k in ScheduleKind)
        raise ConfigError(f"unknown schedule kind '{kind}' (expected one of: {valid})") from e
    if not t_min > 0.0:
        raise ConfigError(f"t_min must be > 0, got {t_min}")
    if t_max > 1.0:
        raise ConfigError(f"t_max must be <= 1, got {t_max}")
    if not t_min < t_max:
        raise ConfigError(f"t_min ({t_min}) must be below t_max ({t_max})")
    if isinstance(weighting, str) and weighting not in WEIGHTINGS:
        raise ConfigError(
            f"unknown weighting '{weighting}' (expected one of: {', '.join(WEIGHTINGS)})"
        )
    return NoiseSchedule(kind=kind, t_min=float(t_min), t_max=float(t_max), weighting=weighting)


def sample_timestep(rng: torch.Generator, schedule: NoiseSchedule) -> float:
    """Draw t ~ U[t_min, t_max] from *rng*."""
    u = torch.rand((), generator=rng, dtype=torch.float64).item()
    return schedule.t_min + (schedule.t_max - schedule.t_min) * u


def perturb(
    x: torch.Tensor, t: TimeLike, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Forward diffusion x_t = alpha(t) x + sigma(t) eps."""
    if x.shape != eps.shape:
        raise ValueError(f"x {tuple(x.shape)} and eps {tuple(eps.shape)} differ in shape")
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        # per-sample times broadcast over the trailing image axes
        view = (-1,) + (1,) * (x.dim() - 1)
        a = a.to(x.dtype).view(view)
        s = s.to(x.dtype).view(view)
    return a * x + s * eps
