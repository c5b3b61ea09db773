"""Differentiable reward losses: human-feedback alignment and visual consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Union, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.corpus import normalize_code
from src.errors import ConfigError, NonFiniteError
from src.renderer import CameraPose
from src.sampler import VisualPromptBank

PsiFn = Callable[[torch.Tensor], torch.Tensor]

# reward -> loss; every entry is non-increasing in the reward
PSI_MAPS: dict[str, PsiFn] = {
    "softplus": lambda r: F.softplus(-r),
    "negate": lambda r: -r,
}


@runtime_checkable
class RewardModel(Protocol):
    def score(
        self, image: torch.Tensor, text_code: str, alpha: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        ...


@runtime_checkable
class FeatureExtractor(Protocol):
    def features(self, image: torch.Tensor) -> torch.Tensor:
        ...


@dataclass(frozen=True)
class RewardConfig:
    psi: str = "softplus"
    target_viewpoint: CameraPose = field(default_factory=lambda: CameraPose(0.0, 0.0, 1.6))
    vc_every: int = 10

    def __post_init__(self) -> None:
        if self.psi not in PSI_MAPS:
            raise ConfigError(f"unknown psi map '{self.psi}' (expected one of: {', '.join(PSI_MAPS)})")
        if self.vc_every < 1:
            raise ConfigError(f"vc_every must be >= 1, got {self.vc_every}")

    @property
    def psi_fn(self) -> PsiFn:
        return PSI_MAPS[self.psi]


def front_camera(config: RewardConfig) -> CameraPose:
    """Viewpoint of the visual prompt, used for the forced consistency renders."""
    return config.target_viewpoint


class ToyRewardModel:
    """r = -|| mean object color - class prototype ||^2.

    The object region is *alpha* when given, otherwise a soft mask of the
    pixels that differ from the mean border color.
    """

    def __init__(
        self,
        class_colors: dict[str, tuple[float, float, float]],
        threshold: float = 0.05,
        temperature: float = 0.005,
    ) -> None:
        if not class_colors:
            raise ConfigError("toy reward model needs at least one class color")
        self.class_colors = {normalize_code(k): tuple(v) for k, v in class_colors.items()}
        self.threshold = threshold
        self.temperature = temperature

    def prototype(self, text_code: str, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        code = normalize_code(text_code)
        if code not in self.class_colors:
            raise ConfigError(
                f"unknown text code '{text_code}' (vocabulary: {', '.join(self.class_colors)})"
            )
        return torch.tensor(self.class_colors[code], dtype=dtype)

    def object_mask(self, image: torch.Tensor) -> torch.Tensor:
        border = torch.cat(
            [image[:, 0, :], image[:, -1, :], image[:, 1:-1, 0], image[:, 1:-1, -1]], dim=1
        )
        background = border.mean(dim=1)
        d2 = ((image - background[:, None, None]) ** 2).sum(dim=0)
        return torch.sigmoid((d2 - self.threshold) / self.temperature)

    def mean_color(self, image: torch.Tensor, alpha: Optional[torch.Tensor] = None) -> torch.Tensor:
        mask = self.object_mask(image) if alpha is None else alpha.to(image.dtype)
        return (image * mask).sum(dim=(1, 2)) / (mask.sum() + 1e-6)

    def score(
        self, image: torch.Tensor, text_code: str, alpha: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
        proto = self.prototype(text_code, image.dtype)
        return -((self.mean_color(image, alpha) - proto) ** 2).sum()


class ToyFeatureExtractor(nn.Module):
    """Frozen random convolutional pyramid.

    Inputs are resampled (bilinear) to ``size`` x ``size`` before extraction,
    so images of any resolution can be compared. The feature vector holds the
    mean activation of every level plus a 4x4 pooled map of the last one.
    """

    def __init__(self, seed: int = 0, size: int = 64, widths: tuple[int, ...] = (8, 16, 32)) -> None:
        super().__init__()
        self.size = size
        g = torch.Generator().manual_seed(seed)
        channels = (3,) + tuple(widths)
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            fan_in = c_in * 9
            self.register_buffer(
                f"weight{i}", torch.randn((c_out, c_in, 3, 3), generator=g) / math.sqrt(fan_in)
            )
        self.levels = len(widths)

    def features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
        h = image.unsqueeze(0)
        if tuple(h.shape[-2:]) != (self.size, self.size):
            h = F.interpolate(h, size=(self.size, self.size), mode="bilinear", align_corners=False)
        h = h * 2.0 - 1.0
        pooled = []
        for i in range(self.levels):
            weight = getattr(self, f"weight{i}").to(h.dtype)
            h = torch.tanh(F.conv2d(h, weight, stride=2, padding=1))
            pooled.append(h.mean(dim=(2, 3)).flatten())
        pooled.append(F.adaptive_avg_pool2d(h, 4).flatten())
        return torch.cat(pooled)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.features(image)


def _resolve_psi(psi: Union[str, PsiFn]) -> PsiFn:
    if callable(psi):
        return psi
    if psi not in PSI_MAPS:
        raise ConfigError(f"unknown psi map '{psi}' (expected one of: {', '.join(PSI_MAPS)})")
    return PSI_MAPS[psi]


def hf_reward_loss(
    image: torch.Tensor,
    text_code: str,
    reward_model: RewardModel,
    psi: Union[str, PsiFn] = "softplus",
    alpha: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (psi(r), r) for a [0, 1] image (3, H, W)."""
    r = reward_model.score(image, text_code, alpha)
    if not torch.isfinite(r):
        raise NonFiniteError("reward is not finite", text_code=text_code)
    return _resolve_psi(psi)(r), r


def feature_distance(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Squared L2 distance between the features of two images."""
    return ((extractor.features(a) - extractor.features(b)) ** 2).sum()


def vc_reward_loss(
    image: torch.Tensor, bank: VisualPromptBank, extractor: FeatureExtractor
) -> torch.Tensor:
    """Feature distance between *image* and the front visual prompt."""
    front = bank.front.image.to(image.dtype)
    loss = feature_distance(image, front, extractor)
    if not torch.isfinite(loss):
        raise NonFiniteError("consistency loss is not finite")
    return loss
