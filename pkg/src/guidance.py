"""Score distillation updates with view-dependent visual prompt routing.

The distillation gradient w(t) * (eps_hat - eps) * dx/dtheta is produced by a
stop-gradient surrogate: for a rendered image x and fixed residual r,

    L = 0.5 * || x - stopgrad(x - r) ||^2      so that   dL/dx = r.

The denoiser is never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import torch

from src.denoiser import DenoiserInterface, GuidanceConfig, PromptEmbedding, cfg_predict, vp_cfg_predict
from src.errors import NonFiniteError
from src.field3d import VoxelField
from src.renderer import CameraPose, render
from src.sampler import SectorBoundaries, ViewSector, VisualPromptBank, select_prompt
from src.schedule import NoiseSchedule, perturb, sample_timestep

VARIANTS = ("vp-sds", "sds")


@dataclass
class DistillationStep:
    """Diagnostics of one distillation step."""

    t: float
    eps: torch.Tensor = field(repr=False)
    camera: CameraPose
    selected_sector: ViewSector
    loss_proxy: float
    weight: float
    variant: str = "vp-sds"

    def to_record(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "camera": self.camera.as_dict(),
            "sector": self.selected_sector.value,
            "loss_proxy": self.loss_proxy,
            "weight": self.weight,
            "variant": self.variant,
        }


def _surrogate(
    image: torch.Tensor,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    camera: CameraPose,
    sector: ViewSector,
    variant: str,
    predict: Callable[[torch.Tensor, float], torch.Tensor],
) -> tuple[torch.Tensor, DistillationStep]:
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3,H,W) render, got {tuple(image.shape)}")
    t = sample_timestep(rng, schedule)
    eps = torch.randn(image.shape, generator=rng, dtype=image.dtype)
    x = image * 2.0 - 1.0
    with torch.no_grad():
        x_t = perturb(x.detach(), t, eps, schedule)
        eps_hat = predict(x_t, t)
        w = float(schedule.weight(t))
        residual = w * (eps_hat.to(x.dtype) - eps)
    if not torch.isfinite(residual).all():
        raise NonFiniteError(
            "distillation residual is not finite", t=t, camera=camera.as_dict()
        )
    loss = 0.5 * ((x - (x - residual).detach()) ** 2).sum()
    step = DistillationStep(
        t=t,
        eps=eps,
        camera=camera,
        selected_sector=sector,
        loss_proxy=float(loss.detach()),
        weight=w,
        variant=variant,
    )
    return loss, step


def sds_loss(
    image: torch.Tensor,
    camera: CameraPose,
    denoiser: DenoiserInterface,
    schedule: NoiseSchedule,
    z_y: PromptEmbedding,
    s: float,
    rng: torch.Generator,
    boundaries: Optional[SectorBoundaries] = None,
) -> tuple[torch.Tensor, DistillationStep]:
    """Text-only surrogate for a rendered [0, 1] image (3, H, W).

    Draws t and then eps from *rng*, in that order. *boundaries* only labels
    the step with its sector; the text prompt is the same for every view.
    """
    sector = (boundaries or SectorBoundaries()).sector(camera.azimuth)
    return _surrogate(
        image, schedule, rng, camera, sector, "sds",
        lambda x_t, t: cfg_predict(denoiser, x_t, t, z_y, s),
    )


def vp_sds_loss(
    image: torch.Tensor,
    camera: CameraPose,
    denoiser: DenoiserInterface,
    schedule: NoiseSchedule,
    z_y: PromptEmbedding,
    bank: VisualPromptBank,
    config: GuidanceConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, DistillationStep]:
    """Dual-prompt surrogate; the visual prompt follows the camera's sector."""
    sector = bank.boundaries.sector(camera.azimuth)
    _, z_v = select_prompt(bank, camera.azimuth)
    return _surrogate(
        image, schedule, rng, camera, sector, "vp-sds",
        lambda x_t, t: vp_cfg_predict(denoiser, x_t, t, z_y, z_v, config),
    )


def _field_grads(field: VoxelField, loss: torch.Tensor, step: DistillationStep) -> dict[str, torch.Tensor]:
    names, params = zip(*field.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }
    for name, g in out.items():
        if not torch.isfinite(g).all():
            raise NonFiniteError(
                f"gradient of {name} is not finite", t=step.t, camera=step.camera.as_dict()
            )
    return out


def sds_grad(
    field: VoxelField,
    camera: CameraPose,
    denoiser: DenoiserInterface,
    schedule: NoiseSchedule,
    z_y: PromptEmbedding,
    s: float,
    rng: torch.Generator,
    resolution: int = 64,
    n_samples: int = 64,
    background: Optional[torch.Tensor] = None,
    boundaries: Optional[SectorBoundaries] = None,
) -> tuple[dict[str, torch.Tensor], DistillationStep]:
    """Render at *camera* and return per-parameter SDS gradients."""
    out = render(field, camera, resolution, n_samples, background)
    loss, step = sds_loss(out.image, camera, denoiser, schedule, z_y, s, rng, boundaries)
    return _field_grads(field, loss, step), step


def vp_sds_grad(
    field: VoxelField,
    camera: CameraPose,
    denoiser: DenoiserInterface,
    schedule: NoiseSchedule,
    z_y: PromptEmbedding,
    bank: VisualPromptBank,
    config: GuidanceConfig,
    rng: torch.Generator,
    resolution: int = 64,
    n_samples: int = 64,
    background: Optional[torch.Tensor] = None,
) -> tuple[dict[str, torch.Tensor], DistillationStep]:
    """Render at *camera* and return per-parameter VP-SDS gradients."""
    out = render(field, camera, resolution, n_samples, background)
    loss, step = vp_sds_loss(out.image, camera, denoiser, schedule, z_y, bank, config, rng)
    return _field_grads(field, loss, step), step
