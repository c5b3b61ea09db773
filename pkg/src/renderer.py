"""Differentiable emission-absorption rendering of a :class:`VoxelField`.

Camera convention: y is up, azimuth 0 looks at the object from +z (the front
view) and azimuth grows towards +x; every camera looks at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import torch
import yaml

from src.errors import ConfigError
from src.field3d import SCENE_HALF_EXTENT, VoxelField
from src.utils import atomic_write, save_png

TURNTABLE_MANIFEST = "turntable.yaml"


@dataclass(frozen=True)
class CameraPose:
    azimuth: float
    elevation: float = 0.0
    radius: float = 1.6
    fov: float = 40.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        if not -30.0 <= self.elevation <= 60.0:
            raise ValueError(f"elevation must lie in [-30, 60] degrees, got {self.elevation}")
        if self.radius <= 0:
            raise ValueError(f"camera radius must be > 0, got {self.radius}")
        if not 0.0 < self.fov < 180.0:
            raise ValueError(f"fov must lie in (0, 180) degrees, got {self.fov}")

    def position(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        return torch.tensor(
            [
                self.radius * math.cos(el) * math.sin(az),
                self.radius * math.sin(el),
                self.radius * math.cos(el) * math.cos(az),
            ],
            dtype=dtype,
        )

    def as_dict(self) -> dict[str, float]:
        return {
            "azimuth": self.azimuth,
            "elevation": self.elevation,
            "radius": self.radius,
            "fov": self.fov,
        }


@dataclass(frozen=True)
class CameraRanges:
    """Sampling ranges for training cameras around a scene cube of *half_extent*."""

    elevation: tuple[float, float] = (-10.0, 45.0)
    radius: tuple[float, float] = (1.5, 1.8)
    fov: float = 40.0
    half_extent: float = SCENE_HALF_EXTENT

    def __post_init__(self) -> None:
        lo, hi = self.elevation
        if not -30.0 <= lo <= hi <= 60.0:
            raise ConfigError(f"elevation range must lie within [-30, 60]: {self.elevation}")
        if not 0.0 < self.radius[0] <= self.radius[1]:
            raise ConfigError(f"radius range must be positive and ordered: {self.radius}")
        # every camera must see the whole cube from outside
        if self.radius[0] <= self.half_extent * math.sqrt(3.0):
            raise ConfigError(
                f"radius range {self.radius} must stay outside the scene cube "
                f"(minimum radius > {self.half_extent * math.sqrt(3.0):.4f})"
            )


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    weights: torch.Tensor = field(repr=False)  # (H, W, S)
    background_weight: torch.Tensor = field(repr=False)  # (H, W)

    @property
    def image(self) -> torch.Tensor:
        """rgb as (3, H, W)."""
        return self.rgb.permute(2, 0, 1)


def sample_camera(rng: torch.Generator, ranges: Optional[CameraRanges] = None) -> CameraPose:
    """Uniform azimuth in [0, 360); uniform elevation and radius in *ranges*."""
    ranges = ranges or CameraRanges()
    u = torch.rand(3, generator=rng, dtype=torch.float64).tolist()
    el_lo, el_hi = ranges.elevation
    r_lo, r_hi = ranges.radius
    return CameraPose(
        azimuth=360.0 * u[0],
        elevation=el_lo + (el_hi - el_lo) * u[1],
        radius=r_lo + (r_hi - r_lo) * u[2],
        fov=ranges.fov,
    )


def camera_rays(
    camera: CameraPose, height: int, width: int, dtype: torch.dtype = torch.float32
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel ray origins and unit directions, each (H, W, 3)."""
    origin = camera.position(dtype)
    forward = -origin / origin.norm()
    world_up = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    right = torch.linalg.cross(forward, world_up)
    right = right / right.norm()
    up = torch.linalg.cross(right, forward)

    tan_half = math.tan(math.radians(camera.fov) / 2.0)
    cols = ((torch.arange(width, dtype=dtype) + 0.5) / width * 2.0 - 1.0) * tan_half * (width / height)
    rows = (1.0 - (torch.arange(height, dtype=dtype) + 0.5) / height * 2.0) * tan_half
    v, u = torch.meshgrid(rows, cols, indexing="ij")
    dirs = forward + u[..., None] * right + v[..., None] * up
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    return origin.expand(height, width, 3), dirs


def ray_box(
    origins: torch.Tensor, dirs: torch.Tensor, half_extent: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form slab test. Returns (near, length); length is 0 on a miss."""
    tiny = torch.full_like(dirs, 1e-12)
    safe = torch.where(dirs.abs() < 1e-12, torch.copysign(tiny, dirs), dirs)
    inv = 1.0 / safe
    t0 = (-half_extent - origins) * inv
    t1 = (half_extent - origins) * inv
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp_min(0.0)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    length = (t_far - t_near).clamp_min(0.0)
    return t_near, length


def _as_resolution(resolution: Union[int, Sequence[int]]) -> tuple[int, int]:
    if isinstance(resolution, int):
        return resolution, resolution
    h, w = resolution
    return int(h), int(w)


def render(
    field: VoxelField,
    camera: CameraPose,
    resolution: Union[int, Sequence[int]] = 64,
    n_samples: int = 64,
    background: Optional[torch.Tensor] = None,
    jitter_rng: Optional[torch.Generator] = None,
) -> RenderOutput:
    """Composite the field along one ray per pixel.

    Samples sit at the midpoints of *n_samples* equal segments of each ray's
    in-box span (jittered within their segment when *jitter_rng* is given).
    Per-sample opacity is 1 - exp(-density * delta); the remainder of the
    transmittance goes to *background* (white when None).
    """
    if n_samples < 2:
        raise ConfigError(f"n_samples must be >= 2, got {n_samples}")
    if camera.radius <= field.half_extent * math.sqrt(3.0):
        raise ValueError(
            f"camera radius {camera.radius} lies inside the scene bounds "
            f"(half extent {field.half_extent})"
        )
    dtype = field.density_logits.dtype
    height, width = _as_resolution(resolution)
    origins, dirs = camera_rays(camera, height, width, dtype)
    near, length = ray_box(origins, dirs, field.half_extent)

    offsets = torch.arange(n_samples, dtype=dtype)
    if jitter_rng is not None:
        frac = (offsets + torch.rand((height, width, n_samples), generator=jitter_rng, dtype=dtype)) / n_samples
    else:
        frac = ((offsets + 0.5) / n_samples).expand(height, width, n_samples)
    depths = near[..., None] + length[..., None] * frac
    points = origins[..., None, :] + dirs[..., None, :] * depths[..., None]
    delta = (length / n_samples)[..., None].expand(height, width, n_samples)

    density, color = field.query(points)
    tau = density * delta
    cum = torch.cumsum(tau, dim=-1)
    transmittance = torch.exp(-(cum - tau))
    weights = transmittance * (1.0 - torch.exp(-tau))
    background_weight = torch.exp(-cum[..., -1])
    alpha = weights.sum(dim=-1).clamp(0.0, 1.0)

    if background is None:
        background = torch.ones(3, dtype=dtype)
    rgb = (weights[..., None] * color).sum(dim=-2) + background_weight[..., None] * background.to(dtype)
    return RenderOutput(rgb=rgb, alpha=alpha, weights=weights, background_weight=background_weight)


def turntable_cameras(
    n_views: int, elevation: float = 15.0, radius: float = 1.6, fov: float = 40.0
) -> list[CameraPose]:
    if n_views < 1:
        raise ConfigError(f"n_views must be >= 1, got {n_views}")
    return [CameraPose(360.0 * i / n_views, elevation, radius, fov) for i in range(n_views)]


@torch.no_grad()
def render_turntable(
    field: VoxelField,
    n_views: int,
    resolution: Union[int, Sequence[int]] = 64,
    elevation: float = 15.0,
    radius: float = 1.6,
    n_samples: int = 64,
) -> list[RenderOutput]:
    """Evenly spaced azimuths starting at the front view, fixed elevation."""
    return [
        render(field, cam, resolution, n_samples)
        for cam in turntable_cameras(n_views, elevation, radius)
    ]


def export_turntable(
    frames: Sequence[RenderOutput],
    directory: Union[str, Path],
    elevation: float = 15.0,
    radius: float = 1.6,
) -> Path:
    """Write numbered PNG frames and a YAML manifest listing their cameras."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cameras = turntable_cameras(len(frames), elevation, radius)
    entries = []
    for i, (frame, cam) in enumerate(zip(frames, cameras)):
        name = f"frame_{i:03d}.png"
        save_png(frame.rgb, directory / name)
        entries.append({"file": name, **cam.as_dict()})
    manifest = {"n_views": len(frames), "frames": entries}
    path = directory / TURNTABLE_MANIFEST
    atomic_write(path, lambda tmp: tmp.write_text(yaml.safe_dump(manifest, sort_keys=False)))
    return path
