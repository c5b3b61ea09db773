"""Learnable voxel radiance field, coarse-to-fine transfer and mesh export.

The field stores pre-activation values on the (N+1)^3 lattice nodes of an
N^3-cell grid spanning the cube [-h, h]^3. Queries interpolate trilinearly
and then activate (softplus density, sigmoid color), so a field upsampled by
an integer factor reproduces the coarse field exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import trimesh
from skimage import measure
from trimesh.exchange.obj import export_obj
from trimesh.exchange.ply import export_ply

from src.errors import CheckpointError, ConfigError
from src.utils import atomic_write, print_warning

CHECKPOINT_FORMAT = "voxel-field"
CHECKPOINT_VERSION = 1

_MIN_DENSITY = 1e-4

# scene cube [-h, h]^3 shared by fields and cameras
SCENE_HALF_EXTENT = 0.5


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    y = y.clamp_min(_MIN_DENSITY)
    return y + torch.log(-torch.expm1(-y))


class VoxelField(nn.Module):
    """Density + color grids with trilinear interpolation."""

    def __init__(self, resolution: int, half_extent: float = SCENE_HALF_EXTENT, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        if resolution < 1:
            raise ConfigError(f"field resolution must be >= 1, got {resolution}")
        self.resolution = int(resolution)
        self.half_extent = float(half_extent)
        n = self.resolution + 1
        # grids are indexed [z, y, x] so grid_sample's (x, y, z) order lines up
        self.density_logits = nn.Parameter(torch.zeros(1, 1, n, n, n, dtype=dtype))
        self.color_logits = nn.Parameter(torch.zeros(1, 3, n, n, n, dtype=dtype))

    @property
    def cell_size(self) -> float:
        return 2.0 * self.half_extent / self.resolution

    def node_coordinates(self) -> torch.Tensor:
        """World positions of the lattice nodes along one axis."""
        return torch.linspace(
            -self.half_extent, self.half_extent, self.resolution + 1, dtype=self.density_logits.dtype
        )

    def density_grid(self) -> torch.Tensor:
        """Activated density at the nodes, shape (N+1, N+1, N+1) indexed [z, y, x]."""
        return F.softplus(self.density_logits)[0, 0]

    def color_grid(self) -> torch.Tensor:
        """Activated color at the nodes, shape (3, N+1, N+1, N+1)."""
        return torch.sigmoid(self.color_logits)[0]

    def _sample(self, grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
        coords = (points / self.half_extent).reshape(1, 1, 1, -1, 3).to(grid.dtype)
        out = F.grid_sample(grid, coords, mode="bilinear", padding_mode="border", align_corners=True)
        return out.reshape(grid.shape[1], -1).transpose(0, 1)

    def query_logits(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Interpolated pre-activation values at *points* (..., 3)."""
        lead = points.shape[:-1]
        density = self._sample(self.density_logits, points).reshape(*lead)
        color = self._sample(self.color_logits, points).reshape(*lead, 3)
        return density, color

    def inside(self, points: torch.Tensor) -> torch.Tensor:
        return (points.abs() <= self.half_extent + 1e-9).all(dim=-1)

    def query(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Activated (density, color) at *points*; density is zero outside the box."""
        d_logit, c_logit = self.query_logits(points)
        density = F.softplus(d_logit) * self.inside(points).to(d_logit.dtype)
        return density, torch.sigmoid(c_logit)

    @classmethod
    def from_grids(
        cls, density: torch.Tensor, color: torch.Tensor | None = None, half_extent: float = SCENE_HALF_EXTENT
    ) -> VoxelField:
        """Build a field whose activated node values are *density* / *color*.

        *density* is (N+1)^3 indexed [z, y, x]; *color* is (3, N+1, N+1, N+1)
        in (0, 1) or None for mid-gray.
        """
        n = density.shape[-1]
        field = cls(n - 1, half_extent, dtype=density.dtype)
        with torch.no_grad():
            field.density_logits.copy_(inverse_softplus(density).reshape(1, 1, n, n, n))
            if color is not None:
                c = color.clamp(1e-6, 1 - 1e-6)
                field.color_logits.copy_(torch.log(c / (1 - c)).reshape(1, 3, n, n, n))
        return field


def init_coarse(
    resolution: int,
    half_extent: float = SCENE_HALF_EXTENT,
    rng: torch.Generator | None = None,
    peak_density: float = 10.0,
    blob_radius: float = 0.2,
    noise: float = 0.01,
) -> VoxelField:
    """Centered soft density blob with mid-gray color."""
    if resolution < 8:
        raise ConfigError(f"coarse resolution must be >= 8, got {resolution}")
    field = VoxelField(resolution, half_extent)
    lin = field.node_coordinates()
    zz, yy, xx = torch.meshgrid(lin, lin, lin, indexing="ij")
    r2 = xx * xx + yy * yy + zz * zz
    density = peak_density * torch.exp(-r2 / (2.0 * blob_radius**2))
    logits = inverse_softplus(density)
    if rng is not None and noise > 0:
        logits = logits + noise * torch.randn(logits.shape, generator=rng, dtype=logits.dtype)
    with torch.no_grad():
        field.density_logits.copy_(logits.reshape(field.density_logits.shape))
        field.color_logits.zero_()
    return field


def upsample(coarse: VoxelField, new_resolution: int) -> VoxelField:
    """Resample the coarse lattice trilinearly onto a finer one."""
    if new_resolution < coarse.resolution:
        raise ConfigError(
            f"upsample cannot reduce resolution ({coarse.resolution} -> {new_resolution})"
        )
    if new_resolution == coarse.resolution:
        return copy.deepcopy(coarse)
    fine = VoxelField(new_resolution, coarse.half_extent, dtype=coarse.density_logits.dtype)
    lin = fine.node_coordinates()
    zz, yy, xx = torch.meshgrid(lin, lin, lin, indexing="ij")
    points = torch.stack([xx, yy, zz], dim=-1)
    with torch.no_grad():
        d, c = coarse.query_logits(points)
        n = new_resolution + 1
        fine.density_logits.copy_(d.reshape(1, 1, n, n, n))
        fine.color_logits.copy_(c.permute(3, 0, 1, 2).reshape(1, 3, n, n, n))
    return fine


# ---------------------------------------------------------------------------
# Mesh export
# ---------------------------------------------------------------------------

@dataclass
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray

    def __post_init__(self) -> None:
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("mesh has face indices out of range")
        if np.isnan(self.vertices).any():
            raise ValueError("mesh has NaN vertices")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @classmethod
    def empty(cls) -> TexturedMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = (np.clip(self.vertex_colors, 0.0, 1.0) * 255).round().astype(np.uint8)
        return trimesh.Trimesh(
            vertices=self.vertices, faces=self.faces, vertex_colors=colors, process=False
        )

    def export(self, path: Union[str, Path]) -> Path:
        """Write OBJ (with vertex colors) or ASCII PLY, chosen by suffix."""
        path = Path(path)
        suffix = path.suffix.lower()
        mesh = self.to_trimesh()
        if suffix == ".obj":
            text = export_obj(mesh, include_color=True, include_normals=False)
            return atomic_write(path, lambda tmp: tmp.write_text(text))
        if suffix == ".ply":
            data = export_ply(mesh, encoding="ascii")
            return atomic_write(path, lambda tmp: tmp.write_bytes(data))
        raise ConfigError(f"unsupported mesh format '{suffix}' (use .obj or .ply)")


@torch.no_grad()
def extract_mesh(field: VoxelField, iso_level: float = 5.0) -> TexturedMesh:
    """Marching-cubes isosurface of the activated density at *iso_level*."""
    if iso_level <= 0:
        raise ConfigError(f"iso_level must be > 0, got {iso_level}")
    density = field.density_grid().double().cpu().numpy()
    if density.max() <= iso_level:
        print_warning(f"Density peaks at {density.max():.3g}, below the iso level {iso_level:g}; mesh is empty")
        return TexturedMesh.empty()
    if density.min() >= iso_level:
        print_warning(f"Density stays above the iso level {iso_level:g} everywhere; mesh is empty")
        return TexturedMesh.empty()
    cell = field.cell_size
    verts, faces, _, _ = measure.marching_cubes(density, level=iso_level, spacing=(cell, cell, cell))
    # marching cubes reports (z, y, x); flip to world (x, y, z)
    verts = verts[:, ::-1] - field.half_extent
    points = torch.from_numpy(np.ascontiguousarray(verts)).to(field.density_logits.dtype)
    _, colors = field.query(points)
    return TexturedMesh(
        vertices=np.ascontiguousarray(verts),
        faces=faces.astype(np.int64),
        vertex_colors=colors.double().cpu().numpy(),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_field(field: VoxelField, path: Union[str, Path]) -> Path:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "resolution": field.resolution,
        "half_extent": field.half_extent,
        "density_logits": field.density_logits.detach().cpu().clone(),
        "color_logits": field.color_logits.detach().cpu().clone(),
    }
    return atomic_write(path, lambda tmp: torch.save(payload, tmp))


def load_field(path: Union[str, Path]) -> VoxelField:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"could not read field checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    density, color = payload["density_logits"], payload["color_logits"]
    field = VoxelField(payload["resolution"], payload["half_extent"], dtype=density.dtype)
    if density.shape != field.density_logits.shape or color.shape != field.color_logits.shape:
        raise CheckpointError(f"{path} grid shapes do not match resolution {field.resolution}")
    with torch.no_grad():
        field.density_logits.copy_(density)
        field.color_logits.copy_(color)
    return field
