"""Visual prompt generation and the per-view visual prompt bank."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import torch
import yaml

from src.denoiser import DenoiserInterface, PromptEmbedding, cfg_predict
from src.errors import CheckpointError, ConfigError, NonFiniteError
from src.schedule import NoiseSchedule
from src.utils import atomic_write, load_png, print_warning, save_png

BANK_MANIFEST = "bank.yaml"


class ViewSector(str, Enum):
    FRONT = "front"
    RIGHT = "right"
    BACK = "back"
    LEFT = "left"


class PromptSource(str, Enum):
    GENERATED = "generated"
    USER_REFERENCE = "user_reference"


@dataclass(frozen=True)
class SectorBoundaries:
    """Azimuth boundaries (degrees) between front|right|back|left|front.

    Intervals are half-open: front is [left_front, 360) and [0, front_right),
    right is [front_right, right_back), and so on.
    """

    front_right: float = 45.0
    right_back: float = 135.0
    back_left: float = 225.0
    left_front: float = 315.0

    def __post_init__(self) -> None:
        edges = self.as_tuple()
        if not (0.0 < edges[0] < edges[1] < edges[2] < edges[3] < 360.0):
            raise ConfigError(f"sector boundaries must increase strictly within (0, 360): {edges}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.front_right, self.right_back, self.back_left, self.left_front)

    def sector(self, azimuth: float) -> ViewSector:
        az = float(azimuth) % 360.0
        if az < self.front_right or az >= self.left_front:
            return ViewSector.FRONT
        if az < self.right_back:
            return ViewSector.RIGHT
        if az < self.back_left:
            return ViewSector.BACK
        return ViewSector.LEFT


@dataclass(frozen=True)
class PromptEntry:
    image: torch.Tensor
    embedding: PromptEmbedding


@dataclass(frozen=True)
class VisualPromptBank:
    """Per-sector visual prompts; immutable once built."""

    entries: dict[ViewSector, PromptEntry]
    source: PromptSource
    boundaries: SectorBoundaries = field(default_factory=SectorBoundaries)
    fallbacks: dict[ViewSector, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if ViewSector.FRONT not in self.entries:
            raise ValueError("a visual prompt bank needs a front entry")
        shapes = {tuple(entry.image.shape) for entry in self.entries.values()}
        if len(shapes) != 1:
            raise ValueError(f"bank images differ in resolution: {sorted(shapes)}")

    @property
    def front(self) -> PromptEntry:
        return self.entries[ViewSector.FRONT]


class NovelViewSynthesizer(Protocol):
    def synthesize(self, front_image: torch.Tensor, target_sector: ViewSector) -> torch.Tensor:
        ...


class IdentitySynthesizer:
    """Every sector sees the front image unchanged."""

    def synthesize(self, front_image: torch.Tensor, target_sector: ViewSector) -> torch.Tensor:
        return front_image.clone()


class MirrorSynthesizer:
    """Horizontal mirror for the side views; back view per *back_mode*."""

    BACK_MODES = ("identity", "mirror")

    def __init__(self, back_mode: str = "identity") -> None:
        if back_mode not in self.BACK_MODES:
            raise ConfigError(
                f"unknown back-view mode '{back_mode}' (expected one of: {', '.join(self.BACK_MODES)})"
            )
        self.back_mode = back_mode

    def synthesize(self, front_image: torch.Tensor, target_sector: ViewSector) -> torch.Tensor:
        if target_sector in (ViewSector.LEFT, ViewSector.RIGHT):
            return torch.flip(front_image, dims=(-1,))
        if target_sector is ViewSector.BACK and self.back_mode == "mirror":
            return torch.flip(front_image, dims=(-1,))
        return front_image.clone()


# ---------------------------------------------------------------------------
# Visual prompt generation
# ---------------------------------------------------------------------------

@torch.no_grad()
def generate_visual_prompt(
    denoiser: DenoiserInterface,
    schedule: NoiseSchedule,
    z_y: PromptEmbedding,
    s: float,
    steps: int,
    rng: torch.Generator,
    resolution: int = 64,
) -> torch.Tensor:
    """Deterministic DDIM-style reverse pass from pure noise under text CFG.

    Returns a (3, H, W) image in [0, 1].
    """
    if steps < 1:
        raise ConfigError(f"sampler needs at least one step, got {steps}")
    x = torch.randn((3, resolution, resolution), generator=rng)
    times = torch.linspace(schedule.t_max, 0.0, steps + 1, dtype=torch.float64).tolist()
    for i in range(steps):
        t, t_next = times[i], times[i + 1]
        eps = cfg_predict(denoiser, x, t, z_y, s)
        x0 = ((x - schedule.sigma(t) * eps) / schedule.alpha(t)).clamp(-1.0, 1.0)
        if t_next <= 0.0:
            x = x0
        else:
            x = schedule.alpha(t_next) * x0 + schedule.sigma(t_next) * eps
        if not torch.isfinite(x).all():
            raise NonFiniteError("sampler state is not finite", step=i, t=t)
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Prompt bank
# ---------------------------------------------------------------------------

def build_prompt_bank(
    front_image: torch.Tensor,
    synthesizer: NovelViewSynthesizer,
    embed_visual: Callable[[torch.Tensor], PromptEmbedding],
    source: PromptSource = PromptSource.GENERATED,
    boundaries: Optional[SectorBoundaries] = None,
) -> VisualPromptBank:
    """Synthesize the side/back views and embed every sector once.

    A sector whose synthesis fails (or returns the wrong shape) falls back to
    the front image and is recorded in ``bank.fallbacks``.
    """
    if front_image.dim() != 3 or front_image.shape[0] != 3:
        raise ValueError(f"front image must be (3,H,W), got {tuple(front_image.shape)}")
    front = front_image.detach().clone()
    images: dict[ViewSector, torch.Tensor] = {ViewSector.FRONT: front}
    fallbacks: dict[ViewSector, str] = {}
    for sector in (ViewSector.RIGHT, ViewSector.BACK, ViewSector.LEFT):
        try:
            view = synthesizer.synthesize(front, sector)
            if tuple(view.shape) != tuple(front.shape):
                raise ValueError(f"synthesized shape {tuple(view.shape)} != {tuple(front.shape)}")
            if not torch.isfinite(view).all():
                raise ValueError("synthesized view is not finite")
            images[sector] = view.detach()
        except Exception as e:
            print_warning(f"View synthesis failed for {sector.value}: {e}; using the front image")
            images[sector] = front.clone()
            fallbacks[sector] = str(e)
    entries = {sector: PromptEntry(img, embed_visual(img)) for sector, img in images.items()}
    return VisualPromptBank(
        entries=entries,
        source=PromptSource(source),
        boundaries=boundaries or SectorBoundaries(),
        fallbacks=fallbacks,
    )


def select_prompt(bank: VisualPromptBank, azimuth: float) -> tuple[torch.Tensor, PromptEmbedding]:
    """Image and embedding for the sector containing *azimuth* (mod 360)."""
    sector = bank.boundaries.sector(azimuth)
    entry = bank.entries.get(sector, bank.front)
    return entry.image, entry.embedding


def save_prompt_bank(bank: VisualPromptBank, directory: Union[str, Path]) -> Path:
    """Write one PNG per sector plus a YAML manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for sector, entry in bank.entries.items():
        name = f"{sector.value}.png"
        save_png(entry.image, directory / name)
        files[sector.value] = name
    manifest = {
        "source": bank.source.value,
        "sectors": files,
        "boundaries": list(bank.boundaries.as_tuple()),
        "fallbacks": {s.value: reason for s, reason in bank.fallbacks.items()},
    }
    path = directory / BANK_MANIFEST
    atomic_write(path, lambda tmp: tmp.write_text(yaml.safe_dump(manifest, sort_keys=True)))
    return path


def load_prompt_bank(
    directory: Union[str, Path], embed_visual: Callable[[torch.Tensor], PromptEmbedding]
) -> VisualPromptBank:
    """Read a bank written by :func:`save_prompt_bank`; embeddings are recomputed."""
    directory = Path(directory)
    try:
        manifest = yaml.safe_load((directory / BANK_MANIFEST).read_text())
        boundaries = SectorBoundaries(*manifest["boundaries"])
        images = {
            ViewSector(sector): load_png(directory / name)
            for sector, name in manifest["sectors"].items()
        }
        fallbacks = {ViewSector(s): r for s, r in (manifest.get("fallbacks") or {}).items()}
        source = PromptSource(manifest["source"])
    except (OSError, KeyError, TypeError, ValueError, yaml.YAMLError) as e:
        raise CheckpointError(f"could not read prompt bank in {directory}: {e}") from e
    entries = {sector: PromptEntry(img, embed_visual(img)) for sector, img in images.items()}
    return VisualPromptBank(entries, source, boundaries, fallbacks)


def load_reference_image(path: Union[str, Path], resolution: int) -> torch.Tensor:
    """Load a user-supplied reference image as a square (3, R, R) prompt."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"reference image not found: {path}")
    try:
        return load_png(path, resolution)
    except OSError as e:
        raise ConfigError(f"could not read reference image {path}: {e}") from e
