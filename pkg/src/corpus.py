"""Toy colored-shape corpus used to train the desk-scale denoiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from src.errors import ConfigError

# text code -> (prototype RGB, shape kind)
DEFAULT_CLASSES: dict[str, tuple[tuple[float, float, float], str]] = {
    "red sphere": ((0.85, 0.12, 0.10), "disc"),
    "blue cube": ((0.12, 0.22, 0.85), "square"),
}


def normalize_code(text_code: str) -> str:
    """Canonical form of a text code: lower case, single spaces, '_' as space."""
    return " ".join(text_code.replace("_", " ").lower().split())


def random_background(rng: torch.Generator, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Light random RGB background color in [0.5, 1]^3."""
    return 0.5 + 0.5 * torch.rand(3, generator=rng, dtype=dtype)


@dataclass
class ToyCorpus:
    """Images (N,3,H,W) in [0,1] with integer class labels."""

    images: torch.Tensor
    labels: torch.Tensor
    vocabulary: list[str]
    class_colors: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def split(self, holdout_fraction: float = 0.1) -> tuple[ToyCorpus, ToyCorpus]:
        """Deterministic train / held-out split (every k-th sample held out)."""
        n = len(self)
        n_hold = max(1, int(round(n * holdout_fraction))) if n > 1 else 0
        if n_hold == 0:
            return self, ToyCorpus(self.images[:0], self.labels[:0], self.vocabulary, self.class_colors)
        stride = max(1, n // n_hold)
        hold = torch.zeros(n, dtype=torch.bool)
        hold[::stride] = True
        return (
            ToyCorpus(self.images[~hold], self.labels[~hold], self.vocabulary, self.class_colors),
            ToyCorpus(self.images[hold], self.labels[hold], self.vocabulary, self.class_colors),
        )


def draw_shape(
    kind: str,
    color: torch.Tensor,
    background: torch.Tensor,
    resolution: int,
    center: tuple[float, float] = (0.0, 0.0),
    radius: float = 0.5,
) -> torch.Tensor:
    """Render one anti-aliased shape over a flat background. Returns (3,H,W).

    Coordinates are in [-1, 1]; the disc gets a soft radial shading so it
    reads as a sphere, the square stays flat.
    """
    lin = (torch.arange(resolution, dtype=torch.float32) + 0.5) / resolution * 2.0 - 1.0
    yy, xx = torch.meshgrid(lin, lin, indexing="ij")
    dx, dy = xx - center[0], yy - center[1]
    edge = 2.0 / resolution
    if kind == "disc":
        r = torch.sqrt(dx * dx + dy * dy)
        mask = ((radius - r) / edge + 0.5).clamp(0.0, 1.0)
        shade = 1.0 - 0.25 * (r / radius).clamp(0.0, 1.0) ** 2
    elif kind == "square":
        d = torch.maximum(dx.abs(), dy.abs())
        mask = ((radius - d) / edge + 0.5).clamp(0.0, 1.0)
        shade = torch.ones_like(d)
    else:
        raise ConfigError(f"unknown shape kind '{kind}'")
    fg = color.view(3, 1, 1) * shade.unsqueeze(0)
    bg = background.view(3, 1, 1).expand(3, resolution, resolution)
    return (mask * fg + (1.0 - mask) * bg).clamp(0.0, 1.0)


def make_toy_corpus(
    classes: dict[str, tuple[tuple[float, float, float], str]] | None = None,
    n_per_class: int = 256,
    resolution: int = 32,
    rng: torch.Generator | None = None,
) -> ToyCorpus:
    """Draw *n_per_class* jittered shapes for every class."""
    if classes is None:
        classes = DEFAULT_CLASSES
    if not classes:
        raise ConfigError("toy corpus needs at least one class")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if rng is None:
        rng = torch.Generator().manual_seed(0)

    vocabulary = [normalize_code(code) for code in classes]
    images, labels = [], []
    for label, (code, (rgb, kind)) in enumerate(classes.items()):
        color = torch.tensor(rgb, dtype=torch.float32)
        for _ in range(n_per_class):
            jitter = (torch.rand(3, generator=rng) - 0.5)
            center = (0.15 * float(jitter[0]), 0.15 * float(jitter[1]))
            radius = 0.45 + 0.15 * float(jitter[2])
            images.append(
                draw_shape(kind, color, random_background(rng), resolution, center, radius)
            )
            labels.append(label)
    colors = {normalize_code(code): tuple(rgb) for code, (rgb, _) in classes.items()}
    return ToyCorpus(torch.stack(images), torch.tensor(labels), vocabulary, colors)
