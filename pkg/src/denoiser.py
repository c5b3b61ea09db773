"""Conditional noise predictors and classifier-free guidance.

A denoiser predicts the noise in x_t given the time and two prompt
embeddings: text (z_y) and visual (z_v). The null prompt is the all-zero
vector, so scaling z_v by a weight in [0, 1] moves continuously between the
unconditional and the fully image-conditioned branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Protocol, Union, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.corpus import DEFAULT_CLASSES, ToyCorpus, make_toy_corpus, normalize_code
from src.errors import CheckpointError, ConfigError, NonFiniteError
from src.schedule import NoiseSchedule, make_schedule, perturb
from src.utils import RecordLog, atomic_write, make_generator, make_progress

CHECKPOINT_FORMAT = "toy-denoiser"
CHECKPOINT_VERSION = 1


class Modality(str, Enum):
    TEXT = "text"
    VISUAL = "visual"


@dataclass(frozen=True)
class PromptEmbedding:
    """Fixed-dimension conditioning vector for one prompt."""

    vector: torch.Tensor
    modality: Modality
    null_flag: bool = False

    @classmethod
    def null(cls, modality: Modality, dim: int, dtype: torch.dtype = torch.float32) -> PromptEmbedding:
        return cls(torch.zeros(dim, dtype=dtype), Modality(modality), null_flag=True)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[-1])

    def scaled(self, weight: float) -> PromptEmbedding:
        """Embedding with its vector multiplied by *weight*."""
        return PromptEmbedding(self.vector * weight, self.modality, self.null_flag)


@runtime_checkable
class DenoiserInterface(Protocol):
    """Anything that predicts noise from (x_t, t, z_y, z_v)."""

    embed_dim: int

    def predict(
        self,
        x_t: torch.Tensor,
        t: Union[float, torch.Tensor],
        z_y: PromptEmbedding,
        z_v: PromptEmbedding,
    ) -> torch.Tensor:
        ...


@dataclass(frozen=True)
class GuidanceConfig:
    """CFG weight s and visual-prompt weight lambda_v."""

    s: float = 30.0
    lambda_v: float = 0.5

    def __post_init__(self) -> None:
        if self.s < 0:
            raise ConfigError(f"CFG weight s must be >= 0, got {self.s}")
        if not 0.0 <= self.lambda_v <= 1.0:
            raise ConfigError(f"lambda_v must lie in [0, 1], got {self.lambda_v}")


# ---------------------------------------------------------------------------
# Toy network
# ---------------------------------------------------------------------------

class _ResBlock(nn.Module):
    """Dilated residual block with additive conditioning and pooled context."""

    def __init__(self, channels: int, dilation: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.context = nn.Linear(channels, channels)

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        u = self.conv1(F.silu(h)) + cond[:, :, None, None]
        u = u + self.context(u.mean(dim=(2, 3)))[:, :, None, None]
        return h + self.conv2(F.silu(u))


class ImageEncoder(nn.Module):
    """Small conv head mapping an image to a global embedding."""

    def __init__(self, embed_dim: int, width: int = 32) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width // 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(width, embed_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ToyDenoiser(nn.Module):
    """Desk-scale pixel-space noise predictor.

    Text prompts come from a learned lookup table over a closed vocabulary;
    visual prompts from :class:`ImageEncoder`. Images are consumed in model
    space ([-1, 1]); ``embed_visual`` takes [0, 1] images.
    """

    def __init__(
        self,
        vocabulary: list[str],
        embed_dim: int = 32,
        channels: int = 48,
        time_features: int = 8,
    ) -> None:
        super().__init__()
        self.vocabulary = [normalize_code(code) for code in vocabulary]
        self.embed_dim = embed_dim
        self.channels = channels
        self.text_table = nn.Embedding(len(self.vocabulary), embed_dim)
        self.image_encoder = ImageEncoder(embed_dim)
        self.register_buffer(
            "freqs", torch.exp(torch.linspace(0.0, math.log(64.0), time_features)), persistent=False
        )
        self.time_proj = nn.Sequential(
            nn.Linear(2 * time_features, channels), nn.SiLU(), nn.Linear(channels, channels)
        )
        self.text_proj = nn.Linear(embed_dim, channels, bias=False)
        self.visual_proj = nn.Linear(embed_dim, channels, bias=False)
        self.conv_in = nn.Conv2d(3, channels, 3, padding=1)
        self.blocks = nn.ModuleList(_ResBlock(channels, d) for d in (1, 2, 4, 1))
        self.conv_out = nn.Conv2d(channels, 3, 3, padding=1)

    # -- embeddings ---------------------------------------------------------

    def text_index(self, text_code: str) -> int:
        code = normalize_code(text_code)
        try:
            return self.vocabulary.index(code)
        except ValueError:
            raise ConfigError(
                f"unknown text code '{text_code}' (vocabulary: {', '.join(self.vocabulary)})"
            ) from None

    @torch.no_grad()
    def embed_text(self, text_code: str) -> PromptEmbedding:
        vec = self.text_table.weight[self.text_index(text_code)].detach().clone()
        return PromptEmbedding(vec, Modality.TEXT)

    @torch.no_grad()
    def embed_visual(self, image: torch.Tensor) -> PromptEmbedding:
        if image.dim() != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a (3,H,W) image, got {tuple(image.shape)}")
        x = image.to(self.text_table.weight.dtype).unsqueeze(0) * 2.0 - 1.0
        return PromptEmbedding(self.image_encoder(x)[0].detach().clone(), Modality.VISUAL)

    # -- prediction ---------------------------------------------------------

    def forward(
        self, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor, v: torch.Tensor
    ) -> torch.Tensor:
        """Batched prediction: x_t (B,3,H,W), t (B,), y and v (B,D)."""
        angles = t[:, None] * self.freqs[None, :] * math.pi
        temb = self.time_proj(torch.cat([torch.sin(angles), torch.cos(angles)], dim=1))
        cond = temb + self.text_proj(y) + self.visual_proj(v)
        h = self.conv_in(x_t)
        for block in self.blocks:
            h = block(h, cond)
        return self.conv_out(F.silu(h))

    def predict(
        self,
        x_t: torch.Tensor,
        t: Union[float, torch.Tensor],
        z_y: PromptEmbedding,
        z_v: PromptEmbedding,
    ) -> torch.Tensor:
        """Predict the noise in *x_t*; output has the shape of *x_t*."""
        single = x_t.dim() == 3
        x = x_t.unsqueeze(0) if single else x_t
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (3,H,W) or (B,3,H,W) input, got {tuple(x_t.shape)}")
        if z_y.dim != self.embed_dim or z_v.dim != self.embed_dim:
            raise ValueError(
                f"embedding dimension mismatch: expected {self.embed_dim}, "
                f"got z_y={z_y.dim}, z_v={z_v.dim}"
            )
        b = x.shape[0]
        tt = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        y = z_y.vector.to(x.dtype).reshape(1, -1).expand(b, -1)
        v = z_v.vector.to(x.dtype).reshape(1, -1).expand(b, -1)
        out = self(x, tt, y, v)
        return out[0] if single else out


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------

def _null(denoiser: DenoiserInterface, modality: Modality, like: torch.Tensor) -> PromptEmbedding:
    return PromptEmbedding.null(modality, denoiser.embed_dim, like.dtype)


def cfg_predict(
    denoiser: DenoiserInterface,
    x_t: torch.Tensor,
    t: Union[float, torch.Tensor],
    z_y: PromptEmbedding,
    s: float,
) -> torch.Tensor:
    """Text-only CFG: eps(null) + s * (eps(z_y) - eps(null))."""
    if z_y.null_flag:
        raise ValueError("cfg_predict needs a non-null text embedding")
    null_y = _null(denoiser, Modality.TEXT, x_t)
    null_v = _null(denoiser, Modality.VISUAL, x_t)
    eps_uncond = denoiser.predict(x_t, t, null_y, null_v)
    eps_cond = denoiser.predict(x_t, t, z_y, null_v)
    return eps_uncond + s * (eps_cond - eps_uncond)


def vp_cfg_predict(
    denoiser: DenoiserInterface,
    x_t: torch.Tensor,
    t: Union[float, torch.Tensor],
    z_y: PromptEmbedding,
    z_v: Optional[PromptEmbedding],
    config: GuidanceConfig,
) -> torch.Tensor:
    """Dual text + visual CFG with the visual embedding scaled by lambda_v."""
    if z_y.null_flag:
        raise ValueError("vp_cfg_predict needs a non-null text embedding")
    null_y = _null(denoiser, Modality.TEXT, x_t)
    null_v = _null(denoiser, Modality.VISUAL, x_t)
    visual = null_v if z_v is None else z_v.scaled(config.lambda_v)
    eps_uncond = denoiser.predict(x_t, t, null_y, null_v)
    eps_cond = denoiser.predict(x_t, t, z_y, visual)
    return eps_uncond + config.s * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class DenoiserReport:
    """Losses of one toy training run."""

    initial_loss: float
    heldout_loss: float
    steps: int
    eval_seed: int = 0
    losses: list[float] = field(default_factory=list)


def _eval_batches(corpus: ToyCorpus, batch_size: int):
    for start in range(0, len(corpus), batch_size):
        yield corpus.images[start:start + batch_size], corpus.labels[start:start + batch_size]


@torch.no_grad()
def heldout_loss(
    denoiser: ToyDenoiser,
    corpus: ToyCorpus,
    schedule: NoiseSchedule,
    seed: int = 0,
    draws: int = 4,
    batch_size: int = 64,
) -> float:
    """Mean-squared noise-prediction error with fixed (t, eps) draws.

    The constant-zero predictor scores E||eps||^2 = 1 per element.
    """
    if len(corpus) == 0:
        raise ConfigError("held-out corpus is empty")
    was_training = denoiser.training
    denoiser.eval()
    dtype = denoiser.text_table.weight.dtype
    g = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(draws):
        for images, labels in _eval_batches(corpus, batch_size):
            x0 = images.to(dtype) * 2.0 - 1.0
            t = schedule.t_min + (schedule.t_max - schedule.t_min) * torch.rand(
                x0.shape[0], generator=g, dtype=dtype
            )
            eps = torch.randn(x0.shape, generator=g, dtype=dtype)
            x_t = perturb(x0, t, eps, schedule)
            y = denoiser.text_table(labels)
            v = denoiser.image_encoder(x0)
            pred = denoiser(x_t, t, y, v)
            total += float(F.mse_loss(pred, eps, reduction="sum"))
            count += eps.numel()
    denoiser.train(was_training)
    return total / count


def train_toy_denoiser(
    dataset: ToyCorpus,
    schedule: NoiseSchedule,
    steps: int,
    rng: torch.Generator,
    *,
    heldout: Optional[ToyCorpus] = None,
    batch_size: int = 32,
    learning_rate: float = 2e-3,
    cond_dropout: float = 0.1,
    embed_dim: int = 32,
    channels: int = 48,
    log: Optional[RecordLog] = None,
    show_progress: bool = False,
) -> tuple[ToyDenoiser, DenoiserReport]:
    """Train a :class:`ToyDenoiser` on the noise-prediction MSE objective.

    Conditioning dropout: with probability *cond_dropout* both prompts are
    replaced by the null embedding, with *cond_dropout* the visual prompt alone
    and with *cond_dropout*/2 the text prompt alone, so the unconditional and
    text-only branches used by guidance are trained.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train a denoiser on an empty dataset")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if heldout is None:
        dataset, heldout = dataset.split(0.1)

    init_seed = int(torch.randint(0, 2**62, (), generator=rng))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        denoiser = ToyDenoiser(dataset.vocabulary, embed_dim=embed_dim, channels=channels)

    eval_seed = int(torch.randint(0, 2**62, (), generator=rng))
    initial = heldout_loss(denoiser, heldout, schedule, seed=eval_seed)
    losses: list[float] = []

    optimizer = torch.optim.Adam(denoiser.parameters(), lr=learning_rate)
    denoiser.train()
    n = len(dataset)
    with make_progress(disable=not show_progress) as progress:
        task = progress.add_task("Training denoiser", total=steps, status="")
        for step in range(steps):
            idx = torch.randint(0, n, (batch_size,), generator=rng)
            x0 = dataset.images[idx] * 2.0 - 1.0
            labels = dataset.labels[idx]
            t = schedule.t_min + (schedule.t_max - schedule.t_min) * torch.rand(batch_size, generator=rng)
            eps = torch.randn(x0.shape, generator=rng)
            x_t = perturb(x0, t, eps, schedule)

            u = torch.rand(batch_size, generator=rng)
            drop_both = u < cond_dropout
            drop_y = drop_both | ((u >= cond_dropout) & (u < 1.5 * cond_dropout))
            drop_v = drop_both | ((u >= 1.5 * cond_dropout) & (u < 2.5 * cond_dropout))
            y = denoiser.text_table(labels) * (~drop_y).float()[:, None]
            v = denoiser.image_encoder(x0) * (~drop_v).float()[:, None]

            loss = F.mse_loss(denoiser(x_t, t, y, v), eps)
            if not torch.isfinite(loss):
                raise NonFiniteError("denoiser training loss is not finite", step=step)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(denoiser.parameters(), 1.0)
            optimizer.step()

            value = float(loss)
            losses.append(value)
            if log is not None:
                log.write({"step": step, "loss": value})
            progress.update(task, advance=1, status=f"loss {value:.4f}")

    denoiser.eval()
    final = heldout_loss(denoiser, heldout, schedule, seed=eval_seed) if steps else initial
    return denoiser, DenoiserReport(initial, final, steps, eval_seed, losses)


@dataclass(frozen=True)
class DenoiserConfig:
    """Flat settings for ``train-denoiser``; keys match the config file."""

    denoiser_steps: int = 1500
    denoiser_batch_size: int = 32
    denoiser_learning_rate: float = 2e-3
    cond_dropout: float = 0.1
    embed_dim: int = 32
    channels: int = 48
    corpus_classes: tuple[str, ...] = tuple(DEFAULT_CLASSES)
    n_per_class: int = 256
    corpus_resolution: int = 32
    holdout_fraction: float = 0.1
    schedule_kind: str = "cosine"
    t_min: float = 0.02
    t_max: float = 0.98
    weighting: str = "sigma_squared"
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.corpus_classes:
            raise ConfigError("corpus_classes is empty; the toy corpus needs at least one class")
        known = {normalize_code(code) for code in DEFAULT_CLASSES}
        for code in self.corpus_classes:
            if normalize_code(code) not in known:
                raise ConfigError(
                    f"no toy corpus for class '{code}' (available: {', '.join(sorted(known))})"
                )
        if not 0.0 <= self.cond_dropout < 0.4:
            raise ConfigError(f"cond_dropout must lie in [0, 0.4), got {self.cond_dropout}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")
        if self.corpus_resolution < 8:
            raise ConfigError(f"corpus_resolution must be >= 8, got {self.corpus_resolution}")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.t_min, self.t_max, self.weighting)

    def corpus(self) -> ToyCorpus:
        classes = {
            normalize_code(code): spec
            for code, spec in DEFAULT_CLASSES.items()
            if normalize_code(code) in {normalize_code(c) for c in self.corpus_classes}
        }
        return make_toy_corpus(
            classes,
            n_per_class=self.n_per_class,
            resolution=self.corpus_resolution,
            rng=make_generator(self.seed, "corpus"),
        )


def train_from_config(
    config: DenoiserConfig, log: Optional[RecordLog] = None, show_progress: bool = False
) -> tuple[ToyDenoiser, NoiseSchedule, DenoiserReport, ToyCorpus]:
    """Build the toy corpus, train on its training split, report on the rest.

    Returns the held-out corpus as the last element.
    """
    schedule = config.schedule()
    train, heldout = config.corpus().split(config.holdout_fraction)
    denoiser, report = train_toy_denoiser(
        train,
        schedule,
        config.denoiser_steps,
        make_generator(config.seed, "denoiser"),
        heldout=heldout,
        batch_size=config.denoiser_batch_size,
        learning_rate=config.denoiser_learning_rate,
        cond_dropout=config.cond_dropout,
        embed_dim=config.embed_dim,
        channels=config.channels,
        log=log,
        show_progress=show_progress,
    )
    return denoiser, schedule, report, heldout


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_denoiser(
    denoiser: ToyDenoiser,
    schedule: NoiseSchedule,
    path: Union[str, Path],
    extra: Optional[dict[str, Any]] = None,
) -> Path:
    """Write a self-describing checkpoint (format tag + version header)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "vocabulary": list(denoiser.vocabulary),
        "embed_dim": denoiser.embed_dim,
        "channels": denoiser.channels,
        "schedule": schedule.describe(),
        "extra": dict(extra or {}),
        "state_dict": {k: v.detach().cpu() for k, v in denoiser.state_dict().items()},
    }
    return atomic_write(path, lambda tmp: torch.save(payload, tmp))


def load_denoiser(path: Union[str, Path]) -> tuple[ToyDenoiser, NoiseSchedule, dict[str, Any]]:
    """Load a checkpoint written by :func:`save_denoiser`."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"could not read denoiser checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has version {payload.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    denoiser = ToyDenoiser(
        payload["vocabulary"], embed_dim=payload["embed_dim"], channels=payload["channels"]
    )
    try:
        denoiser.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"{path} has mismatched parameters: {e}") from e
    denoiser.eval()
    sched = payload["schedule"]
    schedule = make_schedule(sched["kind"], sched["t_min"], sched["t_max"], sched["weighting"])
    return denoiser, schedule, payload.get("extra", {})
