"""Two-stage field optimization and the text -> prompt -> 3D pipeline.

Each iteration renders one (or ``accumulation``) random views and minimizes

    total = distill + lambda1 * consistency + lambda2 * alignment

where lambda1 is a per-stage constant and lambda2 rises linearly over the
stage. Stylized runs drop the alignment term (its weight is logged as 0).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional, Union

import torch

from src.corpus import random_background
from src.denoiser import GuidanceConfig, PromptEmbedding, ToyDenoiser
from src.errors import ConfigError, NonFiniteError
from src.field3d import TexturedMesh, VoxelField, extract_mesh, init_coarse, save_field, upsample
from src.guidance import VARIANTS, DistillationStep, sds_loss, vp_sds_loss
from src.renderer import (
    CameraRanges,
    RenderOutput,
    export_turntable,
    render,
    render_turntable,
    sample_camera,
)
from src.rewards import (
    PSI_MAPS,
    FeatureExtractor,
    RewardConfig,
    RewardModel,
    front_camera,
    hf_reward_loss,
    vc_reward_loss,
)
from src.sampler import (
    MirrorSynthesizer,
    NovelViewSynthesizer,
    PromptSource,
    SectorBoundaries,
    ViewSector,
    VisualPromptBank,
    build_prompt_bank,
    generate_visual_prompt,
    save_prompt_bank,
)
from src.schedule import NoiseSchedule
from src.utils import RecordLog, apply_mapping, make_generator, make_progress, print_info, save_png


class Stage(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


class Mode(str, Enum):
    STANDARD = "standard"
    STYLIZED = "stylized"


# "full" is an alias of "paper"
PRESETS = ("desk", "paper", "full")


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults follow the full-size recipe; see :meth:`desk`."""

    iterations_per_stage: int = 5000
    learning_rate: float = 1e-3
    coarse_grid: int = 128
    fine_grid: int = 256
    coarse_resolution: int = 128
    fine_resolution: int = 512
    n_samples: int = 64
    lambda1_coarse: float = 0.1
    lambda1_fine: float = 0.01
    lambda2_start: float = 0.001
    lambda2_end: float = 0.01
    lambda_v: float = 0.5
    cfg_scale: float = 30.0
    seed: int = 0
    mode: str = "standard"
    variant: str = "vp-sds"
    psi: str = "softplus"
    vc_every: int = 10
    checkpoint_every: int = 500
    accumulation: int = 1
    jitter: bool = True
    elevation_range: tuple[float, float] = (-10.0, 45.0)
    radius_range: tuple[float, float] = (1.5, 1.8)
    sector_boundaries: tuple[float, float, float, float] = (45.0, 135.0, 225.0, 315.0)
    prompt_steps: int = 50
    prompt_cfg_scale: float = 3.0
    prompt_resolution: int = 64
    back_mode: str = "identity"
    iso_level: float = 5.0
    turntable_views: int = 8

    def __post_init__(self) -> None:
        if self.iterations_per_stage < 0:
            raise ConfigError(f"iterations_per_stage must be >= 0, got {self.iterations_per_stage}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for key in ("coarse_grid", "fine_grid", "coarse_resolution", "fine_resolution", "prompt_resolution"):
            if not _is_power_of_two(getattr(self, key)):
                raise ConfigError(f"{key} must be a power of two, got {getattr(self, key)}")
        if self.coarse_grid < 8:
            raise ConfigError(f"coarse_grid must be >= 8, got {self.coarse_grid}")
        if self.fine_grid < self.coarse_grid:
            raise ConfigError(f"fine_grid ({self.fine_grid}) is below coarse_grid ({self.coarse_grid})")
        for key in ("lambda1_coarse", "lambda1_fine", "lambda2_start", "lambda2_end", "cfg_scale", "prompt_cfg_scale"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not 0.0 <= self.lambda_v <= 1.0:
            raise ConfigError(f"lambda_v must lie in [0, 1], got {self.lambda_v}")
        if self.mode not in {m.value for m in Mode}:
            raise ConfigError(f"unknown mode '{self.mode}' (expected standard or stylized)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (expected one of: {', '.join(VARIANTS)})")
        if self.psi not in PSI_MAPS:
            raise ConfigError(f"unknown psi map '{self.psi}' (expected one of: {', '.join(PSI_MAPS)})")
        for key in ("vc_every", "checkpoint_every", "accumulation", "prompt_steps", "turntable_views"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        # validated by the constructors
        if len(self.sector_boundaries) != 4:
            raise ConfigError(f"sector_boundaries needs 4 azimuths, got {self.sector_boundaries}")
        self.camera_ranges()
        self.boundaries()
        MirrorSynthesizer(self.back_mode)

    @classmethod
    def desk(cls, **overrides: Any) -> TrainConfig:
        """Laptop-sized preset: 64^3/128^3 grids, 64/128 px renders, 2000 iterations."""
        values: dict[str, Any] = dict(
            iterations_per_stage=2000,
            learning_rate=1e-2,
            coarse_grid=64,
            fine_grid=128,
            coarse_resolution=64,
            fine_resolution=128,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def full(cls, **overrides: Any) -> TrainConfig:
        return cls(**overrides)

    @classmethod
    def preset(cls, name: str) -> TrainConfig:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset '{name}' (expected one of: {', '.join(PRESETS)})")
        return cls.desk() if name == "desk" else cls.full()

    @classmethod
    def preset_overrides(cls, name: str) -> dict[str, Any]:
        """Fields where preset *name* departs from the full-size defaults."""
        chosen, defaults = cls.preset(name).as_dict(), cls().as_dict()
        return {k: v for k, v in chosen.items() if v != defaults[k]}

    @classmethod
    def from_mapping(
        cls, mapping: dict[str, Any], base: Optional[TrainConfig] = None, ignore: tuple[str, ...] = ()
    ) -> TrainConfig:
        """Overlay a flat config mapping on *base* (the desk preset by default)."""
        return apply_mapping(base or cls.desk(), mapping, ignore)

    def as_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["elevation_range"] = list(self.elevation_range)
        data["radius_range"] = list(self.radius_range)
        data["sector_boundaries"] = list(self.sector_boundaries)
        return data

    @property
    def stylized(self) -> bool:
        return self.mode == Mode.STYLIZED.value

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(s=self.cfg_scale, lambda_v=self.lambda_v)

    def rewards(self) -> RewardConfig:
        return RewardConfig(psi=self.psi, vc_every=self.vc_every)

    def camera_ranges(self) -> CameraRanges:
        return CameraRanges(elevation=self.elevation_range, radius=self.radius_range)

    def boundaries(self) -> SectorBoundaries:
        return SectorBoundaries(*self.sector_boundaries)

    def lambda1(self, stage: Union[Stage, str]) -> float:
        return self.lambda1_coarse if Stage(stage) is Stage.COARSE else self.lambda1_fine

    def render_resolution(self, stage: Union[Stage, str]) -> int:
        return self.coarse_resolution if Stage(stage) is Stage.COARSE else self.fine_resolution


def lambda2_at(iteration: int, total: int, config: TrainConfig) -> float:
    """Alignment weight rising linearly from lambda2_start (0) to lambda2_end (total)."""
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if total == 0:
        return config.lambda2_start
    frac = iteration / total
    return config.lambda2_start + (config.lambda2_end - config.lambda2_start) * frac


@dataclass
class StageDeps:
    denoiser: ToyDenoiser
    schedule: NoiseSchedule
    bank: VisualPromptBank
    reward_model: RewardModel
    extractor: FeatureExtractor
    text_code: str

    def text_embedding(self) -> PromptEmbedding:
        return self.denoiser.embed_text(self.text_code)


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    sds: float
    vc: float
    hf: float
    reward: float
    lambda1: float
    lambda2: float
    hf_weight: float
    total: float
    vc_applied: bool
    vc_renders: int
    sector: str
    t: float

    def to_record(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Probe:
    """Deterministic front-view scores of the field at one iteration."""

    iteration: int
    reward: float
    vc: float


@dataclass
class StageReport:
    stage: str
    records: list[IterationRecord] = field(default_factory=list)
    probes: list[Probe] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.records]

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "stage": self.stage,
            "iterations": len(self.records),
            "checkpoints": [p.name for p in self.checkpoints],
        }
        if self.probes:
            first, last = self.probes[0], self.probes[-1]
            out.update(
                reward_start=first.reward, reward_end=last.reward, vc_start=first.vc, vc_end=last.vc
            )
        if self.records:
            out["max_hf_weight"] = max(r.hf_weight for r in self.records)
        return out


@torch.no_grad()
def probe_field(
    field: VoxelField, deps: StageDeps, config: TrainConfig, stage: Union[Stage, str], iteration: int
) -> Probe:
    """Score a noise-free front render with the toy reward and the consistency loss."""
    out = render(field, front_camera(config.rewards()), config.render_resolution(stage), config.n_samples)
    _, reward = hf_reward_loss(out.image, deps.text_code, deps.reward_model, config.psi, out.alpha)
    vc = vc_reward_loss(out.image, deps.bank, deps.extractor)
    return Probe(iteration, float(reward), float(vc))


def _view_losses(
    field: VoxelField,
    deps: StageDeps,
    config: TrainConfig,
    stage: Stage,
    iteration: int,
    rng: torch.Generator,
    z_y: PromptEmbedding,
) -> tuple[dict[str, torch.Tensor], DistillationStep]:
    """Loss components for one random view; draws all randomness from *rng*."""
    dtype = field.density_logits.dtype
    camera = sample_camera(rng, config.camera_ranges())
    background = random_background(rng, dtype)
    resolution = config.render_resolution(stage)
    out = render(
        field, camera, resolution, config.n_samples, background, rng if config.jitter else None
    )
    if config.variant == "sds":
        distill, step = sds_loss(
            out.image, camera, deps.denoiser, deps.schedule, z_y, config.cfg_scale, rng, config.boundaries()
        )
    else:
        distill, step = vp_sds_loss(
            out.image, camera, deps.denoiser, deps.schedule, z_y, deps.bank, config.guidance(), rng
        )

    hf, reward = hf_reward_loss(out.image, deps.text_code, deps.reward_model, config.psi, out.alpha)

    # the forced front render is in addition to a front-sector view
    vc = torch.zeros((), dtype=dtype)
    renders = 0
    if step.selected_sector is ViewSector.FRONT:
        vc = vc + vc_reward_loss(out.image, deps.bank, deps.extractor)
        renders += 1
    if iteration % config.vc_every == 0:
        front = render(field, front_camera(config.rewards()), resolution, config.n_samples, background)
        vc = vc + vc_reward_loss(front.image, deps.bank, deps.extractor)
        renders += 1
    terms = {
        "sds": distill,
        "vc": vc,
        "hf": hf,
        "reward": reward.detach(),
        "vc_renders": torch.tensor(float(renders)),
    }
    return terms, step


def train_stage(
    field: VoxelField,
    stage: Union[Stage, str],
    deps: StageDeps,
    config: TrainConfig,
    *,
    metrics: Optional[RecordLog] = None,
    steps_log: Optional[RecordLog] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    show_progress: bool = False,
) -> tuple[VoxelField, StageReport]:
    """Optimize *field* in place for ``config.iterations_per_stage`` iterations.

    Every iteration draws from its own generator derived from the master seed,
    the stage and the iteration index, so runs are reproducible. On a non-finite
    loss the last step is logged, the field is checkpointed (when a directory
    is given) and :class:`NonFiniteError` is raised.
    """
    stage = Stage(stage)
    report = StageReport(stage.value)
    total = config.iterations_per_stage
    if total == 0:
        return field, report

    started = time.monotonic()
    z_y = deps.text_embedding()
    lambda1 = config.lambda1(stage)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    optimizer = torch.optim.Adam(field.parameters(), lr=config.learning_rate)
    report.probes.append(probe_field(field, deps, config, stage, 0))
    last_step: Optional[DistillationStep] = None

    with make_progress(disable=not show_progress) as progress:
        task = progress.add_task(f"{stage.value.capitalize()} stage", total=total, status="")
        for i in range(total):
            lambda2 = lambda2_at(i, max(total - 1, 0), config)
            hf_weight = 0.0 if config.stylized else lambda2
            optimizer.zero_grad(set_to_none=True)
            sums = {"sds": 0.0, "vc": 0.0, "hf": 0.0, "reward": 0.0, "total": 0.0, "vc_renders": 0.0}
            try:
                for k in range(config.accumulation):
                    rng = make_generator(config.seed, "train", stage.value, i, k)
                    terms, last_step = _view_losses(field, deps, config, stage, i, rng, z_y)
                    loss = terms["sds"] + lambda1 * terms["vc"] + hf_weight * terms["hf"]
                    if not torch.isfinite(loss):
                        raise NonFiniteError(
                            "stage loss is not finite",
                            stage=stage.value, iteration=i, t=last_step.t,
                            camera=last_step.camera.as_dict(),
                        )
                    (loss / config.accumulation).backward()
                    for key in ("sds", "vc", "hf", "reward", "vc_renders"):
                        sums[key] += float(terms[key].detach())
                    sums["total"] += float(loss.detach())
            except NonFiniteError as e:
                if steps_log is not None:
                    steps_log.write({"stage": stage.value, "iteration": i, "status": "non-finite", **e.diagnostics})
                if ckpt_dir is not None:
                    report.checkpoints.append(save_field(field, ckpt_dir / f"{stage.value}_nonfinite.pt"))
                raise
            optimizer.step()

            n = config.accumulation
            record = IterationRecord(
                iteration=i,
                stage=stage.value,
                sds=sums["sds"] / n,
                vc=sums["vc"] / n,
                hf=sums["hf"] / n,
                reward=sums["reward"] / n,
                lambda1=lambda1,
                lambda2=lambda2,
                hf_weight=hf_weight,
                total=sums["total"] / n,
                vc_applied=sums["vc_renders"] > 0,
                vc_renders=int(sums["vc_renders"]),
                sector=last_step.selected_sector.value,
                t=last_step.t,
            )
            report.records.append(record)
            if metrics is not None:
                metrics.write(record.to_record())
            if steps_log is not None:
                steps_log.write({"stage": stage.value, "iteration": i, **last_step.to_record()})

            if (i + 1) % config.checkpoint_every == 0 and i + 1 < total:
                report.probes.append(probe_field(field, deps, config, stage, i + 1))
                if ckpt_dir is not None:
                    report.checkpoints.append(save_field(field, ckpt_dir / f"{stage.value}_{i + 1:05d}.pt"))
            progress.update(task, advance=1, status=f"loss {record.total:.3f} r {record.reward:.3f}")

    report.probes.append(probe_field(field, deps, config, stage, total))
    if ckpt_dir is not None:
        report.checkpoints.append(save_field(field, ckpt_dir / f"{stage.value}_final.pt"))
    report.wall_time = time.monotonic() - started
    return field, report


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineDeps:
    denoiser: ToyDenoiser
    schedule: NoiseSchedule
    reward_model: RewardModel
    extractor: FeatureExtractor
    synthesizer: Optional[NovelViewSynthesizer] = None


@dataclass
class PipelineResult:
    text_code: str
    mode: str
    visual_prompt: torch.Tensor
    bank: VisualPromptBank
    coarse_field: VoxelField
    fine_field: VoxelField
    mesh: TexturedMesh
    turntable: list[RenderOutput]
    reports: dict[str, StageReport]
    artifacts: dict[str, Path] = field(default_factory=dict)


def run_pipeline(
    text_code: str,
    config: TrainConfig,
    deps: PipelineDeps,
    *,
    reference_image: Optional[torch.Tensor] = None,
    fine_reference: Optional[torch.Tensor] = None,
    output_dir: Optional[Union[str, Path]] = None,
    artifacts: Optional[dict[str, Path]] = None,
    show_progress: bool = False,
) -> PipelineResult:
    """Text -> visual prompt -> coarse field -> fine field -> mesh + turntable.

    Stylized runs take the prompt from *reference_image* and may switch to
    *fine_reference* for the fine stage. Artifacts are written to
    *output_dir* as soon as they exist and recorded in *artifacts*, so a
    failed run leaves what it produced behind.
    """
    artifacts = artifacts if artifacts is not None else {}
    out_dir = Path(output_dir) if output_dir is not None else None

    def keep(name: str, path: Path) -> None:
        artifacts[name] = path

    denoiser = deps.denoiser
    z_y = denoiser.embed_text(text_code)
    synthesizer = deps.synthesizer or MirrorSynthesizer(config.back_mode)

    if config.stylized:
        if reference_image is None:
            raise ConfigError("stylized mode needs a reference image")
        prompt, source = reference_image, PromptSource.USER_REFERENCE
    else:
        if reference_image is not None or fine_reference is not None:
            raise ConfigError("reference images are only used in stylized mode")
        print_info(f"Generating visual prompt for '{text_code}'")
        prompt = generate_visual_prompt(
            denoiser, deps.schedule, z_y, config.prompt_cfg_scale, config.prompt_steps,
            make_generator(config.seed, "prompt"), config.prompt_resolution,
        )
        source = PromptSource.GENERATED
    bank = build_prompt_bank(prompt, synthesizer, denoiser.embed_visual, source, config.boundaries())
    if out_dir is not None:
        keep("visual_prompt", save_png(prompt, out_dir / "visual_prompt.png"))
        keep("prompt_bank", save_prompt_bank(bank, out_dir / "prompt_bank"))

    stage_deps = StageDeps(denoiser, deps.schedule, bank, deps.reward_model, deps.extractor, text_code)
    reports: dict[str, StageReport] = {}
    ckpt_dir = out_dir / "checkpoints" if out_dir is not None else None
    with RecordLog(out_dir / "metrics.jsonl" if out_dir else None, "w") as metrics, \
            RecordLog(out_dir / "distill_steps.jsonl" if out_dir else None, "w") as steps_log:
        coarse = init_coarse(config.coarse_grid, rng=make_generator(config.seed, "init"))
        coarse, reports[Stage.COARSE.value] = train_stage(
            coarse, Stage.COARSE, stage_deps, config,
            metrics=metrics, steps_log=steps_log, checkpoint_dir=ckpt_dir, show_progress=show_progress,
        )
        if out_dir is not None:
            keep("coarse_field", save_field(coarse, out_dir / "coarse.pt"))

        fine = upsample(coarse, config.fine_grid)
        if fine_reference is not None:
            fine_bank = build_prompt_bank(
                fine_reference, synthesizer, denoiser.embed_visual, PromptSource.USER_REFERENCE, config.boundaries()
            )
            stage_deps = StageDeps(denoiser, deps.schedule, fine_bank, deps.reward_model, deps.extractor, text_code)
            if out_dir is not None:
                keep("fine_prompt_bank", save_prompt_bank(fine_bank, out_dir / "fine_prompt_bank"))
        fine, reports[Stage.FINE.value] = train_stage(
            fine, Stage.FINE, stage_deps, config,
            metrics=metrics, steps_log=steps_log, checkpoint_dir=ckpt_dir, show_progress=show_progress,
        )
    if out_dir is not None:
        keep("fine_field", save_field(fine, out_dir / "fine.pt"))
        keep("metrics", out_dir / "metrics.jsonl")
        keep("distill_steps", out_dir / "distill_steps.jsonl")

    mesh = extract_mesh(fine, config.iso_level)
    if out_dir is not None and not mesh.is_empty:
        keep("mesh", mesh.export(out_dir / "mesh.obj"))
    frames = render_turntable(fine, config.turntable_views, config.fine_resolution, n_samples=config.n_samples)
    if out_dir is not None:
        keep("turntable", export_turntable(frames, out_dir / "turntable"))

    return PipelineResult(
        text_code=text_code,
        mode=config.mode,
        visual_prompt=prompt,
        bank=bank,
        coarse_field=coarse,
        fine_field=fine,
        mesh=mesh,
        turntable=frames,
        reports=reports,
        artifacts=artifacts,
    )
