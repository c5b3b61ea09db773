"""Entry point for the vp-distill command line (python -m src)."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import yaml

from src import __version__, load_config, output_root
from src.corpus import DEFAULT_CLASSES, normalize_code
from src.denoiser import DenoiserConfig, ToyDenoiser, load_denoiser, save_denoiser, train_from_config
from src.errors import CheckpointError, ConfigError, DistillError
from src.field3d import load_field
from src.invariants import print_report, run_invariants
from src.renderer import export_turntable, render_turntable
from src.rewards import ToyFeatureExtractor, ToyRewardModel
from src.sampler import load_reference_image
from src.schedule import NoiseSchedule
from src.trainer import PRESETS, PipelineDeps, TrainConfig, run_pipeline
from src.utils import (
    RecordLog,
    apply_mapping,
    atomic_write,
    console,
    derive_seed,
    print_error,
    print_header,
    print_info,
    print_rule,
    print_success,
)

MANIFEST_NAME = "manifest.yaml"
DEFAULT_DENOISER = "denoiser.pt"

_DENOISER_KEYS = tuple(f.name for f in dataclasses.fields(DenoiserConfig))
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))


@dataclass
class RunManifest:
    """Everything needed to re-run and audit one command."""

    command: str
    args: dict[str, Any]
    seed: Optional[int] = None
    config: dict[str, Any] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    status: str = "running"
    version: str = __version__
    text_code: Optional[str] = None
    mode: Optional[str] = None
    preset: Optional[str] = None
    preset_overrides: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    stages: dict[str, Any] = field(default_factory=dict)
    bank_source: Optional[str] = None
    hf_weight_max: Optional[float] = None
    error: Optional[str] = None
    timing: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def start(cls, args: argparse.Namespace, **values: Any) -> RunManifest:
        recorded = {k: v for k, v in vars(args).items() if k != "func"}
        return cls(command=args.command, args=recorded, timing={"started": _now()}, **values)

    def fail(
        self, directory: Path, error: BaseException, artifacts: dict[str, Path], name: str = MANIFEST_NAME
    ) -> Path:
        self.status = "failed"
        self.error = f"{type(error).__name__}: {error}"
        self.artifacts = _relative(artifacts, directory)
        return self.write(directory, name)

    def write(self, directory: Path, name: str = MANIFEST_NAME) -> Path:
        if self.status != "running":
            self.timing.setdefault("finished", _now())
        data = dataclasses.asdict(self)
        path = directory / name
        atomic_write(path, lambda tmp: tmp.write_text(yaml.safe_dump(data, sort_keys=False)))
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _relative(artifacts: dict[str, Path], directory: Path) -> dict[str, str]:
    return {k: str(Path(p).resolve().relative_to(directory.resolve())) for k, p in artifacts.items()}


def _read_config(path: Optional[str]) -> dict[str, Any]:
    """Load a flat config file and reject keys neither command knows."""
    mapping = load_config(path)
    known = set(_DENOISER_KEYS) | set(_TRAIN_KEYS)
    for key in mapping:
        if str(key).replace("-", "_") not in known:
            raise ConfigError(f"unknown config key '{key}' in {path}")
    return mapping


def _load_denoiser_checked(path: Path) -> tuple[ToyDenoiser, NoiseSchedule]:
    if not path.exists():
        raise ConfigError(f"denoiser checkpoint not found: {path} (run train-denoiser first)")
    denoiser, schedule, _ = load_denoiser(path)
    return denoiser, schedule


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train_denoiser(args: argparse.Namespace) -> int:
    mapping = _read_config(args.config)
    config = apply_mapping(DenoiserConfig(), mapping, ignore=[k for k in _TRAIN_KEYS if k not in _DENOISER_KEYS])
    overrides: dict[str, Any] = {}
    if args.steps is not None:
        overrides["denoiser_steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = dataclasses.replace(config, **overrides)

    output = Path(args.output) if args.output else output_root() / DEFAULT_DENOISER
    output.parent.mkdir(parents=True, exist_ok=True)
    # one manifest per checkpoint: <stem>_manifest.yaml
    manifest_name = f"{output.stem}_{MANIFEST_NAME}"
    config_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(config).items()}
    manifest = RunManifest.start(args, seed=config.seed, config=config_dict)
    loss_log = output.with_name(output.stem + "_loss.jsonl")
    artifacts: dict[str, Path] = {}

    print_rule("Train denoiser")
    print_info(f"classes: {', '.join(config.corpus_classes)} · steps: {config.denoiser_steps} · seed: {config.seed}")
    try:
        with RecordLog(loss_log, "w") as log:
            artifacts["loss_log"] = loss_log
            denoiser, schedule, report, _ = train_from_config(config, log, show_progress=not args.quiet)
        extra = {
            "initial_loss": report.initial_loss,
            "heldout_loss": report.heldout_loss,
            "eval_seed": report.eval_seed,
            "steps": report.steps,
            "config": config_dict,
        }
        artifacts["checkpoint"] = save_denoiser(denoiser, schedule, output, extra)
    except (Exception, KeyboardInterrupt) as e:
        manifest.fail(output.parent, e, artifacts, manifest_name)
        raise

    manifest.status = "complete"
    manifest.artifacts = _relative(artifacts, output.parent)
    manifest.stages = {"denoiser": {k: v for k, v in extra.items() if k != "config"}}
    manifest.write(output.parent, manifest_name)
    print_success(
        f"Held-out loss {report.initial_loss:.4f} → {report.heldout_loss:.4f}; saved [cyan]{output}[/cyan]"
    )
    return 0


def _generate_config(args: argparse.Namespace) -> TrainConfig:
    base = TrainConfig.preset(args.preset)
    mapping = _read_config(args.config)
    config = TrainConfig.from_mapping(
        mapping, base, ignore=tuple(k for k in _DENOISER_KEYS if k not in _TRAIN_KEYS)
    )
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations_per_stage"] = args.iterations
    if args.stylized:
        overrides["mode"] = "stylized"
    elif args.fine_reference:
        raise ConfigError("--fine-reference needs --stylized")
    return dataclasses.replace(config, **overrides)


def cmd_generate(args: argparse.Namespace) -> int:
    config = _generate_config(args)
    denoiser_path = Path(args.denoiser) if args.denoiser else output_root() / DEFAULT_DENOISER
    denoiser, schedule = _load_denoiser_checked(denoiser_path)
    text_code = normalize_code(args.text)
    denoiser.text_index(text_code)

    reference = fine_reference = None
    inputs = {"denoiser": str(denoiser_path)}
    if args.stylized:
        reference = load_reference_image(args.stylized, config.prompt_resolution)
        inputs["stylized"] = str(args.stylized)
    if args.fine_reference:
        fine_reference = load_reference_image(args.fine_reference, config.prompt_resolution)
        inputs["fine_reference"] = str(args.fine_reference)

    slug = text_code.replace(" ", "_")
    out_dir = Path(args.output) if args.output else output_root() / f"{slug}-{config.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    colors = {code: rgb for code, (rgb, _) in DEFAULT_CLASSES.items() if normalize_code(code) in denoiser.vocabulary}
    deps = PipelineDeps(
        denoiser=denoiser,
        schedule=schedule,
        reward_model=ToyRewardModel(colors),
        extractor=ToyFeatureExtractor(seed=derive_seed(config.seed, "extractor")),
    )
    preset_overrides = TrainConfig.preset_overrides(args.preset)
    manifest = RunManifest.start(
        args,
        seed=config.seed,
        config=config.as_dict(),
        inputs=inputs,
        text_code=text_code,
        mode=config.mode,
        preset=args.preset,
        preset_overrides=preset_overrides,
    )
    print_rule(f"Generate '{text_code}' ({config.mode})")
    if preset_overrides:
        shown = ", ".join(f"{k}={v}" for k, v in preset_overrides.items())
        print_info(f"preset '{args.preset}' overrides: {shown}")
    artifacts: dict[str, Path] = {}
    try:
        result = run_pipeline(
            text_code,
            config,
            deps,
            reference_image=reference,
            fine_reference=fine_reference,
            output_dir=out_dir,
            artifacts=artifacts,
            show_progress=not args.quiet,
        )
    except (Exception, KeyboardInterrupt) as e:
        manifest.fail(out_dir, e, artifacts)
        raise

    manifest.status = "complete"
    manifest.artifacts = _relative(result.artifacts, out_dir)
    manifest.stages = {name: report.summary() for name, report in result.reports.items()}
    manifest.timing.update({name: round(r.wall_time, 3) for name, r in result.reports.items()})
    manifest.bank_source = result.bank.source.value
    weights = [rec.hf_weight for r in result.reports.values() for rec in r.records]
    manifest.hf_weight_max = max(weights) if weights else 0.0
    path = manifest.write(out_dir)
    if result.mesh.is_empty:
        print_info("Density never crossed the iso level; no mesh written")
    print_success(f"Run complete; manifest at [cyan]{path}[/cyan]")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"field checkpoint not found: {ckpt}")
    field3d = load_field(ckpt)
    out_dir = Path(args.output) if args.output else ckpt.parent / f"{ckpt.stem}_turntable"
    settings = {
        "views": args.views,
        "resolution": args.resolution,
        "elevation": args.elevation,
        "radius": args.radius,
        "samples": args.samples,
    }
    try:
        frames = render_turntable(
            field3d, args.views, args.resolution, args.elevation, args.radius, args.samples
        )
    except ValueError as e:
        raise ConfigError(f"invalid turntable camera: {e}") from e
    path = export_turntable(frames, out_dir, args.elevation, args.radius)
    manifest = RunManifest.start(args, config=settings, inputs={"checkpoint": str(ckpt)})
    manifest.status = "complete"
    manifest.artifacts = {"turntable": path.name}
    manifest.write(out_dir)
    print_success(f"Rendered {len(frames)} views to [cyan]{out_dir}[/cyan] ({path.name})")
    return 0


def cmd_eval_invariants(args: argparse.Namespace) -> int:
    print_rule("Invariants")
    checks = run_invariants(args.seed)
    print_report(checks)
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print_error(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 2
    print_success(f"All {len(checks)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    """Parse CLI arguments."""
    parser = argparse.ArgumentParser(
        prog="vp-distill",
        description="Text-to-3D by score distillation with visual prompts (desk scale).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--quiet", action="store_true", help="Hide the header and progress bars.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-denoiser", help="Train the toy conditional denoiser.")
    p.add_argument("--config", help="Flat YAML config file.")
    p.add_argument("--steps", type=int, help="Training steps (overrides denoiser_steps).")
    p.add_argument("--output", help=f"Checkpoint path (default: <output root>/{DEFAULT_DENOISER}).")
    p.add_argument("--seed", type=int, help="Master seed.")
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("generate", help="Run the full text -> 3D pipeline.")
    p.add_argument("text", help="Text code, e.g. 'red sphere'.")
    p.add_argument("--config", help="Flat YAML config file.")
    p.add_argument("--stylized", metavar="IMAGE", help="Reference image; switches to stylized mode.")
    p.add_argument("--fine-reference", metavar="IMAGE", help="Second reference for the fine stage.")
    p.add_argument("--seed", type=int, help="Master seed.")
    p.add_argument("--preset", choices=PRESETS, default="desk", help="Size preset (full is an alias of paper).")
    p.add_argument("--denoiser", help="Denoiser checkpoint.")
    p.add_argument("--output", help="Output directory.")
    p.add_argument("--iterations", type=int, help="Iterations per stage.")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="Render turntable frames of a field checkpoint.")
    p.add_argument("checkpoint")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--elevation", type=float, default=15.0)
    p.add_argument("--radius", type=float, default=1.6)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--output", help="Output directory.")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval-invariants", help="Run the property suite and print a table.")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_invariants)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    """Dispatch a sub-command and map failures to exit codes (1 config, 2 runtime)."""
    args = _parse_args(argv)
    if not args.quiet:
        print_header()
    try:
        return args.func(args)
    except ConfigError as e:
        print_error(str(e))
        return e.exit_code
    except (CheckpointError, DistillError) as e:
        print_error(str(e))
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n  [dim]Interrupted by user.[/dim]")
        return 130
    except Exception as e:
        print_error(f"Unexpected {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
