"""Property suite behind ``vp-distill eval-invariants``.

Every check runs on small randomly initialized models: the algebraic
properties hold for any denoiser, trained or not.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import torch
from rich import box
from rich.table import Table

from src.corpus import DEFAULT_CLASSES
from src.denoiser import (
    GuidanceConfig,
    Modality,
    PromptEmbedding,
    ToyDenoiser,
    cfg_predict,
    vp_cfg_predict,
)
from src.field3d import VoxelField, init_coarse, upsample
from src.guidance import sds_grad, vp_sds_grad
from src.renderer import CameraPose, render, sample_camera
from src.rewards import PSI_MAPS, ToyFeatureExtractor, ToyRewardModel, hf_reward_loss, vc_reward_loss
from src.sampler import IdentitySynthesizer, SectorBoundaries, ViewSector, build_prompt_bank
from src.schedule import make_schedule
from src.trainer import Stage, TrainConfig, lambda2_at
from src.utils import console, make_generator


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _toy_denoiser(seed: int) -> ToyDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyDenoiser(["red sphere", "blue cube"], embed_dim=8, channels=8).eval()


def check_schedule_identity(seed: int) -> tuple[bool, str]:
    worst = 0.0
    for kind in ("cosine", "linear-variance"):
        sched = make_schedule(kind)
        t = torch.linspace(sched.t_min, sched.t_max, 1000, dtype=torch.float64)
        err = (sched.alpha(t) ** 2 + sched.sigma(t) ** 2 - 1.0).abs().max().item()
        worst = max(worst, err)
    return worst < 1e-6, f"max |a^2+s^2-1| = {worst:.2e}"


@torch.no_grad()
def check_cfg_algebra(seed: int) -> tuple[bool, str]:
    den = _toy_denoiser(seed)
    g = make_generator(seed, "cfg")
    z_y = den.embed_text("red sphere")
    null_y = PromptEmbedding.null(Modality.TEXT, den.embed_dim)
    null_v = PromptEmbedding.null(Modality.VISUAL, den.embed_dim)
    worst = 0.0
    for _ in range(100):
        x = torch.randn((3, 8, 8), generator=g)
        t = 0.02 + 0.96 * float(torch.rand((), generator=g))
        uncond = den.predict(x, t, null_y, null_v)
        cond = den.predict(x, t, z_y, null_v)
        worst = max(
            worst,
            (cfg_predict(den, x, t, z_y, 0.0) - uncond).abs().max().item(),
            (cfg_predict(den, x, t, z_y, 1.0) - cond).abs().max().item(),
        )
    return worst < 1e-6, f"max deviation {worst:.2e} over 100 inputs"


def check_vp_reduction(seed: int, trials: int = 50) -> tuple[bool, str]:
    den = _toy_denoiser(seed)
    sched = make_schedule()
    z_y = den.embed_text("red sphere")
    g = make_generator(seed, "vp-reduction")
    front = torch.rand((3, 16, 16), generator=g)
    bank = build_prompt_bank(front, IdentitySynthesizer(), den.embed_visual)
    config = GuidanceConfig(s=7.5, lambda_v=0.0)
    worst = 0.0
    for trial in range(trials):
        field = init_coarse(8, rng=make_generator(seed, "field", trial))
        camera = sample_camera(make_generator(seed, "camera", trial))
        with torch.no_grad():
            x = torch.randn((3, 16, 16), generator=g)
            a = vp_cfg_predict(den, x, 0.5, z_y, bank.front.embedding, config)
            b = cfg_predict(den, x, 0.5, z_y, config.s)
            worst = max(worst, (a - b).abs().max().item())
        grads_vp, _ = vp_sds_grad(
            field, camera, den, sched, z_y, bank, config, make_generator(seed, "step", trial), 16, 16
        )
        grads, _ = sds_grad(field, camera, den, sched, z_y, config.s, make_generator(seed, "step", trial), 16, 16)
        for name in grads:
            worst = max(worst, (grads_vp[name] - grads[name]).abs().max().item())
    return worst < 1e-6, f"max deviation {worst:.2e} over {trials} trials"


@torch.no_grad()
def check_render_oracle(seed: int) -> tuple[bool, str]:
    sigma0 = 3.0
    field = VoxelField.from_grids(torch.full((9, 9, 9), sigma0, dtype=torch.float64))
    out = render(field, CameraPose(0.0, 0.0, 1.6), 17, 256)
    alpha = out.alpha[8, 8].item()
    expected = 1.0 - math.exp(-sigma0 * 1.0)
    conservation = (out.weights.sum(-1) + out.background_weight - 1.0).abs().max().item()
    ok = abs(alpha - expected) < 1e-3 and conservation < 1e-6
    return ok, f"alpha {alpha:.5f} vs {expected:.5f}; conservation {conservation:.1e}"


def check_view_routing(seed: int) -> tuple[bool, str]:
    expected = {
        0.0: ViewSector.FRONT, 45.0: ViewSector.RIGHT, 90.0: ViewSector.RIGHT,
        135.0: ViewSector.BACK, 180.0: ViewSector.BACK, 225.0: ViewSector.LEFT,
        270.0: ViewSector.LEFT, 315.0: ViewSector.FRONT, 359.9: ViewSector.FRONT,
    }
    bounds = SectorBoundaries()
    wrong = [az for az, sector in expected.items() if bounds.sector(az) is not sector]
    return not wrong, "all azimuths routed" if not wrong else f"misrouted: {wrong}"


def check_lambda_schedules(seed: int) -> tuple[bool, str]:
    cfg = TrainConfig.desk()
    values = (lambda2_at(0, 100, cfg), lambda2_at(50, 100, cfg), lambda2_at(100, 100, cfg))
    ok = (
        all(math.isclose(v, e, abs_tol=1e-12) for v, e in zip(values, (0.001, 0.0055, 0.01)))
        and cfg.lambda1(Stage.COARSE) == 0.1
        and cfg.lambda1(Stage.FINE) == 0.01
    )
    return ok, "lambda2 = " + ", ".join(f"{v:g}" for v in values)


@torch.no_grad()
def check_stage_transfer(seed: int) -> tuple[bool, str]:
    coarse = init_coarse(8, rng=make_generator(seed, "transfer"))
    fine = upsample(coarse, 16)
    camera = CameraPose(30.0, 15.0, 1.6)
    err = (render(coarse, camera, 32, 64).rgb - render(fine, camera, 32, 64).rgb).abs().mean().item()
    return err < 0.02, f"mean abs pixel error {err:.2e}"


def check_gradient_flow(seed: int) -> tuple[bool, str]:
    """Render, distillation and reward losses all reach both field grids."""
    den = _toy_denoiser(seed)
    sched = make_schedule()
    g = make_generator(seed, "gradient-flow")
    field = VoxelField(8, dtype=torch.float64)
    with torch.no_grad():
        field.density_logits.copy_(init_coarse(8, rng=g).density_logits)
        field.color_logits.copy_(torch.randn(field.color_logits.shape, generator=g, dtype=torch.float64))
    camera = CameraPose(20.0, 15.0, 1.6)
    problems = []

    # render: autograd against central differences on the largest entry
    out = render(field, camera, 8, 16)
    grads = torch.autograd.grad(out.rgb.sum(), list(field.parameters()))
    for (name, param), grad in zip(field.named_parameters(), grads):
        if not torch.isfinite(grad).all() or grad.abs().max() == 0:
            problems.append(f"render -> {name}")
            continue
        idx = int(grad.abs().argmax())
        flat = param.data.view(-1)
        old, h = flat[idx].item(), 1e-6
        with torch.no_grad():
            flat[idx] = old + h
            up = render(field, camera, 8, 16).rgb.sum().item()
            flat[idx] = old - h
            down = render(field, camera, 8, 16).rgb.sum().item()
            flat[idx] = old
        numeric = (up - down) / (2 * h)
        if abs(numeric - grad.view(-1)[idx].item()) > 1e-4 * abs(numeric) + 1e-8:
            problems.append(f"render -> {name} finite differences")

    # distillation and rewards, in float32 like training
    field32 = init_coarse(8, rng=make_generator(seed, "gradient-flow", "f32"))
    front = torch.rand((3, 16, 16), generator=g)
    bank = build_prompt_bank(front, IdentitySynthesizer(), den.embed_visual)
    z_y = den.embed_text("red sphere")
    grads_vp, _ = vp_sds_grad(
        field32, camera, den, sched, z_y, bank, GuidanceConfig(7.5, 0.5), make_generator(seed, "step"), 16, 16
    )
    for name, grad in grads_vp.items():
        if not torch.isfinite(grad).all() or grad.abs().max() == 0:
            problems.append(f"distillation -> {name}")

    out = render(field32, camera, 16, 16)
    reward_model = ToyRewardModel({code: rgb for code, (rgb, _) in DEFAULT_CLASSES.items()})
    hf, _ = hf_reward_loss(out.image, "red sphere", reward_model, alpha=out.alpha)
    vc = vc_reward_loss(out.image, bank, ToyFeatureExtractor(seed=seed, size=32))
    for label, loss in (("alignment", hf), ("consistency", vc)):
        grads = torch.autograd.grad(loss, list(field32.parameters()), retain_graph=True, allow_unused=True)
        if any(gr is None or not torch.isfinite(gr).all() for gr in grads) or all(gr.abs().max() == 0 for gr in grads):
            problems.append(f"{label} -> field")
    return not problems, "gradients reach the field" if not problems else "broken: " + ", ".join(problems)


def check_psi_monotone(seed: int) -> tuple[bool, str]:
    r = torch.linspace(-10.0, 10.0, 100, dtype=torch.float64)
    bad = [name for name, psi in PSI_MAPS.items() if (psi(r)[1:] > psi(r)[:-1]).any()]
    return not bad, "all maps non-increasing" if not bad else f"increasing: {bad}"


CHECKS: dict[str, Callable[[int], tuple[bool, str]]] = {
    "schedule identity": check_schedule_identity,
    "CFG algebra": check_cfg_algebra,
    "VP-SDS reduces to SDS": check_vp_reduction,
    "render oracle": check_render_oracle,
    "view routing": check_view_routing,
    "lambda schedules": check_lambda_schedules,
    "stage transfer": check_stage_transfer,
    "gradient flow": check_gradient_flow,
    "psi monotone": check_psi_monotone,
}


def run_invariants(seed: int = 0) -> list[Check]:
    results = []
    for name, fn in CHECKS.items():
        started = time.monotonic()
        try:
            passed, detail = fn(seed)
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        results.append(Check(name, passed, detail, time.monotonic() - started))
    return results


def print_report(checks: list[Check]) -> None:
    table = Table(box=box.ROUNDED, show_lines=False)
    table.add_column("Check", style="bold")
    table.add_column("Result", justify="center")
    table.add_column("Detail", style="dim")
    table.add_column("Time", justify="right")
    for c in checks:
        result = "[green]pass[/green]" if c.passed else "[red]FAIL[/red]"
        table.add_row(c.name, result, c.detail, f"{c.seconds:.2f}s")
    console.print(table)
