"""Volume renderer: analytic oracles, conservation, gradients and cameras."""

import math

import pytest
import torch
import yaml
from PIL import Image

from src.errors import ConfigError
from src.field3d import VoxelField, init_coarse
from src.renderer import (
    TURNTABLE_MANIFEST,
    CameraPose,
    CameraRanges,
    export_turntable,
    render,
    render_turntable,
    sample_camera,
    turntable_cameras,
)


def _constant_field(density, color=(0.5, 0.5, 0.5), resolution=4, dtype=torch.float64):
    n = resolution + 1
    d = torch.full((n, n, n), float(density), dtype=dtype)
    c = torch.tensor(color, dtype=dtype).reshape(3, 1, 1, 1).expand(3, n, n, n)
    return VoxelField.from_grids(d, c)


def _random_field(resolution=8, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    field = VoxelField(resolution, dtype=dtype)
    with torch.no_grad():
        field.density_logits.copy_(torch.randn(field.density_logits.shape, generator=g, dtype=dtype) + 1.0)
        field.color_logits.copy_(torch.randn(field.color_logits.shape, generator=g, dtype=dtype))
    return field


def test_empty_field_renders_background():
    field = VoxelField(8)
    with torch.no_grad():
        field.density_logits.fill_(-60.0)
    background = torch.tensor([0.2, 0.4, 0.6])
    out = render(field, CameraPose(30.0, 10.0), 8, 16, background=background)
    assert out.alpha.max() < 1e-6
    assert torch.allclose(out.rgb, background.expand(8, 8, 3), atol=1e-6)


def test_homogeneous_cube_matches_beer_lambert():
    sigma = 3.0
    field = _constant_field(sigma, color=(0.8, 0.3, 0.1))
    out = render(field, CameraPose(0.0, 0.0, 1.6), 17, 256)
    expected_alpha = 1.0 - math.exp(-sigma * 1.0)
    assert out.alpha[8, 8].item() == pytest.approx(expected_alpha, abs=1e-3)
    expected_rgb = torch.tensor([0.8, 0.3, 0.1], dtype=torch.float64) * expected_alpha + (1.0 - expected_alpha)
    assert torch.allclose(out.rgb[8, 8], expected_rgb, atol=1e-3)


def test_weights_and_background_are_conserved():
    out = render(_random_field(), CameraPose(47.0, 20.0, 1.7), 12, 32)
    total = out.weights.sum(dim=-1) + out.background_weight
    assert (total - 1.0).abs().max() < 1e-6
    assert (out.weights >= 0).all()


def test_render_converges_with_more_samples():
    field = init_coarse(16)
    cam = CameraPose(20.0, 15.0)
    reference = render(field, cam, 16, 512).rgb
    coarse_err = (render(field, cam, 16, 16).rgb - reference).abs().max()
    fine_err = (render(field, cam, 16, 128).rgb - reference).abs().max()
    assert fine_err < 1e-2
    assert fine_err <= coarse_err


def test_homogeneous_render_ignores_sample_count():
    field = _constant_field(2.0, color=(0.2, 0.7, 0.4))
    cam = CameraPose(25.0, 10.0)
    a = render(field, cam, 8, 16).rgb
    b = render(field, cam, 8, 32).rgb
    assert (a - b).abs().max() < 1e-3


def test_opaque_red_cube():
    field = _constant_field(200.0, color=(1.0, 0.0, 0.0))
    out = render(field, CameraPose(0.0), 9, 64)
    assert torch.allclose(out.rgb[4, 4], torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64), atol=1e-3)
    assert out.alpha[4, 4].item() == pytest.approx(1.0, abs=1e-6)


def test_front_view_puts_positive_x_on_the_right():
    resolution = 8
    n = resolution + 1
    density = torch.full((n, n, n), 200.0, dtype=torch.float64)
    color = torch.zeros(3, n, n, n, dtype=torch.float64)
    color[0, :, :, n // 2 + 1 :] = 1.0
    color[2, :, :, : n // 2] = 1.0
    field = VoxelField.from_grids(density, color)

    front = render(field, CameraPose(0.0), 16, 64).rgb
    assert front[8, 14, 0] > 0.9 and front[8, 1, 2] > 0.9
    back = render(field, CameraPose(180.0), 16, 64).rgb
    assert back[8, 1, 0] > 0.9 and back[8, 14, 2] > 0.9


def test_gradient_matches_finite_differences():
    field = _random_field(8, seed=2)
    cam = CameraPose(33.0, 12.0, 1.6)
    g = torch.Generator().manual_seed(5)
    probe = torch.rand((16, 16, 3), generator=g, dtype=torch.float64)

    def loss():
        return (render(field, cam, 16, 32).rgb * probe).sum()

    grads = torch.autograd.grad(loss(), [field.density_logits, field.color_logits])
    eps = 1e-6
    for param, grad in zip([field.density_logits, field.color_logits], grads):
        flat, gflat = param.data.view(-1), grad.view(-1)
        candidates = torch.nonzero(gflat.abs() > 1e-3).flatten()
        assert len(candidates) >= 5
        picks = candidates[torch.randperm(len(candidates), generator=g)[:5]]
        for idx in picks.tolist():
            old = flat[idx].item()
            flat[idx] = old + eps
            up = loss().item()
            flat[idx] = old - eps
            down = loss().item()
            flat[idx] = old
            numeric = (up - down) / (2 * eps)
            analytic = gflat[idx].item()
            assert abs(numeric - analytic) <= 1e-3 * abs(analytic) + 1e-6, (idx, numeric, analytic)


def test_jitter_is_seeded():
    field = init_coarse(8)
    cam = CameraPose(10.0)
    a = render(field, cam, 8, 16, jitter_rng=torch.Generator().manual_seed(0)).rgb
    b = render(field, cam, 8, 16, jitter_rng=torch.Generator().manual_seed(0)).rgb
    c = render(field, cam, 8, 16).rgb
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_degenerate_inputs():
    field = init_coarse(8)
    with pytest.raises(ValueError):
        render(field, CameraPose(0.0, 0.0, 0.8), 8, 16)
    with pytest.raises(ConfigError):
        render(field, CameraPose(0.0), 8, 1)
    with pytest.raises(ValueError):
        CameraPose(0.0, elevation=75.0)
    with pytest.raises(ValueError):
        CameraPose(0.0, radius=0.0)


def test_camera_position_convention():
    assert torch.allclose(CameraPose(0.0).position(), torch.tensor([0.0, 0.0, 1.6]), atol=1e-6)
    assert torch.allclose(CameraPose(90.0).position(), torch.tensor([1.6, 0.0, 0.0]), atol=1e-6)
    assert torch.allclose(CameraPose(0.0, 30.0, 2.0).position()[1], torch.tensor(1.0), atol=1e-6)
    assert CameraPose(-90.0).azimuth == 270.0


def test_sample_camera_ranges_and_statistics():
    ranges = CameraRanges()
    g = torch.Generator().manual_seed(0)
    cams = [sample_camera(g, ranges) for _ in range(2000)]
    az = torch.tensor([c.azimuth for c in cams], dtype=torch.float64)
    assert all(-10.0 <= c.elevation <= 45.0 for c in cams)
    assert all(1.5 <= c.radius <= 1.8 for c in cams)
    se = 360.0 / math.sqrt(12.0) / math.sqrt(len(cams))
    assert abs(az.mean().item() - 180.0) < 3 * se

    g1, g2 = torch.Generator().manual_seed(9), torch.Generator().manual_seed(9)
    assert [sample_camera(g1) for _ in range(5)] == [sample_camera(g2) for _ in range(5)]
    with pytest.raises(ConfigError):
        CameraRanges(elevation=(20.0, 10.0))


def test_turntable_cameras():
    assert [c.azimuth for c in turntable_cameras(4)] == [0.0, 90.0, 180.0, 270.0]
    assert all(c.elevation == 15.0 for c in turntable_cameras(3))
    with pytest.raises(ConfigError):
        turntable_cameras(0)


def test_export_turntable(tmp_path):
    frames = render_turntable(init_coarse(8), 2, resolution=8, n_samples=8)
    path = export_turntable(frames, tmp_path / "tt")
    assert path.name == TURNTABLE_MANIFEST
    manifest = yaml.safe_load(path.read_text())
    assert manifest["n_views"] == 2
    assert [f["azimuth"] for f in manifest["frames"]] == [0.0, 180.0]
    for entry in manifest["frames"]:
        with Image.open(tmp_path / "tt" / entry["file"]) as img:
            assert img.mode == "RGB"
            assert img.size == (8, 8)
