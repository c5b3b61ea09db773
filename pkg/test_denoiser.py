"""Toy denoiser, classifier-free guidance algebra and checkpoints."""

import pytest
import torch

from src.corpus import make_toy_corpus
from src.denoiser import (
    DenoiserConfig,
    GuidanceConfig,
    Modality,
    PromptEmbedding,
    ToyDenoiser,
    cfg_predict,
    heldout_loss,
    load_denoiser,
    save_denoiser,
    train_from_config,
    train_toy_denoiser,
    vp_cfg_predict,
)
from src.errors import CheckpointError, ConfigError


def _raw(den, x, t, z_y=None, z_v=None):
    null_y = PromptEmbedding.null(Modality.TEXT, den.embed_dim)
    null_v = PromptEmbedding.null(Modality.VISUAL, den.embed_dim)
    return den.predict(x, t, z_y or null_y, z_v or null_v)


@torch.no_grad()
def test_cfg_algebra(untrained_denoiser, rng):
    den = untrained_denoiser
    z_y = den.embed_text("red sphere")
    for _ in range(100):
        x = torch.randn((3, 8, 8), generator=rng)
        t = 0.02 + 0.96 * torch.rand((), generator=rng).item()
        uncond, cond = _raw(den, x, t), _raw(den, x, t, z_y)
        torch.testing.assert_close(cfg_predict(den, x, t, z_y, 0.0), uncond, atol=1e-6, rtol=0)
        torch.testing.assert_close(cfg_predict(den, x, t, z_y, 1.0), cond, atol=1e-6, rtol=0)
        torch.testing.assert_close(cfg_predict(den, x, t, z_y, 2.0), 2 * cond - uncond, atol=1e-5, rtol=0)


@torch.no_grad()
def test_vp_cfg_reduces_and_recomputes(untrained_denoiser, rng):
    den = untrained_denoiser
    z_y = den.embed_text("blue cube")
    z_v = den.embed_visual(torch.rand((3, 8, 8), generator=rng))
    for _ in range(20):
        x = torch.randn((3, 8, 8), generator=rng)
        t = 0.5
        off = vp_cfg_predict(den, x, t, z_y, z_v, GuidanceConfig(s=7.0, lambda_v=0.0))
        torch.testing.assert_close(off, cfg_predict(den, x, t, z_y, 7.0), atol=1e-6, rtol=0)

        zero_s = vp_cfg_predict(den, x, t, z_y, z_v, GuidanceConfig(s=0.0, lambda_v=0.7))
        torch.testing.assert_close(zero_s, _raw(den, x, t), atol=1e-6, rtol=0)

        full = vp_cfg_predict(den, x, t, z_y, z_v, GuidanceConfig(s=3.0, lambda_v=1.0))
        uncond, cond = _raw(den, x, t), _raw(den, x, t, z_y, z_v)
        torch.testing.assert_close(full, uncond + 3.0 * (cond - uncond), atol=1e-5, rtol=0)


def test_guidance_config_validation():
    with pytest.raises(ConfigError):
        GuidanceConfig(s=-1.0)
    with pytest.raises(ConfigError):
        GuidanceConfig(lambda_v=1.5)


def test_predict_shapes(untrained_denoiser):
    den = untrained_denoiser
    z_y = den.embed_text("red sphere")
    null_v = PromptEmbedding.null(Modality.VISUAL, den.embed_dim)
    batch = torch.zeros(2, 3, 8, 8)
    assert den.predict(batch, 0.3, z_y, null_v).shape == (2, 3, 8, 8)
    with pytest.raises(ValueError):
        den.predict(torch.zeros(1, 8, 8), 0.3, z_y, null_v)
    with pytest.raises(ValueError, match="dimension"):
        den.predict(torch.zeros(3, 8, 8), 0.3, z_y, PromptEmbedding.null(Modality.VISUAL, 5))


def test_embeddings(untrained_denoiser):
    den = untrained_denoiser
    a, b = den.embed_text("red sphere"), den.embed_text("Red_Sphere")
    assert torch.equal(a.vector, b.vector), "text codes are normalized"
    other = den.embed_text("blue cube")
    cos = torch.nn.functional.cosine_similarity(a.vector, other.vector, dim=0).item()
    assert cos < 0.99
    z = den.embed_visual(torch.zeros(3, 16, 16))
    assert torch.isfinite(z.vector).all()
    assert torch.equal(z.vector, den.embed_visual(torch.zeros(3, 16, 16)).vector)


def test_unknown_text_code_names_vocabulary(untrained_denoiser):
    with pytest.raises(ConfigError, match="red sphere, blue cube"):
        untrained_denoiser.embed_text("green cone")


def test_zero_steps_reports_initial_loss(schedule):
    corpus = make_toy_corpus(n_per_class=8, resolution=8)
    den, report = train_toy_denoiser(corpus, schedule, 0, torch.Generator().manual_seed(0), embed_dim=8, channels=8)
    assert report.heldout_loss == report.initial_loss
    assert report.losses == []


def test_training_reduces_heldout_loss(trained):
    _, report, _ = trained
    assert report.heldout_loss < 0.9 * report.initial_loss, (
        f"held-out loss {report.heldout_loss:.3f} vs initial {report.initial_loss:.3f}"
    )
    assert len(report.losses) == report.steps


@torch.no_grad()
def test_both_branches_live_after_training(trained):
    den, _, _ = trained
    x = torch.randn((3, 16, 16), generator=torch.Generator().manual_seed(0))
    z_y = den.embed_text("red sphere")
    z_v = den.embed_visual(torch.rand((3, 16, 16), generator=torch.Generator().manual_seed(1)))
    uncond = _raw(den, x, 0.5)
    cond = _raw(den, x, 0.5, z_y, z_v)
    assert torch.isfinite(uncond).all() and torch.isfinite(cond).all()
    assert not torch.allclose(uncond, cond)


def test_checkpoint_round_trip(trained, schedule, tmp_path):
    den, report, heldout = trained
    path = save_denoiser(den, schedule, tmp_path / "den.pt", {"eval_seed": report.eval_seed})
    loaded, sched, extra = load_denoiser(path)
    assert sched == schedule
    assert loaded.vocabulary == den.vocabulary
    again = heldout_loss(loaded, heldout, sched, seed=extra["eval_seed"])
    assert again == pytest.approx(report.heldout_loss, abs=1e-6)


def test_foreign_checkpoint_rejected(tmp_path):
    torch.save({"format": "something-else", "version": 1}, tmp_path / "x.pt")
    with pytest.raises(CheckpointError):
        load_denoiser(tmp_path / "x.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_denoiser(tmp_path / "junk.pt")


def test_denoiser_config_validation():
    with pytest.raises(ConfigError, match="at least one class"):
        DenoiserConfig(corpus_classes=())
    with pytest.raises(ConfigError, match="green cone"):
        DenoiserConfig(corpus_classes=("green cone",))


def test_train_from_config_is_deterministic():
    cfg = DenoiserConfig(denoiser_steps=5, n_per_class=8, corpus_resolution=8, embed_dim=8, channels=8)
    den_a, _, report_a, _ = train_from_config(cfg)
    den_b, _, report_b, _ = train_from_config(cfg)
    assert report_a.losses == report_b.losses
    for (k, a), (_, b) in zip(den_a.state_dict().items(), den_b.state_dict().items()):
        assert torch.equal(a, b), k


@pytest.mark.slow
def test_full_training_halves_baseline_loss():
    cfg = DenoiserConfig(denoiser_steps=5000)
    _, _, report, _ = train_from_config(cfg)
    # the constant-zero predictor scores 1.0 per element
    assert report.heldout_loss <= 0.5


def test_predict_jvp_matches_finite_differences():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(3)
        den = ToyDenoiser(["red sphere"], embed_dim=8, channels=8).double().eval()
    z_y = den.embed_text("red sphere")
    null_v = PromptEmbedding.null(Modality.VISUAL, 8, torch.float64)
    g = torch.Generator().manual_seed(0)
    x = torch.randn((3, 16, 16), generator=g, dtype=torch.float64)
    v = torch.randn((3, 16, 16), generator=g, dtype=torch.float64)

    def f(inp):
        return den.predict(inp, 0.4, z_y, null_v)

    _, jvp = torch.autograd.functional.jvp(f, x, v)
    h = 1e-6
    numeric = (f(x + h * v) - f(x - h * v)) / (2 * h)
    rel = (numeric - jvp).norm() / jvp.norm()
    assert rel < 1e-3, f"relative JVP error {rel:.2e}"
