"""Human-feedback reward, psi maps and the visual-consistency loss."""

import math

import pytest
import torch

from src.corpus import DEFAULT_CLASSES
from src.denoiser import Modality, PromptEmbedding
from src.errors import ConfigError
from src.rewards import (
    PSI_MAPS,
    FeatureExtractor,
    RewardConfig,
    RewardModel,
    ToyFeatureExtractor,
    ToyRewardModel,
    feature_distance,
    hf_reward_loss,
    vc_reward_loss,
)
from src.sampler import IdentitySynthesizer, build_prompt_bank

COLORS = {code: rgb for code, (rgb, _) in DEFAULT_CLASSES.items()}


def _square(color, size=16, inner=8, background=(1.0, 1.0, 1.0), dtype=torch.float32):
    img = torch.tensor(background, dtype=dtype).reshape(3, 1, 1).repeat(1, size, size)
    lo = (size - inner) // 2
    img[:, lo : lo + inner, lo : lo + inner] = torch.tensor(color, dtype=dtype).reshape(3, 1, 1)
    return img


def test_protocols_are_satisfied():
    assert isinstance(ToyRewardModel(COLORS), RewardModel)
    assert isinstance(ToyFeatureExtractor(), FeatureExtractor)


@pytest.mark.parametrize("name", sorted(PSI_MAPS))
def test_psi_is_non_increasing(name):
    r = torch.linspace(-20.0, 20.0, 401, dtype=torch.float64)
    loss = PSI_MAPS[name](r)
    assert (loss[1:] <= loss[:-1]).all()


def test_softplus_psi_asymptotics():
    psi = PSI_MAPS["softplus"]
    assert psi(torch.tensor(0.0)).item() == pytest.approx(math.log(2.0))
    assert psi(torch.tensor(30.0)).item() < 1e-12
    assert psi(torch.tensor(-30.0)).item() == pytest.approx(30.0, rel=1e-9)


def test_matching_color_scores_near_zero():
    model = ToyRewardModel(COLORS)
    red = COLORS["red sphere"]
    image = _square(red)
    assert model.score(image, "red sphere").item() == pytest.approx(0.0, abs=1e-4)
    loss, r = hf_reward_loss(image, "red sphere", model)
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-4)
    assert model.score(image, "blue cube") < r


def test_alpha_mask_overrides_border_heuristic():
    model = ToyRewardModel(COLORS)
    image = torch.zeros(3, 8, 8)
    image[0] = 1.0
    alpha = torch.ones(8, 8)
    # uniform image: the border heuristic sees no object, alpha sees all of it
    assert model.score(image, "red sphere", alpha).item() == pytest.approx(
        -((torch.tensor(COLORS["red sphere"]) - torch.tensor([1.0, 0.0, 0.0])) ** 2).sum().item(), abs=1e-5
    )


def test_unknown_text_code_rejected():
    model = ToyRewardModel(COLORS)
    with pytest.raises(ConfigError, match="red sphere"):
        model.score(torch.zeros(3, 8, 8), "green cone")
    with pytest.raises(ConfigError):
        ToyRewardModel({})
    with pytest.raises(ValueError):
        model.score(torch.zeros(8, 8), "red sphere")


def test_reward_ascent_improves_steadily():
    model = ToyRewardModel(COLORS)
    alpha = _square((1.0, 1.0, 1.0), background=(0.0, 0.0, 0.0))[0]
    param = torch.zeros(3, 16, 16, requires_grad=True)
    opt = torch.optim.SGD([param], lr=50.0)
    rewards = []
    for _ in range(51):
        opt.zero_grad()
        loss, r = hf_reward_loss(torch.sigmoid(param), "blue cube", model, alpha=alpha)
        rewards.append(r.item())
        loss.backward()
        opt.step()
    improved = sum(b > a for a, b in zip(rewards, rewards[1:]))
    assert improved >= 45, rewards
    assert rewards[-1] > rewards[0]


def test_hf_gradient_matches_finite_differences():
    model = ToyRewardModel(COLORS)
    image = _square((0.6, 0.3, 0.2), dtype=torch.float64)
    image += 0.05 * torch.rand(image.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    image.requires_grad_(True)
    loss, _ = hf_reward_loss(image, "red sphere", model)
    (grad,) = torch.autograd.grad(loss, image)

    flat = image.detach().clone().view(-1)
    picks = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(1))[:20]
    h = 1e-6
    for idx in picks.tolist():
        up, down = flat.clone(), flat.clone()
        up[idx] += h
        down[idx] -= h
        f_up = hf_reward_loss(up.view(image.shape), "red sphere", model)[0].item()
        f_down = hf_reward_loss(down.view(image.shape), "red sphere", model)[0].item()
        numeric = (f_up - f_down) / (2 * h)
        assert numeric == pytest.approx(grad.view(-1)[idx].item(), rel=1e-3, abs=1e-8)


def test_reward_config():
    cfg = RewardConfig()
    assert cfg.target_viewpoint.azimuth == 0.0
    assert cfg.psi_fn is PSI_MAPS["softplus"]
    with pytest.raises(ConfigError, match="negate"):
        RewardConfig(psi="exp")
    with pytest.raises(ConfigError):
        RewardConfig(vc_every=0)
    with pytest.raises(ConfigError):
        hf_reward_loss(torch.zeros(3, 8, 8), "red sphere", ToyRewardModel(COLORS), psi="exp")


def test_feature_extractor_is_frozen_and_seeded():
    a, b, c = ToyFeatureExtractor(seed=1), ToyFeatureExtractor(seed=1), ToyFeatureExtractor(seed=2)
    assert list(a.parameters()) == []
    image = torch.rand(3, 16, 16, generator=torch.Generator().manual_seed(0))
    assert torch.equal(a.features(image), b.features(image))
    assert not torch.equal(a.features(image), c.features(image))
    assert a.features(image).shape == a.features(torch.rand(3, 64, 64)).shape
    assert a.features(image.double()).dtype == torch.float64


def test_feature_distance_properties():
    ext = ToyFeatureExtractor()
    g = torch.Generator().manual_seed(0)
    x, y = torch.rand(3, 16, 16, generator=g), torch.rand(3, 16, 16, generator=g)
    assert feature_distance(x, x, ext).item() == 0.0
    assert feature_distance(x, y, ext).item() > 0.0
    assert feature_distance(x, y, ext).item() == pytest.approx(feature_distance(y, x, ext).item(), rel=1e-6)


def test_vc_loss_is_zero_at_the_front_prompt():
    front = _square((0.9, 0.1, 0.1))
    bank = build_prompt_bank(
        front, IdentitySynthesizer(), lambda img: PromptEmbedding(torch.zeros(4), Modality.VISUAL)
    )
    ext = ToyFeatureExtractor()
    assert vc_reward_loss(front.clone(), bank, ext).item() == 0.0
    assert vc_reward_loss(_square((0.1, 0.1, 0.9)), bank, ext).item() > 0.0


def test_vc_descent_reaches_the_prompt():
    target = _square((0.9, 0.2, 0.1), background=(0.95, 0.95, 0.95))
    bank = build_prompt_bank(
        target, IdentitySynthesizer(), lambda img: PromptEmbedding(torch.zeros(4), Modality.VISUAL)
    )
    ext = ToyFeatureExtractor()
    image = torch.rand((3, 16, 16), generator=torch.Generator().manual_seed(0)).requires_grad_(True)
    opt = torch.optim.Adam([image], lr=0.01)
    start = vc_reward_loss(image, bank, ext).item()
    for _ in range(200):
        opt.zero_grad()
        loss = vc_reward_loss(image, bank, ext)
        loss.backward()
        opt.step()
    end = vc_reward_loss(image, bank, ext).item()
    assert end <= 0.1 * start, f"{start:.4f} -> {end:.4f}"
