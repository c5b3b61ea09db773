"""Noise schedule identities, timestep sampling and the forward perturbation."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from src.errors import ConfigError
from src.schedule import make_schedule, perturb, sample_timestep


@pytest.mark.parametrize("kind", ["cosine", "linear-variance"])
def test_alpha_sigma_identity(kind):
    sched = make_schedule(kind)
    t = torch.linspace(sched.t_min, sched.t_max, 1000, dtype=torch.float64)
    err = (sched.alpha(t) ** 2 + sched.sigma(t) ** 2 - 1.0).abs().max().item()
    assert err < 1e-6, f"alpha^2 + sigma^2 drifts by {err}"


@pytest.mark.parametrize("kind", ["cosine", "linear-variance"])
def test_monotone_and_nonnegative_weight(kind):
    sched = make_schedule(kind)
    t = torch.linspace(sched.t_min, sched.t_max, 500, dtype=torch.float64)
    assert (sched.alpha(t)[1:] <= sched.alpha(t)[:-1]).all(), "alpha must not increase"
    assert (sched.sigma(t)[1:] >= sched.sigma(t)[:-1]).all(), "sigma must not decrease"
    assert (sched.weight(t) >= 0).all(), "w(t) must be non-negative"


def test_cosine_midpoint():
    sched = make_schedule("cosine")
    assert sched.alpha(0.5) == pytest.approx(math.cos(0.25 * math.pi), abs=1e-9)
    assert sched.sigma(0.5) == pytest.approx(0.70710678, abs=1e-6)


def test_clean_endpoint():
    sched = make_schedule("cosine", t_min=1e-6, t_max=0.5)
    assert sched.alpha(sched.t_min) == pytest.approx(1.0, abs=1e-6)
    assert sched.sigma(sched.t_min) == pytest.approx(0.0, abs=1e-5)


def test_linear_variance_sigma_squared_is_t():
    sched = make_schedule("linear-variance")
    assert sched.sigma(0.3) ** 2 == pytest.approx(0.3)


@pytest.mark.parametrize(
    "t_min,t_max",
    [(0.0, 0.5), (-0.1, 0.5), (0.1, 1.5), (0.6, 0.4), (0.5, 0.5)],
)
def test_invalid_ranges_rejected(t_min, t_max):
    with pytest.raises(ConfigError):
        make_schedule("cosine", t_min, t_max)


def test_unknown_kind_and_weighting_rejected():
    with pytest.raises(ConfigError, match="cosine"):
        make_schedule("quadratic")
    with pytest.raises(ConfigError, match="sigma_squared"):
        make_schedule("cosine", weighting="nope")


def test_weightings():
    assert make_schedule(weighting="uniform").weight(0.3) == pytest.approx(1.0)
    snr = make_schedule(weighting="snr")
    assert snr.weight(0.3) == pytest.approx(snr.alpha(0.3) ** 2)
    custom = make_schedule(weighting=lambda a, s: torch.zeros_like(s))
    assert custom.weight(0.7) == 0.0
    assert custom.describe()["weighting"] == "custom"


def test_sample_timestep_range_and_determinism():
    sched = make_schedule()
    g = torch.Generator().manual_seed(0)
    a, b = sample_timestep(g, sched), sample_timestep(g, sched)
    assert a != b
    for t in (a, b):
        assert sched.t_min <= t <= sched.t_max

    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    assert [sample_timestep(g1, sched) for _ in range(20)] == [sample_timestep(g2, sched) for _ in range(20)]


def test_sample_timestep_mean():
    sched = make_schedule()
    g = torch.Generator().manual_seed(0)
    samples = torch.tensor([sample_timestep(g, sched) for _ in range(10_000)], dtype=torch.float64)
    width = sched.t_max - sched.t_min
    se = width / math.sqrt(12.0) / math.sqrt(len(samples))
    assert abs(samples.mean().item() - (sched.t_min + sched.t_max) / 2) < 3 * se


def test_perturb_endpoints_and_shapes():
    sched = make_schedule("cosine")
    x = torch.rand(3, 8, 8)
    assert torch.equal(perturb(x, 0.3, torch.zeros_like(x), sched), sched.alpha(0.3) * x)
    out = perturb(torch.zeros(3, 4, 4), 0.5, torch.ones(3, 4, 4), sched)
    assert torch.allclose(out, torch.full((3, 4, 4), 0.70710678), atol=1e-6)
    with pytest.raises(ValueError):
        perturb(x, 0.3, torch.zeros(3, 8, 7), sched)


def test_perturb_batched_times():
    sched = make_schedule("cosine")
    x = torch.ones(2, 3, 4, 4)
    t = torch.tensor([0.1, 0.9])
    out = perturb(x, t, torch.zeros_like(x), sched)
    assert out[0, 0, 0, 0].item() == pytest.approx(math.cos(0.05 * math.pi), abs=1e-6)
    assert out[1, 0, 0, 0].item() == pytest.approx(math.cos(0.45 * math.pi), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(
    t=st.floats(0.02, 0.98),
    a=st.floats(-3.0, 3.0),
    b=st.floats(-3.0, 3.0),
)
def test_perturb_is_linear(t, a, b):
    sched = make_schedule("cosine")
    g = torch.Generator().manual_seed(0)
    x = torch.rand((3, 4, 4), generator=g, dtype=torch.float64)
    y = torch.rand((3, 4, 4), generator=g, dtype=torch.float64)
    zero = torch.zeros_like(x)
    lhs = perturb(a * x + b * y, t, zero, sched)
    rhs = a * perturb(x, t, zero, sched) + b * perturb(y, t, zero, sched)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_perturb_variance():
    sched = make_schedule("cosine")
    g = torch.Generator().manual_seed(3)
    x = torch.full((10_000,), 0.4, dtype=torch.float64)
    eps = torch.randn(10_000, generator=g, dtype=torch.float64)
    var = perturb(x, 0.6, eps, sched).var().item()
    assert var == pytest.approx(sched.sigma(0.6) ** 2, rel=0.05)
