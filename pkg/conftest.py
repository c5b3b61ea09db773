"""Shared fixtures: one small trained toy denoiser per test session."""

from __future__ import annotations

import pytest
import torch

from src.corpus import make_toy_corpus
from src.denoiser import ToyDenoiser, train_toy_denoiser
from src.schedule import make_schedule


@pytest.fixture(scope="session")
def schedule():
    return make_schedule("cosine")


@pytest.fixture(scope="session")
def toy_corpus():
    return make_toy_corpus(n_per_class=96, resolution=16, rng=torch.Generator().manual_seed(0))


@pytest.fixture(scope="session")
def trained(toy_corpus, schedule):
    """(denoiser, report, held-out corpus) from a short training run on 16x16 shapes."""
    train, heldout = toy_corpus.split(0.1)
    denoiser, report = train_toy_denoiser(
        train,
        schedule,
        steps=600,
        rng=torch.Generator().manual_seed(1),
        heldout=heldout,
        batch_size=32,
        embed_dim=16,
        channels=24,
    )
    return denoiser, report, heldout


@pytest.fixture
def untrained_denoiser():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        return ToyDenoiser(["red sphere", "blue cube"], embed_dim=8, channels=8).eval()


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)
