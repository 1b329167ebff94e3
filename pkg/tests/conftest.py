"""Conftest - small model fixtures and the --run-slow switch."""
import numpy as np
import pytest
import torch

from rcnf_monitor.flow import FlowConfig, RCNFlow
from rcnf_monitor.task_codec import optimize_codebook


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow", action="store_true", default=False,
        help="run long acceptance checks (full benchmark, latency budget)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY = dict(T=4, N=2, K=2, joints=2, d_model=8, heads=2, gru_layers=1, mlp_hidden=16)
SMALL = dict(T=8, N=4, K=2, joints=3, d_model=16, heads=2, gru_layers=1, mlp_hidden=16)


def make_codebook(T, M=3, seed=0):
    return optimize_codebook(M, T, 5.0, seed, [f"task_{i:02d}" for i in range(M)], iterations=200)


def random_batch(config, batch, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.5, 0.1, size=(batch, config.T, config.N, 2))
    s = rng.normal(0.0, 1.0, size=(batch, config.T, config.state_dim))
    return x, s


def make_model(overrides=None, *, seed=0, M=3, randomize=True, scale=0.05):
    """Flow with initialized ActNorm and non-trivial coupling heads."""
    config = FlowConfig(**{**TINY, **(overrides or {})})
    model = RCNFlow(config, make_codebook(config.T, M), seed=seed)
    x, s = random_batch(config, 16, seed)
    task_ids = [model.codebook.task_ids[i % M] for i in range(16)]
    model.initialize_actnorm(x, s, task_ids)
    if randomize:
        generator = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for step in model.steps:
                head = step.coupling.head
                head.weight.copy_(torch.randn(head.weight.shape, generator=generator, dtype=torch.float64) * scale)
                head.bias.copy_(torch.randn(head.bias.shape, generator=generator, dtype=torch.float64) * scale)
    model.eval()
    return model


@pytest.fixture
def tiny_model():
    return make_model()


@pytest.fixture
def small_model():
    return make_model(SMALL)


@pytest.fixture
def model_factory():
    return make_model


@pytest.fixture
def batch_factory():
    return random_batch


@pytest.fixture
def codebook_factory():
    return make_codebook
