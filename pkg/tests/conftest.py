from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acat import attack, scenes, train  # noqa: E402

NET_SEED, NET_EPOCHS, NET_LR = 0, 15, 0.05
PATCH_SEED = 3


def craft(net, beta: float, steps: int = 200, seed: int = PATCH_SEED):
    images = scenes.training_set(500, 40, mode=scenes.DAY)
    return attack.optimize_patch(net, images, attack.AttackConfig(beta=beta, steps=steps), seed=seed)


@pytest.fixture(scope="session")
def toy_net():
    """The trained 64x64 toy segmenter shared by the slower tests."""
    return train.train_toy_model(NET_SEED, NET_EPOCHS, NET_LR)


@pytest.fixture(scope="session")
def patch_b1(toy_net):
    return craft(toy_net, 1.0)


@pytest.fixture(scope="session")
def patch_b08(toy_net):
    return craft(toy_net, 0.8)


@pytest.fixture
def net(toy_net):
    """A fresh copy with zeroed counters, safe to mutate."""
    return toy_net.copy()
