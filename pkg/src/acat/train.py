"""Plain-SGD training of the toy segmentation network on procedural scenes."""
from __future__ import annotations

import logging

import numpy as np

from . import scenes
from .errors import ConfigError, TrainingError
from .net import GradientTape, SlicedNetwork, build_toy_net, cross_entropy

log = logging.getLogger(__name__)


def sgd_epoch(net: SlicedNetwork, data, lr: float, rng: np.random.Generator) -> float:
    order = rng.permutation(len(data))
    params = net.params()
    total = 0.0
    for idx in order:
        image, labels = data[idx]
        tape = GradientTape(net)
        loss, g = cross_entropy(tape.forward(image), labels)
        if not np.isfinite(loss):
            raise TrainingError(f"training loss became non-finite ({loss})")
        tape.backward(g)
        grads = [g for pg in tape.param_grads if pg is not None for g in pg]
        for p, gp in zip(params, grads):
            p -= lr * gp
        total += loss
    return total / len(data)


def mean_loss(net: SlicedNetwork, data) -> float:
    return float(np.mean([cross_entropy(net.forward(x), y)[0] for x, y in data]))


def pixel_accuracy(net: SlicedNetwork, data) -> float:
    hits = total = 0
    for x, y in data:
        pred = np.argmax(net.forward(x), axis=0)
        hits += int((pred == y).sum())
        total += y.size
    return hits / total


def train_toy_model(seed: int, epochs: int, lr: float, n_train: int = 160,
                    hw=(64, 64), class_count: int = scenes.CLASS_COUNT,
                    history: list | None = None) -> SlicedNetwork:
    """Train a freshly initialised toy network; deterministic given ``seed``.

    If ``history`` is given, the mean training loss before training and after
    every epoch is appended to it.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    net = build_toy_net(seed, class_count, hw)
    data = scenes.training_set(seed + 1, n_train, *hw)
    rng = np.random.default_rng(seed + 2)
    if history is not None:
        history.append(mean_loss(net, data))
    for epoch in range(epochs):
        loss = sgd_epoch(net, data, lr, rng)
        log.info("epoch %d: mean loss %.4f", epoch, loss)
        if history is not None:
            history.append(mean_loss(net, data))
    net.round_params_to_float32()
    net.counter.reset()
    return net
