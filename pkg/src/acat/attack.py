"""Adversarial patch crafting (EOT with an over-activation penalty) and animation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AttackError, ConfigError, FormatError, PlacementError
from .imageio import read_ppm, write_ppm
from .net import GradientTape, SlicedNetwork, cross_entropy
from .tensor import resize_mask

log = logging.getLogger(__name__)

# sinusoidal motion amplitudes/frequencies for 2048x1024 frames
REFERENCE_FRAME_W, REFERENCE_FRAME_H = 2048, 1024
REFERENCE_AMPLITUDES = (500.0, 300.0, 0.3)
REFERENCE_FREQUENCIES = (0.05, 0.05, 0.05)


@dataclass
class AdversarialPatch:
    pixels: np.ndarray  # (3, h, w) in [0, 1]

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ConfigError(f"patch must be (3, h, w), got {self.pixels.shape}")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @classmethod
    def random(cls, h: int, w: int, rng: np.random.Generator) -> AdversarialPatch:
        return cls(rng.uniform(0.0, 1.0, size=(3, h, w)))


@dataclass(frozen=True)
class Placement:
    x_pos: float
    y_pos: float
    s: float = 1.0


@dataclass(frozen=True)
class MotionParams:
    c_x: float
    c_y: float
    a_x: float = REFERENCE_AMPLITUDES[0]
    a_y: float = REFERENCE_AMPLITUDES[1]
    a_s: float = REFERENCE_AMPLITUDES[2]
    alpha_x: float = REFERENCE_FREQUENCIES[0]
    alpha_y: float = REFERENCE_FREQUENCIES[1]
    alpha_s: float = REFERENCE_FREQUENCIES[2]
    omega_x: float = 0.0
    omega_y: float = 0.0
    omega_s: float = 0.0

    def __post_init__(self):
        if not abs(self.a_s) < 1.0:
            raise ConfigError("scale amplitude must be < 1 to keep the scale positive")

    @classmethod
    def for_frame(cls, width: int, height: int, omegas=(0.0, 0.0, 0.0),
                  **overrides) -> MotionParams:
        """Reference amplitudes rescaled from 2048x1024 to ``width`` x ``height``."""
        kw = dict(
            c_x=width / 2.0, c_y=height / 2.0,
            a_x=REFERENCE_AMPLITUDES[0] * width / REFERENCE_FRAME_W,
            a_y=REFERENCE_AMPLITUDES[1] * height / REFERENCE_FRAME_H,
            omega_x=omegas[0], omega_y=omegas[1], omega_s=omegas[2],
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class AttackConfig:
    beta: float = 1.0
    steps: int = 200
    step_size: float = 4.0 / 255.0
    monitored_layers: Sequence[int] = (1,)
    target: int | None = 2  # the context-dependent class; None -> untargeted
    eot_samples_per_step: int = 2
    patch_hw: tuple[int, int] = (20, 20)
    s_min: float = 0.7
    s_max: float = 1.3
    margin: float = 12.0  # keep sampled centres this far from the frame border
    exclude_patch_pixels: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must be in [0, 1], got {self.beta}")
        if self.steps < 0 or self.eot_samples_per_step < 1:
            raise ConfigError("steps must be >= 0 and eot_samples_per_step >= 1")
        if not 0 < self.s_min <= self.s_max:
            raise ConfigError("need 0 < s_min <= s_max")


def _footprint(patch_hw, frame_hw, placement: Placement):
    """Row/column index maps of the scaled patch, clipped to the frame."""
    ph, pw = patch_hw
    fh, fw = frame_hw
    if placement.s <= 0:
        raise PlacementError(f"scale must be positive, got {placement.s}")
    sh = int(round(placement.s * ph))
    sw = int(round(placement.s * pw))
    top = math.floor(placement.y_pos - sh / 2.0 + 0.5)
    left = math.floor(placement.x_pos - sw / 2.0 + 0.5)
    rows = np.arange(max(top, 0), min(top + sh, fh))
    cols = np.arange(max(left, 0), min(left + sw, fw))
    if sh < 1 or sw < 1 or rows.size == 0 or cols.size == 0:
        raise PlacementError(f"patch at {placement} does not intersect the {fh}x{fw} frame")
    src_r = ((rows - top) * ph) // sh
    src_c = ((cols - left) * pw) // sw
    return rows, cols, src_r, src_c


def paste_patch(frame: np.ndarray, patch: AdversarialPatch, placement: Placement):
    """Occlude ``frame`` with the scaled patch; return (attacked frame, gt mask).

    The gt mask is 1 exactly where the patch covers the frame.
    """
    frame = np.asarray(frame, dtype=np.float64)
    rows, cols, src_r, src_c = _footprint(patch.size, frame.shape[1:], placement)
    out = frame.copy()
    out[:, rows[:, None], cols[None, :]] = patch.pixels[:, src_r[:, None], src_c[None, :]]
    gt = np.zeros(frame.shape[1:], dtype=np.uint8)
    gt[rows[:, None], cols[None, :]] = 1
    return out, gt


def _patch_grad(input_grad, patch_hw, placement: Placement) -> np.ndarray:
    rows, cols, src_r, src_c = _footprint(patch_hw, input_grad.shape[1:], placement)
    g = np.zeros((3,) + tuple(patch_hw))
    sub = input_grad[:, rows[:, None], cols[None, :]]
    rr = np.broadcast_to(src_r[:, None], sub.shape[1:])
    cc = np.broadcast_to(src_c[None, :], sub.shape[1:])
    for ch in range(3):
        np.add.at(g[ch], (rr, cc), sub[ch])
    return g


def patch_trajectory(params: MotionParams, k: int) -> Placement:
    if k < 0:
        raise ConfigError("frame index must be >= 0")
    return Placement(
        x_pos=params.c_x + params.a_x * math.sin(params.alpha_x * k + params.omega_x),
        y_pos=params.c_y + params.a_y * math.sin(params.alpha_y * k + params.omega_y),
        s=1.0 + params.a_s * math.sin(params.alpha_s * k + params.omega_s),
    )


def sample_transform(rng: np.random.Generator, frame_hw, s_min: float = 0.7,
                     s_max: float = 1.3, margin: float = 0.0) -> Placement:
    """Uniform centre in the frame (shrunk by ``margin`` on each side), uniform scale."""
    h, w = frame_hw
    x = rng.uniform(margin, w - margin)
    y = rng.uniform(margin, h - margin)
    s = s_min if s_min == s_max else rng.uniform(s_min, s_max)
    return Placement(float(x), float(y), float(s))


def _adv_labels(cfg: AttackConfig, labels: np.ndarray) -> np.ndarray:
    if cfg.target is None:
        return labels
    return np.full(labels.shape, cfg.target, dtype=np.int64)


def attack_losses(net: SlicedNetwork, image, labels, patch: AdversarialPatch,
                  placement: Placement, cfg: AttackConfig, need_grad: bool = True):
    """Return (L_adv, L_act, d(beta*L_adv + (1-beta)*L_act)/d patch or None)."""
    attacked, gt = paste_patch(image, patch, placement)
    tape = GradientTape(net, need_params=False)
    logits = tape.forward(attacked)
    weights = (1 - gt).astype(np.float64) if cfg.exclude_patch_pixels else None
    ce, g_ce = cross_entropy(logits, _adv_labels(cfg, labels), weights)
    sign = 1.0 if cfg.target is not None else -1.0
    l_adv = sign * ce
    l_act = 0.0
    extra = {}
    for layer in cfg.monitored_layers:
        h = tape.activation(layer)
        region = resize_mask(gt, h.shape[1], h.shape[2]).astype(np.float64)
        n = region.sum() * h.shape[0]
        if n == 0:
            continue
        l_act += float((h * h * region).sum() / n) / len(cfg.monitored_layers)
        extra[layer] = (1.0 - cfg.beta) * 2.0 * h * region / (n * len(cfg.monitored_layers))
    if not (np.isfinite(l_adv) and np.isfinite(l_act)):
        raise AttackError(f"non-finite attack loss (adv={l_adv}, act={l_act})")
    if not need_grad:
        return l_adv, l_act, None
    tape.backward(cfg.beta * sign * g_ce, extra)
    return l_adv, l_act, _patch_grad(tape.input_grad, patch.size, placement)


def optimize_patch(net: SlicedNetwork, images, cfg: AttackConfig, seed: int,
                   init: AdversarialPatch | None = None,
                   log_every: int = 0) -> AdversarialPatch:
    """Signed-gradient EOT descent on ``beta*L_adv + (1-beta)*L_act``.

    ``images`` is a sequence of (image, labels) pairs; labels are only used
    by the untargeted loss.
    """
    if len(images) == 0:
        raise ConfigError("need at least one image to attack")
    rng = np.random.default_rng(seed)
    if init is None:
        init = AdversarialPatch.random(*cfg.patch_hw, rng)
    patch = AdversarialPatch(init.pixels.copy())
    frame_hw = np.asarray(images[0][0]).shape[1:]
    for step in range(cfg.steps):
        grad = np.zeros_like(patch.pixels)
        for _ in range(cfg.eot_samples_per_step):
            image, labels = images[int(rng.integers(len(images)))]
            pl = sample_transform(rng, frame_hw, cfg.s_min, cfg.s_max, cfg.margin)
            _, _, g = attack_losses(net, image, labels, patch, pl, cfg)
            grad += g
        patch.pixels = np.clip(patch.pixels - cfg.step_size * np.sign(grad), 0.0, 1.0)
        if log_every and step % log_every == 0:
            log.info("step %d/%d", step, cfg.steps)
    return patch


def heldout_placements(seed: int, count: int, frame_hw, cfg: AttackConfig) -> list[Placement]:
    rng = np.random.default_rng(seed)
    return [sample_transform(rng, frame_hw, cfg.s_min, cfg.s_max, cfg.margin) for _ in range(count)]


def mean_adv_loss(net, patch, images, placements, cfg) -> float:
    vals = [attack_losses(net, x, y, patch, pl, cfg, need_grad=False)[0]
            for (x, y), pl in zip(images, placements)]
    return float(np.mean(vals))


def activation_energy(net: SlicedNetwork, patch: AdversarialPatch, images, placements,
                      layer: int) -> float:
    """Mean squared activation at ``layer`` over patch-covered positions."""
    vals = []
    for (x, _), pl in zip(images, placements):
        attacked, gt = paste_patch(x, patch, pl)
        h = net.forward_slice(attacked, 0, layer)
        region = resize_mask(gt, h.shape[1], h.shape[2]).astype(bool)
        if region.any():
            vals.append(float((h[:, region] ** 2).mean()))
    return float(np.mean(vals))


def clean_region_accuracy(net: SlicedNetwork, patch: AdversarialPatch, images,
                          placements, attacked: bool = True) -> float:
    """Pixel accuracy outside the patch footprint, with or without the patch pasted."""
    hits = total = 0
    for (x, y), pl in zip(images, placements):
        adv, gt = paste_patch(x, patch, pl)
        frame = adv if attacked else x
        pred = np.argmax(net.forward(frame), axis=0)
        clean = gt == 0
        hits += int((pred[clean] == y[clean]).sum())
        total += int(clean.sum())
    return hits / total


# persistence ----------------------------------------------------------------

def save_patch(patch: AdversarialPatch, path, config: dict | None = None) -> None:
    path = Path(path)
    write_ppm(path, patch.pixels)
    lines = [f"height={patch.size[0]}", f"width={patch.size[1]}"]
    for k, v in sorted((config or {}).items()):
        lines.append(f"{k}={v}")
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def load_patch(path) -> tuple[AdversarialPatch, dict]:
    path = Path(path)
    pixels = read_ppm(path)
    meta = {}
    side = path.with_suffix(".txt")
    if side.exists():
        for line in side.read_text().splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                meta[k.strip()] = v.strip()
        if (int(meta.get("height", -1)), int(meta.get("width", -1))) != pixels.shape[1:]:
            raise FormatError(f"{side}: base dims do not match {path}")
    return AdversarialPatch(pixels), meta
