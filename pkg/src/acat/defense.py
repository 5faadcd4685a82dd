"""Attention heatmap, adversarial trace, adaptive threshold and mask application.

Masks follow the defense convention: 0 marks adversarial pixels, 1 clean ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateMaskError
from .imageio import write_heatmap_pgm
from .net import SlicedNetwork
from .tensor import (as_mask, complement, expand_mask, gaussian_filter, percentile,
                     resize_mask, spatial_mask_apply)


@dataclass(frozen=True)
class DefenseParams:
    monitored_layer: int = 1
    tau: float = 2.0
    gaussian_kernel: int = 3
    gaussian_sigma: float | None = None   # None: kernel/4
    dilation_kernel: int = 5
    dilation_threshold: float = 0.5
    dilation_normalized: bool = False
    percentile_v: float = 70.0
    apply_layer: int | None = None        # None: same as monitored_layer
    nf_enabled: bool = True
    att_plus_enabled: bool = True
    att_minus_enabled: bool = True
    upd_enabled: bool = True
    update_period: float = 1              # math.inf: never update

    def __post_init__(self):
        if self.monitored_layer < 0:
            raise ConfigError("monitored_layer must be >= 0")
        if self.tau < 1:
            raise ConfigError(f"tau must be >= 1, got {self.tau}")
        for name in ("gaussian_kernel", "dilation_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be an odd count >= 1, got {k}")
        if not 0.0 <= self.percentile_v <= 100.0:
            raise ConfigError("percentile_v must lie in [0, 100]")
        if not (self.update_period >= 1 and
                (math.isinf(self.update_period) or float(self.update_period).is_integer())):
            raise ConfigError(f"update_period must be an integer >= 1 or inf, got {self.update_period}")
        if not 0 <= self.z <= self.monitored_layer:
            raise ConfigError(f"apply_layer must satisfy 0 <= z <= l, got z={self.z}")

    @property
    def z(self) -> int:
        return self.monitored_layer if self.apply_layer is None else self.apply_layer

    def with_flags(self, att_plus: bool, att_minus: bool, upd: bool, nf: bool) -> DefenseParams:
        return replace(self, att_plus_enabled=att_plus, att_minus_enabled=att_minus,
                       upd_enabled=upd, nf_enabled=nf)

    def validate_for(self, net: SlicedNetwork) -> None:
        if self.monitored_layer > net.num_layers:
            raise ConfigError(f"monitored layer {self.monitored_layer} exceeds network depth "
                              f"{net.num_layers}")


@dataclass(frozen=True)
class ThresholdState:
    xi: float
    stale: bool = False

    def __post_init__(self):
        if not math.isfinite(self.xi):
            raise ConfigError(f"threshold must be finite, got {self.xi}")


def compute_heatmap(h: np.ndarray, trace: np.ndarray, params: DefenseParams) -> np.ndarray:
    """Attention-weighted channel sum, optionally noise filtered."""
    sigma = np.asarray(trace, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] != h.shape[0]:
        raise ConfigError(f"trace has {sigma.shape} weights, features have {h.shape[0]} channels")
    if not (params.att_plus_enabled or params.att_minus_enabled):
        sigma = np.ones_like(sigma)
    heat = np.tensordot(sigma ** params.tau, h, axes=(0, 0))
    if params.nf_enabled:
        heat = gaussian_filter(heat, params.gaussian_kernel, params.gaussian_sigma)
    return heat


def binarize(heatmap: np.ndarray, xi: float) -> np.ndarray:
    return (np.asarray(heatmap) <= xi).astype(np.uint8)


def _minmax_relu(d: np.ndarray) -> np.ndarray:
    r = np.maximum(d, 0.0)
    lo, hi = float(r.min()), float(r.max())
    if hi == lo:
        return np.ones_like(r) if hi > 0 else np.zeros_like(r)
    return (r - lo) / (hi - lo)


def trace_difference(h: np.ndarray, mask: np.ndarray, params: DefenseParams) -> np.ndarray:
    """Per-channel (adversarial mean - clean mean) before normalization."""
    m = as_mask(mask)
    if m.shape != h.shape[1:]:
        raise ConfigError(f"mask {m.shape} does not match feature dims {h.shape[1:]}")
    adv = m == 0
    clean = ~adv
    if not adv.any():
        raise DegenerateMaskError("adversarial region is empty")
    if not clean.any():
        raise DegenerateMaskError("clean region is empty")
    d = np.zeros(h.shape[0])
    if params.att_plus_enabled:
        d += h[:, adv].mean(axis=1)
    if params.att_minus_enabled:
        d -= h[:, clean].mean(axis=1)
    return d


def update_trace(h: np.ndarray, mask: np.ndarray, params: DefenseParams) -> np.ndarray:
    return _minmax_relu(trace_difference(h, mask, params))


def clean_values(heatmap: np.ndarray, mask: np.ndarray, params: DefenseParams) -> np.ndarray:
    excluded = expand_mask(complement(mask), params.dilation_kernel,
                           params.dilation_threshold, params.dilation_normalized)
    return np.asarray(heatmap)[excluded == 0]


def update_threshold(heatmap: np.ndarray, mask: np.ndarray, params: DefenseParams,
                     previous: ThresholdState | None = None) -> ThresholdState:
    """Max of the clean heatmap plus a percentile-minus-mean margin.

    When dilation leaves no clean pixel the previous threshold is returned
    flagged stale; without a previous one this is a degenerate mask.
    """
    vals = clean_values(heatmap, mask, params)
    if vals.size == 0:
        if previous is None:
            raise DegenerateMaskError("no clean heatmap pixels remain after dilation")
        return ThresholdState(previous.xi, stale=True)
    lo = float(vals.min())
    # mean taken relative to the minimum so a constant map gives a margin of exactly 0
    margin = percentile(vals, params.percentile_v) - (lo + float((vals - lo).mean()))
    return ThresholdState(float(vals.max()) + margin)


def apply_defense_mask(net: SlicedNetwork, prefix: np.ndarray, mask: np.ndarray,
                       z: int, l: int) -> np.ndarray:
    """Mask the layer-z features with a layer-l mask and finish the forward pass."""
    if not 0 <= z <= l <= net.num_layers:
        raise ConfigError(f"need 0 <= z <= l <= {net.num_layers}, got z={z}, l={l}")
    m = as_mask(mask)
    if m.shape != net.shape_at(l)[1:]:
        raise ConfigError(f"mask {m.shape} does not match layer {l} dims {net.shape_at(l)[1:]}")
    if z != l:
        m = resize_mask(m, *net.shape_at(z)[1:])
    return net.forward_slice(spatial_mask_apply(prefix, m), z, net.num_layers)


# starting-mask providers -------------------------------------------------
# A provider receives the activations recorded by one full forward pass and
# the frame index, and returns a mask at the monitored layer's dims or None.

MaskProvider = Callable[[Sequence[np.ndarray], int], Optional[np.ndarray]]


def channel_sum(h: np.ndarray) -> np.ndarray:
    return np.asarray(h).sum(axis=0)


@dataclass(frozen=True)
class CalibrationRecord:
    deep_layer: int
    maxima: tuple[float, ...]
    margin: float = 1.1

    def __post_init__(self):
        if not self.maxima:
            raise ConfigError("calibration needs at least one clean frame")
        if not all(math.isfinite(v) for v in self.maxima):
            raise ConfigError("calibration maxima must be finite")

    @property
    def threshold(self) -> float:
        return max(self.maxima) * self.margin


def calibrate(net: SlicedNetwork, frames, deep_layer: int, margin: float = 1.1) -> CalibrationRecord:
    if not 1 <= deep_layer <= net.num_layers:
        raise ConfigError(f"deep layer {deep_layer} out of range")
    maxima = tuple(float(channel_sum(net.forward_slice(f, 0, deep_layer)).max()) for f in frames)
    return CalibrationRecord(deep_layer, maxima, margin)


def detect_from_activations(acts: Sequence[np.ndarray], calib: CalibrationRecord,
                            mask_hw: tuple[int, int]) -> np.ndarray | None:
    heat = channel_sum(acts[calib.deep_layer])
    adversarial = heat > calib.threshold
    if not adversarial.any():
        return None
    return complement(resize_mask(adversarial.astype(np.uint8), *mask_hw))


def baseline_detect(net: SlicedNetwork, frame: np.ndarray, calib: CalibrationRecord,
                    monitored_layer: int = 1) -> np.ndarray | None:
    """Static-threshold over-activation detector; one full forward pass."""
    acts = net.record(frame)
    return detect_from_activations(acts, calib, net.shape_at(monitored_layer)[1:])


@dataclass
class BaselineDetector:
    calib: CalibrationRecord
    mask_hw: tuple[int, int]

    def __call__(self, acts, frame_index: int):
        return detect_from_activations(acts, self.calib, self.mask_hw)


@dataclass
class GroundTruthProvider:
    """Returns the known patch mask of each frame (1 = covered at input resolution)."""
    gt_adversarial: Sequence[np.ndarray]
    mask_hw: tuple[int, int]
    min_area: int = 1

    def __call__(self, acts, frame_index: int):
        adv = resize_mask(as_mask(self.gt_adversarial[frame_index]), *self.mask_hw)
        if int(adv.sum()) < self.min_area:
            return None
        return complement(adv)


def export_trace(path, trace: np.ndarray) -> None:
    Path(path).write_text("".join(f"{v:.17g}\n" for v in np.asarray(trace, dtype=np.float64)))


def load_trace(path) -> np.ndarray:
    return np.array([float(t) for t in Path(path).read_text().split()])


def export_heatmap(path, heatmap: np.ndarray) -> None:
    write_heatmap_pgm(path, heatmap)
