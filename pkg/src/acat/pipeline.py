"""Per-frame tracing loop: detector fallback, single-pass defended inference,
periodic trace/threshold updates and the reset criterion.

Pass accounting is done with the network's per-layer execution counters,
so reported units reflect work actually performed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .defense import (DefenseParams, MaskProvider, ThresholdState, apply_defense_mask,
                      binarize, compute_heatmap, update_threshold, update_trace)
from .errors import AcatError, ConfigError, DegenerateMaskError
from .metrics import mask_iou
from .net import SlicedNetwork
from .tensor import as_mask, complement, resize_mask

CLEAN, DETECTED, TRACED, RESET = "clean", "detected", "traced", "reset"
MAX_STALE_FRAMES = 2


def default_lambda_m(net: SlicedNetwork, layer: int) -> int:
    """1% of the monitored layer's spatial elements, at least one pixel."""
    _, h, w = net.shape_at(layer)
    return max(1, int(round(0.01 * h * w)))


@dataclass(frozen=True)
class AcatState:
    params: DefenseParams
    lambda_m: int
    trace: np.ndarray | None = None
    threshold: ThresholdState | None = None
    frame_counter: int = 0
    passes_this_frame: float = 0.0
    stale_count: int = 0

    def __post_init__(self):
        if (self.trace is None) != (self.threshold is None):
            raise ConfigError("trace and threshold must be set together")
        if self.lambda_m < 0:
            raise ConfigError("lambda_M must be >= 0")

    @property
    def tracing(self) -> bool:
        return self.trace is not None

    def cleared(self) -> AcatState:
        return replace(self, trace=None, threshold=None, frame_counter=0, stale_count=0)


@dataclass
class FrameOutcome:
    output: np.ndarray
    mask_used: np.ndarray | None
    mode: str
    forward_pass_units: float
    predicted_mask: np.ndarray | None = None  # tracked mask, also on reset frames
    xi: float | None = None
    mask_iou: float | None = None

    @property
    def mask_pixel_count(self) -> int:
        m = self.predicted_mask if self.predicted_mask is not None else self.mask_used
        return 0 if m is None else int((m == 0).sum())


def reset_check(mask: np.ndarray, lambda_m: float) -> bool:
    return int((np.asarray(mask) == 0).sum()) < lambda_m


def _due(counter: int, period: float) -> bool:
    return not math.isinf(period) and counter % int(period) == 0


def _detect_frame(state, net, frame, detector, frame_index):
    p = state.params
    l, n = p.monitored_layer, net.num_layers
    acts = net.record(frame)
    mask = detector(acts, frame_index)
    if mask is None:
        out = FrameOutcome(acts[n], None, CLEAN, 0.0)
        return out, state
    mask = as_mask(mask)
    h = acts[l]
    new_state = state
    try:
        trace = update_trace(h, mask, p)
        threshold = update_threshold(compute_heatmap(h, trace, p), mask, p)
        new_state = replace(state, trace=trace, threshold=threshold,
                            frame_counter=0, stale_count=0)
    except DegenerateMaskError:
        pass  # defend this frame with the detector mask, keep probing with the detector
    # the defended inference is a fresh pass: prefix to z, mask, suffix
    prefix = net.forward_slice(frame, 0, p.z)
    output = apply_defense_mask(net, prefix, mask, p.z, l)
    xi = new_state.threshold.xi if new_state.threshold is not None else None
    return FrameOutcome(output, mask, DETECTED, 0.0, mask, xi), new_state


def _traced_frame(state, net, frame):
    p = state.params
    l, n = p.monitored_layer, net.num_layers
    h = net.forward_slice(frame, 0, l)
    heat = compute_heatmap(h, state.trace, p)
    xi = state.threshold.xi
    mask = binarize(heat, xi)
    if reset_check(mask, state.lambda_m):
        output = net.forward_slice(h, l, n)
        return FrameOutcome(output, None, RESET, 0.0, mask, xi), state.cleared()

    counter = state.frame_counter + 1
    new_state = replace(state, frame_counter=counter)
    if p.upd_enabled and _due(counter, p.update_period):
        try:
            # both come from this frame: its features, mask and heatmap
            trace = update_trace(h, mask, p)
            threshold = update_threshold(heat, mask, p, previous=state.threshold)
        except DegenerateMaskError:
            output = net.forward_slice(h, l, n)
            return FrameOutcome(output, None, RESET, 0.0, mask, xi), state.cleared()
        stale = state.stale_count + 1 if threshold.stale else 0
        if stale > MAX_STALE_FRAMES:
            output = net.forward_slice(h, l, n)
            return FrameOutcome(output, None, RESET, 0.0, mask, xi), state.cleared()
        new_state = replace(new_state, trace=trace, threshold=threshold, stale_count=stale)
    output = apply_defense_mask(net, h, mask, l, l)
    return FrameOutcome(output, mask, TRACED, 0.0, mask, xi), new_state


def process_frame(state: AcatState, net: SlicedNetwork, frame: np.ndarray,
                  detector: MaskProvider, frame_index: int = 0):
    """Run one frame through the state machine; returns (outcome, new state)."""
    if state.params.monitored_layer > net.num_layers:
        raise ConfigError("monitored layer exceeds network depth")
    start = net.counter.pass_units()
    if state.tracing:
        outcome, new_state = _traced_frame(state, net, frame)
    else:
        outcome, new_state = _detect_frame(state, net, frame, detector, frame_index)
    units = net.counter.pass_units() - start
    outcome.forward_pass_units = units
    return outcome, replace(new_state, passes_this_frame=units)


def layer_gt(gt_adversarial: np.ndarray, net: SlicedNetwork, layer: int) -> np.ndarray:
    """Ground-truth defense mask (0 = adversarial) at a layer's resolution."""
    return complement(resize_mask(as_mask(gt_adversarial), *net.shape_at(layer)[1:]))


@dataclass
class StreamResult:
    outcomes: list[FrameOutcome]
    total_units: float
    final_state: AcatState

    @property
    def modes(self) -> list[str]:
        return [o.mode for o in self.outcomes]

    @property
    def reset_frames(self) -> list[int]:
        return [k for k, o in enumerate(self.outcomes) if o.mode == RESET]


def run_stream(state: AcatState, net: SlicedNetwork, frames: Sequence[np.ndarray],
               detector: MaskProvider, gt_masks: Sequence[np.ndarray] | None = None) -> StreamResult:
    """Fold ``process_frame`` over ``frames``.

    ``gt_masks`` are patch-coverage maps (1 = adversarial) at input resolution;
    when given, each outcome carries the Mask-IoU of its tracked mask.
    """
    if len(frames) == 0:
        raise ConfigError("stream has no frames")
    if gt_masks is not None and len(gt_masks) != len(frames):
        raise ConfigError(f"{len(gt_masks)} ground-truth masks for {len(frames)} frames")
    outcomes = []
    for k, frame in enumerate(frames):
        try:
            outcome, state = process_frame(state, net, frame, detector, k)
        except AcatError as e:
            raise type(e)(f"frame {k}: {e}") from e
        if gt_masks is not None:
            pred = outcome.predicted_mask
            if pred is None:
                pred = np.ones(net.shape_at(state.params.monitored_layer)[1:], dtype=np.uint8)
            outcome.mask_iou = mask_iou(pred, layer_gt(gt_masks[k], net, state.params.monitored_layer))
        outcomes.append(outcome)
    return StreamResult(outcomes, sum(o.forward_pass_units for o in outcomes), state)


def run_two_pass_baseline(net: SlicedNetwork, frames: Sequence[np.ndarray],
                          detector: MaskProvider, params: DefenseParams) -> StreamResult:
    """Single-frame defense on every frame: detector pass plus, when it fires,
    a separate defended pass."""
    state = AcatState(params, 0)
    outcomes = []
    for k, frame in enumerate(frames):
        start = net.counter.pass_units()
        acts = net.record(frame)
        mask = detector(acts, k)
        if mask is None:
            out = FrameOutcome(acts[-1], None, CLEAN, 0.0)
        else:
            prefix = net.forward_slice(frame, 0, params.z)
            output = apply_defense_mask(net, prefix, as_mask(mask), params.z, params.monitored_layer)
            out = FrameOutcome(output, mask, DETECTED, 0.0, mask)
        out.forward_pass_units = net.counter.pass_units() - start
        outcomes.append(out)
    return StreamResult(outcomes, sum(o.forward_pass_units for o in outcomes), state)


EVENT_COLUMNS = ("frame_index", "mode", "pass_units", "mask_pixel_count", "xi", "mask_iou")


def write_event_log(path, outcomes: Sequence[FrameOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for k, o in enumerate(outcomes):
            w.writerow([k, o.mode, f"{o.forward_pass_units:.6g}", o.mask_pixel_count,
                        "" if o.xi is None else repr(float(o.xi)),
                        "" if o.mask_iou is None else f"{o.mask_iou:.6f}"])
