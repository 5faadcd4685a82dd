from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acat.defense import DefenseParams, GroundTruthProvider
from acat.errors import ConfigError
from acat.net import Conv2d, SlicedNetwork, make_context_head
from acat.pipeline import (CLEAN, DETECTED, EVENT_COLUMNS, RESET, TRACED, AcatState,
                           default_lambda_m, layer_gt, process_frame, reset_check,
                           run_stream, run_two_pass_baseline, write_event_log)

HW = 16


def bright_net() -> SlicedNetwork:
    """Layer 1 copies the input (ReLU of an identity 1x1 conv); layer 2 is a 2-class head."""
    w = np.eye(3).reshape(3, 3, 1, 1)
    head = make_context_head(np.random.default_rng(0), 3, 2)
    return SlicedNetwork([Conv2d(w, np.zeros(3), relu=True), head], (3, HW, HW), 2)


def square_frame(rng, top, left, side=4, value=1.0):
    """Flat gray frame with a bright gray square; ``rng`` jitters the square's brightness."""
    x = np.full((3, HW, HW), 0.2)
    value = value - rng.uniform(0.0, 0.05)
    gt = np.zeros((HW, HW), dtype=np.uint8)
    if side > 0:
        x[:, top:top + side, left:left + side] = value
        gt[top:top + side, left:left + side] = 1
    return x, gt


def square_stream(n, seed=0, sides=None):
    rng = np.random.default_rng(seed)
    frames, gts = [], []
    for k in range(n):
        side = 4 if sides is None else sides[k]
        x, g = square_frame(rng, 3 + k % 5, 2 + k % 7, side)
        frames.append(x)
        gts.append(g)
    return frames, gts


# no smoothing, so the traced mask is exactly the bright square
SHARP = DefenseParams(nf_enabled=False)


def fresh_state(params=None, lambda_m=3):
    return AcatState(params or SHARP, lambda_m)


def never(acts, k):
    return None


# reset_check ------------------------------------------------------------------

def test_reset_check_boundaries():
    assert reset_check(np.ones((4, 4), dtype=np.uint8), 1)
    m = np.ones((5, 5), dtype=np.uint8)
    m.flat[:10] = 0
    assert not reset_check(m, 10)
    m.flat[9] = 1
    assert reset_check(m, 10)


def test_default_lambda_m():
    net = bright_net()
    assert default_lambda_m(net, 1) == 3
    tiny = SlicedNetwork([Conv2d(np.ones((1, 1, 1, 1)), np.zeros(1))], (1, 4, 4), 1)
    assert default_lambda_m(tiny, 1) == 1


def test_state_invariants():
    with pytest.raises(ConfigError):
        AcatState(DefenseParams(), 3, trace=np.ones(3))
    with pytest.raises(ConfigError):
        AcatState(DefenseParams(), -1)


# process_frame --------------------------------------------------------------

def test_clean_frame_costs_one_pass():
    net = bright_net()
    x, _ = square_frame(np.random.default_rng(0), 0, 0, side=0)
    out, state = process_frame(fresh_state(), net, x, never)
    assert out.mode == CLEAN and out.forward_pass_units == 1.0
    assert out.mask_used is None and not state.tracing
    assert np.array_equal(out.output, bright_net().forward(x))


def test_detection_then_tracing_costs():
    net = bright_net()
    frames, gts = square_stream(3)
    det = GroundTruthProvider(gts, (HW, HW))
    out0, state = process_frame(fresh_state(), net, frames[0], det, 0)
    assert out0.mode == DETECTED and out0.forward_pass_units == 2.0
    assert state.tracing and state.passes_this_frame == 2.0
    net.counter.reset()
    out1, state = process_frame(state, net, frames[1], det, 1)
    assert out1.mode == TRACED and out1.forward_pass_units == 1.0
    assert net.counter.counts == [0, 1, 1]


def test_traced_mask_finds_square():
    net = bright_net()
    frames, gts = square_stream(6)
    r = run_stream(fresh_state(), net, frames, GroundTruthProvider(gts, (HW, HW)), gts)
    assert r.modes == [DETECTED] + [TRACED] * 5
    assert all(o.mask_iou == 1.0 for o in r.outcomes)
    assert r.total_units == 7.0


def test_detected_frame_without_clean_pixels_is_still_defended():
    net = bright_net()
    x = np.full((3, HW, HW), 0.5)
    zeros = np.zeros((HW, HW), dtype=np.uint8)
    out, state = process_frame(fresh_state(), net, x, lambda a, k: zeros)
    assert out.mode == DETECTED and not state.tracing
    assert np.array_equal(out.output, bright_net().forward(np.zeros_like(x)))


def test_reset_when_patch_vanishes_and_reentry_via_detector():
    net = bright_net()
    sides = [4, 4, 4, 0, 0, 4, 4]
    frames, gts = square_stream(len(sides), sides=sides)
    r = run_stream(fresh_state(), net, frames, GroundTruthProvider(gts, (HW, HW)), gts)
    assert r.modes == [DETECTED, TRACED, TRACED, RESET, CLEAN, DETECTED, TRACED]
    assert [o.forward_pass_units for o in r.outcomes] == [2, 1, 1, 1, 1, 2, 1]
    assert r.reset_frames == [3]


def test_reset_boundary_is_strict():
    net = bright_net()
    frames, gts = square_stream(3, sides=[4, 4, 3])
    det = GroundTruthProvider(gts, (HW, HW))
    # a 3x3 square leaves 9 adversarial pixels
    r = run_stream(fresh_state(lambda_m=9), net, frames, det, gts)
    assert r.modes == [DETECTED, TRACED, TRACED]
    r = run_stream(fresh_state(lambda_m=10), bright_net(), frames, det, gts)
    assert r.modes == [DETECTED, TRACED, RESET]


def test_infinite_period_freezes_trace_and_threshold():
    net = bright_net()
    frames, gts = square_stream(8)
    det = GroundTruthProvider(gts, (HW, HW))
    p = replace(SHARP, update_period=math.inf)
    state = fresh_state(p)
    seen = []
    for k, x in enumerate(frames):
        _, state = process_frame(state, net, x, det, k)
        seen.append((state.trace.copy(), state.threshold.xi))
    assert all(np.array_equal(t, seen[0][0]) and xi == seen[0][1] for t, xi in seen)
    off = run_stream(fresh_state(replace(p, upd_enabled=False)), bright_net(), frames, det, gts)
    inf = run_stream(fresh_state(p), bright_net(), frames, det, gts)
    assert [o.mask_iou for o in off.outcomes] == [o.mask_iou for o in inf.outcomes]
    assert all(np.array_equal(a.output, b.output) for a, b in zip(off.outcomes, inf.outcomes))


def test_update_period_cadence():
    net = bright_net()
    frames, gts = square_stream(7)
    det = GroundTruthProvider(gts, (HW, HW))
    state = fresh_state(replace(SHARP, update_period=3))
    xis = []
    for k, x in enumerate(frames):
        _, state = process_frame(state, net, x, det, k)
        xis.append(state.threshold.xi)
    changed = [k for k in range(1, 7) if xis[k] != xis[k - 1]]
    assert set(changed) <= {3, 6}


def test_stale_threshold_forces_reset():
    net = bright_net()
    # a frame-wide bright region leaves no clean pixels after dilation
    x = np.full((3, HW, HW), 1.0)
    x[:, 0, 0] = 0.0
    rng = np.random.default_rng(0)
    first, gt = square_frame(rng, 4, 4)
    det = GroundTruthProvider([gt] * 5, (HW, HW))
    r = run_stream(fresh_state(), net, [first, x, x, x, x], det)
    assert r.modes[:4] == [DETECTED, TRACED, TRACED, RESET]


def test_monitored_layer_beyond_depth():
    with pytest.raises(ConfigError):
        process_frame(fresh_state(DefenseParams(monitored_layer=3)), bright_net(),
                      np.zeros((3, HW, HW)), never)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_process_frame_is_deterministic(seed, steps):
    frames, gts = square_stream(steps + 1, seed)
    det = GroundTruthProvider(gts, (HW, HW))
    state = fresh_state()
    for k in range(steps):
        _, state = process_frame(state, bright_net(), frames[k], det, k)
    a, sa = process_frame(state, bright_net(), frames[steps], det, steps)
    b, sb = process_frame(state, bright_net(), frames[steps], det, steps)
    assert a.mode == b.mode and np.array_equal(a.output, b.output)
    assert sa.threshold == sb.threshold and np.array_equal(sa.trace, sb.trace)


# run_stream -------------------------------------------------------------------

def test_clean_stream_costs_k():
    frames, _ = square_stream(5, sides=[0] * 5)
    r = run_stream(fresh_state(), bright_net(), frames, never)
    assert r.total_units == 5.0 and set(r.modes) == {CLEAN}


def test_stream_errors():
    with pytest.raises(ConfigError):
        run_stream(fresh_state(), bright_net(), [], never)
    frames, gts = square_stream(2)
    with pytest.raises(ConfigError):
        run_stream(fresh_state(), bright_net(), frames, never, gts[:1])
    bad = frames[:1] + [np.zeros((3, 5, 5))]
    with pytest.raises(ConfigError, match="frame 1"):
        run_stream(fresh_state(), bright_net(), bad, never)


def test_two_pass_baseline_costs_2k():
    frames, gts = square_stream(6)
    r = run_two_pass_baseline(bright_net(), frames, GroundTruthProvider(gts, (HW, HW)),
                              DefenseParams())
    assert r.total_units == 12.0 and set(r.modes) == {DETECTED}


def test_layer_gt_resizes():
    net = SlicedNetwork([Conv2d(np.ones((1, 1, 2, 2)), np.zeros(1), stride=2)], (1, 8, 8), 1)
    gt = np.zeros((8, 8), dtype=np.uint8)
    gt[:4, :4] = 1
    m = layer_gt(gt, net, 1)
    assert m.shape == (4, 4) and (m == 0).sum() == 4 and m[0, 0] == 0


def test_event_log(tmp_path):
    frames, gts = square_stream(4)
    r = run_stream(fresh_state(), bright_net(), frames, GroundTruthProvider(gts, (HW, HW)), gts)
    path = tmp_path / "events.csv"
    write_event_log(path, r.outcomes)
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == EVENT_COLUMNS
    assert [r_["mode"] for r_ in rows] == r.modes
    assert rows[0]["pass_units"] == "2" and rows[1]["pass_units"] == "1"
    assert int(rows[1]["mask_pixel_count"]) == 16
    assert float(rows[1]["xi"]) == r.outcomes[1].xi
    clean = run_stream(fresh_state(), bright_net(), frames[:1], never)
    write_event_log(path, clean.outcomes)
    row = next(csv.DictReader(path.open()))
    assert row["xi"] == "" and row["mask_iou"] == ""
