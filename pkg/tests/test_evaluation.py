from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from acat.attack import paste_patch, patch_trajectory, MotionParams
from acat.defense import DefenseParams
from acat.errors import ConfigError, DataError
from acat.evaluation import (ABLATION_COLUMNS, ABLATION_GRID, AblationConfig, PassCount,
                             count_passes, draw_omegas, gen_video_dataset, load_video_dataset,
                             make_video, params_for_layer, read_manifest, run_ablation,
                             run_layer_sweep, run_period_sweep, run_video, tracking_iou,
                             write_csv, default_calibration)
from acat.pipeline import CLEAN, DETECTED, TRACED, FrameOutcome


@pytest.fixture(scope="module")
def short_video(patch_b08):
    return make_video(0, 16, (64, 64), patch_b08)


def _outcome(mode, units):
    return FrameOutcome(np.zeros(1), None, mode, units)


# datasets ---------------------------------------------------------------------

def test_video_gt_matches_paste(patch_b08, short_video):
    motion = MotionParams.for_frame(64, 64, draw_omegas(0))
    for k in (0, 7, 15):
        _, gt = paste_patch(np.zeros((3, 64, 64)), patch_b08, patch_trajectory(motion, k))
        assert np.array_equal(short_video.gt_masks[k], gt)
    assert len(short_video) == 16
    assert float(short_video.manifest["motion.omega_x"]) == motion.omega_x


def test_dataset_round_trip_and_layout(tmp_path, patch_b08):
    video = gen_video_dataset(3, 4, (64, 64), patch_b08, None, tmp_path / "d", patch_ref="p.ppm")
    root = tmp_path / "d"
    assert sorted(p.name for p in (root / "frames").iterdir()) == [f"{k:06d}.ppm" for k in range(4)]
    assert (root / "masks" / "000003.pgm").exists() and (root / "labels" / "000000.pgm").exists()
    back = load_video_dataset(root, require_gt=True)
    for a, b in zip(video.frames, back.frames):
        assert np.array_equal(a, b)
    for a, b in zip(video.gt_masks, back.gt_masks):
        assert np.array_equal(a, b)
    for a, b in zip(video.labels, back.labels):
        assert np.array_equal(a, b)
    manifest = read_manifest(root / "manifest.txt")
    assert manifest["patch"] == "p.ppm" and manifest["seed"] == "3"


def test_same_seed_gives_identical_trees(tmp_path, patch_b08):
    for name in ("a", "b"):
        gen_video_dataset(7, 3, (64, 64), patch_b08, None, tmp_path / name)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)


def test_manifest_reproduces_dataset(patch_b08, short_video):
    m = short_video.manifest
    motion = MotionParams(**{k[7:]: float(v) for k, v in m.items() if k.startswith("motion.")})
    again = make_video(int(m["seed"]), int(m["num_frames"]), (int(m["height"]), int(m["width"])),
                       patch_b08, motion, float(m["speed"]))
    assert all(np.array_equal(a, b) for a, b in zip(again.frames, short_video.frames))


def test_five_omega_seeds_give_distinct_placements():
    starts = set()
    for seed in range(5):
        p = patch_trajectory(MotionParams.for_frame(64, 64, draw_omegas(seed)), 0)
        starts.add((round(p.x_pos, 6), round(p.y_pos, 6), round(p.s, 6)))
    assert len(starts) == 5


def test_missing_masks(tmp_path, patch_b08):
    gen_video_dataset(1, 2, (64, 64), patch_b08, None, tmp_path)
    (tmp_path / "masks" / "000001.pgm").unlink()
    with pytest.raises(DataError, match="000001"):
        load_video_dataset(tmp_path, require_gt=True)
    video = load_video_dataset(tmp_path)
    assert not video.gt_masks[1].any()
    with pytest.raises(DataError):
        load_video_dataset(tmp_path / "nowhere")
    with pytest.raises(ConfigError):
        make_video(0, 0, (64, 64), patch_b08)


# tracking runs ------------------------------------------------------------------

def test_run_video_gt_provider(toy_net, short_video):
    r = run_video(short_video, toy_net.copy(), DefenseParams())
    assert r.modes[0] == DETECTED
    assert all(m in (TRACED, DETECTED, CLEAN, "reset") for m in r.modes)
    assert 0.0 <= tracking_iou(r) <= 1.0
    assert r.outcomes[0].mask_iou == 1.0


def test_run_video_detector_provider(toy_net, short_video):
    net = toy_net.copy()
    calib = default_calibration(net)
    r = run_video(short_video, net, DefenseParams(), "detector", calib=calib)
    assert len(r.outcomes) == len(short_video)
    with pytest.raises(ConfigError):
        run_video(short_video, net, DefenseParams(), "detector")
    with pytest.raises(ConfigError):
        run_video(short_video, net, DefenseParams(), "oracle")


def test_tracking_iou_without_detection_is_nan(toy_net, patch_b08):
    video = make_video(0, 3, (64, 64), patch_b08)
    video.gt_masks[:] = [np.zeros_like(m) for m in video.gt_masks]
    assert math.isnan(tracking_iou(run_video(video, toy_net.copy(), DefenseParams())))


def test_ablation_grid_shape_and_determinism(toy_net, short_video):
    labels = [c.label for c in ABLATION_GRID]
    assert "nf" in labels and "none" in labels and "att+,att-,upd,nf" in labels
    a = run_ablation(short_video, toy_net.copy())
    b = run_ablation(short_video, toy_net.copy())
    assert a == b
    assert [r["config"] for r in a] == labels
    assert all(tuple(r) == ABLATION_COLUMNS for r in a)


def test_infinite_period_equals_no_update(toy_net, short_video):
    grid = [AblationConfig(True, True, False, True), AblationConfig(True, True, True, True)]
    off, inf = run_ablation(short_video, toy_net.copy(), grid,
                            DefenseParams(update_period=math.inf))
    assert off["mean_mask_iou"] == inf["mean_mask_iou"]
    assert off["resets"] == inf["resets"]


def test_period_sweep_rows(toy_net, short_video):
    rows = run_period_sweep(short_video, toy_net.copy(), [1, 5, math.inf])
    assert [r["period"] for r in rows] == ["1", "5", "inf"]


def test_layer_sweep(toy_net, short_video):
    rows = run_layer_sweep(short_video, toy_net.copy(), [1])
    default = tracking_iou(run_video(short_video, toy_net.copy(), DefenseParams()))
    assert len(rows) == 1 and rows[0]["mean_mask_iou"] == f"{default:.6f}"
    rows = run_layer_sweep(short_video, toy_net.copy(), [1, 2, 3])
    assert [r["layer"] for r in rows] == [1, 2, 3]
    assert [(r["height"], r["gaussian_kernel"], r["dilation_kernel"]) for r in rows] == [
        (64, 3, 5), (32, 1, 3), (16, 1, 1)]
    with pytest.raises(ConfigError):
        run_layer_sweep(short_video, toy_net.copy(), [9])


def test_params_for_layer_keeps_other_fields(toy_net):
    p = replace(DefenseParams(), tau=3.0, update_period=5)
    q = params_for_layer(p, toy_net, 2)
    assert q.monitored_layer == 2 and q.tau == 3.0 and q.update_period == 5


# pass counting ------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 10, 60])
def test_count_passes_detection_then_tracing(k):
    outcomes = [_outcome(DETECTED, 2.0)] + [_outcome(TRACED, 1.0)] * (k - 1)
    pc = count_passes(outcomes)
    assert pc.units == k + 1 and pc.baseline_units == 2 * k
    assert pc.ratio == pytest.approx(0.5 + 1 / (2 * k))


def test_count_passes_edge_cases():
    assert count_passes([_outcome(CLEAN, 1.0)] * 4).ratio == 1.0
    empty = count_passes([])
    assert empty.units == 0 and empty == PassCount(0.0, 0.0)


def test_write_csv(tmp_path):
    write_csv(tmp_path / "r.csv", [{"a": 1, "b": "x"}], ("a", "b"))
    assert (tmp_path / "r.csv").read_text() == "a,b\n1,x\n"
