"""Attacked-video datasets and the experiment runners built on the tracking loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import scenes
from .attack import AdversarialPatch, MotionParams, paste_patch, patch_trajectory
from .defense import (BaselineDetector, CalibrationRecord, DefenseParams,
                      GroundTruthProvider, binarize, calibrate, compute_heatmap, update_trace)
from .errors import ConfigError, DataError
from .imageio import quantize, read_pgm_raw, read_ppm, write_pgm_raw, write_ppm
from .metrics import mask_iou
from .net import SlicedNetwork, cross_entropy
from .pipeline import (CLEAN, DETECTED, AcatState, StreamResult, default_lambda_m, layer_gt,
                       run_stream)

DEFAULT_SPEED = 0.5


@dataclass
class VideoData:
    frames: list[np.ndarray]     # (3, H, W), 8-bit quantized
    gt_masks: list[np.ndarray]   # (H, W), 1 = patch
    labels: list[np.ndarray]     # (H, W) class index
    manifest: dict[str, str]

    def __post_init__(self):
        if not (len(self.frames) == len(self.gt_masks) == len(self.labels)):
            raise DataError(f"{len(self.frames)} frames, {len(self.gt_masks)} masks, "
                            f"{len(self.labels)} label maps")

    def __len__(self) -> int:
        return len(self.frames)


def draw_omegas(seed: int) -> tuple[float, float, float]:
    """Phase offsets of the patch motion, one draw per seed."""
    rng = np.random.default_rng([seed, 1])
    return tuple(float(v) for v in rng.uniform(0.0, 2.0 * math.pi, 3))


def make_video(seed: int, num_frames: int, frame_hw, patch: AdversarialPatch,
               motion: MotionParams | None = None, speed: float = DEFAULT_SPEED) -> VideoData:
    """Scrolling day scene with the patch following its sinusoidal trajectory.

    ``motion`` defaults to the rescaled reference amplitudes with seeded phases.
    """
    if num_frames < 1:
        raise ConfigError("num_frames must be >= 1")
    h, w = frame_hw
    if motion is None:
        motion = MotionParams.for_frame(w, h, draw_omegas(seed))
    scene = scenes.random_scene(np.random.default_rng(seed), h, w, mode=scenes.DAY)
    frames, masks, labels = [], [], []
    for k in range(num_frames):
        image, lab = scene.frame(k, w, speed)
        attacked, gt = paste_patch(image, patch, patch_trajectory(motion, k))
        frames.append(quantize(attacked))
        masks.append(gt)
        labels.append(lab)
    manifest = {
        "seed": str(seed), "num_frames": str(num_frames), "height": str(h), "width": str(w),
        "speed": repr(float(speed)),
        "patch_height": str(patch.size[0]), "patch_width": str(patch.size[1]),
    }
    for name in ("c_x", "c_y", "a_x", "a_y", "a_s", "alpha_x", "alpha_y", "alpha_s",
                 "omega_x", "omega_y", "omega_s"):
        manifest[f"motion.{name}"] = repr(float(getattr(motion, name)))
    return VideoData(frames, masks, labels, manifest)


def write_video_dataset(video: VideoData, out_dir, patch_ref: str = "") -> Path:
    out = Path(out_dir)
    for sub in ("frames", "masks", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for k, (x, m, y) in enumerate(zip(video.frames, video.gt_masks, video.labels)):
        write_ppm(out / "frames" / f"{k:06d}.ppm", x)
        write_pgm_raw(out / "masks" / f"{k:06d}.pgm", m.astype(np.uint8) * 255)
        write_pgm_raw(out / "labels" / f"{k:06d}.pgm", y.astype(np.uint8))
    manifest = dict(video.manifest)
    if patch_ref:
        manifest["patch"] = patch_ref
    (out / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))
    return out


def gen_video_dataset(seed: int, num_frames: int, frame_hw, patch: AdversarialPatch,
                      motion: MotionParams | None, out_dir, speed: float = DEFAULT_SPEED,
                      patch_ref: str = "") -> VideoData:
    video = make_video(seed, num_frames, frame_hw, patch, motion, speed)
    write_video_dataset(video, out_dir, patch_ref)
    return video


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def load_video_dataset(root, require_gt: bool = False) -> VideoData:
    """Read a dataset directory; missing masks are all-zero unless ``require_gt``."""
    root = Path(root)
    frame_files = sorted((root / "frames").glob("*.ppm"))
    if not frame_files:
        raise DataError(f"{root}: no frames found")
    manifest = read_manifest(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    frames, masks, labels = [], [], []
    for f in frame_files:
        x = read_ppm(f)
        frames.append(x)
        mpath = root / "masks" / (f.stem + ".pgm")
        if mpath.exists():
            raw = read_pgm_raw(mpath)
            if not np.isin(raw, (0, 255)).all():
                raise DataError(f"{mpath}: mask pixels must be 0 or 255")
            masks.append((raw == 255).astype(np.uint8))
        elif require_gt:
            raise DataError(f"{root}: ground-truth mask {mpath.name} is missing")
        else:
            masks.append(np.zeros(x.shape[1:], dtype=np.uint8))
        lpath = root / "labels" / (f.stem + ".pgm")
        labels.append(read_pgm_raw(lpath).astype(np.int64) if lpath.exists()
                      else np.zeros(x.shape[1:], dtype=np.int64))
    return VideoData(frames, masks, labels, manifest)


# providers ------------------------------------------------------------------

def calibration_frames(seed: int, count: int, frame_hw) -> list[np.ndarray]:
    return [x for x, _ in scenes.training_set(seed, count, *frame_hw, mode=scenes.DAY)]


def make_provider(kind: str, video: VideoData, net: SlicedNetwork, params: DefenseParams,
                  calib: CalibrationRecord | None = None):
    hw = net.shape_at(params.monitored_layer)[1:]
    if kind == "gt":
        return GroundTruthProvider(video.gt_masks, hw)
    if kind == "detector":
        if calib is None:
            raise ConfigError("the detector provider needs a calibration record")
        return BaselineDetector(calib, hw)
    raise ConfigError(f"unknown provider {kind!r} (expected gt or detector)")


def default_calibration(net: SlicedNetwork, seed: int = 0, count: int = 8,
                        deep_layer: int = 3, margin: float = 1.1) -> CalibrationRecord:
    frames = calibration_frames(seed, count, net.input_shape[1:])
    return calibrate(net, frames, deep_layer, margin)


def run_video(video: VideoData, net: SlicedNetwork, params: DefenseParams, provider: str = "gt",
              lambda_m: int | None = None, calib: CalibrationRecord | None = None) -> StreamResult:
    params.validate_for(net)
    if lambda_m is None:
        lambda_m = default_lambda_m(net, params.monitored_layer)
    detector = make_provider(provider, video, net, params, calib)
    return run_stream(AcatState(params, lambda_m), net, video.frames, detector, video.gt_masks)


def tracking_iou(result: StreamResult) -> float:
    """Mean Mask-IoU over the frames that follow the first detection (nan if none)."""
    modes = result.modes
    if DETECTED not in modes:
        return float("nan")
    first = modes.index(DETECTED)
    vals = [o.mask_iou for o in result.outcomes[first + 1:]]
    return float(np.mean(vals)) if vals else float("nan")


# trace observations ---------------------------------------------------------

@dataclass(frozen=True)
class TraceObservation:
    adv_loss_plain: float      # attacker loss with the raw layer-l features
    adv_loss_weighted: float   # same with the GT-mask trace applied as channel weights
    best_iou_attention: float  # best single-threshold Mask-IoU of the traced heatmap
    best_iou_plain: float      # same for the unweighted channel sum


def best_threshold_iou(heatmap: np.ndarray, gt_mask: np.ndarray) -> float:
    """Highest Mask-IoU reachable by binarizing ``heatmap`` at any one threshold."""
    vals = np.unique(heatmap)
    return max(mask_iou(binarize(heatmap, t), gt_mask) for t in np.append(vals, vals[0] - 1.0))


def observe_trace(net: SlicedNetwork, patch: AdversarialPatch, image, placement,
                  params: DefenseParams, target: int | None = 2) -> TraceObservation:
    """Compare features with and without the GT-mask trace on one attacked image."""
    l, n = params.monitored_layer, net.num_layers
    attacked, gt = paste_patch(image, patch, placement)
    h = net.forward_slice(attacked, 0, l)
    mask = layer_gt(gt, net, l)
    sigma = update_trace(h, mask, params)
    weights = (1 - gt).astype(np.float64)
    labels = np.full(gt.shape, 0 if target is None else target)

    def adv_loss(feats):
        return cross_entropy(net.forward_slice(feats, l, n), labels, weights)[0]

    plain = replace(params, att_plus_enabled=False, att_minus_enabled=False)
    return TraceObservation(
        adv_loss(h), adv_loss(sigma[:, None, None] * h),
        best_threshold_iou(compute_heatmap(h, sigma, params), mask),
        best_threshold_iou(compute_heatmap(h, sigma, plain), mask))


# experiment runners ---------------------------------------------------------

@dataclass(frozen=True)
class AblationConfig:
    att_plus: bool
    att_minus: bool
    upd: bool
    nf: bool
    provider: str = "gt"

    @property
    def label(self) -> str:
        on = [n for n, f in (("att+", self.att_plus), ("att-", self.att_minus),
                             ("upd", self.upd), ("nf", self.nf)) if f]
        return ",".join(on) if on else "none"


# flag rows of the component ablation: none, NF only, then the trace terms
ABLATION_GRID = tuple(AblationConfig(*flags) for flags in (
    (False, False, False, False),
    (False, False, False, True),
    (True, False, False, False),
    (False, True, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, False, True),
    (True, True, True, True),
))

ABLATION_COLUMNS = ("config", "att_plus", "att_minus", "upd", "nf", "provider",
                    "mean_mask_iou", "resets", "pass_units")


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def run_ablation(video: VideoData, net: SlicedNetwork,
                 grid: Sequence[AblationConfig] = ABLATION_GRID,
                 params: DefenseParams | None = None,
                 calib: CalibrationRecord | None = None) -> list[dict]:
    params = params or DefenseParams()
    rows = []
    for cell in grid:
        p = params.with_flags(cell.att_plus, cell.att_minus, cell.upd, cell.nf)
        r = run_video(video, net, p, cell.provider, calib=calib)
        rows.append({
            "config": cell.label, "att_plus": int(cell.att_plus), "att_minus": int(cell.att_minus),
            "upd": int(cell.upd), "nf": int(cell.nf), "provider": cell.provider,
            "mean_mask_iou": _fmt(tracking_iou(r)), "resets": len(r.reset_frames),
            "pass_units": f"{r.total_units:.6g}",
        })
    return rows


PERIOD_COLUMNS = ("period", "mean_mask_iou", "resets", "pass_units")


def run_period_sweep(video: VideoData, net: SlicedNetwork, periods: Sequence[float],
                     params: DefenseParams | None = None, provider: str = "gt",
                     calib: CalibrationRecord | None = None) -> list[dict]:
    params = params or DefenseParams()
    rows = []
    for period in periods:
        r = run_video(video, net, replace(params, update_period=period), provider, calib=calib)
        rows.append({"period": "inf" if math.isinf(period) else str(int(period)),
                     "mean_mask_iou": _fmt(tracking_iou(r)), "resets": len(r.reset_frames),
                     "pass_units": f"{r.total_units:.6g}"})
    return rows


def _odd_scaled(k: int, factor: float) -> int:
    return max(1, 2 * int(round((k * factor - 1) / 2)) + 1)


def params_for_layer(params: DefenseParams, net: SlicedNetwork, layer: int,
                     reference_layer: int = 1) -> DefenseParams:
    """Move monitoring to ``layer``, scaling kernel sizes with its spatial size."""
    factor = net.shape_at(layer)[1] / net.shape_at(reference_layer)[1]
    return replace(params, monitored_layer=layer, apply_layer=None,
                   gaussian_kernel=_odd_scaled(params.gaussian_kernel, factor),
                   dilation_kernel=_odd_scaled(params.dilation_kernel, factor))


LAYER_COLUMNS = ("layer", "height", "width", "gaussian_kernel", "dilation_kernel",
                 "mean_mask_iou", "resets")


def run_layer_sweep(video: VideoData, net: SlicedNetwork, layers: Sequence[int],
                    params: DefenseParams | None = None, provider: str = "gt",
                    calib: CalibrationRecord | None = None,
                    scale_kernels: bool = True) -> list[dict]:
    params = params or DefenseParams()
    rows = []
    for layer in layers:
        if not 1 <= layer <= net.num_layers:
            raise ConfigError(f"layer {layer} out of range 1..{net.num_layers}")
        if scale_kernels:
            p = params_for_layer(params, net, layer, params.monitored_layer)
        else:
            p = replace(params, monitored_layer=layer, apply_layer=None)
        r = run_video(video, net, p, provider, calib=calib)
        _, h, w = net.shape_at(layer)
        rows.append({"layer": layer, "height": h, "width": w,
                     "gaussian_kernel": p.gaussian_kernel, "dilation_kernel": p.dilation_kernel,
                     "mean_mask_iou": _fmt(tracking_iou(r)), "resets": len(r.reset_frames)})
    return rows


@dataclass(frozen=True)
class PassCount:
    units: float
    baseline_units: float

    @property
    def ratio(self) -> float:
        return self.units / self.baseline_units if self.baseline_units else 1.0


def count_passes(outcomes) -> PassCount:
    """Total pass units, and what a detect-then-defend pipeline would spend:
    two passes on every attacked frame, one on every clean frame."""
    units = float(sum(o.forward_pass_units for o in outcomes))
    baseline = float(sum(1 if o.mode == CLEAN else 2 for o in outcomes))
    return PassCount(units, baseline)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)
