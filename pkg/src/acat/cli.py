"""Command-line entry point: ``acat <subcommand> [options]``.

Exit codes: 0 success, 1 configuration or input validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, attack, config, evaluation, scenes, train
from .errors import AcatError, ConfigError, DataError
from .net import load_weights, save_weights
from .pipeline import write_event_log

log = logging.getLogger("acat")

# flag name -> config key; every flag also exists as a config-file key
_FLAG_KEYS = {
    "seed": "seed", "out": "out", "net": "net", "patch": "patch", "data": "data",
    "layer": "layer", "beta": "beta", "tau": "tau", "period": "period",
    "lambda-m": "lambda_m", "provider": "provider", "flags": "flags",
    "epochs": "epochs", "frames": "frames", "speed": "speed", "steps": "steps",
    "periods": "periods", "layers": "layers",
}
SUBCOMMANDS = ("train-toy", "craft-patch", "gen-video", "run-defense", "ablate",
               "sweep-period", "sweep-layer", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    for flag in _FLAG_KEYS:
        p.add_argument(f"--{flag}", dest=_FLAG_KEYS[flag].replace("-", "_"), default=None)
    p.add_argument("--require-gt", dest="require_gt", action="store_const", const="true",
                   default=None, help="fail when the dataset has no ground-truth masks")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acat", description="Adversarial-trace patch defense toolkit",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, allow_abbrev=False)
        _add_common(p)
        if name == "report":
            p.add_argument("inputs", nargs="+", help="results CSV files sharing one schema")
    return parser


def resolve_config(args: argparse.Namespace) -> config.RunConfig:
    file_values = config.read_config_file(args.config) if args.config else {}
    overrides = {}
    for key in set(_FLAG_KEYS.values()) | {"require_gt"}:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = config.parse_value(key, value)
    return config.resolve(file_values, overrides)


# run directories --------------------------------------------------------------

def _run_dir(cfg: config.RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("--out is required")
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e.strerror}") from None
    (out / "config.txt").write_text(cfg.to_text())
    (out / "VERSION").write_text(f"acat {__version__}\n")
    return out


def _require(cfg: config.RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"--{key} is required")
    path = Path(value)
    if not path.exists():
        raise ConfigError(f"{key} path {path} does not exist")
    return path


def _load_net(cfg):
    return load_weights(_require(cfg, "net"))


def _load_patch(cfg):
    return attack.load_patch(_require(cfg, "patch"))[0]


def _load_video(cfg):
    return evaluation.load_video_dataset(_require(cfg, "data"), require_gt=cfg.require_gt)


def _calibration(cfg, net):
    if cfg.provider != "detector":
        return None
    return evaluation.default_calibration(net, cfg.seed, cfg.calib_count,
                                          cfg.deep_layer, cfg.detector_margin)


def _write(out: Path, rows, columns, name: str = "results.csv") -> None:
    evaluation.write_csv(out / name, rows, columns)


# subcommands --------------------------------------------------------------

def cmd_train_toy(cfg) -> None:
    out = _run_dir(cfg)
    history: list[float] = []
    net = train.train_toy_model(cfg.seed, cfg.epochs, cfg.lr, cfg.n_train,
                                (cfg.height, cfg.width), history=history)
    save_weights(net, out / "model.acw")
    held = scenes.training_set(cfg.seed + 1000, 20, cfg.height, cfg.width)
    rows = [{"epoch": k, "mean_loss": f"{v:.6f}"} for k, v in enumerate(history)]
    _write(out, rows, ("epoch", "mean_loss"))
    acc = train.pixel_accuracy(net, held)
    (out / "accuracy.txt").write_text(f"heldout_pixel_accuracy={acc:.6f}\n")
    log.info("trained for %d epochs, held-out pixel accuracy %.4f", cfg.epochs, acc)


def cmd_craft_patch(cfg) -> None:
    out = _run_dir(cfg)
    net = _load_net(cfg)
    acfg = cfg.attack_config()
    hw = (cfg.height, cfg.width)
    images = scenes.training_set(cfg.seed + 500, cfg.attack_images, *hw, mode=scenes.DAY)
    patch = attack.optimize_patch(net, images, acfg, seed=cfg.seed)
    attack.save_patch(patch, out / "patch.ppm", {"beta": cfg.beta, "steps": cfg.steps,
                                                 "seed": cfg.seed})
    held = scenes.training_set(cfg.seed + 777, 10, *hw, mode=scenes.DAY)
    pls = attack.heldout_placements(cfg.seed + 5, len(held), hw, acfg)
    row = {
        "beta": repr(cfg.beta),
        "clean_accuracy": f"{attack.clean_region_accuracy(net, patch, held, pls, attacked=False):.6f}",
        "attacked_accuracy": f"{attack.clean_region_accuracy(net, patch, held, pls):.6f}",
        "patch_energy": f"{attack.activation_energy(net, patch, held, pls, cfg.layer):.6f}",
    }
    _write(out, [row], tuple(row))


def cmd_gen_video(cfg) -> None:
    out = _run_dir(cfg)
    patch = _load_patch(cfg)
    video = evaluation.gen_video_dataset(cfg.seed, cfg.frames, (cfg.height, cfg.width), patch,
                                         None, out, cfg.speed, patch_ref=str(cfg.patch))
    rows = [{"frame_index": k, "patch_pixels": int(m.sum())} for k, m in enumerate(video.gt_masks)]
    _write(out, rows, ("frame_index", "patch_pixels"))


def cmd_run_defense(cfg) -> None:
    out = _run_dir(cfg)
    net, video = _load_net(cfg), _load_video(cfg)
    result = evaluation.run_video(video, net, cfg.defense_params(), cfg.provider,
                                  cfg.lambda_m, _calibration(cfg, net))
    write_event_log(out / "events.csv", result.outcomes)
    passes = evaluation.count_passes(result.outcomes)
    iou = evaluation.tracking_iou(result)
    row = {"frames": len(video), "mean_mask_iou": "nan" if math.isnan(iou) else f"{iou:.6f}",
           "resets": len(result.reset_frames), "pass_units": f"{passes.units:.6g}",
           "baseline_units": f"{passes.baseline_units:.6g}", "pass_ratio": f"{passes.ratio:.6f}"}
    _write(out, [row], tuple(row))


def _sweep_video(cfg):
    net, video = _load_net(cfg), _load_video(cfg)
    if not any(m.any() for m in video.gt_masks):
        raise ConfigError("mask-IoU experiments need ground-truth masks")
    return net, video


def cmd_ablate(cfg) -> None:
    out = _run_dir(cfg)
    net, video = _sweep_video(cfg)
    grid = [evaluation.AblationConfig(c.att_plus, c.att_minus, c.upd, c.nf, cfg.provider)
            for c in evaluation.ABLATION_GRID]
    rows = evaluation.run_ablation(video, net, grid, cfg.defense_params(), _calibration(cfg, net))
    _write(out, rows, evaluation.ABLATION_COLUMNS)


def cmd_sweep_period(cfg) -> None:
    out = _run_dir(cfg)
    net, video = _sweep_video(cfg)
    rows = evaluation.run_period_sweep(video, net, cfg.periods, cfg.defense_params(),
                                       cfg.provider, _calibration(cfg, net))
    _write(out, rows, evaluation.PERIOD_COLUMNS)


def cmd_sweep_layer(cfg) -> None:
    out = _run_dir(cfg)
    net, video = _sweep_video(cfg)
    rows = evaluation.run_layer_sweep(video, net, cfg.layers, cfg.defense_params(),
                                      cfg.provider, _calibration(cfg, net))
    _write(out, rows, evaluation.LAYER_COLUMNS)


# report ---------------------------------------------------------------------

def _read_csv(path) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            return list(reader.fieldnames or []), rows
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e.strerror}") from None


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def summarize(paths) -> tuple[list[str], list[dict]]:
    """Group rows by their non-numeric and integer-id columns; mean/stddev of the rest."""
    schema, rows = None, []
    for p in paths:
        cols, r = _read_csv(p)
        if schema is None:
            schema = cols
        elif cols != schema:
            missing = sorted(set(schema) - set(cols))
            extra = sorted(set(cols) - set(schema))
            raise DataError(f"{p}: schema mismatch (missing {missing}, unexpected {extra})")
        rows.extend(r)
    if not rows:
        raise DataError("no result rows to summarize")
    numeric = [c for c in schema if all(_is_number(r[c]) for r in rows)]
    keys = [c for c in schema if c not in numeric or c in _KEY_COLUMNS]
    values = [c for c in numeric if c not in keys]
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[c] for c in keys), []).append(r)
    header = keys + ["n"] + [f"{c}_{s}" for c in values for s in ("mean", "std")]
    out = []
    for gk, members in groups.items():
        row = dict(zip(keys, gk))
        row["n"] = len(members)
        for c in values:
            v = np.array([float(m[c]) for m in members])
            row[f"{c}_mean"] = f"{v.mean():.6f}"
            row[f"{c}_std"] = f"{v.std():.6f}"
        out.append(row)
    return header, out


_KEY_COLUMNS = ("config", "att_plus", "att_minus", "upd", "nf", "provider", "period",
                "layer", "height", "width", "gaussian_kernel", "dilation_kernel",
                "frame_index", "epoch", "beta", "frames")


def cmd_report(cfg, inputs) -> None:
    header, rows = summarize(inputs)
    out = _run_dir(cfg) if cfg.out else None
    lines = [" ".join(header)] + [" ".join(str(r[c]) for c in header) for r in rows]
    print("\n".join(lines))
    if out is not None:
        _write(out, rows, header, "results.csv")
        (out / "summary.dat").write_text("# " + "\n".join(lines) + "\n")


_COMMANDS = {
    "train-toy": cmd_train_toy, "craft-patch": cmd_craft_patch, "gen-video": cmd_gen_video,
    "run-defense": cmd_run_defense, "ablate": cmd_ablate, "sweep-period": cmd_sweep_period,
    "sweep-layer": cmd_sweep_layer,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        cfg = resolve_config(args)
        if args.command == "report":
            cmd_report(cfg, args.inputs)
        else:
            _COMMANDS[args.command](cfg)
    except (ConfigError, DataError) as e:
        print(f"acat: error: {e}", file=sys.stderr)
        return 1
    except (AcatError, OSError) as e:
        print(f"acat: runtime error: {e}", file=sys.stderr)
        return 2
    return 0
