"""Flat key=value run configuration with typed fields and CLI overrides."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .attack import AttackConfig
from .defense import DefenseParams
from .errors import ConfigError

FLAG_NAMES = ("att+", "att-", "upd", "nf")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def parse_period(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity", "never"):
        return math.inf
    return int(t)


def parse_flags(text: str) -> frozenset[str]:
    t = text.strip().lower()
    if t in ("", "none"):
        return frozenset()
    names = [n.strip() for n in t.split(",") if n.strip()]
    bad = [n for n in names if n not in FLAG_NAMES]
    if bad:
        raise ValueError(f"unknown flag(s) {', '.join(bad)}; expected a subset of {','.join(FLAG_NAMES)}")
    return frozenset(names)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _period_list(text: str) -> tuple[float, ...]:
    return tuple(parse_period(v) for v in text.split(",") if v.strip())


def _provider(text: str) -> str:
    t = text.strip().lower()
    if t not in ("gt", "detector"):
        raise ValueError(f"provider must be gt or detector, got {text!r}")
    return t


def _fmt_period(p: float) -> str:
    return "inf" if math.isinf(p) else str(int(p))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = ""
    net: str = ""
    patch: str = ""
    data: str = ""
    # defense
    layer: int = 1
    tau: float = 2.0
    gaussian_kernel: int = 3
    gaussian_sigma: float | None = None
    dilation_kernel: int = 5
    dilation_threshold: float = 0.5
    dilation_normalized: bool = False
    percentile_v: float = 70.0
    apply_layer: int | None = None
    flags: frozenset = frozenset(FLAG_NAMES)
    period: float = 1
    lambda_m: int | None = None
    provider: str = "gt"
    require_gt: bool = False
    # single-frame detector
    deep_layer: int = 3
    detector_margin: float = 1.1
    calib_count: int = 8
    # training
    epochs: int = 15
    lr: float = 0.05
    n_train: int = 160
    height: int = 64
    width: int = 64
    # attack
    beta: float = 1.0
    steps: int = 200
    step_size: float = 4.0 / 255.0
    target: int | None = 2
    eot: int = 2
    patch_height: int = 20
    patch_width: int = 20
    s_min: float = 0.7
    s_max: float = 1.3
    margin: float = 12.0
    attack_images: int = 40
    # video
    frames: int = 60
    speed: float = 0.5
    # sweeps
    periods: tuple = (1, 5, 10, 30)
    layers: tuple = (1, 2, 3)

    def defense_params(self) -> DefenseParams:
        return DefenseParams(
            monitored_layer=self.layer, tau=self.tau, gaussian_kernel=self.gaussian_kernel,
            gaussian_sigma=self.gaussian_sigma, dilation_kernel=self.dilation_kernel,
            dilation_threshold=self.dilation_threshold,
            dilation_normalized=self.dilation_normalized, percentile_v=self.percentile_v,
            apply_layer=self.apply_layer, nf_enabled="nf" in self.flags,
            att_plus_enabled="att+" in self.flags, att_minus_enabled="att-" in self.flags,
            upd_enabled="upd" in self.flags, update_period=self.period)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(beta=self.beta, steps=self.steps, step_size=self.step_size,
                            monitored_layers=(self.layer,), target=self.target,
                            eot_samples_per_step=self.eot,
                            patch_hw=(self.patch_height, self.patch_width),
                            s_min=self.s_min, s_max=self.s_max, margin=self.margin)

    def to_text(self) -> str:
        return "".join(f"{f.name}={format_value(f.name, getattr(self, f.name))}\n"
                       for f in fields(self))


_PARSERS = {
    "seed": int, "out": str, "net": str, "patch": str, "data": str,
    "layer": int, "tau": float, "gaussian_kernel": int, "gaussian_sigma": _opt(float),
    "dilation_kernel": int, "dilation_threshold": float, "dilation_normalized": _bool,
    "percentile_v": float, "apply_layer": _opt(int), "flags": parse_flags,
    "period": parse_period, "lambda_m": _opt(int), "provider": _provider,
    "require_gt": _bool, "deep_layer": int, "detector_margin": float, "calib_count": int,
    "epochs": int, "lr": float, "n_train": int, "height": int, "width": int,
    "beta": float, "steps": int, "step_size": float, "target": _opt(int), "eot": int,
    "patch_height": int, "patch_width": int, "s_min": float, "s_max": float,
    "margin": float, "attack_images": int, "frames": int, "speed": float,
    "periods": _period_list, "layers": _int_list,
}
KEYS = tuple(_PARSERS)


def format_value(key: str, value) -> str:
    if value is None:
        return "none"
    if key == "flags":
        return ",".join(n for n in FLAG_NAMES if n in value) or "none"
    if key == "period":
        return _fmt_period(value)
    if key == "periods":
        return ",".join(_fmt_period(p) for p in value)
    if key == "layers":
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def read_config_file(path) -> dict[str, object]:
    """Parse ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key = key.strip().replace("-", "_")
        if key not in _PARSERS:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = parse_value(key, value.strip())
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Built-in defaults, then the config file, then command-line overrides."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    cfg = replace(RunConfig(), **merged)
    cfg.defense_params()  # validates the defense fields
    cfg.attack_config()
    return cfg
