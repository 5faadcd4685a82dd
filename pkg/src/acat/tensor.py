"""Dense image/feature operations shared by the network, attack and defense code.

Conventions used across the package:

* an activation tensor is a float64 ``ndarray`` of shape ``(C, H, W)``;
* a heatmap is a float64 ``ndarray`` of shape ``(H, W)``;
* a binary mask is a ``uint8`` ``ndarray`` of shape ``(H, W)`` holding only
  0 and 1. Defense masks use 0 for adversarial and 1 for clean pixels.

All functions are pure: inputs are never modified in place.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


def as_tensor(x) -> np.ndarray:
    t = np.asarray(x, dtype=np.float64)
    if t.ndim != 3:
        raise ConfigError(f"expected a (C, H, W) tensor, got shape {t.shape}")
    return t


def as_mask(m) -> np.ndarray:
    a = np.asarray(m)
    if a.ndim != 2:
        raise ConfigError(f"expected an (H, W) mask, got shape {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ConfigError("mask values must be exactly 0 or 1")
    return a.astype(np.uint8)


def complement(mask: np.ndarray) -> np.ndarray:
    return (1 - as_mask(mask)).astype(np.uint8)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (C, H, W) with ``weight`` (O, C, kH, kW), zero padded."""
    x = as_tensor(x)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise ConfigError(
            f"kernel shape {weight.shape} does not match input channels {x.shape[0]}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} / padding={padding}")
    out_c, _, kh, kw = weight.shape
    h, w = x.shape[1:]
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    out = np.zeros((out_c, ho, wo))
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, u:u + stride * (ho - 1) + 1:stride, v:v + stride * (wo - 1) + 1:stride]
            out += np.tensordot(weight[:, :, u, v], patch, axes=(1, 0))
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (out_c,):
            raise ConfigError(f"bias shape {bias.shape} != ({out_c},)")
        out += bias[:, None, None]
    return out


def gaussian_kernel1d(kernel_size: int, sigma: float | None = None) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"gaussian kernel size must be odd and >= 1, got {kernel_size}")
    if sigma is None:
        sigma = kernel_size / 4.0
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_rows(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    p = np.pad(a, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(a)
    for i, wt in enumerate(k):
        out += wt * p[:, i:i + a.shape[1]]
    return out


def gaussian_filter(heatmap: np.ndarray, kernel_size: int,
                    sigma: float | None = None) -> np.ndarray:
    """Separable Gaussian blur with replicate edges; ``sigma`` defaults to kernel_size/4."""
    k = gaussian_kernel1d(kernel_size, sigma)
    m = np.asarray(heatmap, dtype=np.float64)
    if kernel_size == 1:
        return m.copy()
    return _correlate_rows(_correlate_rows(m, k).T, k).T


def expand_mask(adversarial: np.ndarray, kernel_size: int, bin_threshold: float = 0.5,
                normalized: bool = False) -> np.ndarray:
    """Grow an adversarial-indicator map (1 = adversarial) into an exclusion map.

    The indicator is convolved with a ``kernel_size`` square of ones (zero
    padding) and re-binarized with ``> bin_threshold``. With the default
    threshold this is a plain dilation. ``normalized=True`` divides the kernel
    by its area instead, which acts as a majority filter.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"dilation kernel size must be odd and >= 1, got {kernel_size}")
    a = as_mask(adversarial).astype(np.float64)
    r = kernel_size // 2
    p = np.pad(a, r)
    h, w = a.shape
    acc = np.zeros_like(a)
    for u in range(kernel_size):
        for v in range(kernel_size):
            acc += p[u:u + h, v:v + w]
    if normalized:
        acc /= kernel_size * kernel_size
    return (acc > bin_threshold).astype(np.uint8)


def resize_mask(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour resize with ``src = floor(dst * src_dim / dst_dim)``."""
    if target_h < 1 or target_w < 1:
        raise ConfigError(f"invalid target size {target_h}x{target_w}")
    m = as_mask(mask)
    h, w = m.shape
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    return m[rows[:, None], cols[None, :]]


def percentile(values, v: float) -> float:
    """Linear interpolation between closest ranks, position ``(n-1) * v / 100``."""
    a = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if a.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 <= v <= 100.0:
        raise ValueError(f"percentile rank must be in [0, 100], got {v}")
    p = (a.size - 1) * v / 100.0
    lo = math.floor(p)
    hi = math.ceil(p)
    return float(a[lo] + (p - lo) * (a[hi] - a[lo]))


def spatial_mask_apply(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = as_tensor(features)
    m = as_mask(mask)
    if m.shape != x.shape[1:]:
        raise ConfigError(f"mask {m.shape} does not match feature map {x.shape[1:]}")
    return x * m[None, :, :]
