"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return buf[start:pos], pos


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    tok, pos = _read_token(buf, 0)
    if tok != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {tok[:8]!r}", 0)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"{path}: bad header field {tok!r}", pos) from None
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})", pos)
    pos += 1  # single whitespace byte after maxval
    size = width * height * channels
    if len(buf) - pos < size:
        raise FormatError(f"{path}: truncated pixel data", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos)
    return data.reshape(height, width, channels)


def _write_pnm(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(values: np.ndarray) -> np.ndarray:
    """Round-trip ``values`` in [0, 1] through 8-bit storage."""
    return to_uint8(values).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    """Return a (3, H, W) float image in [0, 1]."""
    return _read_pnm(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    _write_pnm(path, b"P6", to_uint8(img).transpose(1, 2, 0))


def read_pgm_raw(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)[:, :, 0].copy()


def write_pgm_raw(path, values: np.ndarray) -> None:
    _write_pnm(path, b"P5", np.asarray(values, dtype=np.uint8))


def read_mask_pgm(path) -> np.ndarray:
    """Read a defense mask stored as 0 = adversarial, 255 = clean."""
    raw = read_pgm_raw(path)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        raise FormatError(f"{path}: mask pixels must be 0 or 255")
    return (raw == 255).astype(np.uint8)


def write_mask_pgm(path, mask: np.ndarray) -> None:
    write_pgm_raw(path, np.asarray(mask, dtype=np.uint8) * 255)


def write_heatmap_pgm(path, heatmap: np.ndarray) -> None:
    """Min-max scale a heatmap to 0..255 for inspection."""
    h = np.asarray(heatmap, dtype=np.float64)
    lo, hi = float(h.min()), float(h.max())
    scaled = np.zeros_like(h) if hi <= lo else (h - lo) / (hi - lo)
    write_pgm_raw(path, to_uint8(scaled))
