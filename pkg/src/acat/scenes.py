"""Procedural street-like scenes with per-pixel labels known by construction.

Objects are densely packed, muted-colour textured blobs: horizontal
stripes, vertical stripes, or a checkerboard. In ordinary ("day") scenes
those map to classes 1, 2 and 3. In "alert" scenes a saturated yellow
beacon with a dark border is visible and every object is
labelled class 2, so the correct label of an object depends on global
context, not only on its local texture. Class 0 is background (the beacon
itself is background).

A scene is rendered once on a canvas wider than the frame; frames are
horizontal crops of that canvas that scroll by ``speed`` pixels per frame
(wrapping around), so consecutive frames change smoothly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_COUNT = 4
DAY, ALERT = 0, 1
BEACON_SIZE = 11
_DAY_CLASSES = (1, 2, 3)  # stripes-h, stripes-v, checker
_ALERT_CLASS = 2
TEXTURE_CONTRAST = (0.15, 0.3)
OBJECT_COLOR = (0.3, 0.7)
OBJECT_TINT = 0.15
SHAPES_PER_FRAME = (6, 12)


@dataclass(frozen=True)
class Scene:
    image: np.ndarray   # (3, H, Wc) canvas
    labels: np.ndarray  # (H, Wc) canvas

    def frame(self, k: int, width: int, speed: float = 0.0):
        wc = self.image.shape[2]
        offset = int(round(speed * k))
        cols = (offset + np.arange(width)) % wc
        return self.image[:, :, cols].copy(), self.labels[:, cols].copy()


def _texture(kind: int, yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
    if kind == 0:
        return (yi // 2) % 2
    if kind == 1:
        return (xi // 2) % 2
    return ((yi // 2) + (xi // 2)) % 2


def _draw_beacon(img, labels, top: int, left: int) -> None:
    s = BEACON_SIZE
    img[:, top:top + s, left:left + s] = 0.05
    img[:, top + 1:top + s - 1, left + 1:left + s - 1] = np.array([1.0, 0.9, 0.1])[:, None, None]
    labels[top:top + s, left:left + s] = 0


def random_scene(rng: np.random.Generator, height: int, width: int,
                 n_shapes: int | None = None, canvas_factor: int = 2,
                 mode: int | None = None) -> Scene:
    """Render one scene. ``mode`` is DAY, ALERT, or None to draw it at random."""
    wc = width * canvas_factor
    yy, xx = np.mgrid[0:height, 0:wc].astype(np.float64)
    yi, xi = np.mgrid[0:height, 0:wc]
    drawn = int(rng.integers(2))
    mode = drawn if mode is None else mode
    if mode not in (DAY, ALERT):
        raise ValueError(f"unknown scene mode {mode}")
    base = rng.uniform(0.3, 0.6)
    tilt = rng.uniform(-0.1, 0.1)
    gray = base + tilt * (yy / height - 0.5)
    img = np.repeat(gray[None], 3, axis=0) + rng.uniform(-0.05, 0.05, 3)[:, None, None]
    labels = np.zeros((height, wc), dtype=np.int64)

    if n_shapes is None:
        n_shapes = int(rng.integers(*SHAPES_PER_FRAME)) * canvas_factor
    for _ in range(n_shapes):
        kind = int(rng.integers(0, 3))
        cy, cx = rng.uniform(0, height), rng.uniform(0, wc)
        ry = rng.uniform(0.1, 0.25) * height
        rx = rng.uniform(0.1, 0.25) * height
        if rng.random() < 0.5:
            region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        # muted object colours keep strong saturation unique to the beacon
        c1 = np.clip(rng.uniform(*OBJECT_COLOR) + rng.uniform(-OBJECT_TINT, OBJECT_TINT, 3), 0, 1)
        c2 = np.clip(c1 + rng.choice([-1, 1], 3) * rng.uniform(*TEXTURE_CONTRAST, 3), 0, 1)
        pattern = _texture(kind, yi, xi)
        tex = np.where(pattern[None] == 1, c1[:, None, None], c2[:, None, None])
        img[:, region] = tex[:, region]
        labels[region] = _DAY_CLASSES[kind] if mode == DAY else _ALERT_CLASS

    if mode == ALERT:
        # one beacon per frame-width of canvas so every crop sees one
        for k in range(canvas_factor):
            top = int(rng.integers(2, height - BEACON_SIZE - 2))
            left = int(rng.integers(2, width - BEACON_SIZE - 2)) + k * width
            _draw_beacon(img, labels, top, left)

    img += rng.normal(0.0, 0.02, size=img.shape)
    return Scene(np.clip(img, 0.0, 1.0), labels)


def training_set(seed: int, count: int, height: int = 64, width: int = 64,
                 mode: int | None = None):
    """``count`` independent (image, labels) pairs; mixed modes unless ``mode`` is set."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        scene = random_scene(rng, height, width, canvas_factor=1, mode=mode)
        out.append((scene.image, scene.labels))
    return out
