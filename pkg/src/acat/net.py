"""A small feed-forward CNN that can be run slice by slice.

Layer index 0 denotes the network input; layer ``j`` (1-based) produces
``h^j``. ``forward_slice(x, i, j)`` maps ``h^i`` to ``h^j`` by running layers
``i+1 .. j``. Every executed layer bumps a per-layer counter, which is what
the pass accounting in :mod:`acat.pipeline` is based on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, StateError
from .tensor import conv2d

MAGIC = b"ACATW1\0"
_INPUT, _CONV, _UPSAMPLE, _CONTEXT_HEAD = 0, 1, 2, 3


@dataclass
class Conv2d:
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    relu: bool = False

    kind = "conv"

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        oc, ic, kh, kw = self.weight.shape
        if c != ic:
            raise ConfigError(f"conv expects {ic} input channels, got {c}")
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigError(f"conv output would be empty for input {in_shape}")
        return (oc, ho, wo)

    def forward(self, x):
        y = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.relu:
            np.maximum(y, 0.0, out=y)
        return y

    def backward(self, x, y, gy, need_params=True):
        if self.relu:
            gy = gy * (y > 0)
        _, _, kh, kw = self.weight.shape
        s, p = self.stride, self.padding
        c, h, w = x.shape
        ho, wo = gy.shape[1:]
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(self.weight) if need_params else None
        for u in range(kh):
            for v in range(kw):
                rows = slice(u, u + s * (ho - 1) + 1, s)
                cols = slice(v, v + s * (wo - 1) + 1, s)
                gxp[:, rows, cols] += np.tensordot(self.weight[:, :, u, v], gy, axes=(0, 0))
                if need_params:
                    gw[:, :, u, v] = np.tensordot(gy, xp[:, rows, cols], axes=([1, 2], [1, 2]))
        gx = gxp[:, p:p + h, p:p + w] if p else gxp
        grads = [gw, gy.sum(axis=(1, 2))] if need_params else None
        return gx, grads


@dataclass
class ContextHead:
    """1x1 classification head plus a global context term.

    ``logits[k, i, j] = sum_c W[k, c] h[c, i, j] + sum_c G[k, c] g[c] + b[k]``
    where ``g[c]`` is the mean of the ``pool_k`` largest values of channel c.
    """
    weight: np.ndarray   # (classes, C)
    gweight: np.ndarray  # (classes, C)
    bias: np.ndarray
    pool_k: int = 16

    kind = "context_head"

    def __post_init__(self):
        if self.pool_k < 1:
            raise ConfigError(f"pool_k must be >= 1, got {self.pool_k}")

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.gweight, self.bias]

    def out_shape(self, in_shape):
        if in_shape[0] != self.weight.shape[1]:
            raise ConfigError(f"head expects {self.weight.shape[1]} channels, got {in_shape[0]}")
        return (self.weight.shape[0],) + tuple(in_shape[1:])

    def _top(self, x):
        flat = x.reshape(x.shape[0], -1)
        k = min(self.pool_k, flat.shape[1])
        idx = np.argpartition(flat, -k, axis=1)[:, -k:]
        return flat, idx, k

    def forward(self, x):
        flat, idx, _ = self._top(x)
        pooled = np.take_along_axis(flat, idx, 1).mean(axis=1)
        local = np.tensordot(self.weight, x, axes=(1, 0))
        return local + (self.gweight @ pooled + self.bias)[:, None, None]

    def backward(self, x, y, gy, need_params=True):
        flat, idx, k = self._top(x)
        gsum = gy.sum(axis=(1, 2))
        gx = np.tensordot(self.weight, gy, axes=(0, 0))
        gflat = gx.reshape(x.shape[0], -1)
        share = (self.gweight.T @ gsum)[:, None] / k
        np.put_along_axis(gflat, idx, np.take_along_axis(gflat, idx, 1) + share, 1)
        if not need_params:
            return gx, None
        pooled = np.take_along_axis(flat, idx, 1).mean(axis=1)
        return gx, [np.tensordot(gy, x, axes=([1, 2], [1, 2])), np.outer(gsum, pooled), gsum]


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """1-D linear interpolation weights, align-corners-false mapping."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


@dataclass
class Upsample:
    out_h: int
    out_w: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    kind = "upsample"

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def out_shape(self, in_shape):
        return (in_shape[0], self.out_h, self.out_w)

    def _mats(self, h, w):
        key = (h, w)
        if key not in self._cache:
            self._cache[key] = (_bilinear_matrix(self.out_h, h), _bilinear_matrix(self.out_w, w))
        return self._cache[key]

    def forward(self, x):
        ry, rx = self._mats(*x.shape[1:])
        return np.einsum("oh,chw,pw->cop", ry, x, rx, optimize=True)

    def backward(self, x, y, gy, need_params=True):
        ry, rx = self._mats(*x.shape[1:])
        return np.einsum("oh,cop,pw->chw", ry, gy, rx, optimize=True), None


class LayerCounter:
    """Per-layer execution counts; index j counts executions of layer j."""

    def __init__(self, num_layers: int):
        self.counts = [0] * (num_layers + 1)

    def reset(self) -> None:
        self.counts = [0] * len(self.counts)

    def hit(self, j: int) -> None:
        self.counts[j] += 1

    @property
    def num_layers(self) -> int:
        return len(self.counts) - 1

    def pass_units(self) -> float:
        """Executed layers expressed in full-network forward passes."""
        return sum(self.counts[1:]) / self.num_layers


class SlicedNetwork:
    def __init__(self, layers, input_shape, class_count: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = int(class_count)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        self.shapes = shapes
        if shapes[-1][0] != self.class_count:
            raise ConfigError(
                f"last layer produces {shapes[-1][0]} channels, expected {self.class_count}")
        self.counter = LayerCounter(len(self.layers))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def shape_at(self, j: int) -> tuple[int, int, int]:
        return self.shapes[j]

    def _check_range(self, i, j):
        if not 0 <= i <= j <= self.num_layers:
            raise ConfigError(f"invalid slice {i}->{j} for a {self.num_layers}-layer network")

    def forward_slice(self, x, from_layer: int, to_layer: int) -> np.ndarray:
        self._check_range(from_layer, to_layer)
        h = np.asarray(x, dtype=np.float64)
        if h.shape != self.shapes[from_layer]:
            raise ConfigError(
                f"input to layer {from_layer} must have shape {self.shapes[from_layer]}, got {h.shape}")
        for j in range(from_layer + 1, to_layer + 1):
            h = self.layers[j - 1].forward(h)
            self.counter.hit(j)
        return h

    def forward(self, x) -> np.ndarray:
        return self.forward_slice(x, 0, self.num_layers)

    def record(self, x, from_layer: int = 0, to_layer: int | None = None) -> list[np.ndarray]:
        """Run a slice and keep every intermediate; ``acts[k]`` is ``h^(from_layer + k)``."""
        to_layer = self.num_layers if to_layer is None else to_layer
        self._check_range(from_layer, to_layer)
        acts = [np.asarray(x, dtype=np.float64)]
        if acts[0].shape != self.shapes[from_layer]:
            raise ConfigError(
                f"input to layer {from_layer} must have shape {self.shapes[from_layer]}, "
                f"got {acts[0].shape}")
        for j in range(from_layer + 1, to_layer + 1):
            acts.append(self.layers[j - 1].forward(acts[-1]))
            self.counter.hit(j)
        return acts

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def copy(self) -> SlicedNetwork:
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                layers.append(Conv2d(layer.weight.copy(), layer.bias.copy(),
                                     layer.stride, layer.padding, layer.relu))
            elif isinstance(layer, ContextHead):
                layers.append(ContextHead(layer.weight.copy(), layer.gweight.copy(),
                                          layer.bias.copy(), layer.pool_k))
            else:
                layers.append(Upsample(layer.out_h, layer.out_w))
        return SlicedNetwork(layers, self.input_shape, self.class_count)

    def round_params_to_float32(self) -> None:
        """Make parameters exactly representable in the on-disk float32 format."""
        for p in self.params():
            p[...] = p.astype(np.float32).astype(np.float64)


class GradientTape:
    """Records one forward pass and back-propagates through it.

    >>> tape = GradientTape(net)
    >>> logits = tape.forward(x)
    >>> tape.backward(dloss_dlogits)
    >>> tape.input_grad.shape == x.shape
    True
    """

    def __init__(self, net: SlicedNetwork, need_params: bool = True):
        self.net = net
        self.need_params = need_params
        self.acts: list[np.ndarray] | None = None
        self.input_grad: np.ndarray | None = None
        self.param_grads: list[list[np.ndarray] | None] | None = None

    def forward(self, x) -> np.ndarray:
        self.acts = self.net.record(x)
        return self.acts[-1]

    def activation(self, j: int) -> np.ndarray:
        if self.acts is None:
            raise StateError("no forward pass has been recorded")
        return self.acts[j]

    def backward(self, loss_grad, extra_grads: dict[int, np.ndarray] | None = None):
        """Propagate ``loss_grad`` (w.r.t. the output) back to the input.

        ``extra_grads`` maps a layer index j to an additional gradient w.r.t.
        ``h^j``, for losses that also depend on intermediate activations.
        """
        if self.acts is None:
            raise StateError("backward() called before a recorded forward()")
        extra_grads = extra_grads or {}
        n = self.net.num_layers
        g = np.asarray(loss_grad, dtype=np.float64)
        if g.shape != self.acts[n].shape:
            raise ConfigError(f"loss gradient shape {g.shape} != output shape {self.acts[n].shape}")
        if n in extra_grads:
            g = g + extra_grads[n]
        param_grads: list = [None] * n
        for j in range(n, 0, -1):
            layer = self.net.layers[j - 1]
            g, pg = layer.backward(self.acts[j - 1], self.acts[j], g, self.need_params)
            param_grads[j - 1] = pg
            if j - 1 in extra_grads:
                g = g + extra_grads[j - 1]
        self.input_grad = g
        self.param_grads = param_grads
        return self


def he_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_conv(rng, in_c, out_c, k, stride=1, relu=True) -> Conv2d:
    return Conv2d(he_uniform(rng, (out_c, in_c, k, k)), np.zeros(out_c),
                  stride=stride, padding=k // 2, relu=relu)


def make_context_head(rng, in_c, classes, context_scale: float = 0.1,
                      pool_k: int = 16) -> ContextHead:
    bound = np.sqrt(6.0 / in_c)
    return ContextHead(rng.uniform(-bound, bound, (classes, in_c)),
                       context_scale * rng.uniform(-bound, bound, (classes, in_c)),
                       np.zeros(classes), pool_k)


def build_toy_net(seed: int, class_count: int = 4, input_hw=(64, 64)) -> SlicedNetwork:
    """Layers 1..5: conv3x3(3->16)+ReLU, conv3x3/2(16->32)+ReLU, conv3x3/2(32->32)+ReLU,
    1x1 context head (32->classes), bilinear upsample to the input size."""
    rng = np.random.default_rng(seed)
    h, w = input_hw
    layers = [
        make_conv(rng, 3, 16, 3),
        make_conv(rng, 16, 32, 3, stride=2),
        make_conv(rng, 32, 32, 3, stride=2),
        make_context_head(rng, 32, class_count),
        Upsample(h, w),
    ]
    net = SlicedNetwork(layers, (3, h, w), class_count)
    net.round_params_to_float32()
    return net


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray,
                  weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. ``logits``.

    ``weights`` (H, W) restricts/weights the average; it defaults to all pixels.
    """
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if weights is None:
        weights = np.ones((h, w))
    total = float(weights.sum())
    if total <= 0:
        return 0.0, np.zeros_like(logits)
    p = softmax(logits)
    rows, cols = np.indices((h, w))
    picked = p[labels, rows, cols]
    loss = float(-(weights * np.log(np.maximum(picked, 1e-300))).sum() / total)
    grad = p.copy()
    grad[labels, rows, cols] -= 1.0
    grad *= weights[None] / total
    return loss, grad


def predict_labels(net: SlicedNetwork, x) -> np.ndarray:
    return np.argmax(net.forward(x), axis=0)


# weight files -------------------------------------------------------------

def save_weights(net: SlicedNetwork, path) -> None:
    out = bytearray(MAGIC)
    c, h, w = net.input_shape
    out += bytes([_INPUT]) + struct.pack("<4I", c, h, w, net.class_count)
    for layer in net.layers:
        if isinstance(layer, Conv2d):
            oc, ic, kh, kw = layer.weight.shape
            out += bytes([_CONV]) + struct.pack(
                "<7I", oc, ic, kh, kw, layer.stride, layer.padding, int(layer.relu))
            out += layer.weight.astype("<f4").tobytes()
            out += layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, ContextHead):
            k, hc = layer.weight.shape
            out += bytes([_CONTEXT_HEAD]) + struct.pack("<3I", k, hc, layer.pool_k)
            for p in layer.params:
                out += p.astype("<f4").tobytes()
        elif isinstance(layer, Upsample):
            out += bytes([_UPSAMPLE]) + struct.pack("<2I", layer.out_h, layer.out_w)
        else:
            raise ConfigError(f"cannot serialize layer {layer!r}")
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated weight file while reading {what}", self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self, count: int, what: str):
        return struct.unpack(f"<{count}I", self.take(4 * count, what))

    def f32(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        raw = self.take(4 * n, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


def load_weights(path) -> SlicedNetwork:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        bad = next(i for i, (a, b) in enumerate(zip(magic, MAGIC)) if a != b)
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", bad)
    kind = r.take(1, "input record")[0]
    if kind != _INPUT:
        raise FormatError(f"expected input record, found layer type {kind}", r.pos - 1)
    c, h, w, classes = r.u32(4, "input dims")
    layers = []
    while r.pos < len(r.buf):
        start = r.pos
        kind = r.take(1, "layer type")[0]
        if kind == _CONV:
            oc, ic, kh, kw, stride, pad, relu = r.u32(7, "conv dims")
            weight = r.f32((oc, ic, kh, kw), "conv weights")
            bias = r.f32((oc,), "conv bias")
            layers.append(Conv2d(weight, bias, stride, pad, bool(relu)))
        elif kind == _CONTEXT_HEAD:
            k, hc, pool_k = r.u32(3, "head dims")
            if pool_k < 1:
                raise FormatError("head pool size must be >= 1")
            layers.append(ContextHead(r.f32((k, hc), "head weights"),
                                      r.f32((k, hc), "head context weights"),
                                      r.f32((k,), "head bias"), pool_k))
        elif kind == _UPSAMPLE:
            oh, ow = r.u32(2, "upsample dims")
            layers.append(Upsample(oh, ow))
        else:
            raise FormatError(f"unknown layer type {kind}", start)
    if not layers:
        raise FormatError("weight file contains no layers", r.pos)
    try:
        return SlicedNetwork(layers, (c, h, w), classes)
    except ConfigError as e:
        raise FormatError(f"inconsistent layer dimensions: {e}", r.pos) from None
