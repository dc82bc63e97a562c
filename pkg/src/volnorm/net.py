"""A small 3D residual U-Net with pluggable normalization sites.

Layers are written as forward/backward function pairs over numpy arrays in
(N, D, H, W, C) layout. ``UNet`` composes them: every residual block runs a
standard convolution and a dilated one, each followed by a normalization
site and ReLU, and concatenates the result with the block input.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .normlayers import ConfigurationError, NormMethod, NormSite
from .tensor import ShapeError

__all__ = [
    "Conv3dSpec", "ResBlockSpec", "UNetSpec", "ParamStore", "UNet",
    "conv3d_forward", "conv3d_backward", "maxpool_forward", "maxpool_backward",
    "upsample_forward", "upsample_backward", "relu_forward", "relu_backward",
    "sigmoid", "build_unet", "unet_forward", "unet_backward",
]


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    dilation: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if any(k % 2 == 0 or k < 1 for k in self.kernel):
            raise ConfigurationError(f"kernel extents must be odd, got {self.kernel}")
        if any(d < 1 for d in self.dilation):
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (*self.kernel, self.in_channels, self.out_channels)

    @property
    def pad(self) -> tuple[int, int, int]:
        return tuple(d * (k // 2) for k, d in zip(self.kernel, self.dilation))


@dataclass
class ConvCache:
    spec: Conv3dSpec
    x_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    rows: np.ndarray  # padded input flattened to (voxels, C_in)
    offsets: list[int]
    weights: np.ndarray


def _taps(spec: Conv3dSpec):
    kd, kh, kw = spec.kernel
    dd, dh, dw = spec.dilation
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                yield a * dd, b * dh, c * dw


def conv3d_forward(x: np.ndarray, spec: Conv3dSpec, weights: np.ndarray,
                   bias: np.ndarray) -> tuple[np.ndarray, ConvCache]:
    """Same-padded, dilated 3D cross-correlation.

    The zero-padded input is flattened to rows of channels. In that layout
    each kernel tap is a constant row offset, so the convolution becomes a
    sum of one matmul per tap over contiguous row ranges. Rows that wrap
    across a padded border produce garbage outputs which are cropped away.
    """
    n, d, h, w, cin = x.shape
    if cin != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {cin}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights {weights.shape} != {spec.weight_shape}")
    pd, ph, pw = spec.pad
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    _, dp, hp, wp, _ = xp.shape
    rows = xp.reshape(-1, cin)
    offsets = [a * hp * wp + b * wp + c for a, b, c in _taps(spec)]
    span = rows.shape[0] - offsets[-1]
    taps = weights.reshape(-1, cin, spec.out_channels)
    out = np.empty((rows.shape[0], spec.out_channels), dtype=np.result_type(x, weights))
    acc = out[:span]
    np.matmul(rows[offsets[0]:offsets[0] + span], taps[0], out=acc)
    for t in range(1, len(offsets)):
        acc += rows[offsets[t]:offsets[t] + span] @ taps[t]
    y = out.reshape(n, dp, hp, wp, -1)[:, :d, :h, :w] + bias
    return y, ConvCache(spec, x.shape, xp.shape, rows, offsets, weights)


def conv3d_backward(grad_y: np.ndarray, cache: ConvCache):
    spec = cache.spec
    n, d, h, w, cin = cache.x_shape
    cout = spec.out_channels
    if grad_y.shape != (n, d, h, w, cout):
        raise ShapeError(f"grad shape {grad_y.shape} does not match conv output")
    _, dp, hp, wp, _ = cache.padded_shape
    rows, offsets = cache.rows, cache.offsets
    span = rows.shape[0] - offsets[-1]
    g_full = np.zeros((n, dp, hp, wp, cout), dtype=grad_y.dtype)
    g_full[:, :d, :h, :w] = grad_y
    g = g_full.reshape(-1, cout)[:span]
    taps = cache.weights.reshape(-1, cin, cout)
    grad_w = np.empty_like(taps)
    g_rows = np.zeros_like(rows, dtype=grad_y.dtype)
    for t, off in enumerate(offsets):
        grad_w[t] = rows[off:off + span].T @ g
        g_rows[off:off + span] += g @ taps[t].T
    grad_b = grad_y.reshape(-1, cout).sum(axis=0)
    pd, ph, pw = spec.pad
    grad_x = g_rows.reshape(cache.padded_shape)[:, pd:pd + d, ph:ph + h, pw:pw + w]
    return grad_x, grad_w.reshape(spec.weight_shape), grad_b


def _blocks(x: np.ndarray) -> np.ndarray:
    n, d, h, w, c = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"spatial extents {x.shape[1:4]} must be even for 2x pooling")
    b = x.reshape(n, d // 2, 2, h // 2, 2, w // 2, 2, c)
    return b.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, d // 2, h // 2, w // 2, c, 8)


def maxpool_forward(x: np.ndarray):
    b = _blocks(x)
    arg = b.argmax(axis=-1)
    y = np.take_along_axis(b, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def maxpool_backward(grad_y: np.ndarray, cache):
    shape, arg = cache
    n, d, h, w, c = shape
    gb = np.zeros(arg.shape + (8,), dtype=grad_y.dtype)
    np.put_along_axis(gb, arg[..., None], grad_y[..., None], axis=-1)
    gb = gb.reshape(n, d // 2, h // 2, w // 2, c, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return gb.reshape(shape)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    n, d, h, w, c = x.shape
    y = np.broadcast_to(x[:, :, None, :, None, :, None, :], (n, d, 2, h, 2, w, 2, c))
    return y.reshape(n, 2 * d, 2 * h, 2 * w, c)


def upsample_backward(grad_y: np.ndarray) -> np.ndarray:
    n, d, h, w, c = grad_y.shape
    return grad_y.reshape(n, d // 2, 2, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4, 6))


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_y, mask):
    return grad_y * mask


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class ResBlockSpec:
    name: str
    conv1: Conv3dSpec
    conv2: Conv3dSpec

    @property
    def out_channels(self) -> int:
        return self.conv2.out_channels + self.conv1.in_channels


@dataclass(frozen=True)
class UNetSpec:
    levels: int = 2
    base_filters: int = 8
    norm: NormMethod = field(default_factory=NormMethod.instance)
    in_channels: int = 1
    kernel: int = 3
    dilation: int = 2
    up_kernel: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.base_filters < 1:
            raise ConfigurationError("levels and base_filters must be >= 1")

    def filters(self, level: int) -> int:
        return self.base_filters * 2 ** level

    def norm_channels(self) -> list[int]:
        return [self.filters(l) for l in range(self.levels + 1)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UNetSpec":
        raw = json.loads(text)
        raw["norm"] = NormMethod(**raw["norm"])
        return cls(**raw)


class ParamStore:
    """Named trainable tensors with one gradient slot each, plus buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers, in insertion order."""
        return {**self.params, **self.buffers}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.copy())
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out


class UNet:
    """Executable residual U-Net bound to a ``ParamStore``."""

    def __init__(self, spec: UNetSpec, seed: int = 0, dtype=np.float64):
        for c in spec.norm_channels():
            if not spec.norm.compatible(c):
                raise ConfigurationError(
                    f"{spec.norm.label} is incompatible with {c}-channel sites")
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        # when set, forward records each ReLU input's and max-pool winner's
        # distance to a kink under caches["kink_margin"]
        self.track_kinks = False
        self.convs: dict[str, Conv3dSpec] = {}
        self.sites: dict[str, NormSite] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # construction -------------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k: int, dil: int = 1) -> Conv3dSpec:
        spec = Conv3dSpec(cin, cout, (k,) * 3, (dil,) * 3)
        fan_in = k ** 3 * cin
        limit = np.sqrt(6.0 / fan_in)
        self.store.add(f"{name}.w", self._rng.uniform(-limit, limit, spec.weight_shape).astype(self.dtype))
        self.store.add(f"{name}.b", np.zeros(cout, dtype=self.dtype))
        self.convs[name] = spec
        return spec

    def _site(self, name: str, channels: int) -> None:
        site = NormSite(name, self.spec.norm, channels)
        site.init_params(self.store.params, self.store.buffers, self.dtype)
        for key in (f"{name}.gamma", f"{name}.beta"):
            if key in self.store.params:
                self.store.grads[key] = np.zeros_like(self.store.params[key])
        self.sites[name] = site

    def _block(self, name: str, cin: int, f: int) -> int:
        s = self.spec
        self._conv(f"{name}.conv1", cin, f, s.kernel)
        self._site(f"{name}.norm1", f)
        self._conv(f"{name}.conv2", f, f, s.kernel, s.dilation)
        self._site(f"{name}.norm2", f)
        return f + cin

    def _build(self) -> None:
        s = self.spec
        ch = s.in_channels
        skips = []
        for l in range(s.levels):
            ch = self._block(f"enc{l}", ch, s.filters(l))
            skips.append(ch)
        ch = self._block("mid", ch, s.filters(s.levels))
        for l in reversed(range(s.levels)):
            self._conv(f"up{l}", ch, s.filters(l), s.up_kernel)
            self._site(f"up{l}.norm", s.filters(l))
            ch = self._block(f"dec{l}", s.filters(l) + skips[l], s.filters(l))
        self._conv("head", ch, 1, 1)

    # execution ------------------------------------------------------------

    def _conv_f(self, name, x, caches):
        p = self.store.params
        y, c = conv3d_forward(x, self.convs[name], p[f"{name}.w"], p[f"{name}.b"])
        caches[name] = c
        return y

    def _conv_b(self, name, g, caches):
        gx, gw, gb = conv3d_backward(g, caches[name])
        self.store.grads[f"{name}.w"] += gw
        self.store.grads[f"{name}.b"] += gb
        return gx

    def _norm_relu_f(self, name, x, caches, train):
        y, c = self.sites[name].forward(x, self.store.params, self.store.buffers, train)
        if self.track_kinks:
            self._note_kink(caches, np.abs(y).min())
        y, mask = relu_forward(y)
        caches[name] = (c, mask)
        return y

    def _norm_relu_b(self, name, g, caches):
        c, mask = caches[name]
        g = relu_backward(g, mask)
        return self.sites[name].backward(g, c, self.store.params, self.store.grads)

    @staticmethod
    def _note_kink(caches, margin):
        caches["kink_margin"] = min(caches.get("kink_margin", np.inf), float(margin))

    def _pool_f(self, name, h, caches):
        y, caches[name] = maxpool_forward(h)
        if self.track_kinks:
            top2 = np.sort(_blocks(h), axis=-1)[..., -2:]
            live = top2[..., 1] > 0
            if live.any():
                self._note_kink(caches, (top2[..., 1] - top2[..., 0])[live].min())
        return y

    def _block_f(self, name, x, caches, train):
        h = self._conv_f(f"{name}.conv1", x, caches)
        h = self._norm_relu_f(f"{name}.norm1", h, caches, train)
        h = self._conv_f(f"{name}.conv2", h, caches)
        h = self._norm_relu_f(f"{name}.norm2", h, caches, train)
        return np.concatenate([h, x], axis=-1)

    def _block_b(self, name, g, caches):
        f = self.convs[f"{name}.conv2"].out_channels
        gh, gx = g[..., :f], g[..., f:]
        gh = self._norm_relu_b(f"{name}.norm2", gh, caches)
        gh = self._conv_b(f"{name}.conv2", gh, caches)
        gh = self._norm_relu_b(f"{name}.norm1", gh, caches)
        return gx + self._conv_b(f"{name}.conv1", gh, caches)

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 5 or x.shape[-1] != self.spec.in_channels:
            raise ShapeError(f"expected (N, D, H, W, {self.spec.in_channels}) input, got {x.shape}")
        k = 2 ** self.spec.levels
        if any(e % k for e in x.shape[1:4]):
            raise ConfigurationError(f"spatial extents {x.shape[1:4]} not divisible by {k}")

    def forward(self, x: np.ndarray, train: bool = True) -> tuple[np.ndarray, dict[str, Any]]:
        self.check_input(x)
        s = self.spec
        x = x.astype(self.dtype, copy=False)
        caches: dict[str, Any] = {}
        skips = []
        h = x
        for l in range(s.levels):
            h = self._block_f(f"enc{l}", h, caches, train)
            skips.append(h)
            h = self._pool_f(f"pool{l}", h, caches)
        h = self._block_f("mid", h, caches, train)
        for l in reversed(range(s.levels)):
            h = self._conv_f(f"up{l}", upsample_forward(h), caches)
            h = self._norm_relu_f(f"up{l}.norm", h, caches, train)
            h = self._block_f(f"dec{l}", np.concatenate([h, skips[l]], axis=-1), caches, train)
        y = sigmoid(self._conv_f("head", h, caches))
        caches["out"] = y
        return y, caches

    def backward(self, grad_y: np.ndarray, caches: dict[str, Any]) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients into the store; returns grad wrt input."""
        s = self.spec
        y = caches["out"]
        g = self._conv_b("head", grad_y * y * (1 - y), caches)
        gskips = [None] * s.levels
        for l in range(s.levels):
            g = self._block_b(f"dec{l}", g, caches)
            f = s.filters(l)
            g, gskips[l] = g[..., :f], g[..., f:]
            g = self._norm_relu_b(f"up{l}.norm", g, caches)
            g = upsample_backward(self._conv_b(f"up{l}", g, caches))
        g = self._block_b("mid", g, caches)
        for l in reversed(range(s.levels)):
            g = maxpool_backward(g, caches[f"pool{l}"]) + gskips[l]
            g = self._block_b(f"enc{l}", g, caches)
        return g

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)[0]


def build_unet(spec: UNetSpec, seed: int = 0, dtype=np.float64) -> UNet:
    return UNet(spec, seed, dtype)


def unet_forward(x, net: UNet, mode: str = "train"):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return net.forward(x, train=mode == "train")


def unet_backward(grad_y, caches, net: UNet) -> dict[str, np.ndarray]:
    net.store.zero_grad()
    net.backward(grad_y, caches)
    return net.store.grads
