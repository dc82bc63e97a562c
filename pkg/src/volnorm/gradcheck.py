"""Central finite-difference checks for every differentiable piece.

Each suite reduces a layer's output to a scalar with a fixed random weight
tensor, perturbs every input/parameter entry by +-h, and compares the
numeric slope against the analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import net as nn
from .net import Conv3dSpec, UNetSpec, build_unet
from .normlayers import AffineParams, NormMethod, build_partition, norm_backward, norm_forward
from .objective import bce_dice_loss

__all__ = ["SuiteResult", "numeric_grad", "rel_error", "norm_suite", "conv_suite",
           "layer_suites", "loss_suite", "net_suite", "all_suites", "STEP"]

STEP = 1e-5
_EPS = np.finfo(np.float64).eps


@dataclass
class SuiteResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<34} max rel err {self.max_rel_error:.3e}  tol {self.tolerance:.0e}  {status}"


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f()`` wrt every entry of ``x`` (mutated, then restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric, f_scale: float = 1.0, h: float = STEP) -> float:
    """Largest elementwise relative error.

    Central differences carry rounding noise of order ``eps * |f| / h``.
    Entries whose magnitude stays below ten times that bound (e.g. biases
    feeding a normalization, whose gradient is exactly zero) cannot be
    compared relatively; they must agree to within the bound and otherwise
    score ``diff / bound``, which is >= 1 and fails any tolerance.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    noise = 10 * _EPS * max(1.0, abs(f_scale)) / h
    diff = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    significant = denom > noise
    err = np.where(significant, diff / np.where(significant, denom, 1.0),
                   np.where(diff <= noise, 0.0, diff / noise))
    return float(err.max())


def norm_suite(method: NormMethod, shape=(2, 3, 3, 3, 4), seed: int = 0,
               epsilon: float = 1e-5, tol: float = 1e-5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    aff = AffineParams(rng.uniform(0.5, 1.5, shape[-1]), rng.normal(size=shape[-1]))
    w = rng.normal(size=shape)
    part = build_partition(method, shape)

    def f():
        return float(np.sum(w * norm_forward(x, part, aff, epsilon)[0]))

    _, cache = norm_forward(x, part, aff, epsilon)
    gx, gg, gb = norm_backward(w, cache, aff)
    scale = f()
    err = max(rel_error(gx, numeric_grad(f, x), scale),
              rel_error(gg, numeric_grad(f, aff.gamma), scale),
              rel_error(gb, numeric_grad(f, aff.beta), scale))
    return SuiteResult(f"norm[{method.token}]", err, tol)


def conv_suite(spec: Conv3dSpec, shape, seed: int = 0, tol: float = 1e-5,
               name: str | None = None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    wts = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=spec.out_channels)
    y, cache = nn.conv3d_forward(x, spec, wts, b)
    w = rng.normal(size=y.shape)

    def f():
        return float(np.sum(w * nn.conv3d_forward(x, spec, wts, b)[0]))

    gx, gw, gb = nn.conv3d_backward(w, cache)
    scale = f()
    err = max(rel_error(gx, numeric_grad(f, x), scale),
              rel_error(gw, numeric_grad(f, wts), scale),
              rel_error(gb, numeric_grad(f, b), scale))
    label = name or f"conv3d[k={spec.kernel[0]},dil={spec.dilation[0]}]"
    return SuiteResult(label, err, tol)


def _unary_suite(name, forward, backward, x, seed, tol):
    rng = np.random.default_rng(seed)
    y = forward(x)
    w = rng.normal(size=y.shape)

    def f():
        return float(np.sum(w * forward(x)))

    return SuiteResult(name, rel_error(backward(w), numeric_grad(f, x), f()), tol)


def layer_suites(seed: int = 0, tol: float = 1e-5) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    out = [
        conv_suite(Conv3dSpec(2, 2), (1, 3, 3, 3, 2), seed, tol),
        conv_suite(Conv3dSpec(2, 3, dilation=(2, 2, 2)), (1, 4, 5, 4, 2), seed, tol),
        conv_suite(Conv3dSpec(3, 2, kernel=(1, 1, 1)), (2, 2, 2, 2, 3), seed, tol),
    ]
    # distinct values keep max-pool argmax and ReLU away from ties and kinks
    x = rng.permutation(np.linspace(-1, 1, 2 * 4 * 4 * 4 * 3)).reshape(2, 4, 4, 4, 3)
    pool_cache = nn.maxpool_forward(x)[1]
    out.append(_unary_suite("maxpool2", lambda v: nn.maxpool_forward(v)[0],
                            lambda g: nn.maxpool_backward(g, pool_cache), x, seed, tol))
    xu = rng.normal(size=(1, 2, 3, 2, 2))
    out.append(_unary_suite("upsample2", nn.upsample_forward, nn.upsample_backward,
                            xu, seed, tol))
    mask = x > 0
    out.append(_unary_suite("relu", lambda v: nn.relu_forward(v)[0],
                            lambda g: nn.relu_backward(g, mask), x, seed, tol))
    s = nn.sigmoid(xu)
    out.append(_unary_suite("sigmoid", nn.sigmoid, lambda g: g * s * (1 - s), xu, seed, tol))
    for method in (NormMethod.batch(), NormMethod.group(2), NormMethod.instance()):
        out.append(norm_suite(method, seed=seed, tol=tol))
    return out


def loss_suite(shape=(1, 4, 4, 4, 1), seed: int = 0, tol: float = 1e-6,
               h: float = 1e-7) -> SuiteResult:
    # a smaller step than the layer suites: the log terms have large third
    # derivatives near the 1e-3 margin, so 1e-5 leaves truncation error
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1 - 1e-3, size=shape)
    y = (rng.random(shape) < 0.4).astype(np.float64)

    def f():
        return bce_dice_loss(p, y)[0]

    _, g = bce_dice_loss(p, y)
    return SuiteResult("bce_dice_loss", rel_error(g, numeric_grad(f, p, h), f(), h), tol)


def net_suite(method: NormMethod, seed: int = 0, tol: float = 1e-4,
              shape=(1, 8, 8, 8, 1), kink_margin: float = 1e-4,
              max_tries: int = 20) -> SuiteResult:
    """Whole-network check at a point where no ReLU or max-pool is near a kink.

    Inputs are redrawn until every ReLU input and every max-pool winner is
    at least ``kink_margin`` away from switching, so a +-h probe cannot
    straddle a slope change.
    """
    net = build_unet(UNetSpec(levels=1, base_filters=2, norm=method), seed)
    rng = np.random.default_rng(seed + 1)
    # move affine parameters and biases off their initial values so their
    # gradients are generic
    for k, v in net.store.params.items():
        if k.endswith((".gamma", ".beta", ".b")):
            v[...] = rng.normal(0.0, 0.1, size=v.shape) + (1.0 if k.endswith(".gamma") else 0.0)
    buffers = {k: v.copy() for k, v in net.store.buffers.items()}
    net.track_kinks = True
    for _ in range(max_tries):
        x = rng.uniform(0, 1, size=shape)
        y, caches = net.forward(x, train=True)
        if caches.get("kink_margin", np.inf) >= kink_margin:
            break
    else:
        raise RuntimeError(f"no kink-free input found in {max_tries} draws")
    net.track_kinks = False
    w = rng.normal(size=y.shape)

    def f():
        val = float(np.sum(w * net.forward(x, train=True)[0]))
        for k, v in buffers.items():
            net.store.buffers[k][...] = v
        return val

    net.store.zero_grad()
    gx = net.backward(w, caches)
    scale = f()
    err = rel_error(gx, numeric_grad(f, x), scale)
    for name, p in net.store.params.items():
        err = max(err, rel_error(net.store.grads[name], numeric_grad(f, p), scale))
    return SuiteResult(f"unet[{method.token}]", err, tol)


def all_suites(seed: int = 0) -> list[SuiteResult]:
    results = layer_suites(seed)
    results.append(loss_suite(seed=seed))
    for method in (NormMethod.none(), NormMethod.batch(), NormMethod.group(2),
                   NormMethod.instance()):
        results.append(net_suite(method, seed=seed))
    return results
