"""Batch, Group and Instance normalization over (N, D, H, W, C) tensors.

All three methods share one kernel: build the statistics sets, standardize
every element against the mean and standard deviation of its own set, then
apply a per-channel scale and shift. The methods differ only in how the
sets are drawn:

* batch:    one set per channel, spanning (N, D, H, W)
* group:    one set per sample and per block of C/G contiguous channels
* instance: one set per sample and channel, spanning (D, H, W)
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import NormPartition, Shape5, ShapeError, reduce_over

__all__ = [
    "NormMethod", "AffineParams", "RunningStats", "NormCache", "NormSite",
    "ConfigurationError", "UsageError", "build_partition", "norm_forward",
    "norm_backward", "batchnorm_update_running", "norm_infer",
]

KINDS = ("none", "batch", "group", "instance")


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


@dataclass(frozen=True)
class NormMethod:
    kind: str = "none"
    groups: int = 1
    epsilon: float = 1e-5
    momentum: float = 0.99

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown normalization kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.kind == "group" and self.groups < 1:
            raise ConfigurationError("groups must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigurationError("momentum must lie in [0, 1]")

    @classmethod
    def none(cls, **kw) -> "NormMethod":
        return cls("none", **kw)

    @classmethod
    def batch(cls, **kw) -> "NormMethod":
        return cls("batch", **kw)

    @classmethod
    def group(cls, groups: int, **kw) -> "NormMethod":
        return cls("group", groups=groups, **kw)

    @classmethod
    def instance(cls, **kw) -> "NormMethod":
        return cls("instance", **kw)

    @classmethod
    def parse(cls, text: str, **kw) -> "NormMethod":
        """Parse ``none``, ``batch``, ``instance`` or ``group:G``."""
        text = text.strip().lower()
        if text.startswith("group"):
            _, _, g = text.partition(":")
            if not g.strip().isdigit():
                raise ConfigurationError(f"group method needs a size, e.g. group:4 (got {text!r})")
            return cls.group(int(g), **kw)
        return cls(text, **kw)

    @property
    def label(self) -> str:
        return {
            "none": "Without normalization",
            "batch": "Batch normalization",
            "group": f"Group normalization [G={self.groups}]",
            "instance": "Instance normalization",
        }[self.kind]

    @property
    def token(self) -> str:
        return f"group:{self.groups}" if self.kind == "group" else self.kind

    def compatible(self, channels: int) -> bool:
        return self.kind != "group" or (self.groups <= channels and channels % self.groups == 0)


@dataclass
class AffineParams:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "AffineParams":
        return cls(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.99

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.99, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


@dataclass
class NormCache:
    partition: NormPartition
    mean: np.ndarray  # per set
    var: np.ndarray   # per set, biased
    std: np.ndarray   # per set, sqrt(var + eps)
    xhat: np.ndarray


def build_partition(method: NormMethod, shape) -> NormPartition:
    n, d, h, w, c = Shape5(*shape).validate()
    s = d * h * w
    if method.kind == "batch":
        return NormPartition.structured(shape, "batch", (n * s, c), (0,))
    if method.kind == "group":
        g = method.groups
        if g > c or c % g:
            raise ConfigurationError(f"{c} channels cannot be split into {g} groups")
        return NormPartition.structured(shape, "group", (n, s, g, c // g), (1, 3))
    if method.kind == "instance":
        return NormPartition.structured(shape, "instance", (n, s, c), (1,))
    raise ConfigurationError("no statistics sets for method 'none'")


def _check_affine(x: np.ndarray, affine: AffineParams) -> None:
    c = x.shape[-1]
    if affine.gamma.shape != (c,) or affine.beta.shape != (c,):
        raise ShapeError(f"affine parameters must have length {c}")


def norm_forward(x: np.ndarray, partition: NormPartition, affine: AffineParams,
                 epsilon: float) -> tuple[np.ndarray, NormCache]:
    partition.check(x)
    _check_affine(x, affine)
    sums, counts = reduce_over(x, partition)
    counts = counts.astype(sums.dtype)
    mean = sums / counts
    dev = x - partition.gather(mean)
    # corrected two-pass: fold the residual mean back in, so a constant
    # set gets exactly zero deviations despite rounding in the first sum
    resid = reduce_over(dev, partition)[0] / counts
    mean = mean + resid
    dev -= partition.gather(resid)
    sq, _ = reduce_over(dev * dev, partition)
    var = sq / counts
    std = np.sqrt(var + epsilon)
    xhat = dev / partition.gather(std)
    y = xhat * affine.gamma + affine.beta
    return y, NormCache(partition, mean, var, std, xhat)


def norm_backward(grad_y: np.ndarray, cache: NormCache,
                  affine: AffineParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = cache.partition
    if grad_y.shape != cache.xhat.shape:
        raise ShapeError(f"grad shape {grad_y.shape} does not match cache {cache.xhat.shape}")
    c = grad_y.shape[-1]
    g2 = grad_y.reshape(-1, c)
    grad_beta = g2.sum(axis=0)
    grad_gamma = (g2 * cache.xhat.reshape(-1, c)).sum(axis=0)

    g = grad_y * affine.gamma
    counts = p.set_sizes.astype(g.dtype)
    g_mean = reduce_over(g, p)[0] / counts
    gx_mean = reduce_over(g * cache.xhat, p)[0] / counts
    grad_x = (g - p.gather(g_mean) - cache.xhat * p.gather(gx_mean)) / p.gather(cache.std)
    return grad_x, grad_gamma, grad_beta


def batchnorm_update_running(stats: RunningStats, cache: NormCache) -> RunningStats:
    if cache.partition.kind != "batch":
        raise UsageError(f"running statistics need a batch cache, got {cache.partition.kind!r}")
    m = stats.momentum
    return replace(stats, mean=m * stats.mean + (1 - m) * cache.mean,
                   var=m * stats.var + (1 - m) * cache.var)


def norm_infer(x: np.ndarray, method: NormMethod, affine: AffineParams | None,
               stats: RunningStats | None = None) -> np.ndarray:
    if method.kind == "none":
        return x
    if method.kind == "batch":
        if stats is None:
            raise UsageError("batch inference requires running statistics")
        _check_affine(x, affine)
        scale = affine.gamma / np.sqrt(stats.var + method.epsilon)
        return (x - stats.mean) * scale + affine.beta
    y, _ = norm_forward(x, build_partition(method, x.shape), affine, method.epsilon)
    return y


class NormSite:
    """One normalization slot inside a network, bound to a parameter store.

    ``params`` holds ``<name>.gamma``/``<name>.beta`` (absent for ``none``);
    ``buffers`` holds the batch running statistics.
    """

    def __init__(self, name: str, method: NormMethod, channels: int):
        if not method.compatible(channels):
            raise ConfigurationError(
                f"site {name}: {channels} channels cannot be split into {method.groups} groups")
        self.name = name
        self.method = method
        self.channels = channels

    def init_params(self, params: dict, buffers: dict, dtype=np.float64) -> None:
        if self.method.kind == "none":
            return
        aff = AffineParams.identity(self.channels, dtype)
        params[f"{self.name}.gamma"] = aff.gamma
        params[f"{self.name}.beta"] = aff.beta
        if self.method.kind == "batch":
            rs = RunningStats.fresh(self.channels, self.method.momentum, dtype)
            buffers[f"{self.name}.running_mean"] = rs.mean
            buffers[f"{self.name}.running_var"] = rs.var

    def _affine(self, params) -> AffineParams:
        return AffineParams(params[f"{self.name}.gamma"], params[f"{self.name}.beta"])

    def _stats(self, buffers) -> RunningStats:
        return RunningStats(buffers[f"{self.name}.running_mean"],
                            buffers[f"{self.name}.running_var"], self.method.momentum)

    def forward(self, x, params, buffers, train: bool):
        if self.method.kind == "none":
            return x, None
        affine = self._affine(params)
        if not train:
            stats = self._stats(buffers) if self.method.kind == "batch" else None
            return norm_infer(x, self.method, affine, stats), None
        y, cache = norm_forward(x, build_partition(self.method, x.shape), affine,
                                self.method.epsilon)
        if self.method.kind == "batch":
            new = batchnorm_update_running(self._stats(buffers), cache)
            buffers[f"{self.name}.running_mean"][...] = new.mean
            buffers[f"{self.name}.running_var"][...] = new.var
        return y, cache

    def backward(self, grad_y, cache, params, grads):
        if self.method.kind == "none":
            return grad_y
        if cache is None:
            raise UsageError(f"site {self.name}: backward needs a training-mode cache")
        gx, gg, gb = norm_backward(grad_y, cache, self._affine(params))
        grads[f"{self.name}.gamma"] += gg
        grads[f"{self.name}.beta"] += gb
        return gx
