"""Dense 5-axis tensors laid out as (N, D, H, W, C), channels fastest.

Tensors are plain C-ordered numpy arrays; this module adds the shape
contract, index linearization, set-partitioned reductions and a small
binary serialization used by checkpoints and fixtures.
"""
from __future__ import annotations

import struct
import sys
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "Shape5", "NormPartition", "TensorError", "ShapeError", "SizeError",
    "PartitionError", "FormatError", "zeros", "as_tensor5", "map_binary",
    "reduce_over", "flatten_index", "unflatten_index", "tensor_to_bytes",
    "tensor_from_bytes",
]


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class SizeError(TensorError):
    pass


class PartitionError(TensorError):
    pass


class FormatError(TensorError):
    pass


class Shape5(NamedTuple):
    n: int
    d: int
    h: int
    w: int
    c: int

    @property
    def size(self) -> int:
        return self.n * self.d * self.h * self.w * self.c

    def validate(self) -> "Shape5":
        if any(int(e) < 1 for e in self):
            raise ShapeError(f"all extents must be >= 1, got {tuple(self)}")
        if self.size > sys.maxsize // 8:
            raise SizeError(f"element count {self.size} exceeds addressable size")
        return self


def zeros(shape, dtype=np.float64) -> np.ndarray:
    shape = Shape5(*(int(e) for e in shape)).validate()
    return np.zeros(shape, dtype=dtype)


def as_tensor5(x, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 5:
        raise ShapeError(f"expected a 5-axis (N, D, H, W, C) array, got ndim={arr.ndim}")
    Shape5(*arr.shape).validate()
    return arr


def map_binary(a: np.ndarray, b: np.ndarray, f: Callable) -> np.ndarray:
    """Apply ``f`` elementwise; no broadcasting is performed."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.asarray(f(a, b))


def flatten_index(shape, index) -> int:
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unflatten_index(shape, flat: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(flat, tuple(shape)))


@dataclass(frozen=True)
class NormPartition:
    """Disjoint statistics sets covering a tensor's index space.

    A partition is either *structured* (``view``/``axes``: reshape the
    tensor to ``view`` and reduce over ``axes``; remaining axes enumerate
    the sets in C order) or *explicit* (``labels`` maps each flat index
    to a set id). Structured partitions are canonicalized by dropping
    unit-extent axes, so two constructions that describe the same sets
    compare equal and run through identical arithmetic.
    """

    shape: Shape5
    kind: str = "custom"
    view: tuple[int, ...] | None = None
    axes: tuple[int, ...] | None = None
    labels: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def structured(cls, shape, kind: str, view, axes) -> "NormPartition":
        shape = Shape5(*shape).validate()
        if int(np.prod(view)) != shape.size:
            raise PartitionError(f"view {view} does not tile shape {tuple(shape)}")
        keep = [i for i, e in enumerate(view) if e != 1]
        if not keep:
            keep = [0]
        new_view = tuple(view[i] for i in keep)
        new_axes = tuple(keep.index(a) for a in axes if a in keep)
        return cls(shape=shape, kind=kind, view=new_view, axes=new_axes)

    @classmethod
    def from_labels(cls, shape, labels, kind: str = "custom") -> "NormPartition":
        shape = Shape5(*shape).validate()
        labels = np.asarray(labels).reshape(-1)
        if labels.size != shape.size:
            raise PartitionError(f"{labels.size} labels for {shape.size} elements")
        if labels.size and (labels.min() < 0 or not np.issubdtype(labels.dtype, np.integer)):
            raise PartitionError("labels must be non-negative integers")
        # relabel densely so every set id is non-empty
        _, dense = np.unique(labels, return_inverse=True)
        return cls(shape=shape, kind=kind, labels=dense.astype(np.intp))

    @property
    def is_structured(self) -> bool:
        return self.view is not None

    @property
    def stats_shape(self) -> tuple[int, ...]:
        """Keep-dims shape of per-set statistics in the structured view."""
        return tuple(1 if i in self.axes else e for i, e in enumerate(self.view))

    @property
    def set_count(self) -> int:
        if self.is_structured:
            return int(np.prod(self.stats_shape))
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def set_sizes(self) -> np.ndarray:
        if self.is_structured:
            m = int(np.prod([self.view[a] for a in self.axes])) if self.axes else 1
            return np.full(self.set_count, m, dtype=np.intp)
        return np.bincount(self.labels, minlength=self.set_count)

    @property
    def set_of(self) -> np.ndarray:
        """Flat index -> set id."""
        if not self.is_structured:
            return self.labels
        ids = np.arange(self.set_count).reshape(self.stats_shape)
        return np.broadcast_to(ids, self.view).reshape(-1)

    def check(self, x: np.ndarray) -> None:
        if tuple(x.shape) != tuple(self.shape):
            raise PartitionError(f"partition built for {tuple(self.shape)}, got {x.shape}")

    def gather(self, per_set: np.ndarray) -> np.ndarray:
        """Broadcast per-set values back onto every element (tensor shape)."""
        if self.is_structured:
            full = np.broadcast_to(per_set.reshape(self.stats_shape), self.view)
            return full.reshape(self.shape)
        return per_set[self.labels].reshape(self.shape)


def _set_sums(x: np.ndarray, partition: NormPartition) -> np.ndarray:
    partition.check(x)
    if partition.is_structured:
        return np.sum(x.reshape(partition.view), axis=partition.axes).reshape(-1)
    labels = partition.labels
    flat = x.reshape(-1)
    n = partition.set_count
    counts = np.bincount(labels, minlength=n)
    first = np.bincount(labels, weights=flat, minlength=n)
    # second pass sums residuals about the first estimate, recovering the
    # rounding lost by the sequential accumulation in bincount
    resid = flat - (first / counts)[labels]
    return first + np.bincount(labels, weights=resid, minlength=n)


def reduce_over(x: np.ndarray, partition: NormPartition) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(sums, counts)`` for every set of ``partition``."""
    if not partition.is_structured:
        labels = partition.labels
        if labels.size != np.asarray(x).size:
            raise PartitionError("partition index out of range for tensor")
    return _set_sums(np.asarray(x), partition), partition.set_sizes


# Blob: eight little-endian int64 values, then raw little-endian data.
TENSOR_MAGIC = 0x35524E5354564E56  # "VNVTSNR5"
TENSOR_VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}
_HEADER = struct.Struct("<8q")


def tensor_to_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim > 5:
        raise ShapeError(f"cannot serialize ndim={x.ndim}")
    shape = (1,) * (5 - x.ndim) + tuple(x.shape)
    tag = _TAGS.get(x.dtype.newbyteorder("<"))
    if tag is None:
        raise FormatError(f"unsupported dtype {x.dtype}")
    header = _HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, *shape, tag)
    return header + np.ascontiguousarray(x, dtype=_DTYPES[tag]).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns ``(tensor, next_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, n, d, h, w, c, tag = _HEADER.unpack_from(buf, offset)
    if magic != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    shape = Shape5(n, d, h, w, c).validate()
    dtype = _DTYPES[tag]
    start = offset + _HEADER.size
    end = start + shape.size * dtype.itemsize
    if end > len(buf):
        raise FormatError("truncated tensor payload")
    data = np.frombuffer(buf, dtype=dtype, count=shape.size, offset=start)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True), end
