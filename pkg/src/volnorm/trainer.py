"""Batch-size-1 training, evaluation and checkpoint I/O."""
from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .datapipe import Volume, compose_prediction, slice_slabs
from .net import UNet, UNetSpec
from .objective import bce_dice_loss, dice_hard
from .tensor import FormatError, tensor_from_bytes, tensor_to_bytes

__all__ = [
    "TrainConfig", "EpochRecord", "AdamState", "adam_step", "sgd_step", "train",
    "evaluate", "save_checkpoint", "load_checkpoint", "load_state_into", "load_net",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-3
    batch_size: int = 1
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        """30 epochs at 5e-5, the published schedule."""
        return cls(**{"epochs": 30, "learning_rate": 5e-5, **kw})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    seconds: float
    diverged: bool = False


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    for name, p in params.items():
        vel = velocity.setdefault(name, np.zeros_like(p))
        vel *= momentum
        vel -= lr * grads[name]
        p += vel


def _finite(params: dict) -> bool:
    return all(np.isfinite(p).all() for p in params.values())


def train(net: UNet, dataset: Sequence[Volume], config: TrainConfig):
    """Train ``net`` in place; returns ``(net.store, epoch_records)``.

    Slabs are visited one at a time in an order reshuffled every epoch by a
    generator seeded from ``config.seed``. A non-finite or oversized loss,
    or non-finite parameters, stop training and flag the epoch diverged.
    """
    slabs = [slab for vol in dataset for slab in slice_slabs(vol)]
    if not slabs:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    store = net.store
    adam = AdamState(config.beta1, config.beta2, config.eps)
    velocity: dict = {}
    records: list[EpochRecord] = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total = 0.0
        diverged = False
        for idx in rng.permutation(len(slabs)):
            slab = slabs[idx]
            y, caches = net.forward(slab.data, train=True)
            loss, grad = bce_dice_loss(y, slab.target)
            if not math.isfinite(loss) or loss > config.divergence_threshold:
                diverged = True
                break
            store.zero_grad()
            net.backward(grad, caches)
            if config.optimizer == "adam":
                adam_step(store.params, store.grads, adam, config.learning_rate)
            else:
                sgd_step(store.params, store.grads, velocity, config.learning_rate, config.momentum)
            if not _finite(store.params):
                diverged = True
                break
            total += loss
        seconds = time.perf_counter() - t0
        mean_loss = total / len(slabs) if not diverged else float("nan")
        records.append(EpochRecord(epoch, mean_loss, seconds, diverged))
        log.info("epoch %d loss %.5f (%.2fs)%s", epoch, mean_loss, seconds,
                 " diverged" if diverged else "")
        if diverged:
            break
    return store, records


def predict_volume(net: UNet, vol: Volume) -> np.ndarray:
    slabs = slice_slabs(vol)
    return compose_prediction([(s, net.predict(s.data)) for s in slabs])


def evaluate(net: UNet, volumes: Sequence[Volume]) -> tuple[float, float]:
    """Mean hard Dice over ``volumes`` and total prediction wall time."""
    t0 = time.perf_counter()
    scores = [dice_hard(predict_volume(net, vol), vol.mask) for vol in volumes]
    seconds = time.perf_counter() - t0
    return float(np.mean(scores)), seconds


# checkpoints ---------------------------------------------------------------
# layout: magic, version, record count, then (name length, name, tensor blob)*

CKPT_MAGIC = b"VNCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<I")
SPEC_KEY = "__spec__"


def save_checkpoint(store_or_net, path, spec: UNetSpec | None = None) -> None:
    if isinstance(store_or_net, UNet):
        spec = spec or store_or_net.spec
        state = store_or_net.store.state()
    else:
        state = store_or_net.state()
    records = dict(state)
    if spec is not None:
        records[SPEC_KEY] = np.frombuffer(spec.to_json().encode("utf-8"), dtype=np.uint8)
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(records))]
    for name, value in records.items():
        raw = name.encode("utf-8")
        parts += [_NAME_LEN.pack(len(raw)), raw, tensor_to_bytes(value)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Return ``{name: tensor}`` with tensors reshaped to 5 axes."""
    buf = Path(path).read_bytes()
    if len(buf) < _CKPT_HEADER.size:
        raise FormatError("truncated checkpoint header")
    magic, version, count = _CKPT_HEADER.unpack_from(buf, 0)
    if magic != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off = _CKPT_HEADER.size
    out = {}
    for _ in range(count):
        if off + _NAME_LEN.size > len(buf):
            raise FormatError("truncated checkpoint record")
        (n,) = _NAME_LEN.unpack_from(buf, off)
        off += _NAME_LEN.size
        if off + n > len(buf):
            raise FormatError("truncated checkpoint record name")
        name = buf[off:off + n].decode("utf-8")
        off += n
        out[name], off = tensor_from_bytes(buf, off)
    if off != len(buf):
        raise FormatError("trailing bytes after last checkpoint record")
    return out


def checkpoint_spec(state: dict) -> UNetSpec:
    if SPEC_KEY not in state:
        raise FormatError("checkpoint carries no network spec")
    return UNetSpec.from_json(state[SPEC_KEY].tobytes().decode("utf-8"))


def load_state_into(net: UNet, state: dict) -> None:
    """Copy ``state`` into ``net``; names and sizes must match exactly."""
    target = net.store.state()
    names = set(state) - {SPEC_KEY}
    if names != set(target):
        missing = sorted(set(target) - names)
        extra = sorted(names - set(target))
        raise FormatError(f"checkpoint does not match network (missing {missing}, extra {extra})")
    for name, dest in target.items():
        src = state[name]
        if src.size != dest.size:
            raise FormatError(f"{name}: {src.size} values, network expects {dest.size}")
        dest[...] = src.reshape(dest.shape).astype(dest.dtype)


def load_net(path) -> UNet:
    state = load_checkpoint(path)
    dtype = next(v.dtype for k, v in state.items() if k != SPEC_KEY)
    net = UNet(checkpoint_spec(state), seed=0, dtype=dtype)
    load_state_into(net, state)
    return net
