"""Volumes, overlapping 16-slice slabs, synthetic data and NRRD ingestion.

Slabs are 16 slices deep and start every 8 slices. When composing a
prediction, each slab owns only its middle 8 slices, except that the first
slab also owns the 4 leading slices of the volume and the last slab the 4
trailing ones. If the slice count is not a multiple of 8, the final slab is
anchored at ``S - 16`` and where two middles overlap the later slab wins.
"""
from __future__ import annotations

import gzip
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .normlayers import ConfigurationError
from .objective import threshold_mask

__all__ = [
    "SLAB_DEPTH", "SLAB_STRIDE", "Volume", "SlabBatch", "SynthSpec", "DataError",
    "UnsupportedFormatError", "TooThinError", "CompositionError",
    "rescale_to_unit", "generate_synthetic", "generate_dataset", "slab_starts",
    "slab_ownership", "slice_slabs", "compose_probabilities", "compose_prediction",
    "read_nrrd_array", "read_nrrd", "write_nrrd", "write_pgm_slices",
    "write_manifest", "read_manifest", "load_manifest_volumes",
]

SLAB_DEPTH = 16
SLAB_STRIDE = 8
_EDGE = (SLAB_DEPTH - SLAB_STRIDE) // 2  # 4 slices on each side of the middle


class DataError(ValueError):
    pass


class UnsupportedFormatError(DataError):
    pass


class TooThinError(DataError):
    pass


class CompositionError(DataError):
    pass


@dataclass
class Volume:
    intensities: np.ndarray  # (S, H, W) in [0, 1]
    mask: np.ndarray         # (S, H, W) in {0, 1}

    def __post_init__(self):
        if self.intensities.ndim != 3 or self.intensities.shape != self.mask.shape:
            raise DataError(f"intensities {self.intensities.shape} and mask {self.mask.shape} "
                            "must be matching 3D grids")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass
class SlabBatch:
    data: np.ndarray  # (1, 16, H, W, 1)
    start_slice: int
    position: str     # "first", "interior", "last" or "only"
    target: np.ndarray | None = None


def rescale_to_unit(raw) -> np.ndarray:
    a = np.asarray(raw, dtype=np.float64)
    if np.isnan(a).any():
        raise DataError("NaN in input volume")
    if not np.isfinite(a).all():
        raise DataError("non-finite value in input volume")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


# synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """A column of ellipsoids standing in for a spine in a noisy scan."""

    slices: int = 16
    height: int = 32
    width: int = 32
    ellipsoids: int = 3
    radius_min: float = 3.0
    radius_max: float = 6.0
    center_jitter: float = 4.0
    contrast: float = 0.35
    noise: float = 0.05
    intensity_jitter: float = 0.2
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if min(self.slices, self.height, self.width) < 16:
            raise ConfigurationError("synthetic extents must be at least 16 per axis")
        if self.ellipsoids < 1:
            raise ConfigurationError("need at least one ellipsoid")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigurationError("radii must satisfy 0 < radius_min <= radius_max")
        if self.noise < 0 or self.intensity_jitter < 0 or self.center_jitter < 0:
            raise ConfigurationError("noise and jitter amplitudes must be non-negative")
        return self


def generate_synthetic(spec: SynthSpec) -> Volume:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s, h, w = spec.slices, spec.height, spec.width
    z, y, x = np.meshgrid(np.arange(s), np.arange(h), np.arange(w), indexing="ij")

    mask = np.zeros((s, h, w), dtype=bool)
    for k in range(spec.ellipsoids):
        cz = (k + 0.5) * s / spec.ellipsoids - 0.5
        cy = (h - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
        cx = (w - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter)
        rz, ry, rx = rng.uniform(spec.radius_min, spec.radius_max, size=3)
        mask |= ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0

    frac = mask.mean()
    if not 0.01 <= frac <= 0.5:
        raise ConfigurationError(f"foreground fraction {frac:.4f} outside [0.01, 0.5]")

    # smooth background texture from a few random plane waves
    texture = np.zeros((s, h, w))
    for _ in range(3):
        k = rng.normal(size=3) * np.array([1 / s, 1 / h, 1 / w]) * 2 * np.pi * 2
        texture += np.cos(k[0] * z + k[1] * y + k[2] * x + rng.uniform(0, 2 * np.pi))
    base = 0.3 + 0.05 * texture
    img = base + spec.contrast * mask
    gain = 1.0 + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
    offset = rng.uniform(-spec.intensity_jitter, spec.intensity_jitter) / 2
    img = gain * img + offset
    if spec.noise:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return Volume(np.clip(img, 0.0, 1.0), mask.astype(np.uint8))


def generate_dataset(spec: SynthSpec, count: int) -> list[Volume]:
    """``count`` volumes whose seeds derive from ``spec.seed`` and the index."""
    seeds = np.random.SeedSequence(spec.seed).generate_state(count, dtype=np.uint32)
    out = []
    for i in range(count):
        vol_spec = SynthSpec(**{**asdict(spec), "seed": int(seeds[i])})
        out.append(generate_synthetic(vol_spec))
    return out


# slabs -------------------------------------------------------------------

def slab_starts(n_slices: int) -> list[int]:
    if n_slices < SLAB_DEPTH:
        raise TooThinError(f"volume has {n_slices} slices, need at least {SLAB_DEPTH}")
    starts = list(range(0, n_slices - SLAB_DEPTH + 1, SLAB_STRIDE))
    if starts[-1] != n_slices - SLAB_DEPTH:
        starts.append(n_slices - SLAB_DEPTH)
    return starts


def slab_ownership(starts: Sequence[int], n_slices: int) -> list[tuple[int, int]]:
    """Half-open slice range each slab writes into the composed output."""
    if not starts or starts[0] != 0 or starts[-1] + SLAB_DEPTH != n_slices:
        raise CompositionError("slabs do not span the volume from first to last slice")
    lows = [0] + [st + _EDGE for st in starts[1:]]
    highs = [st + SLAB_DEPTH - _EDGE for st in starts[:-1]] + [n_slices]
    owned = []
    for k in range(len(starts)):
        hi = highs[k] if k + 1 == len(starts) else min(highs[k], lows[k + 1])
        if k + 1 < len(starts) and lows[k + 1] > highs[k]:
            raise CompositionError(f"gap between slabs at {starts[k]} and {starts[k + 1]}")
        owned.append((lows[k], hi))
    return owned


def _position(k: int, count: int) -> str:
    if count == 1:
        return "only"
    return "first" if k == 0 else "last" if k == count - 1 else "interior"


def slice_slabs(vol: Volume) -> list[SlabBatch]:
    s, h, w = vol.shape
    starts = slab_starts(s)
    out = []
    for k, st in enumerate(starts):
        data = vol.intensities[st:st + SLAB_DEPTH].reshape(1, SLAB_DEPTH, h, w, 1)
        target = vol.mask[st:st + SLAB_DEPTH].reshape(1, SLAB_DEPTH, h, w, 1)
        out.append(SlabBatch(data, st, _position(k, len(starts)), target))
    return out


def compose_probabilities(pairs: Iterable[tuple[SlabBatch, np.ndarray]]) -> np.ndarray:
    pairs = sorted(pairs, key=lambda p: p[0].start_slice)
    if not pairs:
        raise CompositionError("no slabs to compose")
    starts = [slab.start_slice for slab, _ in pairs]
    n_slices = starts[-1] + SLAB_DEPTH
    _, _, h, w, _ = pairs[0][1].shape
    out = np.zeros((n_slices, h, w), dtype=np.float64)
    writes = np.zeros(n_slices, dtype=np.intp)
    for (slab, pred), (lo, hi) in zip(pairs, slab_ownership(starts, n_slices)):
        if pred.shape != (1, SLAB_DEPTH, h, w, 1):
            raise CompositionError(f"prediction shape {pred.shape} is not (1, 16, {h}, {w}, 1)")
        st = slab.start_slice
        out[lo:hi] = pred[0, lo - st:hi - st, :, :, 0]
        writes[lo:hi] += 1
    if not (writes == 1).all():
        raise CompositionError(f"slices written {writes.tolist()} times, expected once each")
    return out


def compose_prediction(pairs: Iterable[tuple[SlabBatch, np.ndarray]]) -> np.ndarray:
    """Stitch slab predictions into a binary (S, H, W) mask."""
    return threshold_mask(compose_probabilities(pairs))


# NRRD --------------------------------------------------------------------

_NRRD_TYPES = {
    "uchar": "u1", "unsigned char": "u1", "uint8": "u1", "uint8_t": "u1",
    "signed char": "i1", "int8": "i1", "int8_t": "i1",
    "short": "i2", "short int": "i2", "int16": "i2", "int16_t": "i2",
    "ushort": "u2", "unsigned short": "u2", "uint16": "u2", "uint16_t": "u2",
    "int": "i4", "int32": "i4", "int32_t": "i4",
    "uint": "u4", "unsigned int": "u4", "uint32": "u4", "uint32_t": "u4",
    "float": "f4", "double": "f8",
}


def _parse_header(lines: list[str]) -> dict[str, str]:
    fields = {}
    for line in lines:
        if not line or line.startswith("#"):
            continue
        if ":=" in line:  # key/value comments
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise UnsupportedFormatError(f"malformed header line {line!r}")
        fields[key.strip().lower()] = value.strip()
    return fields


def read_nrrd_array(path) -> np.ndarray:
    """Raw voxel values as an (S, H, W) array; the slowest NRRD axis is the slice axis."""
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(b"NRRD000"):
        raise UnsupportedFormatError("magic: not an NRRD file")
    end = blob.find(b"\n\n")
    if end < 0:
        if b"data file:" not in blob and b"datafile:" not in blob:
            raise UnsupportedFormatError("header: missing blank line before data")
        end = len(blob)  # detached header without trailing blank line
    lines = blob[:end].decode("ascii").splitlines()
    fields = _parse_header(lines[1:])

    dim = fields.get("dimension")
    if dim != "3":
        raise UnsupportedFormatError(f"dimension: {dim} (only 3 is supported)")
    type_name = fields.get("type", "").lower()
    if type_name not in _NRRD_TYPES:
        raise UnsupportedFormatError(f"type: {type_name!r}")
    encoding = fields.get("encoding", "").lower()
    if encoding not in ("raw", "gzip", "gz"):
        raise UnsupportedFormatError(f"encoding: {encoding!r} (raw or gzip only)")
    dtype = np.dtype(_NRRD_TYPES[type_name])
    if dtype.itemsize > 1:
        endian = fields.get("endian", "").lower()
        if endian != "little":
            raise UnsupportedFormatError(f"endian: {endian!r} (little only)")
        dtype = dtype.newbyteorder("<")
    try:
        sizes = [int(v) for v in fields["sizes"].split()]
    except (KeyError, ValueError):
        raise UnsupportedFormatError("sizes: missing or malformed") from None
    if len(sizes) != 3:
        raise UnsupportedFormatError(f"sizes: {len(sizes)} values for a 3D volume")

    detached = fields.get("data file") or fields.get("datafile")
    payload = (path.parent / detached).read_bytes() if detached else blob[end + 2:]
    if encoding != "raw":
        payload = gzip.decompress(payload)
    count = sizes[0] * sizes[1] * sizes[2]
    if len(payload) < count * dtype.itemsize:
        raise UnsupportedFormatError("data: payload shorter than sizes imply")
    data = np.frombuffer(payload, dtype=dtype, count=count)
    return data.reshape(sizes[2], sizes[1], sizes[0]).astype(dtype.newbyteorder("="))


def read_nrrd(path, mask_path=None) -> Volume:
    """Load a scan (rescaled to [0, 1]) and optionally its mask (nonzero -> 1)."""
    intensities = rescale_to_unit(read_nrrd_array(path))
    if mask_path is None:
        mask = np.zeros(intensities.shape, dtype=np.uint8)
    else:
        mask = (read_nrrd_array(mask_path) > 0).astype(np.uint8)
    return Volume(intensities, mask)


def write_nrrd(path, array: np.ndarray, encoding: str = "raw") -> None:
    a = np.asarray(array)
    if a.ndim != 3:
        raise UnsupportedFormatError(f"dimension: {a.ndim} (only 3 is supported)")
    names = {"u1": "uint8", "i2": "int16", "u2": "uint16", "i4": "int32",
             "u4": "uint32", "f4": "float", "f8": "double", "i1": "int8"}
    code = a.dtype.newbyteorder("=").str[1:]
    if code not in names:
        raise UnsupportedFormatError(f"type: {a.dtype}")
    s, h, w = a.shape
    header = [
        "NRRD0004",
        f"type: {names[code]}",
        "dimension: 3",
        f"sizes: {w} {h} {s}",
        f"encoding: {encoding}",
    ]
    if a.dtype.itemsize > 1:
        header.append("endian: little")
    payload = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
    if encoding == "gzip":
        payload = gzip.compress(payload, mtime=0)
    elif encoding != "raw":
        raise UnsupportedFormatError(f"encoding: {encoding!r}")
    Path(path).write_bytes(("\n".join(header) + "\n\n").encode("ascii") + payload)


def write_pgm_slices(mask: np.ndarray, directory, prefix: str = "slice") -> list[Path]:
    """Dump each slice of a binary or [0, 1] volume as an 8-bit binary PGM."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.asarray(mask, dtype=np.float64)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    paths = []
    for k, sl in enumerate(img):
        p = directory / f"{prefix}_{k:03d}.pgm"
        h, w = sl.shape
        p.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + sl.tobytes())
        paths.append(p)
    return paths


# manifest ----------------------------------------------------------------

def write_manifest(path, spec: SynthSpec, count: int,
                   files: Sequence[tuple[str, str]] = ()) -> None:
    """key=value lines: the generator spec, the volume count and optional
    ``volume.i``/``mask.i`` file names relative to the manifest."""
    lines = [f"{k}={v}" for k, v in asdict(spec).items()]
    lines.append(f"count={count}")
    for i, (vol, mask) in enumerate(files):
        lines.append(f"volume.{i}={vol}")
        lines.append(f"mask.{i}={mask}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[SynthSpec, int, list[tuple[str, str]]]:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"manifest line without '=': {line!r}")
        values[key.strip()] = value.strip()
    kinds = {k: type(v) for k, v in asdict(SynthSpec()).items()}
    spec = SynthSpec(**{k: kinds[k](values[k]) for k in kinds if k in values})
    count = int(values.get("count", 1))
    files = []
    i = 0
    while f"volume.{i}" in values:
        files.append((values[f"volume.{i}"], values.get(f"mask.{i}", "")))
        i += 1
    return spec, count, files


def load_manifest_volumes(path) -> list[Volume]:
    """Volumes named by a manifest, or generated from its spec if it lists none."""
    path = Path(path)
    spec, count, files = read_manifest(path)
    if not files:
        return generate_dataset(spec, count)
    return [read_nrrd(path.parent / vol, path.parent / mask if mask else None)
            for vol, mask in files]
