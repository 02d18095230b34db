# segmentation/volume.py
"""
Volumetric data model, the MVL1 file format and the geometric primitives
(pad, crop, slice, normalize) the rest of the library is built on.

Arrays are laid out channel-major then z, y, x with x fastest, i.e. numpy
shape ``(nc, nz, ny, nx)`` in C order.
"""

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContractError, DimensionError, FormatError

logger = logging.getLogger(__name__)

MODALITIES = ("fat", "inn", "opp", "wat")
AXES = {"z": 0, "y": 1, "x": 2}

MAGIC = b"MVL1"
# magic, nc, nz, ny, nx, sz, sy, sx, dtype, kind, 2 reserved bytes
HEADER = struct.Struct("<4s4I3fBB2s")
MAX_VOXELS = 1 << 34


# --- Enums for Choices ---

class VolumeKind(enum.Enum):
    INTENSITY = 0
    LABEL = 1
    PROBABILITY = 2

    @classmethod
    def choices(cls):
        return [(key.value, key.name.title()) for key in cls]


class DtypeCode(enum.Enum):
    F32 = 0
    U8 = 1


DTYPES = {DtypeCode.F32: np.dtype("<f4"), DtypeCode.U8: np.dtype("u1")}


def _frozen(array):
    view = array.view()
    view.flags.writeable = False
    return view


def _f32_spacing(spacing):
    return tuple(float(np.float32(s)) for s in spacing)


# --- Models ---

@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise DimensionError(f"Volume data must be (nc, nz, ny, nx) with positive dims, got {data.shape}.", field="dims")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ContractError(f"Spacing components must be positive, got {self.spacing}.", field="spacing")

        kind = VolumeKind(self.kind)
        if kind is VolumeKind.LABEL:
            if data.dtype != np.uint8:
                if not np.all((data == 0) | (data == 1)):
                    raise ContractError("Label volumes may only contain 0 and 1.", field="data")
                data = data.astype(np.uint8)
            elif data.size and data.max() > 1:
                raise ContractError("Label volumes may only contain 0 and 1.", field="data")
        else:
            data = data.astype(np.float32, copy=False)
            if kind is VolumeKind.PROBABILITY and data.size and (data.min() < 0 or data.max() > 1):
                raise ContractError("Probability volumes must lie in [0, 1].", field="data")

        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(data)))
        object.__setattr__(self, "spacing", _f32_spacing(self.spacing))
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    @property
    def nc(self):
        return self.dims[0]

    @property
    def spatial_dims(self):
        return self.dims[1:]

    def channel(self, index):
        return Volume(self.data[index:index + 1], self.spacing, self.kind)

    def with_data(self, data, kind=None):
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def equals(self, other):
        """Bit-level equality of data, spacing and kind."""
        return (
            self.kind is other.kind
            and self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class MultiModalSample:
    modalities: dict
    label: Volume = None
    sample_id: str = ""
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.modalities:
            raise ContractError("A sample needs at least one modality.", field="modalities")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ContractError(f"Unknown modalities: {sorted(unknown)}.", field="modalities")

        ordered = {name: self.modalities[name] for name in MODALITIES if name in self.modalities}
        members = list(ordered.values()) + ([self.label] if self.label is not None else [])
        reference = members[0]
        for volume in members:
            if volume.nc != 1:
                raise ContractError("Sample member volumes must be single-channel.", field="nc")
            if volume.dims != reference.dims or volume.spacing != reference.spacing:
                raise DimensionError(
                    f"Sample member volumes disagree: {volume.dims}/{volume.spacing} vs {reference.dims}/{reference.spacing}.",
                    field="dims",
                )
        if self.label is not None and self.label.kind is not VolumeKind.LABEL:
            raise ContractError("Sample label must be a label-binary volume.", field="label")
        object.__setattr__(self, "modalities", ordered)

    @property
    def names(self):
        return tuple(self.modalities)

    @property
    def spatial_dims(self):
        return next(iter(self.modalities.values())).spatial_dims

    @property
    def spacing(self):
        return next(iter(self.modalities.values())).spacing

    def select(self, names):
        missing = [name for name in names if name not in self.modalities]
        if missing:
            raise ContractError(f"Sample {self.sample_id!r} lacks modalities {missing}.", field="modalities")
        return MultiModalSample({name: self.modalities[name] for name in names}, self.label, self.sample_id, self.notes)

    def stack(self, names=None):
        """Modalities as one (C, nz, ny, nx) float32 array, in canonical order."""
        names = self.names if names is None else [n for n in MODALITIES if n in names]
        return np.concatenate([self.select(names).modalities[name].data for name in names], axis=0)


@dataclass(frozen=True)
class BoxRegion:
    center: tuple
    extent: tuple

    def __post_init__(self):
        if len(self.center) != 3 or len(self.extent) != 3 or any(int(e) < 1 for e in self.extent):
            raise DimensionError(f"Invalid box {self.center}/{self.extent}.", field="extent")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        object.__setattr__(self, "extent", tuple(int(e) for e in self.extent))

    @property
    def start(self):
        return tuple(c - e // 2 for c, e in zip(self.center, self.extent))

    @property
    def voxel_count(self):
        dz, dy, dx = self.extent
        return dz * dy * dx


# --- File format ---

def save_volume(v, path):
    path = Path(path)
    dtype_code = DtypeCode.U8 if v.kind is VolumeKind.LABEL else DtypeCode.F32
    nc, nz, ny, nx = v.dims
    header = HEADER.pack(MAGIC, nc, nz, ny, nx, *v.spacing, dtype_code.value, v.kind.value, b"\x00\x00")
    payload = np.ascontiguousarray(v.data, dtype=DTYPES[dtype_code]).tobytes()
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload)
    logger.debug("Saved volume dims=%s kind=%s to %s", v.dims, v.kind.name, path)


def load_volume(path):
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"Truncated header: {len(raw)} of {HEADER.size} bytes.", field="header")
    magic, nc, nz, ny, nx, sz, sy, sx, dtype_code, kind, reserved = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {MAGIC!r}.", field="magic")
    try:
        dtype = DTYPES[DtypeCode(dtype_code)]
    except ValueError:
        raise FormatError(f"Unknown dtype code {dtype_code}.", field="dtype") from None
    try:
        kind = VolumeKind(kind)
    except ValueError:
        raise FormatError(f"Unknown kind code {kind}.", field="kind") from None
    if reserved != b"\x00\x00":
        raise FormatError("Reserved header bytes must be zero.", field="reserved")

    dims = (nc, nz, ny, nx)
    count = nc * nz * ny * nx
    if count == 0 or count > MAX_VOXELS:
        raise FormatError(f"Declared dims {dims} are empty or overflow.", field="dims")
    expected = count * dtype.itemsize
    payload = raw[HEADER.size:]
    if len(payload) < expected:
        raise FormatError(f"Truncated payload: {len(payload)} of {expected} bytes.", field="payload")
    if len(payload) > expected:
        raise FormatError(f"Trailing bytes after payload: {len(payload) - expected}.", field="payload")

    data = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return Volume(data, (sz, sy, sx), kind)


# --- Geometry ---

def _pad_split(source, target):
    lo = (target - source) // 2
    return lo, target - source - lo


def pad_to(v, target, fill=0):
    """Zero-pad (or `fill`-pad) spatial dims to `target`; extra voxel goes high."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < s for t, s in zip(target, v.spatial_dims)):
        raise DimensionError(f"Cannot pad {v.spatial_dims} to smaller target {target}.", field="target")
    widths = [(0, 0)] + [_pad_split(s, t) for s, t in zip(v.spatial_dims, target)]
    return v.with_data(np.pad(v.data, widths, mode="constant", constant_values=fill))


def crop_to(v, target):
    """Inverse of `pad_to`: center crop with the same floor-biased split."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t > s for t, s in zip(target, v.spatial_dims)):
        raise DimensionError(f"Cannot crop {v.spatial_dims} to larger target {target}.", field="target")
    slices = [slice(None)]
    for s, t in zip(v.spatial_dims, target):
        lo, _ = _pad_split(t, s)
        slices.append(slice(lo, lo + t))
    return v.with_data(v.data[tuple(slices)])


def box_overlap(dims, box):
    """(source slices, destination slices) of the part of `box` inside a grid of `dims`."""
    source, destination = [], []
    for start, extent, size in zip(box.start, box.extent, dims):
        lo, hi = max(start, 0), min(start + extent, size)
        if hi <= lo:
            return None
        source.append(slice(lo, hi))
        destination.append(slice(lo - start, hi - start))
    return tuple(source), tuple(destination)


def crop_box(v, box):
    out = np.zeros((v.nc,) + box.extent, dtype=v.data.dtype)
    overlap = box_overlap(v.spatial_dims, box)
    if overlap is not None:
        source, destination = overlap
        out[(slice(None),) + destination] = v.data[(slice(None),) + source]
    return v.with_data(out)


def _slice_spacing(spacing, axis):
    sz, sy, sx = spacing
    return {0: (sz, sy, sx), 1: (sy, sz, sx), 2: (sx, sz, sy)}[axis]


def slice_along_axis(v, axis):
    """2D slices as (1, 1, a, b) volumes, ordered by index along `axis`."""
    if v.nc != 1:
        raise ContractError(f"Slicing needs a single-channel volume, got nc={v.nc}.", field="nc")
    index = AXES[axis]
    spacing = _slice_spacing(v.spacing, index)
    planes = np.moveaxis(v.data[0], index, 0)
    return [Volume(plane[np.newaxis, np.newaxis], spacing, v.kind) for plane in planes]


def stack_slices(slices, axis):
    """Inverse of `slice_along_axis`."""
    index = AXES[axis]
    first = slices[0]
    s_axis, s_a, s_b = first.spacing
    spacing = {0: (s_axis, s_a, s_b), 1: (s_a, s_axis, s_b), 2: (s_a, s_b, s_axis)}[index]
    planes = np.stack([s.data[0, 0] for s in slices], axis=index)
    return Volume(planes[np.newaxis], spacing, first.kind)


def normalize_sample(s):
    """Pooled z-score over every voxel of every modality of the sample."""
    pooled = np.concatenate([v.data.ravel().astype(np.float64) for v in s.modalities.values()])
    mean = pooled.mean()
    sd = pooled.std()
    if sd == 0:
        logger.warning("Sample %r has zero pooled variance; normalized to zeros.", s.sample_id)
        modalities = {name: v.with_data(np.zeros_like(v.data)) for name, v in s.modalities.items()}
        return MultiModalSample(modalities, s.label, s.sample_id, s.notes + ("degenerate-normalization",))
    modalities = {
        name: v.with_data(((v.data.astype(np.float64) - mean) / sd).astype(np.float32))
        for name, v in s.modalities.items()
    }
    return MultiModalSample(modalities, s.label, s.sample_id, s.notes)
