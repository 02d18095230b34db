# segmentation/augment.py
"""
Affine and elastic augmentation applied jointly to every modality of a
sample (cubic interpolation) and to its label (nearest neighbour).

Sampling is inverse-mapped: output(p) = input(T(p)). Reads outside the grid
return 0, consistent with the zero-padding used everywhere else.
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from disc_segmentation.utils import derive_seed

from .exceptions import ContractError, DomainError
from .volume import AXES, MultiModalSample, VolumeKind

logger = logging.getLogger(__name__)

INTERPOLATIONS = ("cubic", "nearest")
OPERATIONS = ("translate", "rotate", "flip", "scale", "elastic")
GAUSSIAN_TRUNCATE = 3.0


@dataclass(frozen=True, eq=False)
class DisplacementField:
    dz: np.ndarray
    dy: np.ndarray
    dx: np.ndarray
    delta: float
    alpha: float

    @property
    def dims(self):
        return self.dz.shape

    def components(self):
        return self.dz, self.dy, self.dx


@dataclass(frozen=True)
class AugmentBounds:
    translate: float = 5.0
    rotate: float = 10.0
    scale: tuple = (0.9, 1.1)
    delta: float = 4.0
    alpha: float = 8.0
    flip_axes: tuple = ("z",)


@dataclass(frozen=True)
class AugmentOp:
    name: str
    params: dict = field(default_factory=dict)

    def describe(self):
        values = ",".join(f"{key}={value}" for key, value in sorted(self.params.items()))
        return f"{self.name}({values})"


@dataclass(frozen=True)
class AugmentSpec:
    seed: int
    ops: tuple

    def __post_init__(self):
        if not self.ops:
            raise ContractError("An augmentation spec needs at least one operation.", field="ops")

    def describe(self):
        return ";".join(op.describe() for op in self.ops)


# --- Interpolation ---

def _catmull_rom_weights(t):
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            0.5 * (-t3 + 2 * t2 - t),
            0.5 * (3 * t3 - 5 * t2 + 2),
            0.5 * (-3 * t3 + 4 * t2 + t),
            0.5 * (t3 - t2),
        ],
        axis=-1,
    )


def _sample(data, coords, interpolation):
    """Sample (nc, nz, ny, nx) `data` at real voxel `coords` (3, N); returns (nc, N) float64."""
    nc = data.shape[0]
    dims = data.shape[1:]
    flat = data.reshape(nc, -1).astype(np.float64)
    count = coords.shape[1]

    if interpolation == "nearest":
        index = np.floor(coords + 0.5).astype(np.int64)
        valid = np.ones(count, dtype=bool)
        for axis, size in enumerate(dims):
            valid &= (index[axis] >= 0) & (index[axis] < size)
        clipped = [np.clip(index[axis], 0, size - 1) for axis, size in enumerate(dims)]
        values = flat[:, np.ravel_multi_index(clipped, dims)]
        return np.where(valid, values, 0.0)

    base = np.floor(coords).astype(np.int64)
    weights, indices, valid = [], [], []
    for axis, size in enumerate(dims):
        weights.append(_catmull_rom_weights(coords[axis] - base[axis]))
        taps = base[axis][:, np.newaxis] + np.arange(-1, 3)
        valid.append((taps >= 0) & (taps < size))
        indices.append(np.clip(taps, 0, size - 1))

    out = np.zeros((nc, count), dtype=np.float64)
    for i, j, k in itertools.product(range(4), repeat=3):
        w = weights[0][:, i] * weights[1][:, j] * weights[2][:, k]
        if not w.any():
            continue
        inside = valid[0][:, i] & valid[1][:, j] & valid[2][:, k]
        flat_index = np.ravel_multi_index((indices[0][:, i], indices[1][:, j], indices[2][:, k]), dims)
        out += np.where(inside, w, 0.0) * flat[:, flat_index]
    return out


def _check_interpolation(v, interpolation):
    if interpolation not in INTERPOLATIONS:
        raise ContractError(f"Unknown interpolation {interpolation!r}.", field="interpolation")
    if interpolation == "cubic" and v.kind is VolumeKind.LABEL:
        raise ContractError("Label volumes must be resampled with nearest interpolation.", field="interpolation")


def _resample(v, coords, interpolation):
    values = _sample(v.data, coords, interpolation).reshape(v.dims)
    if v.kind is VolumeKind.PROBABILITY:
        values = np.clip(values, 0.0, 1.0)
    elif v.kind is VolumeKind.LABEL:
        values = np.rint(values)
    return v.with_data(values)


def _grid(dims):
    return np.indices(dims, dtype=np.float64).reshape(3, -1)


# --- Elastic ---

def elastic_field(dims, delta, alpha, seed):
    """
    Uniform(-1, 1) raw components drawn in z, y, x order from
    ``default_rng(seed)``, blurred by a Gaussian of sd `delta` voxels
    (truncated at 3 sd, normalized kernel) and scaled by `alpha`.
    Singleton axes get no displacement.
    """
    if not delta > 0:
        raise DomainError(f"Gaussian sd delta must be positive, got {delta}.", field="delta")
    if alpha < 0:
        raise DomainError(f"Scaling factor alpha must be non-negative, got {alpha}.", field="alpha")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    sigma = [delta if size > 1 else 0.0 for size in dims]
    components = []
    for size in dims:
        raw = rng.uniform(-1.0, 1.0, dims)
        if size == 1 or alpha == 0:
            components.append(np.zeros(dims))
            continue
        components.append(gaussian_filter(raw, sigma=sigma, truncate=GAUSSIAN_TRUNCATE, mode="reflect") * alpha)
    return DisplacementField(*components, delta=float(delta), alpha=float(alpha))


def apply_deformation(v, displacement, interpolation="cubic"):
    _check_interpolation(v, interpolation)
    if displacement.dims != v.spatial_dims:
        raise ContractError(f"Field dims {displacement.dims} do not match volume {v.spatial_dims}.", field="dims")
    coords = _grid(v.spatial_dims) + np.stack([c.ravel() for c in displacement.components()])
    return _resample(v, coords, interpolation)


# --- Affine ---

def rotation_matrix(rotate):
    """Rotation in (z, y, x) coordinates from angles in degrees about the z, y and x axes."""
    az, ay, ax = (math.radians(a) for a in rotate)
    rz = np.array([[1, 0, 0], [0, math.cos(az), -math.sin(az)], [0, math.sin(az), math.cos(az)]])
    ry = np.array([[math.cos(ay), 0, -math.sin(ay)], [0, 1, 0], [math.sin(ay), 0, math.cos(ay)]])
    rx = np.array([[math.cos(ax), -math.sin(ax), 0], [math.sin(ax), math.cos(ax), 0], [0, 0, 1]])
    return rz @ ry @ rx


def apply_affine(v, translate=(0, 0, 0), rotate=(0, 0, 0), flip=(), scale=1.0, interpolation="cubic"):
    _check_interpolation(v, interpolation)
    if not scale > 0:
        raise DomainError(f"Scale factor must be positive, got {scale}.", field="scale")

    data = v.data
    if flip:
        data = np.flip(data, axis=tuple(1 + AXES[axis] for axis in flip))
    flipped = v.with_data(data)
    if not any(translate) and not any(rotate) and scale == 1.0:
        return flipped

    dims = v.spatial_dims
    center = (np.asarray(dims, dtype=np.float64)[:, np.newaxis] - 1) / 2
    shift = np.asarray(translate, dtype=np.float64)[:, np.newaxis]
    inverse = rotation_matrix(rotate).T / scale
    coords = inverse @ (_grid(dims) - center - shift) + center
    return _resample(flipped, coords, interpolation)


# --- Specs ---

def random_augment_spec(bounds, seed):
    """A random non-empty combination of operations in arbitrary order."""
    rng = np.random.default_rng(seed)
    names = [name for name in OPERATIONS if name != "flip" or bounds.flip_axes]
    order = rng.permutation(len(names))[: int(rng.integers(1, len(names) + 1))]
    ops = []
    for position in order:
        name = names[position]
        if name == "translate":
            params = {"offset": tuple(float(t) for t in rng.uniform(-bounds.translate, bounds.translate, 3))}
        elif name == "rotate":
            params = {"angles": tuple(float(a) for a in rng.uniform(-bounds.rotate, bounds.rotate, 3))}
        elif name == "flip":
            chosen = rng.random(len(bounds.flip_axes)) < 0.5
            if not chosen.any():
                chosen[int(rng.integers(len(bounds.flip_axes)))] = True
            params = {"axes": tuple(axis for axis, keep in zip(bounds.flip_axes, chosen) if keep)}
        elif name == "scale":
            params = {"factor": float(rng.uniform(*bounds.scale))}
        else:
            params = {"delta": bounds.delta, "alpha": bounds.alpha, "seed": int(rng.integers(2**63))}
        ops.append(AugmentOp(name, params))
    return AugmentSpec(int(seed), tuple(ops))


def _apply_op(volumes, op):
    """Apply one op to {name: volume}; labels always go through nearest."""
    def mode(volume):
        return "nearest" if volume.kind is VolumeKind.LABEL else "cubic"

    if op.name == "elastic":
        dims = next(iter(volumes.values())).spatial_dims
        displacement = elastic_field(dims, op.params["delta"], op.params["alpha"], op.params["seed"])
        return {key: apply_deformation(v, displacement, mode(v)) for key, v in volumes.items()}

    kwargs = {
        "translate": {"translate": op.params.get("offset")},
        "rotate": {"rotate": op.params.get("angles")},
        "flip": {"flip": op.params.get("axes")},
        "scale": {"scale": op.params.get("factor")},
    }.get(op.name)
    if kwargs is None:
        raise ContractError(f"Unknown augmentation operation {op.name!r}.", field="ops")
    return {key: apply_affine(v, interpolation=mode(v), **kwargs) for key, v in volumes.items()}


def apply_augment_spec(sample, spec, sample_id=None):
    volumes = dict(sample.modalities)
    if sample.label is not None:
        volumes["__label__"] = sample.label
    for op in spec.ops:
        volumes = _apply_op(volumes, op)
    label = volumes.pop("__label__", None)
    note = f"augment:{spec.describe()}"
    return MultiModalSample(volumes, label, sample_id or sample.sample_id, sample.notes + (note,))


def augment_dataset(samples, copies_per_sample=3, bounds=None, seed=0, workers=1):
    """
    Originals first, then `copies_per_sample` augmented copies per sample.
    Copy k (global index) uses the spec drawn from seed XOR k, so results do
    not depend on `workers`.
    """
    if copies_per_sample < 0:
        raise ContractError(f"copies_per_sample must be >= 0, got {copies_per_sample}.", field="copies_per_sample")
    bounds = bounds or AugmentBounds()
    jobs = [
        (sample, random_augment_spec(bounds, derive_seed(seed, i * copies_per_sample + j)), f"{sample.sample_id}-aug{j + 1}")
        for i, sample in enumerate(samples)
        for j in range(copies_per_sample)
    ]

    def run(job):
        sample, spec, sample_id = job
        logger.debug("Augmenting %s with %s", sample_id, spec.describe())
        return apply_augment_spec(sample, spec, sample_id)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            copies = list(pool.map(run, jobs))
    else:
        copies = [run(job) for job in jobs]
    logger.info("Augmented %d samples into %d.", len(samples), len(samples) + len(copies))
    return list(samples) + copies
