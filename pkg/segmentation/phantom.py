# segmentation/phantom.py
"""
Synthetic Dixon spine phantom: tilted ellipsoidal discs strung along a
sinusoidal curve in the sagittal (y, x) plane, water/fat intensities per
region with Gaussian noise, in-phase = water + fat and opposed-phase =
|water - fat|.

Intensities are quantized to 1/256 so that the Dixon identities hold
exactly in float32.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from disc_segmentation.utils import derive_seed

from .exceptions import ConfigError, FormatError
from .pipeline import BOX_EXTENT, connected_components
from .volume import MODALITIES, MultiModalSample, Volume, VolumeKind, load_volume, save_volume

logger = logging.getLogger(__name__)

QUANTUM = 1.0 / 256
MANIFEST = "manifest.json"
MAX_DIMS = (36, 256, 256)


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (36, 128, 128)
    discs: int = 7
    semi_axes: tuple = (9.0, 3.5, 13.0)
    amplitude: float = 6.0
    phase: float = 0.0
    spacing: tuple = (2.0, 1.25, 1.25)
    fat_fg: float = 15.9
    fat_bg: float = 35.2
    wat_fg: float = 163.4
    wat_bg: float = 67.9
    noise: float = 0.2
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ConfigError(f"Phantom dims must be three positive sizes, got {self.dims}.", field="dims")
        if any(d > m for d, m in zip(self.dims, MAX_DIMS)):
            raise ConfigError(f"Phantom dims {self.dims} exceed {MAX_DIMS}.", field="dims")
        if self.discs < 1:
            raise ConfigError(f"Need at least one disc, got {self.discs}.", field="discs")
        if min(self.fat_fg, self.fat_bg, self.wat_fg, self.wat_bg) < 0:
            raise ConfigError("Intensity means must be non-negative.", field="intensity")
        if self.noise < 0 or self.texture < 0:
            raise ConfigError("Noise and texture levels must be non-negative.", field="noise")

    @property
    def pitch(self):
        """
        Distance in voxels between consecutive disc centers along y. Discs
        are only kept from touching; at the default dims centers sit 16
        voxels apart, so no 36-voxel separation is guaranteed.
        """
        return self.dims[1] / (self.discs + 1)


def disc_centers(cfg):
    """Real (z, y, x) centers and in-plane tilt angles of every disc, cranial first."""
    nz, ny, nx = cfg.dims
    period = ny
    discs = []
    for index in range(cfg.discs):
        y = cfg.pitch * (index + 1)
        angle = 2 * math.pi * y / period + cfg.phase
        x = (nx - 1) / 2 + cfg.amplitude * math.sin(angle)
        slope = cfg.amplitude * 2 * math.pi / period * math.cos(angle)
        discs.append(((nz - 1) / 2, y, x, math.atan(slope)))
    return discs


def _disc_mask(cfg, center, tilt):
    """Ellipsoid rotated by `tilt` in the (y, x) plane so it lies across the curve."""
    rz, ry, rx = cfg.semi_axes
    z, y, x = np.indices(cfg.dims, dtype=np.float64)
    cz, cy, cx = center
    dy, dx = y - cy, x - cx
    across = dx * math.cos(tilt) + dy * math.sin(tilt)
    along = -dx * math.sin(tilt) + dy * math.cos(tilt)
    return ((z - cz) / rz) ** 2 + (along / ry) ** 2 + (across / rx) ** 2 <= 1.0


def _extent(mask):
    coords = np.argwhere(mask)
    return coords.min(axis=0), coords.max(axis=0)


def disc_label(cfg):
    """Union of the disc ellipsoids; raises ConfigError when discs leave the grid, their box or touch."""
    label = np.zeros(cfg.dims, dtype=bool)
    for index, (cz, cy, cx, tilt) in enumerate(disc_centers(cfg)):
        mask = _disc_mask(cfg, (cz, cy, cx), tilt)
        if not mask.any():
            raise ConfigError(f"Disc {index} is empty; semi-axes {cfg.semi_axes} are too small.", field="semi_axes")
        lo, hi = _extent(mask)
        if lo.min() == 0 or np.any(hi >= np.asarray(cfg.dims) - 1):
            raise ConfigError(f"Disc {index} does not fit inside dims {cfg.dims}.", field="dims")
        if np.any(hi - lo + 1 > np.asarray(BOX_EXTENT)):
            raise ConfigError(f"Disc {index} spans {tuple(hi - lo + 1)}, more than the {BOX_EXTENT} crop box.", field="semi_axes")
        label |= mask
    if connected_components(label).count != cfg.discs:
        raise ConfigError(f"Discs touch each other; increase dims or reduce the {cfg.discs} discs.", field="discs")
    return label


def _quantize(values):
    return (np.round(np.maximum(values, 0.0) / QUANTUM) * QUANTUM).astype(np.float32)


def _field(rng, label, fg, bg, cfg):
    mean = np.where(label, fg, bg)
    noise = rng.standard_normal(cfg.dims) * cfg.noise * mean
    texture = ndimage.gaussian_filter(rng.standard_normal(cfg.dims), sigma=2.0) * cfg.texture * bg * ~label
    return _quantize(mean + noise + texture)


def generate_phantom(cfg, sample_id="phantom"):
    label = disc_label(cfg)
    rng = np.random.default_rng(cfg.seed)
    wat = _field(rng, label, cfg.wat_fg, cfg.wat_bg, cfg)
    fat = _field(rng, label, cfg.fat_fg, cfg.fat_bg, cfg)
    modalities = {
        "fat": fat,
        "inn": wat + fat,
        "opp": np.abs(wat - fat),
        "wat": wat,
    }
    volumes = {name: Volume(data, cfg.spacing) for name, data in modalities.items()}
    truth = Volume(label.astype(np.uint8), cfg.spacing, VolumeKind.LABEL)
    logger.debug("Generated %s with %d discs (seed %d).", sample_id, cfg.discs, cfg.seed)
    return MultiModalSample(volumes, truth, sample_id)


def jitter_config(cfg, seed):
    """Small per-sample variation of the curve and the intensity design."""
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.95, 1.05, 4)
    return replace(
        cfg,
        amplitude=cfg.amplitude * float(rng.uniform(0.8, 1.2)),
        phase=cfg.phase + float(rng.uniform(-0.5, 0.5)),
        fat_fg=cfg.fat_fg * float(scale[0]),
        fat_bg=cfg.fat_bg * float(scale[1]),
        wat_fg=cfg.wat_fg * float(scale[2]),
        wat_bg=cfg.wat_bg * float(scale[3]),
        seed=int(seed),
    )


def generate_dataset(n_samples=8, cfg=None, seed=0):
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}.", field="n_samples")
    cfg = cfg or PhantomConfig()
    samples = [
        generate_phantom(jitter_config(cfg, derive_seed(seed, index)), f"phantom-{index:02d}")
        for index in range(n_samples)
    ]
    logger.info("Generated %d phantom samples.", n_samples)
    return samples


def split_dataset(samples, validation=2):
    """Last `validation` samples are held out; -> (train, validation)."""
    if not 0 <= validation < len(samples):
        raise ConfigError(f"Cannot hold out {validation} of {len(samples)} samples.", field="validation")
    cut = len(samples) - validation
    return list(samples[:cut]), list(samples[cut:])


# --- Dataset directories ---

def save_dataset(samples, directory, validation=0, config=None):
    """
    Write every sample as MVL1 volumes plus a manifest listing modalities,
    label path and split tag. Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    train, held_out = split_dataset(samples, validation)
    entries = []
    for split, members in (("train", train), ("validation", held_out)):
        for sample in members:
            files = {}
            for name, volume in sample.modalities.items():
                files[name] = f"{sample.sample_id}_{name}.mvl"
                save_volume(volume, directory / files[name])
            label = None
            if sample.label is not None:
                label = f"{sample.sample_id}_label.mvl"
                save_volume(sample.label, directory / label)
            entries.append({"sample_id": sample.sample_id, "split": split, "modalities": files, "label": label})
    manifest = {"samples": entries, "config": asdict(config) if config is not None else None}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(directory, split=None):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FormatError(f"No dataset manifest in {directory}.", field="manifest")
    try:
        entries = json.loads(path.read_text())["samples"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"Unreadable dataset manifest {path}: {exc}.", field="manifest") from exc

    samples = []
    for entry in entries:
        if split is not None and entry["split"] != split:
            continue
        modalities = {name: load_volume(directory / file) for name, file in entry["modalities"].items() if name in MODALITIES}
        label = load_volume(directory / entry["label"]) if entry.get("label") else None
        samples.append(MultiModalSample(modalities, label, entry["sample_id"]))
    return samples
