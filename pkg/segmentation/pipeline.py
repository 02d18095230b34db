# segmentation/pipeline.py
"""
Two-stage coarse-to-fine disc segmentation: a localization network gives
disc centers, each center yields a fixed-size multimodal patch, a patch
network segments it, and the thresholded patches are placed back into the
full volume.

The craniocaudal axis is y, so centers are ordered by (y, z, x).
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .exceptions import ContractError, DimensionError, ShapeError
from .volume import (
    AXES,
    BoxRegion,
    MultiModalSample,
    Volume,
    VolumeKind,
    box_overlap,
    crop_box,
    crop_to,
    normalize_sample,
    pad_to,
    slice_along_axis,
    stack_slices,
)

logger = logging.getLogger(__name__)

BOX_EXTENT = (25, 35, 35)
PATCH_DIMS = (28, 36, 36)
CONNECTIVITY = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True, eq=False)
class ComponentLabeling:
    ids: np.ndarray
    sizes: tuple
    centroids: tuple

    @property
    def count(self):
        return len(self.sizes)

    def mask_of(self, component):
        return (self.ids == component).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class DiscInstance:
    center: tuple
    box: BoxRegion
    patch: MultiModalSample
    prob: Volume = None
    mask: Volume = None
    index: int = 0


@dataclass(frozen=True)
class PipelineConfig:
    modalities: tuple = ("fat", "opp", "wat")
    min_region_voxels: int = 100
    threshold: float = 0.5
    localizer_downsample: int = 1
    normalize: bool = True
    box_extent: tuple = BOX_EXTENT
    patch_dims: tuple = PATCH_DIMS
    stacked: bool = False

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ContractError(f"threshold must be within (0, 1), got {self.threshold}.", field="threshold")
        if self.localizer_downsample < 1:
            raise ContractError(f"localizer_downsample must be >= 1, got {self.localizer_downsample}.", field="localizer_downsample")
        if any(p < b for p, b in zip(self.patch_dims, self.box_extent)):
            raise ContractError(f"Patch dims {self.patch_dims} cannot hold box {self.box_extent}.", field="patch_dims")


# --- Components ---

def _mask_array(mask):
    array = mask.data[0] if isinstance(mask, Volume) else np.asarray(mask)
    if array.ndim != 3:
        raise DimensionError(f"Component analysis needs a 3D mask, got {array.shape}.", field="dims")
    return array.astype(bool)


def connected_components(mask, connectivity=26):
    """
    Flood labeling with ids assigned in raster-scan order of each
    component's first voxel. Centroids are real (z, y, x) voxel coordinates.
    """
    if connectivity not in CONNECTIVITY:
        raise ContractError(f"Connectivity must be one of {sorted(CONNECTIVITY)}, got {connectivity}.", field="connectivity")
    array = _mask_array(mask)
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY[connectivity])
    ids, count = ndimage.label(array, structure=structure)
    if count == 0:
        return ComponentLabeling(ids.astype(np.int32), (), ())
    sizes = np.bincount(ids.ravel(), minlength=count + 1)[1:]
    centroids = ndimage.center_of_mass(array, ids, range(1, count + 1))
    return ComponentLabeling(
        ids.astype(np.int32),
        tuple(int(size) for size in sizes),
        tuple(tuple(float(c) for c in centroid) for centroid in centroids),
    )


def round_center(centroid):
    return tuple(int(np.floor(c + 0.5)) for c in centroid)


def order_centers(centers):
    return sorted(centers, key=lambda c: (c[1], c[0], c[2]))


def component_centers(mask, min_region_voxels=0, connectivity=26):
    labeling = connected_components(mask, connectivity)
    kept = [
        round_center(centroid)
        for size, centroid in zip(labeling.sizes, labeling.centroids)
        if size >= min_region_voxels
    ]
    dropped = labeling.count - len(kept)
    if dropped:
        logger.debug("Dropped %d components smaller than %d voxels.", dropped, min_region_voxels)
    return order_centers(kept)


# --- Resolution helpers ---

def _round_up(size, multiple):
    return -(-size // multiple) * multiple


def _downsample(data, factor, reduce="mean"):
    """Block-reduce the spatial axes of (C, z, y, x) by `factor`."""
    if factor == 1:
        return data
    c, z, y, x = data.shape
    blocks = data.reshape(c, z // factor, factor, y // factor, factor, x // factor, factor)
    if reduce == "max":
        return blocks.max(axis=(2, 4, 6))
    return blocks.mean(axis=(2, 4, 6), dtype=np.float64).astype(data.dtype)


def _upsample(data, factor):
    for axis in range(1, data.ndim):
        data = np.repeat(data, factor, axis=axis)
    return data


def _padded_dims(dims, multiple):
    return tuple(_round_up(d, multiple) for d in dims)


def prepare_sample(sample, modalities, normalize=True):
    """Select `modalities` and apply the pooled z-score the networks are trained on."""
    selected = sample.select(modalities)
    return normalize_sample(selected) if normalize else selected


def _check_channels(network, channels):
    if network.spec.in_channels != channels:
        raise ShapeError(
            f"Network expects {network.spec.in_channels} input channels, got {channels}.",
            field="in_channels",
        )


# --- Localization ---

def localization_map(sample, localizer, downsample=1):
    """Localizer probabilities at full resolution as a probability Volume."""
    _check_channels(localizer, len(sample.names))
    dims = sample.spatial_dims
    padded = _padded_dims(dims, localizer.spec.multiple * downsample)
    stacked = pad_to(Volume(sample.stack(), sample.spacing), padded).data
    coarse = _downsample(stacked, downsample)
    prob = localizer.predict(coarse[np.newaxis])[0]
    full = Volume(np.clip(_upsample(prob, downsample), 0, 1), sample.spacing, VolumeKind.PROBABILITY)
    return crop_to(full, dims)


def localize(sample, localizer, min_region_voxels=100, threshold=0.5, downsample=1, connectivity=26):
    """
    Forward, threshold, label components, drop those smaller than
    `min_region_voxels` and return rounded centroids in craniocaudal order.
    `sample` must already carry exactly the localizer's modalities.
    """
    prob = localization_map(sample, localizer, downsample)
    centers = component_centers(prob.data[0] >= threshold, min_region_voxels, connectivity)
    if not centers:
        logger.warning("No disc found in sample %r.", sample.sample_id)
    logger.info("Localized %d discs in %r.", len(centers), sample.sample_id)
    return centers


# --- Patches ---

def crop_disc_patches(sample, centers, box_extent=BOX_EXTENT, patch_dims=PATCH_DIMS):
    instances = []
    for index, center in enumerate(centers):
        box = BoxRegion(center, box_extent)
        modalities = {name: pad_to(crop_box(v, box), patch_dims) for name, v in sample.modalities.items()}
        label = pad_to(crop_box(sample.label, box), patch_dims) if sample.label is not None else None
        patch = MultiModalSample(modalities, label, f"{sample.sample_id}-disc{index}", sample.notes)
        instances.append(DiscInstance(tuple(int(c) for c in center), box, patch, index=index))
    return instances


def segment_patches(instances, segmenter, threshold=0.5, stacked=False):
    """Fill `prob` and `mask` for every instance; `stacked` runs all patches as one batch."""
    if not instances:
        return []
    _check_channels(segmenter, len(instances[0].patch.names))
    inputs = [instance.patch.stack() for instance in instances]
    if stacked:
        probs = list(segmenter.predict(np.stack(inputs)))
    else:
        probs = [segmenter.predict(x[np.newaxis])[0] for x in inputs]

    filled = []
    for instance, prob in zip(instances, probs):
        spacing = instance.patch.spacing
        prob_volume = Volume(np.clip(prob, 0, 1), spacing, VolumeKind.PROBABILITY)
        mask = Volume((prob >= threshold).astype(np.uint8), spacing, VolumeKind.LABEL)
        filled.append(replace(instance, prob=prob_volume, mask=mask))
    return filled


def threshold_and_assemble(instances, dims, spacing=(1.0, 1.0, 1.0), threshold=0.5):
    """Place each patch mask back at its box (undoing the pad) and OR the overlaps."""
    out = np.zeros(tuple(dims), dtype=np.uint8)
    for instance in instances:
        if instance.mask is not None:
            mask = instance.mask
        elif instance.prob is not None:
            mask = instance.prob.with_data((instance.prob.data >= threshold).astype(np.uint8), VolumeKind.LABEL)
        else:
            raise ContractError(f"Instance {instance.index} has neither prob nor mask.", field="prob")
        region = crop_to(mask, instance.box.extent).data[0]
        overlap = box_overlap(out.shape, instance.box)
        if overlap is None:
            continue
        source, destination = overlap
        out[source] |= region[destination]
    return Volume(out, spacing, VolumeKind.LABEL)


def run_end_to_end(sample, localizer, segmenter, config=None):
    """-> (predicted label Volume, DiscInstance list with center/prob/mask)."""
    config = config or PipelineConfig()
    prepared = prepare_sample(sample, config.modalities, config.normalize)
    centers = localize(
        prepared,
        localizer,
        config.min_region_voxels,
        config.threshold,
        config.localizer_downsample,
    )
    instances = crop_disc_patches(prepared, centers, config.box_extent, config.patch_dims)
    instances = segment_patches(instances, segmenter, config.threshold, config.stacked)
    prediction = threshold_and_assemble(instances, sample.spatial_dims, sample.spacing, config.threshold)
    return prediction, instances


# --- 2D path ---

def predict_volume_2d(sample, network, axis, size=256, stacked=False):
    """Slice every modality along `axis`, pad slices to size x size, predict and restack."""
    if axis not in AXES:
        raise ContractError(f"Unknown axis {axis!r}.", field="axis")
    _check_channels(network, len(sample.names))
    per_modality = [slice_along_axis(v, axis) for v in sample.modalities.values()]
    plane_dims = per_modality[0][0].spatial_dims
    target = (1, size, size)
    inputs = [
        np.concatenate([pad_to(planes[index], target).data[:, 0] for planes in per_modality], axis=0)
        for index in range(len(per_modality[0]))
    ]
    if stacked:
        outputs = list(network.predict(np.stack(inputs)))
    else:
        outputs = [network.predict(x[np.newaxis])[0] for x in inputs]

    spacing = per_modality[0][0].spacing
    planes = [
        crop_to(Volume(np.clip(out, 0, 1)[:, np.newaxis], spacing, VolumeKind.PROBABILITY), plane_dims)
        for out in outputs
    ]
    return stack_slices(planes, axis)


def fuse_axis_predictions(probs, threshold=0.5):
    """Voxelwise mean of per-axis probability volumes, thresholded."""
    if not probs:
        raise ContractError("Nothing to fuse.", field="probs")
    dims = {p.dims for p in probs}
    if len(dims) != 1:
        raise DimensionError(f"Per-axis predictions disagree on dims: {sorted(dims)}.", field="dims")
    mean = np.mean([p.data.astype(np.float64) for p in probs], axis=0)
    return Volume((mean >= threshold).astype(np.uint8), probs[0].spacing, VolumeKind.LABEL)


def build_slice_dataset(samples, modalities, axis, size=256, normalize=True):
    """2D training pairs: every slice along `axis` zero-padded to size x size."""
    pairs = []
    for sample in samples:
        prepared = prepare_sample(sample, modalities, normalize)
        channels = [slice_along_axis(v, axis) for v in prepared.modalities.values()]
        labels = slice_along_axis(sample.label, axis)
        target = (1, size, size)
        for index, label in enumerate(labels):
            x = np.concatenate([pad_to(planes[index], target).data[:, 0] for planes in channels], axis=0)
            y = pad_to(label, target).data[:, 0].astype(np.float32)
            pairs.append((x, y))
    return pairs


# --- Training sets ---

def build_patch_dataset(samples, modalities, box_extent=BOX_EXTENT, patch_dims=PATCH_DIMS, normalize=True, min_region_voxels=0):
    """
    Segmentation-stage pairs around ground-truth disc centers. Each label
    keeps only the component at the patch center, so a patch teaches one disc.
    Components under `min_region_voxels` (augmentation debris) are skipped.
    """
    pairs = []
    for sample in samples:
        if sample.label is None:
            raise ContractError(f"Sample {sample.sample_id!r} has no label.", field="label")
        prepared = prepare_sample(sample, modalities, normalize)
        labeling = connected_components(sample.label)
        components = [k for k in range(1, labeling.count + 1) if labeling.sizes[k - 1] >= min_region_voxels]
        centers = [round_center(labeling.centroids[k - 1]) for k in components]
        instances = crop_disc_patches(prepared, centers, box_extent, patch_dims)
        for component, instance in zip(components, instances):
            single = sample.label.with_data(labeling.mask_of(component)[np.newaxis])
            y = pad_to(crop_box(single, instance.box), patch_dims).data.astype(np.float32)
            pairs.append((instance.patch.stack(), y))
    logger.info("Built %d disc patches from %d samples.", len(pairs), len(samples))
    return pairs


def build_volume_dataset(samples, modalities, downsample=1, multiple=4, normalize=True):
    """Localizer pairs: whole volumes padded to `multiple * downsample` and block-reduced."""
    pairs = []
    for sample in samples:
        prepared = prepare_sample(sample, modalities, normalize)
        padded = _padded_dims(sample.spatial_dims, multiple * downsample)
        x = pad_to(Volume(prepared.stack(), sample.spacing), padded).data
        y = pad_to(sample.label, padded).data
        pairs.append((_downsample(x, downsample), _downsample(y, downsample, reduce="max").astype(np.float32)))
    return pairs

