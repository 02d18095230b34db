# segmentation/metrics.py
"""
Dice overlap, boundary-voxel Hausdorff distance in millimeters and
per-disc evaluation with mean and population SD aggregates.
"""

import io
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import DimensionError, EvaluationError
from .pipeline import connected_components, round_center
from .volume import Volume

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["sample_id", "disc_index", "dice_pct", "hd_mm"]
SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)
MATCH_MARGIN = 2
# voxels; half the phantom disc pitch
MATCH_RADIUS = 8.0
LOCALIZATION_RADIUS = 3.0


def _as_array(mask):
    return (mask.data[0] if isinstance(mask, Volume) else np.asarray(mask)).astype(bool)


def _spacing(mask, spacing):
    if spacing is not None:
        return tuple(float(s) for s in spacing)
    if isinstance(mask, Volume):
        return mask.spacing
    return (1.0, 1.0, 1.0)


def dice(X, Y):
    """2|X & Y| / (|X| + |Y|) in percent; two empty masks agree perfectly (100)."""
    x, y = _as_array(X), _as_array(Y)
    if x.shape != y.shape:
        raise DimensionError(f"Masks differ in dims: {x.shape} vs {y.shape}.", field="dims")
    total = int(x.sum()) + int(y.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(x, y).sum()) / total


def surface_points(mask, spacing=None):
    """Foreground voxels with a background (or out-of-grid) 6-neighbour, as (N, 3) mm coordinates."""
    array = _as_array(mask)
    interior = ndimage.binary_erosion(array, structure=SIX_NEIGHBOURS, border_value=0)
    boundary = np.argwhere(array & ~interior)
    return boundary.astype(np.float64) * np.asarray(_spacing(mask, spacing))


def directed_hausdorff(source, target):
    distances, _ = cKDTree(target).query(source, k=1)
    return float(distances.max())


def hausdorff(A, B, spacing=None):
    """Symmetric Hausdorff distance in mm between the surfaces of two masks."""
    spacing = _spacing(A, spacing)
    a, b = surface_points(A, spacing), surface_points(B, spacing)
    if not len(a) or not len(b):
        raise EvaluationError("Hausdorff distance is undefined for an empty mask.", field="mask")
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


# --- Reports ---

@dataclass(frozen=True)
class DiscRow:
    sample_id: str
    disc_index: int
    dice_pct: float
    hd_mm: float = None
    center: tuple = ()

    @property
    def matched(self):
        return self.hd_mm is not None


def _mean_sd(values):
    if not values:
        return None, None
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())


@dataclass(frozen=True)
class EvalReport:
    rows: tuple
    global_dice: float = None

    @property
    def dice_values(self):
        return [row.dice_pct for row in self.rows]

    @property
    def hd_values(self):
        return [row.hd_mm for row in self.rows if row.matched]

    @property
    def mean_dice(self):
        return _mean_sd(self.dice_values)[0]

    @property
    def sd_dice(self):
        return _mean_sd(self.dice_values)[1]

    @property
    def mean_hd(self):
        return _mean_sd(self.hd_values)[0]

    @property
    def sd_hd(self):
        return _mean_sd(self.hd_values)[1]

    @property
    def unmatched(self):
        return sum(1 for row in self.rows if not row.matched)

    def aggregates(self):
        return {
            "discs": len(self.rows),
            "unmatched": self.unmatched,
            "mean_dice": self.mean_dice,
            "sd_dice": self.sd_dice,
            "mean_hd": self.mean_hd,
            "sd_hd": self.sd_hd,
            "global_dice": self.global_dice,
        }

    def to_frame(self):
        return pd.DataFrame(
            [[row.sample_id, row.disc_index, row.dice_pct, row.hd_mm] for row in self.rows],
            columns=CSV_COLUMNS,
        )

    def to_csv(self):
        return self.to_frame().to_csv(index=False, float_format="%.6f", lineterminator="\n")

    def to_json(self):
        return json.dumps(self.aggregates(), sort_keys=True)

    def disc_records(self):
        """Per-disc JSON-ready records."""
        return [
            {
                "sample_id": row.sample_id,
                "disc_index": row.disc_index,
                "center": list(row.center),
                "dice": row.dice_pct,
                "hausdorff_mm": row.hd_mm,
            }
            for row in self.rows
        ]

    @classmethod
    def from_csv(cls, text):
        frame = pd.read_csv(io.StringIO(text), dtype={"sample_id": str})
        rows = []
        for record in frame.to_dict("records"):
            hd = record["hd_mm"]
            rows.append(
                DiscRow(
                    sample_id=record["sample_id"] if isinstance(record["sample_id"], str) else "",
                    disc_index=int(record["disc_index"]),
                    dice_pct=float(record["dice_pct"]),
                    hd_mm=None if hd is None or math.isnan(hd) else float(hd),
                )
            )
        return cls(tuple(rows))

    @classmethod
    def merge(cls, reports):
        """Pool the discs of several reports; global Dice is averaged over samples."""
        rows = tuple(row for report in reports for row in report.rows)
        globals_ = [report.global_dice for report in reports if report.global_dice is not None]
        return cls(rows, float(np.mean(globals_)) if globals_ else None)


def _craniocaudal(centroid):
    z, y, x = centroid
    return y, z, x


def _dilated_box(*masks, margin=MATCH_MARGIN):
    union = np.logical_or.reduce(masks)
    coords = np.argwhere(union)
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + margin + 1, union.shape)
    return tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))


def evaluate_sample(pred, gt, spacing=None, sample_id="", match_radius=MATCH_RADIUS):
    """
    Match every ground-truth disc to the prediction component with the
    nearest centroid. A disc with no prediction centroid within
    `match_radius` voxels is unmatched: Dice 0 and no Hausdorff distance.
    Metrics are computed on the two components inside their union
    bounding box grown by two voxels.
    """
    spacing = _spacing(gt, spacing)
    pred_array, gt_array = _as_array(pred), _as_array(gt)
    if pred_array.shape != gt_array.shape:
        raise DimensionError(f"Prediction {pred_array.shape} and ground truth {gt_array.shape} differ.", field="dims")
    if not gt_array.any():
        raise EvaluationError(f"Ground truth of {sample_id!r} is empty.", field="gt")

    truth = connected_components(gt_array)
    predicted = connected_components(pred_array)
    pred_centroids = np.asarray(predicted.centroids, dtype=np.float64).reshape(-1, 3)

    # craniocaudal (y, z, x) order, as the pipeline reports centers
    discs = sorted(range(1, truth.count + 1), key=lambda k: _craniocaudal(truth.centroids[k - 1]))
    rows = []
    for disc_index, component in enumerate(discs):
        gt_mask = truth.ids == component
        centroid = truth.centroids[component - 1]
        center = round_center(centroid)
        distances = np.linalg.norm(pred_centroids - np.asarray(centroid), axis=1)
        if not len(distances) or distances.min() > match_radius:
            logger.info("Disc %d of %r has no matching prediction.", disc_index, sample_id)
            rows.append(DiscRow(sample_id, disc_index, 0.0, None, center))
            continue
        match = int(np.argmin(distances)) + 1
        pred_mask = predicted.ids == match
        box = _dilated_box(gt_mask, pred_mask)
        rows.append(
            DiscRow(
                sample_id,
                disc_index,
                dice(pred_mask[box], gt_mask[box]),
                hausdorff(pred_mask[box], gt_mask[box], spacing),
                center,
            )
        )
    report = EvalReport(tuple(rows), dice(pred_array, gt_array))
    logger.info("Evaluated %r: mean dice %.3f over %d discs.", sample_id, report.mean_dice, len(rows))
    return report


# --- Localization ---

@dataclass(frozen=True)
class LocalizationReport:
    distances_mm: tuple
    distances_voxels: tuple
    detected: int
    total: int
    radius_voxels: float

    @property
    def mean_mm(self):
        finite = [d for d in self.distances_mm if math.isfinite(d)]
        return _mean_sd(finite)[0]

    @property
    def sd_mm(self):
        finite = [d for d in self.distances_mm if math.isfinite(d)]
        return _mean_sd(finite)[1]

    @property
    def detection_rate(self):
        return self.detected / self.total if self.total else 0.0

    def as_dict(self):
        data = asdict(self)
        for key in ("distances_mm", "distances_voxels"):
            data[key] = [d if math.isfinite(d) else None for d in data[key]]
        data.update(mean_mm=self.mean_mm, sd_mm=self.sd_mm, detection_rate=self.detection_rate)
        return data


def localization_report(pred_centers, gt_centers, spacing, radius_voxels=LOCALIZATION_RADIUS):
    """
    For every ground-truth center, the nearest predicted center in voxel
    index space. A disc counts as detected when that center lies within
    `radius_voxels`; distances are also reported in mm.
    """
    scale = np.asarray(spacing, dtype=np.float64)
    truth = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 3)
    if not len(truth):
        raise EvaluationError("No ground-truth centers to localize against.", field="gt_centers")
    if len(pred_centers):
        predicted = np.asarray(pred_centers, dtype=np.float64).reshape(-1, 3)
        voxels, nearest = cKDTree(predicted).query(truth, k=1)
        millimeters = np.linalg.norm((predicted[nearest] - truth) * scale, axis=1)
    else:
        voxels = millimeters = np.full(len(truth), math.inf)
    detected = int(np.sum(voxels <= radius_voxels))
    return LocalizationReport(
        tuple(float(d) for d in millimeters),
        tuple(float(d) for d in voxels),
        detected,
        len(truth),
        float(radius_voxels),
    )
