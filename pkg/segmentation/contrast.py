# segmentation/contrast.py
"""Foreground/background intensity statistics and absolute Weber contrast."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .exceptions import DimensionError, DomainError, StatisticsError
from .volume import MODALITIES

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["modality", "fg_mean", "fg_sd", "bg_mean", "bg_sd", "weber"]


@dataclass(frozen=True)
class ContrastRow:
    modality: str
    fg_mean: float
    fg_sd: float
    bg_mean: float
    bg_sd: float
    weber: float


@dataclass(frozen=True)
class ContrastReport:
    rows: tuple

    def to_frame(self):
        return pd.DataFrame([row.__dict__ for row in self.rows], columns=CSV_COLUMNS)

    def to_csv(self):
        return self.to_frame().to_csv(index=False, float_format="%.6g", lineterminator="\n")

    def by_modality(self):
        return {row.modality: row for row in self.rows}


def region_stats(v, mask):
    """(fg_mean, fg_sd, bg_mean, bg_sd) with population standard deviations."""
    if v.spatial_dims != mask.spatial_dims:
        raise DimensionError(f"Volume {v.spatial_dims} and mask {mask.spatial_dims} differ.", field="dims")
    values = v.data[0].astype(np.float64)
    inside = mask.data[0].astype(bool)
    if not inside.any():
        raise StatisticsError("Foreground region is empty.", field="foreground")
    if inside.all():
        raise StatisticsError("Background region is empty.", field="background")
    fg, bg = values[inside], values[~inside]
    return float(fg.mean()), float(fg.std()), float(bg.mean()), float(bg.std())


def weber_contrast(I, Ib):
    if not Ib > 0:
        raise DomainError(f"Background mean must be positive, got {Ib}.", field="Ib")
    return abs(I - Ib) / Ib


def contrast_report(s):
    if s.label is None:
        raise StatisticsError(f"Sample {s.sample_id!r} has no label.", field="label")
    rows = []
    for name in MODALITIES:
        if name not in s.modalities:
            continue
        fg_mean, fg_sd, bg_mean, bg_sd = region_stats(s.modalities[name], s.label)
        rows.append(ContrastRow(name, fg_mean, fg_sd, bg_mean, bg_sd, weber_contrast(fg_mean, bg_mean)))
        logger.debug("Contrast %s/%s: weber=%.4f", s.sample_id, name, rows[-1].weber)
    return ContrastReport(tuple(rows))
