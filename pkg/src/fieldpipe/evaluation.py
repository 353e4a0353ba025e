"""Pixel-level accuracy assessment and polygon shape statistics.

Confusion counts accumulate over the region mask only; nodata predictions
inside the region count as negative. Per-tile reports sum-pool into
country-wide reports. Shape statistics are computed in a true projected CRS
(shoelace area, ring-length perimeter) and include Polsby-Popper
compactness, the shape index, and the perimeter-area fractal dimension
D = 2 ln(P/4) / ln(A), which sits at 1.0 for squares of side > 1 m and near
1.0 for any boundary tracing the pixel grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely

from .clustering import CoverageHull
from .grids import GridSpec, Raster, rasterize_polygons, resample_nearest
from .projections import projector
from .vectorizing import FieldPolygon

POSITIVE_CLASSES = (1, 2)  # field interior and field boundary


class EvaluationError(ValueError):
    """Raised for empty or inconsistent evaluation inputs."""


@dataclass
class EvaluationReport:
    region_id: str
    tp: int
    fp: int
    fn: int
    tn: int
    variant: str = "unfiltered"

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 0.0

    def row(self) -> str:
        return (
            f"{self.region_id:<16} {self.variant:<12} "
            f"{self.precision:6.3f} {self.recall:6.3f} {self.f1:6.3f} {self.iou:6.3f}"
        )

    def to_dict(self) -> dict:
        return {
            "region_id": self.region_id,
            "variant": self.variant,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
        }


REPORT_HEADER = f"{'region':<16} {'variant':<12} {'prec':>6} {'recall':>6} {'f1':>6} {'iou':>6}"


def pixel_metrics(
    pred: Raster,
    gt_mask: Raster,
    region_mask: Raster,
    positive_classes=POSITIVE_CLASSES,
    region_id: str = "",
    variant: str = "unfiltered",
) -> EvaluationReport:
    """Confusion counts and P/R/F1/IoU over region-mask pixels."""
    for other in (gt_mask, region_mask):
        if not other.grid.same_geometry(pred.grid):
            raise EvaluationError("pixel_metrics inputs must share a grid")
    region = region_mask.values == 1
    if not region.any():
        raise EvaluationError("empty evaluation region")
    pred_pos = np.isin(pred.values, positive_classes) & region
    gt_pos = (gt_mask.values == 1) & region
    tp = int((pred_pos & gt_pos).sum())
    fp = int((pred_pos & ~gt_pos).sum())
    fn = int((~pred_pos & gt_pos).sum())
    tn = int(region.sum()) - tp - fp - fn
    return EvaluationReport(region_id=region_id, tp=tp, fp=fp, fn=fn, tn=tn, variant=variant)


def merge_reports(reports: list[EvaluationReport], region_id: str = "") -> EvaluationReport:
    """Sum-pool per-tile confusion matrices into one report."""
    if not reports:
        raise EvaluationError("nothing to merge")
    variant = reports[0].variant
    return EvaluationReport(
        region_id=region_id or reports[0].region_id,
        tp=sum(r.tp for r in reports),
        fp=sum(r.fp for r in reports),
        fn=sum(r.fn for r in reports),
        tn=sum(r.tn for r in reports),
        variant=variant,
    )


def confidence_mask_10m(conf: Raster, grid_10m: GridSpec, threshold: float) -> Raster:
    """500 m confidence upsampled by nearest-neighbor repetition, then
    thresholded (inclusive). Nodata cells come out False."""
    up = resample_nearest(conf, grid_10m)
    mask = np.nan_to_num(up.values, nan=-np.inf) >= threshold
    return Raster(grid_10m, mask.astype(np.uint8), nodata=None)


def apply_confidence_filter(pred: Raster, conf: Raster, threshold: float) -> Raster:
    """Zero out predictions below the confidence threshold (filtered variant)."""
    mask = confidence_mask_10m(conf, pred.grid, threshold)
    filtered = np.where(mask.values == 1, pred.values, 0)
    return Raster(pred.grid, filtered.astype(pred.values.dtype), pred.nodata)


def hull_recall(
    pred: Raster,
    gt_mask: Raster,
    hulls: list[CoverageHull],
    positive_classes=POSITIVE_CLASSES,
) -> float:
    """Pixel recall over ground-truth pixels inside the coverage hulls."""
    if not gt_mask.grid.same_geometry(pred.grid):
        raise EvaluationError("hull_recall inputs must share a grid")
    polys = [p for hull in hulls for p in hull.polygons]
    hull_mask = rasterize_polygons(polys, pred.grid, mode="center").values == 1
    gt_pos = (gt_mask.values == 1) & hull_mask
    denom = int(gt_pos.sum())
    if denom == 0:
        raise EvaluationError("no ground-truth pixels inside the coverage hulls")
    pred_pos = np.isin(pred.values, positive_classes)
    return int((pred_pos & gt_pos).sum()) / denom


@dataclass
class ShapeStats:
    area_m2: float
    perimeter_m: float

    @property
    def area_ha(self) -> float:
        return self.area_m2 / 10_000.0

    @property
    def polsby_popper(self) -> float:
        return 4.0 * math.pi * self.area_m2 / (self.perimeter_m**2)

    @property
    def shape_index(self) -> float:
        return self.perimeter_m / (2.0 * math.sqrt(math.pi * self.area_m2))

    @property
    def fractal_dimension(self) -> float:
        log_area = math.log(self.area_m2)
        if log_area == 0:
            return math.nan
        return 2.0 * math.log(self.perimeter_m / 4.0) / log_area


def _project_ring(ring: np.ndarray, transform) -> np.ndarray:
    e, n = transform(ring[:, 0], ring[:, 1])
    return np.column_stack([e, n])


def shape_metrics(poly: FieldPolygon | shapely.Polygon, metric_crs: str) -> ShapeStats:
    """Metric-unit shape statistics after projecting to ``metric_crs``.

    Area is net of holes; perimeter is the total boundary length (exterior
    plus holes). A degenerate (zero-area) ring raises.
    """
    transform = projector(metric_crs)
    if isinstance(poly, FieldPolygon):
        exterior = poly.exterior
        holes = poly.holes
    else:
        exterior = np.asarray(poly.exterior.coords, dtype=np.float64)
        holes = [np.asarray(r.coords, dtype=np.float64) for r in poly.interiors]
    projected = shapely.Polygon(
        _project_ring(exterior, transform), [_project_ring(h, transform) for h in holes]
    )
    area = projected.area
    if area <= 0:
        raise EvaluationError("degenerate polygon: zero projected area")
    return ShapeStats(area_m2=float(area), perimeter_m=float(projected.length))


def distribution_summary(
    polys: list[FieldPolygon],
    metric_crs: str,
    sample_size: int = 500_000,
    seed: int = 0,
) -> dict:
    """Collection totals plus medians of the shape statistics on a seeded
    uniform sample without replacement."""
    if not polys:
        return {"count": 0, "total_area_m2": 0.0}
    rng = np.random.default_rng(seed)
    if len(polys) > sample_size:
        pick = rng.choice(len(polys), size=sample_size, replace=False)
        sample = [polys[i] for i in np.sort(pick)]
    else:
        sample = polys
    stats = [shape_metrics(p, metric_crs) for p in sample]
    return {
        "count": len(polys),
        "total_area_m2": float(sum(p.area_m2 for p in polys)),
        "sampled": len(sample),
        "median_area_ha": float(np.median([s.area_ha for s in stats])),
        "median_perimeter_m": float(np.median([s.perimeter_m for s in stats])),
        "median_polsby_popper": float(np.median([s.polsby_popper for s in stats])),
        "median_shape_index": float(np.median([s.shape_index for s in stats])),
        "median_fractal_dimension": float(np.median([s.fractal_dimension for s in stats])),
    }


def seasonal_filter(parcels: list[tuple], allowed_codes) -> list:
    """Keep (geometry, crop_code) reference parcels whose code is allowed."""
    allowed = set(allowed_codes)
    return [p for p in parcels if p[1] in allowed]
