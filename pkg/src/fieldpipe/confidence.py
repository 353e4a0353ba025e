"""Confidence-layer training, evaluation, and application.

Training cells come from coverage-hull-restricted, model-active 500 m cells:
positives overlap a ground-truth polygon, negatives additionally pass the
crop-consensus filter that weeds out unreliable "no ground truth here"
labels. Models are logistic regression or a random forest on one of the
documented indicator feature sets; evaluation is stratified k-fold plus
leave-one-country-out, scored with rank-based AUC.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .clustering import CoverageHull
from .forest import MAX_DEPTH, MIN_LEAF, N_TREES, RandomForestModel, train_rf
from .grids import GridSpec, Raster, make_global_grid
from .indicators import CellIndicatorRecord, FEATURE_SETS, TileIndicators, derive_features
from .linear import LogisticModel, train_logreg

logger = logging.getLogger(__name__)

ARTIFACT_FORMAT_VERSION = 1
SUBSAMPLE_CAP = 5000
LOCO_MIN_PER_CLASS = 5
SCORE_THRESHOLD = 0.5

CROP_FILTERS = {"none": None, "le3": 3.0, "le2": 2.0, "le1": 1.0}
MODEL_KINDS = ("logistic_regression", "random_forest")


class ConfidenceError(ValueError):
    """Raised for unusable confidence-model inputs."""


@dataclass
class TrainingCell:
    record: CellIndicatorRecord
    country: str
    label: int  # 1 = field, 0 = non_field


@dataclass
class ConfidenceModel:
    """A trained confidence classifier plus its training metadata."""

    kind: str  # "logistic_regression" | "random_forest"
    feature_set: str
    model: LogisticModel | RandomForestModel
    seed: int = 0
    crop_filter: str = "none"

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.model.predict_proba(np.asarray(X, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "format_version": ARTIFACT_FORMAT_VERSION,
            "kind": self.kind,
            "feature_set": self.feature_set,
            "seed": self.seed,
            "crop_filter": self.crop_filter,
            "parameters": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConfidenceModel":
        version = data.get("format_version")
        if version != ARTIFACT_FORMAT_VERSION:
            raise ConfidenceError(f"unsupported model artifact version {version!r}")
        kind = data["kind"]
        if kind == "logistic_regression":
            model = LogisticModel.from_dict(data["parameters"])
        elif kind == "random_forest":
            model = RandomForestModel.from_dict(data["parameters"])
        else:
            raise ConfidenceError(f"unknown model kind {kind!r}")
        return cls(
            kind=kind,
            feature_set=data["feature_set"],
            model=model,
            seed=int(data["seed"]),
            crop_filter=data["crop_filter"],
        )


def save_model(model: ConfidenceModel, path) -> Path:
    """Write the canonical (byte-stable) JSON artifact."""
    path = Path(path)
    path.write_text(json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")))
    return path


def load_model(path) -> ConfidenceModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfidenceError(f"malformed model artifact {path}: {exc}") from exc
    return ConfidenceModel.from_dict(data)


def model_artifact_hash(model: ConfidenceModel) -> str:
    payload = json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def build_training_set(
    records: list[CellIndicatorRecord],
    gt_cells: Raster,
    hulls: list[CoverageHull],
    crop_filter: str = "le2",
    grid_coarse: GridSpec | None = None,
) -> list[TrainingCell]:
    """Assemble labeled cells from hull-restricted, model-active records.

    ``gt_cells`` is a binary raster on a subgrid of the coarse grid marking
    cells that overlap any ground-truth polygon. A record enters the set
    when its cell center lies in some coverage hull and the model is active
    there (field pixel count > 0); it labels field if ground truth touches
    the cell, otherwise non_field, kept only when the mean crop-consensus
    count passes the filter.
    """
    if crop_filter not in CROP_FILTERS:
        raise ConfidenceError(f"unknown crop filter {crop_filter!r}; choose {sorted(CROP_FILTERS)}")
    threshold = CROP_FILTERS[crop_filter]
    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    gt_r0 = int(round((coarse.max_lat - gt_cells.grid.max_lat) / coarse.pixel_height))
    gt_c0 = int(round((gt_cells.grid.min_lon - coarse.min_lon) / coarse.pixel_width))

    cells = []
    for rec in records:
        if rec.count_field <= 0:
            continue
        row, col = rec.cell
        lon, lat = coarse.pixel_center(row, col)
        country = None
        for hull in hulls:
            if bool(hull.contains(float(lon), float(lat))[0]):
                country = hull.country
                break
        if country is None:
            continue
        lr, lc = row - gt_r0, col - gt_c0
        in_gt = (
            0 <= lr < gt_cells.grid.height
            and 0 <= lc < gt_cells.grid.width
            and gt_cells.values[lr, lc] == 1
        )
        if in_gt:
            cells.append(TrainingCell(record=rec, country=country, label=1))
            continue
        if threshold is not None:
            if rec.consensus_mean is None:
                raise ConfidenceError(
                    f"crop filter {crop_filter!r} needs consensus_mean on every record"
                )
            if not (rec.consensus_mean <= threshold):
                continue
        cells.append(TrainingCell(record=rec, country=country, label=0))
    return cells


def balanced_subsample(
    cells: list[TrainingCell], cap: int = SUBSAMPLE_CAP, seed: int = 0
) -> list[TrainingCell]:
    """Uniformly keep up to ``cap`` cells per (country, label), seeded."""
    groups: dict[tuple[str, int], list[int]] = {}
    for i, cell in enumerate(cells):
        groups.setdefault((cell.country, cell.label), []).append(i)
    rng = np.random.default_rng(seed)
    kept: list[int] = []
    for key in sorted(groups):
        indices = np.asarray(groups[key])
        if indices.size <= cap:
            kept.extend(indices.tolist())
        else:
            pick = rng.choice(indices.size, size=cap, replace=False)
            kept.extend(indices[pick].tolist())
    return [cells[i] for i in sorted(kept)]


def design_matrix(cells: list[TrainingCell], feature_set: str):
    X = np.stack([derive_features(c.record, feature_set) for c in cells])
    y = np.array([c.label for c in cells], dtype=np.float64)
    return X, y


def train_confidence_model(
    cells: list[TrainingCell],
    kind: str = "random_forest",
    feature_set: str = "model_only",
    seed: int = 0,
    crop_filter: str = "none",
) -> ConfidenceModel:
    X, y = design_matrix(cells, feature_set)
    return _fit(kind, X, y, seed, feature_set, crop_filter)


def _fit(kind, X, y, seed, feature_set, crop_filter="none") -> ConfidenceModel:
    if kind == "logistic_regression":
        inner = train_logreg(X, y)
    elif kind == "random_forest":
        inner = train_rf(X, y, n_trees=N_TREES, max_depth=MAX_DEPTH, min_leaf=MIN_LEAF, seed=seed)
    else:
        raise ConfidenceError(f"unknown model kind {kind!r}")
    return ConfidenceModel(
        kind=kind, feature_set=feature_set, model=inner, seed=seed, crop_filter=crop_filter
    )


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfidenceError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _binary_metrics(scores, labels, threshold=SCORE_THRESHOLD):
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def stratified_folds(labels: np.ndarray, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per sample: per-class shuffled round-robin assignment.

    Every sample lands in exactly one fold and per-fold class counts stay
    within one of proportional.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.empty(labels.shape[0], dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.nonzero(labels == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


@dataclass
class CVReport:
    k: int
    metrics: dict[str, tuple[float, float]]  # name -> (mean, std)
    per_fold: dict[str, list[float]] = field(default_factory=dict)

    def summary(self) -> str:
        parts = [
            f"{name} {mean:.3f}+/-{std:.3f}" for name, (mean, std) in sorted(self.metrics.items())
        ]
        return f"{self.k}-fold CV: " + ", ".join(parts)


def cross_validate(
    cells: list[TrainingCell],
    kind: str = "random_forest",
    feature_set: str = "model_only",
    k: int = 5,
    seed: int = 0,
) -> CVReport:
    """Stratified k-fold CV reporting AUC, F1, precision, recall."""
    X, y = design_matrix(cells, feature_set)
    return cross_validate_matrix(X, y, kind=kind, feature_set=feature_set, k=k, seed=seed)


def cross_validate_matrix(X, y, kind="random_forest", feature_set="model_only", k=5, seed=0):
    y = np.asarray(y, dtype=np.float64)
    for cls in (0, 1):
        if (y == cls).sum() < k:
            raise ConfidenceError(f"need at least {k} samples of class {cls} for {k}-fold CV")
    folds = stratified_folds(y, k=k, seed=seed)
    per_fold: dict[str, list[float]] = {"auc": [], "f1": [], "precision": [], "recall": []}
    for fold in range(k):
        test = folds == fold
        model = _fit(kind, X[~test], y[~test], seed, feature_set)
        scores = model.predict_proba(X[test])
        per_fold["auc"].append(auc(scores, y[test]))
        precision, recall, f1 = _binary_metrics(scores, y[test])
        per_fold["precision"].append(precision)
        per_fold["recall"].append(recall)
        per_fold["f1"].append(f1)
    metrics = {
        name: (float(np.mean(vals)), float(np.std(vals))) for name, vals in per_fold.items()
    }
    return CVReport(k=k, metrics=metrics, per_fold=per_fold)


@dataclass
class LocoReport:
    per_country: dict[str, float]
    excluded: dict[str, str]
    mean_auc: float

    def summary(self) -> str:
        lines = [f"LOCO mean AUC {self.mean_auc:.3f} over {len(self.per_country)} countries"]
        for country in sorted(self.per_country):
            lines.append(f"  {country}: AUC {self.per_country[country]:.3f}")
        for country in sorted(self.excluded):
            lines.append(f"  {country}: excluded ({self.excluded[country]})")
        return "\n".join(lines)


def loco(
    cells: list[TrainingCell],
    kind: str = "random_forest",
    feature_set: str = "model_only",
    seed: int = 0,
    min_per_class: int = LOCO_MIN_PER_CLASS,
) -> LocoReport:
    """Leave-one-country-out AUC with an unweighted mean.

    Countries lacking ``min_per_class`` samples of either class are excluded
    and reported, mirroring the sparse-reference exclusion rule.
    """
    countries = sorted({c.country for c in cells})
    if len(countries) < 2:
        raise ConfidenceError("LOCO needs at least two countries")
    per_country = {}
    excluded = {}
    for country in countries:
        held = [c for c in cells if c.country == country]
        rest = [c for c in cells if c.country != country]
        n_pos = sum(c.label == 1 for c in held)
        n_neg = sum(c.label == 0 for c in held)
        if n_pos < min_per_class or n_neg < min_per_class:
            excluded[country] = f"{n_pos} field / {n_neg} non-field samples, need {min_per_class}"
            continue
        X_tr, y_tr = design_matrix(rest, feature_set)
        X_te, y_te = design_matrix(held, feature_set)
        model = _fit(kind, X_tr, y_tr, seed, feature_set)
        per_country[country] = auc(model.predict_proba(X_te), y_te)
    mean_auc = float(np.mean(list(per_country.values()))) if per_country else math.nan
    return LocoReport(per_country=per_country, excluded=excluded, mean_auc=mean_auc)


def apply_confidence(model: ConfidenceModel, indicators: TileIndicators) -> Raster:
    """Score every model-active cell (field pixel count > 0); inactive cells
    are NaN-nodata."""
    if model.feature_set not in FEATURE_SETS:
        raise ConfidenceError(f"model has unknown feature set {model.feature_set!r}")
    needs_consensus = any(
        name in FEATURE_SETS[model.feature_set]
        for name in ("consensus_mean", "precision_k2", "recall_k2", "precision_k3", "recall_k3")
    )
    if needs_consensus and "consensus_mean" not in indicators.layers:
        raise ConfidenceError(
            f"feature set {model.feature_set!r} needs consensus indicators, "
            "but the tile has none"
        )
    records = indicators.records()
    active = [rec for rec in records if rec.count_field > 0]
    out = np.full(indicators.grid.shape, np.nan, dtype=np.float32)
    if active:
        X = np.stack([derive_features(rec, model.feature_set) for rec in active])
        scores = model.predict_proba(X)
        (r0, _), (c0, _) = indicators.window
        for rec, score in zip(active, scores):
            out[rec.cell[0] - r0, rec.cell[1] - c0] = score
    return Raster(indicators.grid, out, np.nan)


def confidence_at_centroids(polys, conf: Raster) -> np.ndarray:
    """Confidence value at each polygon's centroid cell (NaN outside/nodata)."""
    values = np.full(len(polys), np.nan, dtype=np.float64)
    for i, poly in enumerate(polys):
        centroid = poly.to_shapely().centroid
        row, col = conf.grid.index_of(centroid.x, centroid.y)
        if not bool(conf.grid.contains_index(row, col)):
            continue
        values[i] = conf.values[int(row), int(col)]
    return values


def threshold_filter_polygons(polys, conf: Raster, threshold: float):
    """Keep polygons whose centroid-cell confidence is >= threshold
    (inclusive); nodata confidence drops the polygon."""
    values = confidence_at_centroids(polys, conf)
    kept = []
    for poly, value in zip(polys, values):
        if not math.isnan(value) and value >= threshold:
            poly.confidence = float(value)
            kept.append(poly)
    return kept


def threshold_filter_density(density: Raster, conf: Raster, threshold: float) -> Raster:
    """Zero density cells whose confidence falls below the threshold."""
    if not density.grid.same_geometry(conf.grid):
        raise ConfidenceError("density and confidence rasters must share a grid")
    keep = np.nan_to_num(conf.values, nan=-np.inf) >= threshold
    out = np.where(keep, density.values, 0)
    return Raster(density.grid, out.astype(density.values.dtype), density.nodata)


def retention_curve(polys, conf: Raster, thresholds=None):
    """(threshold, fields retained, area retained) rows over a sweep.

    Fractions are relative to the full collection; both retained series are
    monotone non-increasing in the threshold.
    """
    if thresholds is None:
        thresholds = np.round(np.arange(0.0, 1.0001, 0.05), 10)
    values = confidence_at_centroids(polys, conf)
    areas = np.array([p.area_m2 for p in polys], dtype=np.float64)
    total_fields = len(polys)
    total_area = float(areas.sum())
    rows = []
    for t in thresholds:
        keep = ~np.isnan(values) & (values >= t)
        n = int(keep.sum())
        area = float(areas[keep].sum())
        rows.append(
            {
                "threshold": float(t),
                "fields_retained": n,
                "area_retained_m2": area,
                "fields_fraction": n / total_fields if total_fields else 0.0,
                "area_fraction": area / total_area if total_area else 0.0,
            }
        )
    return rows
