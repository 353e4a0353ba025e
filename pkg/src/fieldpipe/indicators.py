"""Per-cell 500 m quality indicators from 10 m model outputs.

Each 500 m cell aggregates the 10 m pixels whose centers it contains:
mean Shannon entropy over field- and boundary-argmaxed pixels, field and
boundary pixel counts, precision/recall of field pixels against the
cropland-consensus layer at agreement thresholds k in {2, 3}, the mean
consensus count, and three derived ratios. Entropy uses natural log, so a
uniform 3-class pixel scores ln 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grids import (
    GridSpec,
    Raster,
    cell_window,
    coarse_cell_of_pixels,
    coarse_window_covering,
    make_global_grid,
)
from .stitching import CLASS_BOUNDARY, CLASS_FIELD

LN3 = math.log(3.0)

FEATURE_SETS = {
    "model_only": (
        "entropy_field",
        "entropy_boundary",
        "count_field",
        "count_boundary",
        "field_boundary_ratio",
        "field_density",
        "entropy_ratio",
    ),
}
FEATURE_SETS["model_consensus"] = FEATURE_SETS["model_only"] + ("consensus_mean",)
FEATURE_SETS["model_pr"] = FEATURE_SETS["model_only"] + (
    "precision_k2",
    "recall_k2",
    "precision_k3",
    "recall_k3",
)
FEATURE_SETS["all"] = FEATURE_SETS["model_pr"] + ("consensus_mean",)

CONSENSUS_FIELDS = ("consensus_mean", "precision_k2", "recall_k2", "precision_k3", "recall_k3")


@dataclass(frozen=True)
class CroplandLayerSpec:
    """How one external cropland product binarizes to cropland/non-cropland."""

    name: str
    resolution_m: int
    cropland_class_values: tuple[int, ...]
    coverage: str = "global"  # or "africa"
    fractional: bool = False  # cropland where value > 0 instead of class match

    def __post_init__(self):
        if not self.fractional and not self.cropland_class_values:
            raise ValueError(f"layer {self.name}: empty cropland class list")


# The eight consensus constituents with their cropland classes.
CROPLAND_LAYERS = (
    CroplandLayerSpec("asap_crop_mask_v04", 500, (), fractional=True),
    CroplandLayerSpec("esa_globcover_2009", 300, (11, 14, 20, 30)),
    CroplandLayerSpec("esa_cci_landcover_2020", 300, (10, 11, 12, 20, 30, 40)),
    CroplandLayerSpec("copernicus_global_lc_100m_v3", 100, (40,)),
    CroplandLayerSpec("glad_cropland_2019", 30, (1,)),
    CroplandLayerSpec("esri_lulc_10m_2021", 10, (5,)),
    CroplandLayerSpec("digital_earth_africa_2019", 10, (1,), coverage="africa"),
    CroplandLayerSpec("esa_worldcereal_2021", 10, (100,)),
)


@dataclass
class CellIndicatorRecord:
    """Indicator vector of one 500 m cell.

    NaN marks a computed-but-undefined value (for example entropy of a class
    with zero pixels); ``None`` in the consensus-derived fields means no
    consensus raster was supplied at all.
    """

    cell: tuple[int, int]
    entropy_field: float = math.nan
    entropy_boundary: float = math.nan
    count_field: int = 0
    count_boundary: int = 0
    consensus_mean: float | None = None
    precision_k2: float | None = None
    recall_k2: float | None = None
    precision_k3: float | None = None
    recall_k3: float | None = None
    field_boundary_ratio: float = 0.0
    field_density: float = math.nan
    entropy_ratio: float = math.nan
    country: str = ""


class FeatureError(ValueError):
    """Requested features that the record does not carry."""


def binarize_cropland(layer: Raster, spec: CroplandLayerSpec) -> Raster:
    """1 where a pixel's value is a cropland class (or > 0 for fractional
    layers), 0 elsewhere; nodata propagates as 255."""
    values = layer.values
    nodata_mask = layer.nodata_mask()
    if spec.fractional:
        binary = (np.nan_to_num(values, nan=0.0) > 0).astype(np.uint8)
    else:
        binary = np.isin(values, spec.cropland_class_values).astype(np.uint8)
    binary[nodata_mask] = 255
    return Raster(layer.grid, binary, nodata=255)


def consensus_count(
    binaries: list[Raster], grid_coarse: GridSpec | None = None
) -> tuple[Raster, Raster]:
    """Per-pixel agreement count plus its 500 m cell mean.

    All binaries must share the 10 m grid (resample first). Nodata in a
    layer contributes 0 agreement, which is how the Africa-only layer stays
    inert outside its coverage. The mean raster covers the coarse cells that
    contain the tile.
    """
    if not binaries:
        raise ValueError("consensus_count needs at least one binarized layer")
    grid = binaries[0].grid
    total = np.zeros(grid.shape, dtype=np.uint8)
    for layer in binaries:
        if not layer.grid.same_geometry(grid):
            raise ValueError("consensus layers must share a grid; resample first")
        total += (layer.values == 1).astype(np.uint8)
    count = Raster(grid, total, nodata=None)

    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    (r0, r1), (c0, c1) = coarse_window_covering(grid, coarse)
    idx, valid, n_cells = _cell_index(grid, coarse, (r0, r1), (c0, c1))
    n_pix = np.bincount(idx[valid], minlength=n_cells).astype(np.float64)
    sums = np.bincount(idx[valid], weights=total[valid].astype(np.float64), minlength=n_cells)
    with np.errstate(invalid="ignore"):
        mean = np.where(n_pix > 0, sums / np.where(n_pix > 0, n_pix, 1.0), np.nan)
    mean_raster = Raster(
        coarse.subgrid((r0, r1), (c0, c1)),
        mean.reshape(r1 - r0, c1 - c0).astype(np.float32),
        np.nan,
    )
    return count, mean_raster


def pixel_entropy(prob_values: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats per pixel; 0 log 0 is 0 by continuity."""
    p = np.asarray(prob_values, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1)
    h[np.isnan(p).any(axis=-1)] = np.nan
    return h


def cell_entropy(
    probs: Raster, classes: Raster, cell: tuple[int, int], grid_coarse: GridSpec | None = None
) -> tuple[float, float]:
    """Mean per-pixel entropy over field- and boundary-argmaxed pixels of one
    cell; NaN when the class has no pixels there."""
    (r0, r1), (c0, c1) = cell_window(probs.grid, cell, grid_coarse)
    h = pixel_entropy(probs.values[r0:r1, c0:c1])
    cls = classes.values[r0:r1, c0:c1]
    out = []
    for target in (CLASS_FIELD, CLASS_BOUNDARY):
        sel = h[cls == target]
        sel = sel[~np.isnan(sel)]
        if sel.size == 0:
            out.append(math.nan)
            continue
        # sequential row-major accumulation: bit-identical to a plain loop
        # and to the bincount-based tile aggregation
        total = 0.0
        for value in sel.tolist():
            total += value
        out.append(total / sel.size)
    return out[0], out[1]


def cell_density(
    classes: Raster, cell: tuple[int, int], grid_coarse: GridSpec | None = None
) -> tuple[int, int]:
    """Field and boundary pixel counts within one cell."""
    (r0, r1), (c0, c1) = cell_window(classes.grid, cell, grid_coarse)
    cls = classes.values[r0:r1, c0:c1]
    return int((cls == CLASS_FIELD).sum()), int((cls == CLASS_BOUNDARY).sum())


def cell_precision_recall(
    classes: Raster,
    consensus: Raster,
    k: int,
    cell: tuple[int, int],
    grid_coarse: GridSpec | None = None,
) -> tuple[float, float]:
    """Precision and recall of field pixels against consensus >= k within one
    cell. Precision is NaN when no field pixels, recall NaN when no
    consensus pixels."""
    (r0, r1), (c0, c1) = cell_window(classes.grid, cell, grid_coarse)
    f = classes.values[r0:r1, c0:c1] == CLASS_FIELD
    ck = consensus.values[r0:r1, c0:c1] >= k
    inter = int((f & ck).sum())
    n_f, n_ck = int(f.sum()), int(ck.sum())
    precision = inter / n_f if n_f else math.nan
    recall = inter / n_ck if n_ck else math.nan
    return precision, recall


def _cell_index(grid_fine, coarse, rows, cols):
    """Flattened local cell index per fine pixel plus validity mask."""
    r0, r1 = rows
    c0, c1 = cols
    row_map, col_map = coarse_cell_of_pixels(grid_fine, coarse)
    local_r = row_map - r0
    local_c = col_map - c0
    valid = (
        (row_map >= r0)[:, None]
        & (row_map < r1)[:, None]
        & (col_map >= c0)[None, :]
        & (col_map < c1)[None, :]
    )
    idx = np.clip(local_r, 0, r1 - r0 - 1)[:, None] * (c1 - c0) + np.clip(
        local_c, 0, c1 - c0 - 1
    )[None, :]
    return idx, valid, (r1 - r0) * (c1 - c0)


@dataclass
class TileIndicators:
    """Vectorized per-cell indicators for the coarse window covering a tile."""

    window: tuple[tuple[int, int], tuple[int, int]]
    grid: GridSpec  # coarse subgrid of the window
    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def records(self) -> list[CellIndicatorRecord]:
        (r0, _), (c0, _) = self.window
        h, w = self.grid.shape
        recs = []
        has_consensus = "consensus_mean" in self.layers
        for i in range(h):
            for j in range(w):
                rec = CellIndicatorRecord(cell=(r0 + i, c0 + j))
                for name, arr in self.layers.items():
                    value = arr[i, j]
                    if name.startswith("count_"):
                        value = int(value)
                    else:
                        value = float(value)
                    setattr(rec, name, value)
                if not has_consensus:
                    for name in CONSENSUS_FIELDS:
                        setattr(rec, name, None)
                recs.append(rec)
        return recs


def aggregate_tile(
    probs: Raster,
    classes: Raster,
    consensus10: Raster | None = None,
    grid_coarse: GridSpec | None = None,
) -> TileIndicators:
    """All cell indicators for the coarse cells covering one tile.

    ``consensus10`` is the per-pixel agreement count on the tile grid; when
    omitted the consensus-derived indicators are absent from the result.
    """
    if not probs.grid.same_geometry(classes.grid):
        raise ValueError("probability and class rasters must share a grid")
    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    window = coarse_window_covering(probs.grid, coarse)
    (r0, r1), (c0, c1) = window
    idx, valid, n_cells = _cell_index(probs.grid, coarse, (r0, r1), (c0, c1))
    shape = (r1 - r0, c1 - c0)

    cls = classes.values
    f_mask = (cls == CLASS_FIELD) & valid
    b_mask = (cls == CLASS_BOUNDARY) & valid
    h = pixel_entropy(probs.values)

    n_pix = np.bincount(idx[valid], minlength=n_cells).astype(np.float64)
    count_f = np.bincount(idx[f_mask], minlength=n_cells).astype(np.float64)
    count_b = np.bincount(idx[b_mask], minlength=n_cells).astype(np.float64)

    def mean_over(mask, weights):
        counts = np.bincount(idx[mask], minlength=n_cells).astype(np.float64)
        sums = np.bincount(idx[mask], weights=weights[mask], minlength=n_cells)
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, sums / np.where(counts > 0, counts, 1.0), np.nan)

    h_ok = ~np.isnan(h)
    ent_f = mean_over(f_mask & h_ok, h)
    ent_b = mean_over(b_mask & h_ok, h)

    with np.errstate(invalid="ignore"):
        density = np.where(n_pix > 0, count_f / np.where(n_pix > 0, n_pix, 1.0), np.nan)
        ratio_fb = count_f / np.maximum(count_b, 1.0)
        ratio_ent = np.where(
            (ent_b != 0) & ~np.isnan(ent_b) & ~np.isnan(ent_f), ent_f / ent_b, np.nan
        )

    layers = {
        "entropy_field": ent_f.reshape(shape),
        "entropy_boundary": ent_b.reshape(shape),
        "count_field": count_f.reshape(shape),
        "count_boundary": count_b.reshape(shape),
        "field_boundary_ratio": ratio_fb.reshape(shape),
        "field_density": density.reshape(shape),
        "entropy_ratio": ratio_ent.reshape(shape),
    }

    if consensus10 is not None:
        if not consensus10.grid.same_geometry(probs.grid):
            raise ValueError("consensus raster must share the tile grid")
        cons = consensus10.values.astype(np.float64)
        layers["consensus_mean"] = mean_over(valid, cons).reshape(shape)
        for k in (2, 3):
            ck_mask = (cons >= k) & valid
            n_ck = np.bincount(idx[ck_mask], minlength=n_cells).astype(np.float64)
            inter = np.bincount(idx[ck_mask & f_mask], minlength=n_cells).astype(np.float64)
            with np.errstate(invalid="ignore"):
                precision = np.where(count_f > 0, inter / np.where(count_f > 0, count_f, 1), np.nan)
                recall = np.where(n_ck > 0, inter / np.where(n_ck > 0, n_ck, 1), np.nan)
            layers[f"precision_k{k}"] = precision.reshape(shape)
            layers[f"recall_k{k}"] = recall.reshape(shape)

    return TileIndicators(
        window=window, grid=coarse.subgrid((r0, r1), (c0, c1)), layers=layers
    )


def write_cell_table(indicators: TileIndicators, path):
    """Columnar per-cell indicator table (one row per coarse cell)."""
    import pyarrow as pa
    import pyarrow.parquet as pq

    records = indicators.records()
    has_consensus = "consensus_mean" in indicators.layers
    data = {
        "cell_row": [r.cell[0] for r in records],
        "cell_col": [r.cell[1] for r in records],
    }
    names = FEATURE_SETS["all"] if has_consensus else FEATURE_SETS["model_only"]
    for name in names:
        data[name] = [getattr(r, name) for r in records]
    pq.write_table(pa.table(data), path)
    return path


def read_cell_table(path) -> list[CellIndicatorRecord]:
    """Records from one or many :func:`write_cell_table` files."""
    import pyarrow.parquet as pq

    table = pq.read_table(path)
    cols = {name: table.column(name).to_pylist() for name in table.column_names}
    has_consensus = "consensus_mean" in cols
    records = []
    for i in range(table.num_rows):
        rec = CellIndicatorRecord(cell=(int(cols["cell_row"][i]), int(cols["cell_col"][i])))
        for name in FEATURE_SETS["all" if has_consensus else "model_only"]:
            value = cols[name][i]
            if name.startswith("count_"):
                setattr(rec, name, int(value))
            else:
                setattr(rec, name, math.nan if value is None else float(value))
        if not has_consensus:
            for name in CONSENSUS_FIELDS:
                setattr(rec, name, None)
        records.append(rec)
    return records


def derive_features(rec: CellIndicatorRecord, feature_set: str = "model_only") -> np.ndarray:
    """Feature vector in the documented order; NaN indicators impute to 0.

    Raises :class:`FeatureError` when the set needs consensus-derived fields
    the record does not carry.
    """
    try:
        names = FEATURE_SETS[feature_set]
    except KeyError:
        raise FeatureError(
            f"unknown feature set {feature_set!r}; choose from {sorted(FEATURE_SETS)}"
        ) from None
    out = np.empty(len(names), dtype=np.float64)
    for i, name in enumerate(names):
        value = getattr(rec, name)
        if value is None:
            raise FeatureError(
                f"feature set {feature_set!r} needs {name!r} but the record has no "
                "consensus-derived indicators"
            )
        out[i] = 0.0 if isinstance(value, float) and math.isnan(value) else float(value)
    return out
