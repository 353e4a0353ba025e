"""Georeferenced grid arithmetic shared by every raster stage.

All rasters are row-major, north-up arrays on a :class:`GridSpec`: row 0 is
the northernmost row, rows increase southward, columns increase eastward.
Point-in-cell tests use pixel centers; a point sitting exactly on a shared
pixel edge belongs to the pixel to its south-east (half-open intervals).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import shapely

logger = logging.getLogger(__name__)

# Canonical 500 m indicator grid: 86,400 x 34,560 px over (-180, 180) x (-60, 84).
GLOBAL_500M_WIDTH = 86_400
GLOBAL_500M_HEIGHT = 34_560
GLOBAL_EXTENT = (-180.0, 180.0, -60.0, 84.0)
FINE_PER_COARSE = 50  # one 500 m cell covers 50 x 50 aligned 10 m pixels


class GridError(ValueError):
    """Raised for inconsistent grid definitions or out-of-bounds indices."""


@dataclass(frozen=True)
class GridSpec:
    """A regular georeferenced grid (extent, dimensions, CRS)."""

    min_lon: float
    max_lon: float
    min_lat: float
    max_lat: float
    width: int
    height: int
    crs: str = "EPSG:4326"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GridError(f"grid dimensions must be positive, got {self.width}x{self.height}")
        if self.max_lon <= self.min_lon or self.max_lat <= self.min_lat:
            raise GridError("grid extent must have positive span on both axes")

    @property
    def pixel_width(self) -> float:
        return (self.max_lon - self.min_lon) / self.width

    @property
    def pixel_height(self) -> float:
        return (self.max_lat - self.min_lat) / self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def pixel_center(self, row, col) -> tuple[np.ndarray, np.ndarray]:
        """Longitude/latitude of pixel centers (vectorized over row/col)."""
        row = np.asarray(row)
        col = np.asarray(col)
        lon = self.min_lon + (col + 0.5) * self.pixel_width
        lat = self.max_lat - (row + 0.5) * self.pixel_height
        return lon, lat

    def index_of(self, lon, lat) -> tuple[np.ndarray, np.ndarray]:
        """Row/col of the pixel owning each point (south-east rule on edges).

        Indices may fall outside ``[0, height) x [0, width)``; callers that
        need bounds enforcement use :meth:`contains_index`.
        """
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        col = np.floor((lon - self.min_lon) / self.pixel_width).astype(np.int64)
        row = np.floor((self.max_lat - lat) / self.pixel_height).astype(np.int64)
        return row, col

    def contains_index(self, row, col) -> np.ndarray:
        row = np.asarray(row)
        col = np.asarray(col)
        return (row >= 0) & (row < self.height) & (col >= 0) & (col < self.width)

    def pixel_bounds(self, row: int, col: int) -> tuple[float, float, float, float]:
        """(min_lon, min_lat, max_lon, max_lat) of one pixel cell."""
        w, h = self.pixel_width, self.pixel_height
        return (
            self.min_lon + col * w,
            self.max_lat - (row + 1) * h,
            self.min_lon + (col + 1) * w,
            self.max_lat - row * h,
        )

    def subgrid(self, rows: tuple[int, int], cols: tuple[int, int]) -> "GridSpec":
        """Grid covering the half-open pixel window ``rows x cols``."""
        r0, r1 = rows
        c0, c1 = cols
        if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
            raise GridError(f"window rows={rows} cols={cols} outside grid {self.shape}")
        w, h = self.pixel_width, self.pixel_height
        return replace(
            self,
            min_lon=self.min_lon + c0 * w,
            max_lon=self.min_lon + c1 * w,
            max_lat=self.max_lat - r0 * h,
            min_lat=self.max_lat - r1 * h,
            width=c1 - c0,
            height=r1 - r0,
        )

    def same_geometry(self, other: "GridSpec", tol: float = 1e-9) -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and self.crs == other.crs
            and abs(self.min_lon - other.min_lon) <= tol
            and abs(self.max_lon - other.max_lon) <= tol
            and abs(self.min_lat - other.min_lat) <= tol
            and abs(self.max_lat - other.max_lat) <= tol
        )


@dataclass
class Raster:
    """Array of values on a grid. ``values`` is (H, W) or (H, W, bands)."""

    grid: GridSpec
    values: np.ndarray
    nodata: float | int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[:2] != self.grid.shape:
            raise GridError(
                f"values shape {self.values.shape[:2]} does not match grid {self.grid.shape}"
            )

    @property
    def n_bands(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    def nodata_mask(self) -> np.ndarray:
        """Boolean (H, W) mask of nodata pixels (any-band for multiband)."""
        if self.nodata is None:
            return np.zeros(self.grid.shape, dtype=bool)
        if isinstance(self.nodata, float) and np.isnan(self.nodata):
            mask = np.isnan(self.values)
        else:
            mask = self.values == self.nodata
        if mask.ndim == 3:
            mask = mask.any(axis=2)
        return mask


def make_global_grid() -> GridSpec:
    """The canonical 500 m grid: 86,400 x 34,560 px, (-180, 180) x (-60, 84)."""
    lo, hi, s, n = GLOBAL_EXTENT
    return GridSpec(lo, hi, s, n, GLOBAL_500M_WIDTH, GLOBAL_500M_HEIGHT)


def make_global_grid_10m() -> GridSpec:
    """The aligned 10 m grid: each 500 m cell covers exactly 50 x 50 pixels."""
    lo, hi, s, n = GLOBAL_EXTENT
    return GridSpec(
        lo, hi, s, n, GLOBAL_500M_WIDTH * FINE_PER_COARSE, GLOBAL_500M_HEIGHT * FINE_PER_COARSE
    )


def resample_nearest(src: Raster, dst_grid: GridSpec) -> Raster:
    """Nearest-neighbor resampling: each destination pixel takes the value of
    the source pixel containing its center. Destination pixels whose centers
    fall outside the source extent become nodata; nodata propagates.
    """
    if src.grid.crs != dst_grid.crs:
        raise GridError(f"CRS mismatch: {src.grid.crs} vs {dst_grid.crs}")
    if src.grid.same_geometry(dst_grid):
        return Raster(dst_grid, src.values.copy(), src.nodata)

    rows = np.arange(dst_grid.height)
    cols = np.arange(dst_grid.width)
    _, lat = dst_grid.pixel_center(rows, np.zeros_like(rows))
    lon, _ = dst_grid.pixel_center(np.zeros_like(cols), cols)
    src_row, _ = src.grid.index_of(np.full_like(lat, src.grid.min_lon), lat)
    _, src_col = src.grid.index_of(lon, np.full_like(lon, src.grid.max_lat))

    row_ok = (src_row >= 0) & (src_row < src.grid.height)
    col_ok = (src_col >= 0) & (src_col < src.grid.width)
    if not row_ok.any() or not col_ok.any():
        logger.warning(
            "resample_nearest: source and destination extents are disjoint; output is all nodata"
        )

    nodata = src.nodata
    if nodata is None:
        nodata = np.nan if np.issubdtype(src.values.dtype, np.floating) else 0

    out_shape = dst_grid.shape + src.values.shape[2:]
    out = np.full(out_shape, nodata, dtype=src.values.dtype)
    rr = np.clip(src_row, 0, src.grid.height - 1)
    cc = np.clip(src_col, 0, src.grid.width - 1)
    out[:] = src.values[rr[:, None], cc[None, :]]
    bad = ~(row_ok[:, None] & col_ok[None, :])
    out[bad] = nodata
    return Raster(dst_grid, out, nodata)


def rasterize_polygons(polys, grid: GridSpec, mode: str = "all_touched") -> Raster:
    """Burn polygons into a binary raster.

    ``all_touched`` marks every pixel whose cell intersects a polygon's
    boundary or interior; ``center`` marks pixels whose centers fall strictly
    inside a polygon.
    """
    if mode not in ("all_touched", "center"):
        raise ValueError(f"unknown rasterization mode {mode!r}")
    out = np.zeros(grid.shape, dtype=np.uint8)
    pw, ph = grid.pixel_width, grid.pixel_height
    for poly in polys:
        poly = shapely.geometry.shape(poly) if not isinstance(poly, shapely.Geometry) else poly
        if poly.is_empty:
            continue
        minx, miny, maxx, maxy = poly.bounds
        c0 = max(0, int(np.floor((minx - grid.min_lon) / pw)))
        c1 = min(grid.width, int(np.ceil((maxx - grid.min_lon) / pw)))
        r0 = max(0, int(np.floor((grid.max_lat - maxy) / ph)))
        r1 = min(grid.height, int(np.ceil((grid.max_lat - miny) / ph)))
        if c0 >= c1 or r0 >= r1:
            continue
        rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        if mode == "center":
            lon, lat = grid.pixel_center(rr.ravel(), cc.ravel())
            hit = shapely.contains_xy(poly, lon, lat)
        else:
            left = grid.min_lon + cc.ravel() * pw
            top = grid.max_lat - rr.ravel() * ph
            cells = shapely.box(left, top - ph, left + pw, top)
            hit = shapely.intersects(poly, cells)
        out[rr.ravel()[hit], cc.ravel()[hit]] = 1
    return Raster(grid, out, nodata=None)


def cell_window(
    grid_10m: GridSpec, cell: tuple[int, int], grid_coarse: GridSpec | None = None
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Half-open 10 m pixel window covered by one coarse cell.

    ``cell`` is (row, col) on ``grid_coarse`` (the global 500 m grid by
    default). For aligned grids the window is exactly 50 x 50; windows of a
    cell partially covered by the tile are clipped to the tile. A cell that
    does not overlap ``grid_10m`` at all raises :class:`GridError`.
    """
    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    row, col = cell
    if not (0 <= row < coarse.height and 0 <= col < coarse.width):
        raise GridError(f"cell {cell} outside coarse grid {coarse.shape}")
    min_lon, min_lat, max_lon, max_lat = coarse.pixel_bounds(row, col)
    pw, ph = grid_10m.pixel_width, grid_10m.pixel_height
    # Round to the nearest pixel edge: exact for aligned grids, stable under
    # floating-point jitter in the extent arithmetic.
    c0 = int(round((min_lon - grid_10m.min_lon) / pw))
    c1 = int(round((max_lon - grid_10m.min_lon) / pw))
    r0 = int(round((grid_10m.max_lat - max_lat) / ph))
    r1 = int(round((grid_10m.max_lat - min_lat) / ph))
    c0, c1 = max(c0, 0), min(c1, grid_10m.width)
    r0, r1 = max(r0, 0), min(r1, grid_10m.height)
    if c0 >= c1 or r0 >= r1:
        raise GridError(f"cell {cell} does not overlap the 10 m grid")
    return (r0, r1), (c0, c1)


def coarse_cell_of_pixels(
    grid_fine: GridSpec, grid_coarse: GridSpec | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis maps from fine pixel index to owning coarse cell index.

    Returns ``(row_map, col_map)`` with shapes (H,) and (W,); entries are -1
    where the fine pixel center falls outside the coarse grid.
    """
    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    rows = np.arange(grid_fine.height)
    cols = np.arange(grid_fine.width)
    _, lat = grid_fine.pixel_center(rows, np.zeros_like(rows))
    lon, _ = grid_fine.pixel_center(np.zeros_like(cols), cols)
    crow, _ = coarse.index_of(np.full_like(lat, coarse.min_lon), lat)
    _, ccol = coarse.index_of(lon, np.full_like(lon, coarse.max_lat))
    crow[(crow < 0) | (crow >= coarse.height)] = -1
    ccol[(ccol < 0) | (ccol >= coarse.width)] = -1
    return crow, ccol


def coarse_window_covering(
    grid_fine: GridSpec, grid_coarse: GridSpec | None = None
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Half-open coarse-cell window covering every fine pixel center."""
    coarse = grid_coarse if grid_coarse is not None else make_global_grid()
    row_map, col_map = coarse_cell_of_pixels(grid_fine, coarse)
    rows = row_map[row_map >= 0]
    cols = col_map[col_map >= 0]
    if rows.size == 0 or cols.size == 0:
        raise GridError("fine grid lies entirely outside the coarse grid")
    return (int(rows.min()), int(rows.max()) + 1), (int(cols.min()), int(cols.max()) + 1)
