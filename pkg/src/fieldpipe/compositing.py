"""Cloud-free seasonal median compositing and season-window selection.

Scenes are 4-band (B02, B03, B04, B08) reflectance rasters with a
scene-classification (SCL) band. Compositing drops whole scenes above a
cloud-fraction threshold, masks cloudy/shadow/snow pixels via SCL, and takes
the per-pixel, per-band median of whatever survives.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cog import read_cog
from .grids import GridError, GridSpec, Raster

logger = logging.getLogger(__name__)

# SCL classes excluded from composites: saturated/defective (1), cloud shadow
# (3), cloud medium/high probability (8, 9), cirrus (10), snow/ice (11).
MASKED_SCL_CLASSES = (1, 3, 8, 9, 10, 11)

DEFAULT_CLOUD_THRESHOLD = 0.20
DEFAULT_BRACKET_DAYS = 30

# Fallback season windows (month, day) for tiles with no crop-calendar data.
FALLBACK_WINDOWS = {
    ("north", "planting"): ((4, 1), (5, 31)),
    ("north", "harvest"): ((8, 1), (9, 30)),
    ("south", "planting"): ((10, 1), (11, 30)),
    ("south", "harvest"): ((2, 1), (3, 31)),
}


class CompositeError(ValueError):
    """Raised for unusable compositing inputs."""


class CalendarGapError(LookupError):
    """Crop calendar has no data at the requested location.

    Callers should fall back to :func:`fallback_window` for the tile's
    hemisphere.
    """


@dataclass
class Scene:
    """One acquisition: 4-band reflectance plus its SCL mask."""

    acquisition_date: dt.date
    bands: Raster
    scl: Raster
    cloud_fraction: float

    def __post_init__(self):
        if self.bands.values.ndim != 3 or self.bands.values.shape[2] != 4:
            raise CompositeError("scene bands must be (H, W, 4) in B02,B03,B04,B08 order")
        if not self.bands.grid.same_geometry(self.scl.grid):
            raise CompositeError("bands and SCL must share a grid")
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise CompositeError(f"cloud_fraction {self.cloud_fraction} outside [0, 1]")


@dataclass(frozen=True)
class SeasonWindow:
    start: dt.date
    end: dt.date
    kind: str  # "planting" or "harvest"

    def __post_init__(self):
        if self.start > self.end:
            raise CompositeError(f"season window start {self.start} after end {self.end}")


def median_composite(
    scenes: list[Scene], cloud_threshold: float = DEFAULT_CLOUD_THRESHOLD
) -> Raster:
    """Per-pixel, per-band median of SCL-unmasked observations.

    Scenes with ``cloud_fraction >= cloud_threshold`` are excluded up front.
    Pixels with zero surviving observations are NaN-nodata. An even number of
    observations yields the mean of the two middle values.
    """
    if not scenes:
        raise CompositeError("median_composite needs at least one scene")
    grid = scenes[0].bands.grid
    for scene in scenes[1:]:
        if not scene.bands.grid.same_geometry(grid):
            raise GridError("all scenes must share a grid")

    kept = [s for s in scenes if s.cloud_fraction < cloud_threshold]
    if not kept:
        logger.warning(
            "median_composite: all %d scenes at/above cloud threshold %.2f; output is all nodata",
            len(scenes),
            cloud_threshold,
        )
        empty = np.full(grid.shape + (4,), np.nan, dtype=np.float32)
        return Raster(grid, empty, np.nan)

    stack = np.empty((len(kept),) + grid.shape + (4,), dtype=np.float32)
    for i, scene in enumerate(kept):
        obs = scene.bands.values.astype(np.float32, copy=True)
        masked = np.isin(scene.scl.values, MASKED_SCL_CLASSES)
        if scene.bands.nodata is not None:
            masked |= scene.bands.nodata_mask()
        obs[masked] = np.nan
        stack[i] = obs

    with np.errstate(invalid="ignore"):
        out = np.nanmedian(stack, axis=0)
    return Raster(grid, out.astype(np.float32), np.nan)


def _doy_window(doy: int, bracket_days: int, year: int, kind: str) -> SeasonWindow:
    base = dt.date(year, 1, 1)
    start = base + dt.timedelta(days=int(doy) - 1 - bracket_days)
    end = base + dt.timedelta(days=int(doy) - 1 + bracket_days)
    return SeasonWindow(start, end, kind)


def season_windows(
    sos: Raster,
    eos: Raster,
    tile_centroid: tuple[float, float],
    year: int,
    bracket_days: int = DEFAULT_BRACKET_DAYS,
) -> tuple[SeasonWindow, SeasonWindow]:
    """Planting and harvest windows bracketing SOS/EOS at the tile centroid.

    SOS/EOS rasters hold day-of-year values. Windows running past the year
    boundary roll into the neighboring year. Nodata at the centroid raises
    :class:`CalendarGapError`; callers apply :func:`fallback_window`.
    """
    lon, lat = tile_centroid
    windows = []
    for raster, kind in ((sos, "planting"), (eos, "harvest")):
        row, col = raster.grid.index_of(lon, lat)
        if not raster.grid.contains_index(row, col):
            raise CalendarGapError(
                f"tile centroid ({lon}, {lat}) outside the {kind} calendar raster; "
                "use fallback_window()"
            )
        value = float(raster.values[int(row), int(col)])
        nod = raster.nodata
        is_nodata = np.isnan(value) or (
            nod is not None and not np.isnan(float(nod)) and value == float(nod)
        )
        if is_nodata:
            raise CalendarGapError(
                f"crop calendar has nodata at ({lon}, {lat}) for the {kind} window; "
                "use fallback_window()"
            )
        windows.append(_doy_window(int(value), bracket_days, year, kind))
    return windows[0], windows[1]


def fallback_window(kind: str, latitude: float, year: int) -> SeasonWindow:
    """Fixed hemispheric default window for calendar gaps."""
    hemisphere = "north" if latitude >= 0 else "south"
    (m0, d0), (m1, d1) = FALLBACK_WINDOWS[(hemisphere, kind)]
    return SeasonWindow(dt.date(year, m0, d0), dt.date(year, m1, d1), kind)


def load_manifest(path) -> list[Scene]:
    """Load scenes from a JSON manifest.

    The manifest is a list of records ``{"path", "scl_path", "date",
    "cloud_fraction"}`` with paths relative to the manifest file.
    """
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CompositeError(f"malformed scene manifest {path}: {exc}") from exc
    scenes = []
    for rec in records:
        bands = read_cog(path.parent / rec["path"])
        scl = read_cog(path.parent / rec["scl_path"])
        scenes.append(
            Scene(
                acquisition_date=dt.date.fromisoformat(rec["date"]),
                bands=bands,
                scl=scl,
                cloud_fraction=float(rec["cloud_fraction"]),
            )
        )
    return scenes
