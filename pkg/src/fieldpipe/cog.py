"""Cloud-optimized GeoTIFF reading and writing.

Rasters are stored as tiled GeoTIFFs with factor-of-two overview pages,
georeferencing via the ModelPixelScale/ModelTiepoint tags, the CRS via a
GeoKey directory, and nodata via the GDAL_NODATA ascii tag. Only EPSG-coded
CRSs are supported, which covers everything the pipeline produces.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import tifffile

from .grids import GridSpec, Raster

TAG_MODEL_PIXEL_SCALE = 33550
TAG_MODEL_TIEPOINT = 33922
TAG_GEO_KEY_DIRECTORY = 34735
TAG_GDAL_NODATA = 42113

GEOKEY_MODEL_TYPE = 1024
GEOKEY_RASTER_TYPE = 1025
GEOKEY_GEOGRAPHIC_TYPE = 2048
GEOKEY_PROJECTED_TYPE = 3072

MODEL_TYPE_PROJECTED = 1
MODEL_TYPE_GEOGRAPHIC = 2
RASTER_PIXEL_IS_AREA = 1

GEOGRAPHIC_EPSG_CODES = {4326, 4258, 4269}

TILE_SIZE = 256
MIN_OVERVIEW_DIM = 512


class CogError(ValueError):
    """Raised when a file cannot be parsed as a georeferenced TIFF."""


def _epsg_code(crs: str) -> int:
    try:
        authority, code = crs.split(":")
        if authority.upper() != "EPSG":
            raise ValueError
        return int(code)
    except ValueError:
        raise CogError(f"only EPSG CRS identifiers are supported, got {crs!r}") from None


def _geokey_directory(crs: str) -> list[int]:
    code = _epsg_code(crs)
    if code in GEOGRAPHIC_EPSG_CODES:
        keys = [
            (GEOKEY_MODEL_TYPE, 0, 1, MODEL_TYPE_GEOGRAPHIC),
            (GEOKEY_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA),
            (GEOKEY_GEOGRAPHIC_TYPE, 0, 1, code),
        ]
    else:
        keys = [
            (GEOKEY_MODEL_TYPE, 0, 1, MODEL_TYPE_PROJECTED),
            (GEOKEY_RASTER_TYPE, 0, 1, RASTER_PIXEL_IS_AREA),
            (GEOKEY_PROJECTED_TYPE, 0, 1, code),
        ]
    directory = [1, 1, 0, len(keys)]
    for entry in keys:
        directory.extend(entry)
    return directory


def _nodata_string(nodata, dtype) -> str:
    if isinstance(nodata, float) and math.isnan(nodata):
        return "nan"
    if np.issubdtype(dtype, np.integer):
        return str(int(nodata))
    return repr(float(nodata))


def _parse_nodata(text: str, dtype):
    text = text.strip().rstrip("\x00")
    if text.lower() == "nan":
        return float("nan")
    if np.issubdtype(dtype, np.integer):
        return int(float(text))
    return float(text)


def write_cog(path, raster: Raster, overviews: bool = True) -> Path:
    """Write a raster as a tiled GeoTIFF with overviews and geo metadata.

    Multiband rasters use band-interleaved (H, W, bands) layout. Overviews
    are nearest-neighbor factor-of-two reductions, generated while both
    dimensions exceed ``MIN_OVERVIEW_DIM``. Output bytes are a deterministic
    function of the raster contents.
    """
    path = Path(path)
    grid = raster.grid
    extratags = [
        (
            TAG_MODEL_PIXEL_SCALE,
            12,
            3,
            (grid.pixel_width, grid.pixel_height, 0.0),
            True,
        ),
        (
            TAG_MODEL_TIEPOINT,
            12,
            6,
            (0.0, 0.0, 0.0, grid.min_lon, grid.max_lat, 0.0),
            True,
        ),
    ]
    geokeys = _geokey_directory(grid.crs)
    extratags.append((TAG_GEO_KEY_DIRECTORY, 3, len(geokeys), tuple(geokeys), True))
    if raster.nodata is not None:
        extratags.append(
            (TAG_GDAL_NODATA, 2, None, _nodata_string(raster.nodata, raster.values.dtype), True)
        )

    values = np.ascontiguousarray(raster.values)
    with tifffile.TiffWriter(path) as writer:
        writer.write(
            values,
            tile=(TILE_SIZE, TILE_SIZE),
            photometric="minisblack",
            planarconfig="contig" if values.ndim == 3 else None,
            extratags=extratags,
            compression=None,
        )
        if overviews:
            level = values
            while min(level.shape[:2]) >= MIN_OVERVIEW_DIM:
                level = level[::2, ::2]
                writer.write(
                    level,
                    tile=(TILE_SIZE, TILE_SIZE),
                    photometric="minisblack",
                    planarconfig="contig" if level.ndim == 3 else None,
                    subfiletype=1,
                    compression=None,
                )
    return path


def read_cog(path, window: tuple[tuple[int, int], tuple[int, int]] | None = None) -> Raster:
    """Read a GeoTIFF written by :func:`write_cog` (full resolution page).

    ``window`` is an optional half-open ((row0, row1), (col0, col1)) pixel
    window; the returned raster's grid is the corresponding subgrid.
    """
    path = Path(path)
    with tifffile.TiffFile(path) as tif:
        page = tif.pages[0]
        scale_tag = page.tags.get(TAG_MODEL_PIXEL_SCALE)
        tie_tag = page.tags.get(TAG_MODEL_TIEPOINT)
        if scale_tag is None or tie_tag is None:
            raise CogError(f"{path} lacks GeoTIFF georeferencing tags")
        px_w, px_h = float(scale_tag.value[0]), float(scale_tag.value[1])
        tie = tie_tag.value
        if tuple(tie[:3]) != (0.0, 0.0, 0.0):
            raise CogError(f"{path}: only (0,0,0)-anchored tiepoints are supported")
        min_lon, max_lat = float(tie[3]), float(tie[4])

        crs = "EPSG:4326"
        key_tag = page.tags.get(TAG_GEO_KEY_DIRECTORY)
        if key_tag is not None:
            entries = list(key_tag.value)
            n_keys = entries[3]
            keys = {
                entries[4 + 4 * i]: entries[7 + 4 * i] for i in range(n_keys)
            }
            if keys.get(GEOKEY_MODEL_TYPE) == MODEL_TYPE_PROJECTED:
                crs = f"EPSG:{keys[GEOKEY_PROJECTED_TYPE]}"
            elif GEOKEY_GEOGRAPHIC_TYPE in keys:
                crs = f"EPSG:{keys[GEOKEY_GEOGRAPHIC_TYPE]}"

        height, width = page.shape[:2]
        grid = GridSpec(
            min_lon=min_lon,
            max_lon=min_lon + px_w * width,
            min_lat=max_lat - px_h * height,
            max_lat=max_lat,
            width=width,
            height=height,
            crs=crs,
        )

        nodata = None
        nodata_tag = page.tags.get(TAG_GDAL_NODATA)
        if nodata_tag is not None:
            nodata = _parse_nodata(str(nodata_tag.value), page.dtype)

        values = page.asarray()

    if window is not None:
        (r0, r1), (c0, c1) = window
        grid = grid.subgrid((r0, r1), (c0, c1))
        values = values[r0:r1, c0:c1]

    return Raster(grid, values, nodata)
