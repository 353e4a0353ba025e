"""Field polygon serialization: GeoParquet (WKB geometry) and GeoJSON.

The parquet layout follows the fiboa column-naming convention: one row per
field with ``id``, ``geometry`` (WKB binary), ``area`` (square meters),
``perimeter`` (meters), ``country``, ``confidence``, and
``determination_datetime``. File-level metadata carries the GeoParquet
``geo`` key so standard readers locate the geometry column.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq
import shapely

from .vectorizing import FieldPolygon

GEOPARQUET_META = {
    "version": "1.0.0",
    "primary_column": "geometry",
    "columns": {
        "geometry": {"encoding": "WKB", "geometry_types": ["Polygon"]},
    },
}

SCHEMA = pa.schema(
    [
        ("id", pa.string()),
        ("geometry", pa.binary()),
        ("area", pa.float64()),
        ("perimeter", pa.float64()),
        ("country", pa.string()),
        ("confidence", pa.float64()),
        ("determination_datetime", pa.string()),
        ("pixel_count", pa.int64()),
        ("year", pa.int32()),
        ("tile_id", pa.string()),
    ]
)


class FieldsFileError(ValueError):
    """Raised when a fields file cannot be parsed."""


def _determination_datetime(year: int) -> str:
    return f"{year}-12-31T23:59:59Z" if year else ""


def fields_to_table(polys: list[FieldPolygon]) -> pa.Table:
    rows = {
        "id": [p.id for p in polys],
        "geometry": [shapely.to_wkb(p.to_shapely()) for p in polys],
        "area": [p.area_m2 for p in polys],
        "perimeter": [p.perimeter_m for p in polys],
        "country": [p.country for p in polys],
        "confidence": [p.confidence for p in polys],
        "determination_datetime": [_determination_datetime(p.year) for p in polys],
        "pixel_count": [p.pixel_count for p in polys],
        "year": [p.year for p in polys],
        "tile_id": [p.tile_id for p in polys],
    }
    table = pa.Table.from_pydict(rows, schema=SCHEMA)
    return table.replace_schema_metadata({"geo": json.dumps(GEOPARQUET_META, sort_keys=True)})


def write_fields(polys: list[FieldPolygon], path, format: str = "parquet") -> Path:
    """Serialize polygons; ``format`` is ``parquet`` or ``geojson``."""
    path = Path(path)
    if format == "parquet":
        pq.write_table(fields_to_table(polys), path)
    elif format == "geojson":
        path.write_text(json.dumps(_feature_collection(polys), sort_keys=True))
    else:
        raise ValueError(f"unknown fields format {format!r}")
    return path


def read_fields(path) -> list[FieldPolygon]:
    """Read polygons written by :func:`write_fields` (either format)."""
    path = Path(path)
    if path.suffix == ".geojson" or path.suffix == ".json":
        return _read_geojson(path)
    try:
        table = pq.read_table(path)
    except Exception as exc:
        raise FieldsFileError(f"cannot parse {path} as parquet: {exc}") from exc
    required = {"id", "geometry", "area", "perimeter"}
    missing = required - set(table.column_names)
    if missing:
        raise FieldsFileError(f"{path} lacks required columns {sorted(missing)}")

    cols = {name: table.column(name).to_pylist() for name in table.column_names}
    polys = []
    for i in range(table.num_rows):
        try:
            geom = shapely.from_wkb(cols["geometry"][i])
        except Exception as exc:
            raise FieldsFileError(f"{path} row {i}: invalid WKB geometry: {exc}") from exc
        if not isinstance(geom, shapely.Polygon):
            raise FieldsFileError(f"{path} row {i}: expected Polygon, got {geom.geom_type}")
        polys.append(
            FieldPolygon(
                id=cols["id"][i],
                exterior=np.asarray(geom.exterior.coords, dtype=np.float64),
                holes=[np.asarray(ring.coords, dtype=np.float64) for ring in geom.interiors],
                pixel_count=int(cols.get("pixel_count", [0] * table.num_rows)[i] or 0),
                area_m2=cols["area"][i],
                perimeter_m=cols["perimeter"][i],
                country=cols.get("country", ["unknown"] * table.num_rows)[i],
                confidence=cols.get("confidence", [None] * table.num_rows)[i],
                year=int(cols.get("year", [0] * table.num_rows)[i] or 0),
                tile_id=cols.get("tile_id", [""] * table.num_rows)[i] or "",
            )
        )
    return polys


def _feature_collection(polys: list[FieldPolygon]) -> dict:
    features = []
    for p in polys:
        rings = [p.exterior.tolist()] + [h.tolist() for h in p.holes]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": rings},
                "properties": {
                    "id": p.id,
                    "area": p.area_m2,
                    "perimeter": p.perimeter_m,
                    "country": p.country,
                    "confidence": p.confidence,
                    "determination_datetime": _determination_datetime(p.year),
                    "pixel_count": p.pixel_count,
                    "year": p.year,
                    "tile_id": p.tile_id,
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def _read_geojson(path: Path) -> list[FieldPolygon]:
    try:
        doc = json.loads(path.read_text())
        features = doc["features"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FieldsFileError(f"cannot parse {path} as GeoJSON features: {exc}") from exc
    polys = []
    for feat in features:
        props = feat.get("properties", {})
        rings = feat["geometry"]["coordinates"]
        polys.append(
            FieldPolygon(
                id=props.get("id", ""),
                exterior=np.asarray(rings[0], dtype=np.float64),
                holes=[np.asarray(r, dtype=np.float64) for r in rings[1:]],
                pixel_count=int(props.get("pixel_count", 0)),
                area_m2=float(props.get("area", 0.0)),
                perimeter_m=float(props.get("perimeter", 0.0)),
                country=props.get("country", "unknown"),
                confidence=props.get("confidence"),
                year=int(props.get("year", 0)),
                tile_id=props.get("tile_id", ""),
            )
        )
    return polys
