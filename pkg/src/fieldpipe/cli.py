"""Command-line entry point wiring the pipeline stages.

Exit codes: 0 success, 1 usage error, 2 input error, 3 partial failure (a
retryable run manifest is written). Tile-level work in ``run`` executes on a
bounded worker pool; outputs are byte-identical for any parallelism degree.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import compositing, confidence, evaluation, indicators, stitching, vectorizing
from .clustering import CoverageHull, coverage_hulls
from .cog import read_cog, write_cog
from .config import PipelineConfig, write_sidecar
from .fields_io import read_fields, write_fields
from .grids import Raster

logger = logging.getLogger("fieldpipe")

INDICATOR_LAYER_NAMES = indicators.FEATURE_SETS["all"]


class InputError(Exception):
    """Missing or unreadable input; exit code 2."""


class PartialFailure(Exception):
    """Some tiles failed; a retryable manifest was written; exit code 3."""


def _log_stage(tile_id: str, stage: str, seconds: float, pixels: int):
    rate = pixels / seconds if seconds > 0 else float("inf")
    logger.info(
        "tile=%s stage=%s wall_s=%.3f pixels=%d px_per_s=%.0f",
        tile_id,
        stage,
        seconds,
        pixels,
        rate,
    )


def _read_raster(path, kind: str) -> Raster:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{kind} raster not found: {path}")
    try:
        return read_cog(path)
    except Exception as exc:
        raise InputError(f"cannot read {kind} raster {path}: {exc}") from exc


def _backend_from_spec(spec: str):
    if spec == "synthetic":
        return stitching.synthetic_backend
    if spec.startswith("file:"):
        return stitching.onnx_backend(spec[5:])
    raise click.UsageError(f"unknown backend {spec!r}; use 'synthetic' or 'file:<model>'")


@click.group()
@click.option("--verbose", is_flag=True, help="Debug-level logging.")
def cli(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )


@cli.command()
@click.option("--manifest", required=True, type=click.Path(), help="Scene manifest JSON.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--cloud-threshold", default=compositing.DEFAULT_CLOUD_THRESHOLD, show_default=True)
def composite(manifest, out_path, cloud_threshold):
    """Median-composite the scenes of one tile season."""
    manifest = Path(manifest)
    if not manifest.exists():
        raise InputError(f"scene manifest not found: {manifest}")
    try:
        scenes = compositing.load_manifest(manifest)
    except compositing.CompositeError as exc:
        raise InputError(str(exc)) from exc
    t0 = time.perf_counter()
    result = compositing.median_composite(scenes, cloud_threshold)
    write_cog(out_path, result)
    write_sidecar(out_path, inputs=[str(manifest)])
    _log_stage(manifest.stem, "composite", time.perf_counter() - t0, result.values.size)


def _stitch_tile(planting_path, harvest_path, backend_spec, boa_offset):
    planting = _read_raster(planting_path, "planting-season")
    harvest = _read_raster(harvest_path, "harvest-season")
    if not planting.grid.same_geometry(harvest.grid):
        raise InputError("planting and harvest tiles must share a grid")
    stack = np.concatenate(
        [
            stitching.normalize_patch(planting.values, boa_offset),
            stitching.normalize_patch(harvest.values, boa_offset),
        ],
        axis=2,
    )
    backend = _backend_from_spec(backend_spec)
    plan = stitching.plan_patches(stack.shape[:2])
    patches = stitching.run_backend_over_plan(stack, plan, backend)
    probs = stitching.stitch(patches, plan, grid=planting.grid)
    classes = stitching.argmax_classify(probs)
    return probs, classes


@cli.command()
@click.option(
    "--tile", nargs=2, required=True, type=click.Path(), help="Planting and harvest COGs."
)
@click.option("--backend", default="synthetic", show_default=True)
@click.option("--boa-offset", default=stitching.DEFAULT_BOA_OFFSET, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--tile-id", default="tile")
def stitch(tile, backend, boa_offset, out_dir, tile_id):
    """Run patch inference and Gaussian stitching over one tile."""
    t0 = time.perf_counter()
    probs, classes = _stitch_tile(tile[0], tile[1], backend, boa_offset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_cog(out_dir / f"{tile_id}_probabilities.tif", probs)
    write_cog(out_dir / f"{tile_id}_classes.tif", classes)
    write_sidecar(out_dir / f"{tile_id}_classes.tif", inputs=[str(tile[0]), str(tile[1])])
    _log_stage(tile_id, "stitch", time.perf_counter() - t0, classes.values.size)


@cli.command()
@click.option("--classes", "classes_path", required=True, type=click.Path())
@click.option("--min-pixels", default=vectorizing.MIN_FIELD_PIXELS, show_default=True)
@click.option("--adm0", type=click.Path(), default=None)
@click.option("--code-map", type=click.Path(), default=None, help="JSON {raster value: ISO3}.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="parquet", type=click.Choice(["parquet", "geojson"]))
@click.option("--tile-id", default="tile")
@click.option("--year", default=0, type=int)
def vectorize(classes_path, min_pixels, adm0, code_map, out_path, fmt, tile_id, year):
    """Extract, filter, and serialize field polygons from a class raster."""
    t0 = time.perf_counter()
    classes = _read_raster(classes_path, "class")
    polys = vectorizing.extract_fields(classes, min_pixels, tile_id=tile_id, year=year)
    if adm0:
        mapping = json.loads(Path(code_map).read_text()) if code_map else None
        if mapping is not None:
            mapping = {int(k): v for k, v in mapping.items()}
        vectorizing.assign_country(polys, _read_raster(adm0, "ADM0"), mapping)
    write_fields(polys, out_path, format=fmt)
    write_sidecar(out_path, inputs=[str(classes_path)], n_fields=len(polys))
    _log_stage(tile_id, "vectorize", time.perf_counter() - t0, classes.values.size)


def _load_consensus(consensus_dir, tile_grid):
    """Binarize + resample the consensus constituents onto the tile grid."""
    consensus_dir = Path(consensus_dir)
    binaries = []
    for spec in indicators.CROPLAND_LAYERS:
        layer_path = consensus_dir / f"{spec.name}.tif"
        if not layer_path.exists():
            raise InputError(f"consensus layer missing: {layer_path}")
        layer = read_cog(layer_path)
        binary = indicators.binarize_cropland(layer, spec)
        from .grids import resample_nearest

        binaries.append(resample_nearest(binary, tile_grid))
    count, _ = indicators.consensus_count(binaries)
    return count


@cli.command(name="indicators")
@click.option("--probs", "probs_path", required=True, type=click.Path())
@click.option("--classes", "classes_path", required=True, type=click.Path())
@click.option("--consensus-dir", type=click.Path(), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--tile-id", default="tile")
def indicators_cmd(probs_path, classes_path, consensus_dir, out_dir, tile_id):
    """Aggregate one tile's outputs into 500 m indicator layers."""
    t0 = time.perf_counter()
    probs = _read_raster(probs_path, "probability")
    classes = _read_raster(classes_path, "class")
    consensus10 = _load_consensus(consensus_dir, probs.grid) if consensus_dir else None
    tile_indicators = indicators.aggregate_tile(probs, classes, consensus10)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, values in sorted(tile_indicators.layers.items()):
        write_cog(
            out_dir / f"{name}.tif",
            Raster(tile_indicators.grid, values.astype(np.float32), np.nan),
        )
    indicators.write_cell_table(tile_indicators, out_dir / "cells.parquet")
    write_sidecar(out_dir / "cells.parquet", inputs=[str(probs_path), str(classes_path)])
    _log_stage(tile_id, "indicators", time.perf_counter() - t0, probs.values.size)


def _load_tile_indicators(indicator_dir) -> indicators.TileIndicators:
    indicator_dir = Path(indicator_dir)
    layers = {}
    grid = None
    for name in INDICATOR_LAYER_NAMES:
        path = indicator_dir / f"{name}.tif"
        if not path.exists():
            continue
        raster = read_cog(path)
        layers[name] = raster.values.astype(np.float64)
        grid = raster.grid
    if grid is None:
        raise InputError(f"no indicator layers found in {indicator_dir}")
    from .grids import make_global_grid

    coarse = make_global_grid()
    r0, _ = coarse.index_of(coarse.min_lon, grid.max_lat - grid.pixel_height / 2)
    _, c0 = coarse.index_of(grid.min_lon + grid.pixel_width / 2, coarse.max_lat)
    window = (
        (int(r0), int(r0) + grid.height),
        (int(c0), int(c0) + grid.width),
    )
    return indicators.TileIndicators(window=window, grid=grid, layers=layers)


def _load_hulls(centroids_path) -> list[CoverageHull]:
    path = Path(centroids_path)
    if not path.exists():
        raise InputError(f"ground-truth centroid file not found: {path}")
    data = json.loads(path.read_text())
    return coverage_hulls({country: np.asarray(pts) for country, pts in data.items()})


def _training_cells(cells_paths, gt_path, centroids_path, crop_filter, cap, seed):
    records = []
    for path in cells_paths:
        records.extend(indicators.read_cell_table(path))
    gt_cells = _read_raster(gt_path, "ground-truth cell")
    hulls = _load_hulls(centroids_path)
    cells = confidence.build_training_set(records, gt_cells, hulls, crop_filter)
    return confidence.balanced_subsample(cells, cap=cap, seed=seed)


@cli.group(name="confidence")
def confidence_group():
    """Confidence model training, evaluation, and products."""


@confidence_group.command(name="train")
@click.option("--cells", "cells_paths", multiple=True, required=True, type=click.Path())
@click.option("--gt-cells", "gt_path", required=True, type=click.Path())
@click.option("--gt-centroids", "centroids_path", required=True, type=click.Path())
@click.option("--kind", default="random_forest", type=click.Choice(confidence.MODEL_KINDS))
@click.option("--feature-set", default="model_only", type=click.Choice(sorted(indicators.FEATURE_SETS)))
@click.option("--filter", "crop_filter", default="le2", type=click.Choice(sorted(confidence.CROP_FILTERS)))
@click.option("--cap", default=confidence.SUBSAMPLE_CAP, show_default=True)
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None)
def confidence_train(cells_paths, gt_path, centroids_path, kind, feature_set, crop_filter, cap, seed, out_path, report_path):
    """Build the training set, fit a model, and write the artifact + CV report."""
    cells = _training_cells(cells_paths, gt_path, centroids_path, crop_filter, cap, seed)
    model = confidence.train_confidence_model(cells, kind, feature_set, seed, crop_filter)
    confidence.save_model(model, out_path)
    report = confidence.cross_validate(cells, kind, feature_set, seed=seed)
    text = report.summary()
    click.echo(text)
    if report_path:
        Path(report_path).write_text(text + "\n")
    write_sidecar(out_path, seed=seed, n_training_cells=len(cells))


@confidence_group.command(name="evaluate")
@click.option("--cells", "cells_paths", multiple=True, required=True, type=click.Path())
@click.option("--gt-cells", "gt_path", required=True, type=click.Path())
@click.option("--gt-centroids", "centroids_path", required=True, type=click.Path())
@click.option("--kind", default="random_forest", type=click.Choice(confidence.MODEL_KINDS))
@click.option("--feature-set", default="model_only", type=click.Choice(sorted(indicators.FEATURE_SETS)))
@click.option("--filter", "crop_filter", default="le2", type=click.Choice(sorted(confidence.CROP_FILTERS)))
@click.option("--mode", default="cv", type=click.Choice(["cv", "loco"]))
@click.option("--cap", default=confidence.SUBSAMPLE_CAP, show_default=True)
@click.option("--seed", default=0, type=int)
def confidence_evaluate(cells_paths, gt_path, centroids_path, kind, feature_set, crop_filter, mode, cap, seed):
    """Cross-validate (stratified k-fold or LOCO) on the training set."""
    cells = _training_cells(cells_paths, gt_path, centroids_path, crop_filter, cap, seed)
    if mode == "cv":
        click.echo(confidence.cross_validate(cells, kind, feature_set, seed=seed).summary())
    else:
        click.echo(confidence.loco(cells, kind, feature_set, seed=seed).summary())


@confidence_group.command(name="apply")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--indicators", "indicator_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def confidence_apply(model_path, indicator_dir, out_path):
    """Score active cells of one indicator tile into a confidence raster."""
    if not Path(model_path).exists():
        raise InputError(f"model artifact not found: {model_path}")
    model = confidence.load_model(model_path)
    tile_indicators = _load_tile_indicators(indicator_dir)
    conf = confidence.apply_confidence(model, tile_indicators)
    write_cog(out_path, conf)
    write_sidecar(out_path, inputs=[str(model_path), str(indicator_dir)])


@confidence_group.command(name="retention")
@click.option("--fields", "fields_path", required=True, type=click.Path())
@click.option("--confidence", "conf_path", required=True, type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default=None)
def confidence_retention(fields_path, conf_path, out_path):
    """Retention-vs-threshold table for a field collection."""
    polys = read_fields(fields_path)
    conf = _read_raster(conf_path, "confidence")
    rows = confidence.retention_curve(polys, conf)
    lines = ["threshold,fields_retained,area_retained_m2,fields_fraction,area_fraction"]
    for row in rows:
        lines.append(
            f"{row['threshold']:.2f},{row['fields_retained']},{row['area_retained_m2']:.1f},"
            f"{row['fields_fraction']:.6f},{row['area_fraction']:.6f}"
        )
    text = "\n".join(lines)
    click.echo(text)
    if out_path:
        Path(out_path).write_text(text + "\n")


@cli.command(name="filter")
@click.option("--fields", "fields_path", required=True, type=click.Path())
@click.option("--confidence", "conf_path", required=True, type=click.Path())
@click.option("--threshold", default=0.4, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def filter_cmd(fields_path, conf_path, threshold, out_path):
    """Keep fields whose centroid-cell confidence is >= threshold."""
    polys = read_fields(fields_path)
    conf = _read_raster(conf_path, "confidence")
    kept = confidence.threshold_filter_polygons(polys, conf, threshold)
    write_fields(kept, out_path)
    write_sidecar(out_path, threshold=threshold, n_in=len(polys), n_kept=len(kept))
    click.echo(f"retained {len(kept)} of {len(polys)} fields at conf >= {threshold}")


@cli.group(name="evaluate")
def evaluate_group():
    """Accuracy assessment and shape statistics."""


@evaluate_group.command(name="pixels")
@click.option("--pred", "pred_path", required=True, type=click.Path())
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--region", "region_path", required=True, type=click.Path())
@click.option("--confidence", "conf_path", type=click.Path(), default=None)
@click.option("--threshold", default=0.4, show_default=True)
@click.option("--region-id", default="region")
@click.option("--out", "out_path", type=click.Path(), default=None)
def evaluate_pixels(pred_path, gt_path, region_path, conf_path, threshold, region_id, out_path):
    """Pixel precision/recall/F1/IoU, optionally with the filtered variant."""
    pred = _read_raster(pred_path, "prediction")
    gt = _read_raster(gt_path, "ground-truth")
    region = _read_raster(region_path, "region-mask")
    reports = [evaluation.pixel_metrics(pred, gt, region, region_id=region_id)]
    if conf_path:
        conf = _read_raster(conf_path, "confidence")
        filtered = evaluation.apply_confidence_filter(pred, conf, threshold)
        reports.append(
            evaluation.pixel_metrics(
                filtered, gt, region, region_id=region_id, variant=f"conf>={threshold}"
            )
        )
    click.echo(evaluation.REPORT_HEADER)
    for report in reports:
        click.echo(report.row())
    if out_path:
        Path(out_path).write_text(json.dumps([r.to_dict() for r in reports], indent=2))


@evaluate_group.command(name="recall")
@click.option("--pred", "pred_path", required=True, type=click.Path())
@click.option("--gt", "gt_path", required=True, type=click.Path())
@click.option("--gt-centroids", "centroids_path", required=True, type=click.Path())
def evaluate_recall(pred_path, gt_path, centroids_path):
    """Hull-restricted pixel recall."""
    pred = _read_raster(pred_path, "prediction")
    gt = _read_raster(gt_path, "ground-truth")
    hulls = _load_hulls(centroids_path)
    value = evaluation.hull_recall(pred, gt, hulls)
    click.echo(f"hull-restricted recall: {value:.4f}")


@evaluate_group.command(name="shapes")
@click.option("--fields", "fields_path", required=True, type=click.Path())
@click.option("--crs", default="EPSG:32735", show_default=True)
@click.option("--limit", default=10, show_default=True)
def evaluate_shapes(fields_path, crs, limit):
    """Per-polygon metric shape statistics (first N polygons)."""
    polys = read_fields(fields_path)
    click.echo(f"{'id':<18} {'area_ha':>10} {'perim_m':>10} {'pp':>7} {'si':>7} {'fd':>7}")
    for poly in polys[:limit]:
        stats = evaluation.shape_metrics(poly, crs)
        click.echo(
            f"{poly.id:<18} {stats.area_ha:>10.4f} {stats.perimeter_m:>10.1f} "
            f"{stats.polsby_popper:>7.4f} {stats.shape_index:>7.4f} "
            f"{stats.fractal_dimension:>7.4f}"
        )


@evaluate_group.command(name="distribution")
@click.option("--fields", "fields_path", required=True, type=click.Path())
@click.option("--crs", default="EPSG:32735", show_default=True)
@click.option("--sample", default=500_000, show_default=True)
@click.option("--seed", default=0, type=int)
def evaluate_distribution(fields_path, crs, sample, seed):
    """Collection totals and median shape statistics."""
    polys = read_fields(fields_path)
    summary = evaluation.distribution_summary(polys, crs, sample_size=sample, seed=seed)
    for key in sorted(summary):
        click.echo(f"{key}: {summary[key]}")


def _run_tile(tile: dict, cfg: PipelineConfig, out_root: Path) -> str:
    tile_id = tile["tile_id"]
    tile_dir = out_root / "tiles" / tile_id
    done_marker = tile_dir / ".complete"
    if done_marker.exists():
        logger.info("tile=%s stage=skip reason=already-complete", tile_id)
        return tile_id
    tile_dir.mkdir(parents=True, exist_ok=True)

    season_paths = {}
    for season in ("planting", "harvest"):
        manifest_key = f"scenes_{season}"
        if manifest_key in tile:
            t0 = time.perf_counter()
            scenes = compositing.load_manifest(tile[manifest_key])
            comp = compositing.median_composite(scenes, cfg.cloud_threshold)
            # composites carry NaN nodata; the synthetic stack treats NaN as 0
            comp_path = tile_dir / f"{season}.tif"
            write_cog(comp_path, comp)
            season_paths[season] = comp_path
            _log_stage(tile_id, f"composite-{season}", time.perf_counter() - t0, comp.values.size)
        else:
            season_paths[season] = tile[season]

    t0 = time.perf_counter()
    probs, classes = _stitch_tile(
        season_paths["planting"], season_paths["harvest"], cfg.backend, stitching.DEFAULT_BOA_OFFSET
    )
    write_cog(tile_dir / "probabilities.tif", probs)
    write_cog(tile_dir / "classes.tif", classes)
    _log_stage(tile_id, "stitch", time.perf_counter() - t0, classes.values.size)

    t0 = time.perf_counter()
    polys = vectorizing.extract_fields(classes, cfg.min_pixels, tile_id=tile_id, year=cfg.year)
    if cfg.adm0:
        vectorizing.assign_country(polys, _read_raster(cfg.adm0, "ADM0"))
    write_fields(polys, tile_dir / "fields.parquet")
    _log_stage(tile_id, "vectorize", time.perf_counter() - t0, classes.values.size)

    t0 = time.perf_counter()
    consensus10 = _load_consensus(cfg.consensus_dir, probs.grid) if cfg.consensus_dir else None
    tile_indicators = indicators.aggregate_tile(probs, classes, consensus10)
    ind_dir = tile_dir / "indicators"
    ind_dir.mkdir(exist_ok=True)
    for name, values in sorted(tile_indicators.layers.items()):
        write_cog(ind_dir / f"{name}.tif", Raster(tile_indicators.grid, values.astype(np.float32), np.nan))
    indicators.write_cell_table(tile_indicators, ind_dir / "cells.parquet")
    _log_stage(tile_id, "indicators", time.perf_counter() - t0, probs.values.size)

    done_marker.write_text("")
    return tile_id


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--parallelism", default=None, type=int, help="Override config/env workers.")
@click.option("--resume", is_flag=True, help="Skip tiles marked complete.")
def run(config_path, parallelism, resume):
    """Run composite -> stitch -> vectorize -> indicators over all tiles."""
    if not Path(config_path).exists():
        raise InputError(f"config not found: {config_path}")
    cfg = PipelineConfig.load(config_path)
    if not cfg.tiles:
        raise InputError("config lists no tiles")
    workers = parallelism if parallelism else cfg.workers
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    if not resume:
        for tile in cfg.tiles:
            marker = out_root / "tiles" / tile["tile_id"] / ".complete"
            if marker.exists():
                marker.unlink()

    completed, failed = [], {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {pool.submit(_run_tile, tile, cfg, out_root): tile for tile in cfg.tiles}
        for future in concurrent.futures.as_completed(futures):
            tile = futures[future]
            try:
                completed.append(future.result())
            except Exception as exc:  # noqa: BLE001 - isolate per-tile failures
                logger.error("tile=%s stage=run failed: %s", tile["tile_id"], exc)
                failed[tile["tile_id"]] = str(exc)

    # deterministic merge of per-tile field collections
    merged = []
    for tile in cfg.tiles:
        tile_id = tile["tile_id"]
        if tile_id not in completed:
            continue
        merged.extend(read_fields(out_root / "tiles" / tile_id / "fields.parquet"))
    merged.sort(key=lambda p: (p.tile_id, p.id))
    write_fields(merged, out_root / "fields.parquet")
    write_sidecar(out_root / "fields.parquet", cfg, n_fields=len(merged))

    manifest = {
        "completed": sorted(completed),
        "failed": {k: failed[k] for k in sorted(failed)},
        "config_hash": cfg.config_hash(),
    }
    (out_root / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if failed:
        raise PartialFailure(
            f"{len(failed)} of {len(cfg.tiles)} tiles failed; see run_manifest.json"
        )
    click.echo(f"completed {len(completed)} tiles, {len(merged)} fields")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except PartialFailure as exc:
        print(f"partial failure: {exc}", file=sys.stderr)
        return 3
    except click.exceptions.Abort:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
