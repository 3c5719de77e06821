"""End-to-end ingest: station targets, Sentinel-5P period grids and
Sentinel-2 tiles joined into a sample archive with a filter report."""

import glob
import logging
import os
import re
from collections import Counter, defaultdict

import pandas as pd

from .dataset import ArchiveWriter, build_samples
from .errors import CoverageError, DataGapError, DataError, EmptyDatasetError
from .periods import full_period, parse_period, period_of
from .s2 import crop_centered, crop_classification, load_s2_scene, resample_to_10m, screen_tile
from .s5p import average_products, extract_patch, filter_qa, read_s5p_product, save_grid
from .stations import (aggregate_targets, drop_negative, filter_quality, parse_station_file,
                       station_locations)

log = logging.getLogger(__name__)

_S2_TIME = re.compile(r"_(\d{8}T\d{6})_")


def find_s2_products(directory):
    """``*.SAFE`` directories and ``.zip`` archives, ordered by acquisition time."""
    paths = sorted(glob.glob(os.path.join(directory, "*.SAFE")) +
                   glob.glob(os.path.join(directory, "*.zip")))

    def key(p):
        m = _S2_TIME.search(os.path.basename(p))
        return (m.group(1) if m else "", p)
    return sorted(paths, key=key)


def find_s5p_products(directory):
    return sorted(glob.glob(os.path.join(directory, "*.nc")) +
                  glob.glob(os.path.join(directory, "*.h5")))


def ingest_stations(paths, settings, report):
    frames, n_rejects = [], 0
    for p in paths:
        records, rejects = parse_station_file(p)
        frames.append(records)
        n_rejects += len(rejects)
    records = pd.concat(frames, ignore_index=True) if frames else None
    report["station_rows"] = (0 if records is None else len(records)) + n_rejects
    report["station_rows_malformed"] = n_rejects
    if records is None or records.empty:
        raise EmptyDatasetError("no station records")
    span = full_period(settings.study_span)
    records = records[(records["timestamp"] >= span.start) & (records["timestamp"] < span.end)]
    report["station_rows_in_span"] = len(records)
    records = filter_quality(records)
    report["station_rows_quality_ok"] = len(records)
    records = drop_negative(records)
    report["station_rows_nonnegative"] = len(records)
    targets = aggregate_targets(records, settings.regime, settings.study_span, settings.min_coverage)
    report["targets"] = len(targets)
    if not targets:
        raise EmptyDatasetError("every station record or period was filtered out")
    return targets, station_locations(records)


def ingest_s5p(paths, settings, periods, grid_dir, report):
    products = [read_s5p_product(p) for p in paths]
    report["s5p_products"] = len(products)
    report["s5p_observations"] = sum(len(p) for p in products)
    report["s5p_observations_qa_ok"] = sum(len(filter_qa(p, settings.qa_threshold)) for p in products)
    grids = {}
    for label in sorted(periods):
        try:
            grid = average_products(products, parse_period(label, settings.study_span),
                                    settings.grid_origin, settings.grid_extent,
                                    settings.qa_threshold)
        except CoverageError as exc:
            log.info("%s", exc)
            continue
        grids[label] = grid
        if grid_dir:
            os.makedirs(grid_dir, exist_ok=True)
            save_grid(os.path.join(grid_dir, f"no2_{label}.tif"), grid)
    report["s5p_grids"] = len(grids)
    return grids


def ingest_s2(paths, settings, wanted, locations, report):
    """Crop and screen one tile per (station, period); earlier acquisitions win."""
    tiles = {}
    reasons = Counter()
    report["s2_scenes"] = len(paths)
    for path in paths:
        try:
            scene = resample_to_10m(load_s2_scene(path))
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            reasons["unreadable scene"] += 1
            continue
        t = scene.acquisition_time
        if t not in full_period(settings.study_span):
            reasons["scene outside study span"] += 1
            continue
        label = period_of(t, settings.regime, settings.study_span).label
        for sid in sorted(wanted.get(label, ())):
            if (sid, label) in tiles:
                continue
            try:
                tile = crop_centered(scene, locations[sid], station_id=sid)
            except CoverageError:
                reasons["outside scene"] += 1
                continue
            verdict = screen_tile(tile, crop_classification(scene, locations[sid]),
                                  settings.max_cloud_fraction)
            if not verdict.accepted:
                reasons[verdict.reason] += 1
                continue
            tiles[(sid, label)] = tile
    report["s2_tiles_accepted"] = len(tiles)
    report["s2_tiles_rejected"] = dict(sorted(reasons.items()))
    return tiles


def run_ingest(config, archive_dir, grid_dir=None):
    settings, data = config.ingest, config.data
    report = {"regime": settings.regime}
    for name, p in (("s2_dir", data.s2_dir), ("s5p_dir", data.s5p_dir)):
        if not p or not os.path.isdir(p):
            raise FileNotFoundError(f"data.{name} {p!r} is not a directory")
    for p in data.stations:
        if not os.path.isfile(p):
            raise FileNotFoundError(f"station file {p!r} not found")

    targets, locations = ingest_stations(data.stations, settings, report)
    wanted = defaultdict(set)
    for t in targets:
        if t.station_id in locations:
            wanted[t.period].add(t.station_id)

    grids = ingest_s5p(find_s5p_products(data.s5p_dir), settings, wanted, grid_dir, report)
    tiles = ingest_s2(find_s2_products(data.s2_dir), settings, wanted, locations, report)

    patches, gaps = {}, Counter()
    for (sid, label) in sorted(tiles):
        grid = grids.get(label)
        if grid is None:
            gaps["no grid for period"] += 1
            continue
        try:
            patches[(sid, label)] = extract_patch(grid, locations[sid], settings.patch_extent_km)
        except (CoverageError, DataGapError) as exc:
            gaps[type(exc).__name__] += 1
    report["s5p_patches"] = len(patches)
    report["s5p_patches_failed"] = dict(sorted(gaps.items()))

    samples = build_samples(tiles.items(), patches.items(), targets, variant="image-only")
    report["samples"] = len(samples)
    report["samples_with_s5p"] = sum(s.s5p is not None for s in samples)
    if not samples:
        raise EmptyDatasetError("ingest produced no samples")
    with ArchiveWriter(archive_dir, {"ingest_report": report}) as writer:
        for s in samples:
            writer.add(s)
    return report
