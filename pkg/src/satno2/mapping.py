"""Dense NO2 maps by overlapping-tile inference, raster/image export and
per-location time series."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import rasterio
from affine import Affine

from .errors import ConfigurationError, CoverageError, DataGapError, StorageError
from .periods import parse_period
from .s2 import (BAND_ORDER, SCL_CLOUD_CLASSES, TILE_RESOLUTION, TILE_SIZE, crop_window,
                 pixel_to_lonlat, screen_tile, _transformer)
from .s5p import extract_patch

log = logging.getLogger(__name__)

STRIDE = 10
NODATA = -9999.0
DEFAULT_CMAP = "magma_r"


@dataclass(frozen=True)
class TilePlan:
    shape: tuple
    row_offsets: tuple
    col_offsets: tuple
    tile: int = TILE_SIZE
    stride: int = STRIDE

    @property
    def windows(self):
        return [(r, c) for r in self.row_offsets for c in self.col_offsets]

    def __len__(self):
        return len(self.row_offsets) * len(self.col_offsets)

    def cell_index(self, offset):
        """Map-cell index (per axis) holding the center of the window at ``offset``."""
        return (offset + self.tile // 2) // self.stride - self.first_cell

    @property
    def first_cell(self):
        return (self.tile // 2) // self.stride

    @property
    def map_shape(self):
        return (self.cell_index(self.row_offsets[-1]) + 1,
                self.cell_index(self.col_offsets[-1]) + 1)


def _axis_offsets(dim, tile, stride):
    offsets = list(range(0, dim - tile + 1, stride))
    if offsets[-1] != dim - tile:
        offsets.append(dim - tile)  # clamp the final window to the edge
    return tuple(offsets)


def plan_tiles(shape, tile=TILE_SIZE, stride=STRIDE):
    """Window origins at multiples of ``stride`` plus an edge-clamped final window."""
    h, w = shape
    if h < tile or w < tile:
        raise CoverageError(f"scene {h}x{w} is smaller than the {tile}px tile")
    if stride < 1:
        raise ValueError("stride must be positive")
    return TilePlan((h, w), _axis_offsets(h, tile, stride), _axis_offsets(w, tile, stride),
                    tile, stride)


@dataclass
class PredictionMap:
    values: np.ndarray  # µg/m³, NaN where masked
    transform: Affine
    crs: str
    period: str = "full"
    checkpoint_id: str = ""
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = ~np.isfinite(self.values)

    @property
    def cell_size(self):
        return abs(self.transform.a)


def predict_map(estimator, scene, grid=None, plan=None, period="full", checkpoint_id="",
                batch_size=32, max_cloud_fraction=0.05):
    """Predict every planned window and attribute it to the 100 m cell holding its center.

    ``scene`` must be resampled to 10 m. Windows failing screening or without
    resolvable column data leave their cell masked; cells hit by more than
    one window (edge-clamped windows) store the mean.
    """
    fusion = estimator.variant == "fusion"
    if fusion and grid is None:
        raise ConfigurationError("fusion model needs a Sentinel-5P grid for mapping")
    h, w = scene.bands[BAND_ORDER[0]].shape
    plan = plan or plan_tiles((h, w))
    total = np.zeros(plan.map_shape)
    hits = np.zeros(plan.map_shape, dtype=np.int64)
    half = plan.tile // 2
    batch, cells = [], []

    def flush():
        if batch:
            pred = estimator.predict(np.stack(batch))
            for (i, j), v in zip(cells, pred):
                total[i, j] += v
                hits[i, j] += 1
            batch.clear()
            cells.clear()

    skipped = {"screen": 0, "s5p": 0}
    for r0, c0 in plan.windows:
        data = crop_window(scene, r0, c0, plan.tile)
        verdict = screen_tile(data, scene.scene_classification[r0:r0 + plan.tile, c0:c0 + plan.tile],
                              max_cloud_fraction)
        if not verdict.accepted:
            skipped["screen"] += 1
            continue
        if fusion:
            lat, lon = pixel_to_lonlat(scene, r0 + half + 0.5, c0 + half + 0.5)
            try:
                patch = extract_patch(grid, (float(lat), float(lon)))
            except (CoverageError, DataGapError) as exc:
                log.debug("window (%d, %d): %s", r0, c0, exc)
                skipped["s5p"] += 1
                continue
            data = np.concatenate([data, patch.data])
        batch.append(data)
        cells.append((plan.cell_index(r0), plan.cell_index(c0)))
        if len(batch) >= batch_size:
            flush()
    flush()
    if any(skipped.values()):
        log.info("masked windows: %s", skipped)

    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(hits > 0, total / np.maximum(hits, 1), np.nan)
    first = plan.first_cell * plan.stride
    transform = scene.transform @ Affine.translation(first, first) @ Affine.scale(plan.stride)
    return PredictionMap(values, transform, scene.crs, period, checkpoint_id, hits == 0)


def write_map_raster(path, pmap):
    data = np.where(pmap.mask, NODATA, pmap.values).astype(np.float32)
    tmp = f"{path}.tmp.tif"
    try:
        with rasterio.open(tmp, "w", driver="GTiff", width=data.shape[1], height=data.shape[0],
                           count=1, dtype="float32", crs=pmap.crs, transform=pmap.transform,
                           nodata=NODATA) as dst:
            dst.write(data, 1)
            dst.update_tags(period=pmap.period, checkpoint=pmap.checkpoint_id, units="ug/m3")
        os.replace(tmp, path)
    except (OSError, rasterio.errors.RasterioIOError) as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def read_map_raster(path):
    with rasterio.open(path) as src:
        data = src.read(1)
        tags = src.tags()
        mask = data == src.nodata
        values = np.where(mask, np.nan, data.astype(np.float64))
        return PredictionMap(values, src.transform, src.crs.to_string(), tags.get("period", ""),
                             tags.get("checkpoint", ""), mask)


def render_map(pmap, stations=(), cmap=DEFAULT_CMAP, value_format="{:.1f}"):
    """Color-mapped figure; each station gets a red marker and its value in red text."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h, w = pmap.values.shape
    left, top = pmap.transform @ (0, 0)
    right, bottom = pmap.transform @ (w, h)
    fig, ax = plt.subplots(figsize=(6, 6))
    im = ax.imshow(np.ma.masked_array(pmap.values, pmap.mask), cmap=cmap,
                   extent=(left, right, bottom, top), vmin=0)
    fig.colorbar(im, ax=ax, label="NO$_2$ [µg/m³]")
    to_crs = _transformer("EPSG:4326", pmap.crs)
    for st in stations:
        x, y = to_crs.transform(st["lon"], st["lat"])
        ax.plot(x, y, "o", color="red", markersize=5)
        if st.get("value") is not None:
            ax.annotate(value_format.format(st["value"]), (x, y), xytext=(4, 4),
                        textcoords="offset points", color="red", fontsize=9)
    ax.set_title(f"Predicted surface NO$_2$ ({pmap.period})")
    ax.set_xticks([])
    ax.set_yticks([])
    return fig


def export_map(pmap, raster_path, image_path=None, stations=(), cmap=DEFAULT_CMAP):
    """Write the georeferenced raster and, optionally, the rendered image."""
    if pmap.values.size == 0:
        raise ValueError("cannot export an empty map")
    write_map_raster(raster_path, pmap)
    if image_path is not None:
        import matplotlib.pyplot as plt
        fig = render_map(pmap, stations, cmap)
        try:
            fig.savefig(image_path, dpi=120, bbox_inches="tight")
        except OSError as exc:
            raise StorageError(f"cannot write {image_path}: {exc}") from exc
        finally:
            plt.close(fig)
    return raster_path, image_path


def predict_series(estimator, periods, inputs):
    """Chronological ``(period, prediction)`` pairs for one location.

    ``inputs`` maps a period label to an (C, 120, 120) input stack; periods
    without inputs yield ``None`` rather than failing.
    """
    ordered = sorted(periods, key=lambda p: parse_period(p).start)
    present = [p for p in ordered if inputs.get(p) is not None]
    preds = {}
    if present:
        x = np.stack([np.asarray(inputs[p], dtype=np.float32) for p in present])
        preds = dict(zip(present, estimator.predict(x).tolist()))
    return [(p, preds.get(p)) for p in ordered]


def write_series(path, series, mae=None):
    """Tab-separated series with an optional ±MAE envelope."""
    lines = ["period\tprediction\tlower\tupper"]
    for period, value in series:
        if value is None:
            lines.append(f"{period}\tNA\tNA\tNA")
        elif mae is None:
            lines.append(f"{period}\t{value:.4f}\t\t")
        else:
            lines.append(f"{period}\t{value:.4f}\t{value - mae:.4f}\t{value + mae:.4f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
