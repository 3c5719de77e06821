"""Sentinel-2 Level-2A ingest: product reading, 10 m resampling, tile cropping
and cloud/artifact screening."""

import os
import re
import zipfile
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from functools import lru_cache
from glob import glob
from typing import NamedTuple, Optional

import numpy as np
import rasterio
from affine import Affine
from pyproj import Transformer

from .errors import CorruptProductError, CoverageError, GeoReferenceError
from .resample import upsample_bilinear, upsample_nearest

# Band 10 (cirrus) is empty in Level-2A products and is dropped.
BAND_ORDER = ("B01", "B02", "B03", "B04", "B05", "B06",
              "B07", "B08", "B8A", "B09", "B11", "B12")
NATIVE_RESOLUTION = {
    "B01": 60, "B02": 10, "B03": 10, "B04": 10, "B05": 20, "B06": 20,
    "B07": 20, "B08": 10, "B8A": 20, "B09": 60, "B11": 20, "B12": 20,
}
TILE_SIZE = 120
TILE_RESOLUTION = 10

# Scene classification codes counted against a tile: cloud medium/high
# probability, thin cirrus, snow/ice.
SCL_CLOUD_CLASSES = (8, 9, 10, 11)
MAX_CLOUD_FRACTION = 0.05

_TIME_RE = re.compile(r"_(\d{8}T\d{6})_")
_BAND_FILE_RE = re.compile(r"_(B\d[\dA]|SCL)_(10|20|60)m\.(jp2|tif|tiff)$", re.IGNORECASE)


@dataclass
class S2Scene:
    bands: dict
    resolution: dict
    transform: Affine  # 10 m pixel grid anchored at the scene's upper-left corner
    crs: str
    scene_classification: np.ndarray
    scl_resolution: int
    acquisition_time: datetime
    product_id: str = ""

    def band_transform(self, band):
        res = self.resolution[band] if band != "SCL" else self.scl_resolution
        return self.transform @ Affine.scale(res / TILE_RESOLUTION)

    @property
    def shape(self):
        """Scene size in 10 m pixels."""
        b = self.bands["B02"]
        f = self.resolution["B02"] // TILE_RESOLUTION
        return b.shape[0] * f, b.shape[1] * f


@dataclass
class Sentinel2Tile:
    data: np.ndarray
    center: tuple
    acquisition_time: Optional[datetime] = None
    station_id: Optional[str] = None
    resolution: int = TILE_RESOLUTION

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (len(BAND_ORDER), TILE_SIZE, TILE_SIZE):
            raise ValueError(f"Sentinel-2 tile must be 12x120x120, got {self.data.shape}")


class ScreenResult(NamedTuple):
    accepted: bool
    reason: str
    detail: str = ""


def _product_files(path):
    if os.path.isdir(path):
        return sorted(glob(os.path.join(path, "**", "*.*"), recursive=True))
    if zipfile.is_zipfile(path):
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
        return [f"/vsizip/{os.path.abspath(path)}/{n}" for n in sorted(names)]
    raise CorruptProductError(f"{path}: not a product directory or zip archive")


def _parse_time(path, files):
    m = _TIME_RE.search(os.path.basename(os.path.normpath(path)))
    if m is None:
        for f in files:
            m = _TIME_RE.search(os.path.basename(f))
            if m:
                break
    if m is None:
        raise CorruptProductError(f"{path}: cannot determine acquisition time")
    return datetime.strptime(m.group(1), "%Y%m%dT%H%M%S").replace(tzinfo=timezone.utc)


def load_s2_scene(path):
    """Read a Level-2A product (``.SAFE`` directory or zip) into an ``S2Scene``.

    Each of the 12 usable bands is read at its native resolution from the
    ``R10m``/``R20m``/``R60m`` image folders; the scene classification layer
    is taken at 20 m.
    """
    files = _product_files(path)
    found = {}
    for f in files:
        m = _BAND_FILE_RE.search(f)
        if m:
            found.setdefault((m.group(1).upper(), int(m.group(2))), f)

    bands, resolution = {}, {}
    transform = crs = None
    for band in BAND_ORDER:
        res = NATIVE_RESOLUTION[band]
        src_path = found.get((band, res))
        if src_path is None:
            raise CorruptProductError(f"{path}: band {band} at {res} m is missing")
        with rasterio.open(src_path) as src:
            if src.crs is None or src.transform == Affine.identity():
                raise GeoReferenceError(f"{src_path}: geo-reference missing")
            t10 = src.transform @ Affine.scale(TILE_RESOLUTION / res)
            if transform is None:
                transform, crs = t10, src.crs.to_string()
            elif not t10.almost_equals(transform) or src.crs.to_string() != crs:
                raise CorruptProductError(f"{src_path}: footprint differs from other bands")
            bands[band] = src.read(1)
            resolution[band] = res

    extent = {b: bands[b].shape[0] * resolution[b] for b in BAND_ORDER}
    if len(set(extent.values())) != 1:
        raise CorruptProductError(f"{path}: band extents disagree {extent}")

    scl_path = found.get(("SCL", 20)) or found.get(("SCL", 60))
    if scl_path is None:
        raise CorruptProductError(f"{path}: scene classification layer missing")
    with rasterio.open(scl_path) as src:
        scl = src.read(1)
        scl_res = int(round(src.transform.a))

    return S2Scene(bands=bands, resolution=resolution, transform=transform, crs=crs,
                   scene_classification=scl, scl_resolution=scl_res,
                   acquisition_time=_parse_time(path, files),
                   product_id=os.path.basename(os.path.normpath(path)))


def write_s2_product(root, bands, transform, crs, scene_classification,
                     acquisition_time, tile_id="T32TNS", driver="GTiff"):
    """Write band rasters in the Level-2A directory layout.

    ``bands`` maps band id to a raster at that band's native resolution and
    ``transform`` is the 10 m affine of the upper-left corner. Returns the
    path of the ``.SAFE`` directory.
    """
    stamp = acquisition_time.strftime("%Y%m%dT%H%M%S")
    name = f"S2A_MSIL2A_{stamp}_N0213_R065_{tile_id}_{stamp}.SAFE"
    ext = "jp2" if driver == "JP2OpenJPEG" else "tif"
    img_dir = os.path.join(root, name, "GRANULE", f"L2A_{tile_id}_{stamp}", "IMG_DATA")
    lossless = {"QUALITY": "100", "REVERSIBLE": "YES"} if driver == "JP2OpenJPEG" else {}
    layers = [(b, NATIVE_RESOLUTION[b], bands[b]) for b in BAND_ORDER if b in bands]
    layers.append(("SCL", 20, scene_classification))
    for band, res, data in layers:
        folder = os.path.join(img_dir, f"R{res}m")
        os.makedirs(folder, exist_ok=True)
        data = np.asarray(data)
        out = os.path.join(folder, f"{tile_id}_{stamp}_{band}_{res}m.{ext}")
        with rasterio.open(out, "w", driver=driver, width=data.shape[1], height=data.shape[0],
                           count=1, dtype=data.dtype, crs=crs,
                           transform=transform @ Affine.scale(res / TILE_RESOLUTION),
                           **lossless) as dst:
            dst.write(data, 1)
    return os.path.join(root, name)


def resample_to_10m(scene):
    """Bring every band (bilinear) and the classification layer (nearest) to 10 m."""
    bands = {b: upsample_bilinear(scene.bands[b], scene.resolution[b] // TILE_RESOLUTION)
             for b in BAND_ORDER}
    scl = upsample_nearest(scene.scene_classification, scene.scl_resolution // TILE_RESOLUTION)
    return replace(scene, bands=bands, resolution={b: TILE_RESOLUTION for b in BAND_ORDER},
                   scene_classification=scl, scl_resolution=TILE_RESOLUTION)


@lru_cache(maxsize=32)
def _transformer(src, dst):
    return Transformer.from_crs(src, dst, always_xy=True)


def lonlat_to_pixel(scene, lat, lon):
    """Fractional 10 m (row, col) of a geographic point in the scene grid."""
    x, y = _transformer("EPSG:4326", scene.crs).transform(lon, lat)
    col, row = ~scene.transform @ (x, y)
    return row, col


def pixel_to_lonlat(scene, row, col):
    """Geographic (lat, lon) of fractional pixel positions (pixel centers at +0.5)."""
    x, y = scene.transform @ (np.asarray(col, float), np.asarray(row, float))
    lon, lat = _transformer(scene.crs, "EPSG:4326").transform(x, y)
    return lat, lon


def _window_origin(scene, center, size):
    if any(scene.resolution[b] != TILE_RESOLUTION for b in BAND_ORDER):
        raise ValueError("crop_centered needs all bands at 10 m; call resample_to_10m first")
    row, col = lonlat_to_pixel(scene, *center)
    r0 = int(np.floor(row)) - size // 2
    c0 = int(np.floor(col)) - size // 2
    h, w = scene.bands["B02"].shape
    if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise CoverageError(f"insufficient coverage: {size}px window at {center} "
                            f"leaves the {h}x{w} scene")
    return r0, c0


def crop_window(scene, r0, c0, size=TILE_SIZE):
    """Stack the ``size`` x ``size`` window at pixel offset (r0, c0) in band order."""
    return np.stack([np.asarray(scene.bands[b][r0:r0 + size, c0:c0 + size], dtype=np.float32)
                     for b in BAND_ORDER])


def crop_centered(scene, center, size=TILE_SIZE, station_id=None):
    """Cut the tile whose center pixel contains the (lat, lon) ``center``."""
    r0, c0 = _window_origin(scene, center, size)
    return Sentinel2Tile(crop_window(scene, r0, c0, size), center=tuple(center),
                         acquisition_time=scene.acquisition_time, station_id=station_id)


def crop_classification(scene, center, size=TILE_SIZE):
    """Scene-classification window aligned with ``crop_centered``."""
    r0, c0 = _window_origin(scene, center, size)
    return np.asarray(scene.scene_classification[r0:r0 + size, c0:c0 + size])


def screen_tile(tile, mask, max_cloud_fraction=MAX_CLOUD_FRACTION):
    data = tile.data if isinstance(tile, Sentinel2Tile) else np.asarray(tile)
    mask = np.asarray(mask)
    if mask.shape != data.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match tile {data.shape[-2:]}")
    if not np.isfinite(data).all():
        return ScreenResult(False, "non-finite data")
    empty = [BAND_ORDER[i] for i in range(data.shape[0]) if not data[i].any()]
    if empty:
        return ScreenResult(False, "all-zero band", empty[0])
    cloudy = np.isin(mask, SCL_CLOUD_CLASSES).mean()
    if cloudy > max_cloud_fraction:
        return ScreenResult(False, "cloud fraction", f"{cloudy:.3f} > {max_cloud_fraction}")
    return ScreenResult(True, "ok")


def save_tile(path, tile):
    stamp = tile.acquisition_time.isoformat() if tile.acquisition_time else ""
    np.savez(path, data=tile.data.astype(np.float32), center=np.asarray(tile.center, float),
             acquisition_time=stamp, station_id=tile.station_id or "")


def load_tile(path):
    with np.load(path) as z:
        stamp = str(z["acquisition_time"])
        return Sentinel2Tile(z["data"], center=tuple(z["center"].tolist()),
                             acquisition_time=datetime.fromisoformat(stamp) if stamp else None,
                             station_id=str(z["station_id"]) or None)
