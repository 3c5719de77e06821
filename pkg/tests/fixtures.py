"""Small synthetic raw products for the ingest tests."""

from datetime import datetime, timezone

import numpy as np
import pandas as pd
from affine import Affine
from pyproj import Transformer

from satno2.s2 import BAND_ORDER, NATIVE_RESOLUTION, write_s2_product
from satno2.s5p import write_s5p_product

CRS = "EPSG:32632"
UTC = timezone.utc


def scene_transform(center, size10):
    x, y = Transformer.from_crs("EPSG:4326", CRS, always_xy=True).transform(center[1], center[0])
    x0 = round(x / 60.0) * 60.0 - size10 * 5
    y0 = round(y / 60.0) * 60.0 + size10 * 5
    return Affine(10.0, 0.0, x0, 0.0, -10.0, y0)


def native_bands(rng, size10):
    bands = {}
    for b in BAND_ORDER:
        n = size10 // (NATIVE_RESOLUTION[b] // 10)
        bands[b] = rng.integers(100, 4000, size=(n, n), dtype=np.uint16)
    return bands


def write_scene(root, center, when, size10=360, seed=0, cloud_box=None):
    rng = np.random.default_rng(seed)
    scl = np.full((size10 // 2, size10 // 2), 4, np.uint8)
    if cloud_box is not None:
        r0, r1, c0, c1 = cloud_box  # 20 m pixels
        scl[r0:r1, c0:c1] = 9
    return write_s2_product(root, native_bands(rng, size10), scene_transform(center, size10),
                            CRS, scl, when)


def write_swath(path, when, lat=(46.5, 49.5), lon=(9.5, 13.5), n=40000, seed=0, level=4e-5):
    rng = np.random.default_rng(seed)
    la, lo = rng.uniform(*lat, n), rng.uniform(*lon, n)
    no2 = level + 1e-5 * np.sin(la) + rng.normal(0, 2e-6, n)
    qa = np.where(rng.uniform(size=n) < 0.9, 1.0, 0.5)
    write_s5p_product(path, la, lo, no2, qa, when)


def write_station_file(path, stations, start="2019-01-01", hours=24 * 31, sep=","):
    frames = []
    for i, (sid, (lat, lon)) in enumerate(stations.items()):
        ts = pd.date_range(start, periods=hours, freq="h", tz="UTC")
        frames.append(pd.DataFrame({
            "AirQualityStation": sid, "Latitude": lat, "Longitude": lon,
            "DatetimeBegin": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "Concentration": 20.0 + 5 * i + np.sin(np.arange(hours) / 24.0),
            "Validity": 1, "Verification": 1}))
    pd.concat(frames).to_csv(path, index=False, sep=sep)


def t(*args):
    return datetime(*args, tzinfo=UTC)
