"""Sentinel-5P Level-2 NO2 processing: quality filtering, gridding to a
regular 0.05 degree lattice, count-weighted temporal averaging and patch
extraction around target locations."""

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone

import h5py
import numpy as np
import rasterio
from affine import Affine

from .errors import CorruptProductError, CoverageError, DataGapError
from .periods import Period, parse_period
from .resample import bilinear_sample

CELL_SIZE = 0.05
QA_THRESHOLD = 0.75
PATCH_SIZE = 120
PATCH_RESOLUTION_M = 10.0
PATCH_EXTENT_KM = 20.0
EARTH_RADIUS_M = 6371008.8
M_PER_DEG = math.pi * EARTH_RADIUS_M / 180.0

NO2_VARIABLE = "nitrogendioxide_tropospheric_column"
_EPOCH = datetime(2010, 1, 1, tzinfo=timezone.utc)


@dataclass
class S5PProduct:
    lat: np.ndarray
    lon: np.ndarray
    no2: np.ndarray  # mol/m^2
    qa: np.ndarray  # [0, 1]
    sensing_time: datetime
    name: str = ""

    def __post_init__(self):
        self.lat, self.lon, self.no2, self.qa = (
            np.asarray(a, dtype=np.float64).ravel() for a in (self.lat, self.lon, self.no2, self.qa))
        n = self.lat.size
        if not (self.lon.size == self.no2.size == self.qa.size == n):
            raise ValueError("observation arrays must have equal length")
        if n and (self.qa.min() < 0 or self.qa.max() > 1):
            raise ValueError("qa values must lie in [0, 1]")
        if n and (np.abs(self.lat).max() > 90 or np.abs(self.lon).max() > 180):
            raise ValueError("latitude/longitude out of range")

    def __len__(self):
        return self.lat.size


@dataclass
class NO2Grid:
    values: np.ndarray  # mean column density, NaN where missing
    counts: np.ndarray
    origin: tuple  # (lat, lon) of the south-west corner
    period: str
    start: datetime
    end: datetime
    cell_size: float = CELL_SIZE
    n_products: int = 1

    @property
    def missing(self):
        return self.counts == 0

    @property
    def shape(self):
        return self.values.shape

    def same_geometry(self, other):
        return (self.shape == other.shape and np.allclose(self.origin, other.origin, atol=1e-9)
                and abs(self.cell_size - other.cell_size) < 1e-12)


@dataclass
class Sentinel5PPatch:
    data: np.ndarray
    center: tuple
    source_period: str = "full"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.shape != (1, PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"Sentinel-5P patch must be 1x120x120, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("Sentinel-5P patch contains non-finite values")


def _read_var(ds):
    data = ds[()].astype(np.float64)
    fill = ds.attrs.get("_FillValue")
    if fill is not None:
        data[data == np.asarray(fill).astype(np.float64).item()] = np.nan
    data = data * float(np.asarray(ds.attrs.get("scale_factor", 1.0)).ravel()[0])
    return data + float(np.asarray(ds.attrs.get("add_offset", 0.0)).ravel()[0])


def read_s5p_product(path):
    """Read geolocation, tropospheric NO2 column and qa from a Level-2 file.

    Quality values stored on a 0-100 scale are rescaled to [0, 1]. Fill
    values and non-finite retrievals are dropped.
    """
    try:
        f = h5py.File(path, "r")
    except OSError as exc:
        raise CorruptProductError(f"{path}: {exc}") from exc
    with f:
        if "PRODUCT" not in f:
            raise CorruptProductError(f"{path}: no PRODUCT group")
        grp = f["PRODUCT"]
        try:
            lat, lon = _read_var(grp["latitude"]), _read_var(grp["longitude"])
            no2, qa = _read_var(grp[NO2_VARIABLE]), _read_var(grp["qa_value"])
        except KeyError as exc:
            raise CorruptProductError(f"{path}: missing variable {exc}") from exc
        stamp = f.attrs.get("time_coverage_start")
        if stamp is not None:
            stamp = stamp.decode() if isinstance(stamp, bytes) else str(stamp)
            sensing = datetime.fromisoformat(stamp.replace("Z", "+00:00"))
        elif "time" in grp:
            sensing = _EPOCH + timedelta(seconds=float(np.ravel(grp["time"][()])[0]))
        else:
            raise CorruptProductError(f"{path}: sensing time missing")
    ok = np.isfinite(lat) & np.isfinite(lon) & np.isfinite(no2) & np.isfinite(qa)
    qa = qa[ok]
    if qa.size and qa.max() > 1.0:
        qa = qa / 100.0
    return S5PProduct(lat[ok], lon[ok], no2[ok], np.clip(qa, 0.0, 1.0), sensing,
                      name=str(path))


def write_s5p_product(path, lat, lon, no2, qa, sensing_time, qa_scale=100):
    """Write a minimal Level-2 layout (used for fixtures and interchange).

    ``qa`` is given in [0, 1] and stored as unsigned bytes with a 0.01
    scale factor like the operational files.
    """
    with h5py.File(path, "w") as f:
        f.attrs["time_coverage_start"] = sensing_time.strftime("%Y-%m-%dT%H:%M:%SZ")
        grp = f.create_group("PRODUCT")
        shape = (1,) + np.shape(lat)
        grp["latitude"] = np.asarray(lat, np.float32).reshape(shape)
        grp["longitude"] = np.asarray(lon, np.float32).reshape(shape)
        v = grp.create_dataset(NO2_VARIABLE, data=np.asarray(no2, np.float64).reshape(shape))
        v.attrs["_FillValue"] = np.float64(9.96921e36)
        q = grp.create_dataset("qa_value", data=np.rint(np.asarray(qa) * qa_scale).astype(np.uint8).reshape(shape))
        q.attrs["scale_factor"] = np.float32(1.0 / qa_scale)
        grp["time"] = np.array([(sensing_time - _EPOCH).total_seconds()])


def filter_qa(product, threshold=QA_THRESHOLD):
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"qa threshold must lie in [0, 1], got {threshold}")
    keep = product.qa >= threshold
    return replace(product, lat=product.lat[keep], lon=product.lon[keep],
                   no2=product.no2[keep], qa=product.qa[keep])


def grid_shape(extent, cell_size=CELL_SIZE):
    lat_span, lon_span = extent
    if lat_span <= 0 or lon_span <= 0:
        raise ValueError(f"grid extent must be positive, got {extent}")
    return int(round(lat_span / cell_size)), int(round(lon_span / cell_size))


def grid_product(product, origin, extent, cell_size=CELL_SIZE):
    """Point-in-cell mean of a (qa-filtered) product on a regular lat/lon grid.

    ``origin`` is the south-west corner and ``extent`` the (lat, lon) span in
    degrees. Observations outside the extent are dropped.
    """
    nrows, ncols = grid_shape(extent, cell_size)
    rows = np.floor((product.lat - origin[0]) / cell_size).astype(np.int64)
    cols = np.floor((product.lon - origin[1]) / cell_size).astype(np.int64)
    inside = (rows >= 0) & (rows < nrows) & (cols >= 0) & (cols < ncols)
    flat = rows[inside] * ncols + cols[inside]
    counts = np.bincount(flat, minlength=nrows * ncols).reshape(nrows, ncols)
    sums = np.bincount(flat, weights=product.no2[inside], minlength=nrows * ncols)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums.reshape(nrows, ncols) / counts, np.nan)
    t = product.sensing_time
    return NO2Grid(values=values, counts=counts, origin=tuple(map(float, origin)),
                   period=t.strftime("%Y-%m-%d"), start=t, end=t, cell_size=cell_size)


def temporal_average(grids, period):
    """Count-weighted cellwise mean of ``grids`` labelled with ``period``.

    ``period`` is a ``Period`` or a label understood by ``parse_period``. A
    cell stays missing only if it is missing in every input.
    """
    grids = list(grids)
    if not grids:
        raise ValueError("temporal_average needs at least one grid")
    period = parse_period(period)
    ref = grids[0]
    for g in grids:
        if not g.same_geometry(ref):
            raise ValueError("grids have differing origin, shape or cell size")
        if g.start not in period or g.end > period.end:
            raise ValueError(f"grid {g.period} falls outside period {period.label}")
    counts = np.zeros(ref.shape, dtype=np.int64)
    total = np.zeros(ref.shape)
    for g in grids:
        counts += g.counts
        total += np.where(g.counts > 0, np.nan_to_num(g.values) * g.counts, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, total / counts, np.nan)
    return NO2Grid(values=values, counts=counts, origin=ref.origin, period=period.label,
                   start=period.start, end=period.end, cell_size=ref.cell_size,
                   n_products=sum(g.n_products for g in grids))


def _fill_isolated_gaps(block):
    """Inverse-distance fill of missing cells whose 8 neighbours are all present."""
    missing = np.isnan(block)
    if not missing.any():
        return block
    out = block.copy()
    h, w = block.shape
    for r, c in zip(*np.nonzero(missing)):
        num = den = 0.0
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w):
                    continue
                if missing[rr, cc]:
                    raise DataGapError(f"missing region larger than one cell near block cell ({r}, {c})")
                wgt = 1.0 / math.hypot(dr, dc)
                num += wgt * block[rr, cc]
                den += wgt
        if den == 0.0:
            raise DataGapError(f"missing cell ({r}, {c}) has no neighbours")
        out[r, c] = num / den
    return out


def patch_lattice(center, size=PATCH_SIZE, resolution_m=PATCH_RESOLUTION_M):
    """Latitudes (rows, north first) and longitudes (cols) of the 10 m patch lattice."""
    lat0, lon0 = center
    offsets = (np.arange(size) - (size - 1) / 2.0) * resolution_m
    lats = lat0 - offsets / M_PER_DEG
    lons = lon0 + offsets / (M_PER_DEG * math.cos(math.radians(lat0)))
    return lats, lons


def patch_values(grid, center, extent_km=PATCH_EXTENT_KM, size=PATCH_SIZE,
                 resolution_m=PATCH_RESOLUTION_M):
    """Bilinear values of ``grid`` on the ``size`` x ``size`` lattice around ``center``.

    Cell values are taken to sit at cell centres. The ``extent_km`` square
    around ``center`` must lie inside the grid; isolated missing cells in it
    are filled from their neighbours, larger gaps raise ``DataGapError``.
    """
    lat0, lon0 = center
    half = extent_km * 500.0
    dlat = half / M_PER_DEG
    dlon = half / (M_PER_DEG * math.cos(math.radians(lat0)))
    cs = grid.cell_size
    r_lo = math.floor((lat0 - dlat - grid.origin[0]) / cs)
    r_hi = math.floor((lat0 + dlat - grid.origin[0]) / cs)
    c_lo = math.floor((lon0 - dlon - grid.origin[1]) / cs)
    c_hi = math.floor((lon0 + dlon - grid.origin[1]) / cs)
    lats, lons = patch_lattice(center, size, resolution_m)
    rows = (lats - grid.origin[0]) / cs - 0.5
    cols = (lons - grid.origin[1]) / cs - 0.5
    # the block must also hold every interpolation neighbour of the lattice
    r_lo, r_hi = min(r_lo, math.floor(rows.min())), max(r_hi, math.floor(rows.max()) + 1)
    c_lo, c_hi = min(c_lo, math.floor(cols.min())), max(c_hi, math.floor(cols.max()) + 1)
    nrows, ncols = grid.shape
    if r_lo < 0 or c_lo < 0 or r_hi >= nrows or c_hi >= ncols:
        raise CoverageError(f"{extent_km} km window at {center} extends past the grid")
    block = _fill_isolated_gaps(grid.values[r_lo:r_hi + 1, c_lo:c_hi + 1])
    rows, cols = rows - r_lo, cols - c_lo
    return bilinear_sample(block, rows[:, None], cols[None, :])


def extract_patch(grid, center, extent_km=PATCH_EXTENT_KM):
    """The 120x120, 10 m column-density patch centred on ``center``."""
    data = patch_values(grid, center, extent_km)
    return Sentinel5PPatch(data[None].astype(np.float32), center=tuple(center),
                           source_period=grid.period)


def save_grid(path, grid):
    """GeoTIFF (band 1 mean, band 2 count; north-up, EPSG:4326) plus a JSON sidecar."""
    nrows, ncols = grid.shape
    cs = grid.cell_size
    transform = Affine(cs, 0.0, grid.origin[1], 0.0, -cs, grid.origin[0] + nrows * cs)
    with rasterio.open(path, "w", driver="GTiff", width=ncols, height=nrows, count=2,
                       dtype="float64", crs="EPSG:4326", transform=transform,
                       nodata=np.nan) as dst:
        dst.write(grid.values[::-1], 1)
        dst.write(grid.counts[::-1].astype(np.float64), 2)
    meta = {"origin": list(grid.origin), "cell_size": cs, "period": grid.period,
            "start": grid.start.isoformat(), "end": grid.end.isoformat(),
            "n_products": grid.n_products, "shape": [nrows, ncols]}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_grid(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    with rasterio.open(path) as src:
        values = src.read(1)[::-1].copy()
        counts = src.read(2)[::-1].astype(np.int64)
    return NO2Grid(values=values, counts=counts, origin=tuple(meta["origin"]),
                   period=meta["period"], start=datetime.fromisoformat(meta["start"]),
                   end=datetime.fromisoformat(meta["end"]), cell_size=meta["cell_size"],
                   n_products=meta["n_products"])


def average_products(products, period, origin, extent, qa_threshold=QA_THRESHOLD):
    """Filter, grid and average every product whose sensing time falls in ``period``."""
    period = parse_period(period) if not isinstance(period, Period) else period
    grids = [grid_product(filter_qa(p, qa_threshold), origin, extent)
             for p in products if p.sensing_time in period]
    if not grids:
        raise CoverageError(f"no Sentinel-5P products in period {period.label}")
    return temporal_average(grids, period)
