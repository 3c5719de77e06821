import math
from collections import defaultdict
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

from satno2.errors import CorruptProductError, CoverageError, DataGapError
from satno2.periods import month_period
from satno2.s5p import (M_PER_DEG, NO2Grid, S5PProduct, average_products, extract_patch,
                        filter_qa, grid_product, grid_shape, load_grid, patch_lattice,
                        patch_values, read_s5p_product, save_grid, temporal_average,
                        write_s5p_product)
from tests.oracles import bilinear_at

UTC = timezone.utc
ORIGIN, EXTENT, CS = (45.0, 5.0), (1.0, 1.5), 0.05


def swath(rng, n, day, lat=(44.9, 46.1), lon=(4.9, 6.6)):
    return S5PProduct(rng.uniform(*lat, n), rng.uniform(*lon, n), rng.gamma(2.0, 3e-5, n),
                      rng.uniform(0, 1, n), datetime(2019, 3, day, 12, tzinfo=UTC))


def test_grid_shape():
    assert grid_shape(EXTENT, CS) == (20, 30)
    with pytest.raises(ValueError):
        grid_shape((0, 1))


def test_count_conservation(rng):
    p = swath(rng, 5000, 1)
    g = grid_product(p, ORIGIN, EXTENT)
    inside = ((p.lat >= 45) & (p.lat < 46) & (p.lon >= 5) & (p.lon < 6.5)).sum()
    assert g.counts.sum() == inside
    assert np.isnan(g.values[g.counts == 0]).all()
    assert np.isfinite(g.values[g.counts > 0]).all()


def test_single_observation_cell():
    p = S5PProduct([45.01], [5.01], [7e-5], [1.0], datetime(2019, 1, 1, tzinfo=UTC))
    g = grid_product(p, ORIGIN, EXTENT)
    assert g.counts[0, 0] == 1 and g.values[0, 0] == 7e-5
    assert g.counts.sum() == 1


def pooled_oracle(products):
    acc = defaultdict(list)
    for p in products:
        for la, lo, v in zip(p.lat, p.lon, p.no2):
            r, c = math.floor((la - ORIGIN[0]) / CS), math.floor((lo - ORIGIN[1]) / CS)
            if 0 <= r < 20 and 0 <= c < 30:
                acc[r, c].append(v)
    return acc


def test_temporal_average_equals_pooled(rng):
    products = [swath(rng, int(rng.integers(50, 3000)), d) for d in (2, 5, 9, 20)]
    avg = temporal_average([grid_product(p, ORIGIN, EXTENT) for p in products], "2019-03")
    acc = pooled_oracle(products)
    assert avg.counts.sum() == sum(len(v) for v in acc.values())
    for r in range(20):
        for c in range(30):
            vals = acc.get((r, c), [])
            assert avg.counts[r, c] == len(vals)
            if vals:
                ref = math.fsum(vals) / len(vals)
                assert abs(avg.values[r, c] - ref) <= 1e-12 * abs(ref)
            else:
                assert np.isnan(avg.values[r, c])
    assert avg.period == "2019-03" and avg.n_products == 4


def test_missing_only_if_missing_everywhere(rng):
    a = grid_product(swath(rng, 30, 1, lat=(45, 45.5)), ORIGIN, EXTENT)
    b = grid_product(swath(rng, 30, 2, lat=(45.5, 46)), ORIGIN, EXTENT)
    avg = temporal_average([a, b], "2019-03")
    np.testing.assert_array_equal(avg.missing, a.missing & b.missing)


def test_temporal_average_rejects_mismatch(rng):
    a = grid_product(swath(rng, 10, 1), ORIGIN, EXTENT)
    b = grid_product(swath(rng, 10, 2), (45.0, 5.05), EXTENT)
    with pytest.raises(ValueError):
        temporal_average([a, b], "2019-03")
    with pytest.raises(ValueError):
        temporal_average([a], "2019-04")
    with pytest.raises(ValueError):
        temporal_average([], "2019-03")


def test_filter_qa_exhaustive():
    levels = np.round(np.arange(0, 101) / 100, 2)
    p = S5PProduct(np.full(101, 45.5), np.full(101, 5.5), np.arange(101.0), levels,
                   datetime(2019, 1, 1, tzinfo=UTC))
    previous = None
    for t in levels:
        kept = filter_qa(p, t)
        np.testing.assert_array_equal(kept.qa, levels[levels >= t])
        assert (kept.qa >= t).all()
        if previous is not None:
            assert set(kept.no2) <= set(previous.no2)
        previous = kept
    assert len(filter_qa(p, 0.75)) == 26
    with pytest.raises(ValueError):
        filter_qa(p, 1.5)


def test_product_round_trip(tmp_path, rng):
    lat, lon = rng.uniform(45, 46, (4, 5)), rng.uniform(5, 6, (4, 5))
    no2 = rng.gamma(2, 3e-5, (4, 5))
    qa = np.round(rng.uniform(0, 1, (4, 5)), 2)
    t = datetime(2019, 6, 1, 13, 5, tzinfo=UTC)
    write_s5p_product(tmp_path / "p.nc", lat, lon, no2, qa, t)
    p = read_s5p_product(tmp_path / "p.nc")
    np.testing.assert_allclose(p.lat, lat.ravel().astype(np.float32))
    np.testing.assert_allclose(p.no2, no2.ravel())
    np.testing.assert_allclose(p.qa, qa.ravel(), atol=1e-6)
    assert p.sensing_time == t


def test_product_errors(tmp_path):
    (tmp_path / "junk.nc").write_bytes(b"not hdf5")
    with pytest.raises(CorruptProductError):
        read_s5p_product(tmp_path / "junk.nc")
    with pytest.raises(ValueError):
        S5PProduct([0, 1], [0], [0], [0], datetime(2019, 1, 1, tzinfo=UTC))


def smooth_grid(fn, origin=(40.0, 0.0), shape=(40, 60)):
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    lat = origin[0] + (rr + 0.5) * CS
    lon = origin[1] + (cc + 0.5) * CS
    t = datetime(2019, 1, 1, tzinfo=UTC)
    return NO2Grid(fn(lat, lon), np.ones(shape, int), origin, "full", t, t)


def test_patch_matches_formula():
    rng = np.random.default_rng(7)
    g = smooth_grid(lambda la, lo: rng.normal(size=la.shape))
    center = (41.013, 1.477)
    vals = patch_values(g, center, size=15, resolution_m=1500.0)
    lats, lons = patch_lattice(center, 15, 1500.0)
    for i, la in enumerate(lats):
        for j, lo in enumerate(lons):
            r = (la - 40.0) / CS - 0.5
            c = (lo - 0.0) / CS - 0.5
            assert abs(vals[i, j] - bilinear_at(g.values, r, c)) < 1e-6


def test_full_patch_matches_formula_on_sample(rng):
    g = smooth_grid(lambda la, lo: 1.0 + rng.uniform(size=la.shape))
    center = (41.0, 1.5)
    patch = extract_patch(g, center)
    assert patch.data.shape == (1, 120, 120) and patch.data.dtype == np.float32
    lats, lons = patch_lattice(center)
    for i, j in rng.integers(0, 120, size=(200, 2)):
        ref = bilinear_at(g.values, (lats[i] - 40.0) / CS - 0.5, lons[j] / CS - 0.5)
        assert abs(patch.data[0, i, j] - ref) < 1e-6


def test_patch_lattice_spacing():
    lats, lons = patch_lattice((50.0, 10.0))
    assert len(lats) == len(lons) == 120
    dy = -np.diff(lats) * M_PER_DEG
    dx = np.diff(lons) * M_PER_DEG * math.cos(math.radians(50.0))
    np.testing.assert_allclose(dy, 10.0)
    np.testing.assert_allclose(dx, 10.0)
    assert abs(lats.mean() - 50.0) < 1e-12 and abs(lons.mean() - 10.0) < 1e-12


def test_patch_preserves_constant_and_ramp():
    g = smooth_grid(lambda la, lo: np.full(la.shape, 4.5e-5))
    np.testing.assert_allclose(extract_patch(g, (41.0, 1.5)).data, 4.5e-5, rtol=1e-6)
    g = smooth_grid(lambda la, lo: 2.0 * la - 3.0 * lo)
    vals = patch_values(g, (41.0, 1.5), size=30, resolution_m=1000.0)
    lats, lons = patch_lattice((41.0, 1.5), 30, 1000.0)
    np.testing.assert_allclose(vals, 2.0 * lats[:, None] - 3.0 * lons[None, :], rtol=1e-9)


def test_patch_coverage_error():
    g = smooth_grid(lambda la, lo: np.ones(la.shape))
    with pytest.raises(CoverageError):
        extract_patch(g, (40.02, 1.5))
    with pytest.raises(CoverageError):
        extract_patch(g, (41.0, 2.95))


def test_isolated_gap_filled_by_inverse_distance():
    g = smooth_grid(lambda la, lo: np.ones(la.shape))
    vals = g.values.copy()
    r, c = 20, 30
    vals[r - 1:r + 2, c - 1:c + 2] = [[1, 2, 3], [4, np.nan, 6], [7, 8, 9]]
    g.values, g.counts[r, c] = vals, 0
    center = (40.0 + (r + 0.5) * CS, (c + 0.5) * CS)
    w = 1 / math.sqrt(2)
    expect = (w * (1 + 3 + 7 + 9) + (2 + 4 + 6 + 8)) / (4 * w + 4)
    assert abs(patch_values(g, center, size=1)[0, 0] - expect) < 1e-12


def test_large_gap_raises():
    g = smooth_grid(lambda la, lo: np.ones(la.shape))
    g.values[20, 30:32] = np.nan
    with pytest.raises(DataGapError):
        extract_patch(g, (40.0 + 20.5 * CS, 30.5 * CS))


def test_grid_file_round_trip(tmp_path, rng):
    g = grid_product(swath(rng, 2000, 3), ORIGIN, EXTENT)
    save_grid(tmp_path / "g.tif", g)
    back = load_grid(tmp_path / "g.tif")
    np.testing.assert_array_equal(back.counts, g.counts)
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(g.values))
    np.testing.assert_allclose(back.values, g.values, equal_nan=True)
    assert back.same_geometry(g) and back.start == g.start


def test_average_products_selects_period(rng):
    inside = [swath(rng, 500, d) for d in (1, 15)]
    outside = S5PProduct([45.5], [5.5], [1.0], [1.0], datetime(2019, 4, 1, tzinfo=UTC))
    avg = average_products(inside + [outside], "2019-03", ORIGIN, EXTENT, qa_threshold=0.0)
    assert avg.counts.sum() == sum(grid_product(p, ORIGIN, EXTENT).counts.sum() for p in inside)
    assert avg.start == month_period(2019, 3).start
    with pytest.raises(CoverageError):
        average_products([outside], "2019-03", ORIGIN, EXTENT)
