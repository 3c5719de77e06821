"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the "acceptance
criteria" section at the end of the pytest run. Criteria 1 and 2 train
ResNet-50 models on synthetic data and take hours on a single CPU core.
"""

import math
import os
import time

import numpy as np
import pytest
import torch
import yaml

from satno2 import NO2Regressor
from satno2.cli import main
from satno2.dataset import SplitSpec, split_indices
from satno2.errors import ConfigurationError
from satno2.experiment import derive_seeds, multi_seed_run
from satno2.metrics import mae, mse, r2
from satno2.model import (LandCoverNet, NO2Net, RegressionHead, build_landcover_model,
                          build_model, flatten_width)
from satno2.resample import upsample_bilinear
from satno2.s5p import (NO2Grid, S5PProduct, filter_qa, grid_product, patch_lattice,
                        patch_values, temporal_average)
from satno2.stations import filter_quality
from satno2.synth import LCC_CLASSES, SynthConfig, synth_arrays, synth_landcover
from satno2.mapping import plan_tiles
from satno2.training import PretrainConfig, pretrain_lcc
from tests.gradcheck import check, fusion_tail
from tests.oracles import bilinear_at, metrics_loop, upsample_loop

RUNTIME_LIMIT_S = 30 * 60
REFERENCE_CORES = 8


# ---- 1: synthetic end-to-end learning ---------------------------------------

@pytest.fixture(scope="module")
def end_to_end():
    start = time.perf_counter()
    x, y, _ = synth_arrays(SynthConfig(n_samples=2000, seed=0))
    tr, va, te = split_indices(len(x), SplitSpec(seed=0))
    x_tr, x_va, x_te = x[tr], x[va], x[te]
    y_tr, y_va, y_te = y[tr], y[va], y[te]
    del x
    est = NO2Regressor(variant="fusion", random_state=0)
    est.fit(x_tr, y_tr, eval_set=(x_va, y_va))
    del x_tr, x_va
    metrics = est.evaluate(x_te, y_te)
    return metrics, time.perf_counter() - start, est


@pytest.mark.slow
def test_criterion_1_synthetic_r2(end_to_end, criterion):
    metrics, elapsed, est = end_to_end
    criterion.detail = (f"test r2={metrics.r2:.4f} mae={metrics.mae:.3f} "
                        f"(best epoch {est.best_epoch_} of {len(est.history_)}, {elapsed:.0f} s)")
    assert metrics.r2 >= 0.9


@pytest.mark.slow
def test_criterion_1_runtime(end_to_end, criterion):
    _, elapsed, _ = end_to_end
    cores = len(os.sched_getaffinity(0))
    criterion.detail = f"wall time {elapsed:.0f} s on {cores} core(s), limit {RUNTIME_LIMIT_S} s on 8"
    if cores < REFERENCE_CORES:
        pytest.skip(f"bound is stated for an {REFERENCE_CORES}-core CPU; this host has {cores} "
                    f"(measured {elapsed:.0f} s)")
    assert elapsed <= RUNTIME_LIMIT_S


# ---- 2: directional ordering --------------------------------------------------

ORDERING_SAMPLES = 500
ORDERING_SEEDS = 5
ORDERING_BUDGET = dict(max_epochs=8, patience=5)


@pytest.mark.slow
def test_criterion_2_ordering(criterion):
    x, y, _ = synth_arrays(SynthConfig(n_samples=ORDERING_SAMPLES, seed=1))
    tiles, labels = synth_landcover(600, seed=1)
    lcc = build_landcover_model(len(LCC_CLASSES), seed=1)
    lcc, _ = pretrain_lcc(lcc, tiles, labels, PretrainConfig(epochs=5, seed=1),
                          preprocess=_standardize(tiles))
    del tiles
    seeds = derive_seeds(2, ORDERING_SEEDS)
    runs = {
        "fusion/scratch": dict(variant="fusion"),
        "fusion/pretrained": dict(variant="fusion", pretrained=lcc),
        "image-only/scratch": dict(variant="image-only"),
    }
    summaries = {name: multi_seed_run(x, y, params={**p, **ORDERING_BUDGET}, seeds=seeds)
                 for name, p in runs.items()}
    means = {name: s.mean["mae"] for name, s in summaries.items()}
    criterion.detail = "  ".join(f"{k} mae={v:.3f}" for k, v in means.items())
    assert not any(s.partial for s in summaries.values())
    assert means["fusion/pretrained"] <= means["fusion/scratch"]
    assert means["fusion/scratch"] <= means["image-only/scratch"]


def _standardize(x):
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)[:, None, None].astype(np.float32)
    std = x.std(axis=(0, 2, 3), dtype=np.float64)[:, None, None].astype(np.float32)
    return lambda batch: (batch - mean) / std


# ---- 3: metric oracle ---------------------------------------------------------

def test_criterion_3_metric_oracle(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        t = rng.normal(25, 10, n)
        p = t + rng.normal(0, rng.uniform(0.1, 10), n)
        got = (mae(p, t), mse(p, t), r2(p, t))
        ref = metrics_loop(p.tolist(), t.tolist())
        for g, r in zip(got, ref):
            worst = max(worst, abs(g - r) / max(abs(r), 1e-300))
        assert got[1] >= got[0] ** 2
    criterion.detail = f"1000 trials, max relative deviation {worst:.1e}"
    assert worst <= 1e-9


# ---- 4: gradient checks -------------------------------------------------------

def test_criterion_4_gradients(criterion):
    subnet, head, loss = fusion_tail(seed=4)
    rng = np.random.default_rng(4)
    head_err, n_head = check(list(head.parameters()), loss, 128, rng)
    sub_err, n_sub = check(list(subnet.parameters()), loss, 128, rng)
    criterion.detail = (f"head {n_head} coords max rel err {head_err:.1e}; "
                        f"subnet {n_sub} coords max rel err {sub_err:.1e} (float64)")
    assert n_head >= 100 and n_sub >= 100
    assert head_err < 1e-4 and sub_err < 1e-4


# ---- 5: resampling oracle -----------------------------------------------------

def test_criterion_5_resampling(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(30):
        x = rng.normal(size=tuple(rng.integers(1, 8, 2)))
        f = int(rng.choice([2, 3, 6]))
        worst = max(worst, np.abs(upsample_bilinear(x, f) - upsample_loop(x, f)).max())
    t0 = np.datetime64("2019-01-01")
    values = rng.normal(size=(40, 60))
    from datetime import datetime, timezone
    when = datetime(2019, 1, 1, tzinfo=timezone.utc)
    grid = NO2Grid(values, np.ones_like(values, dtype=int), (40.0, 0.0), "full", when, when)
    lats, lons = patch_lattice((41.0, 1.5), 12, 1500.0)
    vals = patch_values(grid, (41.0, 1.5), size=12, resolution_m=1500.0)
    for i, la in enumerate(lats):
        for j, lo in enumerate(lons):
            ref = bilinear_at(values, (la - 40.0) / 0.05 - 0.5, lo / 0.05 - 0.5)
            worst = max(worst, abs(vals[i, j] - ref))
    const = np.abs(upsample_bilinear(np.full((5, 6), 7.5), 6) - 7.5).max()
    i, j = np.mgrid[0:6, 0:6].astype(float)
    up = upsample_bilinear(3 * i - j, 2)
    pos = (np.arange(12) + 0.5) / 2 - 0.5
    inner = slice(1, 11)
    ramp = np.abs(up[inner, inner] - (3 * pos[inner, None] - pos[None, inner])).max()
    criterion.detail = f"max deviation {worst:.1e}; constant {const:.1e}; ramp {ramp:.1e}"
    assert worst <= 1e-6 and const <= 1e-6 and ramp <= 1e-6


# ---- 6: gridding conservation -------------------------------------------------

def test_criterion_6_gridding(criterion):
    from datetime import datetime, timezone
    rng = np.random.default_rng(6)
    origin, extent = (45.0, 5.0), (1.0, 1.0)
    products = []
    for day in (1, 8, 15, 22):
        n = int(rng.integers(500, 4000))
        products.append(S5PProduct(rng.uniform(45, 46, n), rng.uniform(5, 6, n),
                                   rng.gamma(2, 3e-5, n), rng.uniform(0, 1, n),
                                   datetime(2019, 3, day, tzinfo=timezone.utc)))
    grids = [grid_product(p, origin, extent) for p in products]
    conserved = all(g.counts.sum() == len(p) for g, p in zip(grids, products))
    avg = temporal_average(grids, "2019-03")
    lat = np.concatenate([p.lat for p in products])
    lon = np.concatenate([p.lon for p in products])
    no2 = np.concatenate([p.no2 for p in products])
    rows = np.floor((lat - 45.0) / 0.05).astype(int)
    cols = np.floor((lon - 5.0) / 0.05).astype(int)
    worst = 0.0
    for r, c in {(int(a), int(b)) for a, b in zip(rows, cols)}:
        sel = (rows == r) & (cols == c)
        pooled = math.fsum(no2[sel]) / sel.sum()
        worst = max(worst, abs(avg.values[r, c] - pooled) / pooled)
        conserved &= avg.counts[r, c] == sel.sum()
    criterion.detail = f"counts conserved={conserved}; max relative deviation {worst:.1e}"
    assert conserved and worst <= 1e-12


# ---- 7: filter exactness -------------------------------------------------------

def test_criterion_7_filters(criterion):
    import itertools
    from datetime import datetime, timezone

    import pandas as pd
    flags = [-99, -1, 0, 1, 2, 3]
    combos = list(itertools.product(flags, flags))
    frame = pd.DataFrame({"station_id": "A", "latitude": 0.0, "longitude": 0.0,
                          "timestamp": pd.Timestamp("2019-01-01", tz="UTC"),
                          "no2": np.arange(len(combos), dtype=float),
                          "validity": [a for a, _ in combos],
                          "verification": [b for _, b in combos]})
    kept = set(filter_quality(frame)["no2"].astype(int))
    exact = kept == {i for i, (a, b) in enumerate(combos) if a == 1 and b == 1}
    levels = np.arange(101) / 100
    product = S5PProduct(np.zeros(101), np.zeros(101), levels, levels,
                         datetime(2019, 1, 1, tzinfo=timezone.utc))
    monotone, previous = True, None
    for thr in levels:
        cur = set(filter_qa(product, thr).qa)
        monotone &= cur == {q for q in levels if q >= thr}
        if previous is not None:
            monotone &= cur <= previous
        previous = cur
    criterion.detail = (f"{len(combos)} flag combinations exact={exact}; "
                        f"{len(levels)} qa thresholds monotone={monotone}")
    assert exact and monotone


# ---- 8: tiling arithmetic -------------------------------------------------------

def test_criterion_8_tiling(criterion):
    rng = np.random.default_rng(8)
    n = 0
    for _ in range(40):
        h, w = (int(v) for v in rng.integers(120, 1001, 2))
        plan = plan_tiles((h, w))
        for dim, offsets in ((h, plan.row_offsets), (w, plan.col_offsets)):
            expected = (dim - 120) // 10 + 1 + ((dim - 120) % 10 != 0)
            assert len(offsets) == expected
            assert all(a < b for a, b in zip(offsets, offsets[1:]))
        covered = np.zeros((h, w), bool)
        for r, c in plan.windows:
            covered[r:r + 120, c:c + 120] = True
        assert covered[60:h - 60, 60:w - 60].all()
        n += 1
    criterion.detail = f"{n} random scenes in [120, 1000] px"


# ---- 9: shape contract ---------------------------------------------------------

def test_criterion_9_shapes(criterion):
    model = build_model("fusion", seed=0).eval()
    x = torch.randn(2, 13, 120, 120)
    with torch.no_grad():
        feat = model.backbone(x[:, :12])
        lat = model.subnet(x[:, 12:])
    dims = (feat.shape[1], lat.shape[1], flatten_width(), model.head.in_features)
    failures = 0
    for make in (lambda: NO2Net("fusion", head=RegressionHead(2048)),
                 lambda: NO2Net("image-only", head=RegressionHead(2176)),
                 lambda: flatten_width(12)):
        try:
            make()
        except ConfigurationError:
            failures += 1
    criterion.detail = f"backbone/subnet/flatten/head = {dims}; {failures}/3 mismatches rejected"
    assert dims == (2048, 128, 1815, 2176) and failures == 3


# ---- 10: determinism -----------------------------------------------------------

def test_criterion_10_determinism(tmp_path, criterion):
    cfg = {"synth": {"n_samples": 16},
           "train": {"max_epochs": 2, "batch_size": 4, "patience": 1},
           "experiment": {"n_seeds": 3}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    tables = []
    for run in ("a", "b"):
        out = str(tmp_path / run)
        assert main(["synth", "--config", str(path), "--output", out, "--seed", "10"]) == 0
        assert main(["experiment", "--config", str(path), "--output", out, "--seed", "10"]) == 0
        with open(os.path.join(out, "summary.tsv"), "rb") as fh:
            tables.append(fh.read())
    criterion.detail = f"summary {len(tables[0])} bytes, identical={tables[0] == tables[1]}"
    assert tables[0] == tables[1]
