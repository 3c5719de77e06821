import math

import numpy as np
import pytest

from satno2.experiment import SeedResult, aggregate, derive_seeds, multi_seed_run
from satno2.metrics import Metrics


def results(maes, r2s=None):
    r2s = r2s or [0.5] * len(maes)
    return [SeedResult(i, Metrics(m, m * m + 1, r), best_epoch=3) for i, (m, r) in enumerate(zip(maes, r2s))]


def test_aggregate_arithmetic():
    s = aggregate(results([1.0, 2.0, 3.0]))
    assert s.mean["mae"] == 2.0 and s.std["mae"] == 1.0 and s.best["mae"] == 1.0
    assert aggregate(results([1.0, 1.0], [0.4, 0.5])).best["r2"] == 0.5
    assert not s.partial


def test_aggregate_best_rules(rng):
    for _ in range(50):
        maes = rng.uniform(1, 10, 5).tolist()
        r2s = rng.uniform(0, 1, 5).tolist()
        s = aggregate(results(maes, r2s))
        assert s.best["mae"] == min(maes) and s.best["r2"] == max(r2s)
        assert s.best["mse"] == min(m * m + 1 for m in maes)
        assert math.isclose(s.std["mae"], float(np.std(maes, ddof=1)), rel_tol=1e-12)


def fake_run(X, y, seed, params=None, groups=None):
    if seed % 3 == 0:
        raise RuntimeError("diverged")

    class Est:
        best_epoch_ = seed % 7
    return Est(), Metrics(seed % 11 + 1.0, 2.0, 0.1)


def test_partial_summary_lists_failures():
    s = multi_seed_run(None, None, seeds=[1, 3, 4, 6], run=fake_run)
    assert s.partial and s.failed_seeds == [3, 6]
    assert s.mean["mae"] == (2.0 + 5.0) / 2
    table = s.to_table()
    assert "failed: RuntimeError: diverged" in table
    assert table.splitlines()[-1].endswith("partial")


def test_seeds_and_table_deterministic():
    assert derive_seeds(0, 5) == derive_seeds(0, 5)
    assert derive_seeds(0, 5) != derive_seeds(1, 5)
    assert len(set(derive_seeds(0, 10))) == 10
    a = multi_seed_run(None, None, 4, master_seed=7, run=fake_run).to_table()
    b = multi_seed_run(None, None, 4, master_seed=7, run=fake_run).to_table()
    assert a == b
    assert a.splitlines()[0] == "seed\tmae\tmse\tr2\tbest_epoch\tstatus"


def test_needs_two_seeds():
    with pytest.raises(ValueError):
        multi_seed_run(None, None, 1, run=fake_run)


def test_all_failed():
    s = multi_seed_run(None, None, seeds=[3, 6], run=fake_run)
    assert s.partial and s.mean == {}
    assert "nan" in s.to_table()
