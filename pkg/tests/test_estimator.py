import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from satno2 import NO2Regressor
from satno2.errors import ConfigurationError
from satno2.estimator import fit_evaluate
from satno2.model import PRETRAINED_LCC, build_landcover_model, save_checkpoint
from satno2.synth import SynthConfig, synth_arrays

FAST = dict(max_epochs=1, batch_size=4, eval_batch_size=8, augment=True)


@pytest.fixture(scope="module")
def data():
    x, y, _ = synth_arrays(SynthConfig(n_samples=12, seed=4))
    return x, y


@pytest.fixture(scope="module")
def fitted(data):
    x, y = data
    return NO2Regressor(random_state=0, **FAST).fit(x[:8], y[:8], eval_set=(x[8:], y[8:]))


def test_params_round_trip():
    est = NO2Regressor(variant="image-only", learning_rate=3e-4)
    assert est.get_params()["learning_rate"] == 3e-4
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 12, 120, 120), np.float32))


def test_fit_predict(fitted, data):
    x, y = data
    assert len(fitted.history_) == 1 and fitted.best_epoch_ == 1
    assert fitted.n_features_in_ == 13
    pred = fitted.predict(x)
    assert pred.shape == (12,) and (pred >= 0).all()
    # evaluation is deterministic
    assert fitted.evaluate(x, y) == fitted.evaluate(x, y)
    raw = fitted.predict_unclamped(x)
    np.testing.assert_array_equal(np.maximum(raw, 0), pred)


def test_input_validation(fitted, data):
    x, y = data
    with pytest.raises(ValueError):
        fitted.predict(x[:, :12])
    bad = x[:2].copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        fitted.predict(bad)
    with pytest.raises(ValueError):
        fitted.evaluate(x[:0], y[:0])
    with pytest.raises(ValueError):
        NO2Regressor(**FAST).fit(x, y[:3])
    with pytest.raises(ConfigurationError):
        NO2Regressor(variant="nope").fit(x, y)


def test_save_load(tmp_path, fitted, data):
    x, _ = data
    fitted.save(tmp_path / "m.pt")
    back = NO2Regressor.load(tmp_path / "m.pt")
    assert back.get_params() == {**fitted.get_params(), "pretrained": None}
    np.testing.assert_array_equal(back.predict(x), fitted.predict(x))


def test_seeded_fit_is_reproducible(data, fitted):
    x, y = data
    again = NO2Regressor(random_state=0, **FAST).fit(x[:8], y[:8], eval_set=(x[8:], y[8:]))
    np.testing.assert_array_equal(again.predict(x), fitted.predict(x))


def test_image_only_accepts_fusion_stack(data):
    x, y = data
    est = NO2Regressor(variant="image-only", random_state=1, **FAST).fit(x, y)
    assert est.n_features_in_ == 12
    np.testing.assert_array_equal(est.predict(x), est.predict(x[:, :12]))


def test_pretrained_checkpoint(tmp_path, data):
    x, y = data
    lcc = build_landcover_model(3, seed=0)
    save_checkpoint(tmp_path / "scratch.pt", lcc)
    with pytest.raises(ConfigurationError):
        NO2Regressor(pretrained=str(tmp_path / "scratch.pt"), **FAST).fit(x, y)
    lcc.provenance = PRETRAINED_LCC
    save_checkpoint(tmp_path / "lcc.pt", lcc)
    est = NO2Regressor(pretrained=str(tmp_path / "lcc.pt"), **FAST).fit(x, y)
    assert est.model_.provenance == PRETRAINED_LCC


def test_fit_evaluate(data):
    x, y = data
    est, metrics = fit_evaluate(x, y, seed=3, params=FAST)
    assert np.isfinite([metrics.mae, metrics.mse, metrics.r2]).all()
