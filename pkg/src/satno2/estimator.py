"""scikit-learn style wrapper around the network, its standardizer and the
training loop."""

import logging

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

import torch

from .dataset import ChannelStandardizer, NormStats, SplitSpec, split_indices
from .errors import ConfigurationError
from .metrics import compute_metrics
from .model import (LandCoverNet, build_model, load_checkpoint, predict_batches,
                    save_checkpoint, swap_head)
from .training import TrainConfig, train
from .validation import check_stack, check_targets

log = logging.getLogger(__name__)


class NO2Regressor(RegressorMixin, BaseEstimator):
    """Surface NO2 regressor on stacked Sentinel-2 (+ Sentinel-5P) inputs.

    ``X`` is an (n, C, 120, 120) array: 12 reflectance bands in
    ``satno2.s2.BAND_ORDER`` followed, for the fusion variant, by the
    column-density patch. Inputs are standardized with statistics from the
    training partition; targets stay in µg/m³.

    Parameters
    ----------
    variant : {"fusion", "image-only"}
    pretrained : LandCoverNet, str or None
        Land-cover pretrained model (or checkpoint path) whose backbone is
        reused under a fresh head.
    validation_fraction : float
        Share of ``X`` held out for early stopping when ``fit`` gets no
        ``eval_set``.
    clamp : bool
        Clip reported predictions at zero.
    """

    def __init__(self, variant="fusion", pretrained=None, head_hidden=512, learning_rate=1e-4,
                 batch_size=32, max_epochs=100, patience=5, augment=True,
                 freeze_backbone=False, validation_fraction=0.25, clamp=True,
                 random_state=0, eval_batch_size=64):
        self.variant = variant
        self.pretrained = pretrained
        self.head_hidden = head_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.augment = augment
        self.freeze_backbone = freeze_backbone
        self.validation_fraction = validation_fraction
        self.clamp = clamp
        self.random_state = random_state
        self.eval_batch_size = eval_batch_size

    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience,
                           augment=self.augment, freeze_backbone=self.freeze_backbone,
                           seed=self.random_state, eval_batch_size=self.eval_batch_size)

    def _initial_model(self):
        seed = self.random_state
        if self.pretrained is None:
            return build_model(self.variant, seed=seed, head_hidden=self.head_hidden)
        pre = self.pretrained
        if isinstance(pre, str):
            pre, _ = load_checkpoint(pre)
        if not isinstance(pre, LandCoverNet):
            raise ConfigurationError("pretrained must be a LandCoverNet or its checkpoint path")
        return swap_head(pre, self.variant, seed=seed, head_hidden=self.head_hidden)

    def fit(self, X, y, eval_set=None, callback=None):
        if self.variant not in ("fusion", "image-only"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        X = check_stack(X, self.variant)
        y = check_targets(X, y)
        if eval_set is None:
            n_val = int(np.floor(len(X) * self.validation_fraction))
            if n_val < 1 or n_val >= len(X):
                raise ValueError("validation_fraction leaves an empty partition")
            order = np.random.default_rng(self.random_state).permutation(len(X))
            X_va, y_va = X[np.sort(order[:n_val])], y[np.sort(order[:n_val])]
            tr = np.sort(order[n_val:])
            X, y = X[tr], y[tr]
        else:
            X_va = check_stack(eval_set[0], self.variant)
            y_va = check_targets(X_va, eval_set[1])

        self.standardizer_ = ChannelStandardizer().fit(X)
        model = self._initial_model()
        # start the output at the training mean so early epochs fit structure, not offset
        with torch.no_grad():
            model.head.fc2.bias.fill_(float(np.mean(y)))
        self.model_, self.history_ = train(model, (X, y), (X_va, y_va), self._train_config(),
                                           preprocess=self.standardizer_.transform,
                                           callback=callback)
        self.best_epoch_ = self.model_.best_epoch
        self.n_features_in_ = X.shape[1]
        return self

    def predict_unclamped(self, X):
        check_is_fitted(self, "model_")
        X = check_stack(X, self.variant)
        return predict_batches(self.model_, X, self.eval_batch_size, self.standardizer_.transform)

    def predict(self, X):
        pred = self.predict_unclamped(X)
        return np.maximum(pred, 0.0) if self.clamp else pred

    def evaluate(self, X, y):
        """MAE / MSE / R² of the reported (clamped) predictions."""
        if len(X) == 0:
            raise ValueError("cannot evaluate on an empty test set")
        return compute_metrics(self.predict(X), y)

    def save(self, path, extra=None):
        check_is_fitted(self, "model_")
        extra = dict(extra or {})
        extra["estimator_params"] = {k: v for k, v in self.get_params().items()
                                     if k != "pretrained"}
        extra["history"] = self.history_
        save_checkpoint(path, self.model_, norm_stats=self.standardizer_.stats_.to_dict(),
                        extra=extra)

    @classmethod
    def load(cls, path):
        model, payload = load_checkpoint(path)
        if payload["kind"] != "regression":
            raise ConfigurationError(f"{path} holds a land-cover model, not a regressor")
        params = payload["extra"].get("estimator_params", {"variant": model.variant})
        est = cls(**params)
        est.model_ = model
        est.standardizer_ = ChannelStandardizer.from_stats(NormStats.from_dict(payload["norm_stats"]))
        est.history_ = payload["extra"].get("history", [])
        est.n_features_in_ = model.in_channels
        est.best_epoch_ = None
        return est


def fit_evaluate(X, y, seed, params=None, split_spec=None, groups=None):
    """One experiment run: split, fit with early stopping, evaluate on test."""
    spec = split_spec or SplitSpec(seed=seed)
    tr, va, te = split_indices(len(X), spec, groups)
    est = NO2Regressor(**dict(params or {}, random_state=seed))
    est.fit(X[tr], y[tr], eval_set=(X[va], y[va]))
    return est, est.evaluate(X[te], y[te])
