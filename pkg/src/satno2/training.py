"""Training loops: MSE regression with early stopping, and multi-label
land-cover pretraining of the backbone."""

import copy
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dataset import augment_batch
from .errors import ConfigurationError, NumericError
from .model import PRETRAINED_LCC, LandCoverNet, freeze, predict_batches

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    augment: bool = True
    freeze_backbone: bool = False
    seed: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning rate must be positive")

    def as_dict(self):
        return asdict(self)


class EarlyStopping:
    """Tracks the best validation loss and signals a stop after ``patience``
    epochs without improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = float("inf")
        self.best_epoch = None
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch, loss, model=None):
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = loss, epoch, 0
            if model is not None:
                self.best_state = copy.deepcopy(model.state_dict())
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield np.sort(order[i:i + batch_size])


def _to_tensor(x, dtype):
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def validation_loss(model, x, y, config, preprocess=None):
    pred = predict_batches(model, x, config.eval_batch_size, preprocess)
    return float(np.mean((pred - y) ** 2))


def train(model, train_set, val_set, config=TrainConfig(), preprocess=None, callback=None):
    """Minimise MSE on ``train_set`` and early-stop on ``val_set``.

    Both sets are ``(X, y)`` pairs of numpy arrays; ``preprocess`` (for
    example a fitted standardizer's ``transform``) is applied per batch.
    The returned model carries the weights of the best validation epoch and
    ``history`` has one ``{epoch, train_loss, val_loss}`` row per epoch.
    """
    x_tr, y_tr = train_set
    x_va, y_va = val_set
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation partitions must be non-empty")
    if config.freeze_backbone:
        freeze(model.backbone)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    dtype = next(model.parameters()).dtype
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    history = []
    loss_fn = nn.MSELoss()

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        if config.freeze_backbone:
            model.backbone.eval()
        total, seen = 0.0, 0
        for idx in _batches(len(x_tr), config.batch_size, rng):
            xb = x_tr[idx]
            if preprocess is not None:
                xb = preprocess(xb)
            if config.augment:
                xb = augment_batch(xb, rng)
            xb = _to_tensor(xb, dtype)
            yb = torch.from_numpy(y_tr[idx]).to(dtype)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(xb), yb)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss in epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        val = validation_loss(model, x_va, y_va, config, preprocess)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss in epoch {epoch}")
        improved = stopper.update(epoch, val, model)
        history.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val})
        log.info("epoch %d train %.4f val %.4f%s", epoch, total / seen, val,
                 " *" if improved else "")
        if callback is not None:
            callback(history[-1])
        if stopper.should_stop:
            break

    if stopper.best_state is not None:
        model.load_state_dict(stopper.best_state)
    model.best_epoch = stopper.best_epoch
    return model, history


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    augment: bool = True
    seed: int = 0


def pretrain_lcc(model, x, labels, config=PretrainConfig(), preprocess=None):
    """Multi-label land-cover pretraining (sigmoid outputs, binary cross-entropy).

    ``labels`` must be an (n, n_classes) 0/1 matrix. Returns the model
    tagged as land-cover pretrained and the per-epoch mean loss.
    """
    if not isinstance(model, LandCoverNet):
        raise ConfigurationError("pretrain_lcc expects a LandCoverNet")
    labels = np.asarray(labels, dtype=np.float32)
    if labels.ndim != 2:
        raise ConfigurationError("land-cover labels must be an (n, n_classes) multi-label matrix; "
                                 "got a single-label vector")
    if labels.shape[1] != model.n_classes:
        raise ConfigurationError(f"labels have {labels.shape[1]} classes, classifier has "
                                 f"{model.n_classes}")
    if not np.isin(labels, (0.0, 1.0)).all():
        raise ConfigurationError("land-cover labels must be 0/1")
    if len(x) != len(labels):
        raise ValueError("tiles and labels differ in length")

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    loss_fn = nn.BCEWithLogitsLoss()
    dtype = next(model.parameters()).dtype
    losses = []
    for epoch in range(1, config.epochs + 1):
        model.train()
        total = 0.0
        for idx in _batches(len(x), config.batch_size, rng):
            xb = x[idx] if preprocess is None else preprocess(x[idx])
            if config.augment:
                xb = augment_batch(xb, rng)
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(_to_tensor(xb, dtype)), torch.from_numpy(labels[idx]).to(dtype))
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite pretraining loss in epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x))
        log.info("pretrain epoch %d bce %.4f", epoch, losses[-1])
    model.eval()
    if config.epochs > 0:
        model.provenance = PRETRAINED_LCC
    return model, losses
