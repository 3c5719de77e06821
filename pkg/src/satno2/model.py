"""Dual-stream regression network.

A 12-channel ResNet-50 backbone turns the Sentinel-2 tile into a 2048-d
feature vector, a small convolutional sub-network turns the column-density
patch into a 128-d latent, and a two-layer head maps the (concatenated)
features to one NO2 value. The backbone can be pretrained on a multi-label
land-cover task and then transplanted under a fresh regression head.
"""

import copy
import hashlib
import logging
import os
import pickle

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet50

from .errors import ConfigurationError, NumericError, ProvenanceError, StorageError

log = logging.getLogger(__name__)

N_BANDS = 12
FEATURE_DIM = 2048
LATENT_DIM = 128
HEAD_HIDDEN = 512
INPUT_SIZE = 120
LCC_N_CLASSES = 19

SCRATCH = "scratch"
PRETRAINED_LCC = "pretrained-lcc"
CHECKPOINT_FORMAT = "satno2-checkpoint"
CHECKPOINT_VERSION = 1


def _init_(module):
    """Fan-in variance scaling for every conv and dense layer, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Backbone(nn.Module):
    """ResNet-50 with a 12-band stem and global average pooling to 2048-d."""

    out_features = FEATURE_DIM

    def __init__(self, in_channels=N_BANDS):
        super().__init__()
        net = resnet50(weights=None, zero_init_residual=True)
        net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        if net.fc.in_features != FEATURE_DIM:
            raise ConfigurationError(f"backbone emits {net.fc.in_features}-d features, "
                                     f"expected {FEATURE_DIM}")
        net.fc = nn.Identity()
        self.net = net
        self.in_channels = in_channels
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")

    def forward(self, x):
        if x.dtype == torch.float32:
            x = x.contiguous(memory_format=torch.channels_last)
        return self.net(x)


class ColumnSubnet(nn.Module):
    """Two unpadded conv layers (10 and 15 channels, kernels 3 and 5), each with
    ReLU and 3x3 max-pooling, then a linear map to the latent vector."""

    def __init__(self, input_size=INPUT_SIZE, latent_dim=LATENT_DIM):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 10, kernel_size=3), nn.ReLU(), nn.MaxPool2d(3),
            nn.Conv2d(10, 15, kernel_size=5), nn.ReLU(), nn.MaxPool2d(3),
            nn.Flatten(),
        )
        self.input_size = input_size
        self.flat_features = flatten_width(input_size)
        self.fc = nn.Linear(self.flat_features, latent_dim)
        self.out_features = latent_dim
        _init_(self)

    def forward(self, x):
        if x.shape[1:] != (1, self.input_size, self.input_size):
            raise ValueError(f"column patch batch must be (B, 1, {self.input_size}, "
                             f"{self.input_size}), got {tuple(x.shape)}")
        return self.fc(self.features(x))


def flatten_width(input_size=INPUT_SIZE):
    s = (input_size - 2) // 3
    s = (s - 4) // 3
    if s < 1:
        raise ConfigurationError(f"input size {input_size} too small for the column sub-network")
    return 15 * s * s


class RegressionHead(nn.Module):
    def __init__(self, in_features, hidden=HEAD_HIDDEN):
        super().__init__()
        self.in_features = in_features
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        _init_(self)
        nn.init.kaiming_normal_(self.fc2.weight, mode="fan_in", nonlinearity="linear")

    def forward(self, z):
        return self.fc2(torch.relu(self.fc1(z))).squeeze(-1)


def _check_finite(t, where):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activation in {where}")


class NO2Net(nn.Module):
    """Image-only (12 input channels) or fusion (13: image + column patch) regressor."""

    def __init__(self, variant="fusion", head_hidden=HEAD_HIDDEN, backbone=None, subnet=None,
                 head=None, provenance=SCRATCH, seed=0):
        super().__init__()
        if variant not in ("fusion", "image-only"):
            raise ConfigurationError(f"unknown variant {variant!r}")
        self.variant = variant
        self.backbone = backbone if backbone is not None else Backbone()
        if variant == "fusion":
            self.subnet = subnet if subnet is not None else ColumnSubnet()
            expected = self.backbone.out_features + self.subnet.out_features
        else:
            if subnet is not None:
                raise ConfigurationError("image-only model takes no column sub-network")
            self.subnet = None
            expected = self.backbone.out_features
        self.head = head if head is not None else RegressionHead(expected, head_hidden)
        if self.head.in_features != expected:
            raise ConfigurationError(f"head expects {self.head.in_features}-d input, "
                                     f"{variant} features are {expected}-d")
        self.provenance = provenance
        self.seed = seed

    @property
    def in_channels(self):
        return N_BANDS + (1 if self.variant == "fusion" else 0)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"{self.variant} input must be (B, {self.in_channels}, {INPUT_SIZE}, "
                             f"{INPUT_SIZE}), got {tuple(x.shape)}")
        feats = self.backbone(x[:, :N_BANDS])
        _check_finite(feats, "backbone")
        if self.subnet is not None:
            latent = self.subnet(x[:, N_BANDS:])
            _check_finite(latent, "column sub-network")
            feats = torch.cat([feats, latent], dim=1)
        out = self.head(feats)
        _check_finite(out, "head")
        return out


class LandCoverNet(nn.Module):
    """Backbone plus a linear multi-label classification layer."""

    def __init__(self, n_classes=LCC_N_CLASSES, backbone=None, seed=0):
        super().__init__()
        self.backbone = backbone if backbone is not None else Backbone()
        self.classifier = nn.Linear(self.backbone.out_features, n_classes)
        self.n_classes = n_classes
        self.provenance = SCRATCH
        self.seed = seed

    def forward(self, x):
        return self.classifier(self.backbone(x))


def build_model(variant="fusion", seed=0, head_hidden=HEAD_HIDDEN):
    """Freshly initialised ``NO2Net``; identical seeds give identical weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return NO2Net(variant, head_hidden=head_hidden, seed=seed)


def build_landcover_model(n_classes=LCC_N_CLASSES, seed=0):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return LandCoverNet(n_classes, seed=seed)


def swap_head(pretrained, variant="fusion", seed=0, head_hidden=HEAD_HIDDEN, allow_scratch=False):
    """Keep the pretrained convolutional backbone, discard the classifier and
    attach a freshly initialised regression head (and sub-network for fusion)."""
    if getattr(pretrained, "provenance", SCRATCH) != PRETRAINED_LCC and not allow_scratch:
        raise ProvenanceError("swap_head expects a land-cover pretrained model "
                              f"(provenance {pretrained.provenance!r}); pass allow_scratch=True "
                              "to override")
    backbone = copy.deepcopy(pretrained.backbone)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        subnet = ColumnSubnet() if variant == "fusion" else None
        head = RegressionHead(FEATURE_DIM + (LATENT_DIM if subnet is not None else 0), head_hidden)
    return NO2Net(variant, backbone=backbone, subnet=subnet, head=head,
                  provenance=pretrained.provenance, seed=seed)


def parameter_checksum(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, model, norm_stats=None, extra=None):
    """Single-file checkpoint: weights, dimensions, provenance, seed, normalization."""
    dtype = next(model.parameters()).dtype
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "lcc" if isinstance(model, LandCoverNet) else "regression",
        "dtype": str(dtype).replace("torch.", ""),
        "variant": getattr(model, "variant", None),
        "constants": {"n_bands": N_BANDS, "feature_dim": FEATURE_DIM, "latent_dim": LATENT_DIM,
                      "input_size": INPUT_SIZE,
                      "head_hidden": model.head.fc1.out_features if hasattr(model, "head") else None,
                      "n_classes": getattr(model, "n_classes", None)},
        "provenance": model.provenance,
        "seed": model.seed,
        "norm_stats": norm_stats,
        "extra": extra or {},
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    tmp = f"{path}.tmp"
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except (OSError, RuntimeError) as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns ``(model, payload)``; the model is rebuilt from the stored constants."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a checkpoint of this package")
    c = payload["constants"]
    if (c["feature_dim"], c["latent_dim"], c["n_bands"]) != (FEATURE_DIM, LATENT_DIM, N_BANDS):
        raise ConfigurationError(f"{path}: checkpoint dimensions {c} do not match this build")
    if payload["kind"] == "lcc":
        model = LandCoverNet(c["n_classes"])
    else:
        model = NO2Net(payload["variant"], head_hidden=c["head_hidden"])
    model.load_state_dict(payload["state_dict"])
    model.to(getattr(torch, payload["dtype"]))
    model.provenance = payload["provenance"]
    model.seed = payload["seed"]
    return model, payload


def freeze(module):
    for p in module.parameters():
        p.requires_grad_(False)


def predict_batches(model, x, batch_size=64, preprocess=None):
    """Evaluation-mode forward pass over a numpy stack, in fixed-size batches.

    The last batch is padded to ``batch_size`` so every sample goes through
    the same kernels regardless of its position.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    out = np.empty(len(x))
    with torch.inference_mode():
        for i in range(0, len(x), batch_size):
            chunk = x[i:i + batch_size]
            if preprocess is not None:
                chunk = preprocess(chunk)
            n = len(chunk)
            if n < batch_size:
                chunk = np.concatenate([chunk, np.repeat(chunk[-1:], batch_size - n, axis=0)])
            t = torch.from_numpy(np.ascontiguousarray(chunk)).to(dtype)
            out[i:i + n] = model(t)[:n].double().numpy()
    return out
