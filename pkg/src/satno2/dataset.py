"""Supervised samples: assembly, deterministic splits, dihedral augmentation,
per-channel standardization and the on-disk sample archive."""

import json
import logging
import os
import shutil
import tempfile
import zipfile
from dataclasses import dataclass, replace
from datetime import datetime

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import FormatError, IntegrityError, NormStatsError
from .s2 import BAND_ORDER, TILE_SIZE, Sentinel2Tile
from .s5p import Sentinel5PPatch

log = logging.getLogger(__name__)

ARCHIVE_SCHEMA_VERSION = 1
N_IMAGE_CHANNELS = len(BAND_ORDER)
N_FUSION_CHANNELS = N_IMAGE_CHANNELS + 1
VARIANTS = ("fusion", "image-only")


@dataclass
class Sample:
    s2: Sentinel2Tile
    s5p: Sentinel5PPatch | None
    target: float
    station_id: str
    period: str = "full"
    latents: dict | None = None

    @property
    def key(self):
        return self.station_id, self.period


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    group_by_station: bool = False

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9 \
                or min(self.fractions) < 0:
            raise ValueError(f"split fractions must be three non-negative numbers summing to 1, "
                             f"got {self.fractions}")


def _keyed(items, side):
    out = {}
    for key, value in items:
        key = tuple(key)
        if key in out:
            raise IntegrityError(f"duplicate {side} key {key}")
        out[key] = value
    return out


def build_samples(tiles, patches, targets, variant="fusion"):
    """Join tiles, patches and targets on (station_id, period).

    ``tiles`` and ``patches`` are iterables of ``((station_id, period), obj)``
    pairs, ``targets`` an iterable of ``TargetValue``. In fusion mode all
    three sides must match; in image-only mode the patch is optional.
    """
    tiles = _keyed(tiles, "tile")
    patches = _keyed(patches, "patch")
    targets = _keyed((((t.station_id, t.period), t) for t in targets), "target")
    samples = []
    for key in sorted(tiles):
        if key not in targets:
            log.info("tile %s has no target; skipped", key)
            continue
        patch = patches.get(key)
        if patch is None and variant == "fusion":
            log.info("tile %s has no Sentinel-5P patch; skipped", key)
            continue
        samples.append(Sample(tiles[key], patch, float(targets[key].mean_no2), *key))
    for key in sorted(set(targets) - set(tiles)):
        log.info("target %s has no tile; skipped", key)
    return samples


def split_sizes(n, fractions=(0.6, 0.2, 0.2)):
    n_val = int(np.floor(n * fractions[1] + 1e-9))
    n_test = int(np.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_indices(n, spec=SplitSpec(), groups=None):
    """Index arrays (train, validation, test); remainder of the floors goes to train."""
    if n < 5:
        raise ValueError(f"need at least 5 samples to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    n_train, n_val, n_test = split_sizes(n, spec.fractions)
    if not spec.group_by_station:
        order = rng.permutation(n)
        return (np.sort(order[:n_train]), np.sort(order[n_train:n_train + n_val]),
                np.sort(order[n_train + n_val:]))
    if groups is None:
        raise ValueError("group_by_station split requires station ids")
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    parts, filled = ([], [], []), [0, 0, 0]
    # test, then validation, then train take whole stations until full
    quota = (n_test, n_val, n)
    slot = 0
    for g in rng.permutation(uniq):
        while slot < 2 and filled[2 - slot] >= quota[slot]:
            slot += 1
        idx = np.nonzero(groups == g)[0]
        parts[2 - slot].append(idx)
        filled[2 - slot] += idx.size
    return tuple(np.sort(np.concatenate(p)) if p else np.array([], dtype=int) for p in parts)


def split(samples, spec=SplitSpec()):
    """Partition samples 60:20:20 (by default) into train/validation/test."""
    samples = list(samples)
    groups = [s.station_id for s in samples] if spec.group_by_station else None
    return tuple([samples[i] for i in idx] for idx in split_indices(len(samples), spec, groups))


def dihedral(arr, k, flip):
    """Horizontal flip (optional) followed by ``k`` quarter turns on the last two axes."""
    out = arr[..., ::-1] if flip else arr
    return np.rot90(out, k, axes=(-2, -1))


def dihedral_inverse(arr, k, flip):
    out = np.rot90(arr, -k, axes=(-2, -1))
    return out[..., ::-1] if flip else out


def augment(sample, rng):
    """Apply one random element of the 8-element dihedral group to both inputs."""
    k, flip = int(rng.integers(4)), bool(rng.integers(2))
    s2 = replace(sample.s2, data=np.ascontiguousarray(dihedral(sample.s2.data, k, flip)))
    s5p = sample.s5p
    if s5p is not None:
        s5p = replace(s5p, data=np.ascontiguousarray(dihedral(s5p.data, k, flip)))
    return replace(sample, s2=s2, s5p=s5p)


def augment_batch(x, rng):
    """Independent random dihedral transform per sample of an (n, C, H, W) batch."""
    out = np.empty_like(x)
    ks = rng.integers(4, size=len(x))
    flips = rng.integers(2, size=len(x))
    for i in range(len(x)):
        out[i] = dihedral(x[i], ks[i], flips[i])
    return out


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise NormStatsError("mean and std must be 1-D arrays of equal length")
        if not (np.isfinite(self.std).all() and (self.std > 0).all()):
            raise NormStatsError(f"channel std must be positive, got {self.std}")

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


def channel_stats(x, chunk=64):
    """Two-pass per-channel mean/std over an (n, C, H, W) array, chunked."""
    n, c = x.shape[:2]
    total = np.zeros(c)
    for i in range(0, n, chunk):
        total += x[i:i + chunk].sum(axis=(0, 2, 3), dtype=np.float64)
    count = n * x.shape[2] * x.shape[3]
    mean = total / count
    sq = np.zeros(c)
    for i in range(0, n, chunk):
        d = x[i:i + chunk].astype(np.float64) - mean[None, :, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    return mean, np.sqrt(sq / count)


class ChannelStandardizer(TransformerMixin, BaseEstimator):
    """Per-channel ``(x - mean) / std`` for (n, C, H, W) stacks."""

    def fit(self, X, y=None):
        X = np.asarray(X)
        mean, std = channel_stats(X)
        self.stats_ = NormStats(mean, std)
        self.n_channels_ = X.shape[1]
        return self

    @classmethod
    def from_stats(cls, stats):
        obj = cls()
        obj.stats_ = stats
        obj.n_channels_ = stats.mean.size
        return obj

    def _params(self, X):
        check_is_fitted(self, "stats_")
        c = X.shape[1]
        if c > self.n_channels_:
            raise ValueError(f"fitted on {self.n_channels_} channels, got {c}")
        return (self.stats_.mean[:c, None, None].astype(X.dtype if X.dtype.kind == "f" else np.float64),
                self.stats_.std[:c, None, None].astype(X.dtype if X.dtype.kind == "f" else np.float64))

    def transform(self, X):
        X = np.asarray(X)
        mean, std = self._params(X)
        return (X - mean) / std

    def inverse_transform(self, X):
        X = np.asarray(X)
        mean, std = self._params(X)
        return X * std + mean


def normalize(sample, stats):
    """Standardize a sample's image channels and (if present) its column channel."""
    _check_stats(sample, stats)
    m, s = stats.mean, stats.std
    s2 = replace(sample.s2, data=((sample.s2.data - m[:12, None, None]) / s[:12, None, None]).astype(np.float32))
    s5p = sample.s5p
    if s5p is not None:
        s5p = replace(s5p, data=((s5p.data - m[12]) / s[12]).astype(np.float32))
    return replace(sample, s2=s2, s5p=s5p)


def denormalize(sample, stats):
    _check_stats(sample, stats)
    m, s = stats.mean, stats.std
    s2 = replace(sample.s2, data=(sample.s2.data * s[:12, None, None] + m[:12, None, None]).astype(np.float32))
    s5p = sample.s5p
    if s5p is not None:
        s5p = replace(s5p, data=(s5p.data * s[12] + m[12]).astype(np.float32))
    return replace(sample, s2=s2, s5p=s5p)


def _check_stats(sample, stats):
    need = N_FUSION_CHANNELS if sample.s5p is not None else N_IMAGE_CHANNELS
    if stats.mean.size < need:
        raise NormStatsError(f"stats cover {stats.mean.size} channels, sample needs {need}")


def stack_samples(samples, variant="fusion"):
    """Dense (X, y) arrays; fusion stacks the column patch as channel 13."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    c = N_FUSION_CHANNELS if variant == "fusion" else N_IMAGE_CHANNELS
    x = np.empty((len(samples), c, TILE_SIZE, TILE_SIZE), dtype=np.float32)
    y = np.empty(len(samples))
    for i, s in enumerate(samples):
        x[i, :N_IMAGE_CHANNELS] = s.s2.data
        if c == N_FUSION_CHANNELS:
            if s.s5p is None:
                raise ValueError(f"sample {s.key} has no Sentinel-5P patch")
            x[i, N_IMAGE_CHANNELS] = s.s5p.data[0]
        y[i] = s.target
    return x, y


# ---- archive ---------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def write_npz(path, **arrays):
    """``np.savez`` with fixed member timestamps so identical data gives identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(value), allow_pickle=False)


def _sample_arrays(s):
    out = {"s2": s.s2.data.astype(np.float32), "target": np.float64(s.target),
           "station_id": np.str_(s.station_id), "period": np.str_(s.period),
           "center": np.asarray(s.s2.center, dtype=np.float64),
           "acquisition_time": np.str_(s.s2.acquisition_time.isoformat()
                                       if s.s2.acquisition_time else "")}
    if s.s5p is not None:
        out["s5p"] = s.s5p.data.astype(np.float32)
    if s.latents is not None:
        out["latents"] = np.str_(json.dumps(s.latents, sort_keys=True))
    return out


def _file_name(i, s):
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in f"{s.station_id}_{s.period}")
    return f"{i:06d}_{safe}.npz"


class ArchiveWriter:
    """Streams samples into a temporary directory and renames it into place on close."""

    def __init__(self, directory, manifest=None):
        self.directory = os.path.abspath(directory)
        parent = os.path.dirname(self.directory)
        os.makedirs(parent, exist_ok=True)
        self._tmp = tempfile.mkdtemp(prefix=".tmp-archive-", dir=parent)
        os.makedirs(os.path.join(self._tmp, "samples"))
        self.manifest = dict(manifest or {})
        self.files, self.keys, self.n_s5p = [], [], 0

    def add(self, s):
        name = _file_name(len(self.files), s)
        write_npz(os.path.join(self._tmp, "samples", name), **_sample_arrays(s))
        self.files.append(name)
        self.keys.append([s.station_id, s.period])
        self.n_s5p += s.s5p is not None

    def close(self):
        manifest = {"schema_version": ARCHIVE_SCHEMA_VERSION, "n_samples": len(self.files),
                    "n_with_s5p": self.n_s5p, "files": self.files, "keys": self.keys}
        manifest.update(self.manifest)
        with open(os.path.join(self._tmp, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        if os.path.exists(self.directory):
            shutil.rmtree(self.directory)
        os.replace(self._tmp, self.directory)
        return manifest

    def abort(self):
        shutil.rmtree(self._tmp, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def save_archive(directory, samples, manifest=None):
    with ArchiveWriter(directory, manifest) as w:
        for s in samples:
            w.add(s)
    return read_manifest(directory)


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FormatError(f"{directory}: not a sample archive (manifest.json missing)")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != ARCHIVE_SCHEMA_VERSION:
        raise FormatError(f"{directory}: unsupported schema version {manifest.get('schema_version')}")
    return manifest


def _load_sample(path):
    with np.load(path) as z:
        stamp = str(z["acquisition_time"])
        center = tuple(z["center"].tolist())
        tile = Sentinel2Tile(z["s2"], center=center, station_id=str(z["station_id"]),
                             acquisition_time=datetime.fromisoformat(stamp) if stamp else None)
        patch = (Sentinel5PPatch(z["s5p"], center=center, source_period=str(z["period"]))
                 if "s5p" in z.files else None)
        latents = json.loads(str(z["latents"])) if "latents" in z.files else None
        return Sample(tile, patch, float(z["target"]), str(z["station_id"]), str(z["period"]),
                      latents)


def load_archive(directory):
    manifest = read_manifest(directory)
    samples = [_load_sample(os.path.join(directory, "samples", f)) for f in manifest["files"]]
    return samples, manifest


def load_arrays(directory, variant="fusion"):
    """Load an archive straight into preallocated (X, y) arrays.

    Fusion mode skips samples without a column patch. Also returns the
    (station_id, period) keys of the loaded rows.
    """
    manifest = read_manifest(directory)
    c = N_FUSION_CHANNELS if variant == "fusion" else N_IMAGE_CHANNELS
    paths, keys = [], []
    for f, key in zip(manifest["files"], manifest["keys"]):
        paths.append(os.path.join(directory, "samples", f))
        keys.append(tuple(key))
    x = np.empty((len(paths), c, TILE_SIZE, TILE_SIZE), dtype=np.float32)
    y = np.empty(len(paths))
    keep = np.zeros(len(paths), dtype=bool)
    for i, p in enumerate(paths):
        with np.load(p) as z:
            if c == N_FUSION_CHANNELS and "s5p" not in z.files:
                continue
            x[i, :N_IMAGE_CHANNELS] = z["s2"]
            if c == N_FUSION_CHANNELS:
                x[i, N_IMAGE_CHANNELS] = z["s5p"][0]
            y[i] = float(z["target"])
            keep[i] = True
    if not keep.all():
        x, y = x[keep], y[keep]
        keys = [k for k, ok in zip(keys, keep) if ok]
    return x, y, keys
