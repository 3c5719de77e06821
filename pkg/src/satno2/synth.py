"""Desk-scale synthetic data with a known generating process.

Each sample carries a 12-band image with Gaussian "emitter" blobs on a
land-cover background and a smooth column-density field whose level grows
with the total emitter intensity. The target is

    target = ALPHA * sum(intensities) + BETA * mean(field) + noise

so it is learnable by construction and can be recomputed exactly from the
stored latent factors.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import N_FUSION_CHANNELS, Sample
from .resample import upsample_bilinear
from .s2 import BAND_ORDER, TILE_SIZE, Sentinel2Tile
from .s5p import Sentinel5PPatch

ALPHA = 0.5  # ug/m^3 per unit emitter intensity
BETA = 4.0e5  # ug/m^3 per mol/m^2 of mean column density
COLUMN_BASE = 3.0e-5  # mol/m^2
COLUMN_PER_INTENSITY = 1.0e-6  # mol/m^2 per unit emitter intensity
COLUMN_REGIONAL = 1.0e-5  # half-width of the uniform regional offset, mol/m^2
EMITTER_GAIN = 300.0  # peak reflectance counts per unit intensity
SYNTH_CENTER = (48.0, 11.0)

# Surface reflectance signatures (L2A counts) in BAND_ORDER.
SURFACES = {
    "vegetation": [300, 400, 700, 400, 1100, 2600, 3000, 3300, 3400, 3400, 1700, 800],
    "soil": [900, 1100, 1500, 1900, 2200, 2400, 2500, 2600, 2700, 2700, 3300, 2600],
    "water": [600, 700, 600, 400, 300, 250, 200, 180, 160, 150, 100, 80],
    "urban": [1300, 1400, 1500, 1600, 1700, 1800, 1900, 2000, 2000, 2000, 2200, 2100],
}
EMITTER_SIGNATURE = np.array([0.5, 0.6, 0.7, 0.8, 0.8, 0.8, 0.8, 0.8, 0.9, 0.9, 1.6, 1.8])

LCC_CLASSES = ("vegetation", "bare soil", "water bodies", "built-up",
               "industrial", "dense industrial", "heavy emission")

assert len(EMITTER_SIGNATURE) == len(BAND_ORDER)


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    image_size: int = TILE_SIZE
    n_emitters: tuple = (0, 5)
    intensity: tuple = (1.0, 10.0)
    background_noise: float = 50.0
    target_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if self.image_size != TILE_SIZE:
            raise ValueError(f"image size is fixed at {TILE_SIZE}")
        lo, hi = self.n_emitters
        if not (0 <= lo < hi):
            raise ValueError(f"n_emitters range must satisfy 0 <= lo < hi, got {self.n_emitters}")
        if not (0 < self.intensity[0] < self.intensity[1]):
            raise ValueError(f"intensity range must satisfy 0 < lo < hi, got {self.intensity}")
        if self.background_noise < 0 or self.target_noise < 0:
            raise ValueError("noise scales must be non-negative")


def constants():
    return {"alpha": ALPHA, "beta": BETA, "column_base": COLUMN_BASE,
            "column_per_intensity": COLUMN_PER_INTENSITY, "column_regional": COLUMN_REGIONAL,
            "emitter_gain": EMITTER_GAIN}


def manifest_entry(config):
    return {"synthetic": True, "synth_config": asdict(config), "synth_constants": constants()}


def _surface_weights(rng, size):
    coarse = rng.gamma(1.0, 1.0, size=(len(SURFACES), 8, 8)) * rng.dirichlet(np.ones(len(SURFACES)))[:, None, None]
    f = size // 8
    w = np.stack([upsample_bilinear(c, f) for c in coarse])
    return w / w.sum(axis=0, keepdims=True)


def _image(rng, config, n, intensities):
    size = config.image_size
    weights = _surface_weights(rng, size)
    sig = np.array(list(SURFACES.values()), dtype=np.float64)  # (surfaces, bands)
    img = np.einsum("sb,shw->bhw", sig, weights)
    yy, xx = np.mgrid[0:size, 0:size]
    positions = rng.uniform(12, size - 12, size=(n, 2))
    sigmas = rng.uniform(2.5, 4.5, size=n)
    blobs = np.zeros((size, size))
    for (py, px), s, inten in zip(positions, sigmas, intensities):
        blobs += inten * np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * s * s))
    img += EMITTER_GAIN * EMITTER_SIGNATURE[:, None, None] * blobs[None]
    img += rng.normal(0.0, config.background_noise, size=img.shape)
    cover = weights.mean(axis=(1, 2))
    return img.astype(np.float32), positions, sigmas, cover


def _column_field(rng, level, size):
    t = (np.arange(size) - (size - 1) / 2.0) / size
    ramp_y, ramp_x = rng.uniform(-0.3, 0.3, size=2)
    ky, kx = rng.integers(1, 3, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.1 * np.cos(2 * np.pi * (ky * t[:, None] + kx * t[None, :]) + phase)
    return level * (1.0 + ramp_y * t[:, None] + ramp_x * t[None, :] + wave)


def synth_target(latents, alpha=ALPHA, beta=BETA):
    """Recompute a target from its stored latents."""
    return alpha * float(np.sum(latents["intensities"])) + beta * latents["field_mean"] + latents["noise"]


def _draw(config, seq):
    rng = np.random.default_rng(seq)
    n = int(rng.integers(config.n_emitters[0], config.n_emitters[1] + 1))
    intensities = rng.uniform(*config.intensity, size=n)
    img, positions, sigmas, cover = _image(rng, config, n, intensities)
    regional = rng.uniform(-COLUMN_REGIONAL, COLUMN_REGIONAL)
    level = COLUMN_BASE + COLUMN_PER_INTENSITY * intensities.sum() + regional
    field = _column_field(rng, level, config.image_size)
    noise = float(rng.normal(0.0, config.target_noise))
    latents = {"intensities": intensities.tolist(), "positions": positions.tolist(),
               "sigmas": sigmas.tolist(), "regional_offset": float(regional),
               "field_mean": float(field.mean()), "noise": noise,
               "surface_cover": dict(zip(SURFACES, cover.tolist()))}
    return img, field, latents


def iter_synth(config):
    """Yield samples one at a time; sample ``i`` does not depend on ``n_samples``."""
    for i, seq in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_samples)):
        img, field, latents = _draw(config, seq)
        sid = f"synth-{i:05d}"
        tile = Sentinel2Tile(img, center=SYNTH_CENTER, station_id=sid)
        patch = Sentinel5PPatch(field[None].astype(np.float32), center=SYNTH_CENTER)
        yield Sample(tile, patch, synth_target(latents), sid, "full", latents)


def synth_generate(config):
    return list(iter_synth(config))


def synth_arrays(config):
    """Fusion-layout (X, y, latents) without materialising ``Sample`` objects."""
    x = np.empty((config.n_samples, N_FUSION_CHANNELS, config.image_size, config.image_size),
                 dtype=np.float32)
    y = np.empty(config.n_samples)
    latents = []
    for i, seq in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_samples)):
        img, field, lat = _draw(config, seq)
        x[i, :-1] = img
        x[i, -1] = field
        y[i] = synth_target(lat)
        latents.append(lat)
    return x, y, latents


def landcover_labels(latents, classes=LCC_CLASSES):
    """Multi-label land-cover annotation derived from generator latents."""
    cover = latents["surface_cover"]
    inten = np.asarray(latents["intensities"])
    rules = {
        "vegetation": cover["vegetation"] > 0.3,
        "bare soil": cover["soil"] > 0.3,
        "water bodies": cover["water"] > 0.3,
        "built-up": cover["urban"] > 0.3,
        "industrial": bool((inten >= 5.0).any()),
        "dense industrial": inten.size >= 3,
        "heavy emission": inten.sum() >= 20.0,
    }
    return np.array([rules[c] for c in classes], dtype=np.float32)


def synth_landcover(n_samples, seed=0, classes=LCC_CLASSES, config=None):
    """12-band tiles with multi-label land-cover annotations, shape (n, len(classes))."""
    config = config or SynthConfig(n_samples=n_samples, seed=seed)
    x = np.empty((n_samples, len(BAND_ORDER), config.image_size, config.image_size), dtype=np.float32)
    y = np.empty((n_samples, len(classes)), dtype=np.float32)
    # offset the entropy so pretraining tiles never coincide with regression samples
    for i, seq in enumerate(np.random.SeedSequence([seed, 0x1CC]).spawn(n_samples)):
        img, _, lat = _draw(config, seq)
        x[i] = img
        y[i] = landcover_labels(lat, classes)
    return x, y
