"""Synthetic stand-ins for the three datasets used by the pipeline.

None of these generators reproduce real captures. They produce data with
the same shapes and label conventions, seeded and bitwise reproducible:

* RRD: complex noise with band-limited OFDM-like bursts (pretraining).
* HSD: 3 x 114 x 2000 CSI-like tensors, six activity classes.
* SD: single-channel spectrograms with NR (1) / LTE (2) / noise (0) masks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import IqRecording, SpectrogramTransformer, dataset_standardize, resize_bilinear
from .errors import ConfigError, ShapeError

HSD_CLASSES = ("run", "walk", "fall", "box", "circle", "clean")
SD_CLASSES = ("noise", "NR", "LTE")
HSD_RAW_SHAPE = (3, 114, 2000)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, sample index)."""
    return np.random.default_rng([int(seed), int(index)])


# ---------------------------------------------------------------------------
# RRD


@dataclass
class SyntheticRrdConfig:
    n_recordings: int = 8
    fs_range_hz: tuple[float, float] = (10e6, 60e6)
    fc_range_hz: tuple[float, float] = (2.4e9, 2.65e9)
    duration_ms: float = 100.0
    burst_density: float = 0.5
    snr_db_range: tuple[float, float] = (15.0, 30.0)
    seed: int = 0

    def validate(self) -> "SyntheticRrdConfig":
        lo, hi = self.fs_range_hz
        if not (10e6 <= lo <= hi <= 60e6):
            raise ConfigError("fs_range_hz must lie within [10 MHz, 60 MHz]")
        lo, hi = self.fc_range_hz
        if not (2.4e9 <= lo <= hi <= 2.65e9):
            raise ConfigError("fc_range_hz must lie within [2.4 GHz, 2.65 GHz]")
        if not (0.0 <= self.burst_density < 1.0):
            raise ConfigError("burst_density must be in [0, 1)")
        if self.n_recordings < 1 or self.duration_ms <= 0:
            raise ConfigError("need n_recordings >= 1 and a positive duration")
        return self


# coarse time/frequency raster used to place bursts
_FREQ_CELLS = 32
_TIME_CELL_MS = 1.0
_SUBCARRIERS = 256


def _place_bursts(rng: np.random.Generator, n_time: int, density: float):
    covered = np.zeros((_FREQ_CELLS, n_time), dtype=bool)
    bursts = []
    while covered.mean() < density and len(bursts) < 200:
        bw = int(rng.integers(3, 13))
        f0 = int(rng.integers(0, _FREQ_CELLS - bw + 1))
        dur = int(rng.integers(3, 31))
        t0 = int(rng.integers(-dur // 2, n_time - dur // 2))
        t0c, t1c = max(t0, 0), min(t0 + dur, n_time)
        if t1c <= t0c:
            continue
        covered[f0:f0 + bw, t0c:t1c] = True
        bursts.append((f0, bw, t0c, t1c))
    return bursts


def _ofdm_burst(rng: np.random.Generator, f0: int, bw: int, n_samples: int, snr_db: float):
    per_cell = _SUBCARRIERS // _FREQ_CELLS
    lo, hi = f0 * per_cell, (f0 + bw) * per_cell
    n_sym = -(-n_samples // _SUBCARRIERS)
    grid = np.zeros((n_sym, _SUBCARRIERS), dtype=np.complex128)
    qpsk = (rng.integers(0, 2, (n_sym, hi - lo)) * 2 - 1) + 1j * (rng.integers(0, 2, (n_sym, hi - lo)) * 2 - 1)
    grid[:, lo:hi] = qpsk / np.sqrt(2)
    # subcarrier index is in centred (fftshifted) order
    sym = np.fft.ifft(np.fft.ifftshift(grid, axes=1), axis=1)
    amp = np.sqrt(10 ** (snr_db / 10) * _SUBCARRIERS)
    return (amp * sym).reshape(-1)[:n_samples]


def gen_rrd_recording(cfg: SyntheticRrdConfig, index: int) -> IqRecording:
    rng = sample_rng(cfg.seed, index)
    fs = float(rng.uniform(*cfg.fs_range_hz))
    fc = float(rng.uniform(*cfg.fc_range_hz))
    n = int(round(cfg.duration_ms * 1e-3 * fs))
    noise = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)
    x = noise
    n_time = int(np.ceil(cfg.duration_ms / _TIME_CELL_MS))
    per_cell = fs * _TIME_CELL_MS * 1e-3
    for f0, bw, t0, t1 in _place_bursts(rng, n_time, cfg.burst_density):
        s0, s1 = int(round(t0 * per_cell)), min(int(round(t1 * per_cell)), n)
        if s1 <= s0:
            continue
        snr = float(rng.uniform(*cfg.snr_db_range))
        x[s0:s1] += _ofdm_burst(rng, f0, bw, s1 - s0, snr)
    return IqRecording(x.astype(np.complex64), fs, fc, source_id=f"rrd-{cfg.seed}-{index:05d}")


def gen_rrd(cfg: SyntheticRrdConfig) -> list[IqRecording]:
    """Synthetic recordings; each one is a pure function of (cfg, index)."""
    cfg.validate()
    return [gen_rrd_recording(cfg, i) for i in range(cfg.n_recordings)]


def rrd_spectrograms(n_images: int, seed: int = 0, shape=(224, 224), burst_density: float = 0.5,
                     duration_ms: float = 100.0, snr_db_range: tuple[float, float] | None = None,
                     ) -> tuple[np.ndarray, SpectrogramTransformer]:
    """Standardized (n_images, 1, H, W) stack from as many recordings as needed.

    Recordings are generated and sliced one at a time to bound memory.
    """
    cfg = SyntheticRrdConfig(n_recordings=1, duration_ms=duration_ms, burst_density=burst_density,
                             seed=seed)
    if snr_db_range is not None:
        cfg.snr_db_range = tuple(snr_db_range)
    cfg.validate()
    tf = SpectrogramTransformer(resize_shape=tuple(shape))
    imgs = []
    i = 0
    while sum(len(b) for b in imgs) < n_images:
        stack, _ = tf.images([gen_rrd_recording(cfg, i)])
        imgs.append(stack)
        i += 1
    raw = np.concatenate(imgs)[:n_images]
    mu, sigma, std = dataset_standardize(raw)
    tf.mean_, tf.scale_ = mu, sigma
    return std, tf


# ---------------------------------------------------------------------------
# HSD


@dataclass
class HsdSample:
    csi: np.ndarray
    label: int


# (band centre, band width, cycles per recording, phase); run/walk overlap on purpose
_HSD_TEMPLATES = (
    (44.0, 14.0, 9.0, 0.0),
    (50.0, 14.0, 7.0, 0.5),
    (82.0, 10.0, 2.0, 1.0),
    (24.0, 9.0, 12.0, 1.5),
    (64.0, 12.0, 4.0, 2.0),
    (98.0, 9.0, 5.5, 2.5),
)
_HSD_CHANNEL_GAIN = (1.0, 0.8, 1.2)


def hsd_template(label: int, raw_shape=HSD_RAW_SHAPE) -> np.ndarray:
    """Noise-free class template, shape raw_shape."""
    c, s, t = raw_shape
    centre, width, cycles, phase = _HSD_TEMPLATES[label]
    sub = np.arange(s)[:, None]
    time = np.arange(t)[None, :]
    band = np.exp(-0.5 * ((sub - centre * s / 114.0) / (width * s / 114.0)) ** 2)
    wave = np.sin(2 * np.pi * cycles * time / t + phase + 0.05 * sub)
    base = 1.0 + 1.5 * band * wave
    return np.stack([g * base for g in _HSD_CHANNEL_GAIN[:c]] + [base] * max(0, c - 3))


def iter_hsd(n_per_class: int, seed: int, noise: float = 0.3,
             raw_shape=HSD_RAW_SHAPE) -> Iterator[HsdSample]:
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    templates = [hsd_template(c, raw_shape) for c in range(len(HSD_CLASSES))]
    for i in range(n_per_class * len(HSD_CLASSES)):
        label = i % len(HSD_CLASSES)
        x = templates[label]
        if noise:
            x = x + noise * sample_rng(seed, i).standard_normal(x.shape)
        yield HsdSample(np.array(x, dtype=np.float64), label)


def gen_hsd(n_per_class: int, seed: int, noise: float = 0.3, raw_shape=HSD_RAW_SHAPE) -> list[HsdSample]:
    """Balanced CSI-like samples, labels cycling through the six classes."""
    return list(iter_hsd(n_per_class, seed, noise, raw_shape))


def resize_csi(sample: HsdSample | np.ndarray, out_shape=(224, 224)) -> np.ndarray:
    """Per-channel bilinear resize of a raw (3, 114, 2000) tensor."""
    x = sample.csi if isinstance(sample, HsdSample) else np.asarray(sample)
    if x.ndim != 3:
        raise ShapeError(f"expected a (C, subcarriers, time) tensor, got {x.shape}")
    return resize_bilinear(x, *out_shape)


def hsd_dataset(n_per_class: int, seed: int, noise: float = 0.3, out_shape=(224, 224),
                raw_shape=HSD_RAW_SHAPE):
    """Resized + dataset-standardized (N, 3, H, W) stack, labels, (mu, sigma)."""
    xs, ys = [], []
    for s in iter_hsd(n_per_class, seed, noise, raw_shape):
        xs.append(resize_csi(s, out_shape))
        ys.append(s.label)
    mu, sigma, stack = dataset_standardize(np.stack(xs))
    return stack, np.array(ys, dtype=np.int64), (mu, sigma)


# ---------------------------------------------------------------------------
# SD


@dataclass
class SdSample:
    spectrogram: np.ndarray
    label_mask: np.ndarray


def _time_occupancy(rng: np.random.Generator, width: int, rate: float) -> np.ndarray:
    slot = max(1, width // 16)
    n_slots = -(-width // slot)
    on = rng.random(n_slots) < rate
    return np.repeat(on, slot)[:width]


def sd_raw_sample(seed: int, index: int, shape=(224, 224), occupancy=(0.4, 0.9),
                  level_range=(4.0, 7.0)) -> tuple[np.ndarray, np.ndarray]:
    """Unstandardized log-power image and its label mask."""
    rng = sample_rng(seed, index)
    h, w = shape
    img = rng.standard_normal((h, w))
    mask = np.zeros((h, w), dtype=np.int64)
    nr_w = int(rng.integers(int(0.15 * h), int(0.35 * h) + 1))
    lte_w = int(rng.integers(int(0.10 * h), int(0.25 * h) + 1))
    guard = int(rng.integers(0, max(1, h // 32) + 1))
    total = nr_w + guard + lte_w
    start = int(rng.integers(0, h - total + 1))
    if rng.random() < 0.5:
        nr_rows, lte_rows = (start, start + nr_w), (start + nr_w + guard, start + total)
    else:
        lte_rows, nr_rows = (start, start + lte_w), (start + lte_w + guard, start + total)
    cols = np.arange(w)
    for label, (r0, r1) in ((1, nr_rows), (2, lte_rows)):
        on = _time_occupancy(rng, w, float(rng.uniform(*occupancy)))
        level = float(rng.uniform(*level_range))
        texture = np.zeros(w)
        if label == 2:
            texture = 0.5 * (cols % 7 == 0)  # reference-signal-like stripes
        block = np.zeros((h, w), dtype=bool)
        block[r0:r1, :] = on[None, :]
        img = img + block * (level + texture[None, :])
        mask[block] = label
    return img, mask


def gen_sd(n: int, seed: int, shape=(224, 224), occupancy=(0.4, 0.9),
           level_range=(4.0, 7.0)) -> tuple[list[SdSample], tuple[np.ndarray, np.ndarray]]:
    """NR/LTE segmentation samples standardized over the generated set."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    raws, masks = zip(*(sd_raw_sample(seed, i, shape, occupancy, level_range) for i in range(n)))
    mu, sigma, stack = dataset_standardize(np.stack(raws)[:, None])
    return [SdSample(stack[i], masks[i]) for i in range(n)], (mu, sigma)


# ---------------------------------------------------------------------------
# splits and manifests


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    """Deterministic train/val/test split from a seed-derived shuffle."""
    perm = np.random.default_rng([int(seed), 0x5EED]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def split_of(n: int, seed: int) -> list[str]:
    out = [""] * n
    for name, idx in split_indices(n, seed).items():
        for i in idx:
            out[i] = name
    return out


@dataclass
class Manifest:
    kind: str
    seed: int
    config: dict
    samples: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)
    synthetic: bool = True

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        doc = json.loads(Path(path).read_text())
        return cls(**doc)

    def select(self, split: str | None) -> list[dict]:
        return [s for s in self.samples if split is None or s.get("split") == split]
