"""IQ recordings to standardized log-power spectrograms.

Pipeline per recording: cut into fixed-length slices, STFT each slice,
take power, resize to the target image shape, log-scale, then standardize
with dataset-wide per-channel statistics.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DegenerateDataError, ShapeError, ShortRecordingWarning

LOG_EPS = 1e-12


@dataclass
class IqRecording:
    samples: np.ndarray
    sample_rate_hz: float
    center_freq_hz: float = 0.0
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise ShapeError("IQ samples must be a 1-D complex array")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample_rate_hz must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 1024
    window_size: int = 512
    hop_size: int = 512
    slice_ms: float = 16.0
    resize_shape: tuple[int, int] = (224, 224)
    window: str = "hann"

    def validate(self, patch_size: int | None = None) -> "StftParams":
        if not (0 < self.hop_size <= self.window_size <= self.fft_size):
            raise ConfigError("need 0 < hop_size <= window_size <= fft_size")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if self.slice_ms <= 0:
            raise ConfigError("slice_ms must be positive")
        if patch_size is not None and any(d % patch_size for d in self.resize_shape):
            raise ConfigError(f"resize_shape {self.resize_shape} not divisible by patch {patch_size}")
        return self


@dataclass
class Spectrogram:
    """Standardized log-power image, shape (C, H, W)."""

    pixels: np.ndarray
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


def hann_window(n: int) -> np.ndarray:
    """Symmetric Hann window with zero endpoints."""
    if n < 2:
        raise ConfigError("window length must be >= 2")
    k = np.arange((n + 1) // 2)
    half = 0.5 * (1.0 - np.cos(2.0 * np.pi * k / (n - 1)))
    # mirror so w[k] == w[n-1-k] holds bitwise
    return np.concatenate([half, half[: n // 2][::-1]])


def slice_recording(rec: IqRecording, slice_ms: float = 16.0) -> list[IqRecording]:
    """Non-overlapping slices of exactly ``slice_ms``; the remainder is dropped.

    A recording shorter than one slice yields an empty list and a
    ``ShortRecordingWarning``.
    """
    per = int(round(slice_ms * 1e-3 * rec.sample_rate_hz))
    if per <= 0:
        raise ConfigError("slice shorter than one sample")
    count = len(rec) // per
    if count == 0:
        warnings.warn(
            f"recording {rec.source_id or '<anon>'} ({rec.duration_s * 1e3:.2f} ms) is shorter "
            f"than one {slice_ms} ms slice", ShortRecordingWarning, stacklevel=2)
        return []
    return [
        IqRecording(rec.samples[i * per:(i + 1) * per], rec.sample_rate_hz, rec.center_freq_hz,
                    f"{rec.source_id}#{i}")
        for i in range(count)
    ]


def stft(seg: IqRecording | np.ndarray, params: StftParams = StftParams()) -> np.ndarray:
    """Complex STFT, shape (fft_size, frames), DC bin centred on the frequency axis."""
    x = seg.samples if isinstance(seg, IqRecording) else np.asarray(seg)
    if len(x) < params.window_size:
        raise ShapeError(f"segment of {len(x)} samples is shorter than the window")
    frames = np.lib.stride_tricks.sliding_window_view(x, params.window_size)[::params.hop_size]
    windowed = frames * hann_window(params.window_size)
    spec = np.fft.fft(windowed, n=params.fft_size, axis=1)
    return np.fft.fftshift(spec, axes=1).T


def to_log_power(stft_out: np.ndarray) -> np.ndarray:
    """ln(|X|^2 + 1e-12)."""
    return np.log(np.abs(stft_out) ** 2 + LOG_EPS)


def log_scale(power: np.ndarray) -> np.ndarray:
    """ln(P + 1e-12) for an already-squared power image."""
    return np.log(power + LOG_EPS)


def _interp_axis(m: np.ndarray, out_n: int, axis: int) -> np.ndarray:
    n = m.shape[axis]
    if out_n == n:
        return m
    if out_n == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(out_n) * (n - 1) / (out_n - 1)
    lo = np.minimum(np.floor(pos).astype(int), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    a = np.take(m, lo, axis=axis)
    b = np.take(m, hi, axis=axis)
    shape = [1] * m.ndim
    shape[axis] = out_n
    return a + frac.reshape(shape) * (b - a)


def resize_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2] < 2 or m.shape[-1] < 2:
        raise ShapeError("resize needs at least 2x2 input")
    return _interp_axis(_interp_axis(m, out_h, m.ndim - 2), out_w, m.ndim - 1)


def segment_to_image(seg: IqRecording, params: StftParams = StftParams()) -> np.ndarray:
    """One slice -> unstandardized (H, W) log-power image (STFT, resize, log)."""
    power = np.abs(stft(seg, params)) ** 2
    return log_scale(resize_bilinear(power, *params.resize_shape))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass per-channel mean and population std over an (N, C, H, W) stack."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError("expected a nonempty (N, C, H, W) stack")
    mu = images.mean(axis=(0, 2, 3))
    centred = images - mu[None, :, None, None]
    sigma = np.sqrt((centred**2).mean(axis=(0, 2, 3)))
    # a constant channel can leave rounding residue instead of an exact zero
    flat = sigma <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(flat):
        raise DegenerateDataError(f"zero-variance channel(s): {np.flatnonzero(flat).tolist()}")
    return mu, sigma


def dataset_standardize(specs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel (x - mu) / sigma with dataset-wide statistics.

    Accepts a list of (C, H, W) arrays / ``Spectrogram`` objects or a stacked
    array. Returns (mu, sigma, standardized stack).
    """
    if isinstance(specs, np.ndarray):
        stack = specs
    else:
        stack = np.stack([s.pixels if isinstance(s, Spectrogram) else np.asarray(s) for s in specs])
    stack = np.asarray(stack, dtype=np.float64)
    mu, sigma = channel_stats(stack)
    return mu, sigma, (stack - mu[None, :, None, None]) / sigma[None, :, None, None]


class ChannelStandardizer(BaseEstimator, TransformerMixin):
    """Per-channel standardization over (N, C, H, W) stacks."""

    def fit(self, X, y=None):
        self.mean_, self.scale_ = channel_stats(X)
        self.n_channels_ = len(self.mean_)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4 or X.shape[1] != self.n_channels_:
            raise ShapeError(f"expected (N, {self.n_channels_}, H, W), got {X.shape}")
        return (X - self.mean_[None, :, None, None]) / self.scale_[None, :, None, None]

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return np.asarray(X) * self.scale_[None, :, None, None] + self.mean_[None, :, None, None]


class SpectrogramTransformer(BaseEstimator, TransformerMixin):
    """Recordings -> standardized (N, 1, H, W) spectrogram stack.

    ``fit`` learns the dataset-wide mean/std of the log-power images;
    ``transform`` slices every recording and stacks the slices in order.
    """

    def __init__(self, fft_size=1024, window_size=512, hop_size=512, slice_ms=16.0,
                 resize_shape=(224, 224)):
        self.fft_size = fft_size
        self.window_size = window_size
        self.hop_size = hop_size
        self.slice_ms = slice_ms
        self.resize_shape = resize_shape

    @property
    def params_(self) -> StftParams:
        return StftParams(self.fft_size, self.window_size, self.hop_size, self.slice_ms,
                          tuple(self.resize_shape)).validate()

    def images(self, recordings) -> tuple[np.ndarray, list[str]]:
        """Unstandardized (N, 1, H, W) stack plus per-slice source ids."""
        p = self.params_
        imgs, ids = [], []
        for rec in recordings:
            for seg in slice_recording(rec, p.slice_ms):
                imgs.append(segment_to_image(seg, p))
                ids.append(seg.source_id)
        if not imgs:
            return np.zeros((0, 1, *p.resize_shape)), ids
        return np.stack(imgs)[:, None], ids

    def fit(self, recordings, y=None):
        stack, _ = self.images(recordings)
        self.mean_, self.scale_ = channel_stats(stack)
        return self

    def transform(self, recordings):
        check_is_fitted(self, "mean_")
        stack, self.source_ids_ = self.images(recordings)
        return (stack - self.mean_[None, :, None, None]) / self.scale_[None, :, None, None]

    def fit_transform(self, recordings, y=None):
        stack, self.source_ids_ = self.images(recordings)
        self.mean_, self.scale_ = channel_stats(stack)
        return (stack - self.mean_[None, :, None, None]) / self.scale_[None, :, None, None]
