"""STFT preprocessing: traces in, normalized multi-plane spectrogram images out.

The pipeline per channel: Hann-windowed frames, radix-2 FFT, magnitude, crop to
freq_max_hz, log1p compression, division by a frozen global scale with clipping
to [0, 1], then block-averaging down to the configured (F, T) image. The scale
is fitted once per scenario from a calibration batch and reused everywhere so
amplitude information stays comparable across images.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

_BITREV_CACHE: dict[int, np.ndarray] = {}


def _bitrev_indices(n):
    idx = _BITREV_CACHE.get(n)
    if idx is None:
        idx = np.zeros(1, dtype=np.intp)
        while idx.size < n:
            idx = np.concatenate([2 * idx, 2 * idx + 1])
        _BITREV_CACHE[n] = idx
    return idx


def fft(x) -> np.ndarray:
    """Iterative radix-2 Cooley-Tukey DFT along the last axis (power-of-two length)."""
    a = np.asarray(x).astype(complex)
    n = a.shape[-1]
    if n == 0 or n & (n - 1):
        raise ValueError(f"fft length must be a power of two, got {n}")
    a = a[..., _bitrev_indices(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        view = a.reshape(-1, n // m, m)
        u = view[..., :half].copy()
        t = view[..., half:] * tw
        view[..., :half] = u + t
        view[..., half:] = u - t
        m <<= 1
    return a


def ifft(x) -> np.ndarray:
    a = np.asarray(x)
    return np.conj(fft(np.conj(a))) / a.shape[-1]


@dataclass(frozen=True)
class StftParams:
    """Knobs for the trace -> spectrogram transform.

    `scale` is the frozen global normalization constant (log-magnitude units);
    None means it still has to be fitted. The paper-scale 224x224 shape is a
    matter of setting out_freq_bins / out_time_bins.
    """

    window_len: int = 512
    hop: int = 256
    freq_max_hz: float = 80_000.0
    out_freq_bins: int = 64
    out_time_bins: int = 64
    scale: float | None = None
    percentile: float = 99.9

    def validate(self):
        if self.window_len < 2 or self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len must be a power of two, got {self.window_len}")
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.out_freq_bins < 1 or self.out_time_bins < 1:
            raise ValueError("output bins must be >= 1")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass
class Spectrogram:
    """3 x F x T normalized magnitudes plus physical axes (Hz / seconds per bin)."""

    values: np.ndarray
    freq_axis: np.ndarray
    time_axis: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _raw_freq_bins(params: StftParams, sample_rate: float) -> int:
    """Number of FFT bins kept: DC up to freq_max_hz inclusive."""
    if params.freq_max_hz > sample_rate / 2:
        raise ValueError(
            f"freq_max_hz {params.freq_max_hz} above Nyquist {sample_rate / 2}"
        )
    per_bin = sample_rate / params.window_len
    return min(int(params.freq_max_hz / per_bin) + 1, params.window_len // 2 + 1)


def _block_bounds(n_in: int, n_out: int) -> np.ndarray:
    """Start index of each output block; block j covers [lo[j], max(lo[j]+1, lo[j+1]))."""
    return (np.arange(n_out + 1) * n_in) // n_out


def _resample_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    """Block-average down to n_out along axis; repeats nearest entries when growing."""
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    bounds = _block_bounds(n_in, n_out)
    moved = np.moveaxis(a, axis, 0)
    out = np.empty((n_out,) + moved.shape[1:], dtype=a.dtype)
    for j in range(n_out):
        lo, hi = bounds[j], max(bounds[j] + 1, bounds[j + 1])
        out[j] = moved[lo:hi].mean(axis=0)
    return np.moveaxis(out, 0, axis)


def _frame(signal: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    n = signal.shape[-1]
    if n < window_len:
        raise ValueError(f"trace of {n} samples shorter than one {window_len} window")
    n_frames = (n - window_len) // hop + 1
    stride = signal.strides[-1]
    return np.lib.stride_tricks.as_strided(
        signal, (n_frames, window_len), (hop * stride, stride), writeable=False
    )


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def log_magnitudes(channels: np.ndarray, sample_rate: float, params: StftParams):
    """Per-channel log1p STFT magnitudes cropped to freq_max_hz: (C, F_raw, T_raw)."""
    params.validate()
    channels = np.asarray(channels, dtype=np.float64)
    n_keep = _raw_freq_bins(params, sample_rate)
    win = _hann(params.window_len)
    planes = []
    for ch in channels:
        frames = _frame(ch, params.window_len, params.hop) * win
        mag = np.abs(fft(frames))[:, :n_keep]  # (T_raw, F_raw)
        planes.append(np.log1p(mag).T)
    return np.stack(planes)


def fit_scale(channel_batches, sample_rate: float, params: StftParams) -> float:
    """Frozen normalization constant: the configured percentile of calibration log-magnitudes."""
    pool = [
        log_magnitudes(ch, sample_rate, params).ravel() for ch in channel_batches
    ]
    value = float(np.percentile(np.concatenate(pool), params.percentile))
    return value if value > 0 else 1.0


def stft_spectrogram(channels, sample_rate: float, params: StftParams) -> Spectrogram:
    """Full transform of one 3-channel trace into a normalized Spectrogram."""
    if params.scale is None:
        raise ValueError("params.scale is unset; fit it on a calibration batch first")
    raw = log_magnitudes(channels, sample_rate, params)
    norm = np.clip(raw / params.scale, 0.0, 1.0)
    out = _resample_axis(norm, params.out_freq_bins, axis=1)
    out = _resample_axis(out, params.out_time_bins, axis=2)

    n_keep = raw.shape[1]
    fbounds = _block_bounds(n_keep, params.out_freq_bins)
    freq_axis = np.minimum(fbounds[:-1], n_keep - 1) * sample_rate / params.window_len
    n_frames = raw.shape[2]
    tbounds = _block_bounds(n_frames, params.out_time_bins)
    time_axis = np.minimum(tbounds[:-1], n_frames - 1) * params.hop / sample_rate
    return Spectrogram(np.ascontiguousarray(out), freq_axis, time_axis)


def freq_to_row(hz: float, sample_rate: float, params: StftParams) -> int:
    """Output row whose raw-bin block contains the FFT bin nearest `hz`."""
    n_keep = _raw_freq_bins(params, sample_rate)
    b = int(round(hz * params.window_len / sample_rate))
    b = min(max(b, 0), n_keep - 1)
    los = _block_bounds(n_keep, params.out_freq_bins)[:-1]
    return int(np.searchsorted(los, b, side="right") - 1)


def row_center_hz(row: int, sample_rate: float, params: StftParams) -> float:
    """Frequency of the center raw bin of an output row (a safe spot for planted tones)."""
    n_keep = _raw_freq_bins(params, sample_rate)
    bounds = _block_bounds(n_keep, params.out_freq_bins)
    lo, hi = bounds[row], max(bounds[row] + 1, bounds[row + 1])
    return ((lo + hi - 1) // 2) * sample_rate / params.window_len


def frame_to_col(frame: int, n_frames: int, params: StftParams) -> int:
    los = _block_bounds(n_frames, params.out_time_bins)[:-1]
    return int(np.searchsorted(los, min(frame, n_frames - 1), side="right") - 1)


class SpectrogramTransformer(TransformerMixin, BaseEstimator):
    """Trace -> normalized spectrogram arrays, sklearn style.

    fit() learns the frozen normalization scale from the calibration traces;
    transform() maps traces (objects with .channels and .sample_rate) to a
    float64 array of shape (n, 3, F, T).
    """

    def __init__(self, window_len=512, hop=256, freq_max_hz=80_000.0,
                 out_freq_bins=64, out_time_bins=64, scale=None, percentile=99.9):
        self.window_len = window_len
        self.hop = hop
        self.freq_max_hz = freq_max_hz
        self.out_freq_bins = out_freq_bins
        self.out_time_bins = out_time_bins
        self.scale = scale
        self.percentile = percentile

    def _params(self, scale) -> StftParams:
        return StftParams(
            window_len=self.window_len,
            hop=self.hop,
            freq_max_hz=self.freq_max_hz,
            out_freq_bins=self.out_freq_bins,
            out_time_bins=self.out_time_bins,
            scale=scale,
            percentile=self.percentile,
        )

    def fit(self, X, y=None):
        if self.scale is not None:
            self.scale_ = float(self.scale)
            return self
        if len(X) == 0:
            raise ValueError("cannot fit the normalization scale on an empty batch")
        params = self._params(None)
        self.scale_ = fit_scale(
            [t.channels for t in X], X[0].sample_rate, params
        )
        return self

    def transform(self, X):
        if not hasattr(self, "scale_"):
            raise NotFittedError("SpectrogramTransformer: call fit() first")
        params = self._params(self.scale_)
        out = np.stack(
            [stft_spectrogram(t.channels, t.sample_rate, params).values for t in X]
        )
        return out

    def fitted_params(self) -> StftParams:
        if not hasattr(self, "scale_"):
            raise NotFittedError("SpectrogramTransformer: call fit() first")
        return self._params(self.scale_)


def spectrogram_to_csv(spec: Spectrogram, path):
    """One row per cell: freq_bin,time_bin,plane,value."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("freq_bin,time_bin,plane,value\n")
        C, F, T = spec.values.shape
        for f in range(F):
            for t in range(T):
                for c in range(C):
                    fh.write(f"{f},{t},{c},{float(spec.values[c, f, t])!r}\n")
