from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike
from scipy.signal import get_window, hilbert

if TYPE_CHECKING:
    from rfsr.rfsim import RfLine

logger = logging.getLogger(__name__)

HALF_AMPLITUDE = 0.5  # -6 dB on the amplitude spectrum


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=32)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=64)
def _twiddles(size: int) -> np.ndarray:
    return np.exp(-2j * np.pi * np.arange(size // 2) / size)


def fft(x: ArrayLike) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT over the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if not is_power_of_two(n):
        raise ValueError(f"fft length must be a power of two, got {n}")
    batch = x.shape[:-1]
    y = x[..., _bit_reversal(n)]
    size = 2
    while size <= n:
        half = size // 2
        y = y.reshape(*batch, n // size, size)
        even = y[..., :half]
        odd = y[..., half:] * _twiddles(size)
        y = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return y.reshape(x.shape)


def ifft(X: ArrayLike) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    win_length: int = 64
    hop: int = 32
    window: str = "hamming"
    center: bool = True
    onesided: bool = True

    def __post_init__(self) -> None:
        if not (0 < self.hop <= self.win_length <= self.n_fft):
            raise ValueError(
                f"stft requires hop <= win_length <= n_fft, got "
                f"{self.hop}/{self.win_length}/{self.n_fft}"
            )
        if not is_power_of_two(self.n_fft):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1 if self.onesided else self.n_fft

    @property
    def pad(self) -> int:
        return self.win_length // 2 if self.center else 0

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        if padded < self.win_length:
            raise ValueError(
                f"signal of length {length} is shorter than the window ({self.win_length})"
            )
        return (padded - self.win_length) // self.hop + 1

    def analysis_window(self) -> np.ndarray:
        # periodic form: 0.54 - 0.46 cos(2 pi n / w)
        return get_window(self.window, self.win_length, fftbins=True)


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # T x F complex
    config: StftConfig
    fs: float
    length: int


@dataclass
class MagPhaseTensor:
    """Polar split of a spectrogram; arrays may be numpy or torch, batched or not."""

    mag: ArrayLike
    phase: ArrayLike


@dataclass(frozen=True)
class Bandwidth:
    f_low: float
    f_high: float
    f_peak: float
    fractional: float


def stft_frames(x: ArrayLike, cfg: StftConfig) -> np.ndarray:
    """STFT over the last axis; returns (..., T, F)."""
    x = np.asarray(x, dtype=np.float64)
    n_frames = cfg.n_frames(x.shape[-1])
    widths = [(0, 0)] * (x.ndim - 1) + [(cfg.pad, cfg.pad)]
    padded = np.pad(x, widths)
    idx = cfg.hop * np.arange(n_frames)[:, None] + np.arange(cfg.win_length)[None, :]
    frames = padded[..., idx] * cfg.analysis_window()
    buf = np.zeros((*frames.shape[:-1], cfg.n_fft), dtype=np.complex128)
    buf[..., : cfg.win_length] = frames
    return fft(buf)[..., : cfg.n_bins]


def stft(line: RfLine | np.ndarray, cfg: StftConfig, fs: float | None = None) -> ComplexSpectrogram:
    samples = np.asarray(getattr(line, "samples", line), dtype=np.float64)
    fs = getattr(line, "fs", fs)
    return ComplexSpectrogram(
        data=stft_frames(samples, cfg), config=cfg, fs=fs, length=samples.shape[-1]
    )


def istft_frames(data: ArrayLike, cfg: StftConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of `stft_frames`; returns (..., length)."""
    data = np.asarray(data, dtype=np.complex128)
    n_frames = data.shape[-2]
    if cfg.onesided:
        mirrored = np.conj(data[..., cfg.n_fft // 2 - 1 : 0 : -1])
        data = np.concatenate([data, mirrored], axis=-1)
    frames = ifft(data).real[..., : cfg.win_length]
    window = cfg.analysis_window()
    frames = frames * window

    total = (n_frames - 1) * cfg.hop + cfg.win_length
    if cfg.pad + length > total:
        raise ValueError(
            f"{n_frames} frames cover {total} samples, cannot rebuild length {length}"
        )
    out = np.zeros((*frames.shape[:-2], total))
    norm = np.zeros(total)
    for t in range(n_frames):
        start = t * cfg.hop
        out[..., start : start + cfg.win_length] += frames[..., t, :]
        norm[start : start + cfg.win_length] += window**2

    keep = slice(cfg.pad, cfg.pad + length)
    if norm[keep].min() < 1e-12:
        raise ValueError("overlap-add normalisation vanishes inside the signal")
    return out[..., keep] / norm[keep]


def istft(spec: ComplexSpectrogram) -> np.ndarray:
    return istft_frames(spec.data, spec.config, spec.length)


def to_polar(z: ArrayLike) -> MagPhaseTensor:
    z = np.asarray(getattr(z, "data", z))
    phase = np.angle(z)
    mag = np.abs(z)
    # keep the interval half-open at -pi
    phase = np.where(phase <= -np.pi, phase + 2 * np.pi, phase)
    # signed zeros would otherwise map to pi
    phase = np.where(mag == 0, 0.0, phase)
    return MagPhaseTensor(mag=mag, phase=phase)


def from_polar(polar: MagPhaseTensor) -> np.ndarray:
    mag = np.asarray(polar.mag)
    phase = np.asarray(polar.phase)
    return mag * np.exp(1j * phase)


def envelope(x: ArrayLike, axis: int = -1) -> np.ndarray:
    return np.abs(hilbert(np.asarray(x, dtype=np.float64), axis=axis))


def amplitude_spectrum(pulse: ArrayLike, fs: float, n_fft: int = 1 << 16) -> tuple[np.ndarray, np.ndarray]:
    pulse = np.asarray(pulse, dtype=np.float64)
    if pulse.size > n_fft:
        raise ValueError(f"pulse of {pulse.size} samples exceeds n_fft={n_fft}")
    buf = np.zeros(n_fft)
    buf[: pulse.size] = pulse
    spectrum = np.abs(fft(buf)[: n_fft // 2 + 1])
    freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
    return freqs, spectrum


def measure_bandwidth(pulse: ArrayLike, fs: float, fc: float | None = None, n_fft: int = 1 << 16) -> Bandwidth:
    freqs, spectrum = amplitude_spectrum(pulse, fs, n_fft)
    return spectrum_bandwidth(freqs, spectrum, fc)


def spectrum_bandwidth(freqs: np.ndarray, spectrum: np.ndarray, fc: float | None = None) -> Bandwidth:
    """-6 dB band around the spectral peak, edges linearly interpolated.

    Edges that never cross half amplitude clamp to DC or Nyquist.
    """
    peak = int(np.argmax(spectrum))
    if spectrum[peak] <= 0:
        raise ValueError("pulse has an all-zero spectrum")
    a = spectrum / spectrum[peak]

    i = peak
    while i > 0 and a[i] >= HALF_AMPLITUDE:
        i -= 1
    if a[i] >= HALF_AMPLITUDE:
        f_low = freqs[0]
    else:
        f_low = freqs[i] + (HALF_AMPLITUDE - a[i]) / (a[i + 1] - a[i]) * (freqs[i + 1] - freqs[i])

    j = peak
    while j < a.size - 1 and a[j] >= HALF_AMPLITUDE:
        j += 1
    if a[j] >= HALF_AMPLITUDE:
        f_high = freqs[-1]
    else:
        f_high = freqs[j - 1] + (a[j - 1] - HALF_AMPLITUDE) / (a[j - 1] - a[j]) * (freqs[j] - freqs[j - 1])

    ref = fc if fc is not None else 0.5 * (f_low + f_high)
    return Bandwidth(
        f_low=float(f_low),
        f_high=float(f_high),
        f_peak=float(freqs[peak]),
        fractional=float((f_high - f_low) / ref),
    )
