"""Image-quality metrics: MSE, PSNR, SSIM, ROI contrast and point-target width.

Image metrics expect normalised B-mode images (data range 1). CNR and SNR
are computed on the linear envelope, before log compression.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.typing import ArrayLike
from skimage.metrics import structural_similarity

from rfsr.rfsim import SPEED_OF_SOUND

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a: ArrayLike, b: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def mse(a: ArrayLike, b: ArrayLike) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: ArrayLike, b: ArrayLike, data_range: float = 1.0) -> float:
    """Peak SNR in dB; identical images give +inf."""
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    err = mse(a, b)
    if err == 0:
        return math.inf
    return 10 * math.log10(data_range**2 / err)


def ssim(a: ArrayLike, b: ArrayLike, data_range: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03."""
    a, b = _pair(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if data_range <= 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    return float(structural_similarity(
        a, b,
        data_range=data_range,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        K1=SSIM_K1,
        K2=SSIM_K2,
    ))


Box = Sequence[int]  # r0, r1, c0, c1 (half-open)


@dataclass
class RoiMask:
    foreground: np.ndarray  # bool, image shape
    background: np.ndarray

    def __post_init__(self) -> None:
        self.foreground = np.asarray(self.foreground, dtype=bool)
        self.background = np.asarray(self.background, dtype=bool)
        if self.foreground.shape != self.background.shape:
            raise ValueError("foreground and background masks differ in shape")
        if not self.foreground.any() or not self.background.any():
            raise ValueError("ROI masks must be non-empty")
        if (self.foreground & self.background).any():
            raise ValueError("foreground and background ROIs overlap")

    @classmethod
    def from_boxes(cls, shape: tuple[int, int], foreground: Iterable[Box], background: Iterable[Box]) -> RoiMask:
        def paint(boxes: Iterable[Box]) -> np.ndarray:
            mask = np.zeros(shape, dtype=bool)
            for r0, r1, c0, c1 in boxes:
                mask[r0:r1, c0:c1] = True
            return mask

        return cls(paint(foreground), paint(background))


def _region_stats(img: np.ndarray, mask: RoiMask) -> tuple[float, float, float, float]:
    if img.shape != mask.foreground.shape:
        raise ValueError(f"image {img.shape} does not match ROI grid {mask.foreground.shape}")
    fg, bg = img[mask.foreground], img[mask.background]
    return float(fg.mean()), float(fg.std()), float(bg.mean()), float(bg.std())


def cnr(img: ArrayLike, mask: RoiMask) -> float:
    mu_f, sd_f, mu_b, sd_b = _region_stats(np.asarray(img, dtype=np.float64), mask)
    if sd_f == 0 or sd_b == 0:
        raise ValueError("CNR undefined: an ROI has zero standard deviation")
    return abs(mu_f - mu_b) / math.sqrt(sd_f**2 + sd_b**2)


def snr(img: ArrayLike, mask: RoiMask) -> float:
    """20*log10(mean/std) over the foreground ROI, in dB."""
    mu_f, sd_f, _, sd_b = _region_stats(np.asarray(img, dtype=np.float64), mask)
    if sd_f == 0 or sd_b == 0:
        raise ValueError("SNR undefined: an ROI has zero standard deviation")
    return 20 * math.log10(mu_f / sd_f)


@dataclass(frozen=True)
class Width:
    seconds: float
    mm: float


def fwhm(row: ArrayLike, fs: float) -> Width:
    """Full width at half maximum around the global peak of an envelope row."""
    row = np.asarray(row, dtype=np.float64)
    peak = int(np.argmax(row))
    half = row[peak] / 2
    if row[peak] <= 0:
        raise ValueError("FWHM needs a positive peak")

    i = peak
    while i > 0 and row[i] > half:
        i -= 1
    if row[i] > half:
        raise ValueError("no half-maximum crossing before the peak")
    left = i + (half - row[i]) / (row[i + 1] - row[i])

    j = peak
    while j < row.size - 1 and row[j] > half:
        j += 1
    if row[j] > half:
        raise ValueError("no half-maximum crossing after the peak")
    right = j - 1 + (row[j - 1] - half) / (row[j - 1] - row[j])

    seconds = (right - left) / fs
    return Width(seconds=seconds, mm=seconds * SPEED_OF_SOUND / 2 * 1e3)


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    cnr: float | None = None
    snr_db: float | None = None
    fwhm_s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def image_metrics(reference: ArrayLike, image: ArrayLike, data_range: float = 1.0) -> MetricReport:
    return MetricReport(
        mse=mse(reference, image),
        psnr_db=psnr(reference, image, data_range),
        ssim=ssim(reference, image, data_range),
    )


def mean_sd(values: Iterable[float]) -> dict[str, float]:
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        return {"mean": math.nan, "sd": math.nan, "n": 0}
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return {"mean": float(values.mean()), "sd": sd, "n": int(values.size)}


def aggregate(reports: Sequence[MetricReport], keys: Sequence[str] = ("mse", "psnr_db", "ssim")) -> dict[str, dict]:
    """Mean and sample SD of each scalar metric over a set of reports."""
    out = {}
    for key in keys:
        values = [getattr(r, key) for r in reports if getattr(r, key) is not None]
        out[key] = mean_sd(values)
    return out
