"""B-mode rendering and PGM export."""

from __future__ import annotations

import io
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from rfsr.dataset import read_bytes, write_atomic
from rfsr.dsp import envelope
from rfsr.errors import DataError
from rfsr.rfsim import SPEED_OF_SOUND, RfLine


@dataclass
class BmodeImage:
    pixels: np.ndarray  # depth x lateral, in [0, 1]
    dynamic_range_db: float
    mm_per_pixel: tuple[float, float]  # (depth, lateral)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _stack(lines: Sequence[RfLine]) -> tuple[np.ndarray, float]:
    if not lines:
        raise ValueError("no lines to render")
    fs = lines[0].fs
    length = lines[0].samples.size
    for line in lines:
        if line.fs != fs or line.samples.size != length:
            raise ValueError("lines disagree on sampling rate or length")
    ordered = sorted(lines, key=lambda line: line.meta.line_index)
    return np.stack([line.samples for line in ordered], axis=1), fs


def envelope_image(lines: Sequence[RfLine]) -> np.ndarray:
    """Linear envelope, depth x lateral, columns in line-index order."""
    rf, _ = _stack(lines)
    return envelope(rf, axis=0)


def render_bmode(
    lines: Sequence[RfLine],
    dynamic_range_db: float = 60.0,
    pitch_m: float | None = None,
) -> BmodeImage:
    if dynamic_range_db <= 0:
        raise ValueError(f"dynamic range must be positive, got {dynamic_range_db}")
    rf, fs = _stack(lines)
    env = envelope(rf, axis=0)
    peak = env.max()
    if peak <= 0:
        raise ValueError("cannot render an all-zero image")
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(env / peak)
    db = np.clip(db, -dynamic_range_db, 0.0)
    depth_mm = SPEED_OF_SOUND / (2 * fs) * 1e3
    return BmodeImage(
        pixels=(db + dynamic_range_db) / dynamic_range_db,
        dynamic_range_db=dynamic_range_db,
        mm_per_pixel=(depth_mm, (pitch_m or 0.0) * 1e3),
    )


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.floor(255 * np.clip(pixels, 0.0, 1.0) + 0.5).astype(np.uint8)


def export_image(img: BmodeImage | np.ndarray, path: Path) -> Path:
    """Write an 8-bit binary PGM (P5)."""
    pixels = img.pixels if isinstance(img, BmodeImage) else np.asarray(img)
    buf = io.BytesIO()
    Image.fromarray(quantize(pixels)).save(buf, format="PPM")
    write_atomic(path, buf.getvalue())
    return Path(path)


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(read_bytes(path))) as im:
            return np.array(im.convert("L"))
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"{path}: not a readable PGM: {e}") from e


def compose_triptych(images: Sequence[BmodeImage], gap: int = 4) -> BmodeImage:
    """Side-by-side panels (truth | prediction | input) separated by black gaps."""
    if not images:
        raise ValueError("nothing to compose")
    rows = images[0].shape[0]
    if any(img.shape[0] != rows for img in images):
        raise ValueError("panels differ in height")
    spacer = np.zeros((rows, gap))
    panels = []
    for i, img in enumerate(images):
        if i:
            panels.append(spacer)
        panels.append(img.pixels)
    return BmodeImage(
        pixels=np.concatenate(panels, axis=1),
        dynamic_range_db=images[0].dynamic_range_db,
        mm_per_pixel=images[0].mm_per_pixel,
    )
