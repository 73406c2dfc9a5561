"""Input-vs-truth and prediction-vs-truth comparison over held-out phantoms.

The dataset supplies truth (wide band) and input (narrow band); the
prediction file carries the same inputs in its low channel and the model's
reconstruction in its high channel.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rfsr.dataset import read_bytes, write_atomic
from rfsr.dsp import amplitude_spectrum, spectrum_bandwidth
from rfsr.errors import DataError
from rfsr.imaging import BmodeImage, compose_triptych, envelope_image, export_image, render_bmode
from rfsr.metrics import RoiMask, aggregate, cnr, fwhm, image_metrics, mean_sd, snr
from rfsr.rfsim import SPEED_OF_SOUND, PairedDataset, PhantomKind, RfLine, line_positions

logger = logging.getLogger(__name__)

SOURCES = ("truth", "prediction", "input")
COMPARISONS = {"input_vs_truth": "input", "prediction_vs_truth": "prediction"}
REPORT_NAME = "report.json"
TABLE_NAME = "report.csv"
CSV_COLUMNS = ["phantom_id", "kind", "comparison", "mse", "psnr_db", "ssim", "cnr", "snr_db"]


@dataclass
class PhantomLines:
    phantom_id: str
    record: dict
    lines: dict[str, list[RfLine]] = field(default_factory=dict)

    @property
    def kind(self) -> PhantomKind:
        return PhantomKind(self.record.get("kind", PhantomKind.SPECKLE_CYST.value))

    @property
    def n_lines(self) -> int:
        return len(self.lines["truth"])


def align(dataset: PairedDataset, predictions: PairedDataset) -> list[PhantomLines]:
    """Group prediction lines with their truth/input counterparts, per phantom.

    Every prediction must name a pair of `dataset` and carry its input line
    unchanged.
    """
    index = {(lo.meta.phantom_id, lo.meta.line_index): i for i, (lo, _) in enumerate(dataset.pairs)}
    grouped: dict[str, PhantomLines] = {}
    for pred_low, pred_high in predictions.pairs:
        key = (pred_low.meta.phantom_id, pred_low.meta.line_index)
        if key not in index:
            raise DataError(f"prediction for {key} has no counterpart in the dataset")
        low, high = dataset.pairs[index[key]]
        if not np.array_equal(low.samples.astype(np.float32), pred_low.samples.astype(np.float32)):
            raise DataError(f"prediction for {key} was made from a different input line")
        if pred_high.samples.size != high.samples.size:
            raise DataError(f"prediction for {key} has {pred_high.samples.size} samples, truth {high.samples.size}")
        group = grouped.get(key[0])
        if group is None:
            group = grouped[key[0]] = PhantomLines(key[0], dataset.phantom(key[0]), {s: [] for s in SOURCES})
        group.lines["truth"].append(high)
        group.lines["input"].append(low)
        group.lines["prediction"].append(pred_high)
    if not grouped:
        raise DataError("prediction file holds no lines")
    return list(grouped.values())


def _pitch(group: PhantomLines) -> float:
    return group.record.get("width_m", 0.0) / group.n_lines


def _rows(depth_m: float, fs: float) -> float:
    return 2 * depth_m / SPEED_OF_SOUND * fs


def derive_rois(group: PhantomLines, fs: float, length: int, roi_scale: float = 0.7) -> list[RoiMask]:
    """One mask per cyst: a box inside the cyst and an equal box of speckle at the same depth."""
    width = group.record.get("width_m", 0.0)
    cysts = group.record.get("cysts", [])
    n_cols = group.n_lines
    if not cysts or width <= 0:
        return []
    pitch = width / n_cols

    def bounds(cyst: dict, scale: float) -> tuple[int, int, int, int]:
        half = scale * cyst["radius_m"]
        row, col = _rows(cyst["depth_m"], fs), (cyst["lateral_m"] + width / 2) / pitch - 0.5
        return (
            max(0, math.floor(row - _rows(half, fs))), min(length, math.ceil(row + _rows(half, fs)) + 1),
            max(0, math.floor(col - half / pitch)), min(n_cols, math.ceil(col + half / pitch) + 1),
        )

    blocked = [bounds(c, 1.0) for c in cysts]
    masks = []
    for cyst in cysts:
        r0, r1, c0, c1 = bounds(cyst, roi_scale / math.sqrt(2))
        if r1 <= r0 or c1 <= c0:
            continue
        span = c1 - c0
        candidates = sorted(range(n_cols - span + 1), key=lambda s: abs(s - c0))
        for start in candidates:
            if not any(start < b3 and start + span > b2 and r0 < b1 and r1 > b0 for b0, b1, b2, b3 in blocked):
                masks.append(RoiMask.from_boxes((length, n_cols), [(r0, r1, c0, c1)], [(r0, r1, start, start + span)]))
                break
        else:
            logger.warning("phantom %s: no speckle block beside the cyst at %.1f mm",
                           group.phantom_id, cyst["depth_m"] * 1e3)
    return masks


def load_rois(path: Path) -> dict[str, dict]:
    try:
        rois = json.loads(read_bytes(path))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed ROI file: {e}") from e
    if not isinstance(rois, dict):
        raise DataError(f"{path}: ROI file must map phantom ids to boxes")
    return rois


def roi_metrics(group: PhantomLines, masks: Sequence[RoiMask]) -> dict[str, list[dict]]:
    out = {source: [] for source in SOURCES}
    for source in SOURCES:
        env = envelope_image(group.lines[source])
        for mask in masks:
            try:
                out[source].append({"cnr": cnr(env, mask), "snr_db": snr(env, mask)})
            except ValueError as e:
                logger.warning("phantom %s, %s: %s", group.phantom_id, source, e)
    return out


def point_widths(group: PhantomLines, fs: float) -> dict[str, list[float]]:
    """Axial FWHM (seconds) of every point target, per source."""
    targets = group.record.get("targets", [])
    if not targets:
        return {source: [] for source in SOURCES}
    positions = line_positions(group.record.get("width_m", 0.0), group.n_lines)
    rows = [_rows(z, fs) for z, _ in targets]
    spacing = np.diff(sorted(rows)).min() if len(rows) > 1 else 128.0
    half_window = max(4, int(spacing // 2))

    out = {}
    for source in SOURCES:
        env = envelope_image(group.lines[source])
        widths = []
        for (_, x), row in zip(targets, rows):
            col = int(np.argmin(np.abs(positions - x)))
            r0, r1 = max(0, round(row) - half_window), min(env.shape[0], round(row) + half_window + 1)
            try:
                widths.append(fwhm(env[r0:r1, col], fs).seconds)
            except ValueError as e:
                logger.warning("phantom %s, %s target at row %d: %s", group.phantom_id, source, round(row), e)
        out[source] = widths
    return out


def mean_bandwidth(lines: Sequence[RfLine], fs: float, fc: float) -> float:
    """-6 dB fractional bandwidth of the lines' mean amplitude spectrum."""
    n_fft = 1 << (2 * lines[0].samples.size - 1).bit_length()
    spectra = [amplitude_spectrum(line.samples, fs, n_fft)[1] for line in lines if line.samples.any()]
    if not spectra:
        return math.nan
    freqs = amplitude_spectrum(lines[0].samples, fs, n_fft)[0]
    return spectrum_bandwidth(freqs, np.mean(spectra, axis=0), fc).fractional


def render_group(group: PhantomLines, dynamic_range_db: float) -> dict[str, BmodeImage]:
    return {
        source: render_bmode(group.lines[source], dynamic_range_db, _pitch(group))
        for source in SOURCES if group.lines.get(source)
    }


def write_images(group: PhantomLines, images: dict[str, BmodeImage], out_dir: Path) -> list[Path]:
    written = [export_image(img, out_dir / f"{group.phantom_id}_{source}.pgm") for source, img in images.items()]
    panels = [images[s] for s in SOURCES if s in images]
    if len(panels) > 1:
        written.append(export_image(compose_triptych(panels), out_dir / f"{group.phantom_id}_triptych.pgm"))
    return written


def _improvement(table: dict) -> dict:
    base, pred = table["input_vs_truth"], table["prediction_vs_truth"]
    reduction = math.nan
    if base["mse"]["mean"] > 0:
        reduction = 100 * (1 - pred["mse"]["mean"] / base["mse"]["mean"])
    return {
        "mse_reduction_pct": reduction,
        "psnr_gain_db": pred["psnr_db"]["mean"] - base["psnr_db"]["mean"],
        "ssim_gain": pred["ssim"]["mean"] - base["ssim"]["mean"],
    }


def evaluate(
    dataset: PairedDataset,
    predictions: PairedDataset,
    out_dir: Path | None = None,
    dynamic_range_db: float = 60.0,
    rois: dict[str, dict] | None = None,
    roi_scale: float = 0.7,
    triptychs: bool = True,
    config: dict | None = None,
) -> dict:
    fs, fc = dataset.probe.fs, dataset.probe.fc
    groups = align(dataset, predictions)
    rows = []
    reports = {kind: {c: [] for c in COMPARISONS} for kind in PhantomKind}
    roi_values = {source: [] for source in SOURCES}
    widths = {source: [] for source in SOURCES}

    for group in groups:
        images = render_group(group, dynamic_range_db)
        length = group.lines["truth"][0].samples.size
        if rois is not None and group.phantom_id in rois:
            spec = rois[group.phantom_id]
            masks = [RoiMask.from_boxes((length, group.n_lines), spec["foreground"], spec["background"])]
        elif group.kind is PhantomKind.SPECKLE_CYST:
            masks = derive_rois(group, fs, length, roi_scale)
        else:
            masks = []
        group_rois = roi_metrics(group, masks)
        for source, values in group_rois.items():
            roi_values[source].extend(values)

        group_widths = {source: [] for source in SOURCES}
        if group.kind is PhantomKind.POINT_TARGETS:
            group_widths = point_widths(group, fs)
            for source, values in group_widths.items():
                widths[source].extend(values)

        for comparison, source in COMPARISONS.items():
            report = image_metrics(images["truth"].pixels, images[source].pixels)
            if group_rois[source]:
                report.cnr = float(np.mean([v["cnr"] for v in group_rois[source]]))
                report.snr_db = float(np.mean([v["snr_db"] for v in group_rois[source]]))
            report.fwhm_s = group_widths[source]
            reports[group.kind][comparison].append(report)
            rows.append({"phantom_id": group.phantom_id, "kind": group.kind.value,
                         "comparison": comparison, **report.to_dict()})

        if out_dir is not None and triptychs:
            write_images(group, images, Path(out_dir) / "images")
        logger.debug("evaluated phantom %s (%d lines)", group.phantom_id, group.n_lines)

    speckle = reports[PhantomKind.SPECKLE_CYST]
    table = {c: aggregate(r) for c, r in speckle.items()}
    result = {
        "n_phantoms": len(groups),
        "n_lines": sum(g.n_lines for g in groups),
        "dynamic_range_db": dynamic_range_db,
        "table": table,
        "improvement": _improvement(table) if speckle["input_vs_truth"] else {},
        "roi": {
            source: {
                "cnr": mean_sd(v["cnr"] for v in values),
                "snr_db": mean_sd(v["snr_db"] for v in values),
            }
            for source, values in roi_values.items()
        },
        "point_targets": {
            "table": {c: aggregate(r) for c, r in reports[PhantomKind.POINT_TARGETS].items()},
            "fwhm": {
                source: {
                    "seconds": mean_sd(values),
                    "mm": mean_sd(w * SPEED_OF_SOUND / 2 * 1e3 for w in values),
                }
                for source, values in widths.items()
            },
        },
        "bandwidth": {
            source: mean_bandwidth([line for g in groups for line in g.lines[source]], fs, fc)
            for source in SOURCES
        },
        "phantoms": rows,
        "config": config or {},
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        write_atomic(out_dir / REPORT_NAME, json.dumps(result, indent=2).encode())
        write_atomic(out_dir / TABLE_NAME, _csv(rows).encode())
        logger.info("wrote %s and %s", out_dir / REPORT_NAME, out_dir / TABLE_NAME)
    return result


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def dataset_groups(dataset: PairedDataset) -> list[PhantomLines]:
    """Truth and input lines per phantom, for rendering without predictions."""
    grouped: dict[str, PhantomLines] = {}
    for low, high in dataset.pairs:
        pid = low.meta.phantom_id
        if pid not in grouped:
            grouped[pid] = PhantomLines(pid, dataset.phantom(pid), {"truth": [], "input": []})
        grouped[pid].lines["truth"].append(high)
        grouped[pid].lines["input"].append(low)
    return list(grouped.values())
