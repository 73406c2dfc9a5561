"""Paired narrow/wide-band RF line simulation.

One broadband probe, two Gaussian excitations. Each line is the
convolution of a sparse reflectivity sequence with the probe impulse
response and the excitation, so a low/high pair differs only by E(f).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.optimize import bisect, brentq

from rfsr.dsp import amplitude_spectrum, envelope, measure_bandwidth
from rfsr.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPEED_OF_SOUND = 1540.0
BANDWIDTH_TOLERANCE = 0.02


@dataclass(frozen=True)
class ProbeSpec:
    fc: float = 5.2e6
    fs: float = 20.832e6
    frac_bw_probe: float = 1.2
    impulse_cycles: float | None = None

    def __post_init__(self) -> None:
        if self.fc <= 0:
            raise ConfigError(f"probe.fc must be positive, got {self.fc}")
        if not 0 < self.frac_bw_probe < 2:
            raise ConfigError(f"probe.frac_bw_probe must lie in (0, 2), got {self.frac_bw_probe}")
        if self.fs <= 2 * self.fc * (1 + self.frac_bw_probe / 2):
            raise ConfigError(
                f"probe band up to {self.fc * (1 + self.frac_bw_probe / 2):.4g} Hz "
                f"does not fit below Nyquist at fs={self.fs:.6g}"
            )


@dataclass(frozen=True)
class ExcitationSpec:
    sigma_t: float
    fc: float
    fs: float
    target_frac_bw: float
    truncate: float = 4.0

    def __post_init__(self) -> None:
        if self.sigma_t <= 0:
            raise ConfigError(f"excitation sigma_t must be positive, got {self.sigma_t}")
        if not 0 < self.target_frac_bw < 2:
            raise ConfigError(f"excitation bandwidth must lie in (0, 2), got {self.target_frac_bw}")
        if self.fc * (1 + self.target_frac_bw / 2) >= self.fs / 2:
            raise ConfigError(
                f"excitation with {self.target_frac_bw:.0%} bandwidth at {self.fc:.4g} Hz "
                f"aliases at fs={self.fs:.6g}"
            )
        edge = self.fc + math.sqrt(2 * math.log(2)) / (2 * math.pi * self.sigma_t)
        if edge >= self.fs / 2:
            raise ConfigError(
                f"excitation sigma_t={self.sigma_t:.4g} s puts the -6 dB band edge at {edge:.4g} Hz, "
                f"not below Nyquist at fs={self.fs:.6g}"
            )

    @classmethod
    def for_bandwidth(cls, fc: float, fs: float, target_frac_bw: float, truncate: float = 4.0) -> ExcitationSpec:
        """Solve sigma_t so the sampled pulse has the requested -6 dB width.

        Starts from the analytic Gaussian relation
        half-width = sqrt(2 ln 2) / (2 pi sigma_t), then corrects for the
        negative-frequency image and sampling aliases, which widen the
        measured band of short pulses.
        """
        half_width = target_frac_bw * fc / 2
        sigma0 = math.sqrt(2 * math.log(2)) / (2 * math.pi * half_width)
        seed = cls(sigma_t=sigma0, fc=fc, fs=fs, target_frac_bw=target_frac_bw, truncate=truncate)

        def excess(sigma: float) -> float:
            pulse = _gaussian_pulse(sigma, fc, fs, truncate)
            return measure_bandwidth(pulse, fs, fc).fractional - target_frac_bw

        try:
            sigma = brentq(excess, 0.5 * sigma0, 2.0 * sigma0, xtol=sigma0 * 1e-9)
        except ValueError as e:
            raise ConfigError(
                f"no excitation reaches {target_frac_bw:.0%} bandwidth at fc={fc:.4g}: {e}"
            ) from e
        spec = cls(sigma_t=sigma, fc=fc, fs=fs, target_frac_bw=target_frac_bw, truncate=truncate)
        logger.debug("excitation %.0f%%: sigma_t %.4g s (analytic %.4g s)",
                     100 * target_frac_bw, spec.sigma_t, seed.sigma_t)
        return spec


@dataclass
class ExcitationsConfig:
    narrow_frac_bw: float = 0.6
    wide_frac_bw: float = 1.2
    truncate_sigmas: float = 4.0

    def specs(self, probe: ProbeSpec) -> tuple[ExcitationSpec, ExcitationSpec]:
        narrow = ExcitationSpec.for_bandwidth(probe.fc, probe.fs, self.narrow_frac_bw, self.truncate_sigmas)
        wide = ExcitationSpec.for_bandwidth(probe.fc, probe.fs, self.wide_frac_bw, self.truncate_sigmas)
        return narrow, wide


class PhantomKind(str, Enum):
    SPECKLE_CYST = "speckle_cyst"
    POINT_TARGETS = "point_targets"


@dataclass(frozen=True)
class Cyst:
    depth_m: float
    lateral_m: float
    radius_m: float
    echogenicity: float


@dataclass
class PhantomConfig:
    n_scatterers: int = 2000
    n_lines: int = 64
    line_length: int = 1536
    width_m: float = 0.0192
    acceptance_width_m: float = 0.0006
    depth_margin_m: float = 0.002
    max_cysts: int = 3
    cyst_radius_m: tuple[float, float] = (0.002, 0.005)
    echogenicity: float = 0.1
    point_rows: int = 5
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    n_point_phantoms: int = 1
    workers: int = 1

    def __post_init__(self) -> None:
        self.cyst_radius_m = tuple(self.cyst_radius_m)
        if self.n_lines < 1 or self.line_length < 1:
            raise ConfigError("phantom.n_lines and phantom.line_length must be >= 1")
        if self.acceptance_width_m <= 0 or self.width_m <= 0:
            raise ConfigError("phantom widths must be positive")
        if len(self.cyst_radius_m) != 2 or not 0 < self.cyst_radius_m[0] <= self.cyst_radius_m[1]:
            raise ConfigError(f"phantom.cyst_radius_m must be [min, max], got {self.cyst_radius_m}")
        if not 0 <= self.echogenicity <= 1:
            raise ConfigError(f"phantom.echogenicity must lie in [0, 1], got {self.echogenicity}")


@dataclass
class PhantomSpec:
    kind: PhantomKind
    scatterers: np.ndarray  # (n, 3): depth_m, lateral_m, amplitude
    cyst_regions: list[Cyst]
    rng_seed: int
    width_m: float
    depth_range_m: tuple[float, float]
    name: str = ""

    def summary(self) -> dict:
        record = {
            "id": self.name,
            "kind": self.kind.value,
            "rng_seed": self.rng_seed,
            "n_scatterers": int(len(self.scatterers)),
            "width_m": self.width_m,
            "cysts": [vars(c) for c in self.cyst_regions],
        }
        if self.kind is PhantomKind.POINT_TARGETS:
            record["targets"] = [[float(z), float(x)] for z, x, _ in self.scatterers]
        return record


@dataclass(frozen=True)
class LineMeta:
    phantom_id: str
    line_index: int
    band: str  # "low" | "high"


@dataclass
class RfLine:
    samples: np.ndarray
    fs: float
    meta: LineMeta

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"non-finite samples in line {self.meta}")


@dataclass
class PairedDataset:
    pairs: list[tuple[RfLine, RfLine]]
    probe: ProbeSpec
    splits: list[str]
    phantoms: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.splits) != len(self.pairs):
            raise DataError(f"{len(self.pairs)} pairs but {len(self.splits)} split tags")

    @property
    def line_length(self) -> int:
        return self.pairs[0][0].samples.size if self.pairs else 0

    @property
    def fs(self) -> float:
        return self.probe.fs

    def low(self) -> np.ndarray:
        return np.stack([lo.samples for lo, _ in self.pairs])

    def high(self) -> np.ndarray:
        return np.stack([hi.samples for _, hi in self.pairs])

    def select(self, split: str) -> PairedDataset:
        keep = [i for i, s in enumerate(self.splits) if s == split]
        ids = {self.pairs[i][0].meta.phantom_id for i in keep}
        return PairedDataset(
            pairs=[self.pairs[i] for i in keep],
            probe=self.probe,
            splits=[split] * len(keep),
            phantoms=[p for p in self.phantoms if p["id"] in ids],
            info=self.info,
        )

    def phantom(self, phantom_id: str) -> dict:
        for record in self.phantoms:
            if record["id"] == phantom_id:
                return record
        raise DataError(f"phantom {phantom_id!r} not in dataset")

    def lines_of(self, phantom_id: str) -> list[int]:
        return [i for i, (lo, _) in enumerate(self.pairs) if lo.meta.phantom_id == phantom_id]


def imaging_depth(line_length: int, fs: float) -> float:
    return line_length * SPEED_OF_SOUND / (2 * fs)


def line_positions(width_m: float, n_lines: int) -> np.ndarray:
    pitch = width_m / n_lines
    return -width_m / 2 + pitch * (np.arange(n_lines) + 0.5)


def _hann_sine(cycles: float, fc: float, fs: float) -> np.ndarray:
    duration = cycles / fc
    t = np.arange(int(math.floor(duration * fs)) + 1) / fs
    window = 0.5 * (1 - np.cos(2 * np.pi * t / duration))
    return window * np.sin(2 * np.pi * fc * (t - duration / 2))


@lru_cache(maxsize=8)
def _solve_impulse_cycles(fc: float, fs: float, frac_bw: float) -> float:
    def excess(cycles: float) -> float:
        return measure_bandwidth(_hann_sine(cycles, fc, fs), fs, fc).fractional - frac_bw

    try:
        return bisect(excess, 1.0, max(8.0, 16.0 / frac_bw), xtol=1e-7)
    except ValueError as e:
        raise ConfigError(f"probe bandwidth {frac_bw:.0%} is unattainable at fs={fs:.6g}: {e}") from e


@lru_cache(maxsize=8)
def _probe_impulse(probe: ProbeSpec) -> np.ndarray:
    cycles = probe.impulse_cycles or _solve_impulse_cycles(probe.fc, probe.fs, probe.frac_bw_probe)
    pulse = _hann_sine(cycles, probe.fc, probe.fs)
    bw = measure_bandwidth(pulse, probe.fs, probe.fc)
    if abs(bw.fractional / probe.frac_bw_probe - 1) > BANDWIDTH_TOLERANCE:
        raise ConfigError(
            f"probe impulse of {cycles:.3f} cycles measures {bw.fractional:.3f}, "
            f"wanted {probe.frac_bw_probe:.3f}"
        )
    return pulse / amplitude_spectrum(pulse, probe.fs, 1 << 14)[1].max()


def synth_probe_impulse(probe: ProbeSpec) -> np.ndarray:
    return _probe_impulse(probe).copy()


def _gaussian_pulse(sigma_t: float, fc: float, fs: float, truncate: float) -> np.ndarray:
    half = int(math.floor(truncate * sigma_t * fs))
    t = np.arange(-half, half + 1) / fs
    return np.exp(-(t**2) / (2 * sigma_t**2)) * np.cos(2 * np.pi * fc * t)


def synth_excitation(spec: ExcitationSpec) -> np.ndarray:
    """Gaussian-modulated carrier truncated at +-truncate sigma, unit spectral peak."""
    pulse = _gaussian_pulse(spec.sigma_t, spec.fc, spec.fs, spec.truncate)
    return pulse / amplitude_spectrum(pulse, spec.fs, 1 << 14)[1].max()


def generate_phantom(
    kind: PhantomKind | str,
    n_scatterers: int,
    rng_seed: int,
    cfg: PhantomConfig | None = None,
    fs: float = ProbeSpec.fs,
    name: str = "",
) -> PhantomSpec:
    kind = PhantomKind(kind)
    cfg = cfg or PhantomConfig()
    if n_scatterers < 1:
        raise ConfigError(f"a phantom needs at least one scatterer, got {n_scatterers}")
    z_min = cfg.depth_margin_m
    z_max = imaging_depth(cfg.line_length, fs) - cfg.depth_margin_m
    if z_max <= z_min:
        raise ConfigError("depth margin leaves no imaging window")
    rng = np.random.default_rng(rng_seed)

    if kind is PhantomKind.POINT_TARGETS:
        depths = z_min + (z_max - z_min) * np.arange(1, n_scatterers + 1) / (n_scatterers + 1)
        scatterers = np.column_stack([depths, np.zeros(n_scatterers), np.ones(n_scatterers)])
        return PhantomSpec(kind, scatterers, [], rng_seed, cfg.width_m, (z_min, z_max), name)

    depths = rng.uniform(z_min, z_max, n_scatterers)
    laterals = rng.uniform(-cfg.width_m / 2, cfg.width_m / 2, n_scatterers)
    amplitudes = rng.rayleigh(1.0, n_scatterers)

    cysts = []
    for _ in range(int(rng.integers(1, cfg.max_cysts + 1)) if cfg.max_cysts > 0 else 0):
        radius = float(rng.uniform(*cfg.cyst_radius_m))
        radius = min(radius, (z_max - z_min) / 2, cfg.width_m / 2)
        cyst = Cyst(
            depth_m=float(rng.uniform(z_min + radius, z_max - radius)),
            lateral_m=float(rng.uniform(-cfg.width_m / 2 + radius, cfg.width_m / 2 - radius)),
            radius_m=radius,
            echogenicity=cfg.echogenicity,
        )
        inside = (depths - cyst.depth_m) ** 2 + (laterals - cyst.lateral_m) ** 2 <= radius**2
        amplitudes[inside] *= cyst.echogenicity
        cysts.append(cyst)

    scatterers = np.column_stack([depths, laterals, amplitudes])
    return PhantomSpec(kind, scatterers, cysts, rng_seed, cfg.width_m, (z_min, z_max), name)


def reflectivity(phantom: PhantomSpec, lateral_m: float, acceptance_width_m: float, fs: float, length: int) -> np.ndarray:
    """Sparse reflectivity of one line; sub-sample delays split linearly between neighbours."""
    depth, lateral, amp = phantom.scatterers.T
    keep = np.abs(lateral - lateral_m) <= acceptance_width_m / 2
    position = 2 * depth[keep] / SPEED_OF_SOUND * fs
    base = np.floor(position).astype(np.int64)
    frac = position - base
    r = np.zeros(length + 1)
    inside = (base >= 0) & (base < length)
    np.add.at(r, base[inside], amp[keep][inside] * (1 - frac[inside]))
    np.add.at(r, base[inside] + 1, amp[keep][inside] * frac[inside])
    return r[:length]


def kernel_center(kernel: np.ndarray) -> int:
    """Index of the kernel's envelope peak."""
    n = kernel.size
    return int(np.argmax(envelope(np.pad(kernel, n))[n : 2 * n]))


def simulate_rf(
    phantom: PhantomSpec,
    probe: ProbeSpec,
    excitation: ExcitationSpec,
    n_lines: int,
    length: int,
    acceptance_width_m: float | None = None,
    band: str = "",
) -> list[RfLine]:
    acceptance = acceptance_width_m or phantom.width_m / n_lines
    kernel = np.convolve(synth_probe_impulse(probe), synth_excitation(excitation))
    center = kernel_center(kernel)

    lines = []
    empty = 0
    for index, x in enumerate(line_positions(phantom.width_m, n_lines)):
        r = reflectivity(phantom, x, acceptance, probe.fs, length)
        if not r.any():
            empty += 1
        samples = np.convolve(r, kernel)[center : center + length]
        lines.append(RfLine(samples, probe.fs, LineMeta(phantom.name, index, band)))
    if empty:
        logger.warning("phantom %s: %d of %d lines have no scatterer in their acceptance window",
                       phantom.name or phantom.rng_seed, empty, n_lines)
    return lines


def simulate_pairs(
    phantom: PhantomSpec,
    probe: ProbeSpec,
    narrow: ExcitationSpec,
    wide: ExcitationSpec,
    cfg: PhantomConfig,
) -> list[tuple[RfLine, RfLine]]:
    low = simulate_rf(phantom, probe, narrow, cfg.n_lines, cfg.line_length, cfg.acceptance_width_m, "low")
    high = simulate_rf(phantom, probe, wide, cfg.n_lines, cfg.line_length, cfg.acceptance_width_m, "high")
    return list(zip(low, high))


def phantom_plan(cfg: PhantomConfig) -> list[tuple[PhantomKind, str]]:
    return (
        [(PhantomKind.SPECKLE_CYST, "train")] * cfg.n_train
        + [(PhantomKind.SPECKLE_CYST, "val")] * cfg.n_val
        + [(PhantomKind.SPECKLE_CYST, "test")] * cfg.n_test
        + [(PhantomKind.POINT_TARGETS, "test")] * cfg.n_point_phantoms
    )


def build_dataset(
    probe: ProbeSpec,
    excitations: ExcitationsConfig,
    cfg: PhantomConfig,
    seed: int,
) -> PairedDataset:
    narrow, wide = excitations.specs(probe)
    synth_probe_impulse(probe)  # fail fast on an unattainable probe

    plan = phantom_plan(cfg)
    if not plan:
        raise ConfigError("phantom plan is empty; set n_train/n_val/n_test")
    children = np.random.SeedSequence(seed).spawn(len(plan))

    def run(i: int) -> tuple[PhantomSpec, list[tuple[RfLine, RfLine]]]:
        kind, split = plan[i]
        n = cfg.point_rows if kind is PhantomKind.POINT_TARGETS else cfg.n_scatterers
        phantom = generate_phantom(
            kind, n, int(children[i].generate_state(1)[0]), cfg, probe.fs, name=f"{split}-{i:04d}"
        )
        return phantom, simulate_pairs(phantom, probe, narrow, wide, cfg)

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as pool:
        results = list(pool.map(run, range(len(plan))))

    pairs, splits, phantoms = [], [], []
    for (phantom, phantom_pairs), (_, split) in zip(results, plan):
        pairs.extend(phantom_pairs)
        splits.extend([split] * len(phantom_pairs))
        phantoms.append(phantom.summary() | {"split": split})

    scale = max(np.abs(hi.samples).max() for _, hi in pairs)
    if scale <= 0:
        raise DataError("all simulated lines are zero")
    for lo, hi in pairs:
        lo.samples /= scale
        hi.samples /= scale

    info = {
        "amplitude_scale": float(scale),
        "excitations": {
            "narrow": {"sigma_t": narrow.sigma_t, "target_frac_bw": narrow.target_frac_bw,
                       "measured_frac_bw": measure_bandwidth(synth_excitation(narrow), probe.fs, probe.fc).fractional},
            "wide": {"sigma_t": wide.sigma_t, "target_frac_bw": wide.target_frac_bw,
                     "measured_frac_bw": measure_bandwidth(synth_excitation(wide), probe.fs, probe.fc).fractional},
        },
        "probe_frac_bw": measure_bandwidth(synth_probe_impulse(probe), probe.fs, probe.fc).fractional,
    }
    return PairedDataset(pairs=pairs, probe=probe, splits=splits, phantoms=phantoms, info=info)
