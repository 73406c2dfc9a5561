"""Magnitude, phase and complex MSE terms with the per-epoch curriculum weights.

Training starts on the decoupled magnitude/phase terms and shifts weight to
the coupled complex term as their EMA-smoothed losses fall below the
epoch-0 baselines.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import torch
from torch import Tensor

from rfsr.dsp import MagPhaseTensor
from rfsr.errors import ConfigError

logger = logging.getLogger(__name__)

BASELINE_FLOOR = 1e-12


@dataclass
class LossTerms:
    l_mag: Tensor
    l_phase: Tensor
    l_cplx: Tensor

    def detached(self) -> tuple[float, float, float]:
        return tuple(t.detach().item() for t in (self.l_mag, self.l_phase, self.l_cplx))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else torch.as_tensor(x, dtype=torch.float64)


def loss_terms(pred: MagPhaseTensor, target: MagPhaseTensor, circular_phase: bool = False) -> LossTerms:
    r_hat, th_hat = _as_tensor(pred.mag), _as_tensor(pred.phase)
    r, th = _as_tensor(target.mag), _as_tensor(target.phase)
    if r_hat.shape != r.shape or th_hat.shape != th.shape:
        raise ValueError(f"prediction {tuple(r_hat.shape)} and target {tuple(r.shape)} differ in shape")

    l_mag = torch.mean((r_hat - r) ** 2)
    d_phase = th_hat - th
    if circular_phase:
        d_phase = torch.atan2(torch.sin(d_phase), torch.cos(d_phase))
    l_phase = torch.mean(d_phase**2)
    re = r_hat * torch.cos(th_hat) - r * torch.cos(th)
    im = r_hat * torch.sin(th_hat) - r * torch.sin(th)
    l_cplx = torch.mean(re**2 + im**2)
    return LossTerms(l_mag, l_phase, l_cplx)


@dataclass(frozen=True)
class CurriculumState:
    beta: float = 0.9
    lambda_min: float = 0.1
    lambda_max: float = 1.0
    lambda_cplx_max: float = 1.0
    epoch: int = 0
    baseline_mag: float | None = None
    baseline_phase: float | None = None
    ema_mag: float | None = None
    ema_phase: float | None = None
    ratio_mag: float = 1.0
    ratio_phase: float = 1.0
    raw_mag: float = 1.0
    raw_phase: float = 1.0
    raw_cplx: float = 0.0
    lambda_mag: float = 0.5
    lambda_phase: float = 0.5
    lambda_cplx: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.beta < 1:
            raise ConfigError(f"curriculum beta must lie in [0, 1), got {self.beta}")
        if not 0 <= self.lambda_min <= self.lambda_max or self.lambda_max <= 0:
            raise ConfigError("curriculum needs 0 <= lambda_min <= lambda_max and lambda_max > 0")
        if self.lambda_cplx_max < 0:
            raise ConfigError("curriculum lambda_cplx_max must be non-negative")

    @property
    def weights(self) -> tuple[float, float, float]:
        return self.lambda_mag, self.lambda_phase, self.lambda_cplx

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def composite_loss(terms: LossTerms, state: CurriculumState) -> Tensor:
    total = sum(state.weights)
    if abs(total - 1) > 1e-9:
        raise ValueError(f"curriculum weights sum to {total}, not 1")
    return (
        state.lambda_mag * terms.l_mag
        + state.lambda_phase * terms.l_phase
        + state.lambda_cplx * terms.l_cplx
    )


def _normalised(raw: tuple[float, float, float]) -> tuple[float, float, float]:
    total = math.fsum(raw)
    return tuple(w / total for w in raw)


def update_weights(state: CurriculumState, epoch_mean_losses: tuple[float, float]) -> CurriculumState:
    """Advance the schedule by one epoch given that epoch's mean l_mag and l_phase."""
    mean_mag, mean_phase = epoch_mean_losses
    if state.epoch == 0:
        baselines = []
        for name, value in (("mag", mean_mag), ("phase", mean_phase)):
            if value < BASELINE_FLOOR:
                logger.warning("epoch-0 %s loss %.3g is degenerate; clamping baseline to %.0e",
                               name, value, BASELINE_FLOOR)
                value = BASELINE_FLOOR
            baselines.append(value)
        raw = (1.0, 1.0, 0.0)
        lam = _normalised(raw)
        return replace(
            state, epoch=1,
            baseline_mag=baselines[0], baseline_phase=baselines[1],
            ema_mag=baselines[0], ema_phase=baselines[1],
            ratio_mag=1.0, ratio_phase=1.0,
            raw_mag=raw[0], raw_phase=raw[1], raw_cplx=raw[2],
            lambda_mag=lam[0], lambda_phase=lam[1], lambda_cplx=lam[2],
        )

    ema_mag = state.beta * state.ema_mag + (1 - state.beta) * mean_mag
    ema_phase = state.beta * state.ema_phase + (1 - state.beta) * mean_phase
    r_mag = min(1.0, ema_mag / state.baseline_mag)
    r_phase = min(1.0, ema_phase / state.baseline_phase)
    lam_mag = max(state.lambda_min, state.lambda_max * r_mag)
    lam_phase = max(state.lambda_min, state.lambda_max * r_phase)
    # the complex weight sees the ratios after the lambda_min floor
    r_mag, r_phase = lam_mag / state.lambda_max, lam_phase / state.lambda_max
    raw = (lam_mag, lam_phase, state.lambda_cplx_max * (1 - (r_mag + r_phase) / 2))
    lam = _normalised(raw)
    return replace(
        state, epoch=state.epoch + 1,
        ema_mag=ema_mag, ema_phase=ema_phase,
        ratio_mag=r_mag, ratio_phase=r_phase,
        raw_mag=raw[0], raw_phase=raw[1], raw_cplx=raw[2],
        lambda_mag=lam[0], lambda_phase=lam[1], lambda_cplx=lam[2],
    )
