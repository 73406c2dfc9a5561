from __future__ import annotations

import csv
import io
import logging
import math
import time
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor
from torch.utils.data import DataLoader, Dataset

from rfsr.dataset import write_atomic
from rfsr.dsp import MagPhaseTensor, StftConfig, stft_frames, to_polar
from rfsr.errors import ConfigError, DataError, NumericError
from rfsr.loss_schedule import CurriculumState, composite_loss, loss_terms, update_weights
from rfsr.model import ModelConfig, SpectralViT, backward, count_parameters, save_checkpoint
from rfsr.rfsim import PairedDataset

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.rfck"
OPTIMIZER_NAME = "optimizer.pt"
LOG_NAME = "train_log.csv"
LOG_COLUMNS = [
    "epoch", "lambda_mag", "lambda_phase", "lambda_cplx", "ema_mag", "ema_phase",
    "l_mag", "l_phase", "l_cplx", "loss", "val_loss", "grad_norm_max", "clipped_norm_max", "seconds",
]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 1
    circular_phase: bool = False
    ema_beta: float = 0.9
    lambda_min: float = 0.1
    lambda_max: float = 1.0
    lambda_cplx_max: float = 1.0
    loader_workers: int = 0
    deterministic: bool = False

    def __post_init__(self) -> None:
        # lr = 0 is allowed: it isolates the decoupled weight decay
        if self.lr < 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if self.clip_norm <= 0:
            raise ConfigError(f"train.clip_norm must be positive, got {self.clip_norm}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1 and train.beta2 must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1 and train.checkpoint_every >= 1 required")

    def curriculum(self) -> CurriculumState:
        return CurriculumState(
            beta=self.ema_beta,
            lambda_min=self.lambda_min,
            lambda_max=self.lambda_max,
            lambda_cplx_max=self.lambda_cplx_max,
        )


@dataclass
class EpochRecord:
    epoch: int
    lambda_mag: float
    lambda_phase: float
    lambda_cplx: float
    ema_mag: float
    ema_phase: float
    l_mag: float
    l_phase: float
    l_cplx: float
    loss: float
    val_loss: float
    grad_norm_max: float
    clipped_norm_max: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    earlier: list[EpochRecord] = field(default_factory=list)
    n_parameters: int = 0
    wall_clock: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in self.earlier + self.epochs:
            writer.writerow(asdict(record))
        return buf.getvalue()


def read_log(path: Path, before: int) -> list[EpochRecord]:
    """Rows of an earlier run's log for epochs below `before`."""
    if not Path(path).exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        records = [
            EpochRecord(**{k: int(row[k]) if k == "epoch" else float(row[k]) for k in LOG_COLUMNS})
            for row in rows
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: unreadable training log: {e}") from e
    return [r for r in records if r.epoch < before]


def save_optimizer(optimizer: torch.optim.Optimizer, path: Path, epoch: int) -> None:
    buf = io.BytesIO()
    torch.save({"epoch": epoch, "optimizer": optimizer.state_dict()}, buf)
    write_atomic(path, buf.getvalue())


def load_optimizer(optimizer: torch.optim.Optimizer, path: Path, epoch: int) -> bool:
    """Restore moment estimates saved at `epoch`; False leaves the optimizer fresh."""
    if not Path(path).exists():
        return False
    saved = torch.load(path, weights_only=True)
    if saved.get("epoch") != epoch:
        logger.warning("%s was saved at epoch %s, not %d; starting with fresh moments",
                       path, saved.get("epoch"), epoch)
        return False
    optimizer.load_state_dict(saved["optimizer"])
    return True


def polar_tensor(lines: np.ndarray, stft_cfg: StftConfig) -> Tensor:
    """RF lines (..., L) -> float32 (..., 2, T, F) magnitude/phase."""
    polar = to_polar(stft_frames(lines, stft_cfg))
    return torch.from_numpy(np.stack([polar.mag, polar.phase], axis=-3).astype(np.float32))


class SpectrogramPairs(Dataset):
    def __init__(self, dataset: PairedDataset, stft_cfg: StftConfig):
        self.pairs = dataset.pairs
        self.stft_cfg = stft_cfg

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> tuple[Tensor, Tensor]:
        low, high = self.pairs[i]
        return polar_tensor(low.samples, self.stft_cfg), polar_tensor(high.samples, self.stft_cfg)


def configure_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def make_optimizer(params: Iterable[Tensor], cfg: TrainConfig) -> torch.optim.AdamW:
    # AdamW decays p by lr * weight_decay outside the moment estimates
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        weight_decay=cfg.weight_decay, foreach=False,
    )


def clip_global_norm(params: Iterable[Tensor], clip_norm: float) -> tuple[float, float]:
    """Clip the joint gradient norm of `params` in place.

    Returns the norm before and after clipping.
    """
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0, 0.0
    total = float(torch.nn.utils.clip_grad_norm_(params, clip_norm, foreach=False))
    norms = torch.stack([torch.linalg.vector_norm(p.grad.detach().to(torch.float64)) for p in params])
    return total, float(torch.linalg.vector_norm(norms))


def optimizer_step(optimizer: torch.optim.Optimizer) -> None:
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient; optimizer step aborted")
    optimizer.step()


def _terms(model: SpectralViT, x: Tensor, y: Tensor, circular_phase: bool):
    pred = model(x)
    return loss_terms(
        MagPhaseTensor(pred[:, 0], pred[:, 1]),
        MagPhaseTensor(y[:, 0], y[:, 1]),
        circular_phase,
    )


def validation_loss(
    model: SpectralViT,
    dataset: PairedDataset,
    stft_cfg: StftConfig,
    state: CurriculumState,
    cfg: TrainConfig,
) -> float:
    """Mean composite loss over `dataset`; leaves parameters and running stats untouched."""
    if not dataset.pairs:
        return math.nan
    was_training = model.training
    model.eval()
    losses = []
    try:
        with torch.no_grad():
            for x, y in DataLoader(SpectrogramPairs(dataset, stft_cfg), batch_size=cfg.batch_size):
                terms = _terms(model, x.to(_dtype(model)), y.to(_dtype(model)), cfg.circular_phase)
                losses.append(float(composite_loss(terms, state)))
    finally:
        model.train(was_training)
    return float(np.mean(losses))


def _dtype(model: SpectralViT) -> torch.dtype:
    return next(model.parameters()).dtype


def train(
    dataset: PairedDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    stft_cfg: StftConfig | None = None,
    out_dir: Path | None = None,
    resume: tuple[SpectralViT, dict] | None = None,
    run_config: dict | None = None,
) -> tuple[SpectralViT, TrainReport]:
    stft_cfg = stft_cfg or StftConfig()
    if cfg.deterministic:
        configure_determinism()
    train_set = dataset.select("train")
    val_set = dataset.select("val")
    if not train_set.pairs:
        raise DataError("dataset has no pairs tagged 'train'")
    n_frames = stft_cfg.n_frames(train_set.line_length)
    if (model_cfg.n_frames, model_cfg.n_bins) != (n_frames, stft_cfg.n_bins):
        raise DataError(
            f"model expects {model_cfg.n_frames}x{model_cfg.n_bins} spectrograms, "
            f"data yields {n_frames}x{stft_cfg.n_bins}"
        )

    torch.manual_seed(cfg.seed)
    if resume:
        model, extra = resume
        state = CurriculumState(**extra["curriculum"]) if "curriculum" in extra else cfg.curriculum()
        start = int(extra.get("epoch", 0))
    else:
        model, state, start = SpectralViT(model_cfg), cfg.curriculum(), 0
    dtype = _dtype(model)
    optimizer = make_optimizer(model.parameters(), cfg)
    report = TrainReport(n_parameters=count_parameters(model))
    if resume and out_dir is not None:
        if not load_optimizer(optimizer, Path(out_dir) / OPTIMIZER_NAME, start):
            logger.warning("no optimizer state for epoch %d in %s; moments restart from zero", start, out_dir)
        report.earlier = read_log(Path(out_dir) / LOG_NAME, before=start)
    shuffle = torch.Generator()
    loader = DataLoader(
        SpectrogramPairs(train_set, stft_cfg),
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=shuffle,
        num_workers=0 if cfg.deterministic else cfg.loader_workers,
    )
    logger.info("training %d parameters on %d pairs (%d validation)",
                report.n_parameters, len(train_set.pairs), len(val_set.pairs))

    def checkpoint(epoch: int) -> None:
        if out_dir is not None:
            save_checkpoint(model, Path(out_dir) / CHECKPOINT_NAME, {
                "epoch": epoch, "curriculum": state.to_dict(),
                "stft": asdict(stft_cfg), "config": run_config or {},
            })
            save_optimizer(optimizer, Path(out_dir) / OPTIMIZER_NAME, epoch)

    if not resume:
        checkpoint(0)
    started = time.perf_counter()
    for epoch in range(start, start + cfg.epochs):
        t0 = time.perf_counter()
        # batch order depends only on seed and epoch
        shuffle.manual_seed(cfg.seed * 100_003 + epoch)
        model.train()
        sums = np.zeros(4)
        n_batches = 0
        grad_max = clipped_max = 0.0
        for x, y in loader:
            optimizer.zero_grad(set_to_none=False)
            terms = _terms(model, x.to(dtype), y.to(dtype), cfg.circular_phase)
            loss = composite_loss(terms, state)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}; "
                    f"last good checkpoint kept in {out_dir}"
                )
            backward(loss)
            pre, post = clip_global_norm(model.parameters(), cfg.clip_norm)
            optimizer_step(optimizer)
            sums += (*terms.detached(), loss.detach().item())
            n_batches += 1
            grad_max, clipped_max = max(grad_max, pre), max(clipped_max, post)

        l_mag, l_phase, l_cplx, mean_loss = sums / n_batches
        state = update_weights(state, (l_mag, l_phase))
        val = validation_loss(model, val_set, stft_cfg, state, cfg)
        record = EpochRecord(
            epoch=epoch,
            lambda_mag=state.lambda_mag, lambda_phase=state.lambda_phase, lambda_cplx=state.lambda_cplx,
            ema_mag=state.ema_mag, ema_phase=state.ema_phase,
            l_mag=l_mag, l_phase=l_phase, l_cplx=l_cplx, loss=mean_loss, val_loss=val,
            grad_norm_max=grad_max, clipped_norm_max=clipped_max,
            seconds=time.perf_counter() - t0,
        )
        report.epochs.append(record)
        logger.info(
            "epoch %d: loss %.4g (mag %.4g, phase %.4g, cplx %.4g) val %.4g, lambda %.3f/%.3f/%.3f",
            epoch, mean_loss, l_mag, l_phase, l_cplx, val, *state.weights,
        )
        if out_dir is not None:
            write_atomic(Path(out_dir) / LOG_NAME, report.to_csv().encode())
            done = epoch + 1 - start
            if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
                checkpoint(epoch + 1)

    report.wall_clock = time.perf_counter() - started
    if out_dir is not None and not report.epochs:
        write_atomic(Path(out_dir) / LOG_NAME, report.to_csv().encode())
    return model, report
