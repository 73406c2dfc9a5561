import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import typer
from rich.logging import RichHandler

from rfsr.config import RunConfig, load_config
from rfsr.errors import DataError, RfsrError

logger = logging.getLogger("rfsr")

app = typer.Typer(add_completion=False, help="Spectral super-resolution for pulse-echo RF lines.")

ConfigOption = typer.Option(None, "--config", "-c", help="JSON or YAML run config")
SeedOption = typer.Option(None, "--seed", help="Override the config seed")
OutOption = typer.Option(None, "--out", help="Override paths.out_dir")
DeterministicOption = typer.Option(False, "--deterministic", help="Single-threaded, deterministic kernels")


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )


@contextmanager
def exit_codes():
    """Turn library errors into the documented exit codes."""
    try:
        yield
    except RfsrError as e:
        logger.error("%s", e)
        raise typer.Exit(e.exit_code) from e
    except ValueError as e:
        logger.error("%s", e)
        raise typer.Exit(DataError.exit_code) from e


def _config(config: Optional[Path], seed: Optional[int], out: Optional[Path], deterministic: bool) -> RunConfig:
    return load_config(config).with_overrides(seed=seed, out=out, deterministic=deterministic)


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    setup_logging(verbose)


@app.command()
def simulate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    deterministic: bool = DeterministicOption,
):
    """Simulate paired narrow-/wide-band RF lines."""
    from rfsr.dataset import save_dataset
    from rfsr.rfsim import build_dataset

    with exit_codes():
        cfg = _config(config, seed, out, deterministic)
        dataset = build_dataset(cfg.probe, cfg.excitations, cfg.phantom, cfg.seed)
        path = save_dataset(dataset, cfg.paths.dataset_path, cfg.to_dict())

    excitations = dataset.info["excitations"]
    typer.echo(f"{len(dataset.pairs)} pairs ({dataset.line_length} samples) -> {path}")
    for name in ("narrow", "wide"):
        e = excitations[name]
        typer.echo(f"{name}: measured bandwidth {e['measured_frac_bw']:.2%} (target {e['target_frac_bw']:.0%})")


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    deterministic: bool = DeterministicOption,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Override paths.dataset"),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Override train.epochs"),
    resume: bool = typer.Option(False, "--resume", help="Continue from paths.checkpoint"),
):
    """Train the spectrogram model with the curriculum loss."""
    from dataclasses import replace

    from rfsr.dataset import load_dataset
    from rfsr.model import load_checkpoint
    from rfsr.trainer import CHECKPOINT_NAME, LOG_NAME
    from rfsr.trainer import train as run_training

    with exit_codes():
        cfg = _config(config, seed, out, deterministic)
        if epochs is not None:
            cfg = replace(cfg, train=replace(cfg.train, epochs=epochs))
        data = load_dataset(dataset or cfg.paths.dataset_path)
        state = load_checkpoint(cfg.paths.checkpoint_path) if resume else None
        model_cfg = state[0].cfg if state else cfg.model_config(data.line_length)
        _, report = run_training(
            data, model_cfg, cfg.train, cfg.stft,
            out_dir=cfg.paths.out, resume=state, run_config=cfg.to_dict(),
        )

    if report.epochs:
        last = report.epochs[-1]
        typer.echo(f"epoch {last.epoch}: loss {last.loss:.4g}, val {last.val_loss:.4g}")
    typer.echo(f"{report.n_parameters} parameters, {report.wall_clock:.1f} s -> "
               f"{cfg.paths.out / CHECKPOINT_NAME}, {cfg.paths.out / LOG_NAME}")


@app.command()
def infer(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    deterministic: bool = DeterministicOption,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Override paths.dataset"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Override paths.checkpoint"),
    split: str = typer.Option("test", "--split", help="Split to run on, or 'all'"),
):
    """Predict wide-band lines from the narrow-band inputs."""
    from rfsr.dataset import load_dataset, save_dataset
    from rfsr.dsp import StftConfig
    from rfsr.model import infer_lines, load_checkpoint
    from rfsr.rfsim import LineMeta, PairedDataset, RfLine
    from rfsr.trainer import configure_determinism

    with exit_codes():
        cfg = _config(config, seed, out, deterministic)
        if cfg.train.deterministic:
            configure_determinism()
        data = load_dataset(dataset or cfg.paths.dataset_path)
        if split != "all":
            data = data.select(split)
        if not data.pairs:
            raise DataError(f"dataset has no pairs tagged {split!r}")
        model, extra = load_checkpoint(checkpoint or cfg.paths.checkpoint_path)
        stft_cfg = StftConfig(**extra["stft"]) if "stft" in extra else cfg.stft
        predicted = infer_lines(model, data.low(), stft_cfg)
        pairs = [
            (lo, RfLine(samples, data.fs, LineMeta(lo.meta.phantom_id, lo.meta.line_index, "prediction")))
            for (lo, _), samples in zip(data.pairs, predicted)
        ]
        result = PairedDataset(pairs, data.probe, data.splits, data.phantoms, data.info)
        path = save_dataset(result, cfg.paths.predictions_path, cfg.to_dict())

    typer.echo(f"{len(pairs)} predicted lines -> {path}")


@app.command()
def evaluate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    deterministic: bool = DeterministicOption,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Truth and input lines"),
    predictions: Optional[Path] = typer.Option(None, "--predictions", help="Output of infer"),
    rois: Optional[Path] = typer.Option(None, "--rois", help="JSON ROI boxes per phantom"),
):
    """Compare input and prediction against truth; write report and images."""
    from rfsr.dataset import load_dataset
    from rfsr.evaluate import evaluate as run_evaluation
    from rfsr.evaluate import load_rois

    with exit_codes():
        cfg = _config(config, seed, out, deterministic)
        roi_path = rois or cfg.eval.rois
        report = run_evaluation(
            load_dataset(dataset or cfg.paths.dataset_path),
            load_dataset(predictions or cfg.paths.predictions_path),
            out_dir=cfg.paths.out / "eval",
            dynamic_range_db=cfg.eval.dynamic_range_db,
            rois=load_rois(Path(roi_path)) if roi_path else None,
            roi_scale=cfg.eval.roi_scale,
            triptychs=cfg.eval.triptychs,
            config=cfg.to_dict(),
        )

    typer.echo(f"{report['n_phantoms']} phantoms, {report['n_lines']} lines -> {cfg.paths.out / 'eval'}")
    for comparison, row in report["table"].items():
        if row["mse"]["n"]:
            typer.echo(f"{comparison}: MSE {row['mse']['mean']:.3e}, PSNR {row['psnr_db']['mean']:.2f} dB, "
                       f"SSIM {row['ssim']['mean']:.4f}")


@app.command()
def render(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    deterministic: bool = DeterministicOption,
    dataset: Optional[Path] = typer.Option(None, "--dataset", help="Override paths.dataset"),
    predictions: Optional[Path] = typer.Option(None, "--predictions", help="Add the prediction panel"),
    split: str = typer.Option("test", "--split", help="Split to render, or 'all'"),
):
    """Write B-mode PGMs per phantom and a truth | prediction | input triptych."""
    from rfsr.dataset import load_dataset
    from rfsr.evaluate import align, dataset_groups, render_group, write_images

    with exit_codes():
        cfg = _config(config, seed, out, deterministic)
        data = load_dataset(dataset or cfg.paths.dataset_path)
        if predictions:
            groups = align(data, load_dataset(predictions))
        else:
            groups = dataset_groups(data if split == "all" else data.select(split))
        written = []
        for group in groups:
            written += write_images(group, render_group(group, cfg.eval.dynamic_range_db), cfg.paths.out / "images")

    typer.echo(f"{len(written)} images -> {cfg.paths.out / 'images'}")
