import re
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from rfsr.dsp import StftConfig
from rfsr.errors import ConfigError
from rfsr.model import PRESETS, ModelConfig
from rfsr.rfsim import ExcitationsConfig, PhantomConfig, ProbeSpec
from rfsr.trainer import TrainConfig

SECTIONS = ("probe", "excitations", "phantom", "stft", "model", "train", "eval", "paths", "seed")
DERIVED_MODEL_KEYS = {"n_frames", "n_bins"}


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads 5.2e6 as a string; accept JSON-style exponents as floats
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


@dataclass
class EvalConfig:
    dynamic_range_db: float = 60.0
    rois: str | None = None  # JSON file of ROI boxes; derived from the manifest when unset
    roi_scale: float = 0.7  # foreground box half-side as a fraction of the cyst radius / sqrt(2)
    triptychs: bool = True

    def __post_init__(self) -> None:
        if self.dynamic_range_db <= 0:
            raise ConfigError(f"eval.dynamic_range_db must be positive, got {self.dynamic_range_db}")
        if not 0 < self.roi_scale <= 1:
            raise ConfigError(f"eval.roi_scale must lie in (0, 1], got {self.roi_scale}")


@dataclass
class PathsConfig:
    out_dir: str = "runs/desk"
    dataset: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset.rfpx"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out / "checkpoint.rfck"

    @property
    def predictions_path(self) -> Path:
        return Path(self.predictions) if self.predictions else self.out / "predictions.rfpx"


@dataclass
class RunConfig:
    probe: ProbeSpec = field(default_factory=ProbeSpec)
    excitations: ExcitationsConfig = field(default_factory=ExcitationsConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model_preset: str = "desk"
    model_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def model_config(self, line_length: int | None = None) -> ModelConfig:
        length = line_length or self.phantom.line_length
        try:
            n_frames = self.stft.n_frames(length)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return ModelConfig.preset(
            self.model_preset, **self.model_overrides, n_frames=n_frames, n_bins=self.stft.n_bins
        )

    def with_overrides(
        self, seed: int | None = None, out: Path | None = None, deterministic: bool = False
    ) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if out is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, out_dir=str(out)))
        if deterministic:
            cfg = replace(cfg, train=replace(cfg.train, deterministic=True))
        return cfg

    def to_dict(self) -> dict:
        train = asdict(self.train)
        train.pop("seed")
        phantom = asdict(self.phantom)
        phantom["cyst_radius_m"] = list(self.phantom.cyst_radius_m)
        return {
            "probe": asdict(self.probe),
            "excitations": asdict(self.excitations),
            "phantom": phantom,
            "stft": asdict(self.stft),
            "model": {"preset": self.model_preset, **self.model_overrides},
            "train": train,
            "eval": asdict(self.eval),
            "paths": asdict(self.paths),
            "seed": self.seed,
        }


def _check_type(value, hint, key: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in typing.get_args(hint):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is tuple:
        if not isinstance(value, list | tuple):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(_check_type(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, typing.get_args(hint))))
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got {value!r}")
    if isinstance(hint, type) and not isinstance(value, hint):
        raise ConfigError(f"{key}: expected {hint.__name__}, got {value!r}")
    return value


def _section(cls, raw, name: str, exclude: set[str] = frozenset()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    allowed = {f.name for f in fields(cls)} - exclude
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {name}.{key}")
        kwargs[key] = _check_type(value, hints[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _model_section(raw) -> tuple[str, dict]:
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"model: expected a mapping, got {type(raw).__name__}")
    raw = dict(raw or {})
    preset = raw.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    derived = DERIVED_MODEL_KEYS & raw.keys()
    if derived:
        raise ConfigError(f"model.{sorted(derived)[0]} is derived from stft and phantom.line_length")
    hints = typing.get_type_hints(ModelConfig)
    allowed = {f.name for f in fields(ModelConfig)} - DERIVED_MODEL_KEYS
    overrides = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key model.{key}")
        overrides[key] = _check_type(value, hints[key], f"model.{key}")
    return preset, overrides


def parse_config(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(f"unknown config key {key}")
    seed = _check_type(raw.get("seed", 0), int, "seed")
    train = _section(TrainConfig, raw.get("train"), "train", exclude={"seed"})
    preset, overrides = _model_section(raw.get("model"))
    cfg = RunConfig(
        probe=_section(ProbeSpec, raw.get("probe"), "probe"),
        excitations=_section(ExcitationsConfig, raw.get("excitations"), "excitations"),
        phantom=_section(PhantomConfig, raw.get("phantom"), "phantom"),
        stft=_section(StftConfig, raw.get("stft"), "stft"),
        model_preset=preset,
        model_overrides=overrides,
        train=replace(train, seed=seed),
        eval=_section(EvalConfig, raw.get("eval"), "eval"),
        paths=_section(PathsConfig, raw.get("paths"), "paths"),
        seed=seed,
    )
    cfg.model_config()
    return cfg


def load_config(path: Path | None = None) -> RunConfig:
    """Read a JSON or YAML run config; no path means all defaults."""
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config not found: {path}")
    try:
        with open(path) as f:
            raw = yaml.load(f, Loader=_Loader)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    return parse_config(raw)
