"""Experiment configuration: TOML sections, strict keys, validated up front.

Example::

    [experiment]
    seeds = [0, 1, 2]
    output_dir = "runs/demo"

    [data]
    noise_sigma = 0.25

    [train]
    mode = "oca"
    epochs = 30

    [eval]
    cmc_k = [1, 5, 10]
"""
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError, StructuralError
from .retrieval import PADDING_MODES
from .trainer import TrainConfig, config_hash

OUTPUT_ROOT_ENV = "OCA_OUTPUT_ROOT"


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 20
    old_classes: int = 10
    per_class_train: int = 200
    per_class_eval: int = 50
    input_dim: int = 32
    class_separation: float = 1.0
    noise_sigma: float = 0.25


@dataclass(frozen=True)
class EvalConfig:
    self_exclusion: bool = True
    padding_mode: str = "zero"
    cmc_k: tuple = (1, 5, 10)
    def1_sample_cap: int = 2_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple
    output_dir: Path
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def train_config(self, seed, **overrides):
        params = self.train.to_dict()
        params.update(overrides, seed=seed)
        return TrainConfig.from_dict(params)

    def to_dict(self):
        """Resolved settings; the output directory is left out so the hash survives a move."""
        train = self.train.to_dict()
        train.pop("seed")
        return {
            "seeds": list(self.seeds),
            "data": asdict(self.data),
            "train": train,
            "eval": {**asdict(self.eval), "cmc_k": list(self.eval.cmc_k)},
        }

    @property
    def hash(self):
        return config_hash(self.to_dict())

    def seed_dir(self, seed):
        return self.output_dir / f"seed_{seed}"


def _coerce(section, key, value, default):
    name = f"{section}.{key}"
    kind = type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(name, f"expected a list of integers, got {value!r}")
        return tuple(value)
    raise ConfigError(name, "unsupported field type")


def _section(doc, section, cls, skip=()):
    raw = doc.get(section, {})
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected a table")
    defaults = {f.name: f.default for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown key")
    return {k: _coerce(section, k, v, defaults[k]) for k, v in raw.items()}


def parse_config(doc, source="<config>"):
    """Validate a decoded TOML document into an :class:`ExperimentConfig`."""
    unknown = sorted(set(doc) - {"experiment", "data", "train", "eval"})
    if unknown:
        raise ConfigError(unknown[0], "unknown section")

    exp = doc.get("experiment", {})
    if not isinstance(exp, dict):
        raise ConfigError("experiment", "expected a table")
    extra = sorted(set(exp) - {"seeds", "output_dir"})
    if extra:
        raise ConfigError(f"experiment.{extra[0]}", "unknown key")
    if "seeds" not in exp:
        raise ConfigError("experiment.seeds", "required field is missing")
    seeds = exp["seeds"]
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)
    ):
        raise ConfigError("experiment.seeds", f"expected a non-empty list of non-negative integers, got {seeds!r}")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("experiment.seeds", "seeds must be distinct")

    root = os.environ.get(OUTPUT_ROOT_ENV)
    if "output_dir" in exp:
        if not isinstance(exp["output_dir"], str) or not exp["output_dir"]:
            raise ConfigError("experiment.output_dir", "expected a non-empty string")
        out = Path(exp["output_dir"])
        if not out.is_absolute() and root:
            out = Path(root) / out
    elif root:
        out = Path(root) / Path(source).stem
    else:
        raise ConfigError("experiment.output_dir", f"required field is missing (or set {OUTPUT_ROOT_ENV})")

    data = DataConfig(**_section(doc, "data", DataConfig))
    for name in ("num_classes", "old_classes", "per_class_train", "per_class_eval", "input_dim"):
        if getattr(data, name) < 1:
            raise ConfigError(f"data.{name}", "must be >= 1")
    if data.old_classes > data.num_classes:
        raise ConfigError("data.old_classes", "cannot exceed data.num_classes")
    for name in ("class_separation", "noise_sigma"):
        if not getattr(data, name) > 0:
            raise ConfigError(f"data.{name}", "must be > 0")

    train_fields = _section(doc, "train", TrainConfig, skip=("seed",))
    try:
        train = TrainConfig(**train_fields)
    except StructuralError as exc:
        raise ConfigError("train", str(exc)) from None

    ev = EvalConfig(**_section(doc, "eval", EvalConfig))
    if ev.padding_mode not in PADDING_MODES:
        raise ConfigError("eval.padding_mode", f"must be one of {PADDING_MODES}")
    if not ev.cmc_k or any(k < 1 for k in ev.cmc_k):
        raise ConfigError("eval.cmc_k", "must be a non-empty list of positive integers")
    if ev.def1_sample_cap < 1:
        raise ConfigError("eval.def1_sample_cap", "must be >= 1")

    return ExperimentConfig(tuple(seeds), out, data, train, ev)


def load_config(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML: {exc}") from None
    return parse_config(doc, source=str(path))
