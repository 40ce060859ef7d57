"""
Run configuration.

A run is described by one TOML file (``run.toml`` in the workspace by
default)::

    [paths]
    speech_commands = "/data/speech_commands_v0.01"
    gtsrb = "/data/GTSRB"
    workspace = "work"

    [dataset]
    seed = 0
    anomaly_fraction = 0.5
    folds = 5

    [dataset.class_map]
    go = 35
    right = 33
    left = 34
    stop = 14

    [model]
    arch = "baseline"

    [train]
    batch_size = 128
    epochs = 300

    [evaluation]
    perplexity = 30.0

Every key is optional. Command-line flags override file values.
"""

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from .dataset import DEFAULT_CLASS_MAP, IMAGES_PER_CLASS
from .errors import ConfigurationError
from .labels import COMMANDS, Target
from .models import ModelSpec
from .training import TrainConfig

_SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "paths": {"speech_commands": str, "gtsrb": str, "workspace": str},
    "dataset": {
        "seed": int,
        "anomaly_fraction": (int, float),
        "folds": int,
        "images_per_class": int,
        "clips_per_class": int,
        "class_map": dict,
    },
    "model": {
        "arch": str,
        "seed": int,
        "conv_channels": list,
        "audio_hidden": list,
        "image_embed": int,
        "fusion_hidden": int,
        "sketch_dim": int,
        "deconv_seed": list,
    },
    "train": {"batch_size": int, "epochs": int, "lr": (int, float), "betas": list, "seed": int, "fold": int},
    "evaluation": {"perplexity": (int, float), "tsne_iterations": int, "tsne_seed": int, "plot": bool},
}


@dataclass(frozen=True)
class PathsConfig:
    speech_commands: Path | None = None
    gtsrb: Path | None = None
    workspace: Path = Path(".")


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 0
    anomaly_fraction: float = 0.5
    folds: int = 5
    images_per_class: int = IMAGES_PER_CLASS
    clips_per_class: int | None = None
    class_map: dict[int, Target] = field(default_factory=lambda: dict(DEFAULT_CLASS_MAP))

    def __post_init__(self) -> None:
        if not 0 < self.anomaly_fraction < 1:
            raise ConfigurationError(f"anomaly_fraction must be in (0, 1), got {self.anomaly_fraction}")
        if self.folds < 2:
            raise ConfigurationError(f"folds must be at least 2, got {self.folds}")
        if self.images_per_class < 1:
            raise ConfigurationError(f"images_per_class must be positive, got {self.images_per_class}")
        if sorted(self.class_map.values()) != sorted(COMMANDS):
            raise ConfigurationError(f"class_map must name one sign class for each of {[c.word for c in COMMANDS]}")


@dataclass(frozen=True)
class EvaluationConfig:
    perplexity: float = 30.0
    tsne_iterations: int = 1000
    tsne_seed: int = 0
    plot: bool = True


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec("baseline"))
    model_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    fold: int = 0
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    source: Path | None = None

    def to_dict(self) -> dict[str, Any]:
        """Plain-data view hashed into run manifests."""
        data = asdict(self)
        data.pop("source")
        data["model"] = self.model.to_dict()
        data["dataset"]["class_map"] = {target.word: sign for sign, target in self.dataset.class_map.items()}
        data["paths"] = {k: None if v is None else os.fspath(v) for k, v in data["paths"].items()}
        return data

    def require_corpora(self) -> tuple[Path, Path]:
        missing = [name for name in ("speech_commands", "gtsrb") if getattr(self.paths, name) is None]
        if missing:
            raise ConfigurationError("\n".join(f"paths.{name}: required to build the dataset" for name in missing))
        return self.paths.speech_commands, self.paths.gtsrb


def _check_types(raw: dict[str, Any], errors: list[str]) -> None:
    for section, values in raw.items():
        schema = _SCHEMA.get(section)
        if schema is None:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(values, dict):
            errors.append(f"{section}: expected a table")
            continue
        for key, value in values.items():
            expected = schema.get(key)
            if expected is None:
                errors.append(f"{section}.{key}: unknown key")
            elif isinstance(value, bool) and expected is not bool or not isinstance(value, expected):
                names = " or ".join(t.__name__ for t in (expected if isinstance(expected, tuple) else (expected,)))
                errors.append(f"{section}.{key}: expected {names}, got {type(value).__name__} {value!r}")


def _class_map(raw: dict[str, Any]) -> dict[int, Target]:
    mapping = {}
    for word, sign in raw.items():
        target = Target.from_word(word)
        if not isinstance(sign, int) or isinstance(sign, bool):
            raise ConfigurationError(f"sign class for {word!r} must be an integer, got {sign!r}")
        mapping[sign] = target
    return mapping


def _build(section: str, errors: list[str], factory, **kwargs):
    try:
        return factory(**kwargs)
    except (ConfigurationError, ValueError, TypeError) as e:
        errors.append(f"{section}: {e}")
        return None


def _existing_path(value: str | None, base: Path, key: str, errors: list[str]) -> Path | None:
    if value is None:
        return None
    path = (base / value).resolve()
    if not path.exists():
        errors.append(f"paths.{key}: {path} does not exist")
    return path


def parse_config(raw: dict[str, Any], base: Path = Path("."), source: Path | None = None) -> RunConfig:
    """
    Validate a parsed TOML mapping.

    All failing fields are reported together, one ``section.field: message``
    line each, in a single :class:`ConfigurationError`.
    """
    errors: list[str] = []
    _check_types(raw, errors)
    if errors:
        raise ConfigurationError("Invalid configuration:\n" + "\n".join(errors))

    paths_raw = raw.get("paths", {})
    paths = PathsConfig(
        speech_commands=_existing_path(paths_raw.get("speech_commands"), base, "speech_commands", errors),
        gtsrb=_existing_path(paths_raw.get("gtsrb"), base, "gtsrb", errors),
        workspace=(base / paths_raw.get("workspace", ".")).resolve(),
    )

    dataset_raw = dict(raw.get("dataset", {}))
    if "class_map" in dataset_raw:
        try:
            dataset_raw["class_map"] = _class_map(dataset_raw["class_map"])
        except (ConfigurationError, ValueError) as e:
            errors.append(f"dataset.class_map: {e}")
            dataset_raw.pop("class_map")
    dataset = _build("dataset", errors, DatasetConfig, **dataset_raw)

    model_raw = dict(raw.get("model", {}))
    model_seed = model_raw.pop("seed", 0)
    model = _build("model", errors, ModelSpec, **{"arch": "baseline", **model_raw})

    train_raw = dict(raw.get("train", {}))
    fold = train_raw.pop("fold", 0)
    train = _build("train", errors, TrainConfig, **train_raw)
    if dataset is not None and not 0 <= fold < dataset.folds:
        errors.append(f"train.fold: {fold} is not in [0, {dataset.folds})")

    evaluation = _build("evaluation", errors, EvaluationConfig, **raw.get("evaluation", {}))

    if errors:
        raise ConfigurationError("Invalid configuration:\n" + "\n".join(errors))
    return RunConfig(
        paths=paths,
        dataset=dataset,
        model=model,
        model_seed=model_seed,
        train=train,
        fold=fold,
        evaluation=evaluation,
        source=source,
    )


def apply_overrides(raw: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Set ``section.key`` values from command-line flags; ``None`` means the flag was not given."""
    merged = {section: dict(values) if isinstance(values, dict) else values for section, values in raw.items()}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        merged.setdefault(section, {})[key] = value
    return merged


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """
    Read ``path`` (or nothing, for all defaults) and apply ``overrides``.

    Relative paths inside the file are resolved against the file's directory.
    """
    raw: dict[str, Any] = {}
    base = Path.cwd()
    source = None
    if path is not None:
        source = Path(path).resolve()
        try:
            with source.open("rb") as f:
                raw = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"Config file {source} does not exist") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"{source}: {e}") from e
        base = source.parent
    return parse_config(apply_overrides(raw, overrides or {}), base=base, source=source)
