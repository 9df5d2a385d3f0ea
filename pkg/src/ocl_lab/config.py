"""Experiment configuration: INI parsing, validation, canonical echo.

The format is flat key-value text with sections: one ``[dataset]`` section,
one ``[experiment]`` section, and one ``[method.<label>]`` section per run
label. Unknown sections or keys are rejected; every value is range-checked
with the offending key named in the error.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .trainer import ABLATIONS, METHODS, TrainConfig

log = logging.getLogger(__name__)

DATASET_KINDS = ("synth", "idx", "csv")


@dataclass(frozen=True)
class DatasetSpec:
    """Where task data comes from: synthetic parameters or file paths."""

    kind: str
    classes: int = 10
    input_dim: int = 32
    per_class: int = 300
    separation: float = 6.0
    test_fraction: float = 0.25
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_path: str = ""
    test_path: str = ""


@dataclass(frozen=True)
class MethodSpec:
    """One run label: a method name plus its training hyperparameters."""

    label: str
    method: str
    ablation: str = "none"
    gamma: float = 0.5
    lr: float = 0.1
    current_batch: int = 10
    replay_batch: int = 10
    buffer: int = 500
    subspace_size: int = 0  # 0 = feature_dim // tasks

    def train_config(self, seed: int, hidden_dims: tuple[int, ...], feature_dim: int) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            ablation=self.ablation,
            replay_weight=self.gamma,
            learning_rate=self.lr,
            current_batch=self.current_batch,
            replay_batch=self.replay_batch,
            buffer_capacity=self.buffer,
            subspace_size=self.subspace_size or None,
            hidden_dims=hidden_dims,
            feature_dim=feature_dim,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """The full validated experiment: dataset, grid, and output policy."""

    dataset: DatasetSpec
    task_count: int
    seeds: tuple[int, ...]
    methods: tuple[MethodSpec, ...]
    output: str = "out"
    hidden_dims: tuple[int, ...] = (128,)
    feature_dim: int = 64
    threads: int = 1
    save_profiles: bool = False
    save_snapshots: bool = True


_METHOD_KEYS = {f.name for f in fields(MethodSpec)} - {"label"}
_EXPERIMENT_KEYS = {
    "tasks",
    "seeds",
    "output",
    "hidden_dims",
    "feature_dim",
    "threads",
    "save_profiles",
    "save_snapshots",
}


def _parse_int(section: str, key: str, raw: str, minimum: int | None = None) -> int:
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: {raw!r} is not an integer") from None
    if minimum is not None and value < minimum:
        raise ConfigError(f"[{section}] {key}: {value} is below the minimum {minimum}")
    return value


def _parse_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: {raw!r} is not a number") from None


def _parse_bool(section: str, key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: {raw!r} is not a boolean")


def _parse_int_list(section: str, key: str, raw: str) -> tuple[int, ...]:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ConfigError(f"[{section}] {key}: needs at least one value")
    return tuple(_parse_int(section, key, p) for p in parts)


def _check_keys(section: str, present, allowed) -> None:
    unknown = set(present) - allowed
    if unknown:
        raise ConfigError(f"[{section}] unknown key {sorted(unknown)[0]!r}")


_KIND_KEYS = {
    "synth": {"kind", "classes", "input_dim", "per_class", "separation", "test_fraction"},
    "idx": {"kind", "train_images", "train_labels", "test_images", "test_labels"},
    "csv": {"kind", "train_path", "test_path", "test_fraction"},
}


def _parse_dataset(section: str, items: dict[str, str]) -> DatasetSpec:
    if "kind" not in items:
        raise ConfigError(f"[{section}] missing required key 'kind'")
    kind = items["kind"].strip().lower()
    if kind not in DATASET_KINDS:
        raise ConfigError(f"[{section}] kind: {kind!r} is not one of {DATASET_KINDS}")
    _check_keys(section, items, _KIND_KEYS[kind])

    spec = {"kind": kind}
    for key in ("classes", "input_dim", "per_class"):
        if key in items:
            spec[key] = _parse_int(section, key, items[key], minimum=1)
    if "separation" in items:
        spec["separation"] = _parse_float(section, "separation", items["separation"])
        if spec["separation"] < 0:
            raise ConfigError(f"[{section}] separation: must be >= 0")
    if "test_fraction" in items:
        spec["test_fraction"] = _parse_float(section, "test_fraction", items["test_fraction"])
        if not 0.0 < spec["test_fraction"] < 1.0:
            raise ConfigError(
                f"[{section}] test_fraction: {spec['test_fraction']} outside (0, 1)"
            )
    for key in ("train_images", "train_labels", "test_images", "test_labels",
                "train_path", "test_path"):
        if key in items:
            spec[key] = items[key].strip()

    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not spec.get(key):
                raise ConfigError(f"[{section}] missing required key {key!r} for kind=idx")
    if kind == "csv" and not spec.get("train_path"):
        raise ConfigError(f"[{section}] missing required key 'train_path' for kind=csv")
    for key in ("train_images", "train_labels", "test_images", "test_labels",
                "train_path", "test_path"):
        path = spec.get(key, "")
        if path and not os.path.exists(path):
            raise ConfigError(f"[{section}] {key}: file {path!r} does not exist")
    return DatasetSpec(**spec)


def _parse_method(section: str, label: str, items: dict[str, str]) -> MethodSpec:
    _check_keys(section, items, _METHOD_KEYS)
    method = items.get("method", label if label in METHODS else "").strip().lower()
    if method not in METHODS:
        raise ConfigError(
            f"[{section}] method: {items.get('method', label)!r} is not one of {METHODS}"
        )
    spec: dict = {"label": label, "method": method}
    if "ablation" in items:
        ablation = items["ablation"].strip().lower()
        if ablation not in ABLATIONS:
            raise ConfigError(f"[{section}] ablation: {ablation!r} is not one of {ABLATIONS}")
        spec["ablation"] = ablation
    if "gamma" in items:
        gamma = _parse_float(section, "gamma", items["gamma"])
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"[{section}] gamma: {gamma} outside the range [0, 1]")
        spec["gamma"] = gamma
    if "lr" in items:
        lr = _parse_float(section, "lr", items["lr"])
        if lr < 0.0:
            raise ConfigError(f"[{section}] lr: {lr} must be non-negative")
        spec["lr"] = lr
    for key in ("current_batch", "replay_batch", "buffer"):
        if key in items:
            spec[key] = _parse_int(section, key, items[key], minimum=1)
    if "subspace_size" in items:
        spec["subspace_size"] = _parse_int(section, "subspace_size", items["subspace_size"], minimum=0)
    try:
        return MethodSpec(**spec)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(path) -> ExperimentConfig:
    """Read and fully validate an experiment file; unknown keys are fatal."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"config file {path!r} is missing or unreadable")

    sections = parser.sections()
    for name in sections:
        if name not in ("dataset", "experiment") and not name.startswith("method."):
            raise ConfigError(f"unknown section [{name}]")
    if "dataset" not in sections:
        raise ConfigError("missing required section [dataset]")
    if "experiment" not in sections:
        raise ConfigError("missing required section [experiment]")

    dataset = _parse_dataset("dataset", dict(parser.items("dataset")))

    items = dict(parser.items("experiment"))
    _check_keys("experiment", items, _EXPERIMENT_KEYS)
    if "tasks" not in items:
        raise ConfigError("[experiment] missing required key 'tasks'")
    if "seeds" not in items:
        raise ConfigError("[experiment] missing required key 'seeds'")
    task_count = _parse_int("experiment", "tasks", items["tasks"], minimum=1)
    seeds = _parse_int_list("experiment", "seeds", items["seeds"])
    deduped = tuple(dict.fromkeys(seeds))
    if len(deduped) != len(seeds):
        log.warning("duplicate seeds %s de-duplicated", sorted(set(s for s in seeds if seeds.count(s) > 1)))
        seeds = deduped

    config = {
        "dataset": dataset,
        "task_count": task_count,
        "seeds": seeds,
    }
    if "output" in items:
        config["output"] = items["output"].strip()
    if "hidden_dims" in items:
        dims = _parse_int_list("experiment", "hidden_dims", items["hidden_dims"])
        if any(d < 1 for d in dims):
            raise ConfigError("[experiment] hidden_dims: all layer widths must be >= 1")
        config["hidden_dims"] = dims
    if "feature_dim" in items:
        config["feature_dim"] = _parse_int("experiment", "feature_dim", items["feature_dim"], minimum=1)
    if "threads" in items:
        config["threads"] = _parse_int("experiment", "threads", items["threads"], minimum=1)
    if "save_profiles" in items:
        config["save_profiles"] = _parse_bool("experiment", "save_profiles", items["save_profiles"])
    if "save_snapshots" in items:
        config["save_snapshots"] = _parse_bool("experiment", "save_snapshots", items["save_snapshots"])

    methods = []
    for name in sections:
        if not name.startswith("method."):
            continue
        label = name[len("method."):]
        if not label:
            raise ConfigError(f"section [{name}] needs a non-empty label")
        methods.append(_parse_method(name, label, dict(parser.items(name))))
    if not methods:
        raise ConfigError("at least one [method.<label>] section is required")
    if len({m.label for m in methods}) != len(methods):
        raise ConfigError("method labels must be unique")

    experiment = ExperimentConfig(methods=tuple(methods), **config)
    _cross_validate(experiment)
    return experiment


def _cross_validate(config: ExperimentConfig) -> None:
    if config.dataset.kind == "synth" and config.dataset.classes % config.task_count != 0:
        raise ConfigError(
            f"[dataset] classes: {config.dataset.classes} not divisible by "
            f"{config.task_count} tasks"
        )
    for m in config.methods:
        if m.subspace_size > config.feature_dim:
            raise ConfigError(
                f"[method.{m.label}] subspace_size: {m.subspace_size} exceeds "
                f"feature_dim {config.feature_dim}"
            )
        try:
            # surfaces invalid combinations (ablation on non-erfsl, etc.) early
            m.train_config(0, config.hidden_dims, config.feature_dim)
        except ConfigError as exc:
            raise ConfigError(f"[method.{m.label}] {exc}") from None


def write_config(config: ExperimentConfig, path) -> None:
    """Emit the effective config; parse_config() on the result round-trips."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    ds = {"kind": config.dataset.kind}
    if config.dataset.kind == "synth":
        ds.update(
            classes=str(config.dataset.classes),
            input_dim=str(config.dataset.input_dim),
            per_class=str(config.dataset.per_class),
            separation=repr(config.dataset.separation),
            test_fraction=repr(config.dataset.test_fraction),
        )
    elif config.dataset.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            ds[key] = getattr(config.dataset, key)
    else:
        ds["train_path"] = config.dataset.train_path
        if config.dataset.test_path:
            ds["test_path"] = config.dataset.test_path
        ds["test_fraction"] = repr(config.dataset.test_fraction)
    parser["dataset"] = ds
    parser["experiment"] = {
        "tasks": str(config.task_count),
        "seeds": " ".join(str(s) for s in config.seeds),
        "output": config.output,
        "hidden_dims": " ".join(str(d) for d in config.hidden_dims),
        "feature_dim": str(config.feature_dim),
        "threads": str(config.threads),
        "save_profiles": "true" if config.save_profiles else "false",
        "save_snapshots": "true" if config.save_snapshots else "false",
    }
    for m in config.methods:
        parser[f"method.{m.label}"] = {
            "method": m.method,
            "ablation": m.ablation,
            "gamma": repr(m.gamma),
            "lr": repr(m.lr),
            "current_batch": str(m.current_batch),
            "replay_batch": str(m.replay_batch),
            "buffer": str(m.buffer),
            "subspace_size": str(m.subspace_size),
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
