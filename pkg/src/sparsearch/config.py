"""Experiment configuration: strict JSON in, validated dataclasses out.

Unknown keys are rejected with their field path; the same parser style backs
the architecture descriptor, so configs and descriptors stay consistent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .graph import NetworkConfig
from .pipeline import SearchSchedule


class ConfigError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_REQUIRED = object()


def _parse_section(doc, path, fields):
    if not isinstance(doc, dict):
        raise ConfigError(path, "must be a JSON object")
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(path, f"unknown keys {unknown}")
    out = {}
    for name, (types, default) in fields.items():
        key_path = f"{path}.{name}" if path else name
        if name in doc:
            value = doc[name]
            if bool in types:
                ok = isinstance(value, bool)
            else:
                ok = isinstance(value, types) and not isinstance(value, bool)
            if types == (float,) and isinstance(value, int) and not isinstance(value, bool):
                value, ok = float(value), True
            if value is None and default is None:
                ok = True
            if not ok:
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(key_path, f"expected {names}, got {type(value).__name__}")
            out[name] = value
        elif default is _REQUIRED:
            raise ConfigError(key_path, "missing required key")
        else:
            out[name] = default
    return out


@dataclass
class SyntheticSpec:
    num_classes: int
    train_per_class: int
    test_per_class: int
    size: int
    kind: str = "synthetic"


@dataclass
class IdxSpec:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    kind: str = "idx"


@dataclass
class CifarSpec:
    train_files: list
    test_files: list
    kind: str = "cifar"


def _parse_dataset(doc, path):
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(path, "dataset must be an object with a 'kind'")
    kind = doc["kind"]
    if kind == "synthetic":
        got = _parse_section(doc, path, {
            "kind": ((str,), _REQUIRED),
            "num_classes": ((int,), _REQUIRED),
            "train_per_class": ((int,), _REQUIRED),
            "test_per_class": ((int,), _REQUIRED),
            "size": ((int,), _REQUIRED),
        })
        return SyntheticSpec(num_classes=got["num_classes"],
                             train_per_class=got["train_per_class"],
                             test_per_class=got["test_per_class"], size=got["size"])
    if kind == "idx":
        got = _parse_section(doc, path, {
            "kind": ((str,), _REQUIRED),
            "train_images": ((str,), _REQUIRED),
            "train_labels": ((str,), _REQUIRED),
            "test_images": ((str,), _REQUIRED),
            "test_labels": ((str,), _REQUIRED),
        })
        return IdxSpec(train_images=got["train_images"], train_labels=got["train_labels"],
                       test_images=got["test_images"], test_labels=got["test_labels"])
    if kind == "cifar":
        got = _parse_section(doc, path, {
            "kind": ((str,), _REQUIRED),
            "train_files": ((list,), _REQUIRED),
            "test_files": ((list,), _REQUIRED),
        })
        return CifarSpec(train_files=list(got["train_files"]),
                         test_files=list(got["test_files"]))
    raise ConfigError(f"{path}.kind", f"unknown dataset kind {kind!r}")


@dataclass
class ExperimentConfig:
    dataset: object
    network: NetworkConfig
    schedule: SearchSchedule
    budget_policy: str = "none"
    gamma: float = 1e-3
    delta: float = 1e-4
    split_training: bool = True
    pretrain: bool = True
    split_ratio: float = 0.5
    target_flops: object = None
    augment: bool = False
    seed: int = 0
    out_dir: str = "runs/out"
    precision: str = "f64"
    deterministic: bool = True


def parse_config(doc):
    got = _parse_section(doc, "", {
        "dataset": ((dict,), _REQUIRED),
        "network": ((dict,), _REQUIRED),
        "schedule": ((dict,), {}),
        "budget_policy": ((str,), "none"),
        "gamma": ((float,), 1e-3),
        "delta": ((float,), 1e-4),
        "split_training": ((bool,), True),
        "pretrain": ((bool,), True),
        "split_ratio": ((float,), 0.5),
        "target_flops": ((int,), None),
        "augment": ((bool,), False),
        "seed": ((int,), 0),
        "out_dir": ((str,), "runs/out"),
        "precision": ((str,), "f64"),
        "deterministic": ((bool,), True),
    })
    dataset = _parse_dataset(got["dataset"], "dataset")
    net_doc = _parse_section(got["network"], "network", {
        "stages": ((int,), _REQUIRED),
        "blocks_per_stage": ((int,), _REQUIRED),
        "levels": ((int,), _REQUIRED),
        "ops_per_level": ((int,), _REQUIRED),
        "init_channels": ((int,), _REQUIRED),
        "num_classes": ((int,), _REQUIRED),
        "in_channels": ((int,), 1),
        "image_size": ((int,), 16),
        "width_multiplier": ((float,), 1.0),
        "lambda_mode": ((str,), "shared"),
    })
    sched_doc = _parse_section(got["schedule"], "schedule", {
        "pretrain_epochs": ((int,), 5),
        "search_epochs": ((int,), 30),
        "retrain_epochs": ((int,), 30),
        "prune_interval_epochs": ((int,), 5),
        "w_updates": ((int,), 1),
        "lambda_updates": ((int,), 1),
        "batch_size": ((int,), 32),
        "lr": ((float,), 0.1),
        "lr_schedule": ((str,), "constant"),
    })
    try:
        network = NetworkConfig(**net_doc)
        schedule = SearchSchedule(**sched_doc)
    except ValueError as exc:
        raise ConfigError("network/schedule", str(exc)) from exc
    cfg = ExperimentConfig(
        dataset=dataset, network=network, schedule=schedule,
        budget_policy=got["budget_policy"], gamma=got["gamma"], delta=got["delta"],
        split_training=got["split_training"], pretrain=got["pretrain"],
        split_ratio=got["split_ratio"], target_flops=got["target_flops"],
        augment=got["augment"], seed=got["seed"], out_dir=got["out_dir"],
        precision=got["precision"], deterministic=got["deterministic"],
    )
    validate_experiment(cfg)
    return cfg


def validate_experiment(cfg):
    if cfg.budget_policy not in ("none", "adaptive_flops", "adaptive_mac"):
        raise ConfigError("budget_policy", f"unknown policy {cfg.budget_policy!r}")
    if cfg.gamma < 0 or cfg.delta < 0:
        raise ConfigError("gamma", "gamma and delta must be >= 0")
    if not 0.0 < cfg.split_ratio < 1.0:
        raise ConfigError("split_ratio", "must lie in (0, 1)")
    if cfg.precision not in ("f32", "f64"):
        raise ConfigError("precision", "must be f32 or f64")
    if cfg.target_flops is not None and cfg.target_flops <= 0:
        raise ConfigError("target_flops", "must be positive when set")
    ds = cfg.dataset
    if isinstance(ds, SyntheticSpec):
        if ds.num_classes != cfg.network.num_classes:
            raise ConfigError("network.num_classes",
                              f"must equal dataset num_classes ({ds.num_classes})")
        if ds.size != cfg.network.image_size:
            raise ConfigError("network.image_size",
                              f"must equal dataset size ({ds.size})")
        if cfg.network.in_channels != 1:
            raise ConfigError("network.in_channels", "synthetic data is grayscale")
        if ds.train_per_class < 2:
            raise ConfigError("dataset.train_per_class", "need >= 2 for splitting")


def config_to_doc(cfg):
    doc = {
        "dataset": asdict(cfg.dataset),
        "network": asdict(cfg.network),
        "schedule": asdict(cfg.schedule),
        "budget_policy": cfg.budget_policy,
        "gamma": cfg.gamma,
        "delta": cfg.delta,
        "split_training": cfg.split_training,
        "pretrain": cfg.pretrain,
        "split_ratio": cfg.split_ratio,
        "target_flops": cfg.target_flops,
        "augment": cfg.augment,
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "precision": cfg.precision,
        "deterministic": cfg.deterministic,
    }
    return doc


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"config parse error at position {exc.pos}: {exc.msg}") from exc
    return parse_config(doc)


def dump_config(cfg):
    return json.dumps(config_to_doc(cfg), sort_keys=True, indent=2)
