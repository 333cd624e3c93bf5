"""Flat `key = value` experiment configuration with dotted namespaces.

The key vocabulary is closed: unknown keys are configuration errors, and
every value is cast and validated against the schema below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import ConfigError


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _int(raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError as e:
        raise ConfigError(f"not an integer: {raw!r}") from e


def _float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError as e:
        raise ConfigError(f"not a number: {raw!r}") from e


def _str(raw: str) -> str:
    return raw.strip()


def _choice(*options):
    def cast(raw: str) -> str:
        v = raw.strip()
        if v not in options:
            raise ConfigError(f"{v!r} not one of {options}")
        return v

    return cast


def _int_list(raw: str) -> tuple[int, ...]:
    parts = [p for p in raw.split(",") if p.strip()]
    return tuple(_int(p) for p in parts)


def _float_list(raw: str) -> tuple[float, ...]:
    parts = [p for p in raw.split(",") if p.strip()]
    return tuple(_float(p) for p in parts)


SCHEMA: dict[str, tuple] = {
    "scenario": (_str, "run"),
    "seed": (_int, None),  # mandatory
    "out": (_str, ""),
    # data
    "data.kind": (_choice("blobs", "patterns", "idx"), "blobs"),
    "data.classes": (_int, 10),
    "data.rows": (_int, 8),
    "data.cols": (_int, 8),
    "data.per_class": (_int, 20),
    "data.separation": (_float, 8.0),
    "data.block": (_int, 2),
    "data.noise": (_float, 0.04),
    "data.lo": (_float, 0.05),
    "data.hi": (_float, 0.95),
    "data.bright_fraction": (_float, 0.5),
    "data.image_path": (_str, ""),
    "data.label_path": (_str, ""),
    "data.test_per_class": (_int, 5),
    # partition
    "partition.clients": (_int, 10),
    "partition.per_client": (_int, 10),
    "partition.classes_per_client": (_int, 2),
    # model
    "model.hidden": (_int_list, (16,)),
    "model.activation": (_choice("tanh", "sigmoid"), "tanh"),
    "model.init_scale": (_float, 0.2),
    # training
    "train.rounds": (_int, 10),
    "train.participants": (_int, 5),
    "train.local_iters": (_int, 1),
    "train.batch": (_int, 4),
    "train.local_lr": (_float, 0.1),
    "train.global_lr": (_float, 1.0),
    "train.aggregation": (_choice("fedsgd", "fedavg", "delta"), "fedsgd"),
    "train.record_trace": (_bool, False),
    # privacy / defense ladder
    "privacy.kind": (_choice("none", "compression", "gaussian", "fixed_dp", "dynamic_dp"), "none"),
    "privacy.ratio": (_float, 0.0),
    "privacy.variance": (_float, 0.0),
    "privacy.clip": (_float, 4.0),
    "privacy.sigma0": (_float, 6.0),
    "privacy.sigmaT": (_float, 3.0),
    "privacy.decay": (_choice("linear", "staircase", "exponential", "cyclic"), "exponential"),
    "privacy.stages": (_int, 4),
    "privacy.period": (_int, 0),
    "privacy.site": (_choice("per_example", "per_client_update"), "per_example"),
    "privacy.delta": (_float, 1e-5),
    # poisoning
    "poison.kind": (_choice("dirty_label", "backdoor", "clean_label"), "dirty_label"),
    "poison.source": (_int, 1),
    "poison.target": (_int, 9),
    "poison.fraction": (_float, 0.1),
    "poison.availability": (_float, 0.9),
    "poison.window_start": (_int, 0),
    "poison.window_end": (_int, 0),
    "poison.beta": (_float, 0.3),
    "poison.shard_fraction": (_float, 0.5),
    "poison.trigger_size": (_int, 2),
    "poison.trigger_value": (_float, 1.0),
    "poison.trigger_row": (_int, 0),
    "poison.trigger_col": (_int, 0),
    # leakage attack
    "attack.init": (_choice("random", "pattern4", "pattern16", "binary", "rgb", "exemplar"), "random"),
    "attack.iters": (_int, 1000),
    "attack.lr": (_float, 1.0),
    "attack.threshold": (_float, 1e-10),
    "attack.optimizer": (_choice("gd", "adam"), "gd"),
    "attack.surface": (_choice("client_sgd", "server_aggregation"), "client_sgd"),
    "attack.trials": (_int, 5),
    "attack.round": (_int, 0),
    "attack.local_iters": (_int, 1),
    "attack.batch": (_int, 1),
    "attack.clamp": (_bool, True),
    "attack.dump_images": (_bool, False),
    # forensics
    "forensics.window": (_int, 10),
    "forensics.density_q": (_float, 0.1),
    "forensics.norm_rule": (_bool, True),
    "forensics.silhouette": (_float, 0.5),
    "forensics.classes": (_str, "all"),
    "detect.trace": (_str, ""),
    # sweep
    "sweep.param": (_str, ""),
    "sweep.values": (_float_list, ()),
    "sweep.mode": (_choice("train", "poison", "leak"), "train"),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if key in self.values:
            return self.values[key]
        default = SCHEMA[key][1]
        if default is None:
            raise ConfigError(f"missing mandatory config key {key!r}")
        return default

    def set(self, key: str, raw: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cast = SCHEMA[key][0]
        self.values[key] = cast(raw)

    def with_overrides(self, assignments: dict) -> "ExperimentConfig":
        clone = ExperimentConfig(dict(self.values))
        for k, v in assignments.items():
            clone.set(k, v if isinstance(v, str) else repr(v))
        return clone


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise e
    return parse_config_text(text)


def apply_set_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Each pair is `key=value`, as passed via repeated --set flags."""
    out = ExperimentConfig(dict(cfg.values))
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out.set(key.strip(), raw)
    return out
