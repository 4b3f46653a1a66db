"""Run and sweep configuration: YAML key/value trees mapped onto dataclasses.

Every problem found while loading is collected, so a bad file is reported in
one pass.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import EnvError, LevelSpec
from .losses import LossError, LossWeights
from .net import PRESETS
from .optim import OptimConfig, OptimError


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class AuxFlags:
    use_rp: bool = True
    use_vr: bool = True
    use_pc: bool = True
    use_fc: bool = False

    @property
    def label(self):
        parts = [name for name, on in (("rp", self.use_rp), ("vr", self.use_vr),
                                       ("pc", self.use_pc), ("fc", self.use_fc)) if on]
        if parts == ["rp", "vr", "pc"]:
            return "unreal"
        return "+".join(["a3c"] + parts)


@dataclass
class ReplayConfig:
    capacity: int = 2000
    warmup: int = 2000  # buffer size before replayed losses start


@dataclass
class RunConfig:
    total_steps: int
    level: LevelSpec
    preset: str = "desk"
    seed: int = 0
    num_workers: int = 1
    eval_interval: int = 5000
    eval_episodes: int = 5
    eval_greedy: bool = True
    checkpoint_interval: int = 0
    stop_at_normalized: float = None  # stop once eval_return / scripted optimum reaches this
    stop_at_return: float = None  # stop once the training return (last 100 episodes) reaches this
    run_id: str = None
    label: str = None
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    aux: AuxFlags = field(default_factory=AuxFlags)
    replay: ReplayConfig = field(default_factory=ReplayConfig)

    def __post_init__(self):
        if self.label is None:
            self.label = self.aux.label
        if self.run_id is None:
            digest = hashlib.sha1(json.dumps(to_dict(self, skip_id=True), sort_keys=True).encode()).hexdigest()
            self.run_id = f"{self.label}-s{self.seed}-{digest[:8]}"

    def hyperparameters(self):
        return {"lr": self.optim.learning_rate, "entropy_cost": self.loss.entropy_cost,
                "lambda_pc": self.loss.lambda_pc}


_SECTIONS = {"level": LevelSpec, "loss": LossWeights, "optim": OptimConfig, "aux": AuxFlags, "replay": ReplayConfig}
_REQUIRED = ("total_steps", "level.category")


def _coerce(value, default, key, errors):
    if value is None:
        return None
    kind = type(default) if default is not None and default is not dataclasses.MISSING else None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        errors.append(f"{key}: expected {kind.__name__}, got {value!r}")
        return dataclasses.MISSING
    return value


def _defaults(cls):
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
        else:
            out[f.name] = dataclasses.MISSING
    return out


# fields whose default is None or absent but which have a known scalar type
_TYPES = {"total_steps": 0, "stop_at_normalized": 0.0, "stop_at_return": 0.0, "run_id": "", "label": ""}


def _build_section(cls, raw, prefix, errors):
    if not isinstance(raw, dict):
        errors.append(f"{prefix}: expected a mapping")
        return None
    defaults = _defaults(cls)
    kwargs = {}
    for key, value in raw.items():
        if key not in defaults:
            errors.append(f"{prefix}.{key}: unknown key")
            continue
        if key == "rewards":
            if not isinstance(value, dict):
                errors.append(f"{prefix}.rewards: expected a mapping")
                continue
            merged = dict(defaults["rewards"])
            for rk, rv in value.items():
                if rk not in merged:
                    errors.append(f"{prefix}.rewards.{rk}: unknown key")
                else:
                    merged[rk] = float(rv)
            kwargs[key] = merged
            continue
        coerced = _coerce(value, defaults[key], f"{prefix}.{key}", errors)
        if coerced is not dataclasses.MISSING:
            kwargs[key] = coerced
    try:
        return cls(**kwargs)
    except (EnvError, LossError, OptimError, TypeError) as exc:
        errors.append(f"{prefix}: {exc}")
        return None


def parse_config(raw):
    """Build a RunConfig from a nested dict, raising ConfigError listing every problem."""
    errors = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    for dotted in _REQUIRED:
        node = raw
        for part in dotted.split("."):
            node = node.get(part) if isinstance(node, dict) else None
        if node is None:
            errors.append(f"{dotted}: required key missing")
    top_defaults = _defaults(RunConfig)
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if key == "level" and not (isinstance(value, dict) and "category" in value):
                continue
            section = _build_section(_SECTIONS[key], value, key, errors)
            if section is not None:
                kwargs[key] = section
        elif key in top_defaults:
            default = _TYPES.get(key, top_defaults[key])
            coerced = _coerce(value, default, key, errors)
            if coerced is not dataclasses.MISSING:
                kwargs[key] = coerced
        else:
            errors.append(f"{key}: unknown key")
    if "preset" in kwargs and kwargs["preset"] not in PRESETS:
        errors.append(f"preset: unknown preset {kwargs['preset']!r}, choose from {sorted(PRESETS)}")
    if isinstance(kwargs.get("total_steps"), int) and kwargs["total_steps"] <= 0:
        errors.append("total_steps: must be > 0")
    if isinstance(kwargs.get("num_workers"), int) and kwargs["num_workers"] < 1:
        errors.append("num_workers: must be >= 1")
    if isinstance(kwargs.get("eval_interval"), int) and kwargs["eval_interval"] < 1:
        errors.append("eval_interval: must be >= 1")
    if errors:
        raise ConfigError(errors)
    return RunConfig(**kwargs)


def load_config(path):
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_config(raw or {})


def to_dict(config, skip_id=False):
    out = dataclasses.asdict(config)
    if skip_id:
        out.pop("run_id", None)
    return out


def dump_config(config, path):
    Path(path).write_text(yaml.safe_dump(to_dict(config), sort_keys=False))
