"""Experiment configuration files.

Configs are INI-style text: ``key = value`` lines grouped under
``[section]`` headers. Every hyperparameter has a named field; presets
carry the per-dataset settings and can be overridden key by key.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .baselines import LinearTrainConfig, ScrubConfig
from .bottleneck import BottleneckConfig
from .data import SyntheticSpec
from .training import TrainConfig

OUTPUT_ENV = "DKVB_UNLEARN_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSource:
    synthetic: SyntheticSpec | None = None
    train_path: str | None = None
    test_path: str | None = None
    # per-example MACs of the frozen encoder, charged on every forward pass
    encoder_macs: int = 0

    def __post_init__(self):
        has_files = self.train_path is not None or self.test_path is not None
        if (self.synthetic is None) == (not has_files):
            raise ConfigError("exactly one dataset source is required: synthetic or EMB1 files")
        if has_files and (self.train_path is None or self.test_path is None):
            raise ConfigError("EMB1 source needs both train_path and test_path")


@dataclass(frozen=True)
class UnlearnSettings:
    method: str = "examples"
    budget: int = -1                 # -1: the whole forget training set / full support
    grid: tuple = (0,)
    forget_classes: str = "auto"     # "auto" | "random" | comma-separated ids
    use_cached_activations: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSource
    bottleneck: dict
    train: TrainConfig
    linear: LinearTrainConfig
    unlearn: UnlearnSettings = UnlearnSettings()
    scrub: ScrubConfig = ScrubConfig()
    finetune: LinearTrainConfig = LinearTrainConfig()
    retrain: LinearTrainConfig = LinearTrainConfig()
    neggrad: LinearTrainConfig = LinearTrainConfig()
    neggrad_beta: float = 0.95
    seeds: tuple = (0,)
    output_dir: str = "runs/default"
    workers: int = 1
    flops_per_mac: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be nonempty")
        if self.unlearn.method not in ("examples", "activations"):
            raise ConfigError(f"unknown unlearning method {self.unlearn.method!r}")

    def bottleneck_config(self, input_dim: int, num_classes: int, seed: int) -> BottleneckConfig:
        return BottleneckConfig(input_dim=input_dim, value_dim=num_classes, seed=seed, **self.bottleneck)

    def output_root(self) -> Path:
        root = os.environ.get(OUTPUT_ENV)
        out = Path(self.output_dir)
        return out if out.is_absolute() or not root else Path(root) / out


# ------------------------------------------------------------------ presets

DESK = """
[data]
source = synthetic
num_classes = 10
dim = 64
train_per_class = 200
test_per_class = 50
mean_scale = 4.0
noise_std = 0.7

[bottleneck]
num_codebooks = 16
pairs_per_codebook = 256
top_k = 1
key_dim = 8
value_init = gaussian
key_init_epochs = 10

[train]
epochs = 20
batch_size = 256
learning_rate = 0.1

[linear]
epochs = 10
batch_size = 256
learning_rate = 0.01

[unlearn]
method = examples
budget = -1
grid = 0, 25, 50, 75, 100, 125, 150, 175, 200
forget_classes = auto

[scrub]
msteps = 3
epochs = 10
learning_rate = 0.03
forget_batch_size = 256
retain_batch_size = 256

[finetune]
epochs = 10
learning_rate = 0.01

[retrain]
epochs = 10
learning_rate = 0.01

[neggrad]
epochs = 10
learning_rate = 0.01
beta = 0.95

[experiment]
seeds = 0, 1, 2, 3, 4
output_dir = runs/desk
"""


def _backbone_preset(top_k, key_dim, value_init, lr, epochs, lin_lr, lin_bs, lin_epochs,
                  s_msteps, s_epochs, s_lr, s_bs):
    return f"""
[bottleneck]
num_codebooks = 256
pairs_per_codebook = 4096
top_k = {top_k}
key_dim = {key_dim}
value_init = {value_init}
key_init_epochs = 10

[train]
epochs = {epochs}
batch_size = 256
learning_rate = {lr}

[linear]
epochs = {lin_epochs}
batch_size = {lin_bs}
learning_rate = {lin_lr}

[scrub]
msteps = {s_msteps}
epochs = {s_epochs}
learning_rate = {s_lr}
forget_batch_size = {s_bs}
retain_batch_size = {s_bs}
"""


# Full-scale hyperparameters; these need EMB1 embeddings from the real backbones.
PRESETS = {
    "desk": DESK,
    "cifar10-vit": _backbone_preset(1, 8, "gaussian", 0.1, 74, 0.001, 256, 1, 3, 3, 0.001, 256),
    "cifar100-vit": _backbone_preset(10, 8, "zeros", 0.3, 71, 0.01, 256, 7, 9, 10, 0.01, 256),
    "lacuna100-vit": _backbone_preset(10, 8, "uniform", 0.3, 7, 0.01, 256, 13, 5, 7, 0.01, 256),
    "imagenet-vit": _backbone_preset(1, 14, "zeros", 0.3, 3, 0.01, 512, 1, 3, 3, 0.001, 512),
    "cifar10-resnet": _backbone_preset(1, 14, "zeros", 0.3, 70, 0.01, 256, 2, 9, 10, 0.01, 256),
    "cifar100-resnet": _backbone_preset(2, 14, "gaussian", 0.3, 4, 0.001, 256, 72, 3, 30, 0.001, 256),
    "lacuna100-resnet": _backbone_preset(1, 8, "gaussian", 0.1, 1, 0.01, 512, 73, 3, 30, 0.01, 256),
    "imagenet-resnet": _backbone_preset(1, 14, "gaussian", 0.3, 5, 0.001, 512, 11, 3, 10, 0.001, 512),
}

# ------------------------------------------------------------------ parsing

def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _coerce(dc, section: configparser.SectionProxy, skip=()) -> dict:
    out = {}
    names = {f.name: f for f in fields(dc)}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in [{section.name}]")
        out[key] = _convert(raw, names[key].type, key)
    return out


def _convert(raw: str, typ, key: str):
    t = str(typ)
    raw = raw.strip()
    try:
        if raw.lower() in ("none", "") and "None" in t:
            return None
        if t.startswith("bool") or t == "bool":
            return raw.lower() in ("1", "true", "yes", "on")
        if t.startswith("int"):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if t.startswith("float"):
            return float(raw)
        if t.startswith("tuple"):
            return _ints(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


_SECTIONS = {"data", "bottleneck", "train", "linear", "unlearn", "scrub", "finetune", "retrain",
             "neggrad", "experiment"}


def parse_config(text: str, base: str | None = "desk", overrides=()) -> ExperimentConfig:
    """Parse config text layered on top of a preset (``base=None`` for none).

    ``overrides`` holds ``section.key=value`` strings applied last.
    """
    cp = configparser.ConfigParser(interpolation=None)
    try:
        if base is not None:
            if base not in PRESETS:
                raise ConfigError(f"unknown preset {base!r}; choose from {sorted(PRESETS)}")
            cp.read_string(DESK)
            if base != "desk":
                cp.read_string(PRESETS[base])
        cp.read_string(text)
        for item in overrides:
            name, sep, value = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot or not key:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, value.strip())
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    unknown = set(cp.sections()) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    return _build(cp)


def load_config(path, base: str | None = "desk", overrides=()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    first = text.lstrip().splitlines()[0] if text.strip() else ""
    if first.startswith("#") and "preset" in first and "=" in first:
        base = first.split("=", 1)[1].strip()
    return parse_config(text, base, overrides)


def _section(cp, name):
    return cp[name] if cp.has_section(name) else {}


def _build(cp: configparser.ConfigParser) -> ExperimentConfig:
    d = dict(_section(cp, "data"))
    source = d.pop("source", "synthetic").strip()
    encoder_macs = int(float(d.pop("encoder_macs", "0")))
    try:
        if source == "synthetic":
            train_path = d.pop("train_path", None)
            test_path = d.pop("test_path", None)
            if train_path or test_path:
                raise ConfigError("set source = emb1 to read train_path/test_path")
            kw = {k: _convert(v, f.type, k) for k, v in d.items()
                  for f in fields(SyntheticSpec) if f.name == k}
            extra = set(d) - {f.name for f in fields(SyntheticSpec)}
            if extra:
                raise ConfigError(f"unknown key(s) in [data]: {sorted(extra)}")
            data = DataSource(synthetic=SyntheticSpec(**kw), encoder_macs=encoder_macs)
        elif source == "emb1":
            data = DataSource(train_path=d.get("train_path"), test_path=d.get("test_path"),
                              encoder_macs=encoder_macs)
        else:
            raise ConfigError(f"unknown data source {source!r}")

        bn_fields = {f.name: f for f in fields(BottleneckConfig)}
        bottleneck = {}
        for k, v in _section(cp, "bottleneck").items():
            if k not in bn_fields or k in ("input_dim", "value_dim", "seed"):
                raise ConfigError(f"unknown key {k!r} in [bottleneck]")
            bottleneck[k] = _convert(v, bn_fields[k].type, k)
        BottleneckConfig(input_dim=1, value_dim=1, **bottleneck)    # validate early

        def dc(cls, name, skip=()):
            return cls(**_coerce(cls, _section(cp, name), skip)) if cp.has_section(name) else cls()

        neg = _section(cp, "neggrad")
        beta = float(neg["beta"]) if "beta" in neg else 0.95
        ex = _section(cp, "experiment")
        return ExperimentConfig(
            data=data,
            bottleneck=bottleneck,
            train=dc(TrainConfig, "train"),
            linear=dc(LinearTrainConfig, "linear"),
            unlearn=dc(UnlearnSettings, "unlearn"),
            scrub=dc(ScrubConfig, "scrub"),
            finetune=dc(LinearTrainConfig, "finetune"),
            retrain=dc(LinearTrainConfig, "retrain"),
            neggrad=dc(LinearTrainConfig, "neggrad", skip=("beta",)),
            neggrad_beta=beta,
            seeds=_ints(ex["seeds"]) if "seeds" in ex else (0,),
            output_dir=ex.get("output_dir", "runs/default"),
            workers=int(ex.get("workers", 1)),
            flops_per_mac=int(ex.get("flops_per_mac", 1)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
