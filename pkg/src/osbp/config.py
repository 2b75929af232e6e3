"""Run configuration files.

A run is described by one INI file with four sections. Every key has a
type and a default; unknown sections or keys are rejected by name.
Relative paths are resolved against the directory of the config file.

::

    [data]
    kind = synth            ; synth | csv | idx | manifest
    known = 0,1,2,3,4       ; original labels treated as known (csv/idx)
    unknown_ratio =         ; optional, unknown / total target samples
    seed = 0

    [model]
    hidden = 100,100

    [train]
    method = osbp           ; osbp | source_only | mmd | bp
    t = 0.5

    [output]
    report = report.json

See ``SCHEMA`` for the full key list.
"""

from __future__ import annotations

import configparser
import copy
import os
from dataclasses import dataclass, field

from .baselines import DomainHeadSpec, MMDConfig, RejectorConfig
from .data import SynthConfig
from .errors import ConfigError, ValidationError
from .model import TrainConfig

METHODS = ("osbp", "source_only", "mmd", "bp")
SWEEP_PARAMS = {
    "t": ("train", "t"),
    "unknown_ratio": ("data", "unknown_ratio"),
    "grl_weight": ("train", "grl_weight"),
    "threshold": ("train", "threshold"),
}
# batch size and epochs per data scale, after the appendix settings
SCALE_DEFAULTS = {
    "feature": {"batch_size": 32, "epochs": 500},
    "digits": {"batch_size": 128, "epochs": 200},
    "large": {"batch_size": 32, "epochs": 10},
}


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    return lambda text: None if text.strip() == "" else conv(text)


def _choice(*options):
    def conv(text):
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return conv


_path = _opt(str)

SCHEMA = {
    "data": {
        "kind": (_choice("synth", "csv", "idx", "manifest"), "synth"),
        "scale": (_choice("auto", "feature", "digits", "large"), "auto"),
        "seed": (int, 0),
        "known": (_opt(_ints), None),
        "unknown_ratio": (_opt(float), None),
        # synth
        "known_classes": (int, 3),
        "unknown_clusters": (int, 2),
        "source_per_class": (int, 50),
        "target_per_class": (int, 50),
        "unknown_per_cluster": (_opt(int), None),
        "width": (int, 2),
        "shift": (_floats, (0.5, 0.0)),
        "spread": (float, 0.3),
        "radius": (float, 3.0),
        "unknown_radius": (float, 5.0),
        # csv
        "source": (_path, None),
        "target": (_path, None),
        # idx
        "source_images": (_path, None),
        "source_labels": (_path, None),
        "target_images": (_path, None),
        "target_labels": (_path, None),
        # manifest
        "manifest": (_path, None),
    },
    "model": {
        "hidden": (_ints, (100, 100)),
        "classifier_hidden": (_ints, ()),
        "batchnorm": (_bool, True),
        "slope": (float, 0.01),
        "bn_momentum": (float, 0.9),
        "bn_eps": (float, 1e-5),
        "dropout": (float, 0.0),
    },
    "train": {
        "method": (_choice(*METHODS), "osbp"),
        "t": (float, 0.5),
        "optimizer": (_choice("sgd", "adam"), "sgd"),
        "lr": (_opt(float), None),
        "momentum": (float, 0.9),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "adam_eps": (float, 1e-8),
        "batch_size": (_opt(int), None),
        "epochs": (_opt(int), None),
        "seed": (int, 0),
        "grl_weight": (float, 1.0),
        "mmd_sigmas": (_floats, (0.1, 0.05, 0.01, 0.0001, 0.00001)),
        "mmd_weight": (float, 1.0),
        "domain_hidden": (int, 100),
        "threshold": (float, 0.1),
    },
    "output": {
        "report": (_path, "report.json"),
        "format": (_opt(_choice("json", "csv")), None),
        "checkpoint": (_path, None),
        "dump_features": (_bool, False),
        "features": (_path, "features.csv"),
        "bins": (int, 20),
    },
}

PATH_KEYS = {
    ("data", k) for k in ("source", "target", "source_images", "source_labels",
                          "target_images", "target_labels", "manifest")
} | {("output", k) for k in ("report", "checkpoint", "features")}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    base_dir: str = "."

    def __getitem__(self, key: str):
        section, name = key.split(".", 1)
        return self.values[section][name]

    def set(self, key: str, raw: str | None = None, value=None):
        """Set ``section.key`` from its text form ``raw`` or a ready ``value``."""
        if "." not in key:
            raise ConfigError(f"override {key!r} must look like section.key")
        section, name = key.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if name not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {name!r} in [{section}]")
        if raw is not None:
            conv = SCHEMA[section][name][0]
            try:
                value = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{name}: {exc}") from None
            if (section, name) in PATH_KEYS and value is not None:
                value = os.path.join(self.base_dir, value)
        self.values[section][name] = value

    def copy(self) -> "RunConfig":
        return RunConfig(copy.deepcopy(self.values), self.base_dir)

    @property
    def scale(self) -> str:
        scale = self["data.scale"]
        if scale == "auto":
            return "digits" if self["data.kind"] == "idx" else "feature"
        return scale

    def train_config(self) -> TrainConfig:
        tr, md = self.values["train"], self.values["model"]
        defaults = SCALE_DEFAULTS[self.scale]
        lr = tr["lr"]
        if lr is None:
            lr = 1e-3 if tr["optimizer"] == "sgd" else 2e-5
        cfg = TrainConfig(
            t=tr["t"], optimizer=tr["optimizer"], lr=lr, momentum=tr["momentum"],
            beta1=tr["beta1"], beta2=tr["beta2"], adam_eps=tr["adam_eps"],
            batch_size=tr["batch_size"] or defaults["batch_size"],
            epochs=tr["epochs"] if tr["epochs"] is not None else defaults["epochs"],
            seed=tr["seed"], grl_weight=tr["grl_weight"],
            hidden=md["hidden"], classifier_hidden=md["classifier_hidden"],
            batchnorm=md["batchnorm"], slope=md["slope"], bn_momentum=md["bn_momentum"],
            bn_eps=md["bn_eps"], dropout=md["dropout"],
        )
        try:
            return cfg.validate()
        except ConfigError:
            raise
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None

    def synth_config(self) -> SynthConfig:
        d = self.values["data"]
        cfg = SynthConfig(
            K=d["known_classes"], unknown_clusters=d["unknown_clusters"],
            source_per_class=d["source_per_class"], target_per_class=d["target_per_class"],
            unknown_per_cluster=d["unknown_per_cluster"], width=d["width"], shift=d["shift"],
            spread=d["spread"], radius=d["radius"], unknown_radius=d["unknown_radius"],
        )
        try:
            cfg.validate()
        except ValidationError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def mmd_config(self) -> MMDConfig:
        return MMDConfig(self["train.mmd_sigmas"], self["train.mmd_weight"])

    def domain_head(self) -> DomainHeadSpec:
        return DomainHeadSpec(self["train.domain_hidden"], self["train.grl_weight"])

    def rejector(self) -> RejectorConfig:
        return RejectorConfig(self["train.threshold"])

    def report_format(self) -> str:
        fmt = self["output.format"]
        if fmt:
            return fmt
        path = self["output.report"] or ""
        return "csv" if path.lower().endswith(".csv") else "json"


def defaults(base_dir: str = ".") -> RunConfig:
    cfg = RunConfig({s: {k: v[1] for k, v in keys.items()} for s, keys in SCHEMA.items()}, base_dir)
    for section, name in PATH_KEYS:
        if cfg.values[section][name] is not None:
            cfg.values[section][name] = os.path.join(base_dir, cfg.values[section][name])
    return cfg


def load_config(path: str | None, overrides=()) -> RunConfig:
    """Read an INI run config (or start from defaults when ``path`` is None).

    ``overrides`` are ``section.key=value`` strings applied after the file.
    """
    base_dir = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    cfg = defaults(base_dir)
    if path:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"),
                                           interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(f"{section}.{key}", raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw)
    if cfg["train.threshold"] < 0 or cfg["train.threshold"] >= 1:
        raise ConfigError(f"threshold must lie in [0, 1), got {cfg['train.threshold']}")
    return cfg
