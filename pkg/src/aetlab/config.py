"""Typed TOML run configuration with one section per module.

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import train as tr
from .data import Dataset, load_cifar10_binary, load_idx_dataset, synth_shapes
from .errors import ConfigError
from .nets import NetConfig

DEFAULTS: dict[str, dict] = {
    "data": {
        "source": "synthetic",  # synthetic | cifar10 | idx
        "train_size": 5000,
        "test_size": 1000,
        "image_size": 32,
        "class_count": 6,
        "seed": 1234,
        "blur": 0.6,
        "max_angle": 15.0,  # orientation jitter of synthetic shapes, degrees
        "train_path": "",
        "test_path": "",
        "train_labels": "",
        "test_labels": "",
    },
    "xform": {
        "kind": "affine",
        "rot_range": [-180.0, 180.0],
        "trans_range": [-0.2, 0.2],
        "scale_range": [0.7, 1.3],
        "shear_range": [-30.0, 30.0],
        "corner_range": [-0.125, 0.125],
        "pre_scale_range": [0.8, 1.2],
        "pre_rot_set": [0, 90, 180, 270],
        "angles": [0, 90, 180, 270],
    },
    "nets": {
        "widths": [8, 16],
        "strides": [2, 1, 2, 1],
        "rep_grid": 2,
        "decoder_hidden": 128,
        "classifier_hidden": 64,
        "logvar_bias_init": -4.0,
    },
    "train": {
        "mode": "aet",
        "batch_size": 64,
        "labeled_per_batch": 16,
        "labels_per_class": 10,
        "epochs": 20,
        "lr": 0.05,
        "schedule": "constant",  # constant | linear | aet-paper | avt-paper | knots
        "lr_final": 0.001,  # end point of the linear schedule
        "lr_knots": [],
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "seed": 0,
        "checkpoint_every": 0,
        "augment_flip": False,
        "augment_translate": 0,
        "grad_clip": 5.0,
    },
    "objectives": {
        "lam": 1.0,
        "entmin_weight": 0.0,
    },
    "eval": {
        "n_samples": 5,
        "k": [3, 5, 10, 15, 20],
        "head": "linear",
        "probe_hidden": 64,
        "probe_epochs": 60,
        "probe_lr": 0.05,
        "per_class": [10, 50, 100],
        "repetitions": 1,
    },
}

XFORM_KEYS = {
    "affine": ("rot_range", "trans_range", "scale_range", "shear_range"),
    "projective": ("corner_range", "pre_scale_range", "pre_rot_set"),
    "categorical": ("angles",),
}


def _check_type(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array, got {value!r}")
    return value


def merge(base: dict, overrides: dict) -> dict:
    """Overlay ``overrides`` on ``base`` after checking sections, keys and types."""
    out = copy.deepcopy(base)
    for section, values in overrides.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(DEFAULTS)}")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; expected one of {sorted(DEFAULTS[section])}")
            out[section][key] = _check_type(section, key, value, DEFAULTS[section][key])
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls(merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        return cls.from_dict(raw)

    def section(self, name: str) -> dict:
        return self.values[name]

    def override(self, section: str, **kv) -> "RunConfig":
        for k in kv:
            if k not in DEFAULTS[section]:
                raise ConfigError(f"unknown key {k!r} in [{section}]")
        vals = copy.deepcopy(self.values)
        vals[section].update({k: _check_type(section, k, v, DEFAULTS[section][k]) for k, v in kv.items()})
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        # building every object surfaces range errors as ConfigError
        self.transform()
        self.net()
        self.train()
        if self.values["data"]["source"] not in ("synthetic", "cifar10", "idx"):
            raise ConfigError(f"[data] source must be synthetic, cifar10 or idx, got {self.values['data']['source']!r}")
        if self.values["eval"]["head"] not in ("linear", "nonlinear"):
            raise ConfigError("[eval] head must be 'linear' or 'nonlinear'")

    # builders -----------------------------------------------------------------------------

    def transform(self):
        x = self.values["xform"]
        kind = x["kind"]
        if kind not in XFORM_KEYS:
            raise ConfigError(f"[xform] kind must be one of {sorted(XFORM_KEYS)}, got {kind!r}")
        d = {"kind": kind} | {k: x[k] for k in XFORM_KEYS[kind]}
        return tr.transform_from_dict(_tuples(d))

    def schedule(self) -> tr.Schedule:
        t = self.values["train"]
        name = t["schedule"]
        if name == "constant":
            return tr.Schedule.constant(t["lr"])
        if name == "linear":
            return tr.Schedule(((0, t["lr"], "linear"), (max(t["epochs"], 1), t["lr_final"], "hold")))
        if name == "aet-paper":
            return tr.AET_PAPER_SCHEDULE
        if name == "avt-paper":
            return tr.AVT_PAPER_SCHEDULE
        if name == "knots":
            try:
                return tr.Schedule(tuple((float(e), float(lr), str(how)) for e, lr, how in t["lr_knots"]))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[train] lr_knots must be [epoch, lr, 'hold'|'linear'] triples ({exc})") from None
        raise ConfigError(f"[train] schedule must be constant, linear, aet-paper, avt-paper or knots, got {name!r}")

    def net(self) -> NetConfig:
        n = self.values["nets"]
        return NetConfig(
            in_channels=3 if self.values["data"]["source"] == "cifar10" else 1,
            image_size=self.values["data"]["image_size"],
            widths=tuple(n["widths"]),
            strides=tuple(n["strides"]),
            rep_grid=n["rep_grid"],
            decoder_hidden=n["decoder_hidden"],
            classifier_hidden=n["classifier_hidden"],
            logvar_bias_init=n["logvar_bias_init"],
        )

    def train(self) -> tr.TrainConfig:
        t = self.values["train"]
        o = self.values["objectives"]
        return tr.TrainConfig(
            mode=t["mode"],
            batch_size=t["batch_size"],
            labeled_per_batch=t["labeled_per_batch"],
            labels_per_class=t["labels_per_class"],
            epochs=t["epochs"],
            lr_schedule=self.schedule(),
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            lam=o["lam"],
            entmin_weight=o["entmin_weight"],
            transform=self.transform(),
            seed=t["seed"],
            checkpoint_every=t["checkpoint_every"],
            augment_flip=t["augment_flip"],
            augment_translate=t["augment_translate"],
            grad_clip=t["grad_clip"],
        )

    def datasets(self) -> tuple[Dataset, Dataset]:
        d = self.values["data"]
        if d["source"] == "synthetic":
            rng = np.random.default_rng(d["seed"])
            full = synth_shapes(d["train_size"] + d["test_size"], d["image_size"], d["class_count"], rng,
                                d["blur"], d["max_angle"])
            n = d["train_size"]
            return (Dataset(full.images[:n], full.labels[:n], full.class_count, "synthetic-train"),
                    Dataset(full.images[n:], full.labels[n:], full.class_count, "synthetic-test"))
        for key in ("train_path", "test_path"):
            if not d[key]:
                raise ConfigError(f"[data] {key} is required for source {d['source']!r}")
        if d["source"] == "cifar10":
            return load_cifar10_binary(d["train_path"]), load_cifar10_binary(d["test_path"])
        return (load_idx_dataset(d["train_path"], d["train_labels"] or None, d["class_count"], "idx-train"),
                load_idx_dataset(d["test_path"], d["test_labels"] or None, d["class_count"], "idx-test"))


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def paper_scale(cfg: RunConfig) -> RunConfig:
    """Hyper-parameters of the original CIFAR-10 runs for the configured mode."""
    mode = cfg.values["train"]["mode"]
    vals = copy.deepcopy(cfg.values)
    t = vals["train"]
    t.update(momentum=0.9, weight_decay=5e-4, batch_size=512, augment_flip=False, augment_translate=0)
    if mode == "aet":
        t.update(schedule="aet-paper", epochs=1500)
    elif mode == "avt":
        t.update(schedule="avt-paper", epochs=4500)
    elif mode == "sat":
        t.update(schedule="avt-paper", epochs=4500, batch_size=540, labeled_per_batch=40,
                 augment_flip=True, augment_translate=2)
    vals["nets"].update(widths=[96, 192], strides=[1, 2, 1, 2], rep_grid=8)
    out = RunConfig(vals)
    out.validate()
    return out
