"""Experiment configuration: profiles, loading, validation and hashing.

A config file is YAML or JSON.  Every section is optional; missing values
come from the selected profile (``desk`` unless the file or the CLI says
otherwise).  ``FEDFACE_OUTPUT_DIR`` overrides ``output_dir``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError, PathError
from .federation import FederationConfig
from .meta import OptimizerConfig
from .metrics import EvalConfig
from .nn import ModelSpec
from .partitions import SPLIT_RATIOS, AttributeRule, SyntheticDatasetSpec

CONFIG_SCHEMA = "fedface.experiment/v1"
OUTPUT_ENV = "FEDFACE_OUTPUT_DIR"
SCHEMES = ("equal", "lognormal", "attribute")

_DESK = {
    "dataset": {
        "synthetic": {
            "num_identities": 150,
            "samples_per_identity": [20, 20],
            "feature_dim": 64,
            "num_binary_attributes": 8,
            "center_spread": 1.0,
            "attribute_shift": 1.5,
            "noise": 1.5,
            "attribute_prevalence": 0.5,
            "attribute_flip": 0.05,
            "seed": 0,
        },
        "table": None,
    },
    "model": {"hidden_layers": [64], "embedding_dim": 32, "scale": 8.0, "margin": 0.5},
    "partition": {
        "scheme": "attribute",
        "num_clients": 20,
        "holdout": 5,
        "mu": 3.0,
        "sigma": 3.0,
        "predicates_per_rule": 2,
        "rules": None,
        "target_size_per_client": None,
        "split_ratios": list(SPLIT_RATIOS),
        "seed": 0,
    },
    "federation": {
        "rounds": 10,
        "algorithm": "hf_maml",
        "head_mode": "local",
        "reg_weight": 0.0,
        "epochs": 5,
        "batches_per_epoch": 50,
        "batch_size": 64,
        "use_margin": True,
        "reg_scope": "all",
        "reg_reduction": "mean",
        "validate": True,
        "val_pairs": 256,
    },
    "optimizer": {
        "lr": 0.01,
        "momentum": 0.9,
        "alpha": 0.01,
        "beta": 0.1,
        "delta": 0.001,
        "maml_momentum": False,
    },
    "evaluation": {
        "far_target": 0.1,
        "pairs": 512,
        "repeats": 5,
        "tune_batches": 5,
        "population_std": True,
        "tune_lr": None,
        "tune_momentum": None,
    },
    "seed": 0,
    "num_seeds": 10,
    "strict": True,
    "output_dir": "fedface-out",
}


def _full():
    p = copy.deepcopy(_DESK)
    p["dataset"]["synthetic"].update(num_identities=1500, samples_per_identity=[10, 30], feature_dim=256)
    p["model"].update(hidden_layers=[1000], embedding_dim=512)
    p["federation"].update(rounds=30, epochs=50)
    return p


PROFILES = {"desk": _DESK, "full": _full()}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError("unknown key", where)
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path = Path(".")

    def __post_init__(self):
        self.validate()

    # --- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, data, profile=None, base_dir="."):
        data = dict(data or {})
        schema = data.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"expected {CONFIG_SCHEMA!r}, got {schema!r}", "schema")
        name = profile or data.pop("profile", None) or "desk"
        data.pop("profile", None)
        if name not in PROFILES:
            raise ConfigError(f"unknown profile {name!r}", "profile")
        raw = _merge(PROFILES[name], data)
        raw["profile"] = name
        if os.environ.get(OUTPUT_ENV):
            raw["output_dir"] = os.environ[OUTPUT_ENV]
        return cls(raw, Path(base_dir))

    @classmethod
    def load(cls, path, profile=None):
        path = Path(path)
        if not path.is_file():
            raise PathError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparseable config: {exc}", "file") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping", "file")
        return cls.from_dict(data, profile, base_dir=path.parent)

    def with_overrides(self, **sections):
        raw = copy.deepcopy(self.raw)
        profile = raw.pop("profile")
        raw = _merge(raw, sections)
        raw["profile"] = profile
        return ExperimentConfig(raw, self.base_dir)

    # --- typed views --------------------------------------------------------

    def validate(self):
        r = self.raw
        for key in ("seed", "num_seeds"):
            if not isinstance(r[key], int) or r[key] < (1 if key == "num_seeds" else 0):
                raise ConfigError("must be a non-negative integer (num_seeds >= 1)", key)
        if r["optimizer"]["alpha"] is None or not r["optimizer"]["alpha"] > 0:
            raise ConfigError("must be > 0", "optimizer.alpha")
        p = r["partition"]
        if p["scheme"] not in SCHEMES:
            raise ConfigError(f"must be one of {SCHEMES}", "partition.scheme")
        if not isinstance(p["num_clients"], int) or p["num_clients"] < 1:
            raise ConfigError("must be >= 1", "partition.num_clients")
        if not 0 <= self._holdout_count() < p["num_clients"]:
            raise ConfigError("must leave at least one training client", "partition.holdout")
        if p["scheme"] == "lognormal" and not p["sigma"] >= 0:
            raise ConfigError("must be >= 0", "partition.sigma")
        table = r["dataset"]["table"]
        if table is not None and not self.table_path.is_file():
            raise PathError(f"dataset table not found: {self.table_path}")
        # build every typed section once so range errors surface now
        self.synthetic_spec
        self.model_spec(self.raw["dataset"]["synthetic"]["feature_dim"])
        self.optimizer
        self.eval_config
        self.federation_config(0)
        self.rules

    def _section(self, name, cls, prefix=None):
        try:
            return cls(**self.raw[name])
        except (ConfigError, TypeError) as exc:
            raise _nested(exc, prefix or name) from None

    @property
    def synthetic_spec(self):
        s = dict(self.raw["dataset"]["synthetic"])
        s["samples_per_identity"] = tuple(s["samples_per_identity"])
        s["attribute_names"] = tuple(s.get("attribute_names", ()))
        try:
            return SyntheticDatasetSpec(**s)
        except (ConfigError, TypeError) as exc:
            raise _nested(exc, "dataset.synthetic") from None

    @property
    def table_path(self):
        t = self.raw["dataset"]["table"]
        return None if t is None else (self.base_dir / t)

    def model_spec(self, input_dim, num_classes=1):
        m = dict(self.raw["model"])
        m["hidden_layers"] = tuple(m["hidden_layers"])
        try:
            return ModelSpec(input_dim=int(input_dim), num_classes=num_classes, **m)
        except (ConfigError, TypeError) as exc:
            raise _nested(exc, "model") from None

    @property
    def optimizer(self):
        return self._section("optimizer", OptimizerConfig)

    @property
    def eval_config(self):
        return self._section("evaluation", EvalConfig)

    def _holdout_count(self):
        h = self.raw["partition"]["holdout"]
        return len(h) if isinstance(h, list) else int(h)

    def client_split(self, num_clients=None):
        k = num_clients or self.raw["partition"]["num_clients"]
        h = self.raw["partition"]["holdout"]
        holdout = sorted(int(c) for c in h) if isinstance(h, list) else list(range(k - int(h), k))
        train = [c for c in range(k) if c not in holdout]
        return train, holdout

    def federation_config(self, seed):
        f = dict(self.raw["federation"])
        train, holdout = self.client_split()
        try:
            return FederationConfig(
                train_clients=train,
                holdout_clients=holdout,
                optimizer=self.optimizer,
                seed=int(seed),
                strict=bool(self.raw["strict"]),
                far_target=self.raw["evaluation"]["far_target"],
                **f,
            )
        except (ConfigError, TypeError) as exc:
            raise _nested(exc, "federation") from None

    @property
    def rules(self):
        rules = self.raw["partition"]["rules"]
        if rules is None:
            return None
        try:
            return [AttributeRule.from_dict(r) for r in rules]
        except (ConfigError, KeyError, TypeError) as exc:
            raise _nested(exc, "partition.rules") from None

    @property
    def seeds(self):
        return [self.raw["seed"] + i for i in range(self.raw["num_seeds"])]

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    # --- identity -----------------------------------------------------------

    def resolved(self):
        """The config as plain data, minus where outputs go."""
        r = copy.deepcopy(self.raw)
        r.pop("output_dir")
        r["schema"] = CONFIG_SCHEMA
        return r

    def config_hash(self):
        return config_hash(self.resolved())

    def run_label(self):
        f = self.raw["federation"]
        head = "regularized" if f["reg_weight"] > 0 else f["head_mode"]
        return f"{f['algorithm']}-{head}"


def _nested(exc, prefix):
    """Re-raise ``exc`` as a ConfigError whose field is prefixed by its section."""
    field = getattr(exc, "field", None)
    message = str(exc)
    if field:
        message = message[len(field) + 2:] if message.startswith(f"{field}: ") else message
        return ConfigError(message, f"{prefix}.{field}")
    return ConfigError(message, prefix)


def config_hash(resolved):
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
