"""Experiment configuration, run manifests, and single training cells.

Configuration is an INI file with sections ``[data]``, ``[train]``,
``[filter]`` and ``[sweep]``. Environment variables named
``CDR_<SECTION>_<KEY>`` (for example ``CDR_TRAIN_EPOCHS=20``) override file
values. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import json
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .datamodel import load_table
from .kernels import BACKEND
from .metrics import MetricsReport, evaluate
from .models import PropensityTable, estimate_propensity_popularity, load_propensities
from .simulator import experiment_tables, make_world
from .trainer import ConfigError, TrainConfig, TrainResult, train

ENV_PREFIX = "CDR_"


def _bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _words(text):
    return tuple(str(text).replace(",", " ").split())


# section -> key -> (parser, default)
SCHEMA = {
    "data": {
        "dir": (str, ""),
        "format": (str, "synthetic"),
        "train": (str, ""),
        "test": (str, ""),
        "propensity": (str, ""),
        "threshold": (float, 3.0),
        "validation_fraction": (float, 0.10),
        "num_users": (int, 20),
        "num_items": (int, 20),
        "bias_strength": (float, 2.0),
        "mean_propensity": (float, 0.2),
        "unbiased_fraction": (float, 0.5),
    },
    "train": {
        "method": (str, "drjl"),
        "cdr": (_bool, False),
        "learning_rate": (float, 0.05),
        "weight_decay": (float, 1e-3),
        "batch_size": (int, 64),
        "epochs": (int, 200),
        "dim": (int, 4),
        "loss_kind": (str, "bce"),
        "propensity_source": (str, "popularity"),
        "propensity_floor": (float, 0.05),
        "patience": (int, 20),
        "seeds": (_ints, (0,)),
    },
    "filter": {
        "eta": (float, 5.0),
        "passes": (int, 10),
        "dropout_rate": (float, 0.5),
    },
    "sweep": {
        "etas": (_floats, (0.1, 0.5, 1.0, 3.0, 5.0, 7.0, 10.0, 50.0)),
        "methods": (_words, ("drjl",)),
    },
}
PATH_KEYS = (("data", "dir"), ("data", "train"), ("data", "test"), ("data", "propensity"))


@dataclass
class ExperimentConfig:
    """Validated view over the four configuration sections."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, section):
        return self.values[section]

    def snapshot(self):
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in kv.items()}
                for s, kv in self.values.items()}

    def train_config(self, seed, eta=None, method=None, cdr=None) -> TrainConfig:
        t, f = self.values["train"], self.values["filter"]
        return TrainConfig(
            method=method if method is not None else t["method"],
            cdr_enabled=t["cdr"] if cdr is None else cdr,
            eta=f["eta"] if eta is None else eta,
            learning_rate=t["learning_rate"],
            weight_decay=t["weight_decay"],
            batch_size=t["batch_size"],
            epochs=t["epochs"],
            dim=t["dim"],
            loss_kind=t["loss_kind"],
            seed=seed,
            propensity_source=t["propensity_source"],
            patience=t["patience"],
            dropout_passes=f["passes"],
            dropout_rate=f["dropout_rate"],
        )

    @property
    def seeds(self):
        return self.values["train"]["seeds"]

    def with_overrides(self, section, **kv):
        values = {s: dict(v) for s, v in self.values.items()}
        values[section].update(kv)
        return ExperimentConfig(values)


def _parse(section, key, raw, origin):
    if section not in SCHEMA:
        raise ConfigError(f"{origin}: unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"{origin}: unknown key {section}.{key}")
    parser = SCHEMA[section][key][0]
    try:
        return parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{origin}: {section}.{key}: {exc}") from None


def load_config(path=None, environ=None) -> ExperimentConfig:
    """Defaults, then the INI file at ``path``, then ``CDR_<SECTION>_<KEY>`` variables."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        base = path.parent
        cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                values[section][key] = _parse(section, key, raw, str(path))
    environ = os.environ if environ is None else environ
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in SCHEMA:
            values[section][key] = _parse(section, key, raw, name)
    for section, key in PATH_KEYS:
        p = values[section][key]
        if p:
            p = Path(p) if Path(p).is_absolute() else base / p
            values[section][key] = str(p)
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    for section, key in PATH_KEYS[1:]:  # data.dir may be created by `cdr prepare`
        p = cfg[section][key]
        if p and not Path(p).exists():
            raise ConfigError(f"{section}.{key}: path does not exist: {p}")
    if cfg["data"]["format"] not in ("coat", "triplets", "synthetic"):
        raise ConfigError(f"data.format: unknown value {cfg['data']['format']!r}")
    if not cfg["train"]["seeds"]:
        raise ConfigError("train.seeds: empty seed list")
    if not cfg["sweep"]["etas"]:
        raise ConfigError("sweep.etas: empty eta list")
    if any(not e > 0 for e in cfg["sweep"]["etas"]):
        raise ConfigError("sweep.etas: every eta must be positive")
    for m in cfg["sweep"]["methods"]:
        if m not in ("naive", "ips", "eib", "drjl"):
            raise ConfigError(f"sweep.methods: unknown value {m!r}")
    if not cfg["train"]["propensity_floor"] > 0:
        raise ConfigError("train.propensity_floor: must be positive")
    # TrainConfig carries the remaining field checks
    cfg.train_config(cfg.seeds[0])


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    artifacts: list = field(default_factory=list)
    wall_times: dict = field(default_factory=dict)
    version: str = __version__
    backend: str = BACKEND
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(asdict(self), fh, indent=2)
            fh.write("\n")

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass
class ExperimentData:
    train: object
    validation: object
    test: object
    oracle_propensity: Optional[PropensityTable] = None


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    """Load train/validation/test tables from the prepared data directory."""
    d = cfg["data"]["dir"]
    if not d:
        raise ConfigError("data.dir: no prepared data directory configured")
    d = Path(d)
    paths = [d / f"{name}.tsv" for name in ("train", "validation", "test")]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"data.dir: missing {p}")
    tables = [load_table(p) for p in paths]
    nu = max(t.num_users for t in tables)
    ni = max(t.num_items for t in tables)
    if any((t.num_users, t.num_items) != (nu, ni) for t in tables):
        tables = [load_table(p, nu, ni) for p in paths]
    oracle = d / "propensity.tsv"
    if oracle.is_file():
        oracle = load_propensities(oracle, nu, ni, cfg["train"]["propensity_floor"])
    else:
        oracle = None
    return ExperimentData(*tables, oracle_propensity=oracle)


def synthetic_data(cfg: ExperimentConfig, seed) -> ExperimentData:
    """World, biased training draw and unbiased splits generated from ``seed``.

    The true propensities, clipped at ``train.propensity_floor``, serve as
    the oracle propensity table.
    """
    d = cfg["data"]
    world = make_world(d["num_users"], d["num_items"], seed=seed, bias_strength=d["bias_strength"],
                       mean_propensity=d["mean_propensity"])
    train_t, val_t, test_t = experiment_tables(world, seed, d["unbiased_fraction"], d["validation_fraction"])
    oracle = PropensityTable(world.propensity_matrix(), cfg["train"]["propensity_floor"])
    return ExperimentData(train_t, val_t, test_t, oracle)


def propensities_for(cfg: ExperimentConfig, data: ExperimentData) -> PropensityTable:
    source = cfg["train"]["propensity_source"]
    floor = cfg["train"]["propensity_floor"]
    nu, ni = data.train.num_users, data.train.num_items
    if source == "popularity":
        return estimate_propensity_popularity(data.train, floor=floor)
    if source == "oracle":
        if data.oracle_propensity is None:
            raise ConfigError("train.propensity_source: oracle needs propensity.tsv in data.dir")
        return data.oracle_propensity
    path = cfg["data"]["propensity"]
    if not path:
        raise ConfigError("train.propensity_source: file needs data.propensity")
    return load_propensities(path, nu, ni, floor)


@dataclass
class CellResult:
    method: str
    cdr: bool
    seed: int
    eta: float
    metrics: MetricsReport
    result: TrainResult


def run_cell(cfg: ExperimentConfig, data: ExperimentData, seed, eta=None, method=None,
             cdr=None, k=5) -> CellResult:
    """Train one (method, seed, eta) combination and evaluate it on the test table."""
    tcfg = cfg.train_config(seed, eta, method, cdr)
    result = train(data.train, data.validation, propensities_for(cfg, data), tcfg)
    report = evaluate(result.recommendation_model, data.test, k, result.imputation_model, tcfg.loss_kind)
    return CellResult(tcfg.method.value, tcfg.cdr_enabled, seed, tcfg.eta, report, result)
