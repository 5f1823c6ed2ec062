"""Experiment configuration: one JSON document, validated before any work starts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ConfigError

EXPERIMENTS = ("train", "noise-sweep", "interpolate", "layer-hist", "alpha-curve",
               "dataset-audit", "composition-check")
METHODS = ("vanilla", "laplacian", "orthogonality")
DATASET_KINDS = ("blobs", "cifar10")

# method -> (regularizer, default weight)
METHOD_REGULARIZERS = {"vanilla": ("none", 0.0), "laplacian": ("laplacian", 1e-3),
                       "orthogonality": ("orthogonality", 5e-3)}

TRAIN_DEFAULTS = {"epochs": 100, "batch_size": 32, "learning_rate": 0.05, "batchnorm_mode": "train",
                  "weight": None, "taps": None}
NETWORK_DEFAULTS = {"width": 16, "blocks": 3, "stem_batchnorm": True, "checkpoint": None}
BLOBS_DEFAULTS = {"classes": 2, "points_per_class": 100, "dim": 2, "separation": 4.0,
                  "noise_sd": 1.0, "seed": None, "test_points_per_class": None}
CIFAR_DEFAULTS = {"path": None, "train_size": None, "test_size": None, "subsample_seed": 0,
                  "scaling": "raw", "input_mode": "unit"}

DEFAULT_SNR_DB = [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0, "inf"]
PARAM_DEFAULTS = {
    "train": {},
    "noise-sweep": {"snr_db": DEFAULT_SNR_DB, "runs": 10, "clamp": True},
    "interpolate": {"pair": None, "lambdas": None},
    "layer-hist": {"example": 0, "r": 0.1, "samples": 4096, "norm": "l2"},
    "alpha-curve": {"function": "network", "points": None, "n_points": 10, "radii": None,
                    "samples": 4096, "norm": "l2"},
    "dataset-audit": {"norms": ["l2", "linf"], "delta": 0.0, "alphas": [0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
                      "distances": [0.5, 1.0, 2.0, 4.0, 8.0], "max_examples": 5000, "full": False},
    "composition-check": {"r": 0.05, "samples": 4096, "n_points": 20, "norm": "l2", "targets": None,
                          "tolerance": 0.05},
}


@dataclass
class ExperimentConfig:
    experiment: str
    seeds: list
    dataset: dict
    network: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: ["vanilla"])
    train: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    output: str | None = None
    source: str | None = None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(self.experiment, [int(seed)], self.dataset, self.network, self.methods,
                                self.train, self.params, self.output, self.source)

    def echo(self) -> dict:
        """Fully resolved configuration, suitable for ``config_echo.json``."""
        return {"experiment": self.experiment, "seeds": self.seeds, "dataset": self.dataset,
                "network": self.network, "methods": self.methods, "train": self.train,
                "params": self.params}


def _require(doc, key, kind, where="config"):
    if key not in doc:
        raise ConfigError(key, f"missing required field in {where}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ConfigError(key, f"expected {kind if isinstance(kind, type) else kind[0]}, got {type(value).__name__}")
    return value


def _merge(defaults, given, section):
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown field")
    return {**defaults, **given}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _positive(section, doc, keys, integer=True):
    for key in keys:
        v = doc[key]
        if v is None:
            continue
        ok = _is_int(v) if integer else isinstance(v, (int, float)) and not isinstance(v, bool)
        if not ok or v <= 0:
            raise ConfigError(f"{section}.{key}", f"must be a positive {'integer' if integer else 'number'}")


def parse_config(doc: dict, source=None, check_paths=True) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"experiment", "seeds", "dataset", "network", "method", "methods", "train", "params", "output"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(unknown[0], "unknown field")

    experiment = _require(doc, "experiment", str)
    if experiment not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment kind {experiment!r}; expected one of {EXPERIMENTS}")

    seeds = _require(doc, "seeds", list)
    if not seeds or not all(_is_int(s) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of non-negative integers")

    dataset = _require(doc, "dataset", dict)
    kind = dataset.get("kind")
    if kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"expected one of {DATASET_KINDS}")
    rest = {k: v for k, v in dataset.items() if k != "kind"}
    if kind == "blobs":
        dataset = {"kind": kind, **_merge(BLOBS_DEFAULTS, rest, "dataset")}
        _positive("dataset", dataset, ["classes", "points_per_class", "dim", "test_points_per_class"])
        _positive("dataset", dataset, ["separation"], integer=False)
        if dataset["classes"] < 2:
            raise ConfigError("dataset.classes", "need at least two classes")
    else:
        dataset = {"kind": kind, **_merge(CIFAR_DEFAULTS, rest, "dataset")}
        if not isinstance(dataset["path"], str):
            raise ConfigError("dataset.path", "cifar10 needs the directory of the binary batches")
        if check_paths and not Path(dataset["path"]).is_dir():
            raise ConfigError("dataset.path", f"directory {dataset['path']} does not exist")
        _positive("dataset", dataset, ["train_size", "test_size"])
        if dataset["scaling"] not in ("raw", "per-sqrt-dim"):
            raise ConfigError("dataset.scaling", "expected 'raw' or 'per-sqrt-dim'")

    network = _merge(NETWORK_DEFAULTS, doc.get("network", {}), "network")
    _positive("network", network, ["width"])
    if not _is_int(network["blocks"]) or network["blocks"] < 0:
        raise ConfigError("network.blocks", "must be a non-negative integer")
    if network["checkpoint"] is not None and check_paths and not Path(network["checkpoint"]).is_file():
        raise ConfigError("network.checkpoint", f"file {network['checkpoint']} does not exist")

    if "method" in doc and "methods" in doc:
        raise ConfigError("method", "give either 'method' or 'methods', not both")
    methods = doc.get("methods", doc.get("method", ["vanilla"]))
    methods = [methods] if isinstance(methods, str) else methods
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise ConfigError("method", f"expected a method or list drawn from {METHODS}")
    if len(set(methods)) != len(methods):
        raise ConfigError("method", "methods must be distinct")

    train = _merge(TRAIN_DEFAULTS, doc.get("train", {}), "train")
    _positive("train", train, ["batch_size"])
    if not _is_int(train["epochs"]) or train["epochs"] < 0:
        raise ConfigError("train.epochs", "must be a non-negative integer")
    lr = train["learning_rate"]
    if not isinstance(lr, (int, float)) or isinstance(lr, bool) or lr < 0 or not math.isfinite(lr):
        raise ConfigError("train.learning_rate", "must be a finite non-negative number")
    if train["batchnorm_mode"] not in ("train", "frozen"):
        raise ConfigError("train.batchnorm_mode", "expected 'train' or 'frozen'")

    given = doc.get("params", {})
    if not isinstance(given, dict):
        raise ConfigError("params", "must be an object")
    params = _merge(PARAM_DEFAULTS[experiment], given, "params")
    _check_params(experiment, params, dataset)
    output = doc.get("output")
    return ExperimentConfig(experiment, [int(s) for s in seeds], dataset, network, methods, train,
                            params, output, None if source is None else str(source))


def _snr(value):
    if value == "inf":
        return math.inf
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError("params.snr_db", f"entry {value!r} is neither a number nor 'inf'")


def _check_params(experiment, params, dataset):
    if experiment == "noise-sweep":
        grid = [_snr(v) for v in params["snr_db"]]
        if not grid:
            raise ConfigError("params.snr_db", "empty SNR grid")
        _positive("params", params, ["runs"])
    if "norm" in params and params["norm"] not in ("l2", "linf"):
        raise ConfigError("params.norm", "expected 'l2' or 'linf'")
    for key in ("samples", "n_points"):
        if key in params:
            _positive("params", params, [key])
    for key in ("r",):
        if key in params:
            _positive("params", params, [key], integer=False)
    if experiment == "alpha-curve":
        if params["function"] not in ("network", "sigmoid"):
            raise ConfigError("params.function", "expected 'network' or 'sigmoid'")
        radii = params["radii"]
        if radii is not None and (not radii or any(b <= a for a, b in zip(radii, radii[1:]))
                                  or radii[0] <= 0):
            raise ConfigError("params.radii", "must be positive and strictly increasing")
    if experiment == "dataset-audit":
        if any(n not in ("l2", "linf") for n in params["norms"]):
            raise ConfigError("params.norms", "entries must be 'l2' or 'linf'")
        if any(d <= 0 for d in params["distances"]):
            raise ConfigError("params.distances", "distance ceilings must be positive")
    if experiment == "interpolate" and params["pair"] is not None:
        pair = params["pair"]
        if not (isinstance(pair, list) and len(pair) == 2 and all(_is_int(i) and i >= 0 for i in pair)):
            raise ConfigError("params.pair", "expected two example indices")
    if dataset["kind"] == "cifar10" and dataset["input_mode"] not in ("unit", "standardized"):
        raise ConfigError("dataset.input_mode", "expected 'unit' or 'standardized'")


def snr_grid(params) -> list[float]:
    return [_snr(v) for v in params["snr_db"]]


def load_config(path, check_paths=True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--config", f"file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_config(doc, source=path, check_paths=check_paths)
