"""Experiment runners.  Each writes CSVs with self-describing headers into one directory."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import datascope, robustometry
from ..checkpoint import checkpoint_bytes, load_checkpoint
from ..datascope import LabeledDataset, load_cifar10, synth_blobs
from ..errors import ConfigError
from ..netfun import build_network, predict
from ..training import TrainConfig, default_taps, train
from .config import METHOD_REGULARIZERS, ExperimentConfig, load_config, snr_grid

DEFAULT_NETWORK_RADII = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]
DEFAULT_SIGMOID_RADII = [0.01, 0.1, 1.0, 5.0, 10.0, 15.0, 20.0]


# noise sweep

def add_snr_noise(inputs, snr_db, rng, clamp=False) -> np.ndarray:
    """Gaussian noise with per-example variance ``mean(x**2) / 10**(snr_db / 10)``."""
    X = np.asarray(inputs, dtype=np.float64)
    if math.isinf(snr_db) and snr_db > 0:
        return X.copy()
    power = (X * X).mean(axis=1, keepdims=True)
    sd = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    noisy = X + sd * rng.standard_normal(X.shape)
    return np.clip(noisy, 0.0, 1.0) if clamp else noisy


@dataclass
class NoiseSweepResult:
    snr_db: list
    seeds: list
    accuracy: np.ndarray  # (len(seeds), len(snr_db)), each entry averaged over runs

    @property
    def mean(self) -> np.ndarray:
        return self.accuracy.mean(axis=0)

    @staticmethod
    def combine(results) -> "NoiseSweepResult":
        results = list(results)
        grid = results[0].snr_db
        if any(r.snr_db != grid for r in results):
            raise ValueError("sweeps use different SNR grids")
        return NoiseSweepResult(grid, [s for r in results for s in r.seeds],
                                np.vstack([r.accuracy for r in results]))


def noise_sweep(net, dataset: LabeledDataset, snr_db, runs=10, seed=0, clamp=None) -> NoiseSweepResult:
    """Test accuracy under additive Gaussian noise at each SNR (dB), averaged over ``runs``.

    ``clamp`` defaults to clamping into [0, 1] for image data only.
    """
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    if dataset.num_classes != net.output_dim:
        raise ValueError(f"network emits {net.output_dim} classes, dataset has {dataset.num_classes}")
    clamp = dataset.image if clamp is None else bool(clamp and dataset.image)
    grid = [float(s) for s in snr_db]
    acc = np.zeros(len(grid))
    for k, s in enumerate(grid):
        hits = 0.0
        for run in range(runs):
            rng = np.random.default_rng([seed, k, run])
            noisy = add_snr_noise(dataset.inputs, s, rng, clamp)
            hits += float(np.mean(predict(net, noisy) == dataset.labels))
        acc[k] = hits / runs
    return NoiseSweepResult(grid, [seed], acc[None, :])


def layer_histogram(net, x, r=0.1, samples=4096, seed=0, norm="l2"):
    """``[(layer, kind, alpha_hat)]`` for every layer, probed around ``F^{layer-1}(x)``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    rows = []
    for layer in range(1, net.depth + 1):
        est = robustometry.estimate_layer_alpha(net, layer, x, r, samples=samples, seed=(seed, layer), norm=norm)
        rows.append((layer, net.layers[layer - 1].kind, est.alpha_hat))
    return rows


# artifact plumbing

def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


class ArtifactDir:
    """Output directory that remembers what it wrote, for the manifest."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written = []

    def write_bytes(self, name, data: bytes) -> Path:
        path = self.root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        if name not in self.written:
            self.written.append(name)
        return path

    def write_csv(self, name, header, rows) -> Path:
        return self.write_bytes(name, csv_bytes(header, rows))

    def write_manifest(self) -> Path:
        rows = []
        for name in sorted(self.written):
            data = (self.root / name).read_bytes()
            rows.append((name, len(data), hashlib.sha256(data).hexdigest()))
        return self.write_bytes("manifest.csv", csv_bytes(["path", "bytes", "sha256"], rows))


# datasets and networks

def _standardize(train_set, test_set):
    mu = train_set.inputs.mean(axis=0)
    sd = train_set.inputs.std(axis=0)
    sd[sd == 0] = 1.0
    def fix(d):
        return LabeledDataset((d.inputs - mu) / sd, d.labels, d.num_classes, d.name + "-std", d.scaling, False)
    return fix(train_set), fix(test_set)


def load_datasets(spec: dict, seed: int):
    """``(train, test)`` for a dataset spec; blobs test sets use the next seed."""
    if spec["kind"] == "blobs":
        data_seed = seed if spec["seed"] is None else spec["seed"]
        kw = dict(classes=spec["classes"], dim=spec["dim"], separation=spec["separation"],
                  noise_sd=spec["noise_sd"])
        train_set = synth_blobs(points_per_class=spec["points_per_class"], seed=data_seed, name="blobs-train", **kw)
        test_n = spec["test_points_per_class"] or spec["points_per_class"]
        test_set = synth_blobs(points_per_class=test_n, seed=data_seed + 1, name="blobs-test", **kw)
        return train_set, test_set
    train_set = load_cifar10(spec["path"], "train")
    test_set = load_cifar10(spec["path"], "test")
    if spec["train_size"]:
        train_set = train_set.subsample(spec["train_size"], spec["subsample_seed"])
    if spec["test_size"]:
        test_set = test_set.subsample(spec["test_size"], spec["subsample_seed"])
    if spec["input_mode"] == "standardized":
        train_set, test_set = _standardize(train_set, test_set)
    return train_set.with_scaling(spec["scaling"]), test_set.with_scaling(spec["scaling"])


def train_config_for(cfg: ExperimentConfig, method: str, seed: int) -> TrainConfig:
    regularizer, weight = METHOD_REGULARIZERS[method]
    t = cfg.train
    if t["weight"] is not None and method != "vanilla":
        weight = float(t["weight"])
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=float(t["learning_rate"]),
                       seed=seed, regularizer=regularizer, weight=weight, batchnorm_mode=t["batchnorm_mode"],
                       taps=t["taps"])


class Run:
    """State shared by one experiment invocation: datasets, trained nets, artifacts."""

    def __init__(self, cfg: ExperimentConfig, out: ArtifactDir):
        self.cfg = cfg
        self.out = out
        self._data = {}
        self._nets = {}
        self.train_rows, self.summary_rows = [], []

    def data(self, seed):
        if seed not in self._data:
            self._data[seed] = load_datasets(self.cfg.dataset, seed)
        return self._data[seed]

    def net(self, method, seed):
        key = (method, seed)
        if key in self._nets:
            return self._nets[key]
        train_set, test_set = self.data(seed)
        if self.cfg.network["checkpoint"]:
            net = load_checkpoint(self.cfg.network["checkpoint"])
            self._nets[key] = net
            return net
        n = self.cfg.network
        net = build_network(train_set.dim, train_set.num_classes, n["width"], n["blocks"], seed,
                            n["stem_batchnorm"])
        tc = train_config_for(self.cfg, method, seed)
        net, log = train(net, train_set, tc)
        tag = f"{method}-seed{seed}"
        self.out.write_bytes(f"checkpoints/{tag}.ckpt", checkpoint_bytes(net, {**tc.as_dict(), "method": method}))
        for epoch, loss, ce, pen, acc in log.epochs:
            self.train_rows.append((method, seed, epoch, loss, ce, pen, acc))
        if log.sigmas:
            self.out.write_csv(f"sigma/{tag}.csv", ["epoch", "layer", "sigma"], log.sigmas)
            taps = tc.taps or default_taps(net)
            self.out.write_csv("sigma/taps.csv", ["layer", "kind", "width"],
                               [(l, net.layers[l - 1].kind, net.layers[l - 1].out_dim) for l in taps])
        test_acc = float(np.mean(predict(net, test_set.inputs) == test_set.labels))
        self.summary_rows.append((method, seed, tc.epochs, log.final_loss, log.final_accuracy, test_acc,
                                  net.delta["l2"], net.delta["linf"], f"checkpoints/{tag}.ckpt"))
        self._nets[key] = net
        return net

    def cells(self):
        return [(m, s) for m in self.cfg.methods for s in self.cfg.seeds]

    def flush_training(self):
        if self.train_rows:
            self.out.write_csv("train_log.csv", ["method", "seed", "epoch", "loss", "cross_entropy", "penalty",
                                                 "train_accuracy"], self.train_rows)
            self.out.write_csv("train_summary.csv", ["method", "seed", "epochs", "final_loss", "train_accuracy",
                                                     "test_accuracy", "delta_l2", "delta_linf", "checkpoint"],
                               self.summary_rows)


def _points(dataset, n, seed):
    return dataset.subsample(n, seed).inputs


# experiments

def run_train(run: Run):
    for method, seed in run.cells():
        run.net(method, seed)


def run_noise_sweep(run: Run):
    p = run.cfg.params
    grid = snr_grid(p)
    per_seed, means = [], []
    for method in run.cfg.methods:
        results = []
        for seed in run.cfg.seeds:
            net = run.net(method, seed)
            _, test_set = run.data(seed)
            res = noise_sweep(net, test_set, grid, p["runs"], seed, clamp=p["clamp"])
            results.append(res)
            per_seed += [(method, seed, s, a, p["runs"]) for s, a in zip(grid, res.accuracy[0])]
        combined = NoiseSweepResult.combine(results)
        means += [(method, s, a, len(combined.seeds)) for s, a in zip(grid, combined.mean)]
    run.out.write_csv("noise_sweep.csv", ["method", "seed", "snr_db", "accuracy", "runs"], per_seed)
    run.out.write_csv("noise_sweep_mean.csv", ["method", "snr_db", "mean_accuracy", "seeds"], means)


def run_interpolate(run: Run):
    p = run.cfg.params
    rows = []
    for method, seed in run.cells():
        net = run.net(method, seed)
        train_set, _ = run.data(seed)
        if p["pair"] is None:
            _, (i, j) = datascope.margin(train_set, "l2")
        else:
            i, j = p["pair"]
            if max(i, j) >= len(train_set):
                raise ConfigError("params.pair", f"index beyond the {len(train_set)} training examples")
        x, x_other = train_set.inputs[i], train_set.inputs[j]
        classes = (int(train_set.labels[i]), int(train_set.labels[j]))
        res = robustometry.interpolation_sweep(net, x, x_other, p["lambdas"], classes)
        pred = np.argmax(res.outputs, axis=1)
        rows += [(method, seed, i, j, lam, proj, c) for lam, proj, c in zip(res.lambdas, res.projection, pred)]
    run.out.write_csv("interpolation.csv", ["method", "seed", "index_x", "index_other", "lambda", "projection",
                                            "predicted"], rows)


def run_layer_hist(run: Run):
    p = run.cfg.params
    rows = []
    for method, seed in run.cells():
        net = run.net(method, seed)
        train_set, _ = run.data(seed)
        if p["example"] >= len(train_set):
            raise ConfigError("params.example", f"index beyond the {len(train_set)} training examples")
        for layer, kind, a in layer_histogram(net, train_set.inputs[p["example"]], p["r"], p["samples"],
                                              seed, p["norm"]):
            rows.append((method, seed, layer, kind, a, p["r"], p["norm"], p["samples"]))
    run.out.write_csv("layer_hist.csv", ["method", "seed", "layer", "kind", "alpha_hat", "r", "norm", "samples"],
                      rows)


def run_alpha_curve(run: Run):
    p = run.cfg.params
    curve_rows, point_rows = [], []
    if p["function"] == "sigmoid":
        cells = [("sigmoid", s) for s in run.cfg.seeds]
        radii = p["radii"] or DEFAULT_SIGMOID_RADII
    else:
        cells = run.cells()
        radii = p["radii"] or DEFAULT_NETWORK_RADII
    for method, seed in cells:
        if method == "sigmoid":
            F = robustometry.sigmoid_function
            points = np.asarray(p["points"] if p["points"] is not None else [-10.0, 10.0], dtype=np.float64)
        else:
            F = run.net(method, seed)
            train_set, _ = run.data(seed)
            points = (np.asarray(p["points"], dtype=np.float64) if p["points"] is not None
                      else _points(train_set, p["n_points"], seed))
        table = robustometry.alpha_r_table(F, points, radii, p["samples"], seed, p["norm"])
        for r, row in zip(radii, table):
            curve_rows.append((method, seed, r, row.max()))
            point_rows += [(method, i, r, a, p["samples"], seed) for i, a in enumerate(row)]
    run.out.write_csv("alpha_curve.csv", ["method", "seed", "r", "alpha_hat"], curve_rows)
    run.out.write_csv("alpha_estimates.csv", ["method", "point_index", "r", "alpha_hat", "samples", "seed"],
                      point_rows)


def run_dataset_audit(run: Run):
    """Margins, farthest pairs and the dataset slope bound under both L2 scalings.

    Scans use a seeded ``max_examples`` subsample unless ``full`` is set.
    With a network checkpoint, the gap and output margin are added.
    """
    p = run.cfg.params
    quantities, fractions = [], []
    for seed in run.cfg.seeds:
        train_set, _ = run.data(seed)
        scan = train_set if p["full"] else train_set.subsample(p["max_examples"], seed)
        for norm in p["norms"]:
            scalings = ("raw", "per-sqrt-dim") if norm == "l2" else ("raw",)
            for scaling in scalings:
                data = scan.with_scaling(scaling)
                m, (i, j) = datascope.margin(data, norm)
                quantities.append((seed, "margin", norm, scaling, m, i, j, None))
                far, (i, j) = datascope.farthest_cross_pair(data, norm)
                quantities.append((seed, "farthest_cross_pair", norm, scaling, far, i, j, None))
                bound, (i, j) = datascope.dataset_lipschitz_lower_bound(data, p["delta"], norm)
                quantities.append((seed, "lipschitz_lower_bound", norm, scaling, bound, i, j, None))
            if run.cfg.network["checkpoint"]:
                net = run.net(run.cfg.methods[0], seed)
                g = datascope.gap(net, scan.with_scaling("raw"), norm=norm)
                quantities.append((seed, "gap", norm, "raw", g.value, g.pair[0], g.pair[1], g.layer))
                quantities.append((seed, "margin_output", norm, "raw", datascope.margin_output(net, norm),
                                   None, None, None))
            for d in p["distances"]:
                for alpha, dd, frac, n_pairs, tag in datascope.incompatible_pair_fraction(
                        scan, p["alphas"], d, p["delta"], norm, full=True):
                    fractions.append((seed, norm, scan.scaling, alpha, dd, frac, n_pairs,
                                      -1 if p["full"] or len(scan) == len(train_set) else seed))
    run.out.write_csv("dataset_audit.csv", ["seed", "quantity", "norm", "scaling", "value", "arg_i", "arg_j",
                                            "layer"], quantities)
    run.out.write_csv("incompatible_pairs.csv", ["seed", "norm", "scaling", "alpha", "d", "fraction", "n_pairs",
                                                 "subsample_seed"], fractions)


def run_composition_check(run: Run):
    p = run.cfg.params
    layer_rows, rows = [], []
    for method, seed in run.cells():
        net = run.net(method, seed)
        train_set, _ = run.data(seed)
        pts = _points(train_set, p["n_points"], seed)
        rep = robustometry.check_compositional_bound(net, pts, p["r"], p["targets"], p["samples"], seed,
                                                     p["norm"], p["tolerance"])
        for l, (radius, target, a) in enumerate(zip(rep.radii, rep.targets, rep.layer_alpha), start=1):
            layer_rows.append((method, seed, l, net.layers[l - 1].kind, radius, target, a))
        gc = datascope.gap_condition_check(net, train_set, p["r"], p["norm"])
        rows.append((method, seed, p["r"], rep.product, rep.end_to_end, rep.tolerance, rep.hypothesis_holds,
                     rep.bound_satisfied, gc.gap, gc.gap_layer, gc.margin_output, gc.holds))
    run.out.write_csv("composition_layers.csv", ["method", "seed", "layer", "kind", "radius", "target",
                                                 "alpha_hat"], layer_rows)
    run.out.write_csv("composition.csv", ["method", "seed", "r", "product", "end_to_end", "tolerance",
                                          "hypothesis_holds", "bound_satisfied", "gap", "gap_layer",
                                          "margin_output", "gap_condition_holds"], rows)


RUNNERS = {"train": run_train, "noise-sweep": run_noise_sweep, "interpolate": run_interpolate,
           "layer-hist": run_layer_hist, "alpha-curve": run_alpha_curve, "dataset-audit": run_dataset_audit,
           "composition-check": run_composition_check}


def execute(cfg: ExperimentConfig, out) -> Path:
    """Run a validated config into directory ``out``; returns the manifest path."""
    artifacts = ArtifactDir(out)
    artifacts.write_bytes("config_echo.json",
                          (json.dumps(cfg.echo(), indent=2, sort_keys=True) + "\n").encode("utf-8"))
    run = Run(cfg, artifacts)
    RUNNERS[cfg.experiment](run)
    run.flush_training()
    return artifacts.write_manifest()


def run_experiment(config_path, out=None, seed=None, experiment=None) -> Path:
    """Load, validate and execute a config file; returns the output directory.

    ``seed`` replaces the config's seed list; ``experiment`` must match the
    config's kind when given (the CLI subcommand).
    """
    cfg = load_config(config_path)
    if experiment is not None and cfg.experiment != experiment:
        raise ConfigError("experiment", f"config describes {cfg.experiment!r}, not {experiment!r}")
    if seed is not None:
        cfg = cfg.with_seed(seed)
    out = out if out is not None else cfg.output
    if out is None:
        raise ConfigError("output", "no output directory given in config or on the command line")
    execute(cfg, out)
    return Path(out)
