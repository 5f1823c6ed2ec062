"""Datasets and dataset-level feasibility quantities.

Pair scans over cross-class pairs are blocked.  L2 blocks are screened with
the ``|x|^2 + |y|^2 - 2 x.y`` expansion (one matrix product per block), each
screened distance carrying a rigorous rounding interval.  Pairs whose
interval touches a decision threshold are recomputed from explicit
differences, so reported minima, arg-pairs and counts are the ones a plain
double loop over ``sqrt(sum((x_i - x_j)**2))`` gives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError

log = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_BATCH_RECORDS = 10000
CIFAR_BATCH_BYTES = CIFAR_RECORD_BYTES * CIFAR_BATCH_RECORDS
_U = np.finfo(np.float64).eps / 2


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    scaling: str = "raw"  # or "per-sqrt-dim"
    image: bool = False

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        if len(self.labels):
            self.inputs = inputs.reshape(len(self.labels), -1)
        else:
            self.inputs = inputs.reshape(0, int(np.prod(inputs.shape[1:])) if inputs.ndim > 1 else 0)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scaling not in ("raw", "per-sqrt-dim"):
            raise ValueError(f"unknown norm scaling {self.scaling!r}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.labels]

    def with_scaling(self, scaling: str) -> "LabeledDataset":
        return replace(self, scaling=scaling)

    def subsample(self, size: int, seed: int = 0) -> "LabeledDataset":
        if size >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=size, replace=False))
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       name=f"{self.name}[sub{size}@{seed}]")


# loaders and generators

def read_cifar_batch(path, records: int = CIFAR_BATCH_RECORDS):
    """Parse one CIFAR-10 binary batch into ``(inputs in [0, 1], labels)``."""
    raw = Path(path).read_bytes()
    expected = records * CIFAR_RECORD_BYTES
    if len(raw) != expected:
        raise DatasetError(f"{path}: {len(raw)} bytes, expected {expected}")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(records, CIFAR_RECORD_BYTES)
    labels = table[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]}")
    return table[:, 1:].astype(np.float64) / 255.0, labels


def load_cifar10(directory, split: str = "train", records_per_batch: int = CIFAR_BATCH_RECORDS) -> LabeledDataset:
    """Training (``data_batch_1..5.bin``) or test (``test_batch.bin``) split of CIFAR-10."""
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    parts = []
    for name in names:
        path = directory / name
        if not path.is_file():
            raise DatasetError(f"missing CIFAR-10 file {path}")
        parts.append(read_cifar_batch(path, records_per_batch))
    inputs = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(inputs, labels, 10, name=f"cifar10-{split}", image=True)


def synth_blobs(classes=2, points_per_class=100, dim=2, separation=4.0, noise_sd=1.0, seed=0,
                name="blobs") -> LabeledDataset:
    """Isotropic Gaussian clusters with centers ``k * separation`` along the first axis."""
    if separation <= 0 or noise_sd < 0:
        raise ValueError("separation must be positive and noise_sd non-negative")
    rng = np.random.default_rng(seed)
    centers = np.zeros((classes, dim))
    centers[:, 0] = separation * np.arange(classes)
    labels = np.repeat(np.arange(classes), points_per_class)
    inputs = centers[labels] + noise_sd * rng.standard_normal((len(labels), dim))
    return LabeledDataset(inputs, labels, classes, name=name)


# pair scanning

def _scale(dim, norm, scaling):
    return math.sqrt(dim) if (norm == "l2" and scaling == "per-sqrt-dim") else 1.0


def exact_distances(X, I, J, norm="l2", scaling="raw") -> np.ndarray:
    """Distances of the listed pairs from explicit differences.

    L2 sums squared coordinate differences left to right, the order of a
    plain loop over coordinates.
    """
    diff = X[I] - X[J]
    if norm == "l2":
        acc = np.zeros(len(diff))
        for k in range(diff.shape[1]):
            acc += diff[:, k] * diff[:, k]
        d = np.sqrt(acc)
    elif norm == "linf":
        d = np.abs(diff).max(axis=1)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    s = _scale(X.shape[1], norm, scaling)
    return d / s if s != 1.0 else d


def _blocks(X, labels, norm, scaling, block):
    """Yield ``(I, J, lo, hi)`` for cross-class pairs ``i < j`` block by block.

    The true distance of pair ``(I[k], J[k])`` lies in ``[lo[k], hi[k]]``.
    """
    n, dim = X.shape
    s = _scale(dim, norm, scaling)
    if norm == "l2":
        sq = (X * X).sum(axis=1)
        c = 4.0 * (dim + 4) * _U
    elif norm != "linf":
        raise ValueError(f"unknown norm {norm!r}")
    if norm == "linf":
        # explicit differences: keep each block under ~4M doubles
        block = max(1, min(block, int(math.sqrt(2 ** 22 / max(dim, 1)))))
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        for j0 in range(i0, n, block):
            j1 = min(n, j0 + block)
            cross = labels[i0:i1, None] != labels[None, j0:j1]
            if i0 == j0:
                cross &= np.triu(np.ones((i1 - i0, j1 - j0), dtype=bool), k=1)
            ii, jj = np.nonzero(cross)
            if ii.size == 0:
                continue
            if norm == "l2":
                gram = X[i0:i1] @ X[j0:j1].T
                a, b = sq[i0:i1][ii], sq[j0:j1][jj]
                approx = np.maximum(a + b - 2.0 * gram[ii, jj], 0.0)
                err = c * (a + b)
                lo = np.sqrt(np.maximum(approx - err, 0.0)) * (1 - 4 * _U) / s
                hi = np.sqrt(approx + err) * (1 + 4 * _U) / s
            else:
                d = np.abs(X[i0:i1, None, :] - X[None, j0:j1, :]).max(axis=-1)[ii, jj]
                lo = hi = d
            yield ii + i0, jj + j0, lo, hi


def _extreme_pair(X, labels, norm, scaling, block, largest=False):
    best = np.inf
    cand_i, cand_j, cand_b = [], [], []
    for I, J, lo, hi in _blocks(X, labels, norm, scaling, block):
        if largest:
            lo, hi = -hi, -lo
        best = min(best, hi.min())
        keep = lo <= best
        cand_i.append(I[keep]); cand_j.append(J[keep]); cand_b.append(lo[keep])
    if not cand_i:
        raise DatasetError("no cross-class pairs: at least two nonempty classes are required")
    I, J, lo = (np.concatenate(a) for a in (cand_i, cand_j, cand_b))
    keep = lo <= best
    I, J = I[keep], J[keep]
    d = exact_distances(X, I, J, norm, scaling)
    key = -d if largest else d
    order = np.lexsort((J, I, key))
    k = order[0]
    return float(d[k]), (int(I[k]), int(J[k]))


def cross_class_margin(X, labels, norm="l2", scaling="raw", block=512):
    """Smallest cross-class distance and the lexicographically first pair reaching it."""
    X = np.asarray(X, dtype=np.float64).reshape(len(labels), -1)
    return _extreme_pair(X, np.asarray(labels), norm, scaling, block)


def margin(dataset: LabeledDataset, norm="l2", block=512):
    return cross_class_margin(dataset.inputs, dataset.labels, norm, dataset.scaling, block)


def farthest_cross_pair(dataset: LabeledDataset, norm="l2", block=512):
    return _extreme_pair(dataset.inputs, dataset.labels, norm, dataset.scaling, block, largest=True)


@dataclass
class PairStats:
    min_distance: float
    mean_distance: float
    argmin: tuple
    delta: float
    norm: str
    subsample: str = "full"
    n_pairs: int = 0


def pair_stats(dataset: LabeledDataset, norm="l2", delta=0.0, block=512) -> PairStats:
    value, arg = margin(dataset, norm, block)
    total, count = 0.0, 0
    for _, _, lo, hi in _blocks(dataset.inputs, dataset.labels, norm, dataset.scaling, block):
        total += float((0.5 * (lo + hi)).sum())
        count += lo.size
    return PairStats(value, max(value, total / count), arg, delta, norm, dataset.name, count)


# network-dependent quantities

@dataclass
class GapResult:
    value: float
    layer: int
    pair: tuple


def gap(net, dataset: LabeledDataset, layers=None, norm="l2", block=512) -> GapResult:
    """Smallest cross-class representation distance over the chosen layers."""
    trace = net.trace(dataset.inputs)
    layers = range(1, len(trace) + 1) if layers is None else layers
    best = None
    for layer in layers:
        value, pair = cross_class_margin(trace[layer], dataset.labels, norm, "raw", block)
        if best is None or value < best.value:
            best = GapResult(value, layer, pair)
    return best


def one_hot_distance(norm="l2") -> float:
    return math.sqrt(2.0) if norm == "l2" else 1.0


def margin_output(net_or_delta, norm="l2") -> float:
    """Largest one-hot label distance minus the network's recorded output tolerance."""
    if isinstance(net_or_delta, (int, float)):
        delta = float(net_or_delta)
    else:
        recorded = getattr(net_or_delta, "delta", None)
        if not recorded or norm not in recorded:
            raise ValueError("output tolerance delta has not been measured for this network")
        delta = recorded[norm]
    return one_hot_distance(norm) - delta


@dataclass
class GapConditionReport:
    r: float
    gap: float
    gap_layer: int
    gap_pair: tuple
    margin_output: float
    radius_within_gap: bool
    gap_exceeds_output_margin: bool

    @property
    def holds(self) -> bool:
        return self.radius_within_gap or self.gap_exceeds_output_margin

    @property
    def hypothesis_violated(self) -> bool:
        # neither disjunct: the layers cannot all be 1-robust at radius r
        return not self.holds


def gap_condition_check(net, dataset, r, norm="l2", layers=None) -> GapConditionReport:
    g = gap(net, dataset, layers, norm)
    m_out = margin_output(net, norm)
    return GapConditionReport(r, g.value, g.layer, g.pair, m_out, r <= g.value, g.value >= m_out)


def dataset_lipschitz_lower_bound(dataset: LabeledDataset, delta=0.0, norm="l2", block=512):
    """Largest ``(|c - c'| - delta) / |x - x'|`` over cross-class pairs.

    With one-hot labels the numerator is constant, so the maximum sits on the
    closest pair (or the farthest one when the numerator is negative).
    A zero-distance cross-class pair makes the bound infinite.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    numerator = one_hot_distance(norm) - delta
    if numerator < 0:
        dist, pair = farthest_cross_pair(dataset, norm, block)
        return numerator / dist, pair
    dist, pair = margin(dataset, norm, block)
    if dist == 0.0:
        if numerator == 0:
            return 0.0, pair
        log.warning("examples %d and %d coincide but carry different labels; "
                    "no finite Lipschitz constant fits the dataset", *pair)
        return math.inf, pair
    return numerator / dist, pair


def incompatible_pair_fraction(dataset: LabeledDataset, alphas, d, delta=0.0, norm="l2",
                               max_examples=5000, subsample_seed=0, full=False, block=512):
    """Share of cross-class pairs within distance ``d`` that no ``alpha``-slope can fit.

    A pair is incompatible when ``|c - c'| - delta > alpha * |x - x'|``.  The
    fraction is taken over all cross-class pairs of the scanned set, so it
    grows with ``d`` and falls with ``alpha``.  Unless ``full`` is set, sets
    larger than ``max_examples`` are subsampled with ``subsample_seed``.
    Returns rows ``(alpha, d, fraction, n_pairs, subsample_seed)``.
    """
    if d <= 0:
        raise ValueError("distance ceiling d must be positive")
    data = dataset if full else dataset.subsample(max_examples, subsample_seed)
    seed_tag = subsample_seed if len(data) < len(dataset) else -1
    alphas = [float(a) for a in alphas]
    c = one_hot_distance(norm) - delta
    thresholds = sorted({float(d)} | {c / a for a in alphas if a > 0 and c > 0})
    ts = np.array(thresholds)
    counts = np.zeros(len(alphas), dtype=np.int64)
    n_pairs = 0
    for I, J, lo, hi in _blocks(data.inputs, data.labels, norm, data.scaling, block):
        n_pairs += I.size
        mid = 0.5 * (lo + hi)
        left = np.searchsorted(ts, lo * (1 - 1e-12), side="left")
        right = np.searchsorted(ts, hi * (1 + 1e-12), side="right")
        unsure = right > left
        if unsure.any():
            mid[unsure] = exact_distances(data.inputs, I[unsure], J[unsure], norm, data.scaling)
        within = mid <= d
        for k, a in enumerate(alphas):
            counts[k] += np.count_nonzero(within & (c > a * mid))
    return [(a, float(d), (counts[k] / n_pairs) if n_pairs else 0.0, n_pairs, seed_tag)
            for k, a in enumerate(alphas)]
