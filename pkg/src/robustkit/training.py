"""Mini-batch SGD on cross-entropy with optional smoothness or orthogonality terms."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import NonFiniteError, TrainingDiverged
from .graphreg import smoothness_tensor, variation_penalty
from .netfun import BN_MOMENTUM, NetworkFunction, measure_delta, orthogonality_step, predict
from .tensor import Tape, Tensor

REGULARIZERS = ("none", "laplacian", "orthogonality")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    regularizer: str = "none"
    weight: float = 0.0
    batchnorm_mode: str = "train"
    taps: list | None = None  # layers whose smoothness enters the penalty

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.weight < 0:
            raise ValueError("regularizer weight must be non-negative")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.batchnorm_mode not in ("train", "frozen"):
            raise ValueError("batchnorm_mode must be 'train' or 'frozen'")
        if self.regularizer == "orthogonality" and not 0 < self.weight <= 0.01:
            raise ValueError("orthogonality weight is the retraction step and must lie in (0, 0.01]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)   # (epoch, loss, cross_entropy, penalty, accuracy)
    sigmas: list = field(default_factory=list)   # (epoch, layer, sigma)
    tap_widths: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.epochs[-1][1] if self.epochs else float("nan")

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1][4] if self.epochs else float("nan")


def default_taps(net: NetworkFunction) -> list[int]:
    """Block boundaries: the input to the first residual block, every block
    output, and the logits.  Networks without enough boundaries tap every
    layer except a terminal softmax.
    """
    last = net.depth - 1 if net.ends_with_softmax else net.depth
    kinds = [spec.kind for spec in net.layers]
    taps = {l for l in range(1, last + 1)
            if kinds[l - 1] == "residual-block" or (l < len(kinds) and kinds[l] == "residual-block")}
    if taps:
        taps.add(last)
    if len(taps) < 2:
        return list(range(1, last + 1))
    return sorted(taps)


def _update_running_stats(net, stats):
    for prefix_suffix, (mu, var, n) in stats.items():
        prefix, suffix = prefix_suffix.rsplit(".", 1)
        rm = f"{prefix}.running_mean{suffix}"
        rv = f"{prefix}.running_var{suffix}"
        unbiased = var * (n / (n - 1)) if n > 1 else var
        net.params[rm] = (1 - BN_MOMENTUM) * net.params[rm] + BN_MOMENTUM * mu
        net.params[rv] = (1 - BN_MOMENTUM) * net.params[rv] + BN_MOMENTUM * unbiased


def train(net: NetworkFunction, dataset, config: TrainConfig):
    """Train a copy of ``net``; returns ``(trained_net, TrainLog)``.

    The input network is left untouched.  With a fixed ``config.seed`` the
    result is bit-identical across runs.  The trained network carries the
    measured output tolerance in ``net.delta``.
    """
    net = net.copy()
    X, y = dataset.inputs, dataset.labels
    onehot = np.eye(net.output_dim)[y]
    if dataset.num_classes != net.output_dim:
        raise ValueError(f"dataset has {dataset.num_classes} classes, network emits {net.output_dim}")
    taps = config.taps or default_taps(net)
    use_penalty = config.regularizer == "laplacian"
    if use_penalty and len(taps) < 2:
        raise ValueError("the smoothness penalty needs at least two tapped layers")
    rng = np.random.default_rng(config.seed)
    names = net.trainable()
    weights = [k for k in names if k.rsplit(".", 1)[1].startswith("W")]
    log = TrainLog(tap_widths={l: net.layers[l - 1].out_dim for l in taps})
    n = len(y)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        totals = np.zeros(3)
        sigma_sums = np.zeros(len(taps))
        sigma_batches = 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            stats = {}
            try:
                with Tape() as tape:
                    p = {k: tape.watch(Tensor._wrap(net.params[k])) for k in names}
                    outs = net.forward(Tensor._wrap(X[idx]), mode=config.batchnorm_mode, params=p, stats=stats)
                    logits = outs[-2] if net.ends_with_softmax else outs[-1]
                    ce = T.cross_entropy(logits, onehot[idx])
                    loss = ce
                    pen = 0.0
                    if use_penalty and len(idx) >= 2:
                        S = onehot[idx]
                        penalty = variation_penalty([outs[l - 1] for l in taps], S)
                        loss = ce + config.weight * penalty
                        pen = penalty.item()
                grads = tape.gradient(loss, [p[k] for k in names])
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, b, float("nan")) from exc
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(epoch, b, loss.item())
            for k, g in zip(names, grads):
                net.params[k] = net.params[k] - config.learning_rate * g.numpy()
            if config.regularizer == "orthogonality":
                for k in weights:
                    net.params[k] = orthogonality_step(net.params[k], config.weight)
            if config.batchnorm_mode == "train":
                _update_running_stats(net, stats)
            totals += len(idx) * np.array([loss.item(), ce.item(), pen])
            if use_penalty and len(idx) >= 2:
                sigma_sums += [smoothness_tensor(Tensor._wrap(outs[l - 1].numpy()), onehot[idx]).item()
                               for l in taps]
                sigma_batches += 1
        accuracy = float(np.mean(predict(net, X) == y)) if n else float("nan")
        loss_m, ce_m, pen_m = totals / max(n, 1)
        log.epochs.append((epoch, float(loss_m), float(ce_m), float(pen_m), accuracy))
        if use_penalty and sigma_batches:
            for l, s in zip(taps, sigma_sums / sigma_batches):
                log.sigmas.append((epoch, l, float(s)))

    net.seed = config.seed
    net.delta = measure_delta(net, X, y)
    return net, log
