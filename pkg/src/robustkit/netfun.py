"""Layer functions, their composition into a network and per-layer taps.

A :class:`NetworkFunction` is an ordered list of layers ``f^1 ... f^L``.
Running it on a batch yields an :class:`ActivationTrace` holding every
intermediate representation ``F^l(x)``; ``trace[0]`` is the input itself.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, layer_scope

KINDS = ("affine", "relu", "batchnorm", "residual-block", "softmax")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind != "affine" and self.in_dim != self.out_dim:
            raise ShapeError(f"{self.kind} layer must preserve width, got {self.in_dim}->{self.out_dim}")

    def param_shapes(self) -> dict[str, tuple]:
        w, d = self.out_dim, self.in_dim
        if self.kind == "affine":
            return {"W": (w, d), "b": (w,)}
        if self.kind == "batchnorm":
            return {"gamma": (w,), "beta": (w,), "running_mean": (w,), "running_var": (w,)}
        if self.kind == "residual-block":
            shapes = {}
            for s in ("1", "2"):
                shapes.update({f"W{s}": (w, w), f"b{s}": (w,), f"gamma{s}": (w,), f"beta{s}": (w,),
                               f"running_mean{s}": (w,), f"running_var{s}": (w,)})
            return shapes
        return {}


def is_buffer(name: str) -> bool:
    """Running statistics are stored with the parameters but never trained."""
    return ".running_" in name


@dataclass
class ActivationTrace:
    inputs: np.ndarray
    reps: list

    def __getitem__(self, layer: int) -> np.ndarray:
        if layer == 0:
            return self.inputs
        if not 1 <= layer <= len(self.reps):
            raise IndexError(f"layer {layer} outside 0..{len(self.reps)}")
        return self.reps[layer - 1]

    def __len__(self):
        return len(self.reps)

    @property
    def output(self) -> np.ndarray:
        return self.reps[-1]


class NetworkFunction:
    """Composition of layers with a flat parameter store.

    Parameters live in ``params`` under ``"<layer>.<name>"`` keys (layers are
    numbered from 1).  Batchnorm running statistics share the store.
    """

    def __init__(self, layers, params=None, seed=0):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer {i} emits width {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        for i, spec in enumerate(self.layers[:-1], start=1):
            if spec.kind == "softmax":
                raise ShapeError(f"softmax may only be the final layer (found at layer {i})")
        self.seed = seed
        self.delta: dict[str, float] | None = None
        self.params = init_params(self.layers, seed) if params is None else {
            k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for key, shape in self._expected_shapes().items():
            if key not in self.params:
                raise ShapeError(f"missing parameter {key}")
            if self.params[key].shape != shape:
                raise ShapeError(f"parameter {key} has shape {self.params[key].shape}, expected {shape}")

    def _expected_shapes(self):
        return {f"{i}.{name}": shape for i, spec in enumerate(self.layers, start=1)
                for name, shape in spec.param_shapes().items()}

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def ends_with_softmax(self) -> bool:
        return self.layers[-1].kind == "softmax"

    def copy(self) -> "NetworkFunction":
        return copy.deepcopy(self)

    def trainable(self) -> list[str]:
        return [k for k in self.params if not is_buffer(k)]

    # forward passes

    def forward(self, x: Tensor, mode: str = "frozen", params=None, stats=None,
                start: int = 1, stop: int | None = None) -> list[Tensor]:
        """Apply layers ``start..stop`` and return each layer's output.

        ``params`` may map trainable names to (watched) tensors; missing
        entries fall back to the stored arrays.  In ``"train"`` mode
        batchnorm normalizes with batch statistics, which are written to
        ``stats`` when given.
        """
        stop = self.depth if stop is None else stop
        params = params or {}
        outs = []
        for idx in range(start, stop + 1):
            spec = self.layers[idx - 1]
            with layer_scope(idx):
                if x.ndim != 2 or x.shape[1] != spec.in_dim:
                    raise ShapeError(f"layer {idx} ({spec.kind}) expects width {spec.in_dim}, "
                                     f"got input of shape {x.shape}")
                x = self._apply(idx, spec, x, params, mode, stats)
            outs.append(x)
        return outs

    def _p(self, params, key):
        if key in params:
            return params[key]
        return Tensor._wrap(self.params[key])

    def _affine(self, x, params, key_w, key_b):
        return x @ self._p(params, key_w).T + self._p(params, key_b)

    def _batchnorm(self, x, params, prefix, suffix, mode, stats):
        gamma = self._p(params, f"{prefix}gamma{suffix}")
        beta = self._p(params, f"{prefix}beta{suffix}")
        if mode == "train":
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            if stats is not None:
                stats[f"{prefix}{suffix}"] = (mu.numpy().ravel(), var.numpy().ravel(), x.shape[0])
            xhat = centered / T.sqrt(var + BN_EPS)
        elif mode == "frozen":
            rm = self.params[f"{prefix}running_mean{suffix}"]
            rv = self.params[f"{prefix}running_var{suffix}"]
            xhat = (x - rm) / np.sqrt(rv + BN_EPS)
        else:
            raise ValueError(f"unknown batchnorm mode {mode!r}")
        return xhat * gamma + beta

    def _apply(self, idx, spec, x, params, mode, stats):
        k = f"{idx}."
        if spec.kind == "affine":
            return self._affine(x, params, k + "W", k + "b")
        if spec.kind == "relu":
            return T.relu(x)
        if spec.kind == "softmax":
            return T.softmax(x)
        if spec.kind == "batchnorm":
            return self._batchnorm(x, params, k, "", mode, stats)
        h = self._affine(x, params, k + "W1", k + "b1")
        h = T.relu(self._batchnorm(h, params, k, "1", mode, stats))
        h = self._affine(h, params, k + "W2", k + "b2")
        h = self._batchnorm(h, params, k, "2", mode, stats)
        return T.relu(h + x)

    def trace(self, batch) -> ActivationTrace:
        x = _as_batch(batch, self.input_dim)
        outs = self.forward(Tensor(x))
        return ActivationTrace(inputs=x, reps=[o.numpy() for o in outs])

    def __call__(self, batch) -> np.ndarray:
        """Soft decision ``F(x)`` of a batch, batchnorm frozen."""
        return self.forward(Tensor(_as_batch(batch, self.input_dim)))[-1].numpy()

    def layer_function(self, layer: int):
        """``f^layer`` as a plain array-to-array function (frozen)."""
        if not 1 <= layer <= self.depth:
            raise IndexError(f"layer {layer} outside 1..{self.depth}")
        width = self.layers[layer - 1].in_dim
        return lambda z: self.forward(Tensor(_as_batch(z, width)), start=layer, stop=layer)[-1].numpy()

    def prefix_function(self, layer: int):
        """``F^layer`` (the first ``layer`` layers composed)."""
        if layer == 0:
            return lambda z: _as_batch(z, self.input_dim)
        return lambda z: self.forward(Tensor(_as_batch(z, self.input_dim)), stop=layer)[-1].numpy()


def _as_batch(batch, width) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1) if x.shape[0] == width else x.reshape(-1, 1)
    return x


def init_params(layers, seed) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; unit batchnorm."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, spec in enumerate(layers, start=1):
        bound = 1.0 / np.sqrt(spec.in_dim)
        for name, shape in spec.param_shapes().items():
            key = f"{i}.{name}"
            if name[0] in "Wb":
                params[key] = rng.uniform(-bound, bound, size=shape)
            elif name.startswith(("gamma", "running_var")):
                params[key] = np.ones(shape)
            else:
                params[key] = np.zeros(shape)
    return params


def build_network(input_dim, num_classes, width=16, blocks=3, seed=0, stem_batchnorm=True):
    """Desk-scale residual classifier over flattened inputs.

    affine -> [batchnorm] -> relu -> residual-block x ``blocks`` -> affine -> softmax
    """
    layers = [LayerSpec("affine", input_dim, width)]
    if stem_batchnorm:
        layers.append(LayerSpec("batchnorm", width, width))
    layers.append(LayerSpec("relu", width, width))
    layers += [LayerSpec("residual-block", width, width) for _ in range(blocks)]
    layers += [LayerSpec("affine", width, num_classes), LayerSpec("softmax", num_classes, num_classes)]
    return NetworkFunction(layers, seed=seed)


def forward_trace(net: NetworkFunction, batch) -> ActivationTrace:
    return net.trace(batch)


def predict(net: NetworkFunction, batch) -> np.ndarray:
    """Class index per example; ties go to the lowest index."""
    return np.argmax(net(batch), axis=1)


def orthogonality_step(W, beta: float) -> np.ndarray:
    """One retraction step ``W <- (1 + beta) W - beta W W^T W`` toward orthonormal rows."""
    if not 0 < beta <= 0.01:
        raise ValueError(f"beta must lie in (0, 0.01], got {beta}")
    W = np.asarray(W, dtype=np.float64)
    return (1.0 + beta) * W - beta * (W @ W.T @ W)


def measure_delta(net: NetworkFunction, inputs, labels) -> dict[str, float]:
    """Output tolerance: worst distance between ``F(x)`` and its one-hot target."""
    out = net(inputs)
    target = np.eye(net.output_dim)[np.asarray(labels)]
    diff = out - target
    return {"l2": float(np.sqrt((diff * diff).sum(axis=1)).max()),
            "linf": float(np.abs(diff).max())}
