"""Distance graphs over a batch's representations and their class smoothness.

For representations ``y_1..y_n`` of one layer the weighted adjacency is
``A_ij = ||y_i - y_j||``, the combinatorial Laplacian is ``L = D - A`` and
the class smoothness is ``trace(S^T L S)`` for the one-hot matrix ``S``.
Summing ``|sigma(l+1) - sigma(l)|`` over consecutive taps gives the
variation penalty used during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class DistanceGraph:
    A: np.ndarray
    D: np.ndarray
    L: np.ndarray
    layer: int | None = None
    norm: str = "l2"

    @property
    def size(self) -> int:
        return self.A.shape[0]


def class_indicator(labels, num_classes=None) -> np.ndarray:
    """Stack one-hot rows: row ``i`` is the class vector of example ``i``."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels]


def _representations(source, layer):
    if layer is None:
        return np.asarray(source, dtype=np.float64)
    return np.asarray(source[layer], dtype=np.float64)


def pairwise_distance_matrix(source, layer=None, norm="l2", block=128) -> DistanceGraph:
    """Distance graph of ``source[layer]`` (a trace) or of a raw ``(n, d)`` array."""
    if norm != "l2":
        raise ValueError("only the l2 norm is supported for distance graphs")
    y = _representations(source, layer)
    y = y.reshape(y.shape[0], -1)
    n = y.shape[0]
    if n < 2:
        raise ValueError("a distance graph needs at least two examples")
    A = np.empty((n, n))
    for start in range(0, n, block):
        diff = y[start:start + block, None, :] - y[None, :, :]
        A[start:start + block] = np.sqrt((diff * diff).sum(axis=-1))
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 0.0)
    D = np.diag(A.sum(axis=1))
    return DistanceGraph(A=A, D=D, L=D - A, layer=layer, norm=norm)


def smoothness(graph: DistanceGraph, S) -> float:
    """``trace(S^T L S)``: twice the summed distance over cross-class pairs.

    Evaluated as ``1/2 sum_ij A_ij ||s_i - s_j||^2`` with a correctly rounded
    sum, so the result is never negative and does not depend on example order.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != graph.size:
        raise ShapeError(f"indicator has shape {S.shape}, graph has {graph.size} nodes")
    sq = (S * S).sum(axis=1)
    gap = sq[:, None] + sq[None, :] - 2.0 * (S @ S.T)
    np.maximum(gap, 0.0, out=gap)
    return 0.5 * math.fsum((graph.A * gap).ravel())


def smoothness_tensor(reps: Tensor, S) -> Tensor:
    """Differentiable class smoothness of one layer's batch representations."""
    S = np.asarray(S, dtype=np.float64)
    x = T.reshape(reps, (reps.shape[0], -1)) if reps.ndim != 2 else reps
    if S.shape[0] != x.shape[0]:
        raise ShapeError(f"indicator has {S.shape[0]} rows, batch has {x.shape[0]}")
    A = T.pairwise_distances(x)
    L = T.diag(A.sum(axis=1)) - A
    return (Tensor._wrap(S) * (L @ Tensor._wrap(S))).sum()


def variation_penalty(reps, S) -> Tensor:
    """Sum of absolute smoothness changes between consecutive representations.

    ``reps`` is a sequence of at least two batch representations (tensors or
    arrays); gradients flow into every tensor given.
    """
    reps = list(reps)
    if len(reps) < 2:
        raise ValueError("variation penalty needs at least two representations")
    sigmas = [smoothness_tensor(r if isinstance(r, Tensor) else Tensor(r), S) for r in reps]
    total = T.tabs(sigmas[1] - sigmas[0])
    for a, b in zip(sigmas[1:], sigmas[2:]):
        total = total + T.tabs(b - a)
    return total


def layer_sigmas(trace, S, taps) -> list[float]:
    """Class smoothness at each tapped layer of an activation trace."""
    return [smoothness(pairwise_distance_matrix(trace, layer), S) for layer in taps]
