"""Monte Carlo estimation of local robustness slopes.

For a function ``F``, points ``R`` and radius ``r`` the estimator probes
``z = x + m u`` with directions ``u`` uniform on the unit sphere of the
chosen norm and magnitudes ``m`` on a geometric grid in ``(0, r]``, and
reports the largest chord slope ``|F(z) - F(x)| / |z - x|``.  Being a max
over finitely many probes, it never exceeds the true local slope.

Each direction's grid has a random phase, so across directions the
magnitudes cover the whole ``[r * span, r]`` range rather than 16 fixed
values.  Random streams are keyed by ``(seed, point index[, radius index])``
and results do not depend on evaluation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError, NonFiniteError

log = logging.getLogger(__name__)

DEFAULT_SAMPLES = 4096
DEFAULT_GRID = 16
DEFAULT_SPAN = 1e-4
MAGNITUDE_FLOOR = 1e-9


def vector_norm(v, norm="l2", axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if norm == "l2":
        return np.sqrt((v * v).sum(axis=axis))
    if norm == "linf":
        return np.abs(v).max(axis=axis)
    raise ValueError(f"unknown norm {norm!r}")


def sample_directions(rng, count, dim, norm="l2") -> np.ndarray:
    """Unit vectors of the given norm.

    L2: normalized Gaussians.  Linf: even rows are random sign corners, odd
    rows uniform points on a random face of the cube.
    """
    if norm == "l2":
        g = rng.standard_normal((count, dim))
        lengths = np.sqrt((g * g).sum(axis=1))
        while (lengths == 0).any():
            bad = lengths == 0
            g[bad] = rng.standard_normal((int(bad.sum()), dim))
            lengths = np.sqrt((g * g).sum(axis=1))
        return g / lengths[:, None]
    if norm == "linf":
        u = rng.uniform(-1.0, 1.0, size=(count, dim))
        signs = rng.choice(np.array([-1.0, 1.0]), size=(count, dim))
        faces = rng.integers(0, dim, size=count)
        face_signs = rng.choice(np.array([-1.0, 1.0]), size=count)
        rows = np.arange(count)
        u[rows, faces] = face_signs
        u[0::2] = signs[0::2]
        return u
    raise ValueError(f"unknown norm {norm!r}")


def magnitude_grid(rng, count, radius, grid_size=DEFAULT_GRID, span=DEFAULT_SPAN) -> np.ndarray:
    """Per-direction geometric grids ``radius * rho**(k + phase)``, ``rho**grid_size = span``."""
    rho = span ** (1.0 / grid_size)
    phase = rng.uniform(0.0, 1.0, size=(count, 1))
    return radius * rho ** (np.arange(grid_size)[None, :] + phase)


@dataclass
class RobustnessQuery:
    points: np.ndarray
    radius: float
    norm: str = "l2"
    samples: int = DEFAULT_SAMPLES
    grid_size: int = DEFAULT_GRID
    seed: int = 0
    span: float = DEFAULT_SPAN
    floor: float = MAGNITUDE_FLOOR

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points.reshape(-1, 1)
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.samples < 1 or self.grid_size < 1:
            raise ValueError("samples and grid_size must be at least 1")


@dataclass
class RobustnessEstimate:
    per_point: np.ndarray
    alpha_hat: float
    radius: float
    norm: str
    samples: int
    grid_size: int
    seed: object
    floor: float
    failed_probes: int = 0

    @property
    def worst_point(self) -> int:
        return int(np.argmax(self.per_point))

    def rows(self):
        """``(point_index, r, alpha_hat, samples, seed)`` per point."""
        return [(i, self.radius, float(a), self.samples, self.seed) for i, a in enumerate(self.per_point)]


def _evaluate(F, z):
    """``F`` on a batch; rows that fail or come back non-finite are NaN."""
    try:
        out = np.asarray(F(z), dtype=np.float64)
        out = out.reshape(z.shape[0], -1)
        if np.isfinite(out).all():
            return out
    except (NonFiniteError, FloatingPointError, OverflowError):
        out = None
    rows = []
    for row in z:
        try:
            value = np.asarray(F(row[None, :]), dtype=np.float64).reshape(1, -1)
        except (NonFiniteError, FloatingPointError, OverflowError):
            value = None
        rows.append(value)
    width = next((r.shape[1] for r in rows if r is not None), 1)
    return np.vstack([r if r is not None else np.full((1, width), np.nan) for r in rows])


def probe_point(F, x, directions, magnitudes, norm="l2", floor=MAGNITUDE_FLOOR, chunk_rows=None):
    """Chord slopes and perturbation sizes for every (direction, magnitude) probe.

    Returns ``(ratios, eps_norms, failed)``, flattened direction-major.
    Probes with perturbation below ``floor`` get ratio 0 and are not counted.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    fx = _evaluate(F, x)
    if not np.isfinite(fx).all():
        raise EstimationError("F is not finite at the base point")
    dim = x.shape[1]
    steps = (directions[:, None, :] * magnitudes[:, :, None]).reshape(-1, dim)
    chunk_rows = chunk_rows or max(1, (1 << 16) // max(dim, 1))
    ratios = np.zeros(steps.shape[0])
    eps_norms = np.zeros(steps.shape[0])
    failed = 0
    for start in range(0, steps.shape[0], chunk_rows):
        z = x + steps[start:start + chunk_rows]
        eps = vector_norm(z - x, norm)
        fz = _evaluate(F, z)
        bad = ~np.isfinite(fz).all(axis=1)
        num = vector_norm(np.where(bad[:, None], 0.0, fz) - fx, norm)
        ok = (eps >= floor) & ~bad
        failed += int(bad.sum())
        sl = slice(start, start + z.shape[0])
        ratios[sl] = np.where(ok, num / np.where(ok, eps, 1.0), 0.0)
        eps_norms[sl] = np.where(ok, eps, np.inf)
    return ratios, eps_norms, failed


def _rng(seed, *key):
    base = list(seed) if isinstance(seed, (tuple, list)) else [seed]
    return np.random.default_rng([*base, *key])


def _point_probes(F, q: RobustnessQuery, p: int, radius, key):
    rng = _rng(q.seed, *key)
    dirs = sample_directions(rng, q.samples, q.points.shape[1], q.norm)
    mags = magnitude_grid(rng, q.samples, radius, q.grid_size, q.span)
    return probe_point(F, q.points[p], dirs, mags, q.norm, q.floor)


def estimate_alpha_lim(F, q: RobustnessQuery) -> RobustnessEstimate:
    """Largest sampled chord slope of ``F`` within ``q.radius`` of each point."""
    per_point = np.zeros(len(q.points))
    failed = total = 0
    for p in range(len(q.points)):
        ratios, _, bad = _point_probes(F, q, p, q.radius, (p,))
        per_point[p] = ratios.max()
        failed += bad
        total += ratios.size
    if failed:
        log.warning("%d of %d probes gave non-finite outputs and were skipped", failed, total)
    if failed == total:
        raise EstimationError("every probe produced a non-finite output")
    return RobustnessEstimate(per_point, float(per_point.max()), float(q.radius), q.norm,
                              q.samples, q.grid_size, q.seed, q.floor, failed)


def estimate_layer_alpha(net, layer, points, radius, samples=DEFAULT_SAMPLES, seed=0, norm="l2",
                         **query_kw) -> RobustnessEstimate:
    """Estimate for ``f^layer`` alone, probed around ``F^{layer-1}(points)``."""
    if not 1 <= layer <= net.depth:
        raise IndexError(f"layer {layer} outside 1..{net.depth}")
    base = net.prefix_function(layer - 1)(points)
    q = RobustnessQuery(base, radius, norm, samples, seed=seed, **query_kw)
    return estimate_alpha_lim(net.layer_function(layer), q)


def alpha_r_table(F, points, radii, samples=DEFAULT_SAMPLES, seed=0, norm="l2", **query_kw) -> np.ndarray:
    """Per-point nested estimates, shape ``(len(radii), len(points))``.

    Each radius keeps all probes drawn for the smaller radii, so every
    column is non-decreasing.
    """
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be strictly increasing")
    q = RobustnessQuery(points, radii[0], norm, samples, seed=seed, **query_kw)
    table = np.zeros((len(radii), len(q.points)))
    running = np.zeros(len(q.points))
    for k, r in enumerate(radii):
        for p in range(len(q.points)):
            ratios, _, _ = _point_probes(F, q, p, r, (p, k + 1))
            running[p] = max(running[p], ratios.max())
        table[k] = running
    return table


def alpha_r_curve(F, points, radii, samples=DEFAULT_SAMPLES, seed=0, norm="l2", **query_kw):
    """``[(r, alpha_hat)]`` with nested probes: each radius keeps all smaller radii's probes."""
    table = alpha_r_table(F, points, radii, samples, seed, norm, **query_kw)
    return [(float(r), float(row.max())) for r, row in zip(radii, table)]


@dataclass
class RLimResult:
    r: float
    exceeded_at_lower_bound: bool
    grid_step: float


def r_lim(F, alpha_target, points, bounds=(0.0, 1.0), samples=1024, seed=0, norm="l2",
          resolution=1e-3, **query_kw) -> RLimResult:
    """Largest grid radius whose estimated slope stays at or below ``alpha_target``.

    One probe set is drawn at the upper bound; the slope at radius ``r`` is
    the max over probes with perturbation ``<= r``, which is non-decreasing
    in ``r``.  The grid is ``k * resolution * upper``; the answer is found
    by bisection.  If the target is already exceeded at the lower bound the
    result is 0 with ``exceeded_at_lower_bound`` set.
    """
    if alpha_target <= 0:
        raise ValueError("alpha target must be positive")
    lower, upper = map(float, bounds)
    q = RobustnessQuery(points, upper, norm, samples, seed=seed, **query_kw)
    eps_all, ratio_all = [], []
    for p in range(len(q.points)):
        ratios, eps, _ = _point_probes(F, q, p, upper, (p,))
        eps_all.append(eps)
        ratio_all.append(ratios)
    eps = np.concatenate(eps_all)
    order = np.argsort(eps, kind="stable")
    eps = eps[order]
    envelope = np.maximum.accumulate(np.concatenate(ratio_all)[order])

    def slope(r):
        n = np.searchsorted(eps, r, side="right")
        return 0.0 if n == 0 else envelope[n - 1]

    step = resolution * upper
    k_lo = max(1, math.ceil(lower / step - 1e-9))
    k_hi = round(upper / step)
    if slope(k_lo * step) > alpha_target:
        return RLimResult(0.0, True, step)
    lo, hi = k_lo, k_hi  # invariant: slope(lo * step) <= target
    if slope(hi * step) <= alpha_target:
        return RLimResult(hi * step, False, step)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if slope(mid * step) <= alpha_target:
            lo = mid
        else:
            hi = mid
    return RLimResult(lo * step, False, step)


# closed-form reference functions

def sigmoid_function(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def linear_function(matrix):
    M = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return lambda z: np.asarray(z, dtype=np.float64).reshape(-1, M.shape[1]) @ M.T


def constant_function(value):
    value = np.atleast_1d(np.asarray(value, dtype=np.float64))
    return lambda z: np.tile(value, (np.asarray(z).reshape(len(z), -1).shape[0], 1))


def mediator_classifier(x, x_other):
    """Hard two-class decision by side of the perpendicular bisector of ``[x, x_other]``.

    Output is one-hot: class 0 on ``x``'s side (including the hyperplane), class 1 otherwise.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    x_other = np.asarray(x_other, dtype=np.float64).ravel()
    if np.array_equal(x, x_other):
        raise ValueError("the two anchor points must differ")
    normal = x_other - x
    midpoint = 0.5 * (x + x_other)

    def F(z):
        z = np.asarray(z, dtype=np.float64).reshape(-1, x.size)
        side = (z - midpoint) @ normal > 0
        return np.stack([~side, side], axis=1).astype(np.float64)

    return F


def nearest_neighbor_classifier(dataset, block=None):
    """One-hot label of the nearest training example (ties go to the lowest index)."""
    X, labels, C = dataset.inputs, dataset.labels, dataset.num_classes
    if len(X) == 0:
        raise ValueError("dataset is empty")
    eye = np.eye(C)
    block = block or max(1, (1 << 22) // X.size)

    def F(z):
        z = np.asarray(z, dtype=np.float64).reshape(-1, X.shape[1])
        best = np.empty(len(z), dtype=np.int64)
        for start in range(0, len(z), block):
            zb = z[start:start + block]
            sq = np.zeros((len(zb), len(X)))
            for k in range(X.shape[1]):
                diff = zb[:, k:k + 1] - X[None, :, k]
                sq += diff * diff
            best[start:start + block] = np.argmin(sq, axis=1)
        return eye[labels[best]]

    return F


# composition

@dataclass
class CompositionReport:
    radii: list
    targets: list
    layer_alpha: list
    product: float
    end_to_end: float
    tolerance: float
    violations: list = field(default_factory=list)

    @property
    def hypothesis_holds(self) -> bool:
        return not self.violations

    @property
    def bound_satisfied(self) -> bool:
        return self.end_to_end <= self.product * (1.0 + self.tolerance)


def _layers_of(net):
    if hasattr(net, "layer_function"):
        return [net.layer_function(l) for l in range(1, net.depth + 1)]
    return list(net)


def check_compositional_bound(net, points, r, targets=None, samples=DEFAULT_SAMPLES, seed=0,
                              norm="l2", tolerance=0.05, **query_kw) -> CompositionReport:
    """Measure each layer at its shrunken radius and compare the product to the whole.

    Layer ``l`` is probed around its own inputs at radius
    ``r * prod(targets[:l-1])``.  A layer whose estimate exceeds its target
    is listed in ``violations``; the bound is still evaluated.
    """
    layers = _layers_of(net)
    targets = [1.0] * len(layers) if targets is None else [float(t) for t in targets]
    if len(targets) != len(layers):
        raise ValueError(f"{len(targets)} targets for {len(layers)} layers")
    if any(t > 1 or t <= 0 for t in targets):
        raise ValueError("every per-layer target must lie in (0, 1]")
    y = np.asarray(points, dtype=np.float64)
    y = y.reshape(len(y), -1)
    radii, alphas, violations = [], [], []
    radius = float(r)
    for l, (f, target) in enumerate(zip(layers, targets), start=1):
        q = RobustnessQuery(y, radius, norm, samples, seed=(seed, l), **query_kw)
        a = estimate_alpha_lim(f, q).alpha_hat
        radii.append(radius)
        alphas.append(a)
        if a > target:
            violations.append(l)
        y = np.asarray(f(y), dtype=np.float64).reshape(len(y), -1)
        radius *= target

    def whole(z):
        for f in layers:
            z = f(z)
        return z

    q = RobustnessQuery(points, r, norm, samples, seed=(seed, 0), **query_kw)
    end = estimate_alpha_lim(whole, q).alpha_hat
    return CompositionReport(radii, targets, alphas, float(np.prod(alphas)), end, tolerance, violations)


@dataclass
class InterpolationResult:
    lambdas: np.ndarray
    outputs: np.ndarray
    projection: np.ndarray
    classes: tuple


def interpolation_sweep(F, x, x_other, lambdas=None, classes=None) -> InterpolationResult:
    """``F(lam * x + (1 - lam) * x_other)`` along a grid of ``lam``.

    ``projection`` is the score of ``x``'s class minus the score of
    ``x_other``'s class (predicted at the endpoints unless ``classes`` is given).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    x_other = np.asarray(x_other, dtype=np.float64).ravel()
    if x.shape != x_other.shape:
        raise ValueError("endpoints must have the same shape")
    lambdas = np.linspace(-0.1, 1.1, 121) if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    z = lambdas[:, None] * x[None, :] + (1.0 - lambdas)[:, None] * x_other[None, :]
    outputs = np.asarray(F(z), dtype=np.float64).reshape(len(lambdas), -1)
    if classes is None:
        ends = np.asarray(F(np.stack([x, x_other])), dtype=np.float64).reshape(2, -1)
        classes = (int(np.argmax(ends[0])), int(np.argmax(ends[1])))
    c, c_other = classes
    projection = outputs[:, c] - outputs[:, c_other] if outputs.shape[1] > 1 else outputs[:, 0]
    return InterpolationResult(lambdas, outputs, projection, tuple(classes))
