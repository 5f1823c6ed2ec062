import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robustkit.datascope import LabeledDataset, margin, synth_blobs
from robustkit.errors import EstimationError
from robustkit.netfun import LayerSpec, NetworkFunction, build_network, predict
from robustkit.robustometry import (RobustnessQuery, alpha_r_curve, alpha_r_table, check_compositional_bound,
                                    constant_function, estimate_alpha_lim, estimate_layer_alpha,
                                    interpolation_sweep, linear_function, mediator_classifier,
                                    nearest_neighbor_classifier, r_lim, sigmoid_function)
from robustkit.training import TrainConfig, train

SIGMOID_POINTS = np.array([[-10.0], [10.0]])


def sigmoid_oracle(x, r, n=400_001):
    """Largest chord slope of the logistic function on a dense grid of offsets in [-r, r]."""
    eps = np.linspace(-r, r, n)
    eps = eps[eps != 0]
    s = lambda t: 1.0 / (1.0 + np.exp(-t))
    return float(np.max(np.abs(s(x + eps) - s(x)) / np.abs(eps)))


def sigmoid_curve_oracle(r):
    return max(sigmoid_oracle(x, r) for x in (-10.0, 10.0))


def estimate(F, points, r, **kw):
    return estimate_alpha_lim(F, RobustnessQuery(points, r, **kw))


@pytest.fixture(scope="module")
def blobs_net():
    data = synth_blobs(2, 40, dim=2, separation=6.0, noise_sd=1.0, seed=3)
    net, _ = train(build_network(2, 2, width=8, blocks=1, seed=0), data, TrainConfig(epochs=30, seed=0))
    return net, data


class TestEstimateAlphaLim:
    def test_identity(self):
        pts = np.random.default_rng(0).normal(size=(3, 4))
        assert estimate(lambda z: z, pts, 0.7, samples=256).alpha_hat == pytest.approx(1.0, abs=1e-9)

    def test_half_scaling(self):
        pts = np.random.default_rng(1).normal(size=(2, 3))
        est = estimate(linear_function(0.5 * np.eye(3)), pts, 1.0, samples=1000)
        assert est.alpha_hat == pytest.approx(0.5, abs=1e-9)

    def test_sigmoid_small_radius(self):
        est = estimate(sigmoid_function, SIGMOID_POINTS, 0.001, samples=1024)
        assert est.alpha_hat == pytest.approx(4.5398e-5, rel=0.05)
        assert est.alpha_hat == pytest.approx(sigmoid_curve_oracle(0.001), rel=0.05)

    def test_per_point_rows(self):
        est = estimate(linear_function(np.diag([1.0, 3.0])), np.eye(2), 0.5, samples=64, seed=5)
        rows = est.rows()
        assert [r[0] for r in rows] == [0, 1]
        assert all(r[1] == 0.5 and r[3] == 64 and r[4] == 5 for r in rows)
        assert est.alpha_hat == est.per_point.max()

    def test_worst_point(self):
        F = lambda z: np.where(z > 5, 3.0 * z, z)
        est = estimate(F, [[0.0], [10.0]], 0.5, samples=16)
        assert est.worst_point == 1

    def test_nonfinite_probes_are_skipped(self):
        F = lambda z: np.where(z > 0.3, np.nan, 2.0 * z)
        est = estimate(F, [[0.0]], 1.0, samples=64)
        assert est.failed_probes > 0
        assert est.alpha_hat == pytest.approx(2.0, abs=1e-9)

    def test_all_probes_failed(self):
        F = lambda z: np.where(z == 0, 0.0, np.nan)
        with pytest.raises(EstimationError):
            estimate(F, [[0.0]], 1.0, samples=8)

    def test_query_validation(self):
        with pytest.raises(ValueError):
            RobustnessQuery([[0.0]], 0.0)
        with pytest.raises(ValueError):
            RobustnessQuery([[0.0]], 1.0, samples=0)


class TestLayerAlpha:
    def test_frozen_batchnorm_linf(self):
        rng = np.random.default_rng(4)
        net = NetworkFunction([LayerSpec("batchnorm", 5, 5)])
        net.params["1.gamma"] = rng.uniform(-2, 2, size=5)
        net.params["1.running_var"] = rng.uniform(0.1, 3, size=5)
        net.params["1.running_mean"] = rng.normal(size=5)
        net.params["1.beta"] = rng.normal(size=5)
        expected = np.max(np.abs(net.params["1.gamma"] / np.sqrt(net.params["1.running_var"] + 1e-5)))
        est = estimate_layer_alpha(net, 1, rng.normal(size=(3, 5)), 0.3, samples=256, norm="linf")
        assert est.alpha_hat == pytest.approx(expected, abs=1e-6)

    def test_relu_on_positive_point(self):
        net = NetworkFunction([LayerSpec("relu", 3, 3)])
        est = estimate_layer_alpha(net, 1, [[0.5, 1.0, 2.0]], 0.4, samples=512)
        assert est.alpha_hat == pytest.approx(1.0, abs=1e-9)

    def test_layer_range(self):
        net = NetworkFunction([LayerSpec("relu", 3, 3)])
        with pytest.raises(IndexError):
            estimate_layer_alpha(net, 2, [[1.0, 1.0, 1.0]], 0.1)

    def test_probes_around_mapped_points(self):
        net = NetworkFunction([LayerSpec("affine", 2, 2), LayerSpec("relu", 2, 2)])
        net.params["1.W"] = np.eye(2)
        net.params["1.b"] = np.array([-10.0, -10.0])
        # the affine layer maps the point deep into the dead region of the relu
        est = estimate_layer_alpha(net, 2, [[1.0, 1.0]], 0.5, samples=64)
        assert est.alpha_hat == 0.0

    def test_eight_block_net_gives_finite_positive_values(self):
        data = synth_blobs(2, 30, dim=4, separation=5.0, seed=1)
        net, _ = train(build_network(4, 2, width=8, blocks=8, seed=0), data, TrainConfig(epochs=5))
        blocks = [l for l, spec in enumerate(net.layers, start=1) if spec.kind == "residual-block"]
        assert len(blocks) == 8
        for l in blocks:
            a = estimate_layer_alpha(net, l, data.inputs[:4], 0.1, samples=256).alpha_hat
            assert np.isfinite(a) and a > 0


class TestAlphaCurve:
    RADII = [0.01, 0.1, 1, 5, 10, 15, 20]

    def test_sigmoid_matches_dense_grid(self):
        curve = alpha_r_curve(sigmoid_function, SIGMOID_POINTS, self.RADII, samples=4096, seed=0)
        assert [r for r, _ in curve] == self.RADII
        for r, a in curve:
            assert a == pytest.approx(sigmoid_curve_oracle(r), rel=0.05), r

    def test_constant_function(self):
        curve = alpha_r_curve(constant_function([1.0, -2.0]), [[0.0, 0.0]], [0.1, 1.0, 10.0], samples=128)
        assert all(a == 0.0 for _, a in curve)

    def test_mediator_below_half_distance(self):
        x, y = np.array([0.0, 0.0]), np.array([3.0, 4.0])
        F = mediator_classifier(x, y)
        curve = alpha_r_curve(F, np.stack([x, y]), [0.5, 1.0, 2.0, 2.49], samples=2048)
        assert all(a == 0.0 for _, a in curve)

    def test_radii_must_increase(self):
        with pytest.raises(ValueError):
            alpha_r_curve(lambda z: z, [[0.0]], [1.0, 1.0])


class TestRLim:
    def test_contracting_map_reaches_upper_bound(self):
        res = r_lim(linear_function([[0.5]]), 0.6, [[0.0], [1.0]], bounds=(0.0, 2.0), samples=64)
        assert res.r == 2.0 and not res.exceeded_at_lower_bound

    def test_expanding_map_returns_zero(self):
        res = r_lim(linear_function([[2.0]]), 1.0, [[0.0]], bounds=(0.0, 2.0), samples=64)
        assert res.r == 0.0 and res.exceeded_at_lower_bound

    def test_sigmoid_matches_dense_grid(self):
        upper = 20.0
        res = r_lim(sigmoid_function, 0.01, SIGMOID_POINTS, bounds=(0.0, upper), samples=1024, seed=0)
        step = 1e-3 * upper
        assert res.grid_step == step
        # bisect the oracle curve on the same grid
        lo, hi = 1, 1000
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if sigmoid_curve_oracle(mid * step) <= 0.01:
                lo = mid
            else:
                hi = mid
        assert abs(res.r - lo * step) <= 2 * step + 1e-12

    def test_target_must_be_positive(self):
        with pytest.raises(ValueError):
            r_lim(sigmoid_function, 0.0, [[0.0]])


class TestClosedFormClassifiers:
    def test_mediator_side(self):
        F = mediator_classifier([0.0], [1.0])
        np.testing.assert_array_equal(F(np.array([[0.49]])), [[1.0, 0.0]])
        np.testing.assert_array_equal(F(np.array([[0.51]])), [[0.0, 1.0]])
        np.testing.assert_array_equal(F(np.array([[0.5]])), [[1.0, 0.0]])

    def test_mediator_rejects_equal_points(self):
        with pytest.raises(ValueError):
            mediator_classifier([1.0, 2.0], [1.0, 2.0])

    def test_mediator_zero_below_half_distance(self):
        x, y = np.array([0.0, 1.0, 2.0]), np.array([1.0, -1.0, 0.5])
        d = np.linalg.norm(x - y)
        est = estimate(mediator_classifier(x, y), np.stack([x, y]), 0.49 * d, samples=4096)
        assert est.alpha_hat == 0.0

    def test_mediator_positive_across_boundary(self):
        x, y = np.array([0.0, 1.0, 2.0]), np.array([1.0, -1.0, 0.5])
        d = np.linalg.norm(x - y)
        est = estimate(mediator_classifier(x, y), np.stack([x, y]), 0.6 * d, samples=10000)
        assert est.alpha_hat > 0

    def test_nearest_neighbor_at_training_points(self):
        data = synth_blobs(3, 10, dim=2, seed=2)
        F = nearest_neighbor_classifier(data)
        np.testing.assert_array_equal(F(data.inputs).argmax(axis=1), data.labels)

    def test_nearest_neighbor_tie_goes_to_lowest_index(self):
        data = LabeledDataset(np.array([[0.0], [2.0]]), np.array([1, 0]), 2)
        np.testing.assert_array_equal(nearest_neighbor_classifier(data)(np.array([[1.0]])), [[0.0, 1.0]])

    def test_nearest_neighbor_robust_zero_inside_half_margin(self):
        data = synth_blobs(2, 8, dim=2, separation=3.0, seed=4)
        m, _ = margin(data)
        est = estimate(nearest_neighbor_classifier(data), data.inputs, 0.99 * m / 2, samples=1024)
        assert est.alpha_hat == 0.0

    def test_nearest_neighbor_positive_beyond_half_margin(self):
        data = LabeledDataset(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]), 2)
        m, _ = margin(data)
        est = estimate(nearest_neighbor_classifier(data), data.inputs, 1.5 * m / 2, samples=4096)
        assert est.alpha_hat > 0


class TestComposition:
    def test_two_half_scalings(self):
        half = linear_function(0.5 * np.eye(3))
        pts = np.random.default_rng(0).normal(size=(2, 3))
        rep = check_compositional_bound([half, half], pts, 0.2, samples=512)
        assert rep.product == pytest.approx(0.25, abs=1e-9)
        assert rep.end_to_end == pytest.approx(0.25, abs=1e-9)
        assert rep.hypothesis_holds and rep.bound_satisfied

    def test_rotation_then_scaling(self):
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        layers = [linear_function(rot), linear_function(0.8 * np.eye(2))]
        rep = check_compositional_bound(layers, [[1.0, 2.0]], 0.5, samples=512)
        assert rep.product == pytest.approx(0.8, abs=1e-9)
        assert rep.end_to_end == pytest.approx(0.8, abs=1e-9)

    def test_radii_shrink_by_targets(self):
        layers = [linear_function(0.5 * np.eye(2))] * 3
        rep = check_compositional_bound(layers, [[0.0, 0.0]], 1.0, targets=[0.5, 0.25, 1.0], samples=16)
        assert rep.radii == [1.0, 0.5, 0.125]

    def test_violations_reported(self):
        layers = [linear_function(2.0 * np.eye(2)), linear_function(0.25 * np.eye(2))]
        rep = check_compositional_bound(layers, [[0.0, 0.0]], 0.1, samples=64)
        assert rep.violations == [1]
        assert not rep.hypothesis_holds
        assert rep.bound_satisfied

    def test_targets_above_one_rejected(self):
        with pytest.raises(ValueError):
            check_compositional_bound([lambda z: z], [[0.0]], 0.1, targets=[1.5])

    def test_network_layers(self):
        net = build_network(3, 2, width=4, blocks=1, seed=0)
        rep = check_compositional_bound(net, np.random.default_rng(0).normal(size=(3, 3)), 0.05, samples=256)
        assert len(rep.layer_alpha) == net.depth
        assert rep.bound_satisfied


class TestInterpolation:
    def test_endpoints(self):
        F = linear_function([[1.0, 2.0], [0.0, -1.0]])
        x, y = np.array([1.0, 0.5]), np.array([-2.0, 3.0])
        res = interpolation_sweep(F, x, y, lambdas=[0.0, 0.3, 1.0])
        np.testing.assert_array_equal(res.outputs[2], F(x[None])[0])
        np.testing.assert_array_equal(res.outputs[0], F(y[None])[0])

    def test_identity_is_lambda(self):
        lam = np.linspace(-0.1, 1.1, 13)
        res = interpolation_sweep(lambda z: z, [1.0], [0.0], lambdas=lam)
        np.testing.assert_array_equal(res.outputs[:, 0], lam)

    def test_default_grid(self):
        res = interpolation_sweep(lambda z: z, [1.0], [0.0])
        assert res.lambdas[0] == pytest.approx(-0.1) and res.lambdas[-1] == pytest.approx(1.1)

    def test_trained_net_crosses_decision(self, blobs_net):
        net, data = blobs_net
        pred = predict(net, data.inputs)
        i = int(np.flatnonzero((pred == data.labels) & (data.labels == 0))[0])
        j = int(np.flatnonzero((pred == data.labels) & (data.labels == 1))[0])
        res = interpolation_sweep(net, data.inputs[i], data.inputs[j], lambdas=np.linspace(0, 1, 201))
        assert res.classes == (0, 1)
        assert res.projection[-1] > 0 > res.projection[0]
        assert np.any(np.diff(np.sign(res.projection)) != 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolation_sweep(lambda z: z, [1.0, 2.0], [1.0])


def random_matrix(seed, max_dim=4):
    rng = np.random.default_rng(seed)
    m, n = rng.integers(1, max_dim + 1, size=2)
    return rng.normal(size=(m, n))


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.01, 10.0))
    def test_linear_estimate_is_lower_bound(self, seed, r):
        M = random_matrix(seed)
        k = np.linalg.norm(M, 2)
        pts = np.random.default_rng(seed).normal(size=(2, M.shape[1]))
        assert estimate(linear_function(M), pts, r, samples=128, seed=seed).alpha_hat <= k + 1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.01, 30.0))
    def test_sigmoid_estimate_is_lower_bound(self, seed, r):
        x = np.random.default_rng(seed).normal(scale=5, size=(3, 1))
        assert estimate(sigmoid_function, x, r, samples=256, seed=seed).alpha_hat <= 0.25 + 1e-9

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 100_000))
    def test_nested_curve_is_monotone(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=4, size=(2, 1))
        radii = np.cumsum(rng.uniform(0.05, 3.0, size=6))
        table = alpha_r_table(sigmoid_function, x, radii, samples=32, seed=seed)
        assert np.all(np.diff(table, axis=0) >= 0)
        curve = [a for _, a in alpha_r_curve(sigmoid_function, x, radii, samples=32, seed=seed)]
        assert curve == sorted(curve)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 100_000), st.sampled_from(["l2", "linf"]))
    def test_seed_determinism(self, seed, norm):
        net = build_network(3, 2, width=4, blocks=1, seed=seed % 7)
        pts = np.random.default_rng(seed).normal(size=(2, 3))
        a = estimate(net, pts, 0.3, samples=64, seed=seed, norm=norm)
        b = estimate(net, pts, 0.3, samples=64, seed=seed, norm=norm)
        assert a.per_point.tobytes() == b.per_point.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 100_000), st.integers(-6, 6))
    def test_scale_covariance_power_of_two(self, seed, e):
        c = 2.0 ** e
        x = np.random.default_rng(seed).normal(scale=3, size=(2, 1))
        a = estimate(sigmoid_function, x, 2.0, samples=64, seed=seed).per_point
        b = estimate(lambda z: c * sigmoid_function(z), x, 2.0, samples=64, seed=seed).per_point
        assert np.array_equal(b, c * a)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 100_000), st.floats(0.01, 100.0))
    def test_scale_covariance_any_factor(self, seed, c):
        # for factors that are not powers of two, scaling before or after the
        # subtraction rounds differently; agreement is to a few ulps
        x = np.random.default_rng(seed).normal(scale=3, size=(2, 1))
        a = estimate(sigmoid_function, x, 2.0, samples=64, seed=seed).alpha_hat
        b = estimate(lambda z: c * sigmoid_function(z), x, 2.0, samples=64, seed=seed).alpha_hat
        assert b == pytest.approx(c * a, rel=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_converges_to_largest_singular_value(self, seed):
        M = random_matrix(seed + 10)
        k = np.linalg.norm(M, 2)
        pts = np.zeros((1, M.shape[1]))
        a = estimate(linear_function(M), pts, 1.0, samples=100_000, grid_size=1, seed=seed).alpha_hat
        assert k * 0.98 <= a <= k + 1e-9
