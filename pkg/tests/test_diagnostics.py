import itertools
import json

import numpy as np
import pytest

import fedflat as ff
from fedflat.models import Batch, gradient
from fedflat.rng import stream


def duplicated_shard_instance():
    """Two devices with bit-identical data (rows duplicated)."""
    base = ff.generate_synthetic(3, 5, 8, 0.4, seed=2)
    features = np.vstack([base.features, base.features])
    labels = np.concatenate([base.labels, base.labels])
    dataset = ff.Dataset(features, labels, 3)
    part = ff.Partition([np.arange(base.n), np.arange(base.n, 2 * base.n)], "manual", 0)
    spec = ff.ModelSpec("logistic-regression", input_dim=5, num_classes=3)
    return spec, dataset, part


def two_center_quadratic(dim=4, seed=7):
    centers = [stream(seed, "c", i).standard_normal(dim) for i in range(2)]
    specs = [ff.ModelSpec("quadratic", input_dim=dim, quadratic_center=c) for c in centers]
    features = np.zeros((6, dim))
    features[:, 0] = np.arange(6)
    dataset = ff.Dataset(features, np.arange(6) % 2, 2)
    part = ff.Partition([np.arange(3), np.arange(3, 6)], "manual", 0)
    return specs, dataset, part, centers


class TestFlatnessProxy:
    def test_zero_radius_gives_zero(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(0, "init"))
        full = dataset.batch(partition.assignments[0])
        assert ff.flatness_proxy(spec, full, theta, 0.0, np.ones_like(theta)) == 0.0

    def test_quadratic_at_center_is_half_rho_squared(self):
        center = np.array([1.0, -1.0, 2.0])
        spec = ff.ModelSpec("quadratic", input_dim=3, quadratic_center=center)
        for rho in (0.01, 0.5, 2.0):
            s = ff.flatness_proxy(spec, None, center.copy(), rho, np.array([3.0, 0.0, 4.0]))
            assert s == pytest.approx(0.5 * rho**2, rel=1e-12)

    def test_logistic_first_order_taylor(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(4, "init"), scale=0.4)
        full = dataset.batch(partition.assignments[1])
        g = gradient(spec, theta, full)
        lips = ff.smoothness_constant(spec, full.features)
        rho = 1e-3
        s = ff.flatness_proxy(spec, full, theta, rho, g)
        assert abs(s - rho * np.linalg.norm(g)) <= 5 * rho**2 * lips / 2


class TestFlatnessIncompatibility:
    def test_identical_shards_have_zero_dispersion(self):
        spec, dataset, part = duplicated_shard_instance()
        theta = ff.init_params(spec, stream(1, "init"), scale=0.3)
        report = ff.flatness_incompatibility(spec, dataset, part, theta, 0.05, rule="full-gradient")
        assert report.proxies[0] == report.proxies[1]
        assert report.dispersion == 0.0

    def test_two_quadratic_devices_closed_form(self):
        specs, dataset, part, centers = two_center_quadratic()
        theta = np.array([0.5, 0.5, 0.5, 0.5])
        rho = 0.2
        report = ff.flatness_incompatibility(specs, dataset, part, theta, rho, rule="full-gradient")
        s_expected = [rho * np.linalg.norm(theta - c) + 0.5 * rho**2 for c in centers]
        assert np.allclose(report.proxies, s_expected, atol=1e-12)
        expected_disp = float(np.mean((np.array(s_expected) - np.mean(s_expected)) ** 2))
        assert report.dispersion == pytest.approx(expected_disp, abs=1e-12)

    def test_zero_radius_zero_dispersion_any_rule(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(2, "init"))
        for rule in ("stochastic", "full-gradient", "mixed"):
            report = ff.flatness_incompatibility(
                spec, dataset, partition, theta, 0.0, rule=rule,
                gamma_l=0.5, h=np.zeros_like(theta),
            )
            assert report.dispersion == 0.0

    def test_mixed_rule_degenerates_to_stochastic(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(3, "init"), scale=0.3)
        h = stream(3, "h").standard_normal(theta.shape[0])
        a = ff.flatness_incompatibility(
            spec, dataset, partition, theta, 0.05, rule="mixed",
            gamma_l=1.0, h=h, master_seed=50, round_=4,
        )
        b = ff.flatness_incompatibility(
            spec, dataset, partition, theta, 0.05, rule="stochastic",
            master_seed=50, round_=4,
        )
        assert a.proxies == b.proxies

    def test_dispersion_nonnegative_and_recomputable(self, small_logistic):
        spec, dataset, partition = small_logistic
        for seed in range(5):
            theta = ff.init_params(spec, stream(seed, "init"), scale=0.5)
            report = ff.flatness_incompatibility(
                spec, dataset, partition, theta, 0.05, rule="stochastic", master_seed=seed
            )
            assert report.dispersion >= 0.0
            assert report.dispersion == pytest.approx(report.recomputed_dispersion(), abs=1e-12)

    def test_unknown_rule_rejected(self, small_logistic):
        spec, dataset, partition = small_logistic
        with pytest.raises(ValueError):
            ff.flatness_incompatibility(spec, dataset, partition, np.zeros(45), 0.05, rule="exotic")

    def test_report_json_stable(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(0, "init"))
        report = ff.flatness_incompatibility(spec, dataset, partition, theta, 0.05)
        payload = json.loads(report.to_json())
        assert list(payload) == ["rule", "proxies", "mean", "dispersion"]
        assert report.to_json() == report.to_json()


class TestDecomposeDeviation:
    def test_identical_shards_have_zero_bias(self):
        spec, dataset, part = duplicated_shard_instance()
        theta = ff.init_params(spec, stream(5, "init"), scale=0.3)
        report = ff.decompose_deviation(spec, dataset, part, theta)
        assert np.all(report.delta_sq == 0.0)

    def test_cross_term_vanishes(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(6, "init"), scale=0.4)
        report = ff.decompose_deviation(spec, dataset, partition, theta)
        assert np.abs(report.cross).max() <= 1e-9

    def test_pythagorean_split(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(7, "init"), scale=0.4)
        report = ff.decompose_deviation(spec, dataset, partition, theta)
        assert report.pythagoras_residuals().max() <= 1e-9

    def test_empirical_bounds_are_maxima(self, small_logistic):
        spec, dataset, partition = small_logistic
        report = ff.decompose_deviation(
            spec, dataset, partition, ff.init_params(spec, stream(8, "init"))
        )
        assert report.sigma_l_sq == report.zeta_sq.max()
        assert report.sigma_g_sq == report.delta_sq.max()
        assert report.sigma_l_sq >= 0 and report.sigma_g_sq >= 0

    def test_report_json_stable(self, small_logistic):
        spec, dataset, partition = small_logistic
        report = ff.decompose_deviation(
            spec, dataset, partition, ff.init_params(spec, stream(9, "init"))
        )
        payload = json.loads(report.to_json())
        assert list(payload) == [
            "delta_sq", "zeta_sq", "cross", "total_sq", "sigma_l_sq", "sigma_g_sq",
        ]


class TestExpectedDispersion:
    def test_exact_matches_product_enumeration(self):
        # brute-force oracle: walk the full product of single-sample draws
        spec_l = ff.ModelSpec("logistic-regression", input_dim=4, num_classes=2)
        rng = stream(12, "t")
        dataset = ff.Dataset(rng.standard_normal((6, 4)), np.array([0, 1, 0, 1, 0, 1]), 2)
        part = ff.Partition([np.arange(3), np.arange(3, 6)], "manual", 0)
        theta = rng.standard_normal(ff.param_dim(spec_l))
        rho = 0.05
        got = ff.expected_dispersion(spec_l, dataset, part, theta, rho).value

        per_device_s = []
        for idx in part.assignments:
            full = dataset.batch(idx)
            svals = []
            for s in range(idx.shape[0]):
                g = gradient(spec_l, theta, Batch(full.features[s : s + 1], full.labels[s : s + 1]))
                svals.append(ff.flatness_proxy(spec_l, full, theta, rho, g))
            per_device_s.append(svals)
        outcomes = []
        for combo in itertools.product(*per_device_s):
            arr = np.array(combo)
            outcomes.append(np.mean((arr - arr.mean()) ** 2))
        assert got == pytest.approx(float(np.mean(outcomes)), abs=1e-12)

    def test_monte_carlo_agrees_with_exact(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(13, "init"), scale=0.3)
        exact = ff.expected_dispersion(spec, dataset, partition, theta, 0.05).value
        mc = ff.expected_dispersion(
            spec, dataset, partition, theta, 0.05, method="monte-carlo", n_draws=4000
        )
        assert mc.stderr > 0
        assert abs(mc.value - exact) <= 5 * mc.stderr


class TestDispersionBound:
    def test_zero_radius_bound_and_value(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(14, "init"))
        report = ff.decompose_deviation(spec, dataset, partition, theta)
        assert ff.dispersion_bound(0.0, 1.0, report) == 0.0
        assert ff.expected_dispersion(spec, dataset, partition, theta, 0.0).value == 0.0

    def test_iid_full_batch_reduces_to_curvature_term(self):
        spec, dataset, part = duplicated_shard_instance()
        theta = ff.init_params(spec, stream(15, "init"), scale=0.3)
        lips = ff.smoothness_constant(spec, dataset.features)
        rho = 0.05
        zero_noise = ff.DeviationReport(
            delta_sq=np.zeros(2), zeta_sq=np.zeros(2), cross=np.zeros(2),
            total_sq=np.zeros(2), sigma_l_sq=0.0, sigma_g_sq=0.0,
        )
        bound = ff.dispersion_bound(rho, lips, zero_noise)
        assert bound == pytest.approx(0.75 * lips**2 * rho**4, rel=1e-12)
        measured = ff.flatness_incompatibility(
            spec, dataset, part, theta, rho, rule="full-gradient"
        ).dispersion
        assert measured == 0.0 <= bound

    @pytest.mark.parametrize("rho", [0.01, 0.05, 0.1])
    def test_bound_holds_on_quadratic_instances(self, rho):
        specs, dataset, part, _ = two_center_quadratic()
        for k in range(5):
            theta = stream(100 + k, "init").standard_normal(4)
            report = ff.decompose_deviation(specs, dataset, part, theta)
            bound = ff.dispersion_bound(rho, 1.0, report)
            value = ff.expected_dispersion(specs, dataset, part, theta, rho).value
            assert value <= bound

    @pytest.mark.parametrize("rho", [0.01, 0.05, 0.1])
    def test_bound_holds_on_logistic_instances(self, small_logistic, rho):
        spec, dataset, partition = small_logistic
        lips = max(
            ff.smoothness_constant(spec, dataset.features[idx])
            for idx in partition.assignments
        )
        for k in range(5):
            theta = ff.init_params(spec, stream(200 + k, "init"), scale=0.5)
            report = ff.decompose_deviation(spec, dataset, partition, theta)
            bound = ff.dispersion_bound(rho, lips, report)
            value = ff.expected_dispersion(spec, dataset, partition, theta, rho).value
            assert value <= bound


class TestTrackingError:
    def global_grad(self, spec, dataset, partition, theta):
        grads = [gradient(spec, theta, dataset.batch(idx)) for idx in partition.assignments]
        return np.mean(grads, axis=0)

    def test_exact_direction_scores_zero(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(16, "init"), scale=0.3)
        grad_f = self.global_grad(spec, dataset, partition, theta)
        assert ff.tracking_error(grad_f, spec, dataset, partition, theta) == 0.0

    def test_zero_direction_scores_gradient_norm(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(17, "init"), scale=0.3)
        grad_f = self.global_grad(spec, dataset, partition, theta)
        got = ff.tracking_error(np.zeros_like(theta), spec, dataset, partition, theta)
        assert got == pytest.approx(float(grad_f @ grad_f), rel=1e-12)

    def test_single_coordinate_offset(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(18, "init"), scale=0.3)
        grad_f = self.global_grad(spec, dataset, partition, theta)
        eps = 0.5
        h = grad_f.copy()
        h[0] += eps
        assert ff.tracking_error(h, spec, dataset, partition, theta) == pytest.approx(
            eps**2, rel=1e-12
        )

    def test_sampled_reference_mode(self, small_logistic):
        spec, dataset, partition = small_logistic
        theta = ff.init_params(spec, stream(19, "init"), scale=0.3)
        exact = ff.tracking_error(np.zeros_like(theta), spec, dataset, partition, theta)
        sampled = ff.tracking_error(
            np.zeros_like(theta), spec, dataset, partition, theta,
            reference_batches=10, reference_batch_size=64, rng=stream(19, "ref"),
        )
        assert sampled == pytest.approx(exact, rel=0.25)


class TestFriendlyAdversary:
    def shard_for(self, dataset, seed=0):
        return ff.DeviceShard(dataset, 0, np.arange(dataset.n), stream(seed, "batch"))

    def test_zero_radius_all_friendly(self, small_logistic):
        spec, dataset, _ = small_logistic
        theta = ff.init_params(spec, stream(20, "init"), scale=0.3)
        report = ff.friendly_adversary_rate(
            spec, self.shard_for(dataset), theta, 0.0, stream(20, "fa"), pairs=20, batch_size=4
        )
        assert report.friendly_fraction == 1.0

    def test_same_batch_never_friendly_at_small_radius(self, small_logistic):
        spec, dataset, _ = small_logistic
        theta = ff.init_params(spec, stream(21, "init"), scale=0.3)
        report = ff.friendly_adversary_rate(
            spec, self.shard_for(dataset), theta, 1e-4, stream(21, "fa"),
            pairs=25, batch_size=4, disjoint=False,
        )
        assert report.friendly_fraction == 0.0

    def test_opposed_two_sample_instance(self):
        # same input, different label: the two single-sample gradients point
        # in exactly opposite directions, so every cross pair is misaligned
        spec = ff.ModelSpec("logistic-regression", input_dim=2, num_classes=2)
        dataset = ff.Dataset(np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]), 2)
        shard = ff.DeviceShard(dataset, 0, np.arange(2), stream(0, "batch"))
        theta = np.zeros(6)
        report = ff.friendly_adversary_rate(
            spec, shard, theta, 0.05, stream(22, "fa"), pairs=10, batch_size=1
        )
        assert report.misaligned_fraction == 1.0
        assert report.friendly_fraction == 1.0

    def test_shard_too_small_rejected(self, small_logistic):
        spec, dataset, _ = small_logistic
        tiny = ff.DeviceShard(dataset, 0, np.arange(3), stream(0, "batch"))
        with pytest.raises(ValueError):
            ff.friendly_adversary_rate(spec, tiny, np.zeros(45), 0.05, stream(0, "fa"), pairs=2, batch_size=2)
