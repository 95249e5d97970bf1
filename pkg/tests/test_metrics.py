"""Gaussian fits, the closed-form 2-d Frechet distance, purity, energy rows."""

import numpy as np
import pytest

from fedstack import (
    AdapterSet,
    GaussianFit,
    LoraAdapter,
    NumericError,
    average_adapters,
    cluster_purity,
    energy_report,
    energy_trace,
    fit_gaussian,
    frechet_2d,
    frechet_points,
    neutrality_score,
    stack_adapters,
)


class TestFitGaussian:
    def test_moments_match_numpy(self):
        rng = np.random.default_rng(0)
        pts = rng.standard_normal((500, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        fit = fit_gaussian(pts)
        np.testing.assert_allclose(fit.mean, pts.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(
            fit.cov, np.cov(pts.T, ddof=1) + 1e-9 * np.eye(2), atol=1e-9
        )

    def test_constant_batch_regularised(self):
        fit = fit_gaussian(np.ones((10, 2)))
        np.testing.assert_allclose(fit.cov, 1e-9 * np.eye(2), atol=1e-15)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_gaussian(np.ones((1, 2)))


class TestFrechet2d:
    def test_identical_fits_zero(self):
        fit = GaussianFit(np.array([0.3, -0.2]), np.array([[0.5, 0.1], [0.1, 0.4]]))
        assert frechet_2d(fit, fit) == 0.0

    def test_mean_shift_only(self):
        cov = np.eye(2)
        a = GaussianFit(np.zeros(2), cov)
        b = GaussianFit(np.array([1.0, 0.0]), cov)
        assert frechet_2d(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_isotropic_scale_gap(self):
        a = GaussianFit(np.zeros(2), 4.0 * np.eye(2))
        b = GaussianFit(np.zeros(2), np.eye(2))
        # identical means, covariances 4I vs I: tr(4I + I - 2 * 2I) = 2
        assert frechet_2d(a, b) == pytest.approx(2.0, abs=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            fits = []
            for _ in range(2):
                m = rng.standard_normal(2)
                half = rng.standard_normal((2, 2))
                fits.append(GaussianFit(m, half @ half.T + 1e-6 * np.eye(2)))
            d_ab = frechet_2d(fits[0], fits[1])
            d_ba = frechet_2d(fits[1], fits[0])
            assert abs(d_ab - d_ba) <= 1e-9
            assert d_ab >= 0.0

    def test_diagonal_analytic_oracle(self):
        # for commuting covariances the trace term is sum (sqrt(a_i) - sqrt(b_i))^2
        rng = np.random.default_rng(2)
        for _ in range(100):
            mean_a = rng.standard_normal(2)
            mean_b = rng.standard_normal(2)
            da = rng.uniform(0.05, 3.0, 2)
            db = rng.uniform(0.05, 3.0, 2)
            a = GaussianFit(mean_a, np.diag(da))
            b = GaussianFit(mean_b, np.diag(db))
            expect = float(np.sum((mean_a - mean_b) ** 2))
            expect += float(np.sum((np.sqrt(da) - np.sqrt(db)) ** 2))
            assert frechet_2d(a, b) == pytest.approx(expect, abs=1e-9)

    def test_points_wrapper(self):
        rng = np.random.default_rng(3)
        pts = rng.standard_normal((400, 2))
        assert frechet_points(pts, pts) == 0.0


class TestClusterPurity:
    def test_perfect(self):
        assignment = {0: 0, 1: 0, 2: 1, 3: 1}
        truth = {0: "a", 1: "a", 2: "b", 3: "b"}
        assert cluster_purity(assignment, truth) == 1.0

    def test_one_stray(self):
        assignment = {0: 0, 1: 0, 2: 0, 3: 1}
        truth = {0: "a", 1: "a", 2: "b", 3: "b"}
        assert cluster_purity(assignment, truth) == pytest.approx(0.75)

    def test_relabeling_invariance(self):
        assignment = {0: 7, 1: 7, 2: 3, 3: 3}
        truth = {0: "x", 1: "x", 2: "y", 3: "y"}
        assert cluster_purity(assignment, truth) == 1.0

    def test_mismatched_keys(self):
        with pytest.raises(ValueError):
            cluster_purity({0: 0}, {1: "a"})


class TestEnergyReport:
    def make_pair(self, rng, sign):
        shapes = {"a": (16, 12), "b": (10, 14)}
        base = AdapterSet.random(shapes, 4, rng)
        flipped = {
            k: LoraAdapter(k, v.rank, v.down.copy(), sign * v.up, v.alpha)
            for k, v in base.items()
        }
        return base, AdapterSet(flipped)

    def test_opposing_members(self):
        rng = np.random.default_rng(4)
        m1, m2 = self.make_pair(rng, -1.0)
        fed = AdapterSet(
            {k: average_adapters([m1[k], m2[k]], [0.5, 0.5]) for k in m1.layer_ids}
        )
        stacked = AdapterSet(
            {k: stack_adapters([m1[k], m2[k]], [0.5, 0.5]) for k in m1.layer_ids}
        )
        rows = energy_report([m1, m2], fed, stacked)
        assert [r.layer_id for r in rows] == ["a", "b"]
        for row in rows:
            assert row.cancellation_ratio <= 1e-12
            assert row.fedavg_energy <= 1e-9
            # stacked energy against the dense oracle: sum of weighted deltas
            layer = row.layer_id
            dense = 0.5 * m1[layer].delta + 0.5 * m2[layer].delta
            assert row.stacked_energy == pytest.approx(float(np.sum(dense**2)), abs=1e-9)

    def test_identical_members_ratio_one(self):
        rng = np.random.default_rng(5)
        member = AdapterSet.random({"a": (16, 12)}, 4, rng)
        fed = AdapterSet({"a": average_adapters([member["a"]] * 2, [0.5, 0.5])})
        stacked = AdapterSet({"a": stack_adapters([member["a"]] * 2, [0.5, 0.5])})
        rows = energy_report([member, member], fed, stacked)
        assert rows[0].cancellation_ratio == pytest.approx(1.0, rel=1e-9)
        assert rows[0].member_energies[0] == pytest.approx(
            energy_trace(member["a"]), rel=1e-12
        )


class TestNeutralityScore:
    def test_identical_populations(self):
        rng = np.random.default_rng(6)
        latents = rng.standard_normal((300, 2))
        score = neutrality_score({"ring": latents, "moons": latents.copy()})
        assert score == 0.0

    def test_distinct_populations_positive(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((300, 2))
        b = rng.standard_normal((300, 2)) + 3.0
        assert neutrality_score({"x": a, "y": b}) > 1.0

    def test_single_population(self):
        rng = np.random.default_rng(8)
        assert neutrality_score({"only": rng.standard_normal((50, 2))}) == 0.0
