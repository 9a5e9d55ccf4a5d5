"""Gaussian class models: densities, the loss, NIW updates, transfer."""

import math

import numpy as np
import pytest

from distnet.distributions import (
    VAR_FLOOR,
    ClassDistribution,
    CovarianceMode,
    DistributionRegistry,
    NIWParams,
    class_log_likelihood,
    cov_param_size,
    expand_variances,
    log_density,
    loss,
    loss_gradients,
    map_estimate,
    niw_update,
    pool_log_var_grads,
    rank1_update,
    scale_prior_from_learned,
    transfer_parameters,
)
from distnet.errors import ConfigError, ContractError, DimensionError, NumericError
from testutil import assert_grad_match, central_difference


def make_dist(mean, var, class_id=0, **kw):
    mean = np.asarray(mean, dtype=np.float64)
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
    return ClassDistribution(class_id, mean, var.copy(), **kw)


class TestLogDensity:
    def test_at_mean_identity_covariance(self):
        dist = make_dist([0.3, -0.7], [1.0, 1.0])
        assert log_density(dist, dist.mean) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)

    def test_scalar_case_direct_evaluation(self):
        dist = make_dist([3.0], [0.4])
        expected = -0.5 * math.log(2 * math.pi * 0.4)
        assert log_density(dist, np.array([3.0])) == pytest.approx(expected, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        mean = rng.normal(size=4)
        var = rng.uniform(0.1, 2.0, size=4)
        z = rng.normal(size=4)
        shift = rng.normal(size=4)
        a = log_density(make_dist(mean, var), z)
        b = log_density(make_dist(mean + shift, var), z + shift)
        assert a == pytest.approx(b, abs=1e-10)

    def test_density_integrates_to_one(self):
        """Trapezoid quadrature of exp(log p) over a wide 1-D grid."""
        rng = np.random.default_rng(17)
        for _ in range(10):
            mu = rng.normal() * 3
            var = rng.uniform(0.05, 4.0)
            dist = make_dist([mu], [var])
            grid = np.linspace(mu - 10 * math.sqrt(var), mu + 10 * math.sqrt(var), 4001)
            dens = np.exp([log_density(dist, np.array([g])) for g in grid])
            assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)

    def test_monotone_decay_along_ray(self):
        rng = np.random.default_rng(11)
        dist = make_dist(rng.normal(size=3), rng.uniform(0.2, 1.5, size=3))
        direction = rng.normal(size=3)
        values = [log_density(dist, dist.mean + t * direction) for t in np.linspace(0, 5, 20)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            log_density(make_dist([0.0, 0.0], 1.0), np.zeros(3))


class TestClassLogLikelihood:
    def test_single_sample_at_mean(self):
        dist = make_dist([1.0, 2.0], 1.0)
        assert class_log_likelihood(dist, dist.mean[None, :]) == pytest.approx(
            -math.log(2 * math.pi), abs=1e-12
        )

    def test_additivity(self):
        rng = np.random.default_rng(2)
        dist = make_dist(rng.normal(size=3), rng.uniform(0.3, 2.0, size=3))
        za, zb = rng.normal(size=3), rng.normal(size=3)
        total = class_log_likelihood(dist, np.stack([za, zb]))
        assert total == pytest.approx(log_density(dist, za) + log_density(dist, zb), abs=1e-10)

    def test_matches_per_sample_loop(self):
        rng = np.random.default_rng(8)
        dist = make_dist(rng.normal(size=4), rng.uniform(0.2, 1.0, size=4))
        samples = rng.normal(size=(3, 4))
        looped = sum(log_density(dist, s) for s in samples)
        assert class_log_likelihood(dist, samples) == pytest.approx(looped, abs=1e-10)

    def test_empty_class_rejected(self):
        with pytest.raises(ContractError):
            class_log_likelihood(make_dist([0.0], 1.0), np.zeros((0, 1)))


def registry_of(dists, mode=CovarianceMode.ISOMETRIC, pool=()):
    latent = dists[0].dim
    next_id = max(d.class_id for d in dists) + 1
    return DistributionRegistry(mode, latent, list(dists), next_id, list(pool))


class TestLoss:
    def test_one_class_one_sample_at_mean(self):
        dist = make_dist([0.0, 0.0], 1.0, class_id=1)
        reg = registry_of([dist])
        value = loss(reg, {1: dist.mean[None, :]})
        assert value == pytest.approx(math.log(2 * math.pi), abs=1e-12)

    def test_additive_over_classes(self):
        d1 = make_dist([0.0, 0.0], 1.0, class_id=1)
        d2 = make_dist([5.0, 5.0], 1.0, class_id=2)
        reg = registry_of([d1, d2])
        value = loss(reg, {1: d1.mean[None, :], 2: d2.mean[None, :]})
        assert value == pytest.approx(2 * math.log(2 * math.pi), abs=1e-12)

    def test_per_class_mean_normalization(self):
        """A class with log densities (-1, -3) contributes +2 whatever its neighbors hold."""
        rng = np.random.default_rng(3)
        # 1-D classes: choose samples with exact log densities -1 and -3
        var = 1.0 / (2 * math.pi)  # log(2*pi*var) = 0, so logp = -(z-mu)^2/(2 var)
        d1 = make_dist([0.0], var, class_id=1)
        z1 = math.sqrt(2 * var)   # logp = -1
        z3 = math.sqrt(6 * var)   # logp = -3
        d2 = make_dist([10.0], 1.0, class_id=2)
        big = d2.mean + rng.normal(size=(10, 1)) * 0.1
        reg = registry_of([d1, d2])
        with_big = loss(reg, {1: np.array([[z1], [z3]]), 2: big})
        alone = loss(registry_of([d1]), {1: np.array([[z1], [z3]])})
        assert alone == pytest.approx(2.0, abs=1e-9)
        other = loss(registry_of([d2]), {2: big})
        assert with_big == pytest.approx(alone + other, abs=1e-9)

    def test_full_class_size_weighting(self):
        """Mini-batch terms are scaled by the full class size, not the batch size."""
        dist = make_dist([0.0], 1.0, class_id=1)
        reg = registry_of([dist])
        batch = np.array([[0.5]])
        full = loss(reg, {1: batch}, class_sizes={1: 10})
        assert full == pytest.approx(loss(reg, {1: batch}) / 10.0, abs=1e-12)

    def test_nonfinite_names_class(self):
        dist = make_dist([0.0], 1.0, class_id=4)
        reg = registry_of([dist])
        with pytest.raises(NumericError, match="class 4"):
            loss(reg, {4: np.array([[np.inf]])})


class TestLossGradients:
    def test_sample_at_mean_has_zero_embedding_gradient(self):
        dist = make_dist([1.0, -2.0], 0.7, class_id=1)
        reg = registry_of([dist])
        grads = loss_gradients(reg, {1: dist.mean[None, :]})
        np.testing.assert_allclose(grads.embeddings[1], 0.0, atol=1e-12)

    def test_isometric_closed_form(self):
        """sigma^2 = 2, z - mu = (1, 0), n_k = 1 -> embedding gradient (0.5, 0)."""
        dist = make_dist([0.0, 0.0], 2.0, class_id=1)
        reg = registry_of([dist])
        grads = loss_gradients(reg, {1: np.array([[1.0, 0.0]])})
        np.testing.assert_allclose(grads.embeddings[1], [[0.5, 0.0]], atol=1e-12)

    @pytest.mark.parametrize("mode", list(CovarianceMode))
    def test_finite_difference_all_blocks(self, mode):
        """Embedding, mean, and pooled log-variance gradients match FD."""
        rng = np.random.default_rng(31)
        latent, n_classes = 3, 2
        log_var = rng.normal(size=cov_param_size(mode, n_classes, latent)) * 0.3
        means = rng.normal(size=(n_classes, latent))
        batches = {k: rng.normal(size=(rng.integers(1, 5), latent)) for k in range(n_classes)}
        sizes = {k: b.shape[0] for k, b in batches.items()}

        def build(means_arr, log_var_arr):
            variances = expand_variances(mode, log_var_arr, n_classes, latent)
            dists = [
                ClassDistribution(k, means_arr[k], variances[k]) for k in range(n_classes)
            ]
            return DistributionRegistry(mode, latent, dists, n_classes, [])

        reg = build(means, log_var)
        grads = loss_gradients(reg, batches, sizes)
        pooled = pool_log_var_grads(mode, grads.log_var_per_class)

        numeric_means = central_difference(
            lambda m: loss(build(m, log_var), batches, sizes), means.copy()
        )
        assert_grad_match(grads.means, numeric_means, label="means")

        numeric_logvar = central_difference(
            lambda lv: loss(build(means, lv), batches, sizes), log_var.copy()
        )
        assert_grad_match(pooled, numeric_logvar, label="log_var")

        for k, batch in batches.items():
            numeric_emb = central_difference(
                lambda b, k=k: loss(reg, {**batches, k: b}, sizes), batch.copy()
            )
            assert_grad_match(grads.embeddings[k], numeric_emb, label=f"emb{k}")


class TestNIWUpdate:
    def test_empty_data_returns_prior(self):
        prior = NIWParams(2.0, 2.0, np.array([1.0]), np.array([3.0]))
        post = niw_update(prior, np.zeros((0, 1)))
        assert post.kappa == prior.kappa and post.nu == prior.nu
        np.testing.assert_array_equal(post.mean, prior.mean)
        np.testing.assert_array_equal(post.scale, prior.scale)

    def test_zero_prior_two_points(self):
        """{2, 4} with the all-zero prior: kappa=nu=2, m=3, S=2."""
        post = niw_update(NIWParams.zero(1), np.array([[2.0], [4.0]]))
        assert post.kappa == 2.0 and post.nu == 2.0
        np.testing.assert_allclose(post.mean, [3.0])
        np.testing.assert_allclose(post.scale, [2.0])

    def test_matches_textbook_form(self):
        """Stable scatter form equals S0 + sum(xx) + k0 m0^2 - kN mN^2."""
        rng = np.random.default_rng(23)
        for _ in range(50):
            d = int(rng.integers(1, 4))
            prior = NIWParams(
                float(rng.uniform(0, 5)),
                float(rng.uniform(0, 5)),
                rng.normal(size=d),
                rng.uniform(0, 2, size=d),
            )
            data = rng.normal(size=(int(rng.integers(1, 6)), d))
            post = niw_update(prior, data)
            kn = prior.kappa + data.shape[0]
            mn = (prior.kappa * prior.mean + data.sum(axis=0)) / kn
            textbook = (
                prior.scale
                + (data * data).sum(axis=0)
                + prior.kappa * prior.mean**2
                - kn * mn**2
            )
            np.testing.assert_allclose(post.scale, textbook, atol=1e-9)

    def test_scale_stays_nonnegative(self):
        rng = np.random.default_rng(29)
        for _ in range(200):
            d = int(rng.integers(1, 5))
            prior = NIWParams(
                float(rng.uniform(0, 3)),
                float(rng.uniform(0, 3)),
                rng.normal(size=d) * 5,
                rng.uniform(0, 1, size=d),
            )
            data = rng.normal(size=(int(rng.integers(1, 8)), d)) * rng.uniform(0.01, 10)
            assert np.all(niw_update(prior, data).scale >= 0)


class TestMapEstimate:
    def test_two_point_case(self):
        post = niw_update(NIWParams.zero(1), np.array([[2.0], [4.0]]))
        mean, var = map_estimate(post, d_eff=1)
        np.testing.assert_allclose(mean, [3.0])
        np.testing.assert_allclose(var, [0.4])

    def test_zero_scale_hits_floor(self):
        post = NIWParams(1.0, 1.0, np.array([5.0]), np.array([0.0]))
        _, var = map_estimate(post)
        np.testing.assert_array_equal(var, [VAR_FLOOR])

    def test_zero_kappa_rejected(self):
        with pytest.raises(ContractError):
            map_estimate(NIWParams.zero(2))


class TestScalePrior:
    def test_scale_factor(self):
        """n_train=10, learned var 0.5 -> S0 = 0.5 * 13 per dimension."""
        dist = make_dist([0.0, 0.0], 0.5)
        prior = scale_prior_from_learned(dist, 10)
        assert prior.kappa == 10.0 and prior.nu == 10.0
        np.testing.assert_allclose(prior.scale, [6.5, 6.5])

    def test_roundtrip_with_no_data(self):
        rng = np.random.default_rng(41)
        dist = make_dist(rng.normal(size=3), rng.uniform(0.1, 2.0, size=3))
        prior = scale_prior_from_learned(dist, 7)
        mean, var = map_estimate(niw_update(prior, np.zeros((0, 3))))
        np.testing.assert_allclose(mean, dist.mean, atol=1e-12)
        np.testing.assert_allclose(var, dist.variance_diag, atol=1e-12)

    def test_zero_prior_is_pure_data_estimate(self):
        rng = np.random.default_rng(43)
        data = rng.normal(size=(6, 2))
        mean, var = map_estimate(niw_update(NIWParams.zero(2), data))
        np.testing.assert_allclose(mean, data.mean(axis=0), atol=1e-12)
        scatter = ((data - data.mean(axis=0)) ** 2).sum(axis=0)
        np.testing.assert_allclose(var, scatter / (6 + 1 + 2), atol=1e-12)

    def test_requires_trained_origin(self):
        dist = make_dist([0.0], 1.0, origin="novel")
        with pytest.raises(ContractError):
            scale_prior_from_learned(dist, 5)

    def test_zero_count_rejected(self):
        with pytest.raises(ContractError):
            scale_prior_from_learned(make_dist([0.0], 1.0), 0)


class TestRank1Update:
    def test_matches_batch_update(self):
        """Folding rank-1 equals the batch NIW+MAP path on every prefix."""
        rng = np.random.default_rng(53)
        for _ in range(40):
            d = int(rng.integers(1, 5))
            kappa0 = float(rng.uniform(0, 6))
            nu0 = kappa0  # counts move in lockstep
            m0 = rng.normal(size=d)
            var0 = rng.uniform(0.05, 2.0, size=d)
            prior = NIWParams(kappa0, nu0, m0, var0 * (nu0 + 3.0))
            dist = ClassDistribution(0, m0.copy(), var0.copy(), kappa0, nu0)
            data = rng.normal(size=(int(rng.integers(1, 6)), d))
            for i, z in enumerate(data, start=1):
                dist = rank1_update(dist, z)
                mean, var = map_estimate(niw_update(prior, data[:i]))
                np.testing.assert_allclose(dist.mean, mean, atol=1e-8)
                np.testing.assert_allclose(dist.variance_diag, var, atol=1e-8)

    def test_first_observation_dominates_zero_kappa(self):
        dist = make_dist([4.0, 4.0], 1.0, kappa=0.0, nu=0.0)
        z = np.array([-1.0, 2.0])
        np.testing.assert_array_equal(rank1_update(dist, z).mean, z)

    def test_counters_increment(self):
        dist = make_dist([0.0], 1.0, kappa=3.0, nu=3.0, log_threshold=-5.0)
        out = rank1_update(dist, np.array([1.0]))
        assert out.kappa == 4.0 and out.nu == 4.0
        assert out.log_threshold == -5.0


class TestTransferParameters:
    def pool_registry(self, variances, thresholds):
        dists = []
        for i, (v, t) in enumerate(zip(variances, thresholds), start=10):
            dists.append(make_dist([0.0, 0.0], v, class_id=i, log_threshold=t, origin="validated"))
        return registry_of(dists, pool=[d.class_id for d in dists])

    def test_single_member_pool_copies_verbatim(self):
        reg = self.pool_registry([0.3], [-2.5])
        z = np.array([7.0, -7.0])
        novel = transfer_parameters(reg, z)
        np.testing.assert_array_equal(novel.mean, z)
        np.testing.assert_allclose(novel.variance_diag, [0.3, 0.3])
        assert novel.log_threshold == -2.5
        assert novel.kappa == 1.0 and novel.nu == 1.0
        assert novel.origin == "novel"

    def test_two_member_pool_averages(self):
        reg = self.pool_registry([0.2, 0.6], [-1.0, -3.0])
        novel = transfer_parameters(reg, np.zeros(2))
        np.testing.assert_allclose(novel.variance_diag, [0.4, 0.4])
        assert novel.log_threshold == pytest.approx(-2.0)

    def test_consecutive_ids(self):
        reg = self.pool_registry([0.2], [-1.0])
        first = reg.next_novel_id
        a = transfer_parameters(reg, np.zeros(2))
        b = transfer_parameters(reg, np.ones(2))
        assert (a.class_id, b.class_id) == (first, first + 1)
        assert reg.next_novel_id == first + 2

    def test_empty_pool_rejected(self):
        reg = registry_of([make_dist([0.0], 1.0, class_id=1)])
        with pytest.raises(ConfigError):
            transfer_parameters(reg, np.zeros(1))

    def test_pool_member_without_threshold_rejected(self):
        dist = make_dist([0.0], 1.0, class_id=1)
        reg = registry_of([dist], pool=[1])
        with pytest.raises(ContractError):
            transfer_parameters(reg, np.zeros(1))


class TestModeDiscipline:
    def test_shared_isometric_single_value_everywhere(self):
        var = expand_variances(CovarianceMode.SHARED_ISOMETRIC, np.array([0.5]), 3, 4)
        assert var.shape == (3, 4)
        assert np.unique(var).size == 1

    def test_isometric_equal_within_class(self):
        lv = np.array([0.0, 1.0, -1.0])
        var = expand_variances(CovarianceMode.ISOMETRIC, lv, 3, 4)
        for k in range(3):
            assert np.unique(var[k]).size == 1
        assert not np.allclose(var[0], var[1])

    def test_shared_diagonal_identical_rows(self):
        lv = np.array([0.0, 0.7, -0.3, 0.1])
        var = expand_variances(CovarianceMode.SHARED_DIAGONAL, lv, 3, 4)
        for k in range(1, 3):
            np.testing.assert_array_equal(var[k], var[0])

    def test_param_sizes(self):
        assert cov_param_size(CovarianceMode.SHARED_ISOMETRIC, 5, 7) == 1
        assert cov_param_size(CovarianceMode.ISOMETRIC, 5, 7) == 5
        assert cov_param_size(CovarianceMode.SHARED_DIAGONAL, 5, 7) == 7


class TestArgmaxInvariance:
    def test_constant_shift_keeps_argmax(self):
        rng = np.random.default_rng(61)
        for _ in range(30):
            lds = rng.normal(size=5) * 10
            shift = rng.normal() * 100
            assert np.argmax(lds) == np.argmax(lds + shift)
