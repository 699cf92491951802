"""Dictionary construction, augmentation sampling, calibration, diagnostics."""

import numpy as np
import pytest

from latentaug.dictionary import (
    BaseDictionary,
    ClassStats,
    CovarianceType,
    augment,
    build_dictionary,
    build_supervised_dictionary,
    class_stats,
    covariance_pearson,
    distribution_calibration,
    load_dictionary,
    sample_gaussian,
    sample_variations,
    save_dictionary,
)
from latentaug.store import EmbeddingDataset


def two_pass_cov(rows):
    # independent covariance oracle: explicit mean pass then outer-product pass
    n, d = rows.shape
    mean = [sum(float(rows[i, k]) for i in range(n)) / n for k in range(d)]
    cov = np.zeros((d, d))
    for i in range(n):
        c = [float(rows[i, k]) - mean[k] for k in range(d)]
        for a in range(d):
            for b in range(d):
                cov[a, b] += c[a] * c[b]
    return cov / n


def clustered_data(n=60, d=5, C=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    assignments = rng.integers(0, C, n)
    for j in range(C):  # guarantee non-empty clusters
        assignments[j] = j
    return X, assignments


class TestBuildDictionary:
    def test_prototypes_are_cluster_means(self):
        X, a = clustered_data(seed=1)
        dic = build_dictionary(X, a, C=3)
        for j in range(3):
            np.testing.assert_allclose(dic.prototypes[j], X[a == j].mean(axis=0), atol=1e-12)

    def test_full_matches_two_pass_oracle(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((50, 8))
        dic = build_dictionary(X, np.zeros(50, dtype=np.int64), C=1, cov_type="full")
        np.testing.assert_allclose(dic.covariances[0], two_pass_cov(X), atol=1e-6)

    def test_identical_points_zero_cov_ridge_factor(self):
        X = np.tile([1.0, 2.0, 3.0], (10, 1))
        eps = 1e-6
        dic = build_dictionary(X, np.zeros(10, dtype=np.int64), C=1, ridge_eps=eps)
        np.testing.assert_allclose(dic.covariances[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(dic.factors[0], np.sqrt(eps) * np.eye(3), atol=1e-12)

    def test_diag_hand_case(self):
        X = np.array([[1.0, 0.0], [-1.0, 0.0]])
        dic = build_dictionary(X, np.zeros(2, dtype=np.int64), C=1, cov_type="diag")
        np.testing.assert_allclose(dic.covariances[0], [1.0, 0.0], atol=1e-12)

    def test_tied_uses_all_rows(self):
        X, a = clustered_data(seed=3)
        dic = build_dictionary(X, a, C=3, cov_type="tied")
        np.testing.assert_allclose(dic.covariances, two_pass_cov(X), atol=1e-6)
        assert dic.covariances.shape == (5, 5)

    def test_spherical_is_mean_of_diag_variances(self):
        X, a = clustered_data(seed=4)
        diag = build_dictionary(X, a, C=3, cov_type="diag")
        sph = build_dictionary(X, a, C=3, cov_type="spherical")
        for j in range(3):
            assert np.isclose(sph.covariances[j], diag.covariances[j].mean())

    def test_none_has_no_arrays(self):
        X, a = clustered_data()
        dic = build_dictionary(X, a, C=3, cov_type="none")
        assert dic.covariances is None and dic.factors is None
        np.testing.assert_allclose(dic.covariance_dense(0), np.zeros((5, 5)))

    def test_factor_reconstructs_ridged_covariance(self):
        X, a = clustered_data(n=40, d=6, seed=5)
        for cov_type in ("full", "tied"):
            dic = build_dictionary(X, a, C=3, cov_type=cov_type, ridge_eps=1e-6)
            for j in range(3):
                L = dic.factors[j] if cov_type == "full" else dic.factors
                np.testing.assert_allclose(
                    L @ L.T, dic.sampling_covariance(j), atol=1e-10
                )

    def test_empty_cluster_rejected(self):
        X = np.ones((4, 2))
        with pytest.raises(ValueError, match="empty cluster 2"):
            build_dictionary(X, np.array([0, 0, 1, 1]), C=3)

    def test_bad_assignment_range_rejected(self):
        X = np.ones((4, 2))
        with pytest.raises(ValueError, match="out of range"):
            build_dictionary(X, np.array([0, 0, 1, 3]), C=3)

    def test_unknown_cov_type_rejected(self):
        X, a = clustered_data()
        with pytest.raises(ValueError, match="covariance type"):
            build_dictionary(X, a, C=3, cov_type="banana")

    def test_rank_deficient_cluster_factorable_with_ridge(self):
        # 3 points in 8 dimensions: rank <= 2 covariance, ridge keeps it PD
        rng = np.random.default_rng(6)
        X = rng.standard_normal((3, 8))
        dic = build_dictionary(X, np.zeros(3, dtype=np.int64), C=1, ridge_eps=1e-6)
        L = dic.factors[0]
        np.testing.assert_allclose(L @ L.T, dic.sampling_covariance(0), atol=1e-10)


class TestSupervisedDictionary:
    def test_one_entry_per_class(self):
        rng = np.random.default_rng(7)
        ds = EmbeddingDataset(
            features=rng.standard_normal((70, 4)).astype(np.float32),
            labels=rng.integers(0, 7, 70),
        )
        dic = build_supervised_dictionary(ds)
        assert dic.n_entries == len(ds.distinct_labels())
        assert dic.source == "supervised"
        assert dic.class_ids.tolist() == ds.distinct_labels().tolist()

    def test_single_class_dataset(self):
        ds = EmbeddingDataset(
            features=np.random.default_rng(8).standard_normal((10, 3)).astype(np.float32),
            labels=np.zeros(10, dtype=np.int64),
        )
        dic = build_supervised_dictionary(ds)
        assert dic.n_entries == 1

    def test_degenerate_class_rejected(self):
        ds = EmbeddingDataset(
            features=np.ones((3, 2), dtype=np.float32),
            labels=np.array([0, 0, 5]),
        )
        with pytest.raises(ValueError, match="degenerate class 5"):
            build_supervised_dictionary(ds)

    def test_degenerate_class_allowed_for_none_type(self):
        ds = EmbeddingDataset(
            features=np.ones((3, 2), dtype=np.float32),
            labels=np.array([0, 0, 5]),
        )
        dic = build_supervised_dictionary(ds, cov_type="none")
        assert dic.n_entries == 2

    def test_missing_labels_rejected(self):
        ds = EmbeddingDataset(features=np.ones((3, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="labels"):
            build_supervised_dictionary(ds)

    def test_matches_unsupervised_when_assignments_are_labels(self):
        rng = np.random.default_rng(9)
        labels = np.repeat(np.arange(4), 15)
        ds = EmbeddingDataset(
            features=rng.standard_normal((60, 5)).astype(np.float32), labels=labels
        )
        sup = build_supervised_dictionary(ds, cov_type="full")
        uns = build_dictionary(ds, labels, C=4, cov_type="full")
        np.testing.assert_allclose(sup.prototypes, uns.prototypes, atol=1e-12)
        np.testing.assert_allclose(sup.covariances, uns.covariances, atol=1e-12)


class TestAugment:
    def diag_dictionary(self, variances, prototypes=None):
        variances = np.asarray(variances, dtype=np.float64)
        if prototypes is None:
            prototypes = np.eye(variances.shape[0], variances.shape[1])
        return BaseDictionary(
            prototypes=prototypes,
            covariances=variances,
            factors=np.sqrt(variances),
            covariance_type=CovarianceType.DIAG,
            ridge_eps=0.0,
        )

    def test_first_row_is_original(self):
        X, a = clustered_data(seed=10)
        dic = build_dictionary(X, a, C=3)
        z = np.arange(5, dtype=float) + 1.0
        out = augment(dic, z, T=8, rng_seed=1)
        np.testing.assert_array_equal(out[0], z)
        assert out.shape == (8, 5)

    def test_none_type_copies(self):
        X, a = clustered_data(seed=11)
        dic = build_dictionary(X, a, C=3, cov_type="none")
        z = np.ones(5)
        out = augment(dic, z, T=5, rng_seed=0)
        np.testing.assert_array_equal(out, np.tile(z, (5, 1)))

    def test_t_equal_one(self):
        X, a = clustered_data(seed=12)
        dic = build_dictionary(X, a, C=3)
        z = np.ones(5)
        out = augment(dic, z, T=1, rng_seed=3)
        np.testing.assert_array_equal(out, z[None, :])

    def test_t_zero_rejected(self):
        X, a = clustered_data(seed=13)
        dic = build_dictionary(X, a, C=3)
        with pytest.raises(ValueError, match="at least 1"):
            augment(dic, np.ones(5), T=0, rng_seed=0)

    def test_deterministic(self):
        X, a = clustered_data(seed=14)
        dic = build_dictionary(X, a, C=3)
        z = np.arange(5, dtype=float) + 0.5
        out1 = augment(dic, z, T=20, rng_seed=77)
        out2 = augment(dic, z, T=20, rng_seed=77)
        assert out1.tobytes() == out2.tobytes()
        out3 = augment(dic, z, T=20, rng_seed=78)
        assert out1.tobytes() != out3.tobytes()

    def test_query_scale_invariance(self):
        # same entry selected for z and alpha*z, so deltas coincide
        X, a = clustered_data(seed=15)
        dic = build_dictionary(X, a, C=3)
        z = np.arange(5, dtype=float) + 0.5
        d1 = augment(dic, z, T=10, rng_seed=5) - z
        d2 = augment(dic, 3.5 * z, T=10, rng_seed=5) - 3.5 * z
        np.testing.assert_allclose(d1, d2, atol=1e-12)

    def test_renormalize_gives_unit_rows(self):
        X, a = clustered_data(seed=16)
        dic = build_dictionary(X, a, C=3)
        out = augment(dic, np.ones(5), T=30, rng_seed=2, renormalize=True)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_zero_norm_query_rejected(self):
        X, a = clustered_data(seed=17)
        dic = build_dictionary(X, a, C=3)
        with pytest.raises(ValueError, match="zero norm"):
            augment(dic, np.zeros(5), T=3, rng_seed=0)

    def test_diag_monte_carlo_moments(self):
        # deltas from diag(4, 1): empirical variances within 5 percent,
        # empirical mean within 3*sigma/sqrt(T) per dimension
        dic = self.diag_dictionary(np.array([[4.0, 1.0]]), prototypes=np.array([[1.0, 0.0]]))
        z = np.array([2.0, 0.5])
        T = 20001
        out = augment(dic, z, T=T, rng_seed=123)
        deltas = out[1:] - z
        var = deltas.var(axis=0)
        assert abs(var[0] - 4.0) / 4.0 < 0.05
        assert abs(var[1] - 1.0) / 1.0 < 0.05
        bound = 3.0 * np.sqrt(np.array([4.0, 1.0])) / np.sqrt(T - 1)
        assert np.all(np.abs(deltas.mean(axis=0)) <= bound)


class TestSampleVariations:
    def test_empirical_covariance_converges(self):
        rng = np.random.default_rng(18)
        X = rng.standard_normal((200, 6))
        dic = build_dictionary(X, np.zeros(200, dtype=np.int64), C=1, ridge_eps=1e-6)
        deltas = sample_variations(dic, 0, 10000, rng_seed=9)
        target = dic.sampling_covariance(0)
        emp = (deltas.T @ deltas) / deltas.shape[0]
        rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
        assert rel < 0.10

    def test_bad_index_rejected(self):
        X, a = clustered_data(seed=19)
        dic = build_dictionary(X, a, C=3)
        with pytest.raises(ValueError, match="out of range"):
            sample_variations(dic, 7, 10, rng_seed=0)

    def test_deterministic(self):
        X, a = clustered_data(seed=20)
        dic = build_dictionary(X, a, C=3)
        d1 = sample_variations(dic, 1, 50, rng_seed=4)
        d2 = sample_variations(dic, 1, 50, rng_seed=4)
        assert d1.tobytes() == d2.tobytes()


class TestClassStats:
    def test_values_match_oracles(self):
        rng = np.random.default_rng(21)
        labels = np.repeat(np.arange(3), 20)
        ds = EmbeddingDataset(
            features=rng.standard_normal((60, 4)).astype(np.float32), labels=labels
        )
        stats = class_stats(ds)
        assert stats.class_ids.tolist() == [0, 1, 2]
        X = ds.features.astype(np.float64)
        for i in range(3):
            rows = X[labels == i]
            np.testing.assert_allclose(stats.means[i], rows.mean(axis=0), atol=1e-12)
            np.testing.assert_allclose(stats.covariances[i], two_pass_cov(rows), atol=1e-8)

    def test_requires_labels(self):
        ds = EmbeddingDataset(features=np.ones((4, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="labels"):
            class_stats(ds)


class TestDistributionCalibration:
    def hand_stats(self):
        means = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]])
        covs = np.stack([np.eye(2), 2.0 * np.eye(2), 3.0 * np.eye(2)])
        return ClassStats(class_ids=np.arange(3), means=means, covariances=covs)

    def test_k1_alpha0_nearest_class(self):
        stats = self.hand_stats()
        z = np.array([1.0, 0.1])  # nearest mean by cosine: class 0
        mu, sigma = distribution_calibration(stats, z, k=1, alpha=0.0)
        np.testing.assert_allclose(mu, (stats.means[0] + z) / 2, atol=1e-12)
        np.testing.assert_allclose(sigma, np.eye(2), atol=1e-12)

    def test_fixed_point_at_class_mean(self):
        stats = self.hand_stats()
        mu, _ = distribution_calibration(stats, stats.means[1], k=1, alpha=0.0)
        np.testing.assert_allclose(mu, stats.means[1], atol=1e-12)

    def test_k2_hand_average(self):
        stats = self.hand_stats()
        z = np.array([1.0, 1.0])  # classes 0 and 1 tie in cosine; both chosen
        mu, sigma = distribution_calibration(stats, z, k=2, alpha=0.5)
        np.testing.assert_allclose(mu, (stats.means[0] + stats.means[1] + z) / 3, atol=1e-12)
        np.testing.assert_allclose(sigma, (np.eye(2) + 2 * np.eye(2)) / 2 + 0.5, atol=1e-12)

    def test_k_exceeding_classes_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            distribution_calibration(self.hand_stats(), np.ones(2), k=4)

    def test_k_zero_rejected(self):
        with pytest.raises(ValueError, match="at least 1"):
            distribution_calibration(self.hand_stats(), np.ones(2), k=0)

    def test_alpha_adds_elementwise(self):
        stats = self.hand_stats()
        z = np.array([1.0, 0.0])
        _, s0 = distribution_calibration(stats, z, k=1, alpha=0.0)
        _, s1 = distribution_calibration(stats, z, k=1, alpha=0.25)
        np.testing.assert_allclose(s1, s0 + 0.25, atol=1e-12)


class TestSampleGaussian:
    def test_moments(self):
        mu = np.array([1.0, -2.0])
        sigma = np.array([[2.0, 0.5], [0.5, 1.0]])
        draws = sample_gaussian(mu, sigma, 40000, rng_seed=6, ridge_eps=0.0)
        np.testing.assert_allclose(draws.mean(axis=0), mu, atol=0.05)
        centered = draws - draws.mean(axis=0)
        emp = (centered.T @ centered) / draws.shape[0]
        np.testing.assert_allclose(emp, sigma, atol=0.08)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            sample_gaussian(np.ones(3), np.eye(2), 5, rng_seed=0)


class TestCovariancePearson:
    def symmetric(self, seed, d=6):
        M = np.random.default_rng(seed).standard_normal((d, d))
        return (M + M.T) / 2

    def test_self_correlation(self):
        A = self.symmetric(22)
        assert covariance_pearson(A, A) == pytest.approx(1.0, abs=1e-14)

    def test_negation(self):
        A = self.symmetric(23)
        assert covariance_pearson(A, -A) == pytest.approx(-1.0, abs=1e-14)

    def test_affine_invariance(self):
        A = self.symmetric(24)
        B = 2.0 * A + 3.0 * np.ones_like(A)
        assert abs(covariance_pearson(A, B) - 1.0) < 1e-10

    def test_zero_variance_rejected(self):
        A = self.symmetric(25)
        with pytest.raises(ValueError, match="zero variance"):
            covariance_pearson(A, np.ones((6, 6)))

    def test_asymmetric_rejected(self):
        M = np.random.default_rng(26).standard_normal((4, 4))
        with pytest.raises(ValueError, match="symmetric"):
            covariance_pearson(M, np.eye(4))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="equal shape"):
            covariance_pearson(np.eye(3), np.eye(4))

    def test_uses_lower_triangle_only(self):
        # differing strictly-upper entries must not affect the result once
        # symmetrized inputs are required; build a case via equal triangles
        A = self.symmetric(27)
        B = A.copy()
        assert covariance_pearson(A, B) == pytest.approx(1.0, abs=1e-14)


class TestPersistence:
    @pytest.mark.parametrize("cov_type", ["full", "tied", "diag", "spherical", "none"])
    def test_round_trip(self, tmp_path, cov_type):
        X, a = clustered_data(n=80, d=6, seed=28)
        dic = build_dictionary(X, a, C=3, cov_type=cov_type)
        path = tmp_path / "dict.json"
        save_dictionary(dic, path)
        out = load_dictionary(path)
        assert out.covariance_type is dic.covariance_type
        assert out.source == dic.source
        assert out.ridge_eps == dic.ridge_eps
        np.testing.assert_allclose(out.prototypes, dic.prototypes, atol=1e-6)
        for j in range(3):
            np.testing.assert_allclose(
                out.covariance_dense(j), dic.covariance_dense(j), atol=1e-5
            )

    def test_factors_still_reconstruct_after_reload(self, tmp_path):
        X, a = clustered_data(n=80, d=6, seed=29)
        dic = build_dictionary(X, a, C=3, cov_type="full")
        path = tmp_path / "dict.json"
        save_dictionary(dic, path)
        out = load_dictionary(path)
        for j in range(3):
            L = out.factors[j]
            np.testing.assert_allclose(L @ L.T, out.sampling_covariance(j), atol=1e-4)

    def test_supervised_class_ids_preserved(self, tmp_path):
        rng = np.random.default_rng(30)
        ds = EmbeddingDataset(
            features=rng.standard_normal((40, 3)).astype(np.float32),
            labels=np.repeat(np.array([2, 5, 9, 11]), 10),
        )
        dic = build_supervised_dictionary(ds)
        path = tmp_path / "sup.json"
        save_dictionary(dic, path)
        out = load_dictionary(path)
        assert out.class_ids.tolist() == [2, 5, 9, 11]
        assert out.source == "supervised"

    def test_manifest_contents(self, tmp_path):
        import json
        X, a = clustered_data(seed=31)
        dic = build_dictionary(X, a, C=3, cov_type="tied", ridge_eps=1e-5)
        path = tmp_path / "d.json"
        save_dictionary(dic, path)
        manifest = json.loads(path.read_text())
        assert manifest["C"] == 3
        assert manifest["cov_type"] == "tied"
        assert manifest["ridge_eps"] == 1e-5
        assert (tmp_path / manifest["payloads"]["prototypes"]).exists()
        assert (tmp_path / manifest["payloads"]["covariances"]).exists()
