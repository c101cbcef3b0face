"""Tests for thresholding, overlap, permutation, and prediction utilities."""

import csv
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from oracles import laplace_cdf_reference, laplace_quantile_bisect
from rss_select.analysis import (
    LaplaceFit,
    estimate_false_positives,
    evaluate_prediction,
    fit_laplace,
    gap_threshold,
    laplace_cdf,
    laplace_icdf,
    laplace_support,
    overlap,
    threshold_support,
    write_overlap_csv,
    write_score_slices,
    write_voxel_report,
)
from rss_select.clustering import cluster_voxels
from rss_select.data_model import CenterCollection, Dataset, SupportSet, VoxelMask
from rss_select.rss_engine import RSSConfig, rss_run
from rss_select.subsampling import SubsampleConfig
from rss_select.synthgen import SynthConfig, generate_multicenter


class TestLaplaceFit:
    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError, match="b > 0"):
            LaplaceFit(0.0, 0.0)

    def test_moment_fit_four_point_example(self):
        fit = fit_laplace([-1.0, 1.0, -1.0, 1.0])
        assert fit.mu == 0.0
        assert_allclose(fit.b, math.sqrt(0.5), rtol=1e-15)

    def test_translation_equivariance(self, rng):
        v = rng.laplace(0.0, 2.0, size=400)
        base = fit_laplace(v)
        moved = fit_laplace(v + 5.0)
        assert_allclose(moved.mu, base.mu + 5.0, rtol=1e-12)
        assert_allclose(moved.b, base.b, rtol=1e-12)

    def test_moment_fit_recovers_parameters(self):
        rng = np.random.default_rng(7)
        v = rng.laplace(2.0, 3.0, size=100_000)
        fit = fit_laplace(v)
        assert abs(fit.mu - 2.0) / 2.0 < 0.02
        assert abs(fit.b - 3.0) / 3.0 < 0.02

    def test_mle_fit_recovers_parameters(self):
        rng = np.random.default_rng(8)
        v = rng.laplace(2.0, 3.0, size=100_000)
        fit = fit_laplace(v, method="mle")
        assert abs(fit.mu - 2.0) / 2.0 < 0.02
        assert abs(fit.b - 3.0) / 3.0 < 0.02

    def test_degenerate_input_rejected(self):
        with pytest.raises(ValueError, match="zero scale"):
            fit_laplace(np.full(10, 3.3))
        with pytest.raises(ValueError, match="at least 2"):
            fit_laplace([1.0])
        with pytest.raises(ValueError, match="method"):
            fit_laplace([1.0, 2.0], method="map")


class TestLaplaceQuantiles:
    def test_median_is_mu(self):
        assert laplace_icdf(0.5, LaplaceFit(3.25, 0.7)) == 3.25

    def test_frozen_quantiles(self):
        # oracle: bisection on the closed-form CDF
        unit = LaplaceFit(0.0, 1.0)
        assert_allclose(laplace_icdf(0.975, unit), 2.9957322735539877, rtol=1e-12)
        assert_allclose(laplace_icdf(0.99, unit), 3.9120230054281393, rtol=1e-12)
        assert_allclose(
            laplace_icdf(0.1, LaplaceFit(2.0, 3.0)), -2.8283137373023015, rtol=1e-12
        )
        assert_allclose(
            laplace_icdf(0.6, LaplaceFit(-1.5, 0.4)), -1.410742579474316, rtol=1e-12
        )

    def test_matches_bisection_oracle(self, rng):
        for _ in range(25):
            mu = float(rng.normal(0, 4))
            b = float(rng.uniform(0.1, 5))
            p0 = float(rng.uniform(0.001, 0.999))
            assert_allclose(
                laplace_icdf(p0, LaplaceFit(mu, b)),
                laplace_quantile_bisect(p0, mu, b),
                rtol=1e-10,
                atol=1e-10,
            )

    def test_round_trip_within_1e10(self):
        for mu, b in [(0.0, 1.0), (2.0, 3.0), (-4.0, 0.25)]:
            fit = LaplaceFit(mu, b)
            xs = mu + b * np.linspace(-10, 10, 81)
            for x in xs:
                p = float(laplace_cdf(x, fit))
                assert abs(laplace_icdf(p, fit) - x) < 1e-10

    def test_cdf_matches_reference(self, rng):
        fit = LaplaceFit(1.0, 2.0)
        xs = rng.normal(1.0, 6.0, size=50)
        assert_allclose(
            laplace_cdf(xs, fit),
            [laplace_cdf_reference(x, 1.0, 2.0) for x in xs],
            rtol=1e-14,
        )

    def test_rejects_bad_p0(self):
        fit = LaplaceFit(0.0, 1.0)
        for p0 in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError, match="p0"):
                laplace_icdf(p0, fit)


class TestThresholdSupport:
    def test_basic_cut(self):
        sup = threshold_support(np.array([0.0, 2.0, -3.0]), 1.0)
        assert_array_equal(sup.indices, [1, 2])

    def test_strict_at_max(self):
        v = np.array([0.5, 2.0, 1.0])
        assert len(threshold_support(v, 2.0)) == 0

    def test_zero_threshold_keeps_all_nonzero(self):
        v = np.array([0.5, -2.0, 1.0])
        assert len(threshold_support(v, 0.0)) == 3

    def test_monotone_in_theta(self, rng):
        v = rng.normal(size=200)
        small = set(threshold_support(v, 0.3).indices.tolist())
        large = set(threshold_support(v, 1.1).indices.tolist())
        assert large <= small

    def test_rejects_negative_theta(self):
        with pytest.raises(ValueError, match="nonnegative"):
            threshold_support(np.array([1.0]), -0.5)


class TestLaplaceSupport:
    def test_all_equal_values_give_empty_support(self):
        assert len(laplace_support(np.zeros(50))) == 0

    def test_planted_outliers_survive(self, rng):
        v = rng.laplace(0.0, 0.05, size=500)
        v[[7, 99]] = 3.0
        sup = laplace_support(v, 0.975)
        assert {7, 99} <= set(sup.indices.tolist())

    def test_stricter_p0_shrinks_support(self, rng):
        v = rng.laplace(0.0, 1.0, size=500)
        loose = set(laplace_support(v, 0.95).indices.tolist())
        strict = set(laplace_support(v, 0.999).indices.tolist())
        assert strict <= loose


class TestGapThreshold:
    def test_clear_gap_example(self):
        v = np.array([5.0, 4.8, 4.6, 0.01, 0.009])
        theta = gap_threshold(v)
        assert_allclose(theta, math.sqrt(4.6 * 0.01), rtol=1e-12)
        assert len(threshold_support(v, theta)) == 3

    def test_geometric_tie_takes_first(self):
        v = np.array([8.0, 4.0, 2.0, 1.0])
        theta = gap_threshold(v)
        assert_allclose(theta, math.sqrt(32.0), rtol=1e-12)
        assert len(threshold_support(v, theta)) == 1

    def test_gap_confined_to_first_half(self):
        # the huge drop sits past the first half of the nonzero entries,
        # so the cut must settle for the best early ratio
        v = np.array([9.0, 3.0, 2.9, 2.8, 2.7, 0.001])
        theta = gap_threshold(v)
        assert_allclose(theta, math.sqrt(27.0), rtol=1e-12)

    def test_order_invariant(self, rng):
        v = np.array([5.0, 4.8, 4.6, 0.01, 0.009])
        for _ in range(5):
            assert gap_threshold(rng.permutation(v)) == gap_threshold(v)

    def test_signs_ignored(self):
        assert gap_threshold([-5.0, 4.8, -4.6, 0.01, 0.009]) == gap_threshold(
            [5.0, 4.8, 4.6, 0.01, 0.009]
        )

    def test_zeros_do_not_count(self):
        # v_(k+1) must stay positive: with nnz=2 only k=1 qualifies
        theta = gap_threshold(np.array([4.0, 1.0, 0.0, 0.0]))
        assert_allclose(theta, 2.0, rtol=1e-12)

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError, match="distinct nonzero"):
            gap_threshold(np.array([2.0, 2.0, 2.0]))
        with pytest.raises(ValueError, match="distinct nonzero"):
            gap_threshold(np.array([1.0, 0.0]))


class TestOverlap:
    def three_supports(self):
        return [
            SupportSet(np.array([1, 2, 3])),
            SupportSet(np.array([2, 3, 4])),
            SupportSet(np.array([3, 4, 5])),
        ]

    def test_counting_examples(self):
        sups = self.three_supports()
        res = overlap(sups, 2, p=8)
        assert_array_equal(res.at(2).indices, [2, 3, 4])
        assert_array_equal(res.at(3).indices, [3])
        assert_array_equal(res.at(1).indices, [1, 2, 3, 4, 5])

    def test_counts_vector(self):
        res = overlap(self.three_supports(), 1, p=8)
        assert_array_equal(res.counts, [0, 1, 2, 3, 2, 1, 0, 0])

    def test_nesting(self):
        res = overlap(self.three_supports(), 1, p=8)
        for s in (1, 2):
            assert set(res.at(s + 1).indices.tolist()) <= set(res.at(s).indices.tolist())

    def test_s_out_of_range(self):
        with pytest.raises(ValueError, match="S must"):
            overlap(self.three_supports(), 0, p=8)
        with pytest.raises(ValueError, match="S must"):
            overlap(self.three_supports(), 4, p=8)

    def test_index_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            overlap([SupportSet(np.array([9]))], 1, p=8)


def planted_center(seed=0, effect=3.0):
    cfg = SynthConfig(
        dims=(6, 6, 4),
        n_centers=1,
        n_per_center=40,
        true_clusters=((1, 1, 1, 3, 3, 2),),
        effect_size=effect,
        noise_sigma=1.0,
        seed=seed,
    )
    centers, truth = generate_multicenter(cfg)
    return centers.datasets[0], truth


class TestEstimateFalsePositives:
    def run_cfg(self, draws=30, seed=3):
        return RSSConfig(
            subsample=SubsampleConfig(draws=draws, voxel_rate=0.3, block_edge=2, seed=seed)
        )

    def test_identity_permutation_reproduces_support(self):
        ds, _ = planted_center(seed=5)
        clu = cluster_voxels(ds, 12, seed=1)
        cfg = self.run_cfg()
        scores = rss_run(ds, clu, cfg).scores
        final = laplace_support(scores, 0.975)
        assert len(final) > 0
        identity = [np.arange(ds.n)]
        ratio, inside = estimate_false_positives(
            ds, clu, cfg, final, n_perm=1, seed=0, permutations=identity
        )
        assert ratio == 1.0
        assert inside.tolist() == [len(final)]

    def test_empty_support_ratio_zero(self):
        ds, _ = planted_center(seed=5)
        clu = cluster_voxels(ds, 12, seed=1)
        empty = SupportSet(np.empty(0, dtype=np.int64))
        ratio, inside = estimate_false_positives(
            ds, clu, self.run_cfg(draws=5), empty, n_perm=2, seed=0
        )
        assert ratio == 0.0
        assert inside.shape == (2,)

    def test_deterministic_given_seed(self):
        ds, _ = planted_center(seed=6)
        clu = cluster_voxels(ds, 12, seed=1)
        cfg = self.run_cfg(draws=10)
        final = laplace_support(rss_run(ds, clu, cfg).scores, 0.975)
        a = estimate_false_positives(ds, clu, cfg, final, n_perm=3, seed=11)
        b = estimate_false_positives(ds, clu, cfg, final, n_perm=3, seed=11)
        assert a[0] == b[0]
        assert_array_equal(a[1], b[1])

    def test_permuted_labels_rarely_hit_planted_support(self):
        # labels carry the signal; shuffling them should gut the support
        ds, truth = planted_center(seed=7, effect=4.0)
        clu = cluster_voxels(ds, 12, seed=2)
        cfg = self.run_cfg(draws=30)
        final = laplace_support(rss_run(ds, clu, cfg).scores, 0.975)
        ratio, _ = estimate_false_positives(ds, clu, cfg, final, n_perm=4, seed=21)
        assert ratio < 0.5

    def test_rejects_bad_permutation_count(self):
        ds, _ = planted_center()
        clu = cluster_voxels(ds, 12, seed=1)
        with pytest.raises(ValueError, match="one row order"):
            estimate_false_positives(
                ds, clu, self.run_cfg(), SupportSet(np.array([0])), n_perm=2,
                seed=0, permutations=[np.arange(ds.n)],
            )


def two_center_collection(effect=4.0, seed=9, n=30):
    cfg = SynthConfig(
        dims=(4, 4, 3),
        n_centers=2,
        n_per_center=n,
        true_clusters=((0, 0, 0, 2, 2, 2),),
        effect_size=effect,
        noise_sigma=1.0,
        seed=seed,
    )
    return generate_multicenter(cfg)


class TestEvaluatePrediction:
    def test_separable_column_scores_one(self):
        centers, _ = two_center_collection()
        # overwrite one column with a perfectly separating value
        for ds in centers.datasets:
            ds.X[:, 5] = 10.0 * ds.y
        mean, std = evaluate_prediction(
            centers, SupportSet(np.array([5])), n_splits=8, seed=1
        )
        assert mean == 1.0
        assert std == 0.0

    def test_null_support_near_chance(self):
        # noise columns share chance correlations across splits of one
        # fixed dataset, so the pool is kept large to damp that effect
        centers, _ = two_center_collection(effect=0.0, seed=13, n=200)
        sup = SupportSet(np.arange(3))
        mean, _ = evaluate_prediction(centers, sup, n_splits=25, seed=2)
        n_test = 400 - round(0.9 * 400)
        assert abs(mean - 0.5) <= 3.0 * math.sqrt(0.25 / (25 * n_test))

    def test_signal_support_beats_chance(self):
        centers, truth = two_center_collection(effect=6.0, seed=14)
        mean, _ = evaluate_prediction(centers, truth.true_support, n_splits=10, seed=3)
        assert mean > 0.8

    def test_deterministic(self):
        centers, truth = two_center_collection(seed=15)
        a = evaluate_prediction(centers, truth.true_support, n_splits=5, seed=4)
        b = evaluate_prediction(centers, truth.true_support, n_splits=5, seed=4)
        assert a == b

    def test_rejects_empty_support(self):
        centers, _ = two_center_collection()
        with pytest.raises(ValueError, match="nonempty"):
            evaluate_prediction(centers, SupportSet(np.empty(0, dtype=np.int64)))

    def test_rejects_bad_fraction(self):
        centers, truth = two_center_collection()
        with pytest.raises(ValueError, match="train_fraction"):
            evaluate_prediction(centers, truth.true_support, train_fraction=1.0)


class TestReports:
    def test_voxel_report_round_trip(self, tmp_path, rng):
        mask = VoxelMask.full_grid((3, 2, 2))
        scores = rng.uniform(size=mask.p)
        sup = SupportSet(np.array([0, 5]))
        path = tmp_path / "voxels.csv"
        write_voxel_report(path, mask, scores, sup)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == mask.p
        assert [r["selected"] for r in rows[:6]] == ["1", "0", "0", "0", "0", "1"]
        got = np.array([float(r["score"]) for r in rows])
        assert_array_equal(got, scores)
        assert [int(rows[5][k]) for k in ("x", "y", "z")] == [1, 0, 1]

    def test_overlap_csv(self, tmp_path):
        res = overlap(
            [SupportSet(np.array([1, 2])), SupportSet(np.array([2, 3]))], 1, p=5
        )
        path = tmp_path / "overlap.csv"
        write_overlap_csv(path, res)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows == [["S", "count"], ["1", "3"], ["2", "1"]]

    def test_score_slices(self, tmp_path):
        mask = VoxelMask.full_grid((2, 3, 2))
        scores = np.zeros(mask.p)
        scores[mask.index_grid()[1, 2, 0]] = 2.0  # brightest voxel
        scores[mask.index_grid()[0, 0, 1]] = 1.0
        paths = write_score_slices(tmp_path, mask, scores)
        assert len(paths) == 2
        with open(paths[0]) as f:
            header = [f.readline().strip() for _ in range(3)]
            body = [f.readline().split() for _ in range(2)]
        assert header == ["P2", "3 2", "255"]
        assert body[1][2] == "255"
        with open(paths[1]) as f:
            lines = f.read().split()
        assert "128" in lines  # half the peak score

    def test_all_zero_scores(self, tmp_path):
        mask = VoxelMask.full_grid((2, 2, 1))
        paths = write_score_slices(tmp_path, mask, np.zeros(mask.p))
        with open(paths[0]) as f:
            content = f.read().split()
        assert content[4:] == ["0"] * 4
