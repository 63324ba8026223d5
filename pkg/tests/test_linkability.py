"""Cross-template score collection and the global linkability measure."""

import itertools

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

from polyshield.embeddings import SyntheticSpec, generate_synthetic
from polyshield.linkability import (
    LinkabilityInput, LinkabilityResult, collect_link_scores, compare_policies, compute_d_sys, raw_link_scores,
)
from polyshield.params import ParamPolicy


def _data(S, dim=32, seed=0, samples=2):
    return generate_synthetic(SyntheticSpec(n_subjects=S, dim=dim, intra_class_noise=0.1, seed=seed,
                                            samples_per_subject=samples))


def analytic_d_sys(mu_m, sd_m, mu_n, sd_n, omega=1.0):
    def integrand(s):
        pm, pn = norm.pdf(s, mu_m, sd_m), norm.pdf(s, mu_n, sd_n)
        lr = pm / pn
        d = 2 * omega * lr / (1 + omega * lr) - 1 if lr > 1 else 0.0
        return min(max(d, 0.0), 1.0) * pm
    lo, hi = min(mu_m - 10 * sd_m, mu_n - 10 * sd_n), max(mu_m + 10 * sd_m, mu_n + 10 * sd_n)
    return quad(integrand, lo, hi, limit=400, points=[mu_m, mu_n])[0]


class TestCollectLinkScores:
    def test_two_by_two(self):
        scores = collect_link_scores(_data(2), ParamPolicy(seed=1), 2)
        assert scores.mated_scores.size == 2 and scores.non_mated_scores.size == 4

    def test_ten_templates(self):
        scores = collect_link_scores(_data(6), ParamPolicy(seed=1), 10)
        assert scores.mated_scores.size == 45 * 6
        assert scores.non_mated_scores.size == 15 * 100

    def test_counts_match_pair_enumeration(self, rng):
        for _ in range(5):
            S, t = int(rng.integers(2, 7)), int(rng.integers(2, 6))
            labels = [(s, j) for s in range(S) for j in range(t)]
            pairs = list(itertools.combinations(labels, 2))
            mated = sum(a[0] == b[0] for a, b in pairs)
            scores = collect_link_scores(_data(S, seed=S), ParamPolicy(o=3, seed=t), t)
            assert scores.mated_scores.size == mated
            assert scores.non_mated_scores.size == len(pairs) - mated

    def test_scores_are_template_cosines(self):
        from polyshield.params import template_sets
        from polyshield.transform import protect_values
        ds = _data(3)
        policy = ParamPolicy(o=2, seed=4)
        scores = collect_link_scores(ds, policy, 3)
        ids, refs = ds.references()
        sets = template_sets(dict(zip(ids, refs)), policy, 3)
        T = [[protect_values(v, p) for p in sets[s]] for s, v in zip(ids, refs)]
        cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        expected = sorted(cos(T[s][i], T[s][j]) for s in range(3) for i, j in itertools.combinations(range(3), 2))
        np.testing.assert_allclose(sorted(scores.mated_scores), expected, atol=1e-12)

    def test_one_subject_rejected(self):
        with pytest.raises(ValueError, match="2 subjects"):
            collect_link_scores(_data(2).subset(["s0"]), ParamPolicy(), 2)

    def test_raw_scores_counts(self):
        scores = raw_link_scores(_data(5, samples=2))
        assert scores.mated_scores.size == 5 and scores.non_mated_scores.size == 10 * 4


class TestComputeDSys:
    def test_identical_distributions(self):
        rng = np.random.default_rng(0)
        result = compute_d_sys(LinkabilityInput(rng.normal(0, 1, 10000), rng.normal(0, 1, 10000)))
        assert result.d_sys <= 0.05

    def test_disjoint_supports(self):
        rng = np.random.default_rng(1)
        result = compute_d_sys(LinkabilityInput(rng.uniform(0.8, 0.9, 2000), rng.uniform(-0.2, 0.1, 2000)))
        assert result.d_sys >= 0.95

    @pytest.mark.parametrize("mu_m,sd_m,mu_n,sd_n", [(0.6, 0.1, 0.2, 0.15), (0.3, 0.1, 0.2, 0.1), (0.5, 0.05, 0.0, 0.2)])
    def test_gaussian_analytic(self, mu_m, sd_m, mu_n, sd_n):
        rng = np.random.default_rng(2)
        data = LinkabilityInput(rng.normal(mu_m, sd_m, 20000), rng.normal(mu_n, sd_n, 20000))
        assert abs(compute_d_sys(data).d_sys - analytic_d_sys(mu_m, sd_m, mu_n, sd_n)) <= 0.02

    def test_omega_changes_measure(self):
        rng = np.random.default_rng(3)
        data = LinkabilityInput(rng.normal(0.4, 0.1, 5000), rng.normal(0.2, 0.1, 5000))
        assert compute_d_sys(data, omega=10).d_sys > compute_d_sys(data, omega=1).d_sys
        with pytest.raises(ValueError):
            compute_d_sys(data, omega=0)

    @pytest.mark.parametrize("transform", [lambda s: 3 * s + 1, lambda s: s ** 3 + s])
    def test_monotone_transform_invariance(self, transform):
        rng = np.random.default_rng(4)
        mated, non = rng.normal(0.5, 0.15, 5000), rng.normal(0.1, 0.2, 5000)
        base = compute_d_sys(LinkabilityInput(mated, non)).d_sys
        moved = compute_d_sys(LinkabilityInput(transform(mated), transform(non))).d_sys
        assert abs(base - moved) <= 0.02

    def test_ranges(self, rng):
        for _ in range(20):
            mated = rng.normal(rng.uniform(-1, 1), rng.uniform(0.01, 1), int(rng.integers(30, 500)))
            non = rng.normal(rng.uniform(-1, 1), rng.uniform(0.01, 1), int(rng.integers(30, 500)))
            result = compute_d_sys(LinkabilityInput(mated, non))
            assert 0 <= result.d_sys <= 1
            assert np.all((result.local_curve >= 0) & (result.local_curve <= 1))
            assert result.grid.size == 1000

    def test_histogram_fallback(self):
        result = compute_d_sys(LinkabilityInput(np.full(50, 0.9), np.linspace(-0.2, 0.2, 50)))
        assert result.method == "histogram"
        assert result.d_sys >= 0.95
        same = compute_d_sys(LinkabilityInput(np.full(50, 0.5), np.full(50, 0.5)))
        assert same.d_sys == 0.0

    def test_round_off_spread_is_degenerate(self):
        # noise-free raw samples give mated scores equal to 1 up to an ulp
        mated = 1.0 - np.array([0.0, 1.1e-16, 2.2e-16] * 10)
        result = compute_d_sys(LinkabilityInput(mated, np.linspace(-0.3, 0.3, 100)))
        assert result.method == "histogram" and result.d_sys >= 0.95

    def test_input_validation(self):
        with pytest.raises(ValueError):
            LinkabilityInput([], [0.1])
        with pytest.raises(ValueError):
            LinkabilityInput([0.1], [0.2], templates_per_subject=1)
        with pytest.raises(ValueError):
            LinkabilityInput([np.nan], [0.2])

    def test_result_invariant(self):
        with pytest.raises(AssertionError):
            LinkabilityResult(1.5, np.zeros(2), np.zeros(2))


class TestComparePolicies:
    def test_end_to_end_two_templates(self):
        ds = _data(12, dim=64)
        naive = ParamPolicy(seed=1)
        strict = ParamPolicy(seed=1, selection="strict", strict_score_range=(-1.0, 0.5))
        results = compare_policies(ds, naive, strict, templates_per_subject=2)
        assert set(results) == {"baseline", "naive", "strict"}
        assert all(0 <= r.d_sys <= 1 for r in results.values())
        assert results["naive"].counts == {"mated": 12, "non_mated": 66 * 4}

    def test_policy_kinds_checked(self):
        with pytest.raises(ValueError, match="naive and a strict"):
            compare_policies(_data(3), ParamPolicy(), ParamPolicy(), 2)
