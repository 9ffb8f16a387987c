import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskvar.corpus import TokenSequence
from maskvar.mapnet import propose, sample_positions
from maskvar.variance_lab import (
    DegenerateError,
    EnumerationCapError,
    VarianceReport,
    best_position_proposal,
    correlation_from_pairs,
    decompose,
    enumerate_masks,
    exact_variance_decomposition,
    gradient_table,
    importance_estimator_audit,
    loss_norm_correlation,
    mc_variance_decomposition,
    optimal_subset_proposal,
    proposal_variance,
    scalar_table,
    subset_probability,
)

from oracles import joint_variance, subset_probs_exact

# frozen from subset_probs_exact on Fractions
FROZEN_PAIRS = {
    (0, 1): Fraction(13, 35),
    (0, 2): Fraction(7, 30),
    (0, 3): Fraction(1, 9),
    (1, 2): Fraction(9, 56),
    (1, 3): Fraction(8, 105),
    (2, 3): Fraction(17, 360),
}


@pytest.fixture(scope="module")
def tables(lab_corpus, toy_params):
    return [gradient_table(toy_params, x, 2) for x in lab_corpus]


class TestEnumeration:
    def test_frozen_pairs(self):
        enum = enumerate_masks(4, 2, np.array([0.4, 0.3, 0.2, 0.1]))
        for s, p in zip(enum.subsets, enum.probs):
            assert p == pytest.approx(float(FROZEN_PAIRS[s]), abs=1e-15)
        assert enum.probs.sum() == pytest.approx(1.0, abs=1e-15)

    def test_oracle_agrees_on_fractions(self):
        exact = subset_probs_exact([Fraction(4, 10), Fraction(3, 10), Fraction(2, 10), Fraction(1, 10)], 2)
        assert {tuple(sorted(k)): v for k, v in exact.items()} == FROZEN_PAIRS

    def test_uniform(self):
        enum = enumerate_masks(6, 2)
        assert len(enum) == 15
        np.testing.assert_array_equal(enum.probs, 1 / 15)

    def test_sampler_frequencies(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        rng = np.random.default_rng(0)
        draws = 1_000_000
        # vectorized sequential draw: first pick, then pick among the rest
        first = rng.choice(4, size=draws, p=p)
        u = rng.random(draws)
        rest = np.tile(p, (draws, 1))
        rest[np.arange(draws), first] = 0.0
        cdf = np.cumsum(rest, axis=1)
        second = np.minimum((u[:, None] * cdf[:, -1:] >= cdf).sum(axis=1), 3)
        pair = np.sort(np.stack([first, second], axis=1), axis=1)
        for (a, b), q in FROZEN_PAIRS.items():
            count = int(np.sum((pair[:, 0] == a) & (pair[:, 1] == b)))
            q = float(q)
            assert abs(count - draws * q) <= 3 * math.sqrt(draws * q * (1 - q))

    def test_cap(self):
        with pytest.raises(EnumerationCapError, match="184756"):
            enumerate_masks(20, 10, cap=10_000)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            enumerate_masks(3, 4)

    def test_peaky_proposal_stays_finite(self):
        p = np.array([0.5, 0.5 - 2e-21, 1e-21, 1e-21])
        q = subset_probability(p, (0, 1))
        assert q == pytest.approx(1.0, abs=1e-12)
        assert 0 < subset_probability(p, (2, 3)) < 1e-40


class TestDecomposition:
    def test_identity(self, tables):
        rep = decompose([(t.base_probs, t.values) for t in tables])
        assert abs(rep.residual) <= 1e-10 * rep.total
        assert rep.mask_term >= 0 and rep.sentence_term >= 0

    def test_matches_joint_oracle(self, tables):
        groups = [(t.base_probs, t.values) for t in tables]
        rep = decompose(groups)
        total, within, between = joint_variance(groups)
        assert rep.total == pytest.approx(total, rel=1e-10)
        assert rep.mask_term == pytest.approx(within, rel=1e-10)
        assert rep.sentence_term == pytest.approx(between, rel=1e-10, abs=1e-10 * total)

    def test_single_sentence_has_no_sentence_term(self, tables):
        rep = decompose([(tables[0].base_probs, tables[0].values)])
        assert rep.sentence_term == 0.0

    def test_k_equals_n_has_no_mask_term(self, toy_params):
        x = TokenSequence(np.array([5, 9, 23]))
        rep = exact_variance_decomposition([x], toy_params, 3)
        assert rep.mask_term == pytest.approx(0.0, abs=1e-20)

    def test_empty(self):
        with pytest.raises(ValueError):
            decompose([])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_random_groups(self, seed):
        rng = np.random.default_rng(seed)
        groups = [(rng.dirichlet(np.ones(5)), rng.normal(size=(5, 3))) for _ in range(4)]
        rep = decompose(groups)
        total, within, between = joint_variance(groups)
        assert abs(rep.residual) <= 1e-10 * rep.total
        assert rep.total == pytest.approx(total, rel=1e-9)
        assert rep.mask_term == pytest.approx(within, rel=1e-9)

    def test_report_json(self, lab_corpus, toy_params, tables):
        rep = exact_variance_decomposition(lab_corpus, toy_params, 2, tables=tables)
        d = rep.to_dict()
        assert "mask_term_stderr" not in d and d["summary"].startswith("trace")
        assert isinstance(rep, VarianceReport)


class TestUnbiasedness:
    @pytest.mark.parametrize("seed", range(5))
    def test_exact_ratio_is_unbiased(self, tables, seed):
        p = np.random.default_rng(seed).dirichlet(np.ones(6))
        assert importance_estimator_audit(tables[seed % 3], proposal=p).deviation <= 1e-10

    def test_uniform_proposal_is_identity(self, tables):
        assert importance_estimator_audit(tables[0], proposal=np.full(6, 1 / 6)).deviation <= 1e-12

    def test_clipping_introduces_bias(self, tables):
        p = np.array([0.5, 0.2, 0.1, 0.1, 0.05, 0.05])
        assert importance_estimator_audit(tables[0], proposal=p, clip_eps=0.2).deviation > 1e-3

    def test_zero_probability_rejected(self, tables):
        with pytest.raises(ValueError):
            importance_estimator_audit(tables[0], subset_probs=np.r_[np.zeros(1), np.full(14, 1 / 14)])


class TestOptimality:
    def test_beats_dirichlet_and_random_search(self, tables):
        t = tables[1]
        opt = proposal_variance(t, subset_probs=optimal_subset_proposal(t))
        assert opt <= proposal_variance(t) + 1e-8
        rng = np.random.default_rng(3)
        for _ in range(200):
            q = rng.dirichlet(np.full(t.size, 0.5)) + 1e-12
            assert opt <= proposal_variance(t, subset_probs=q / q.sum()) + 1e-8

    def test_two_subset_norms(self):
        t = scalar_table(2, 1, np.array([[3.0, 0.0], [0.0, 4.0]]))
        np.testing.assert_allclose(optimal_subset_proposal(t), [3 / 7, 4 / 7], rtol=0, atol=1e-15)

    def test_scalar_positive_values_give_zero_variance(self):
        vals = np.random.default_rng(4).uniform(0.1, 5.0, size=15)
        t = scalar_table(6, 2, vals)
        assert proposal_variance(t, subset_probs=optimal_subset_proposal(t)) <= 1e-20

    def test_all_zero_is_degenerate(self):
        with pytest.raises(DegenerateError):
            optimal_subset_proposal(scalar_table(4, 2, np.zeros(6)))

    def test_best_position_between_uniform_and_optimum(self, tables):
        t = tables[0]
        p, var = best_position_proposal(t)
        assert p.min() > 0 and p.sum() == pytest.approx(1.0, abs=1e-12)
        assert var <= proposal_variance(t) + 1e-8
        assert var >= proposal_variance(t, subset_probs=optimal_subset_proposal(t)) - 1e-8
        assert var == pytest.approx(proposal_variance(t, proposal=p), rel=1e-9)


class TestCorrelation:
    def test_perfect(self):
        x = np.arange(40.0)
        r = correlation_from_pairs(x, 2 * x + 1)
        assert r.pearson == pytest.approx(1.0) and r.spearman == pytest.approx(1.0)

    def test_constant_is_degenerate(self):
        with pytest.raises(DegenerateError):
            correlation_from_pairs(np.ones(40), np.arange(40.0))

    def test_too_few(self):
        with pytest.raises(ValueError):
            correlation_from_pairs(np.arange(5.0), np.arange(5.0))

    def test_pairs_counted(self, toy_params, lab_corpus):
        r = loss_norm_correlation(lab_corpus, toy_params, min_pairs=18)
        assert r.n_pairs == 18 and -1 <= r.pearson <= 1


class TestMonteCarlo:
    def test_converges_to_exact(self, lab_corpus, toy_params, tables):
        exact = exact_variance_decomposition(lab_corpus, toy_params, 2, tables=tables)
        mc = mc_variance_decomposition(lab_corpus, toy_params, 2, None, 200, np.random.default_rng(0))
        assert abs(mc.mask_term - exact.mask_term) <= 4 * mc.mask_term_stderr
        assert abs(mc.residual) <= 1e-9 * abs(mc.total)

    def test_proposal_converges_to_exact(self, lab_corpus, toy_params, toy_mapnet, tables):
        prop = lambda x: propose(toy_mapnet, x)  # noqa: E731
        exact = exact_variance_decomposition(lab_corpus, toy_params, 2, prop, tables=tables)
        mc = mc_variance_decomposition(lab_corpus, toy_params, 2, prop, 200, np.random.default_rng(1))
        assert abs(mc.mask_term - exact.mask_term) <= 4 * mc.mask_term_stderr
        assert mc.meta["ratio_mean"] == pytest.approx(1.0, abs=0.2)

    def test_two_samples(self, lab_corpus, toy_params):
        mc = mc_variance_decomposition(lab_corpus, toy_params, 2, None, 2, np.random.default_rng(0))
        assert mc.mask_term_stderr is None and math.isfinite(mc.mask_term)

    def test_one_sample_rejected(self, lab_corpus, toy_params):
        with pytest.raises(ValueError):
            mc_variance_decomposition(lab_corpus, toy_params, 2, None, 1, np.random.default_rng(0))

    def test_deterministic(self, lab_corpus, toy_params):
        a = mc_variance_decomposition(lab_corpus, toy_params, 2, None, 6, np.random.default_rng(5))
        b = mc_variance_decomposition(lab_corpus, toy_params, 2, None, 6, np.random.default_rng(5))
        assert a.to_json() == b.to_json()


def test_sample_positions_consistent_with_enumeration():
    p = np.array([0.4, 0.3, 0.2, 0.1])
    rng = np.random.default_rng(8)
    counts = {}
    for _ in range(20_000):
        s = tuple(sorted(int(i) for i in sample_positions(p, 2, rng)[0]))
        counts[s] = counts.get(s, 0) + 1
    for s, q in FROZEN_PAIRS.items():
        q = float(q)
        assert abs(counts[s] - 20_000 * q) <= 3 * math.sqrt(20_000 * q * (1 - q))
