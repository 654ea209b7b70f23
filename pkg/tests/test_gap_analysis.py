import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gapped_st.gap_analysis import (
    GapError,
    GapReport,
    gap_closed_form,
    gap_logistic_form,
    gap_monte_carlo,
    rejection_gap_reference,
    selected_probability,
)
from gapped_st.samplers import RngStream, sample_gumbel

TWO_LN_TWO = 2.0 * math.log(2.0)


def pair_logits(diff):
    """Two categories with l_0 - s = diff (s is just the other logit, 0)."""
    return np.asarray([diff, 0.0])


# --- closed form ---------------------------------------------------------------


def test_symmetric_two_category_gap_is_two_log_two():
    assert abs(gap_closed_form(np.zeros(2), 0) - TWO_LN_TWO) < 1e-14


def test_gap_approaches_one_for_a_dominated_logit():
    assert abs(gap_closed_form(pair_logits(-20.0), 0) - 1.0) < 1e-6


def test_gap_approaches_the_logit_difference_for_a_dominant_logit():
    gap = gap_closed_form(pair_logits(20.0), 0)
    assert abs(gap - 20.0) / 20.0 < 1e-6


def test_gap_returns_the_limit_for_vanishing_probability():
    # p_i below 1e-12: closed form returns the analytic limit 1 exactly
    assert gap_closed_form(pair_logits(-30.0), 0) == 1.0


def test_gap_rejects_single_category_and_saturated_probability():
    with pytest.raises(GapError):
        gap_closed_form(np.asarray([1.0]), 0)
    with pytest.raises(GapError):
        gap_closed_form(pair_logits(50.0), 0)  # p_i rounds to exactly 1
    with pytest.raises(GapError):
        gap_logistic_form(pair_logits(50.0), 0)
    with pytest.raises(GapError):
        gap_closed_form(np.zeros(3), 7)


# --- logistic route -------------------------------------------------------------


def test_logistic_form_symmetric_case():
    assert abs(gap_logistic_form(np.zeros(2), 0) - TWO_LN_TWO) < 1e-14


@pytest.mark.parametrize("n", [2, 5, 50])
def test_logistic_form_equals_closed_form(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(100):
        logits = rng.uniform(-3, 3, size=n)
        index = int(rng.integers(n))
        a = gap_closed_form(logits, index)
        b = gap_logistic_form(logits, index)
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)


def test_gap_is_monotone_in_the_logit_difference():
    diffs = np.linspace(-10.0, 10.0, 100)
    gaps = [gap_closed_form(pair_logits(d), 0) for d in diffs]
    assert np.all(np.diff(gaps) > 0.0)


@settings(max_examples=80, deadline=None)
@given(
    st.integers(min_value=2, max_value=12),
    st.integers(min_value=0, max_value=2**32 - 1),
    st.floats(min_value=-50.0, max_value=50.0),
)
def test_gap_lower_bound_and_shift_invariance(n, seed, shift):
    logits = np.random.default_rng(seed).uniform(-3, 3, size=n)
    index = int(np.random.default_rng(seed + 1).integers(n))
    gap = gap_closed_form(logits, index)
    assert gap >= 1.0
    shifted = gap_closed_form(logits + shift, index)
    assert abs(shifted - gap) <= 1e-9 * max(gap, 1.0)


def test_selected_probability_is_a_probability():
    logits = np.asarray([0.1, -2.0, 3.0])
    p = [selected_probability(logits, i) for i in range(3)]
    assert abs(sum(p) - 1.0) < 1e-12
    assert all(0.0 < q < 1.0 for q in p)


# --- monte carlo ------------------------------------------------------------------


def test_mc_agrees_with_the_closed_form_symmetric_case():
    report = gap_monte_carlo(np.zeros(2), 0, RngStream(200), 1_000_000)
    assert abs(report.mc_gap - TWO_LN_TWO) < 3.0 * report.mc_stderr
    assert report.agrees()


def test_mc_agrees_on_a_dominant_logit():
    logits = np.asarray([0.0, 3.0])
    report = gap_monte_carlo(logits, 1, RngStream(201), 1_000_000)
    assert report.agrees()


def test_rejection_and_conditional_paths_agree():
    logits = np.asarray([0.4, -0.3, 0.9])
    cond = gap_monte_carlo(logits, 2, RngStream(202), 200_000, method="conditional")
    rej = rejection_gap_reference(logits, 2, RngStream(203), 200_000)
    combined = math.hypot(cond.mc_stderr, rej.mc_stderr)
    assert abs(cond.mc_gap - rej.mc_gap) < 3.0 * combined


def test_mc_randomized_agreement_suite():
    rng = np.random.default_rng(42)
    stream = RngStream(204)
    for case in range(20):
        n = (2, 5, 10, 50)[case % 4]
        logits = rng.uniform(-3, 3, size=n)
        index = int(rng.integers(n))
        report = gap_monte_carlo(logits, index, stream, 200_000)
        assert report.agrees(), f"case {case}: z={report.z_score:.2f}"


def test_mc_rejects_tiny_sample_budget():
    with pytest.raises(GapError):
        gap_monte_carlo(np.zeros(2), 0, RngStream(0), 10)


def test_rejection_errors_when_too_few_draws_accepted():
    logits = np.asarray([12.0, 0.0])  # p_1 ~ 6e-6: ~6 accepted per 1e6
    with pytest.raises(GapError, match="rejection"):
        gap_monte_carlo(logits, 1, RngStream(205), 100_000, method="rejection")


def test_gumbel_difference_is_logistic():
    # difference of two independent Gumbel(0,1) draws follows Logistic(0,1)
    g = sample_gumbel(RngStream(206), (200_000, 2))
    assert stats.kstest(g[:, 0] - g[:, 1], "logistic").pvalue > 0.01


def test_report_validation():
    with pytest.raises(GapError):
        GapReport(
            analytic_gap=0.5, mc_gap=0.5, mc_stderr=0.1, n_samples=1000,
            conditioning_index=0, logits=np.zeros(2),
        )
    with pytest.raises(GapError):
        GapReport(
            analytic_gap=1.5, mc_gap=1.5, mc_stderr=0.0, n_samples=1000,
            conditioning_index=0, logits=np.zeros(2),
        )
