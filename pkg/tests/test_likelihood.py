"""Surrogate likelihood: constants, term decomposition, bounds, histogram."""

import numpy as np
import pytest

from entrogan import coupling, gaussian, likelihood
from entrogan.ot import SampleBatch
from helpers import AffineModel, bound_identity_parts, exact_model_1d

LOG_2PI = np.log(2.0 * np.pi)


def test_constant_frozen_paper_value():
    # d=2, r=2, m=100, lam=0.1: high-precision evaluation of the formula
    got = likelihood.corollary1_constant(2, 2, 100, 0.1, "paper")
    assert got == pytest.approx(-6.0594, abs=1e-3)


def test_constant_paper_formula_symbolic():
    d, r, m, lam = 3, 4, 7, 0.25
    want = -np.log(m) - 0.5 * d * np.log(2 * np.pi * lam) - 0.5 * r \
        - 0.5 * LOG_2PI
    assert likelihood.corollary1_constant(d, r, m, lam, "paper") == \
        pytest.approx(want, rel=1e-15)


def test_constant_d_term_vanishes_at_inverse_2pi():
    lam = 1.0 / (2.0 * np.pi)
    got = likelihood.corollary1_constant(5, 3, 11, lam, "paper")
    want = -np.log(11) - 1.5 - 0.5 * LOG_2PI
    assert got == pytest.approx(want, abs=1e-14)


def test_constant_modes_agree_only_at_r1():
    assert likelihood.corollary1_constant(2, 1, 5, 0.3, "paper") == \
        likelihood.corollary1_constant(2, 1, 5, 0.3, "dimensional")
    diff = likelihood.corollary1_constant(2, 3, 5, 0.3, "paper") \
        - likelihood.corollary1_constant(2, 3, 5, 0.3, "dimensional")
    assert diff == pytest.approx(0.5 * 2 * LOG_2PI, rel=1e-14)


def test_constant_rejects_bad_args():
    with pytest.raises(ValueError):
        likelihood.corollary1_constant(0, 1, 1, 0.1)
    with pytest.raises(ValueError):
        likelihood.corollary1_constant(1, 1, 1, 0.1, "other")


def test_report_decomposition_identity():
    model = exact_model_1d(1.4, 0.2)
    rep = likelihood.surrogate_log_likelihood(
        np.array([0.8]), model, 500, 3, weight_mode="algorithm1",
        entropy_mode="algorithm1", constant_mode="paper")
    parts = rep.cost + rep.entropy + rep.prior + rep.constant
    assert abs(parts - rep.total) <= 1e-12 * max(1.0, abs(rep.total))
    assert np.isfinite(rep.standard_error) and rep.n == 500


def test_report_rejects_inconsistent_total():
    with pytest.raises(ValueError, match="sum"):
        likelihood.SurrogateLikelihoodReport(
            cost=-1.0, entropy=0.5, prior=-0.2, constant=0.0, total=0.0,
            standard_error=0.1, n=10, weight_mode="snis",
            entropy_mode="differential", constant_mode=None)


def test_flat_model_differential_terms():
    # G = 0, critics zero, lam = 1, y = 0: the posterior is the prior, so
    # entropy -> (r/2)(1 + log 2pi), prior -> -r/2, cost = 0 exactly, and
    # the total collapses deterministically to (r/2) log 2pi
    model = AffineModel(np.zeros((2, 2)), 1.0)
    rep = likelihood.surrogate_log_likelihood(
        np.zeros(2), model, 10_000, 3, weight_mode="snis",
        entropy_mode="differential", constant_mode=None)
    assert rep.cost == 0.0
    assert rep.entropy == pytest.approx(1.0 + LOG_2PI, abs=0.05)
    assert rep.prior == pytest.approx(-1.0, abs=0.05)
    assert rep.total == pytest.approx(LOG_2PI, abs=1e-9)


def test_exact_potentials_reach_exact_likelihood_up_to_constant():
    # with the optimal dual pair the KL gap vanishes; adding the continuous
    # normalizing constant by hand recovers the marginal log-density
    g, lam, y = 2.0, 0.1, 1.7
    model = exact_model_1d(g, lam)
    oracle = gaussian.LinearGaussianOracle(np.array([[g]]), lam)
    rep = likelihood.surrogate_log_likelihood(
        np.array([y]), model, 10_000, 7, weight_mode="snis",
        entropy_mode="differential", constant_mode=None)
    ident = rep.total - 0.5 * np.log(2 * np.pi * lam) - 0.5 * LOG_2PI
    exact = gaussian.exact_log_likelihood(oracle, np.array([y]))
    assert abs(ident - exact) <= 3.0 * max(rep.standard_error, 1e-12)


def test_identity_constant_frozen_value():
    # -(d/2) log(2 pi lam) - (r/2) log(2 pi) at d=2, r=3, lam=0.1
    assert likelihood.bound_identity_constant(2, 3, 0.1) == \
        pytest.approx(-2.292107573029318, abs=1e-12)


def test_identity_constant_rejects_bad_args():
    for bad in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, 0.0), (1, 1, -2.0)):
        with pytest.raises(ValueError):
            likelihood.bound_identity_constant(*bad)


def test_identity_mode_recovers_exact_likelihood_1d():
    # optimal potentials make the variational posterior the Bayes posterior;
    # with the per-sample constant the total must land on the marginal
    # log-density itself, not merely below it
    g, lam, y = 2.0, 0.1, 1.7
    model = exact_model_1d(g, lam)
    oracle = gaussian.LinearGaussianOracle(np.array([[g]]), lam)
    rep = likelihood.surrogate_log_likelihood(
        np.array([y]), model, 10_000, 7, weight_mode="snis",
        entropy_mode="differential", constant_mode="identity")
    exact = gaussian.exact_log_likelihood(oracle, np.array([y]))
    assert abs(rep.total - exact) <= 3.0 * max(rep.standard_error, 1e-12)


def test_identity_mode_recovers_exact_likelihood_diagonal_2d():
    # independent coordinates factorize, so the optimal dual pair is the
    # per-coordinate 1-D solution summed; r=2 also separates the identity
    # constant's (r/2) log 2pi tail from the flat one
    gs, lam = np.array([1.5, 0.6]), 0.2
    shift = float(np.sum(0.5 * lam * np.log((gs * gs + lam) / lam)))

    def d1(ys):
        return np.sum(lam * ys * ys / (2.0 * (gs * gs + lam)), axis=1) + shift

    model = AffineModel(np.diag(gs), lam, d1=d1)
    oracle = gaussian.LinearGaussianOracle(np.diag(gs), lam)
    y = np.array([1.1, -0.4])
    rep = likelihood.surrogate_log_likelihood(
        y, model, 20_000, 13, weight_mode="snis",
        entropy_mode="differential", constant_mode="identity")
    exact = gaussian.exact_log_likelihood(oracle, y)
    assert abs(rep.total - exact) <= 3.0 * max(rep.standard_error, 1e-12)


def test_flat_model_identity_mode_exact_total():
    # G = 0, critics zero: uniform weights cancel the Monte-Carlo noise
    # between entropy and prior, leaving exactly the N(0, lam I) density
    lam = 0.7
    model = AffineModel(np.zeros((2, 2)), lam)
    rep = likelihood.surrogate_log_likelihood(
        np.zeros(2), model, 4_000, 5, weight_mode="snis",
        entropy_mode="differential", constant_mode="identity")
    assert rep.total == pytest.approx(-np.log(2 * np.pi * lam), abs=1e-9)


def test_lower_bound_with_constants_on():
    g, lam, y = 2.0, 0.1, 1.7
    exact = gaussian.exact_log_likelihood(
        gaussian.LinearGaussianOracle(np.array([[g]]), lam), np.array([y]))
    for model in (exact_model_1d(g, lam), AffineModel([[g]], lam)):
        rep = likelihood.surrogate_log_likelihood(
            np.array([y]), model, 10_000, 11, weight_mode="snis",
            entropy_mode="differential", constant_mode="paper")
        assert rep.total <= exact + 3.0 * rep.standard_error
    # zero critics leave a strictly positive KL gap on top of the constant
    rep0 = likelihood.surrogate_log_likelihood(
        np.array([y]), AffineModel([[g]], lam), 10_000, 11,
        weight_mode="snis", entropy_mode="differential",
        constant_mode="paper")
    assert rep0.total < exact


def test_bound_identity_by_quadrature():
    parts = bound_identity_parts(2.0, 0.1, 1.3)
    assert parts["residual"] <= 1e-3
    assert abs(parts["kl"]) < 1e-9


def test_bound_identity_survives_detuned_critic():
    parts = bound_identity_parts(2.0, 0.1, 1.3, d2_coeff=0.015)
    assert parts["residual"] <= 1e-3
    assert parts["kl"] > 1e-3


def test_shift_invariance_of_translated_problem():
    g, lam = 1.3, 0.2
    shift = np.array([2.4])
    base = exact_model_1d(g, lam)
    moved = AffineModel([[g]], lam, gen_offset=shift, train_size=1)
    inner = base._d1
    moved._d1 = lambda ys: inner(ys - shift)
    y = np.array([0.9])
    for entropy_mode in likelihood.ENTROPY_MODES:
        a = likelihood.surrogate_log_likelihood(
            y, base, 400, 5, weight_mode="snis", entropy_mode=entropy_mode,
            constant_mode=None)
        b = likelihood.surrogate_log_likelihood(
            y + shift, moved, 400, 5, weight_mode="snis",
            entropy_mode=entropy_mode, constant_mode=None)
        assert b.cost == pytest.approx(a.cost, abs=1e-10)
        assert b.total == pytest.approx(a.total, abs=1e-10)


def test_impulse_posterior_has_zero_entropy_term():
    model = exact_model_1d(1.0, 0.3)
    _, impulse = coupling.nearest_latent_coupling([0.5], model, 20, seed=2)
    rep = likelihood.report_from_posterior(impulse, model, "algorithm1",
                                           None)
    assert rep.entropy == 0.0


def test_average_bound_single_sample():
    model = exact_model_1d(1.0, 0.2)
    data = SampleBatch(np.array([[1.7]]))
    avg = likelihood.theorem1_average_bound(data, model, 200, 3,
                                            constant_mode="paper")
    single = likelihood.surrogate_log_likelihood(
        np.array([1.7]), model, 200, 3, constant_mode="paper").total
    assert avg == single


def test_average_bound_concatenation_linearity():
    model = exact_model_1d(1.0, 0.2)
    rng = np.random.default_rng(0)
    a = SampleBatch(rng.normal(size=(3, 1)))
    b = SampleBatch(rng.normal(size=(3, 1)))
    both = SampleBatch(np.vstack([a.points, b.points]))
    avg_a = likelihood.theorem1_average_bound(a, model, 100, 5,
                                              constant_mode="paper")
    avg_b = likelihood.theorem1_average_bound(b, model, 100, 8,
                                              constant_mode="paper")
    avg_all = likelihood.theorem1_average_bound(both, model, 100, 5,
                                                constant_mode="paper")
    assert avg_all == pytest.approx((avg_a + avg_b) / 2.0, rel=1e-14)


def test_average_bound_below_exact_mean():
    g, lam = 1.5, 0.2
    oracle = gaussian.LinearGaussianOracle(np.array([[g]]), lam)
    data = gaussian.sample_data(oracle, 6, seed=4)
    model = exact_model_1d(g, lam)
    avg = likelihood.theorem1_average_bound(
        data, model, 4000, 9, weight_mode="snis",
        entropy_mode="differential", constant_mode="paper")
    exact_mean = float(np.mean(gaussian.exact_log_likelihood_batch(
        oracle, data.points)))
    # constants-on bound sits below exact by at least the -r/2 - log m slack
    assert avg <= exact_mean


def test_histogram_counts_sum_to_samples():
    model = exact_model_1d(1.0, 0.3)
    data = SampleBatch(np.random.default_rng(2).normal(size=(12, 1)))
    rows = likelihood.likelihood_histogram(
        data, model, bins=6, hist_range=(-40.0, 10.0), n=100, seed=3,
        constant_mode="paper")
    assert len(rows) == 6
    assert sum(r[2] for r in rows) == 12
    assert all(lo < hi for lo, hi, _ in rows)


def test_histogram_identical_samples_single_bin():
    model = exact_model_1d(2.0, 0.1)
    data = SampleBatch(np.full((5, 1), 1.7))
    rows = likelihood.likelihood_histogram(
        data, model, bins=2, hist_range=(-10.0, 0.0), n=500, seed=11,
        weight_mode="snis", entropy_mode="differential",
        constant_mode="paper")
    occupied = [r for r in rows if r[2] > 0]
    assert len(occupied) == 1 and occupied[0][2] == 5


def test_surrogate_rejects_bad_args():
    model = exact_model_1d(1.0, 0.1)
    with pytest.raises(ValueError, match="n >= 2"):
        likelihood.surrogate_log_likelihood(np.array([0.0]), model, 1, 0,
                                            constant_mode=None)
    with pytest.raises(ValueError, match="entropy mode"):
        likelihood.surrogate_log_likelihood(np.array([0.0]), model, 10, 0,
                                            entropy_mode="bogus",
                                            constant_mode=None)
    with pytest.raises(ValueError, match="bins"):
        likelihood.likelihood_histogram(
            SampleBatch(np.ones((2, 1))), model, 0, None, 10, 0,
            constant_mode=None)
