import itertools
import math
import warnings

import numpy as np
import pytest

from conftest import make_params
from fogfilter.generative import EpochRecord, GameTrace, GenConfig, generate_dataset
from fogfilter.model import ObsRegressionCoeffs, StrategyParams, betabin_logpmf, zip_pmf
from fogfilter.training import (
    LAMBDA_GUARD,
    NU_GUARD,
    DegenerateDesignWarning,
    EMConfig,
    LossRateStats,
    ObsFitConfig,
    TrainingError,
    betabin_regression_grad,
    betabin_regression_nll,
    em_fit,
    estimate_loss_rates,
    fit_model,
    fit_observation_model,
    forward_backward,
    heldout_loglik,
    sequence_loglik,
    smoothed_loss_rates,
)


def _strategy(eta, pi, nu, lam):
    return StrategyParams(eta=eta, pi=pi, nu=nu, lam=lam)


def brute_force_loglik(P, strat):
    """Sum over every state path with scalar loops."""
    T, N = P.shape
    M = strat.n_states
    total = 0.0
    for path in itertools.product(range(M), repeat=T):
        p = strat.eta[path[0]]
        for t in range(1, T):
            p *= strat.pi[path[t - 1], path[t]]
        for t, s in enumerate(path):
            for i in range(N):
                p *= zip_pmf(int(P[t, i]), strat.nu[s, i], strat.lam[s, i])
        total += p
    return math.log(total)


def _production_games(strat, n_games, T, seed):
    p = make_params(strat.eta, strat.pi, strat.nu, strat.lam)
    return generate_dataset(p, GenConfig(T=T, kill_rate=0.0, seed=seed), n_games)


class TestForwardBackward:
    def test_single_state(self):
        strat = _strategy([1.0], [[1.0]], [[0.4, 0.7]], [[1.5, 0.3]])
        P = np.array([[0, 2], [3, 1], [1, 0]])
        gamma, xi, ll = forward_backward(P, strat)
        np.testing.assert_array_equal(gamma, np.ones((3, 1)))
        direct = sum(math.log(zip_pmf(int(P[t, i]), strat.nu[0, i], strat.lam[0, i]))
                     for t in range(3) for i in range(2))
        assert ll == pytest.approx(direct, abs=1e-12)

    def test_matches_path_enumeration(self):
        strat = _strategy([0.3, 0.7], [[0.8, 0.2], [0.35, 0.65]], [[0.2, 0.9], [0.7, 0.4]],
                          [[0.5, 3.0], [2.0, 0.1]])
        P = np.array([[0, 2], [1, 4], [3, 0]])
        _, _, ll = forward_backward(P, strat)
        assert abs(ll - brute_force_loglik(P, strat)) < 1e-10

    def test_longer_sequence_matches_enumeration(self):
        rng = np.random.default_rng(7)
        strat = _strategy(rng.dirichlet([1, 1, 1]), rng.dirichlet([1, 1, 1], size=3),
                          rng.uniform(0.1, 0.9, (3, 2)), rng.uniform(0, 3, (3, 2)))
        P = rng.integers(0, 4, size=(6, 2))
        assert abs(forward_backward(P, strat)[2] - brute_force_loglik(P, strat)) < 1e-10

    def test_symmetric_emissions_give_uniform_posteriors(self):
        strat = _strategy([0.5, 0.5], np.full((2, 2), 0.5), [[0.3], [0.3]], [[1.0], [1.0]])
        gamma, _, _ = forward_backward(np.array([[0], [2], [5], [1]]), strat)
        np.testing.assert_allclose(gamma, 0.5, atol=1e-12)

    def test_gamma_xi_consistency(self):
        rng = np.random.default_rng(3)
        strat = _strategy(rng.dirichlet([1, 1, 1]), rng.dirichlet([1, 1, 1], size=3),
                          rng.uniform(0.1, 0.9, (3, 3)), rng.uniform(0, 3, (3, 3)))
        P = rng.integers(0, 4, size=(9, 3))
        gamma, xi, _ = forward_backward(P, strat)
        np.testing.assert_allclose(gamma.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(xi.sum(axis=2), gamma[:-1], atol=1e-9)
        np.testing.assert_allclose(xi.sum(axis=1), gamma[1:], atol=1e-9)


class TestEM:
    def test_loglik_non_decreasing(self):
        strat = _strategy([0.5, 0.5], [[0.9, 0.1], [0.2, 0.8]], [[0.2, 0.8], [0.9, 0.1]],
                          [[0.5, 2.0], [3.0, 0.2]])
        games = _production_games(strat, 60, 10, seed=1)
        _, report = em_fit(games, EMConfig(M=3, max_iters=80, restarts=2, loglik_tol=0.0),
                           np.random.default_rng(0))
        h = np.array(report.loglik_history)
        assert np.all(np.diff(h) >= -1e-8)
        assert len(report.restart_logliks) == 2
        assert h[-1] == pytest.approx(max(report.restart_logliks))

    def test_single_state_recovery(self):
        strat = _strategy([1.0], [[1.0]], [[0.5]], [[2.0]])
        games = _production_games(strat, 500, 13, seed=2)
        fit, _ = em_fit(games, EMConfig(M=1, restarts=1), np.random.default_rng(0))
        assert abs(fit.nu[0, 0] - 0.5) < 0.03
        assert abs(fit.lam[0, 0] - 2.0) < 0.1

    def test_all_zero_production(self):
        data = [np.zeros((13, 2), dtype=int) for _ in range(10)]
        fit, _ = em_fit(data, EMConfig(M=1, restarts=1), np.random.default_rng(0))
        assert np.all(fit.nu <= NU_GUARD)
        np.testing.assert_array_equal(fit.lam, LAMBDA_GUARD)

    def test_vanishing_positive_mass_stays_monotone(self):
        # one type is produced in state 0 only, and rarely; its mass in state 1 decays to ~0
        strat = _strategy([0.5, 0.5], [[0.9, 0.1], [0.1, 0.9]], [[0.3, 0.02], [0.7, 0.0]],
                          [[1.0, 0.5], [2.0, 1.0]])
        games = _production_games(strat, 40, 13, seed=7)
        fit, report = em_fit(games, EMConfig(M=2, max_iters=100, loglik_tol=0.0, restarts=1),
                             np.random.default_rng(1))
        assert np.all(np.diff(report.loglik_history) >= -1e-8)
        assert np.all(fit.nu >= NU_GUARD)

    def test_estimates_in_range(self):
        rng = np.random.default_rng(5)
        data = [rng.integers(0, 6, size=(8, 3)) for _ in range(20)]
        fit, _ = em_fit(data, EMConfig(M=4, restarts=1, max_iters=30), rng)
        assert np.all((fit.nu >= 0) & (fit.nu <= 1)) and np.all(fit.lam >= 0)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        data = [rng.integers(0, 4, size=(6, 2)) for _ in range(15)]
        a, ra = em_fit(data, EMConfig(M=2, restarts=2, max_iters=40, seed=4))
        b, rb = em_fit(data, EMConfig(M=2, restarts=2, max_iters=40, seed=4))
        np.testing.assert_array_equal(a.pi, b.pi)
        assert ra.loglik_history == rb.loglik_history

    def test_errors(self):
        with pytest.raises(TrainingError):
            em_fit([], EMConfig(M=1))
        with pytest.raises(TrainingError):
            EMConfig(M=0)


class TestHeldout:
    def test_empty(self):
        with pytest.raises(TrainingError):
            heldout_loglik([], _strategy([1.0], [[1.0]], [[0.5]], [[1.0]]))

    def test_matched_model_does_not_overfit(self):
        strat = _strategy([1.0], [[1.0]], [[0.6, 0.3]], [[1.0, 2.5]])
        train = _production_games(strat, 300, 13, seed=10)
        test = _production_games(strat, 300, 13, seed=11)
        fit, _ = em_fit(train, EMConfig(M=1, restarts=1), np.random.default_rng(0))
        tr = sequence_loglik(train, fit)
        te = heldout_loglik(test, fit)
        se = tr.std(ddof=1) / math.sqrt(tr.size)
        assert abs(te - tr.mean()) < 2 * se * math.sqrt(2)

    def test_more_states_beat_one(self):
        strat = _strategy([0.5, 0.5], [[0.85, 0.15], [0.15, 0.85]], [[0.9, 0.05], [0.05, 0.9]],
                          [[2.0, 0.2], [0.2, 2.0]])
        train = _production_games(strat, 300, 13, seed=12)
        test = _production_games(strat, 200, 13, seed=13)
        scores = {}
        for M in (1, 2, 3):
            fit, _ = em_fit(train, EMConfig(M=M, restarts=3), np.random.default_rng(M))
            scores[M] = heldout_loglik(test, fit)
        assert scores[2] > scores[1] and scores[3] > scores[1]


def _loss_game(U_series, P_series, L_series=None, K_series=None):
    T = len(U_series)
    eps = []
    for t in range(T):
        eps.append(EpochRecord(t + 1, [P_series[t]], [0 if K_series is None else K_series[t]],
                               [0], 0.0, [U_series[t]],
                               None if L_series is None else [L_series[t]]))
    return GameTrace("g", eps)


class TestLossRates:
    def test_formula_no_losses(self):
        rates, fb = smoothed_loss_rates(LossRateStats(np.array([0, 5]), np.array([100, 400])))
        assert rates[0] == pytest.approx(1 / 102)
        assert rates[0] == pytest.approx(0.009804, abs=1e-6)
        assert not fb.any()

    def test_formula_with_losses(self):
        rates, _ = smoothed_loss_rates(LossRateStats(np.array([3]), np.array([997])))
        assert rates[0] == 4 / 999

    def test_absent_type_uses_median(self):
        stats = LossRateStats(np.array([0, 3, 10, 0]), np.array([100, 997, 500, 0]))
        rates, fb = smoothed_loss_rates(stats)
        assert fb.tolist() == [False, False, False, True]
        assert rates[3] == np.median([1 / 102, 4 / 999, 11 / 502])

    def test_exact_on_constructed_trace(self):
        # 10 units exposed for 10 epochs, 2 lost; D=100, d=2
        U = [10, 10, 9, 9, 9, 8, 8, 8, 8, 8]
        P = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
        game = _loss_game(U, P)
        rates, stats = estimate_loss_rates([game], [10])
        assert stats.d.tolist() == [2]
        assert stats.D.tolist() == [10 + 10 + 10 + 9 + 9 + 9 + 8 + 8 + 8 + 8]
        assert rates[0] == (2 + 1) / (stats.D[0] + 2)

    def test_kills_are_not_losses(self):
        game = _loss_game([5, 3], [0, 0], K_series=[2, 0])
        _, stats = estimate_loss_rates([game], [5])
        assert stats.d.tolist() == [0]
        assert stats.D.tolist() == [5 + 3]

    def test_recorded_losses_take_precedence(self):
        # one unit produced and one lost in the same epoch: invisible from U alone
        game = _loss_game([4, 4], [0, 1], L_series=[0, 1])
        _, stats = estimate_loss_rates([game], [4])
        assert stats.d.tolist() == [1]

    def test_d_never_exceeds_D(self, demo):
        games = generate_dataset(demo, GenConfig(seed=3, kill_rate=0.05), 30)
        _, stats = estimate_loss_rates(games, demo.catalog.initial_counts)
        assert np.all(stats.d <= stats.D)


def _regression_rows(coeffs, n, rng, u_hi=20):
    U = rng.integers(1, u_hi + 1, size=n)
    E = rng.uniform(0, 1, size=n)
    mu = 1 / (1 + np.exp(-(coeffs[0] + coeffs[1] * E)))
    rho = 1 / (1 + np.exp(-coeffs[2]))
    phi = (1 - rho) / rho
    q = rng.beta(mu * phi, (1 - mu) * phi)
    O = rng.binomial(U, q)
    return U.astype(float), O.astype(float), E


def _rows_to_games(U, O, E):
    eps = [EpochRecord(1, [0], [0], [int(o)], float(e), [int(u)]) for u, o, e in zip(U, O, E)]
    return [GameTrace(f"r{k}", [ep]) for k, ep in enumerate(eps)]


class TestObservationRegression:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        U, O, E = _regression_rows((-1, 2, -0.5), 300, rng)
        for _ in range(20):
            theta = rng.uniform([-3, -3, -4], [3, 3, 3])
            g = betabin_regression_grad(theta, U, O, E)
            fd = np.empty(3)
            for k in range(3):
                h = 1e-5 * max(1.0, abs(theta[k]))
                up, dn = theta.copy(), theta.copy()
                up[k] += h
                dn[k] -= h
                fd[k] = (betabin_regression_nll(up, U, O, E)
                         - betabin_regression_nll(dn, U, O, E)) / (2 * h)
            rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)
            assert np.all(rel < 1e-5), (theta, g, fd)

    def test_nll_finite_at_saturation(self):
        rng = np.random.default_rng(2)
        U, O, E = _regression_rows((-2, 4, -1.5), 300, rng)
        for theta in ([-50.0, 50.0, -18.0], [50.0, -50.0, 18.0], [-50.0, -50.0, -18.0]):
            assert np.isfinite(betabin_regression_nll(theta, U, O, E))
            assert np.all(np.isfinite(betabin_regression_grad(theta, U, O, E)))

    def test_recovery_with_steep_effort_slope(self):
        rng = np.random.default_rng(3)
        U, O, E = _regression_rows((-2, 4, -1.5), 5000, rng)
        rows = [GameTrace(f"r{k}", [EpochRecord(1, [0], [0], [int(O[k])], float(E[k]),
                                                [int(U[k])])]) for k in range(len(U))]
        (c,), _ = fit_observation_model(rows, 1)
        np.testing.assert_allclose([c.a0, c.a1, c.b], [-2, 4, -1.5], atol=0.2)

    def test_nll_matches_pmf_sum(self):
        rng = np.random.default_rng(1)
        U, O, E = _regression_rows((0.5, -1, 0.2), 50, rng)
        theta = np.array([0.1, 0.2, -0.3])
        mu = 1 / (1 + np.exp(-(0.1 + 0.2 * E)))
        rho = 1 / (1 + np.exp(0.3))
        direct = -betabin_logpmf(O, U, mu, rho).sum() + 1e-6 * theta @ theta
        assert betabin_regression_nll(theta, U, O, E) == pytest.approx(direct, rel=1e-12)

    def test_recovery(self):
        rng = np.random.default_rng(2)
        U, O, E = _regression_rows((-1.0, 2.0, -0.5), 5000, rng)
        coeffs, flags = fit_observation_model(_rows_to_games(U, O, E), 1)
        c = coeffs[0]
        assert abs(c.a0 + 1.0) < 0.15 and abs(c.a1 - 2.0) < 0.15 and abs(c.b + 0.5) < 0.15
        assert flags["0"] == {"mu": "fitted", "rho": "fitted"}

    def test_rare_type_gets_median(self):
        rng = np.random.default_rng(3)
        games = []
        for g in range(600):
            e = rng.uniform()
            u0 = int(rng.integers(2, 8))
            o0 = int(rng.binomial(u0, 1 / (1 + np.exp(-(-1 + 2 * e)))))
            # type 1 present in a handful of epochs only
            u1 = 1 if g < 20 else 0
            o1 = int(rng.binomial(u1, 0.5))
            games.append(GameTrace(f"g{g}", [EpochRecord(1, [0, 0], [0, 0], [o0, o1], e,
                                                         [u0, u1])]))
        coeffs, flags = fit_observation_model(games, 2, names=("zealot", "reaver"))
        assert flags["zealot"] == {"mu": "fitted", "rho": "fitted"}
        assert flags["reaver"] == {"mu": "median", "rho": "median"}
        assert coeffs[1] == coeffs[0]

    def test_mean_only_fit_uses_median_dispersion(self):
        rng = np.random.default_rng(4)
        U, O, E = _regression_rows((0.5, 1.0, -1.0), 800, rng)
        rows0 = list(zip(U, O, E))
        # type 1 always single: mean is fit, dispersion is not
        rows1 = [(1, int(rng.binomial(1, 0.6)), e) for e in E]
        games = [GameTrace(f"g{k}", [EpochRecord(1, [0, 0], [0, 0], [int(a[1]), int(b[1])], a[2],
                                                 [int(a[0]), int(b[0])])])
                 for k, (a, b) in enumerate(zip(rows0, rows1))]
        coeffs, flags = fit_observation_model(games, 2)
        assert flags["1"] == {"mu": "fitted", "rho": "median"}
        assert coeffs[1].b == coeffs[0].b

    def test_constant_effort_warns(self):
        rng = np.random.default_rng(5)
        U, O, _ = _regression_rows((0.0, 0.0, -1.0), 400, rng)
        E = np.full(U.shape, 0.3)
        with pytest.warns(DegenerateDesignWarning):
            fit_observation_model(_rows_to_games(U, O, E), 1)

    def test_thresholds_configurable(self):
        rng = np.random.default_rng(6)
        U, O, E = _regression_rows((-1.0, 2.0, -0.5), 60, rng)
        games = _rows_to_games(U, O, E)
        _, flags = fit_observation_model(games, 1)
        assert flags["0"]["mu"] == "median"
        _, flags = fit_observation_model(games, 1, ObsFitConfig(10, 10))
        assert flags["0"]["mu"] == "fitted"


class TestFitModel:
    def test_end_to_end(self, demo):
        games = generate_dataset(demo, GenConfig(seed=5), 40)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params, report = fit_model(games[:30], demo.catalog, EMConfig(M=3, restarts=1,
                                                                          max_iters=30),
                                       demo.u_max, heldout=games[30:],
                                       rng=np.random.default_rng(0))
        assert params.strategy.n_states == 3
        assert params.catalog == demo.catalog
        assert set(report.fallback_flags) == set(demo.catalog.names)
        assert all("loss" in v for v in report.fallback_flags.values())
        assert report.heldout_loglik is not None and np.isfinite(report.heldout_loglik)
