import numpy as np
import pytest
from scipy import stats

from conftest import make_params
from fogfilter.generative import (
    GameTrace,
    GenConfig,
    effort_schedule,
    generate_dataset,
    generate_game,
    sample_kills,
    sample_observation,
    sample_production,
    sample_state_sequence,
    step_counts,
)
from fogfilter.inference import exact_filter_small
from fogfilter.model import ModelError, ObsRegressionCoeffs, StrategyParams, betabin_logpmf, zip_pmf


def _strategy(eta, pi, nu, lam):
    return StrategyParams(eta=eta, pi=pi, nu=nu, lam=lam)


class TestStateSequence:
    def test_single_state(self):
        s = sample_state_sequence(_strategy([1.0], [[1.0]], [[0.5]], [[1.0]]), 25,
                                  np.random.default_rng(0))
        assert np.all(s == 0) and s.shape == (25,)

    def test_absorbing(self):
        strat = _strategy([0, 0, 1.0], np.eye(3), np.full((3, 1), 0.5), np.ones((3, 1)))
        assert np.all(sample_state_sequence(strat, 40, np.random.default_rng(1)) == 2)

    def test_uniform_chain_frequency(self):
        strat = _strategy([0.5, 0.5], np.full((2, 2), 0.5), np.full((2, 1), 0.5), np.ones((2, 1)))
        s = sample_state_sequence(strat, 10_000, np.random.default_rng(2))
        assert abs(s.mean() - 0.5) < 0.02


class TestProduction:
    def test_never_produce(self):
        strat = _strategy([1.0], [[1.0]], [[0.0, 0.0, 0.0]], [[3.0, 1.0, 0.0]])
        assert np.all(sample_production(0, strat, np.random.default_rng(0)) == 0)

    def test_exactly_one(self):
        strat = _strategy([1.0], [[1.0]], [[1.0]], [[0.0]])
        rng = np.random.default_rng(0)
        assert all(sample_production(0, strat, rng)[0] == 1 for _ in range(200))

    def test_mean(self):
        strat = _strategy([1.0], [[1.0]], [[0.5]], [[2.0]])
        rng = np.random.default_rng(3)
        draws = np.array([sample_production(0, strat, rng)[0] for _ in range(100_000)])
        assert abs(draws.mean() - 1.5) < 0.02


class TestStepCounts:
    def test_all_killed(self):
        out = step_counts([5], [5], [3], [0.3], 60, np.random.default_rng(0))
        assert out[0] == 3

    def test_lossless(self):
        assert step_counts([4], [0], [0], [1e-300], 60, np.random.default_rng(0))[0] == 4

    def test_binomial_mean(self):
        rng = np.random.default_rng(4)
        draws = step_counts(np.full(100_000, 10), np.zeros(100_000, dtype=int),
                            np.zeros(100_000, dtype=int), 0.1, 60, rng)
        assert abs(draws.mean() - 9.0) < 0.03

    def test_cap(self):
        assert step_counts([60], [0], [5], [1e-12], 60, np.random.default_rng(0))[0] == 60

    def test_kills_exceeding_count(self):
        with pytest.raises(ModelError):
            step_counts([2], [3], [0], [0.1], 60, np.random.default_rng(0))


class TestKills:
    def test_zero_rate(self):
        cfg = GenConfig(kill_rate=0.0)
        assert np.all(sample_kills([5, 7], cfg, np.random.default_rng(0), t=10) == 0)

    def test_zero_units(self):
        cfg = GenConfig(kill_rate=0.5)
        assert sample_kills([0], cfg, np.random.default_rng(0), t=10)[0] == 0

    def test_mean(self):
        cfg = GenConfig(kill_rate=0.5)
        draws = sample_kills(np.full(100_000, 20), cfg, np.random.default_rng(5), t=10)
        assert abs(draws.mean() - 10.0) < 0.05

    def test_before_start(self):
        cfg = GenConfig(kill_rate=0.9, kill_start=6)
        assert np.all(sample_kills([10], cfg, np.random.default_rng(0), t=5) == 0)


class TestEffort:
    def test_none(self):
        np.testing.assert_array_equal(effort_schedule("none", 5), np.zeros(5))

    def test_flat(self):
        np.testing.assert_allclose(effort_schedule("flat(0.3)", 3), [0.3, 0.3, 0.3])

    def test_peaked(self):
        e = effort_schedule("peaked", 13)
        t = np.arange(1, 14)
        assert e.max() == 0.5
        assert set(t[e == e.max()]) == {5, 6, 7, 8}
        assert np.all(e[t < 4] < e[t == 4]) and np.all(e[t > 8] < 0.5)

    def test_unknown(self):
        with pytest.raises(ModelError):
            effort_schedule("sometimes", 4)


class TestObservation:
    def test_nothing_to_see(self):
        c = [ObsRegressionCoeffs(0, 0, 0)]
        assert sample_observation([0], c, 0.5, np.random.default_rng(0))[0] == 0

    def test_perfect_detection(self):
        c = [ObsRegressionCoeffs(40.0, 0.0, -40.0)]
        rng = np.random.default_rng(0)
        assert all(sample_observation([7], c, 1.0, rng)[0] == 7 for _ in range(100))

    def test_moments(self):
        # logit(0.5)=0; logit(0.3)
        c = [ObsRegressionCoeffs(0.0, 0.0, np.log(0.3 / 0.7))]
        rng = np.random.default_rng(6)
        draws = np.array([sample_observation([10], c, 0.4, rng)[0] for _ in range(100_000)])
        assert abs(draws.mean() - 5.0) < 0.05
        assert draws.var() > 2.5
        assert np.all(draws <= 10)


class TestGame:
    def test_single_epoch_nothing_happens(self):
        p = make_params([1.0], [[1.0]], [[0.0, 0.0]], [[1.0, 1.0]], initial=(3, 1))
        g = generate_game(p, GenConfig(T=1, kill_rate=0.0, effort_profile="none"),
                          np.random.default_rng(0))
        ep = g.epochs[0]
        assert g.T == 1 and ep.t == 1
        assert ep.P.tolist() == [0, 0] and ep.K.tolist() == [0, 0] and ep.E == 0.0
        assert ep.U.tolist() == [3, 1] or ep.L.sum() > 0

    def test_empty_dataset(self, demo):
        assert generate_dataset(demo, GenConfig(), 0) == []

    def test_deterministic_accumulation(self):
        p = make_params([1.0], [[1.0]], [[1.0]], [[0.0]], loss=1e-300, initial=(2,))
        g = generate_game(p, GenConfig(T=5, kill_rate=0.0), np.random.default_rng(0))
        assert g.array("U")[:, 0].tolist() == [3, 4, 5, 6, 7]

    def test_invariants_and_reproducibility(self, demo):
        cfg = GenConfig(seed=11, kill_rate=0.05)
        a = generate_dataset(demo, cfg, 60)
        b = generate_dataset(demo, cfg, 60)
        assert [g.to_dict() for g in a] == [g.to_dict() for g in b]
        for g in a:
            U, O, K = g.array("U"), g.array("O"), g.array("K")
            assert np.all(O <= U) and np.all(K <= U) and np.all(U <= demo.u_max)
            assert g.T == 13

    def test_trace_validation(self):
        from fogfilter.generative import EpochRecord
        with pytest.raises(ModelError):
            EpochRecord(t=1, P=[0], K=[0], O=[3], E=0.5, U=[2])
        with pytest.raises(ModelError):
            GameTrace("x", [EpochRecord(t=2, P=[0], K=[0], O=[0], E=0.0)])


def _chisq_pvalue(samples, expected_pmf):
    """Chi-square goodness of fit, pooling cells with expected count below 5."""
    n = samples.size
    counts = np.bincount(samples, minlength=expected_pmf.size)[: expected_pmf.size]
    exp = expected_pmf * n
    order = np.argsort(-exp)
    obs_c, exp_c = [], []
    acc_o = acc_e = 0.0
    for k in order:
        if exp[k] >= 5:
            obs_c.append(counts[k])
            exp_c.append(exp[k])
        else:
            acc_o += counts[k]
            acc_e += exp[k]
    if acc_e > 0:
        obs_c.append(acc_o)
        exp_c.append(acc_e)
    obs_c, exp_c = np.array(obs_c, float), np.array(exp_c, float)
    exp_c *= obs_c.sum() / exp_c.sum()
    return stats.chisquare(obs_c, exp_c).pvalue


@pytest.fixture(scope="module")
def setup():
    obs = (ObsRegressionCoeffs(-1.0, 2.0, -1.0), ObsRegressionCoeffs(0.0, 1.0, -2.0))
    p = make_params([0.6, 0.4], [[0.7, 0.3], [0.4, 0.6]], [[0.7, 0.2], [0.3, 0.9]],
                    [[1.5, 0.0], [0.5, 2.0]], loss=(0.1, 0.2), obs=obs, u_max=15,
                    initial=(2, 0))
    cfg = GenConfig(T=2, kill_rate=0.0, effort_profile="flat(0.6)", seed=99)
    games = generate_dataset(p, cfg, 12_000)
    return p, games


class TestDistributionalFit:
    def test_production_epoch1(self, setup):
        p, games = setup
        P1 = np.array([g.epochs[0].P for g in games])
        k = np.arange(30)
        for i in range(2):
            pmf = sum(p.strategy.eta[s] * zip_pmf(k, p.strategy.nu[s, i], p.strategy.lam[s, i])
                      for s in range(2))
            assert _chisq_pvalue(P1[:, i], pmf) > 0.001

    def test_counts_and_observations(self, setup):
        p, games = setup
        from fogfilter.generative import EpochRecord
        # analytic prior marginals with no evidence
        blank = GameTrace("blank", [EpochRecord(t, None, [0, 0], [0, 0], 0.0) for t in (1, 2)])
        prior = exact_filter_small(blank, p, use_observations=False, use_kills=False)
        U = np.stack([g.array("U") for g in games])
        O = np.stack([g.array("O") for g in games])
        for t in range(2):
            for i in range(2):
                assert _chisq_pvalue(U[:, t, i], prior[t, i]) > 0.001
                c = p.obs[i]
                mu = 1 / (1 + np.exp(-(c.a0 + c.a1 * 0.6)))
                rho = 1 / (1 + np.exp(-c.b))
                u = np.arange(p.u_max + 1)
                o_pmf = np.array([(prior[t, i] * np.exp(betabin_logpmf(o, u, mu, rho))).sum()
                                  for o in u])
                assert _chisq_pvalue(O[:, t, i], o_pmf) > 0.001
