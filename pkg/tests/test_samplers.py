import numpy as np
import pytest
from scipy.stats import ks_2samp

from gpmh import gp_surrogate as gps
from gpmh import samplers as smp
from gpmh.posterior import CallablePosterior


def mixture_init(means):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    k = means.shape[0]
    return smp.MixtureInit(
        means=means, weights=np.full(k, 1.0 / k), covariances=np.ones_like(means)
    )


def gaussian_1d_surrogate():
    """GP trained densely on the standard-normal log-density over [-6, 6]."""
    X = np.linspace(-6, 6, 31)[:, None]
    y = -0.5 * X[:, 0] ** 2
    t = gps.TrainingSet.from_data(X, y)
    h = gps.KernelHyper(lengthscales=np.array([1.5]), amplitude2=25.0)
    return gps.fit_gp(t, h)


class TestAcceptHelpers:
    def test_equal_densities_always_accept(self):
        assert smp.stage1_log_accept(0.0) == 0.0

    def test_zero_density_never_accepted(self):
        assert smp.stage1_log_accept(-np.inf) == -np.inf

    def test_half_acceptance_identity(self):
        assert np.isclose(np.exp(smp.stage1_log_accept(-np.log(2.0))), 0.5)

    def test_stage1_pass_probability_em10(self):
        assert np.isclose(np.exp(smp.stage1_log_accept(-10.0 - 0.0)), np.exp(-10.0))

    def test_stage2_collapses_when_surrogate_exact(self):
        for delta in (-3.0, 0.0, 2.5):
            assert smp.stage2_log_accept(delta, delta) == 0.0


class TestMhStep:
    def test_equal_density_target_always_accepts(self):
        rng = np.random.default_rng(0)
        state = smp.ChainState(theta=np.zeros(2), log_post_exact=0.0)
        for _ in range(50):
            state, info = smp.mh_step(state, lambda th: 0.0, smp.ProposalConfig(0.5), rng)
            assert info.accepted

    def test_minus_inf_never_accepted(self):
        rng = np.random.default_rng(1)
        state = smp.ChainState(theta=np.zeros(1), log_post_exact=0.0)
        for _ in range(50):
            new, info = smp.mh_step(state, lambda th: -np.inf, smp.ProposalConfig(0.5), rng)
            assert not info.accepted
            assert new.theta is state.theta

    def test_log2_acceptance_rate(self):
        rng = np.random.default_rng(2)
        state = smp.ChainState(theta=np.zeros(1), log_post_exact=0.0)
        n, acc = 20000, 0
        for _ in range(n):
            _, info = smp.mh_step(state, lambda th: -np.log(2.0), smp.ProposalConfig(0.5), rng)
            acc += info.accepted
        assert abs(acc / n - 0.5) < 0.02

    def test_nan_target_raises(self):
        rng = np.random.default_rng(3)
        state = smp.ChainState(theta=np.zeros(1), log_post_exact=0.0)
        with pytest.raises(RuntimeError, match="NaN"):
            smp.mh_step(state, lambda th: np.nan, smp.ProposalConfig(0.5), rng)


class TestDetailedBalanceOracle:
    def test_two_stage_kernel_detailed_balance(self):
        # enumerate the two-stage kernel over 5 states with a uniform symmetric
        # proposal, using the same acceptance functions the sampler uses
        rng = np.random.default_rng(11)
        l_exact = rng.normal(0.0, 1.5, size=5)
        l_surr = l_exact + rng.normal(0.0, 0.7, size=5)
        q = 1.0 / 5.0
        P = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                if i == j:
                    continue
                rho_a = np.exp(smp.stage1_log_accept(l_surr[j] - l_surr[i]))
                rho_e = np.exp(
                    smp.stage2_log_accept(l_exact[j] - l_exact[i], l_surr[j] - l_surr[i])
                )
                P[i, j] = q * rho_a * rho_e
            P[i, i] = 1.0 - P[i].sum()
        assert np.all(P >= 0)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-15)
        pi = np.exp(l_exact)
        flow = pi[:, None] * P
        assert np.max(np.abs(flow - flow.T)) < 1e-12

    def test_native_kernel_detailed_balance(self):
        rng = np.random.default_rng(12)
        l_exact = rng.normal(0.0, 2.0, size=5)
        q = 1.0 / 5.0
        P = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                if i != j:
                    P[i, j] = q * np.exp(smp.stage1_log_accept(l_exact[j] - l_exact[i]))
            P[i, i] = 1.0 - P[i].sum()
        pi = np.exp(l_exact)
        flow = pi[:, None] * P
        assert np.max(np.abs(flow - flow.T)) < 1e-12


class TestTwoStageStep:
    def test_exact_surrogate_reduces_to_native_mh(self):
        # same seed, surrogate identical to the target: identical trajectories
        fn = lambda th: -0.5 * np.sum((th - 0.3) ** 2) / 0.01
        bounds = (np.zeros(2), np.ones(2))
        prop = smp.ProposalConfig(0.15)

        rng1 = np.random.default_rng(100)
        s1 = smp.ChainState(theta=np.full(2, 0.5), log_post_exact=fn(np.full(2, 0.5)))
        rng2 = np.random.default_rng(100)
        s2 = smp.ChainState(
            theta=np.full(2, 0.5),
            log_post_exact=fn(np.full(2, 0.5)),
            log_post_surr=fn(np.full(2, 0.5)),
        )
        boxed = lambda th: fn(th) if np.all((th >= 0) & (th <= 1)) else -np.inf
        for _ in range(500):
            s1, _ = smp.mh_step(s1, boxed, prop, rng1)
            s2, _ = smp.two_stage_step(s2, fn, fn, prop, rng2, bounds)
            assert np.array_equal(s1.theta, s2.theta)

    def test_out_of_bounds_rejected_without_evaluations(self):
        calls = {"exact": 0, "surr": 0}

        def exact(th):
            calls["exact"] += 1
            return 0.0

        def surr(th):
            calls["surr"] += 1
            return 0.0

        rng = np.random.default_rng(4)
        state = smp.ChainState(theta=np.array([0.5]), log_post_exact=0.0, log_post_surr=0.0)
        prop = smp.ProposalConfig(100.0)  # almost surely proposes outside [0, 1]
        rejected = 0
        for _ in range(100):
            _, info = smp.two_stage_step(state, exact, surr, prop, rng, (np.zeros(1), np.ones(1)))
            rejected += not info.stage1_passed
        assert rejected > 90
        assert calls["exact"] < 10
        assert calls["surr"] < 10


class TestSliceSampler:
    def test_gaussian_moments(self):
        gp = gaussian_1d_surrogate()
        out = smp.slice_sample_surrogate(gp, (np.array([-6.0]), np.array([6.0])),
                                         n=20000, rng=7)
        assert out.shape == (20000, 1)
        assert abs(out.mean()) < 0.05
        assert abs(out.var() - 1.0) < 0.1

    def test_flat_target_uniform_on_box(self):
        lo, hi = np.array([0.0, -2.0]), np.array([1.0, 6.0])
        out = smp.slice_sample_surrogate(lambda th: -3.2, (lo, hi), n=5000, rng=8)
        center = 0.5 * (lo + hi)
        width = hi - lo
        assert np.all(np.abs(out.mean(axis=0) - center) < 0.02 * width)
        assert np.all(out >= lo) and np.all(out <= hi)

    def test_deterministic_given_seed(self):
        gp = gaussian_1d_surrogate()
        a = smp.slice_sample_surrogate(gp, (np.array([-6.0]), np.array([6.0])), n=50, rng=9)
        b = smp.slice_sample_surrogate(gp, (np.array([-6.0]), np.array([6.0])), n=50, rng=9)
        assert np.array_equal(a, b)


class TestFitMixture:
    def test_recovers_separated_blobs(self):
        rng = np.random.default_rng(13)
        blob1 = rng.normal([-2.0, -2.0], 0.2, size=(300, 2))
        blob2 = rng.normal([2.0, 2.0], 0.2, size=(300, 2))
        init = smp.fit_mixture(np.vstack([blob1, blob2]), 2, rng=0)
        means = init.means[np.argsort(init.means[:, 0])]
        assert np.linalg.norm(means[0] - [-2.0, -2.0]) < 0.1
        assert np.linalg.norm(means[1] - [2.0, 2.0]) < 0.1

    def test_degenerate_identical_samples(self):
        samples = np.tile([0.3, 0.4], (50, 1))
        init = smp.fit_mixture(samples, 1, rng=1)
        assert np.allclose(init.means[0], [0.3, 0.4], atol=1e-9)

    def test_k4_on_unimodal_data_stays_in_bbox(self):
        rng = np.random.default_rng(14)
        samples = rng.normal(0.25, 0.03, size=(500, 2))
        init = smp.fit_mixture(samples, 4, rng=2)
        assert init.means.shape == (4, 2)
        assert np.all(init.means >= samples.min(axis=0) - 1e-9)
        assert np.all(init.means <= samples.max(axis=0) + 1e-9)

    def test_needs_enough_samples(self):
        with pytest.raises(ValueError):
            smp.fit_mixture(np.zeros((19, 2)), 2, rng=0)


class TestTuneProposal:
    def test_hits_target_range_on_gaussian(self):
        gp = gaussian_1d_surrogate()
        prop = smp.tune_proposal(gp, (np.array([-6.0]), np.array([6.0])),
                                 start=np.zeros(1), rng=10)
        assert prop.bracketed
        assert 0.3 <= prop.acceptance_rate <= 0.4

    def test_shrinks_astronomical_sigma(self):
        gp = gaussian_1d_surrogate()
        prop = smp.tune_proposal(gp, (np.array([-6.0]), np.array([6.0])),
                                 start=np.zeros(1), rng=11, initial_sigma=1e6)
        assert prop.sigma_p < 1e6
        assert prop.acceptance_rate >= 0.3 or not prop.bracketed

    def test_deterministic_given_seed(self):
        gp = gaussian_1d_surrogate()
        box = (np.array([-6.0]), np.array([6.0]))
        a = smp.tune_proposal(gp, box, np.zeros(1), rng=12)
        b = smp.tune_proposal(gp, box, np.zeros(1), rng=12)
        assert a.sigma_p == b.sigma_p and a.acceptance_rate == b.acceptance_rate


def bimodal_target():
    """2D two-Gaussian mixture on the unit box."""
    m1, m2, s = np.array([0.3, 0.35]), np.array([0.7, 0.65]), 0.07

    def logp(th):
        d1 = -0.5 * np.sum((th - m1) ** 2) / s**2
        d2 = -0.5 * np.sum((th - m2) ** 2) / s**2
        return float(np.logaddexp(d1, d2))

    return logp


class TestRunChains:
    def _setup(self, budget=40, seed=0):
        target = CallablePosterior(bimodal_target(), (0.0, 1.0), 2)
        bounds = (np.zeros(2), np.ones(2))
        cfg = gps.AcquisitionConfig(budget_max=budget, restarts=3, stall_tol=1e-6)
        gp = gps.build_surrogate(target, bounds, cfg, 8, rng=seed)
        return target, gp, bounds

    def test_exact_equals_two_stage_with_perfect_surrogate(self):
        target = CallablePosterior(bimodal_target(), (0.0, 1.0), 2)
        inits = mixture_init([[0.3, 0.3], [0.7, 0.7]])
        prop = smp.ProposalConfig(0.1)
        exact_fn_as_surrogate = target.fn
        a = smp.run_chains(target, None, inits, prop, 400, "exact", 77)
        b = smp.run_chains(target, exact_fn_as_surrogate, inits, prop, 400, "two_stage", 77)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.samples, cb.samples)

    def test_counter_identity_two_stage(self):
        target, gp, bounds = self._setup()
        inits = mixture_init([[0.3, 0.35], [0.7, 0.65], [0.5, 0.5], [0.2, 0.8]])
        prop = smp.ProposalConfig(0.12)
        chains = smp.run_chains(target, gp, inits, prop, 2500, "two_stage", 5)
        for c in chains:
            s = c.stats
            assert s["proposed"] == s["surrogate_rejected"] + s["exact_tested"]
            assert s["exact_accepted"] <= s["exact_tested"]

    def test_two_stage_filters_strictly(self):
        target, gp, bounds = self._setup()
        inits = mixture_init([[0.3, 0.35]])
        prop = smp.ProposalConfig(0.12)
        chains = smp.run_chains(target, gp, inits, prop, 10000, "two_stage", 6)
        s = chains[0].stats
        assert s["exact_tested"] < s["proposed"]

    def test_surrogate_only_touches_no_exact_evaluations(self):
        target, gp, bounds = self._setup()
        inits = mixture_init([[0.4, 0.4], [0.6, 0.6]])
        before = target.eval_count
        smp.run_chains(target, gp, inits, smp.ProposalConfig(0.1), 500, "surrogate_only", 7)
        assert target.eval_count == before

    def test_reproducibility_all_modes(self):
        target, gp, bounds = self._setup()
        inits = mixture_init([[0.4, 0.4], [0.6, 0.6]])
        prop = smp.ProposalConfig(0.1)
        for mode in ("exact", "two_stage", "surrogate_only"):
            a = smp.run_chains(target, gp, inits, prop, 300, mode, 123)
            b = smp.run_chains(target, gp, inits, prop, 300, mode, 123)
            for ca, cb in zip(a, b):
                assert np.array_equal(ca.samples, cb.samples)
                assert ca.stats == cb.stats

    def test_start_outside_bounds_rejected(self):
        target, gp, bounds = self._setup()
        inits = mixture_init([[1.4, 0.4]])
        with pytest.raises(ValueError):
            smp.run_chains(target, gp, inits, smp.ProposalConfig(0.1), 10, "exact", 1)

    @pytest.mark.slow
    def test_two_stage_matches_exact_distribution(self):
        # pooled two-stage vs pooled native MH on the bimodal target:
        # per-marginal KS < 0.05 and means within 0.03 * box width
        target, gp, bounds = self._setup(budget=45, seed=3)
        prop = smp.tune_proposal(gp, bounds, np.array([0.3, 0.35]), rng=20)
        surr_samples = smp.slice_sample_surrogate(gp, bounds, 20000, rng=21)
        inits = smp.fit_mixture(surr_samples, 4, rng=22)
        n_steps = 33334
        chains_ex = smp.run_chains(target, gp, inits, prop, n_steps, "exact", 23)
        chains_ts = smp.run_chains(target, gp, inits, prop, n_steps, "two_stage", 24)
        pooled_ex = smp.postprocess(chains_ex, 0.25, 2)
        pooled_ts = smp.postprocess(chains_ts, 0.25, 2)
        assert pooled_ex.shape[0] >= 50000
        for p in range(2):
            ks = ks_2samp(pooled_ex[:, p], pooled_ts[:, p]).statistic
            assert ks < 0.05
            assert abs(pooled_ex[:, p].mean() - pooled_ts[:, p].mean()) < 0.03
        # filtering efficiency: exact evaluations per retained sample
        ex_evals = sum(c.stats["exact_tested"] for c in chains_ex)
        ts_evals = sum(c.stats["exact_tested"] for c in chains_ts)
        assert ts_evals / pooled_ts.shape[0] < ex_evals / pooled_ex.shape[0]


class TestPostprocess:
    def _chains(self, lengths, dim=2):
        rng = np.random.default_rng(0)
        return [rng.normal(size=(n, dim)) for n in lengths]

    def test_identity(self):
        chains = self._chains([40, 40])
        pooled = smp.postprocess(chains, 0.0, 1)
        assert pooled.shape == (80, 2)
        assert np.array_equal(pooled[:40], chains[0])

    def test_thin_two_on_hundred(self):
        chains = self._chains([100])
        assert smp.postprocess(chains, 0.0, 2).shape[0] == 50

    def test_count_formula(self):
        for n, frac, thin in [(100, 0.25, 2), (77, 0.1, 3), (1000, 0.5, 5)]:
            chains = self._chains([n])
            got = smp.postprocess(chains, frac, thin).shape[0]
            kept = n - int(np.floor(frac * n))
            expect = int(np.ceil(kept / thin))
            assert got == expect

    def test_empty_result_rejected(self):
        with pytest.raises(ValueError):
            smp.postprocess([np.zeros((0, 2))], 0.0, 1)

    def test_argument_validation(self):
        chains = self._chains([10])
        with pytest.raises(ValueError):
            smp.postprocess(chains, 1.0, 1)
        with pytest.raises(ValueError):
            smp.postprocess(chains, 0.1, 0)
