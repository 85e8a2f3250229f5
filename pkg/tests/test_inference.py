"""Tests for conjugate updates and pCN sampling."""

import math
from types import SimpleNamespace

import numpy as np
import pytest
import scipy.stats
from mpmath import mp

from halbach_bayes import HalbachError
from halbach_bayes.inference import (
    Chain,
    ChainAborted,
    PosteriorSummary,
    accept_probability,
    conjugate_update,
    log_likelihood,
    pcn_accept_prob,
    pcn_propose,
    run_chain,
    run_chains,
    summarize_chain,
    summarize_chains,
)
from halbach_bayes.inference import _chol_spd
from halbach_bayes.prior import GaussianDensity


def random_problem(dim, n_obs, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    prior = GaussianDensity(
        mean=rng.standard_normal(dim), cov=A @ A.T + dim * np.eye(dim)
    )
    H = rng.standard_normal((n_obs, dim))
    var = rng.uniform(0.5, 2.0, n_obs)
    q = H @ prior.sample(rng) + np.sqrt(var) * rng.standard_normal(n_obs)
    return H, var, q, prior


def oracle_posterior(H, var, q, prior):
    """Textbook Bayes formulas with explicit inverses in 50-digit arithmetic."""
    with mp.workdps(50):
        Hm = mp.matrix(H.tolist())
        C0 = mp.matrix(prior.cov.tolist())
        Sinv = mp.diag([1 / mp.mpf(v) for v in var])
        C0inv = C0 ** -1
        C1 = (Hm.T * Sinv * Hm + C0inv) ** -1
        rhs = Hm.T * Sinv * mp.matrix(q.tolist()) + C0inv * mp.matrix(prior.mean.tolist())
        mu1 = C1 * rhs
        mean = np.array([float(mu1[i]) for i in range(mu1.rows)])
        cov = np.array([[float(C1[i, j]) for j in range(C1.cols)] for i in range(C1.rows)])
    return mean, cov


class TestConjugateUpdate:
    def test_identity_problem(self):
        prior = GaussianDensity(mean=np.zeros(3), cov=np.eye(3))
        q = np.array([2.0, -4.0, 6.0])
        post = conjugate_update(np.eye(3), np.ones(3), q, prior)
        assert np.allclose(post.mean, q / 2.0, rtol=1e-14)
        assert np.allclose(post.cov, np.eye(3) / 2.0, rtol=1e-14)

    def test_uninformative_data_returns_prior(self):
        H, _, q, prior = random_problem(5, 8, seed=0)
        post = conjugate_update(H, np.full(8, 1e30), q, prior)
        assert np.allclose(post.mean, prior.mean, rtol=1e-10, atol=1e-10)
        assert np.allclose(post.cov, prior.cov, rtol=1e-10)

    @pytest.mark.parametrize("dim,n_obs,seed", [(6, 9, 1), (17, 25, 2), (32, 40, 3)])
    def test_matches_extended_precision_oracle(self, dim, n_obs, seed):
        H, var, q, prior = random_problem(dim, n_obs, seed)
        post = conjugate_update(H, var, q, prior)
        mean, cov = oracle_posterior(H, var, q, prior)
        assert np.linalg.norm(post.mean - mean) / np.linalg.norm(mean) < 1e-8
        assert np.linalg.norm(post.cov - cov) / np.linalg.norm(cov) < 1e-8

    @pytest.mark.parametrize("seed", range(4))
    def test_posterior_variance_never_grows(self, seed):
        dim = 6 + 3 * seed
        H, var, q, prior = random_problem(dim, dim + 4, seed=seed + 10)
        post = conjugate_update(H, var, q, prior)
        assert np.all(np.diag(post.cov) <= np.diag(prior.cov) + 1e-12)

    def test_accepts_scalar_noise_and_operator_object(self):
        H, _, q, prior = random_problem(4, 6, seed=4)
        as_matrix = conjugate_update(H, 2.0, q, prior)
        as_object = conjugate_update(SimpleNamespace(matrix=H), np.full(6, 2.0), q, prior)
        assert np.array_equal(as_matrix.mean, as_object.mean)

    def test_rejects_bad_inputs(self):
        H, var, q, prior = random_problem(4, 6, seed=5)
        with pytest.raises(HalbachError, match="positive"):
            conjugate_update(H, -1.0, q, prior)
        with pytest.raises(HalbachError, match="shape"):
            conjugate_update(H, var[:-1], q, prior)
        with pytest.raises(HalbachError, match="shape"):
            conjugate_update(H, var, q[:-1], prior)
        with pytest.raises(HalbachError, match="columns"):
            conjugate_update(H[:, :-1], var, q, prior)

    def test_non_finite_system_reported(self):
        _, var, q, prior = random_problem(3, 4, seed=6)
        H = np.full((4, 3), 1e200)
        with np.errstate(over="ignore"), pytest.raises(HalbachError, match="non-finite"):
            conjugate_update(H, var, q, prior)

    def test_indefinite_matrix_reports_smallest_eigenvalue(self):
        # eigenvalues 3 and -1
        with pytest.raises(HalbachError, match="smallest eigenvalue -1.0"):
            _chol_spd(np.array([[1.0, 2.0], [2.0, 1.0]]), "test matrix")


class TestLogLikelihood:
    def test_exact_fit_is_zero(self):
        H = np.array([[1.0, 2.0], [3.0, 4.0]])
        p = np.array([1.0, -1.0])
        assert log_likelihood(p, H @ p, np.ones(2), lambda x: H @ x) == 0.0

    def test_single_residual(self):
        forward = lambda x: np.array([x[0]])
        value = log_likelihood(np.array([3.0]), np.array([1.0]), np.array([4.0]), forward)
        assert value == pytest.approx(-(2.0**2) / (2.0 * 4.0), rel=1e-15)

    def test_matches_gaussian_density_ratio(self):
        rng = np.random.default_rng(7)
        H = rng.standard_normal((5, 3))
        var = rng.uniform(0.5, 2.0, 5)
        q = rng.standard_normal(5)
        p1, p2 = rng.standard_normal(3), rng.standard_normal(3)
        forward = lambda x: H @ x
        ours = log_likelihood(p1, q, var, forward) - log_likelihood(p2, q, var, forward)
        dist1 = scipy.stats.multivariate_normal(mean=H @ p1, cov=np.diag(var))
        dist2 = scipy.stats.multivariate_normal(mean=H @ p2, cov=np.diag(var))
        assert ours == pytest.approx(dist1.logpdf(q) - dist2.logpdf(q), rel=1e-10)

    def test_accepts_objects_with_values(self):
        forward = lambda x: x
        p = SimpleNamespace(values=np.array([1.0, 2.0]))
        assert log_likelihood(p, np.array([1.0, 2.0]), 1.0, forward) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(HalbachError, match="shape"):
            log_likelihood(np.zeros(2), np.zeros(3), 1.0, lambda x: x)

    def test_non_finite_forward_rejected(self):
        with np.errstate(invalid="ignore"), pytest.raises(HalbachError, match="non-finite"):
            log_likelihood(np.zeros(2), np.zeros(2), 1.0, lambda x: x / 0.0)


class TestAcceptProbability:
    def test_equal_likelihoods_accept(self):
        assert accept_probability(-3.0, -3.0) == 1.0

    def test_improvement_accepts(self):
        assert accept_probability(-10.0, -2.0) == 1.0

    def test_known_ratio(self):
        assert accept_probability(-0.5, -2.0) == pytest.approx(math.exp(-1.5), rel=1e-15)

    def test_invariant_under_common_shift(self):
        base = accept_probability(-0.5, -2.0)
        assert accept_probability(-0.5 + 1e15, -2.0 + 1e15) == base

    def test_extreme_values_do_not_overflow(self):
        assert accept_probability(-1e308, -1e308 + 5.0) == 1.0
        assert accept_probability(5.0, -1e10) == 0.0

    def test_pcn_accept_prob_residual_example(self):
        # residual norms 1 vs 2 with unit noise: exp((1 - 4)/2)
        forward = lambda x: x
        q = np.zeros(2)
        p = np.array([1.0, 0.0])
        p_hat = np.array([0.0, 2.0])
        a = pcn_accept_prob(p, p_hat, q, 1.0, forward)
        assert a == pytest.approx(math.exp(-1.5), rel=1e-14)


class TestPcnPropose:
    def make_prior(self, dim, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((dim, dim))
        return GaussianDensity(mean=rng.standard_normal(dim), cov=A @ A.T + dim * np.eye(dim))

    def test_full_step_is_independent_prior_draw(self):
        prior = self.make_prior(4, 0)
        a = pcn_propose(np.zeros(4), prior, 1.0, np.random.default_rng(1))
        b = pcn_propose(np.full(4, 50.0), prior, 1.0, np.random.default_rng(1))
        assert np.allclose(a, b, rtol=1e-12)
        xi = np.random.default_rng(1).standard_normal(4)
        assert np.allclose(a, prior.mean + prior.chol @ xi, rtol=1e-12)

    def test_small_step_stays_near_current_state(self):
        prior = self.make_prior(3, 1)
        p = np.array([5.0, -2.0, 1.0])
        p_hat = pcn_propose(p, prior, 1e-6, np.random.default_rng(2))
        assert np.max(np.abs(p_hat - p)) < 1e-4

    def test_empirical_mean_and_covariance(self):
        # proposal law: mean mu0 + sqrt(1-s^2)(p - mu0), covariance s^2 C0
        prior = self.make_prior(3, 2)
        s = 0.3
        p = prior.mean + np.array([2.0, -1.0, 3.0])
        rng = np.random.default_rng(3)
        n = 100000
        draws = np.array([pcn_propose(p, prior, s, rng) for _ in range(n)])
        target_mean = prior.mean + math.sqrt(1 - s * s) * (p - prior.mean)
        se = s * prior.marginal_std / math.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - target_mean) < 3.0 * se)
        sample_cov = np.cov(draws, rowvar=False)
        target_cov = s * s * prior.cov
        rel = np.linalg.norm(sample_cov - target_cov) / np.linalg.norm(target_cov)
        assert rel < 0.02

    def test_step_size_validated(self):
        prior = self.make_prior(2, 3)
        for s in (0.0, -0.5, 1.5):
            with pytest.raises(HalbachError, match="step size"):
                pcn_propose(np.zeros(2), prior, s, np.random.default_rng(0))


class TestChainType:
    def make_chain(self, n_states=3, dim=2):
        states = np.arange(float(n_states * dim)).reshape(n_states, dim)
        return Chain(
            states=states,
            accepted=np.ones(n_states - 1, dtype=bool),
            log_likelihoods=np.zeros(n_states),
            step_size=0.1,
            seed=0,
        )

    def test_shape_validation(self):
        with pytest.raises(HalbachError):
            Chain(
                states=np.zeros((3, 2)),
                accepted=np.ones(3, dtype=bool),
                log_likelihoods=np.zeros(3),
                step_size=0.1,
                seed=0,
            )
        with pytest.raises(HalbachError):
            Chain(
                states=np.zeros((3, 2)),
                accepted=np.ones(2, dtype=bool),
                log_likelihoods=np.zeros(2),
                step_size=0.1,
                seed=0,
            )
        with pytest.raises(HalbachError, match="finite"):
            Chain(
                states=np.full((3, 2), np.inf),
                accepted=np.ones(2, dtype=bool),
                log_likelihoods=np.zeros(3),
                step_size=0.1,
                seed=0,
            )

    def test_properties_and_immutability(self):
        chain = self.make_chain()
        assert chain.n_steps == 2
        assert chain.dim == 2
        assert chain.acceptance_rate == 1.0
        with pytest.raises(ValueError):
            chain.states[0, 0] = 9.0


class TestRunChain:
    def linear_setup(self, dim=4, n_obs=6, seed=0, noise_scale=1.0):
        H, var, q, prior = random_problem(dim, n_obs, seed)
        var = var * noise_scale
        return H, var, q, prior

    def test_starts_at_prior_mean(self):
        H, var, q, prior = self.linear_setup()
        chain = run_chain(lambda x: H @ x, prior, q, var, n_steps=10, seed=1, s=0.2)
        assert np.array_equal(chain.states[0], prior.mean)

    def test_deterministic_for_fixed_seed(self):
        H, var, q, prior = self.linear_setup()
        a = run_chain(lambda x: H @ x, prior, q, var, n_steps=200, seed=7, s=0.2)
        b = run_chain(lambda x: H @ x, prior, q, var, n_steps=200, seed=7, s=0.2)
        assert a.states.tobytes() == b.states.tobytes()
        assert np.array_equal(a.accepted, b.accepted)
        assert np.array_equal(a.log_likelihoods, b.log_likelihoods)

    def test_rejected_steps_copy_bit_exactly(self):
        # strong data far from the prior forces plenty of rejections
        H, var, q, prior = self.linear_setup(noise_scale=1e-4)
        chain = run_chain(
            lambda x: H @ x, prior, q + 50.0, var, n_steps=400, seed=3, s=0.9
        )
        rejected = np.nonzero(~chain.accepted)[0]
        assert len(rejected) > 50
        for k in rejected[:20]:
            assert chain.states[k + 1].tobytes() == chain.states[k].tobytes()
            assert chain.log_likelihoods[k + 1] == chain.log_likelihoods[k]

    def test_acceptance_rate_matches_flags(self):
        H, var, q, prior = self.linear_setup()
        chain = run_chain(lambda x: H @ x, prior, q, var, n_steps=300, seed=5, s=0.5)
        assert chain.acceptance_rate == pytest.approx(chain.accepted.mean())
        assert 0.0 < chain.acceptance_rate <= 1.0

    def test_one_forward_evaluation_per_step(self):
        H, var, q, prior = self.linear_setup()
        calls = []
        forward = lambda x: (calls.append(1), H @ x)[1]
        run_chain(forward, prior, q, var, n_steps=50, seed=2, s=0.2)
        assert len(calls) == 51  # initial state + one per step

    def test_forward_failure_carries_partial_chain(self):
        H, var, q, prior = self.linear_setup()
        counter = {"n": 0}

        def flaky(x):
            counter["n"] += 1
            if counter["n"] > 5:
                raise RuntimeError("solver blew up")
            return H @ x

        with pytest.raises(ChainAborted, match="solver blew up") as err:
            run_chain(flaky, prior, q, var, n_steps=100, seed=4, s=0.2)
        partial = err.value.partial_chain
        # initial state plus the four completed transitions
        assert partial.states.shape == (5, 4)
        assert np.array_equal(partial.states[0], prior.mean)
        assert np.all(np.isfinite(partial.log_likelihoods))

    def test_constant_likelihood_reproduces_prior(self):
        # uninformative data: acceptance goes to one and the chain must
        # leave the prior invariant
        rng = np.random.default_rng(11)
        A = rng.standard_normal((3, 3))
        prior = GaussianDensity(mean=np.array([1.0, -2.0, 0.5]), cov=A @ A.T + 3 * np.eye(3))
        forward = lambda x: x
        q = np.zeros(3)
        chain = run_chain(forward, prior, q, 1e30, n_steps=20000, seed=6, s=0.5)
        assert chain.acceptance_rate > 0.9999
        summary = summarize_chain(chain)
        assert np.all(np.abs(summary.mean - prior.mean) < 3.0 * summary.std_error)
        var_se = np.diag(prior.cov) * np.sqrt(2.0 / summary.ess)
        assert np.all(
            np.abs(np.diag(summary.covariance) - np.diag(prior.cov)) < 4.0 * var_se
        )

    def test_matches_conjugate_posterior_on_linear_problem(self):
        H, var, q, prior = self.linear_setup(dim=4, n_obs=6, seed=8, noise_scale=25.0)
        conjugate = conjugate_update(H, var, q, prior)
        chain = run_chain(lambda x: H @ x, prior, q, var, n_steps=20000, seed=9, s=0.25)
        summary = summarize_chain(chain)
        assert np.all(np.abs(summary.mean - conjugate.mean) < 3.0 * summary.std_error)

    def test_prior_invariance_by_ks_projections(self):
        # constant likelihood keeps the prior invariant; the chain is thinned
        # to near-independence so the KS p-values are meaningful
        rng = np.random.default_rng(13)
        A = rng.standard_normal((5, 5))
        prior = GaussianDensity(mean=rng.standard_normal(5), cov=A @ A.T + 5 * np.eye(5))
        q = np.array([2.5])
        forward = lambda x: np.array([2.5])
        chain = run_chain(forward, prior, q, 1.0, n_steps=20000, seed=10, s=0.5)
        assert chain.acceptance_rate == 1.0
        thinned = chain.states[2000::40]
        proj_rng = np.random.default_rng(99)
        for _ in range(3):
            u = proj_rng.standard_normal(5)
            u /= np.linalg.norm(u)
            z = (thinned @ u - u @ prior.mean) / math.sqrt(u @ prior.cov @ u)
            p_value = scipy.stats.kstest(z, "norm").pvalue
            assert p_value > 0.01

    def test_strict_paper_mode_targets_prior_times_likelihood(self):
        # with a flat likelihood the literal proposal plus the full ratio
        # must still sample the prior, exercising the asymmetric correction
        rng = np.random.default_rng(17)
        A = rng.standard_normal((2, 2))
        prior = GaussianDensity(mean=np.array([3.0, -1.0]), cov=A @ A.T + 2 * np.eye(2))
        forward = lambda x: np.zeros(1)
        chain = run_chain(
            forward, prior, np.zeros(1), 1.0, n_steps=20000, seed=12, s=0.3,
            strict_paper=True,
        )
        assert chain.mode == "literal_proposal"
        # the uncentered proposal is corrected by the ratio, not always accepted
        assert chain.acceptance_rate < 0.999
        summary = summarize_chain(chain)
        assert np.all(np.abs(summary.mean - prior.mean) < 4.0 * summary.std_error)
        var_se = np.diag(prior.cov) * np.sqrt(2.0 / summary.ess)
        assert np.all(
            np.abs(np.diag(summary.covariance) - np.diag(prior.cov)) < 4.0 * var_se
        )

    def test_input_validation(self):
        H, var, q, prior = self.linear_setup()
        with pytest.raises(HalbachError, match="n_steps"):
            run_chain(lambda x: H @ x, prior, q, var, n_steps=0, seed=0)
        with pytest.raises(HalbachError, match="step size"):
            run_chain(lambda x: H @ x, prior, q, var, n_steps=5, seed=0, s=2.0)


class TestRunChains:
    def test_seed_order_and_determinism(self):
        H, var, q, prior = random_problem(3, 5, seed=20)
        forward = lambda x: H @ x
        chains = run_chains(forward, prior, q, var, n_steps=150, seeds=[5, 2, 9], s=0.3)
        assert [c.seed for c in chains] == [5, 2, 9]
        solo = run_chain(forward, prior, q, var, n_steps=150, seed=2, s=0.3)
        assert chains[1].states.tobytes() == solo.states.tobytes()

    def test_duplicate_seeds_rejected(self):
        H, var, q, prior = random_problem(3, 5, seed=21)
        with pytest.raises(HalbachError, match="distinct"):
            run_chains(lambda x: H @ x, prior, q, var, n_steps=10, seeds=[1, 1])

    def test_forward_factory_used_per_chain(self):
        H, var, q, prior = random_problem(3, 5, seed=22)
        built = []

        def factory():
            forward = lambda x: H @ x
            built.append(forward)
            return forward

        run_chains(
            lambda x: H @ x, prior, q, var, n_steps=10, seeds=[1, 2, 3],
            forward_factory=factory,
        )
        assert len(built) == 3


class TestSummaries:
    def iid_chain(self, n, dim, seed):
        rng = np.random.default_rng(seed)
        return Chain(
            states=rng.standard_normal((n, dim)),
            accepted=np.ones(n - 1, dtype=bool),
            log_likelihoods=np.zeros(n),
            step_size=0.1,
            seed=seed,
        )

    def test_constant_chain_warns_and_reports_state(self):
        states = np.tile(np.array([2.0, -3.0]), (200, 1))
        chain = Chain(
            states=states,
            accepted=np.zeros(199, dtype=bool),
            log_likelihoods=np.zeros(200),
            step_size=0.1,
            seed=0,
        )
        with pytest.warns(UserWarning, match="zero variance"):
            summary = summarize_chain(chain, burn_in_fraction=0.1)
        assert np.allclose(summary.mean, [2.0, -3.0])
        assert np.allclose(summary.covariance, 0.0)
        assert np.all(summary.ess == summary.n_retained)

    def test_iid_states_have_full_ess(self):
        chain = self.iid_chain(2000, 2, seed=1)
        summary = summarize_chain(chain, burn_in_fraction=0.0)
        assert np.all(summary.ess >= 0.9 * 2000)
        assert np.all(summary.ess <= 2000)

    def test_ar1_ess_matches_theory(self):
        # AR(1) with coefficient 0.9 has integrated autocorrelation time
        # (1 + 0.9) / (1 - 0.9) = 19
        rng = np.random.default_rng(2)
        n = 20000
        x = np.empty(n)
        x[0] = 0.0
        noise = rng.standard_normal(n)
        for k in range(1, n):
            x[k] = 0.9 * x[k - 1] + noise[k]
        chain = Chain(
            states=x[:, None],
            accepted=np.ones(n - 1, dtype=bool),
            log_likelihoods=np.zeros(n),
            step_size=0.1,
            seed=0,
        )
        summary = summarize_chain(chain, burn_in_fraction=0.0)
        expected = n / 19.0
        assert 0.6 * expected < summary.ess[0] < 1.4 * expected

    def test_burn_in_arithmetic(self):
        chain = self.iid_chain(18001, 1, seed=3)
        summary = summarize_chain(chain, burn_in_fraction=0.1)
        assert summary.n_retained == 16200

    def test_short_chain_rejected(self):
        chain = self.iid_chain(110, 1, seed=4)
        with pytest.raises(HalbachError, match="at least 100"):
            summarize_chain(chain, burn_in_fraction=0.5)
        with pytest.raises(HalbachError, match="burn-in"):
            summarize_chain(chain, burn_in_fraction=1.5)

    def test_ess_never_exceeds_retained_count(self):
        chain = self.iid_chain(500, 3, seed=5)
        summary = summarize_chain(chain, burn_in_fraction=0.2)
        assert np.all(summary.ess <= summary.n_retained)

    def test_pooled_chains_sum_ess(self):
        chains = [self.iid_chain(1000, 2, seed=s) for s in (6, 7, 8)]
        pooled = summarize_chains(chains, burn_in_fraction=0.0)
        singles = [summarize_chain(c, burn_in_fraction=0.0) for c in chains]
        assert pooled.n_retained == 3000
        assert np.allclose(pooled.ess, np.sum([s.ess for s in singles], axis=0))
        stacked = np.vstack([c.states for c in chains])
        assert np.allclose(pooled.mean, stacked.mean(axis=0))

    def test_pooled_mean_standard_error_is_consistent(self):
        # repeated pooled estimates of a known zero mean should land within
        # 3 reported standard errors most of the time; check one fixed case
        chains = [self.iid_chain(2000, 1, seed=s) for s in (9, 10)]
        pooled = summarize_chains(chains, burn_in_fraction=0.0)
        assert abs(pooled.mean[0]) < 3.0 * pooled.std_error[0]
