"""Bayesian updating of magnetization parameters.

Two routes from prior to posterior:

* linear forward model: the posterior is Gaussian in closed form and
  ``conjugate_update`` evaluates it with Cholesky factorizations only;
* nonlinear forward model: ``run_chain`` samples the posterior with the
  preconditioned Crank-Nicolson (pCN) Metropolis-Hastings kernel, whose
  acceptance ratio needs the likelihood but never the prior density.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .errors import HalbachError
from .prior import GaussianDensity
from .utils import parallel_map

#: forward model: flat parameter vector -> predicted observable vector
ForwardModel = Callable[[np.ndarray], np.ndarray]

DEFAULT_STEP_SIZE = 1.0 / 80.0
DEFAULT_BURN_IN = 0.1


def _as_noise_var(noise_var, n_obs: int) -> np.ndarray:
    var = np.asarray(noise_var, dtype=float)
    if var.ndim == 0:
        var = np.full(n_obs, float(var))
    if var.shape != (n_obs,):
        raise HalbachError(f"noise variances must have shape ({n_obs},), got {var.shape}")
    if not np.all(np.isfinite(var)) or np.any(var <= 0.0):
        raise HalbachError("noise variances must be finite and positive")
    return var


def _forward_matrix(forward) -> np.ndarray:
    matrix = getattr(forward, "matrix", forward)
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2:
        raise HalbachError("linear forward model must provide a 2-D matrix")
    return matrix


def _chol_spd(matrix: np.ndarray, what: str) -> np.ndarray:
    """Lower Cholesky factor, with a diagnostic eigenvalue on failure."""
    if not np.all(np.isfinite(matrix)):
        raise HalbachError(f"{what} has non-finite entries")
    try:
        return cholesky(matrix, lower=True)
    except Exception as exc:
        smallest = float(np.linalg.eigvalsh(matrix).min())
        raise HalbachError(
            f"{what} is not positive definite (smallest eigenvalue {smallest:.3e})"
        ) from exc


def conjugate_update(operator, noise_var, q_obs, prior: GaussianDensity) -> GaussianDensity:
    """Closed-form Gaussian posterior for a linear forward model.

    The posterior covariance is the inverse of Ht S^-1 H + C0^-1, evaluated
    by factoring that bracketed matrix; the prior covariance enters only
    through solves against its cached Cholesky factor.
    """
    H = _forward_matrix(operator)
    m, d = H.shape
    if d != prior.dim:
        raise HalbachError(f"operator has {d} columns but the prior has dimension {prior.dim}")
    q = np.asarray(q_obs, dtype=float)
    if q.shape != (m,):
        raise HalbachError(f"observations must have shape ({m},), got {q.shape}")
    var = _as_noise_var(noise_var, m)

    prior_info = cho_solve((prior.chol, True), np.eye(d))
    Hw = H / var[:, None]
    normal = H.T @ Hw + prior_info
    normal = 0.5 * (normal + normal.T)
    factor = _chol_spd(normal, "posterior information matrix")
    rhs = H.T @ (q / var) + prior_info @ prior.mean
    mean = cho_solve((factor, True), rhs)
    cov = cho_solve((factor, True), np.eye(d))
    cov = 0.5 * (cov + cov.T)
    return GaussianDensity(mean=mean, cov=cov)


def log_likelihood(p, q_obs, noise_var, forward: ForwardModel) -> float:
    """Gaussian data log-likelihood up to an additive constant.

    Returns -0.5 (H(p) - q_obs)t S^-1 (H(p) - q_obs); the normalization
    constant is dropped since only differences enter the sampler.
    """
    values = getattr(p, "values", p)
    predicted = np.asarray(forward(np.asarray(values, dtype=float)), dtype=float)
    q = np.asarray(q_obs, dtype=float)
    if predicted.shape != q.shape:
        raise HalbachError(
            f"forward model returned shape {predicted.shape}, observations have {q.shape}"
        )
    if not np.all(np.isfinite(predicted)):
        raise HalbachError("forward model returned non-finite values")
    var = _as_noise_var(noise_var, len(q))
    r = predicted - q
    return -0.5 * float(r @ (r / var))


def accept_probability(log_lik_current: float, log_lik_proposed: float) -> float:
    """min(1, exp(proposed - current)), safely in log space."""
    diff = log_lik_proposed - log_lik_current
    if diff >= 0.0:
        return 1.0
    return math.exp(diff)


def pcn_propose(p, prior: GaussianDensity, s: float, rng: np.random.Generator) -> np.ndarray:
    """Prior-reversible pCN proposal.

    p_hat = mu0 + sqrt(1 - s^2) (p - mu0) + s L xi with xi standard normal.
    Reversibility with respect to N(mu0, C0) is what cancels the prior from
    the acceptance ratio.
    """
    if not 0.0 < s <= 1.0:
        raise HalbachError(f"step size must be in (0, 1], got {s}")
    values = np.asarray(getattr(p, "values", p), dtype=float)
    xi = rng.standard_normal(prior.dim)
    return prior.mean + math.sqrt(1.0 - s * s) * (values - prior.mean) + s * (prior.chol @ xi)


def pcn_accept_prob(p, p_hat, q_obs, noise_var, forward: ForwardModel) -> float:
    """Acceptance probability of the prior-reversible pCN kernel."""
    current = log_likelihood(p, q_obs, noise_var, forward)
    proposed = log_likelihood(p_hat, q_obs, noise_var, forward)
    return accept_probability(current, proposed)


@dataclass(frozen=True)
class Chain:
    """One pCN run: every visited state plus per-step bookkeeping.

    ``states`` has one row per state, starting at the prior mean; row k of
    a rejected step equals row k-1 bit-exactly.  ``log_likelihoods`` aligns
    with ``states``; ``accepted`` has one flag per transition.
    """

    states: np.ndarray
    accepted: np.ndarray
    log_likelihoods: np.ndarray
    step_size: float
    seed: int
    mode: str = "prior_reversible"

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        accepted = np.asarray(self.accepted, dtype=bool)
        logliks = np.asarray(self.log_likelihoods, dtype=float)
        if states.ndim != 2 or len(states) < 1:
            raise HalbachError("states must be a (n_states, dim) array")
        if accepted.shape != (len(states) - 1,):
            raise HalbachError("need one accepted flag per transition")
        if logliks.shape != (len(states),):
            raise HalbachError("need one log-likelihood per state")
        if not np.all(np.isfinite(states)):
            raise HalbachError("chain states must be finite")
        for arr, name in ((states, "states"), (accepted, "accepted"), (logliks, "log_likelihoods")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def acceptance_rate(self) -> float:
        if self.n_steps == 0:
            return 0.0
        return float(self.accepted.mean())


class ChainAborted(HalbachError):
    """Forward-model failure mid-chain; carries the states visited so far."""

    def __init__(self, message: str, partial_chain: Chain):
        super().__init__(message)
        self.partial_chain = partial_chain


def run_chain(
    forward: ForwardModel,
    prior: GaussianDensity,
    q_obs,
    noise_var,
    n_steps: int,
    seed: int,
    s: float = DEFAULT_STEP_SIZE,
    strict_paper: bool = False,
) -> Chain:
    """Sample the posterior with pCN Metropolis-Hastings.

    Starts at the prior mean and runs ``n_steps`` transitions with one
    forward evaluation each (the current state's likelihood is cached).
    ``strict_paper`` switches to the literal proposal N(sqrt(1-s^2) p, s C0)
    without recentering; that proposal is not prior-reversible, so the
    acceptance ratio then uses the full Metropolis-Hastings form with the
    unnormalized posterior and both proposal densities.
    """
    if n_steps < 1:
        raise HalbachError(f"n_steps must be >= 1, got {n_steps}")
    if not 0.0 < s <= 1.0:
        raise HalbachError(f"step size must be in (0, 1], got {s}")
    q = np.asarray(q_obs, dtype=float)
    var = _as_noise_var(noise_var, len(q))
    rng = np.random.default_rng(seed)

    d = prior.dim
    mu0 = prior.mean
    L = prior.chol
    sqrt_shrink = math.sqrt(1.0 - s * s)
    mode = "literal_proposal" if strict_paper else "prior_reversible"

    states = np.empty((n_steps + 1, d))
    accepted = np.empty(n_steps, dtype=bool)
    # nan marks not-yet-evaluated states in a partial chain after an abort
    logliks = np.full(n_steps + 1, np.nan)
    states[0] = mu0

    def loglik_at(x, k):
        try:
            return log_likelihood(x, q, var, forward)
        except Exception as exc:
            partial = Chain(
                states=states[: k + 1].copy(),
                accepted=accepted[:k].copy(),
                log_likelihoods=logliks[: k + 1].copy(),
                step_size=s,
                seed=seed,
                mode=mode,
            )
            raise ChainAborted(
                f"forward model failed at step {k}: {exc}", partial
            ) from exc

    def prior_quad(x):
        w = solve_triangular(L, x - mu0, lower=True)
        return -0.5 * float(w @ w)

    def proposal_quad(to_state, from_state):
        # log density of N(sqrt(1-s^2) from, s C0) at to, constants dropped
        w = solve_triangular(L, to_state - sqrt_shrink * from_state, lower=True)
        return -0.5 * float(w @ w) / s

    current = states[0]
    logliks[0] = loglik_at(current, 0)
    current_ll = logliks[0]
    if strict_paper:
        current_prior = prior_quad(current)

    for k in range(1, n_steps + 1):
        xi = rng.standard_normal(d)
        if strict_paper:
            proposal = sqrt_shrink * current + math.sqrt(s) * (L @ xi)
        else:
            proposal = mu0 + sqrt_shrink * (current - mu0) + s * (L @ xi)
        proposal_ll = loglik_at(proposal, k - 1)
        if strict_paper:
            proposal_prior = prior_quad(proposal)
            log_ratio = (
                proposal_ll
                + proposal_prior
                + proposal_quad(current, proposal)
                - current_ll
                - current_prior
                - proposal_quad(proposal, current)
            )
        else:
            log_ratio = proposal_ll - current_ll
        accept = log_ratio >= 0.0 or rng.uniform() < math.exp(log_ratio)
        accepted[k - 1] = accept
        if accept:
            current = proposal
            current_ll = proposal_ll
            if strict_paper:
                current_prior = proposal_prior
        states[k] = current
        logliks[k] = current_ll

    return Chain(
        states=states,
        accepted=accepted,
        log_likelihoods=logliks,
        step_size=s,
        seed=seed,
        mode=mode,
    )


def run_chains(
    forward: ForwardModel,
    prior: GaussianDensity,
    q_obs,
    noise_var,
    n_steps: int,
    seeds: Sequence[int],
    s: float = DEFAULT_STEP_SIZE,
    strict_paper: bool = False,
    forward_factory: Callable[[], ForwardModel] | None = None,
) -> list[Chain]:
    """Independent chains, one per seed, merged in seed order.

    ``forward_factory`` builds a private forward model per chain for forward
    models that keep internal state; otherwise all chains share ``forward``,
    which must then be safe to call concurrently.
    """
    if len(seeds) == 0:
        raise HalbachError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise HalbachError("seeds must be distinct")

    def one(seed):
        fwd = forward_factory() if forward_factory is not None else forward
        return run_chain(
            fwd, prior, q_obs, noise_var, n_steps, seed, s=s, strict_paper=strict_paper
        )

    return parallel_map(one, list(seeds))


# ---------------------------------------------------------------------------
# chain summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorSummary:
    """Sample statistics of retained (post-burn-in) chain states."""

    mean: np.ndarray
    covariance: np.ndarray
    std_error: np.ndarray
    ess: np.ndarray
    n_retained: int
    burn_in_fraction: float

    def __post_init__(self):
        for name in ("mean", "covariance", "std_error", "ess"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def marginal_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _retained(chain: Chain, burn_in_fraction: float) -> np.ndarray:
    if not 0.0 <= burn_in_fraction < 1.0:
        raise HalbachError(f"burn-in fraction must be in [0, 1), got {burn_in_fraction}")
    n = len(chain.states)
    drop = math.ceil(burn_in_fraction * n)
    retained = chain.states[drop:]
    if len(retained) < 100:
        raise HalbachError(
            f"only {len(retained)} states retained after burn-in, need at least 100"
        )
    return retained


def _ess_per_coordinate(samples: np.ndarray) -> np.ndarray:
    """Effective sample size from the initial-positive-sequence truncation.

    Autocovariances come from one FFT per coordinate; consecutive pairs of
    autocorrelations are summed and the sum is truncated at the first
    non-positive pair.  ESS is capped at the sample count.  Coordinates with
    zero variance get ESS equal to the sample count and trigger a warning.
    """
    n, d = samples.shape
    ess = np.empty(d)
    centered = samples - samples.mean(axis=0)
    variances = (centered * centered).sum(axis=0)
    flat = 0
    nfft = 1 << (2 * n - 1).bit_length()
    for c in range(d):
        if variances[c] == 0.0:
            ess[c] = n
            flat += 1
            continue
        spec = np.fft.rfft(centered[:, c], nfft)
        acov = np.fft.irfft(spec * np.conj(spec), nfft)[:n]
        rho = acov / acov[0]
        n_pairs = n // 2
        pair = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs : 2]
        bad = np.nonzero(pair <= 0.0)[0]
        stop = int(bad[0]) if len(bad) else n_pairs
        tau = max(2.0 * float(pair[:stop].sum()) - 1.0, 1.0 / n)
        ess[c] = min(n / tau, n)
    if flat:
        warnings.warn(
            f"{flat} coordinate(s) have zero variance; their ESS is set to the sample count",
            stacklevel=3,
        )
    return ess


def summarize_chain(chain: Chain, burn_in_fraction: float = DEFAULT_BURN_IN) -> PosteriorSummary:
    """Sample mean/covariance of the retained states with per-coordinate ESS.

    The Monte Carlo standard error of each mean coordinate is the sample
    standard deviation divided by sqrt(ESS).
    """
    retained = _retained(chain, burn_in_fraction)
    mean = retained.mean(axis=0)
    cov = np.atleast_2d(np.cov(retained, rowvar=False, ddof=1))
    ess = _ess_per_coordinate(retained)
    std = np.sqrt(np.diag(cov))
    return PosteriorSummary(
        mean=mean,
        covariance=cov,
        std_error=std / np.sqrt(ess),
        ess=ess,
        n_retained=len(retained),
        burn_in_fraction=burn_in_fraction,
    )


def summarize_chains(
    chains: Sequence[Chain], burn_in_fraction: float = DEFAULT_BURN_IN
) -> PosteriorSummary:
    """Pool post-burn-in states of independent chains.

    Mean and covariance come from the pooled sample; the effective sample
    size is the per-chain ESS summed coordinate-wise, which is valid because
    the chains are independent.
    """
    if len(chains) == 0:
        raise HalbachError("need at least one chain")
    retained = [_retained(c, burn_in_fraction) for c in chains]
    ess = np.sum([_ess_per_coordinate(r) for r in retained], axis=0)
    pooled = np.vstack(retained)
    mean = pooled.mean(axis=0)
    cov = np.atleast_2d(np.cov(pooled, rowvar=False, ddof=1))
    std = np.sqrt(np.diag(cov))
    return PosteriorSummary(
        mean=mean,
        covariance=cov,
        std_error=std / np.sqrt(ess),
        ess=ess,
        n_retained=len(pooled),
        burn_in_fraction=burn_in_fraction,
    )
