"""Intra-lab hierarchical model over (E, A, x_1..x_K).

Each repetition's log abundance x_k = log10(N0^k + 1) follows a gamma law
with mean E and signal-to-noise sqrt(A); E is uniform on (0, M) and A is
exponential with scale b.  The sampler works on the continuous x_k with the
real-trials binomial likelihood.

E appears in the joint only through a truncated inverse-gamma kernel, so the
default fit integrates it out in closed form (an upper incomplete gamma),
runs the t-walk on (log A, x_1..x_K), and redraws E exactly from its
conditional for every kept sample.  That removes the E-A funnel that
otherwise wrecks the chain's effective sample size, and the exported chain
is still over (E, A, x_1..x_K).

Two conventions are offered for the abundance prior represented by the
continuous coordinate: "uniform-x" (default; the gamma hierarchy is the
density of x itself, which is what reproduces the published
limit-of-detection values) and "uniform-n0" (an extra 10^x ln10 factor makes
the implied prior uniform over the integer abundance).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import exp1, gammainc, gammaincc, gammainccinv, gammaln

from . import exactpost, mcmc
from .design import DataError, crude_abundance
from .kernels import LN10, DropTerms, success_prob

__all__ = [
    "HierParams",
    "PosteriorChain",
    "ClassicalSummary",
    "HierPosterior",
    "MarginalHierPosterior",
    "log_posterior",
    "fit",
    "activation_probability",
    "log_reduction",
    "classical_summary",
    "summarize",
]

_NEG_INF = float("-inf")
_LOG_LN10 = math.log(LN10)

N0_PRIORS = ("uniform-x", "uniform-n0")

# the dispersion support is capped at A_CAP_FACTOR * b: the exponential
# prior leaves e^-200 mass beyond, and unbounded shapes send the incomplete
# gamma functions into argument ranges scipy cannot handle
A_CAP_FACTOR = 200.0
_LA_LO = -60.0


@dataclass(frozen=True)
class HierParams:
    """One point of the intra-lab parameter space."""

    e: float
    a: float
    x: tuple

    def as_vector(self):
        return np.array([self.e, self.a, *self.x], dtype=float)


@dataclass(eq=False)
class PosteriorChain:
    """A fitted intra-lab chain over (e, a, x_1..x_K)."""

    chain: mcmc.Chain
    experiment: object
    priors: object
    seed: object
    n0_prior: str

    @property
    def param_names(self):
        return ["e", "a"] + [f"x_{rep.rep_id}" for rep in self.experiment.reps]

    @property
    def e_samples(self):
        return self.chain.samples[:, 0]

    @property
    def a_samples(self):
        return self.chain.samples[:, 1]

    @property
    def x_samples(self):
        return self.chain.samples[:, 2:]

    @property
    def abundance_samples(self):
        """Pooled posterior draws of the repetition abundances 10^x - 1."""
        return (10.0 ** self.x_samples - 1.0).ravel()

    def __len__(self):
        return len(self.chain)


@dataclass(frozen=True)
class ClassicalSummary:
    """Mean / SD of the crude log abundances and the 3-sigma interval the
    log-normal style analysis would report (which may dip below zero)."""

    mean: float
    sd: float
    interval_3sigma: tuple


class HierPosterior:
    """Callable log posterior on (e, a, x_1..x_K) with precomputed
    per-repetition likelihood terms."""

    def __init__(self, experiment, priors, n0_prior="uniform-x", q_override=None):
        if n0_prior not in N0_PRIORS:
            raise ValueError(f"n0_prior must be one of {N0_PRIORS}")
        self.experiment = experiment
        self.M = priors.M
        self.b = priors.b
        self.a_cap = A_CAP_FACTOR * priors.b
        self.n0_prior = n0_prior
        design = experiment.design
        self.terms = tuple(
            DropTerms(
                rep.drops,
                success_prob(design, rep.selected_dilution, q_override).s_star,
                design.c,
            )
            for rep in experiment.reps
        )
        self.K = len(self.terms)
        self.dim = self.K + 2

    def support(self, theta):
        e = theta[0]
        a = theta[1]
        if not (0.0 < e < self.M and 0.0 < a < self.a_cap):
            return False
        xs = theta[2:]
        return bool(np.all(xs > 0.0) and np.all(xs < self.M))

    def loglik(self, xs):
        """Data part only: sum of rep log likelihoods at x-coordinates."""
        ll = 0.0
        for k in range(self.K):
            term = self.terms[k].loglik(10.0 ** xs[k] - 1.0)
            if term == _NEG_INF:
                return _NEG_INF
            ll += term
        return ll

    def lab_terms(self, e, a, xs):
        """Everything except the prior on e: likelihoods, gamma hierarchy,
        the optional abundance-prior factor, and the Exp(b) prior on a."""
        if not (0.0 < e < self.M and 0.0 < a < self.a_cap):
            return _NEG_INF
        ll = self.loglik(xs)
        if ll == _NEG_INF:
            return _NEG_INF
        lp = ll - math.log(self.b) - a / self.b
        lgam_a = math.lgamma(a)
        a_log_ae = a * math.log(a / e)
        jac = self.n0_prior == "uniform-n0"
        for k in range(self.K):
            x = xs[k]
            if not 0.0 < x < self.M:
                return _NEG_INF
            lp += a_log_ae - lgam_a + (a - 1.0) * math.log(x) - a * x / e
            if jac:
                lp += x * LN10 + _LOG_LN10
        return lp

    def __call__(self, theta):
        lp = self.lab_terms(float(theta[0]), float(theta[1]), theta[2:])
        if lp == _NEG_INF:
            return _NEG_INF
        return lp - math.log(self.M)

    def log_post_vec(self, samples):
        """Log posterior for a (T, K+2) array of in-support samples."""
        e = samples[:, 0]
        a = samples[:, 1]
        out = np.full(e.shape, -math.log(self.M) - math.log(self.b))
        out -= a / self.b
        lgam_a = gammaln(a)
        for k in range(self.K):
            x = samples[:, 2 + k]
            out += self.terms[k].loglik_vec(10.0 ** x - 1.0)
            out += a * np.log(a / e) - lgam_a + (a - 1.0) * np.log(x) - a * x / e
            if self.n0_prior == "uniform-n0":
                out += x * LN10 + _LOG_LN10
        return out


def _log_upper_gamma(s, z):
    """log of the (non-regularized) upper incomplete gamma G(s, z), for
    s > -1 and z > 0."""
    if z <= 0.0:
        raise ValueError("z must be positive")
    if s > 0.0:
        g = gammaincc(s, z)
        if g > 0.0:
            return math.lgamma(s) + math.log(g)
        # z >> s: two-term asymptotic expansion G(s,z) ~ z^(s-1) e^-z
        return (s - 1.0) * math.log(z) - z + math.log1p((s - 1.0) / z)
    # s <= 0 from here (reachable only for a <= 1/K).  For large z the
    # recurrence below cancels catastrophically and exp1 underflows; the
    # asymptotic series G(s,z) ~ z^(s-1) e^-z (1 + (s-1)/z + ...) takes over.
    if z >= 60.0:
        corr = 1.0 + (s - 1.0) / z + (s - 1.0) * (s - 2.0) / z**2
        return (s - 1.0) * math.log(z) - z + math.log(corr)
    if s == 0.0:
        return math.log(exp1(z))
    # -1 < s < 0: G(s, z) = (G(s+1, z) - z^s e^-z) / s, rearranged for s < 0.
    log_b = s * math.log(z) - z
    log_a = _log_upper_gamma(s + 1.0, z)
    ratio = math.exp(min(log_a - log_b, 0.0))
    if ratio >= 1.0 - 1e-13:
        corr = 1.0 + (s - 1.0) / z + (s - 1.0) * (s - 2.0) / z**2
        return (s - 1.0) * math.log(z) - z + math.log(max(corr, 1e-300))
    return log_b + math.log1p(-ratio) - math.log(-s)


class MarginalHierPosterior:
    """Log posterior of (log a, x_1..x_K) with E integrated out.

    The E conditional given (a, x) is inverse-gamma truncated to (0, M);
    its normalizer is the upper incomplete gamma used here, and fits draw E
    back from that conditional for every kept sample.
    """

    def __init__(self, experiment, priors, n0_prior="uniform-x", q_override=None):
        self.base = HierPosterior(experiment, priors, n0_prior, q_override)
        self.M = priors.M
        self.b = priors.b
        self.la_hi = math.log(self.base.a_cap)
        self.K = self.base.K
        self.dim = self.K + 1

    def support(self, phi):
        la = phi[0]
        if not _LA_LO < la < self.la_hi:
            return False
        xs = phi[1:]
        return bool(np.all(xs > 0.0) and np.all(xs < self.M))

    def log_density(self, la, xs):
        """Density over (log a, x_1..x_K), including the log-a Jacobian."""
        if not _LA_LO < la < self.la_hi:
            return _NEG_INF
        if not (np.all(xs > 0.0) and np.all(xs < self.M)):
            return _NEG_INF
        a = math.exp(la)
        K = self.K
        ll = self.base.loglik(xs)
        if ll == _NEG_INF:
            return _NEG_INF
        S = float(np.sum(xs))
        sum_log_x = float(np.sum(np.log(xs)))
        s = a * K - 1.0
        log_as = math.log(a) + math.log(S)
        lp = (
            ll
            + a * K * la
            - K * math.lgamma(a)
            + (a - 1.0) * sum_log_x
            - s * log_as
            + _log_upper_gamma(s, a * S / self.M)
            - math.log(self.M)
            - math.log(self.b)
            - a / self.b
            + la  # Jacobian of a = exp(la)
        )
        if self.base.n0_prior == "uniform-n0":
            lp += S * LN10 + K * _LOG_LN10
        return lp

    def __call__(self, phi):
        return self.log_density(float(phi[0]), phi[1:])


class _TubeCoords:
    """Sampler coordinates (log a, l, w_2..w_K) for the collapsed posterior,
    where l is the mean log x and the deviations of log x_k from l are
    w_k / sqrt(a) with w_1 = -(w_2 + ... + w_K).

    Under the gamma hierarchy the log-abundance deviations have relative
    width 1/sqrt(a), so in these coordinates the repetitions' block is an
    O(1) ball for every a: the a-versus-x funnel that stalls the sampler on
    weak-likelihood (all-zero) data disappears.  For K = 1 this is just
    (log a, log x_1).
    """

    def __init__(self, marginal):
        self.marginal = marginal
        self.K = marginal.K
        self.M = marginal.M
        self.la_hi = marginal.la_hi
        self.dim = marginal.dim
        self._log_k = math.log(self.K)

    def _xs(self, phi):
        la = float(phi[0])
        ell = float(phi[1])
        if self.K == 1:
            return np.array([math.exp(ell)])
        w_rest = phi[2:]
        w1 = -float(np.sum(w_rest))
        root_a = math.exp(0.5 * la)
        logx = np.empty(self.K)
        logx[0] = ell + w1 / root_a
        logx[1:] = ell + w_rest / root_a
        return np.exp(logx)

    def support(self, phi):
        la = float(phi[0])
        if not _LA_LO < la < self.la_hi:
            return False
        if not -300.0 < float(phi[1]) < math.log(self.M):
            return False
        xs = self._xs(phi)
        return bool(np.all(xs > 0.0) and np.all(xs < self.M))

    def __call__(self, phi):
        la = float(phi[0])
        if not _LA_LO < la < self.la_hi:
            return _NEG_INF
        if not -300.0 < float(phi[1]) < math.log(self.M):
            return _NEG_INF
        xs = self._xs(phi)
        if not np.all(xs < self.M):
            return _NEG_INF
        lp = self.marginal.log_density(la, xs)
        if lp == _NEG_INF:
            return _NEG_INF
        # |d(x)/d(l, w)| = K * prod(x) * a^-((K-1)/2); the log-a Jacobian is
        # already inside the marginal density
        return lp + self._log_k + float(np.sum(np.log(xs))) - 0.5 * (self.K - 1) * la

    def to_phi(self, la, xs):
        logx = np.log(xs)
        ell = float(np.mean(logx))
        if self.K == 1:
            return np.array([la, ell])
        w = (logx - ell) * math.exp(0.5 * la)
        return np.array([la, ell, *w[1:]])

    def xs_matrix(self, phis):
        """Vectorized back-transform of a (T, dim) sample array to x values."""
        ell = phis[:, 1]
        if self.K == 1:
            return np.exp(ell)[:, None]
        root_a = np.exp(0.5 * phis[:, 0])[:, None]
        w_rest = phis[:, 2:]
        w1 = -w_rest.sum(axis=1)
        logx = np.empty((phis.shape[0], self.K))
        logx[:, 0] = ell + w1 / root_a[:, 0]
        logx[:, 1:] = ell[:, None] + w_rest / root_a
        return np.exp(logx)


def _draw_e_given_ax(a, S, K, M, rng):
    """Exact draw of E | A, x: 1/E ~ Gamma(aK - 1, rate aS) truncated to
    1/E >= 1/M.  Vectorized over samples; the s <= 0 corner (a <= 1/K,
    negligible prior mass) falls back to rejection sampling."""
    a = np.asarray(a, dtype=float)
    S = np.asarray(S, dtype=float)
    s = a * K - 1.0
    r = a * S
    u0 = 1.0 / M
    v = rng.random(a.shape)
    u = np.empty_like(a)
    pos = s > 1e-8
    if np.any(pos):
        # invert the upper tail: P(U > u)/P(U > u0) = 1 - v
        cc0 = gammaincc(s[pos], r[pos] * u0)
        target = np.maximum(cc0 * (1.0 - v[pos]), 1e-300)
        u[pos] = gammainccinv(s[pos], np.minimum(target, 1.0)) / r[pos]
    for i in np.nonzero(~pos)[0]:
        # a <= 1/K corner (negligible prior mass): exact inverse CDF by
        # bisection on log G(s, r u), which handles the -1 < s <= 0 shapes
        # scipy's inverses do not
        si, ri, vi = float(s[i]), float(r[i]), float(v[i])
        log_tail0 = _log_upper_gamma(si, ri * u0)
        target = log_tail0 + math.log1p(-min(vi, 1.0 - 1e-16))
        lo, hi = math.log(u0), math.log(u0) + 200.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _log_upper_gamma(si, ri * math.exp(mid)) > target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12:
                break
        u[i] = math.exp(0.5 * (lo + hi))
    return 1.0 / np.maximum(u, u0 * (1.0 + 1e-12))


def log_posterior(params, experiment, priors, n0_prior="uniform-x", q_override=None):
    """Log posterior density at one parameter point (HierParams or vector)."""
    post = HierPosterior(experiment, priors, n0_prior=n0_prior, q_override=q_override)
    theta = params.as_vector() if isinstance(params, HierParams) else np.asarray(params, float)
    if theta.size != post.dim:
        raise ValueError(f"expected {post.dim} parameters, got {theta.size}")
    return post(theta)


def initial_points(experiment, priors, rng, q_override=None):
    """Two starting points for the sampler: each x_k drawn from its free
    posterior (jittered into the continuum), E the mean of the x_k, A from
    its prior."""
    free = [
        exactpost.free_posterior(rep, experiment.design, priors, q_override=q_override)
        for rep in experiment.reps
    ]
    eps = 1e-9 * priors.M

    def one():
        xs = []
        for fp in free:
            n0 = float(fp.sample(rng))
            x = math.log10(n0 + rng.random() + 1.0)
            xs.append(min(max(x, eps), priors.M - eps))
        # a small multiplicative jitter keeps the two starting points off the
        # e = mean(x) ridge (and distinct in every coordinate)
        e = float(np.mean(xs)) * math.exp(0.05 * rng.standard_normal())
        e = min(max(e, eps), priors.M - eps)
        a = min(max(rng.exponential(priors.b), 1e-6), 0.9 * A_CAP_FACTOR * priors.b)
        return np.array([e, a, *xs])

    pa = one()
    pb = one()
    for _ in range(100):
        if np.all(pa != pb):
            return pa, pb
        pb = one()
    raise RuntimeError("could not draw two distinct starting points")


def fit(
    experiment,
    priors,
    iterations=500_000,
    seed=0,
    n0_prior="uniform-x",
    q_override=None,
    burn_in=None,
    min_ess=2000.0,
    check_diagnostics=True,
    sampler_coords="collapsed",
):
    """Sample the intra-lab posterior with the t-walk.

    Deterministic given ``seed``.  With sampler_coords="collapsed" (default)
    the chain runs on (log A, x) with E integrated out and redrawn exactly;
    "direct" runs on (E, A, x) as stated.  Raises DiagnosticError (with the
    chain attached) when the effective sample size of E ends up below
    ``min_ess`` and ``check_diagnostics`` is set.
    """
    post = HierPosterior(experiment, priors, n0_prior=n0_prior, q_override=q_override)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, walk_ss, aug_ss = ss.spawn(3)
    rng = np.random.Generator(np.random.PCG64(init_ss))
    pa, pb = initial_points(experiment, priors, rng, q_override=q_override)

    if sampler_coords == "direct":
        chain = mcmc.sample(
            post, post.support, pa, pb, iterations=iterations, seed=walk_ss, burn_in=burn_in
        )
    elif sampler_coords == "collapsed":
        marg = MarginalHierPosterior(
            experiment, priors, n0_prior=n0_prior, q_override=q_override
        )
        coords = _TubeCoords(marg)
        phi_a = coords.to_phi(math.log(pa[1]), pa[2:])
        phi_b = coords.to_phi(math.log(pb[1]), pb[2:])
        inner = mcmc.sample(
            coords, coords.support, phi_a, phi_b, iterations=iterations, seed=walk_ss,
            burn_in=burn_in,
        )
        a = np.exp(inner.samples[:, 0])
        xs = coords.xs_matrix(inner.samples)
        aug_rng = np.random.Generator(np.random.PCG64(aug_ss))
        e = _draw_e_given_ax(a, xs.sum(axis=1), marg.K, priors.M, aug_rng)
        samples = np.column_stack([e, a, xs])
        taus = np.array(
            [
                mcmc.iat(samples[:, k]) if len(samples) >= 100 else 1.0
                for k in range(samples.shape[1])
            ]
        )
        t_kept = samples.shape[0]
        with np.errstate(divide="ignore"):
            ess_vec = np.minimum(t_kept / taus, float(t_kept))
        chain = mcmc.Chain(
            samples=samples,
            log_post=post.log_post_vec(samples),
            seed=inner.seed,
            acceptance_rate=inner.acceptance_rate,
            iat_per_dim=taus,
            ess_per_dim=ess_vec,
            burn_in=inner.burn_in,
        )
    else:
        raise ValueError(f"unknown sampler_coords {sampler_coords!r}")

    pchain = PosteriorChain(
        chain=chain, experiment=experiment, priors=priors, seed=seed, n0_prior=n0_prior
    )
    if check_diagnostics:
        ess_e = float(chain.ess_per_dim[0])
        if not ess_e >= min_ess:
            raise mcmc.DiagnosticError(
                f"ESS of E is {ess_e:.0f} < {min_ess:.0f} "
                f"(per-dimension ESS: {np.array2string(chain.ess_per_dim, precision=1)})",
                chain=pchain,
            )
    return pchain


def activation_probability(pchain, e_h):
    """P(E < e_h | data): the posterior probability the mean log abundance
    fell below an agreed threshold."""
    return float(np.mean(pchain.e_samples < e_h))


def log_reduction(control, treated, threshold=3.0):
    """Log-reduction samples E_control - E_treated (paired by iteration
    after truncation to the common length) and P(LR > threshold)."""
    n = min(len(control), len(treated))
    if n == 0:
        raise ValueError("empty chain")
    lr = control.e_samples[:n] - treated.e_samples[:n]
    return lr, float(np.mean(lr > threshold))


def classical_summary(experiment):
    """Mean and SD of the per-repetition crude log abundances, with the
    3-sigma interval of the classic analysis."""
    vals = []
    for rep in experiment.reps:
        if not rep.counted:
            raise DataError(f"rep {rep.rep_id}: crude estimate undefined (all censored)")
        vals.append(math.log10(crude_abundance(rep, experiment.design) + 1.0))
    mean = float(np.mean(vals))
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return ClassicalSummary(
        mean=mean, sd=sd, interval_3sigma=(mean - 3.0 * sd, mean + 3.0 * sd)
    )


def _param_summary(samples, iat_val, ess_val):
    lo, med, hi = np.quantile(samples, [0.025, 0.5, 0.975])
    return {
        "mean": float(np.mean(samples)),
        "median": float(med),
        "ci95": [float(lo), float(hi)],
        "iat": float(iat_val),
        "ess": float(ess_val),
    }


def summarize(pchain):
    """JSON-ready summary of a fitted chain."""
    ch = pchain.chain
    out = {
        "seed": pchain.seed if isinstance(pchain.seed, int) else str(pchain.seed),
        "n0_prior": pchain.n0_prior,
        "iterations_kept": len(ch),
        "burn_in": ch.burn_in,
        "acceptance_rate": ch.acceptance_rate,
        "params": {},
    }
    for k, name in enumerate(pchain.param_names):
        out["params"][name] = _param_summary(
            ch.samples[:, k], ch.iat_per_dim[k], ch.ess_per_dim[k]
        )
    return out
