"""Exact discrete posteriors over the tube-0 abundance: free posteriors,
marginal likelihoods, Bayes factors, and the limit of detection.

The abundance prior is discrete uniform on {0, ..., 10^M}.  Likelihoods are
scanned over an adaptive integer support bracketing the data: exact
enumeration where the span allows, an integer-decimated grid with per-bin
mass aggregation beyond, and an analytic plateau for all-censored data whose
likelihood stays flat up to the prior cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaincc

from . import kernels
from .specfun import log_sum_exp

_NEG_INF = float("-inf")

GRID_CAP = 1_000_000  # most likelihood evaluations a support scan may spend
DROP_NATS = 40.0  # bracket expands until the log likelihood falls this far
TAIL_TARGET = 1e-10  # excluded-tail mass the bracket must guarantee
PLATEAU_EPS = 1e-12  # survival term within this of 1 counts as flat


@dataclass(frozen=True, eq=False)
class DiscretePosterior:
    """Normalized probability mass over integer abundances.

    ``support`` is strictly increasing; when a scan was decimated an entry
    represents a bin of neighboring integers whose aggregated mass is stored
    in ``log_mass``.  ``tail_bound`` bounds the mass provably excluded by
    the support search.
    """

    support: np.ndarray
    log_mass: np.ndarray
    tail_bound: float

    def __post_init__(self):
        object.__setattr__(self, "support", np.asarray(self.support, dtype=np.int64))
        object.__setattr__(self, "log_mass", np.asarray(self.log_mass, dtype=float))
        if self.support.ndim != 1 or self.support.shape != self.log_mass.shape:
            raise ValueError("support and log_mass must be matching 1-d arrays")
        if np.any(np.diff(self.support) <= 0):
            raise ValueError("support must be strictly increasing")

    @property
    def mass(self):
        return np.exp(self.log_mass)

    def mean(self):
        return float(np.sum(self.mass * self.support))

    def sd(self):
        m = self.mean()
        return math.sqrt(max(float(np.sum(self.mass * (self.support - m) ** 2)), 0.0))

    def cdf(self, values):
        """P[N0 <= value] for scalar or array values."""
        cum = np.cumsum(self.mass)
        idx = np.searchsorted(self.support, values, side="right")
        out = np.where(idx > 0, cum[np.minimum(idx, len(cum)) - 1], 0.0)
        return float(out) if np.ndim(values) == 0 else out

    def quantile(self, p):
        """Smallest support point with cumulative mass >= p."""
        if not 0.0 < p <= 1.0:
            raise ValueError("p must be in (0, 1]")
        cum = np.cumsum(self.mass)
        return int(self.support[np.searchsorted(cum, p - 1e-15)])

    def sample(self, rng, size=None):
        return rng.choice(self.support, size=size, p=self.mass / self.mass.sum())

    def log_pmf(self, n0):
        """Log mass at an exact support point, -inf elsewhere."""
        i = np.searchsorted(self.support, n0)
        if i < len(self.support) and self.support[i] == n0:
            return float(self.log_mass[i])
        return _NEG_INF


class _ModelTerms:
    """Per-dilution drop terms under the plain binomial observation model."""

    def __init__(self, groups, design, q_override=None):
        self.terms = kernels.dilution_terms(groups, design, q_override)
        self.all_censored = all(t.n_counted == 0 for t in self.terms)
        self.max_y = max((t.max_y for t in self.terms), default=0)

    def loglik_vec(self, n0):
        out = np.zeros(np.shape(n0))
        for t in self.terms:
            out = out + t.loglik_vec(n0)
        return out

    def plateau_start(self, cap):
        """Smallest n0 at which every censored survival term is within
        PLATEAU_EPS of one; None if that never happens below cap."""
        start = 0
        for t in self.terms:
            if t.n_censored == 0:
                continue

            def cdf(n, _t=t):  # P[Y <= c] at real trials n
                return betaincc(_t.c + 1.0, n - _t.c, _t.s) if n > _t.c else 1.0

            if cdf(float(cap)) > PLATEAU_EPS:
                return None
            lo, hi = float(t.c), float(cap)
            while hi - lo > 0.5:
                mid = 0.5 * (lo + hi)
                if cdf(mid) <= PLATEAU_EPS:
                    hi = mid
                else:
                    lo = mid
            start = max(start, int(math.ceil(hi)))
        return start


class _BetaBinomialTerms:
    """Per-dilution drop terms under the beta-binomial alternative."""

    def __init__(self, groups, design, lam, q_override=None):
        self.groups = []
        self.all_censored = True
        self.max_y = 0
        for j, drops in groups:
            s = kernels.success_prob(design, j, q_override).s_star
            counted = [y for y in drops if y is not None]
            n_cens = len(drops) - len(counted)
            self.groups.append((s, tuple(counted), n_cens, design.c))
            if counted:
                self.all_censored = False
                self.max_y = max(self.max_y, max(counted))
        self.lam = lam

    def loglik_vec(self, n0):
        n0 = np.asarray(n0, dtype=float)
        out = np.zeros(n0.shape)
        for s, counted, n_cens, c in self.groups:
            for y in counted:
                out = out + kernels.log_betabinomial_pmf(y, n0, s, self.lam)
            if n_cens:
                out = out + n_cens * kernels.log_betabinomial_sf(c, n0, s, self.lam)
        return out

    def plateau_start(self, cap):
        start = 0
        for s, _counted, n_cens, c in self.groups:
            if n_cens == 0:
                continue

            def cdf(n, _s=s, _c=c):
                return math.exp(kernels.log_betabinomial_cdf(_c, n, _s, self.lam))

            if cdf(float(cap)) > PLATEAU_EPS:
                return None
            lo, hi = float(c), float(cap)
            while hi - lo > 0.5:
                mid = 0.5 * (lo + hi)
                if cdf(mid) <= PLATEAU_EPS:
                    hi = mid
                else:
                    lo = mid
            start = max(start, int(math.ceil(hi)))
        return start


def _center_guess(model, cap):
    """Starting point for the bracket search: a crude pooled estimate."""
    num = 0.0
    den = 0.0
    if isinstance(model, _ModelTerms):
        for t in model.terms:
            num += t.sum_y
            den += t.n_counted * t.s
    else:
        for s, counted, _n_cens, _c in model.groups:
            num += sum(counted)
            den += len(counted) * s
    if den > 0:
        guess = int(round(num / den))
    else:
        guess = 0
    return max(min(guess, cap), model.max_y)


def _bracket(model, cap):
    """Geometric expansion around the center until the log likelihood falls
    DROP_NATS below its running maximum (or the prior bounds are hit)."""
    center = _center_guess(model, cap)
    ll_center = float(model.loglik_vec(np.array([float(center)]))[0])
    best = ll_center
    lo = center
    ll_lo = ll_center
    while lo > 0:
        nxt = lo // 2
        ll = float(model.loglik_vec(np.array([float(nxt)]))[0])
        best = max(best, ll)
        lo, ll_lo = nxt, ll
        if ll < best - DROP_NATS:
            break
    hi = center
    ll_hi = ll_center
    while hi < cap:
        nxt = min(cap, max(2 * hi, hi + 1))
        ll = float(model.loglik_vec(np.array([float(nxt)]))[0])
        best = max(best, ll)
        hi, ll_hi = nxt, ll
        if ll < best - DROP_NATS:
            break
    return lo, hi, ll_lo, ll_hi, best


def _decimated_grid(lo, hi, max_points):
    """Integer grid on [lo, hi]: representative points plus bin widths."""
    span = hi - lo + 1
    if span <= max_points:
        points = np.arange(lo, hi + 1, dtype=np.int64)
        return points, np.ones(span, dtype=np.int64)
    stride = int(math.ceil(span / max_points))
    edges = np.arange(lo, hi + 1, stride, dtype=np.int64)
    widths = np.minimum(edges + stride, hi + 1) - edges
    points = edges + (widths - 1) // 2
    return points, widths


def _scan(model, cap):
    """Adaptive support scan.  Returns (support, widths, loglik, logZ,
    tail_bound) where logZ = log sum over ALL integers 0..cap of the
    likelihood (bins aggregated, plateau analytic)."""
    plateau_from = None
    if model.all_censored:
        plateau_from = model.plateau_start(cap)

    if plateau_from is not None:
        # flat region [plateau_from, cap]: likelihood there is within
        # ~PLATEAU_EPS of its cap value; integrate it without evaluations
        ll_flat = float(model.loglik_vec(np.array([float(plateau_from)]))[0])
        lo = plateau_from
        ll_lo = ll_flat
        while lo > 0:
            nxt = lo // 2
            ll = float(model.loglik_vec(np.array([float(nxt)]))[0])
            lo, ll_lo = nxt, ll
            if ll < ll_flat - DROP_NATS:
                break
        # keep expanding down until the excluded lower tail is provably tiny
        while lo > 0 and ll_lo + math.log(max(lo, 1)) > ll_flat - DROP_NATS:
            lo //= 2
            ll_lo = float(model.loglik_vec(np.array([float(lo)]))[0])
        rise_pts, rise_w = _decimated_grid(lo, plateau_from - 1, GRID_CAP) if plateau_from > lo else (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
        )
        rise_ll = model.loglik_vec(rise_pts.astype(float)) if rise_pts.size else np.empty(0)
        flat_pts, flat_w = _decimated_grid(plateau_from, cap, 1000)
        flat_ll = np.full(flat_pts.size, ll_flat)
        support = np.concatenate([rise_pts, flat_pts])
        widths = np.concatenate([rise_w, flat_w])
        loglik = np.concatenate([rise_ll, flat_ll])
        logZ = log_sum_exp(loglik + np.log(widths))
        tail = (lo * math.exp(ll_lo - logZ)) if lo > 0 else 0.0
        return support, widths, loglik, logZ, tail

    lo, hi, ll_lo, ll_hi, _best = _bracket(model, cap)
    while True:
        points, widths = _decimated_grid(lo, hi, GRID_CAP)
        loglik = model.loglik_vec(points.astype(float))
        logZ = log_sum_exp(loglik + np.log(widths))
        # the likelihood decays monotonically beyond the bracket (it is
        # unimodal in n0), so the excluded tails are bounded by their edge
        # values times the number of integers left out
        tail_lo = lo * math.exp(ll_lo - logZ) if lo > 0 else 0.0
        tail_hi = (cap - hi) * math.exp(ll_hi - logZ) if hi < cap else 0.0
        if tail_lo + tail_hi <= TAIL_TARGET:
            return points, widths, loglik, logZ, tail_lo + tail_hi
        if tail_lo > TAIL_TARGET / 2 and lo > 0:
            lo = lo // 2
            ll_lo = float(model.loglik_vec(np.array([float(lo)]))[0])
        if tail_hi > TAIL_TARGET / 2 and hi < cap:
            hi = min(cap, 2 * hi)
            ll_hi = float(model.loglik_vec(np.array([float(hi)]))[0])


def _groups_for(rep, dilutions):
    if dilutions == "selected":
        return ((rep.selected_dilution, rep.drops),)
    groups = rep.all_dilutions()
    if dilutions == "all":
        return groups
    if dilutions == "all-countable":
        return tuple((j, d) for j, d in groups if all(y is not None for y in d))
    raise ValueError(f"unknown dilutions mode {dilutions!r}")


def free_posterior(rep, design, priors, q_override=None, dilutions="selected"):
    """Posterior over the integer abundance of one repetition under the
    uniform prior on {0, ..., 10^M}, ignoring the hierarchy.

    ``dilutions`` selects which recorded dilutions enter the likelihood:
    only the selected one (default), every recorded one including censored
    TNTC tubes ("all"), or only fully countable tubes ("all-countable").
    """
    model = _ModelTerms(_groups_for(rep, dilutions), design, q_override)
    support, widths, loglik, logZ, tail = _scan(model, priors.n0_cap)
    log_mass = loglik + np.log(widths) - logZ
    return DiscretePosterior(support=support, log_mass=log_mass, tail_bound=tail)


def log_marginal(
    rep,
    design,
    priors,
    model="binomial",
    lam=None,
    q_override=None,
    dilutions="selected",
    _support=None,
):
    """Log marginal likelihood (normalization constant) of one repetition
    under the uniform abundance prior, for the binomial or the
    beta-binomial("betabinomial", needs lam) observation model."""
    groups = _groups_for(rep, dilutions)
    terms = _model_terms(groups, design, model, lam, q_override)
    cap = priors.n0_cap
    if _support is None:
        support, widths, loglik, logZ, _tail = _scan(terms, cap)
    else:
        support, widths = _support
        loglik = terms.loglik_vec(support.astype(float))
        logZ = log_sum_exp(loglik + np.log(widths))
    return float(logZ) - math.log(cap + 1.0)


def _model_terms(groups, design, model, lam, q_override):
    if model == "binomial":
        return _ModelTerms(groups, design, q_override)
    if model == "betabinomial":
        if lam is None or not lam > 0:
            raise ValueError("the beta-binomial model needs lam > 0")
        return _BetaBinomialTerms(groups, design, lam, q_override)
    raise ValueError(f"unknown model {model!r}")


@dataclass(frozen=True)
class BayesFactorResult:
    """Beta-binomial vs binomial model comparison for one set of drops."""

    lam: float
    log_marginal_binomial: float
    log_marginal_betabinomial: float

    @property
    def log_bf(self):
        return self.log_marginal_betabinomial - self.log_marginal_binomial

    @property
    def bf(self):
        return math.exp(self.log_bf)


def bayes_factor(rep, design, priors, lam=None, q_override=None, dilutions="selected"):
    """Bayes factor of the beta-binomial over the binomial observation model
    for one repetition, on a shared (union) support so truncation cancels.

    lam defaults to the neutral choice 1/s* + 1 at the selected dilution.
    """
    if lam is None:
        s = kernels.success_prob(design, rep.selected_dilution, q_override).s_star
        lam = kernels.neutral_lambda(s)
    groups = _groups_for(rep, dilutions)
    cap = priors.n0_cap
    bin_terms = _ModelTerms(groups, design, q_override)
    bb_terms = _BetaBinomialTerms(groups, design, lam, q_override)
    sup_a, wid_a, _ll, _z, _t = _scan(bin_terms, cap)
    sup_b, wid_b, _ll, _z, _t = _scan(bb_terms, cap)
    lo = min(int(sup_a[0]), int(sup_b[0]))
    hi = max(int(sup_a[-1]), int(sup_b[-1]))
    support, widths = _decimated_grid(lo, hi, GRID_CAP)
    lm_bin = log_marginal(
        rep, design, priors, "binomial", q_override=q_override,
        dilutions=dilutions, _support=(support, widths),
    )
    lm_bb = log_marginal(
        rep, design, priors, "betabinomial", lam=lam, q_override=q_override,
        dilutions=dilutions, _support=(support, widths),
    )
    return BayesFactorResult(
        lam=lam,
        log_marginal_binomial=lm_bin,
        log_marginal_betabinomial=lm_bb,
    )


def per_tube_bayes_factors(rep, design, priors, lam=None, q_override=None):
    """One Bayes factor per recorded dilution tube of a repetition.

    Each tube's drops are compared as their own data set at that tube's s*;
    lam defaults to the per-tube neutral choice.
    """
    from .design import RepetitionCounts

    out = []
    for j, drops in rep.all_dilutions():
        tube = RepetitionCounts(rep_id=rep.rep_id, selected_dilution=j, drops=drops)
        out.append((j, bayes_factor(tube, design, priors, lam=lam, q_override=q_override)))
    return out


def lod(design, K, priors, credibility=0.95, iterations=500_000, seed=0, q_override=None):
    """Limit of detection: with K all-zero repetitions at dilution 0, the
    upper ``credibility`` quantile of the posterior abundance, reported in
    10-CFU bins.

    The abundance posterior pooled over the repetitions' 10^x - 1 samples is
    used; its quantiles reproduce the published drop-plate limits.
    """
    from . import hier
    from .design import Experiment, RepetitionCounts

    if K < 1:
        raise ValueError("K must be >= 1")
    reps = tuple(
        RepetitionCounts(rep_id=f"zero{k+1}", selected_dilution=0, drops=(0,) * design.D)
        for k in range(K)
    )
    experiment = Experiment(design=design, treatment=f"all-zero K={K}", reps=reps)
    chain = hier.fit(
        experiment, priors, iterations=iterations, seed=seed, q_override=q_override
    )
    abundance = np.concatenate(
        [10.0 ** chain.chain.samples[:, 2 + k] - 1.0 for k in range(K)]
    )
    return _binned_upper_quantile(abundance, credibility), chain


def _binned_upper_quantile(values, credibility, bin_width=10):
    """Smallest multiple of bin_width with P(value < L) >= credibility."""
    values = np.asarray(values)
    n = values.size
    L = bin_width
    while True:
        if np.count_nonzero(values < L) / n >= credibility:
            return int(L)
        L += bin_width
