"""Probability kernels of the collapsed counting model.

After the tube abundances of the cascade are integrated out, a drop plated
from dilution j is Bi(n0, s*) with s* = alpha^-j * alpha_p^-1 * alpha0^-1 *
(1-q); a TNTC drop contributes the survival term P[Y > c].  The hierarchy
places a gamma law with mean e and signal-to-noise sqrt(a) on each
log-abundance x = log10(n0 + 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from .specfun import log_binomial_pmf, log_binomial_sf, log_sum_exp

_NEG_INF = float("-inf")
LN10 = math.log(10.0)


@dataclass(frozen=True)
class SuccessProb:
    """Per-microbe probability of showing up as a countable CFU in one drop
    plated from dilution j."""

    j: int
    s_star: float


def success_prob(design, j, q_override=None):
    """s* = alpha^-j alpha_p^-1 alpha0^-1 (1-q) for dilution j of a design."""
    if not 0 <= j < design.J:
        raise ValueError(f"dilution {j} out of range [0, {design.J})")
    q = design.q if q_override is None else q_override
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must be in [0, 1), got {q}")
    s = (1.0 - q) / (design.alpha ** j * design.alpha_p * design.alpha0)
    return SuccessProb(j=j, s_star=s)


class DropTerms:
    """One dilution's drop observations with precomputed constants, so the
    likelihood can be evaluated cheaply inside MCMC and support scans."""

    __slots__ = (
        "s",
        "c",
        "n_counted",
        "n_censored",
        "sum_y",
        "max_y",
        "distinct",
        "lgam_y_const",
        "log_s",
        "log1m_s",
    )

    def __init__(self, drops, s, c):
        if not 0.0 < s <= 1.0:
            raise ValueError(f"success probability must be in (0, 1], got {s}")
        counted = [y for y in drops if y is not None]
        self.s = float(s)
        self.c = int(c)
        self.n_counted = len(counted)
        self.n_censored = len(drops) - len(counted)
        self.sum_y = int(sum(counted))
        self.max_y = max(counted, default=0)
        mult = {}
        for y in counted:
            mult[y] = mult.get(y, 0) + 1
        self.distinct = tuple(sorted(mult.items()))
        self.lgam_y_const = sum(m * math.lgamma(y + 1.0) for y, m in self.distinct)
        self.log_s = math.log(s)
        self.log1m_s = math.log1p(-s) if s < 1.0 else _NEG_INF

    def loglik(self, n0):
        """Log likelihood of these drops given a real tube-0 abundance."""
        if n0 < 0:
            raise ValueError(f"n0 must be >= 0, got {n0}")
        ll = 0.0
        if self.n_counted:
            if n0 < self.max_y:
                return _NEG_INF
            if self.s >= 1.0:  # degenerate design: every microbe is counted
                return sum(
                    m * log_binomial_pmf(y, n0, self.s) for y, m in self.distinct
                ) + (self.n_censored and self.n_censored * log_binomial_sf(self.c, n0, self.s))
            ll = self.n_counted * math.lgamma(n0 + 1.0) - self.lgam_y_const
            for y, m in self.distinct:
                ll -= m * math.lgamma(n0 - y + 1.0)
            ll += self.sum_y * self.log_s
            ll += (self.n_counted * n0 - self.sum_y) * self.log1m_s
        if self.n_censored:
            ll += self.n_censored * log_binomial_sf(self.c, n0, self.s)
        return ll

    def loglik_vec(self, n0):
        """Vectorized ``loglik`` over an array of abundances."""
        n0 = np.asarray(n0, dtype=float)
        if np.any(n0 < 0):
            raise ValueError("n0 must be >= 0")
        out = np.zeros(n0.shape)
        if self.n_counted:
            ok = n0 >= self.max_y
            nn = np.where(ok, n0, self.max_y)
            t = self.n_counted * gammaln(nn + 1.0) - self.lgam_y_const
            for y, m in self.distinct:
                t -= m * gammaln(nn - y + 1.0)
            t += self.sum_y * self.log_s
            t += (self.n_counted * nn - self.sum_y) * self.log1m_s
            out = np.where(ok, t, _NEG_INF)
        if self.n_censored:
            out = out + self.n_censored * log_binomial_sf(self.c, n0, self.s)
        return out


def dilution_terms(obs_by_dilution, design, q_override=None):
    """Build a DropTerms per (dilution, drops) pair."""
    return tuple(
        DropTerms(drops, success_prob(design, j, q_override).s_star, design.c)
        for j, drops in obs_by_dilution
    )


def dilution_log_likelihood(obs_by_dilution, n0, design, q_override=None):
    """Log likelihood of drop observations spread over several dilutions of
    one repetition, as a function of the tube-0 abundance n0 (scalar or
    array)."""
    terms = dilution_terms(obs_by_dilution, design, q_override)
    if np.ndim(n0) == 0:
        return sum(t.loglik(float(n0)) for t in terms)
    n0 = np.asarray(n0, dtype=float)
    out = np.zeros(n0.shape)
    for t in terms:
        out = out + t.loglik_vec(n0)
    return out


def rep_log_likelihood(rep, n0, design, q_override=None):
    """Log likelihood of one repetition's selected-dilution drops given n0.

    Counted drops contribute binomial pmf terms and censored drops the
    survival P[Y > c], all at s* of the selected dilution.
    """
    return dilution_log_likelihood(
        ((rep.selected_dilution, rep.drops),), n0, design, q_override
    )


def log_hier_density(x, e, a):
    """Log density at x of the gamma law Ga(shape=a, scale=e/a): mean e,
    standard deviation e/sqrt(a).  Zero density (-inf) for x <= 0."""
    if not e > 0 or not a > 0:
        raise ValueError(f"e and a must be positive, got e={e}, a={a}")
    if np.ndim(x) == 0:
        if x <= 0:
            return _NEG_INF
        return a * math.log(a / e) - math.lgamma(a) + (a - 1.0) * math.log(x) - a * x / e
    x = np.asarray(x, dtype=float)
    pos = x > 0
    xx = np.where(pos, x, 1.0)
    val = a * math.log(a / e) - math.lgamma(a) + (a - 1.0) * np.log(xx) - a * xx / e
    return np.where(pos, val, _NEG_INF)


def log_n0_density(n0, e, a):
    """Log density over the abundance n0 implied by the gamma law on
    log10(n0 + 1), by change of variables at z = n0 + 1."""
    if np.ndim(n0) == 0:
        if n0 < 0:
            raise ValueError(f"n0 must be >= 0, got {n0}")
        x = math.log10(n0 + 1.0)
        return log_hier_density(x, e, a) - math.log((n0 + 1.0) * LN10)
    n0 = np.asarray(n0, dtype=float)
    if np.any(n0 < 0):
        raise ValueError("n0 must be >= 0")
    x = np.log10(n0 + 1.0)
    return log_hier_density(x, e, a) - np.log((n0 + 1.0) * LN10)


def neutral_lambda(s_star):
    """The neutral beta-binomial hyperparameter 1/s* + 1, the smallest
    integer-free choice keeping the Beta prior mode away from zero."""
    return 1.0 / s_star + 1.0


def log_betabinomial_pmf(y, n, s_star, lam):
    """Log pmf of the beta-binomial with mean success probability s* and
    concentration lam: Y | S ~ Bi(n, S), S ~ Beta(s* lam, (1-s*) lam)."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 0.0 < s_star < 1.0:
        raise ValueError(f"s_star must be in (0, 1), got {s_star}")
    if y < 0:
        raise ValueError(f"y must be >= 0, got {y}")
    a0 = s_star * lam
    b0 = (1.0 - s_star) * lam
    const = betaln(a0, b0)
    if np.ndim(n) == 0:
        n = float(n)
        if y > n:
            return _NEG_INF
        return (
            math.lgamma(n + 1.0)
            - math.lgamma(y + 1.0)
            - math.lgamma(n - y + 1.0)
            + betaln(y + a0, n - y + b0)
            - const
        )
    n = np.asarray(n, dtype=float)
    ok = y <= n
    nn = np.where(ok, n, y)
    val = (
        gammaln(nn + 1.0)
        - math.lgamma(y + 1.0)
        - gammaln(nn - y + 1.0)
        + betaln(y + a0, nn - y + b0)
        - const
    )
    return np.where(ok, val, _NEG_INF)


def log_betabinomial_cdf(cthr, n, s_star, lam):
    """Log P[Y <= cthr] under the beta-binomial, by summing cthr+1 pmf
    terms (cthr is small: the TNTC threshold)."""
    cthr = int(cthr)
    terms = [log_betabinomial_pmf(y, n, s_star, lam) for y in range(cthr + 1)]
    if np.ndim(n) == 0:
        return min(log_sum_exp(terms), 0.0)
    return np.minimum(np.logaddexp.reduce(np.stack(terms), axis=0), 0.0)


def log_betabinomial_sf(cthr, n, s_star, lam):
    """Log P[Y > cthr] under the beta-binomial.

    Computed as log1p(-cdf); values below exp(-27) or so are reported as
    -inf, which is harmless where this is used (censored-likelihood scans
    whose mass concentrates where the survival is order one).
    """
    logcdf = log_betabinomial_cdf(cthr, n, s_star, lam)
    if np.ndim(n) == 0:
        if float(n) <= cthr:
            return _NEG_INF
        sf = -math.expm1(logcdf)
        return math.log(sf) if sf > 1e-12 else _NEG_INF
    n = np.asarray(n, dtype=float)
    sf = -np.expm1(logcdf)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sf > 1e-12, np.log(np.maximum(sf, 1e-300)), _NEG_INF)
    return np.where(n > cthr, out, _NEG_INF)
