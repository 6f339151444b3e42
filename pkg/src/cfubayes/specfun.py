"""Log-space special functions for the counting model.

Log probabilities are plain floats on the natural-log scale; -inf encodes an
impossible event.  None of these functions returns NaN.  The "number of
trials" n may be any nonnegative real: the binomial coefficient is continued
through the gamma function, and Bi(0, p) is the point mass at zero.

All functions accept an ndarray for n and broadcast; the scalar paths avoid
array overhead because they sit inside MCMC loops.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import betainc, betaincc, gammaln, xlog1py, xlogy

__all__ = [
    "log_binomial_coeff",
    "log_binomial_pmf",
    "log_binomial_sf",
    "log_sum_exp",
]

_NEG_INF = float("-inf")

# below this survival probability the incomplete-beta route has underflowed
# and the term-by-term sum takes over
_SF_UNDERFLOW = 1e-290


def log_binomial_coeff(n, y):
    """log C(n, y) = lnG(n+1) - lnG(y+1) - lnG(n-y+1), for real n >= y >= 0."""
    if np.ndim(n) == 0 and np.ndim(y) == 0:
        n = float(n)
        y = float(y)
        if y < 0 or y > n:
            raise ValueError(f"need 0 <= y <= n, got y={y}, n={n}")
        return math.lgamma(n + 1.0) - math.lgamma(y + 1.0) - math.lgamma(n - y + 1.0)
    n = np.asarray(n, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y > n):
        raise ValueError("need 0 <= y <= n elementwise")
    return gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)


def _check_p(p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {p}")


def log_binomial_pmf(y, n, p):
    """log P[Y = y] for Y ~ Bi(n, p) with real n >= 0.

    Returns -inf when y > n; Bi(0, p) is the point mass at zero.  The
    conventions 0*log(0) = 0 apply at p = 0 and p = 1.
    """
    _check_p(p)
    if y < 0:
        raise ValueError(f"y must be >= 0, got {y}")
    if np.ndim(n) == 0:
        n = float(n)
        if n < 0:
            raise ValueError(f"n must be >= 0, got {n}")
        if y > n:
            return _NEG_INF
        out = log_binomial_coeff(n, y)
        if y > 0:
            if p == 0.0:
                return _NEG_INF
            out += y * math.log(p)
        if n > y:
            if p == 1.0:
                return _NEG_INF
            out += (n - y) * math.log1p(-p)
        return out
    n = np.asarray(n, dtype=float)
    if np.any(n < 0):
        raise ValueError("n must be >= 0")
    ok = y <= n
    nn = np.where(ok, n, y)  # dummy value keeps gammaln in domain
    out = gammaln(nn + 1.0) - math.lgamma(y + 1.0) - gammaln(nn - y + 1.0)
    out += xlogy(y, p) + xlog1py(nn - y, -p)
    return np.where(ok, out, _NEG_INF)


def _log_sf_sum(cthr, n, p):
    """Term-by-term log-space tail sum, for when betainc underflows."""
    logs = []
    best = _NEG_INF
    y = cthr + 1
    while y <= n:
        term = log_binomial_pmf(y, n, p)
        logs.append(term)
        best = max(best, term)
        # terms decay geometrically once past the mode; stop when negligible
        if term < best - 60.0 and y > n * p:
            break
        y += 1
        if y - cthr > 2_000_000:  # pragma: no cover - safety stop
            break
    if not logs:
        return _NEG_INF
    return log_sum_exp(logs)


def _log_sf_scalar(cthr, n, p):
    if n <= cthr:
        return _NEG_INF
    if p == 0.0:
        return _NEG_INF
    if p == 1.0:
        return 0.0
    sf = betainc(cthr + 1.0, n - cthr, p)
    if sf >= 0.5:
        # log(1 - cdf) with the cdf computed directly stays accurate near 0
        return math.log1p(-betaincc(cthr + 1.0, n - cthr, p))
    if sf > _SF_UNDERFLOW:
        return math.log(sf)
    return _log_sf_sum(cthr, n, p)


def log_binomial_sf(cthr, n, p):
    """log P[Y > cthr] for Y ~ Bi(n, p) with real n, via the regularized
    incomplete beta function I_p(cthr+1, n-cthr)."""
    _check_p(p)
    cthr = int(cthr)
    if cthr < 0:
        raise ValueError(f"cthr must be >= 0, got {cthr}")
    if np.ndim(n) == 0:
        return _log_sf_scalar(cthr, float(n), p)
    n = np.asarray(n, dtype=float)
    out = np.full(n.shape, _NEG_INF)
    ok = n > cthr
    if p == 0.0 or not np.any(ok):
        return out
    if p == 1.0:
        out[ok] = 0.0
        return out
    nn = n[ok]
    sf = betainc(cthr + 1.0, nn - cthr, p)
    vals = np.empty_like(sf)
    hi = sf >= 0.5
    vals[hi] = np.log1p(-betaincc(cthr + 1.0, nn[hi] - cthr, p))
    lo = ~hi
    with np.errstate(divide="ignore"):
        vals[lo] = np.log(sf[lo])
    under = sf <= _SF_UNDERFLOW
    if np.any(under):
        vals[under] = [_log_sf_sum(cthr, float(v), p) for v in nn[under]]
    out[ok] = vals
    return out


def log_sum_exp(values):
    """Overflow-safe log(sum(exp(values))); a list of -inf gives -inf."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("log_sum_exp of an empty list")
    m = float(np.max(a))
    if not math.isfinite(m):
        return m  # all -inf, or an inf entry dominates
    return m + math.log(float(np.sum(np.exp(a - m))))
