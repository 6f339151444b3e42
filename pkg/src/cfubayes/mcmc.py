"""Self-adjusting MCMC over continuous vectors: the t-walk, plus diagnostics.

The t-walk (Christen & Fox, 2010, Bayesian Analysis 5:263-282) runs two
coupled points and proposes walk / traverse / blow / hop moves; it needs no
tuning beyond the log density, a support predicate and two distinct starting
points, which is why it suits the varied posteriors built in this package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Chain", "sample", "iat", "ess", "chain_to_csv", "DiagnosticError"]

_INF = float("inf")

# standard t-walk constants: move probabilities (walk, traverse, blow, hop),
# kernel scales, and the expected number of coordinates moved per proposal
_MOVE_CUM = (0.4918, 0.9836, 0.9918, 1.0)
_AW = 1.5
_AT = 6.0
_N1PHI = 4.0


class DiagnosticError(RuntimeError):
    """A chain failed its convergence diagnostics; carries the chain."""

    def __init__(self, message, chain=None):
        super().__init__(message)
        self.chain = chain


@dataclass(eq=False)
class Chain:
    """MCMC output: post-burn-in samples with diagnostics."""

    samples: np.ndarray  # (T, d)
    log_post: np.ndarray  # (T,)
    seed: object
    acceptance_rate: float
    iat_per_dim: np.ndarray
    ess_per_dim: np.ndarray
    burn_in: int

    def __len__(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


def _sim_beta(rng):
    """Draw the traverse scaling factor from the t-walk beta density."""
    if rng.random() < (_AT - 1.0) / (2.0 * _AT):
        return math.exp(math.log(rng.random()) / (_AT + 1.0))
    return math.exp(math.log(rng.random()) / (1.0 - _AT))


def _gauss_phi_logpdf(h, center, sigma, phi, nphi):
    """-log of the blow/hop proposal density on the moved coordinates."""
    d2 = float(np.sum(((h - center) * phi) ** 2))
    return 0.5 * nphi * math.log(2.0 * math.pi) + nphi * math.log(sigma) + 0.5 * d2 / sigma**2


def sample(log_density, support_check, init_a, init_b, iterations, seed, burn_in=None):
    """Run the t-walk and return a Chain.

    Parameters
    ----------
    log_density : callable mapping a length-d vector to a float (may be -inf).
    support_check : callable mapping a vector to bool; the chain never leaves
        the support.
    init_a, init_b : two starting points; they must differ in every
        coordinate and both must have finite log density.
    iterations : total iterations to run (before burn-in removal).
    seed : int or ``numpy.random.SeedSequence``; identical seeds give
        bit-identical chains.
    burn_in : iterations to discard; default max(1000, 2 * max IAT), capped
        at half the run.
    """
    x = np.array(init_a, dtype=float).copy()
    xp = np.array(init_b, dtype=float).copy()
    if x.shape != xp.shape or x.ndim != 1:
        raise ValueError("initial points must be 1-d vectors of equal length")
    d = x.size
    if np.any(x == xp):
        raise ValueError("initial points must differ in every coordinate")
    if not (support_check(x) and support_check(xp)):
        raise ValueError("initial points must lie in the support")
    lp_x = float(log_density(x))
    lp_xp = float(log_density(xp))
    if not (math.isfinite(lp_x) and math.isfinite(lp_xp)):
        raise ValueError("log density must be finite at both initial points")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")

    rng = np.random.Generator(np.random.PCG64(seed))
    pphi = min(d, _N1PHI) / d
    samples = np.empty((iterations, d))
    log_post = np.empty(iterations)
    accepted = 0

    for it in range(iterations):
        kernel = rng.random()
        move_first = rng.random() < 0.5
        if move_first:
            z, h, lp_z = x, xp, lp_x
        else:
            z, h, lp_z = xp, x, lp_xp
        phi = rng.random(d) < pphi
        nphi = int(phi.sum())

        log_a = -_INF
        z_new = None
        lp_new = None
        if nphi == 0:
            log_a = 0.0
            z_new = z
            lp_new = lp_z
        elif kernel < _MOVE_CUM[0]:  # walk
            u = rng.random(d)
            zw = (_AW / (1.0 + _AW)) * (_AW * u * u + 2.0 * u - 1.0)
            z_new = z + phi * (z - h) * zw
            if support_check(z_new) and np.all(z_new != h):
                lp_new = float(log_density(z_new))
                log_a = lp_new - lp_z
        elif kernel < _MOVE_CUM[1]:  # traverse
            beta = _sim_beta(rng)
            z_new = np.where(phi, h + beta * (h - z), z)
            if support_check(z_new) and np.all(z_new != h):
                lp_new = float(log_density(z_new))
                log_a = lp_new - lp_z + (nphi - 2.0) * math.log(beta)
        elif kernel < _MOVE_CUM[2]:  # blow
            sigma = float(np.max(phi * np.abs(h - z)))
            if sigma > 0.0:
                z_new = np.where(phi, h + sigma * rng.standard_normal(d), z)
                if support_check(z_new) and np.all(z_new != h):
                    lp_new = float(log_density(z_new))
                    w1 = _gauss_phi_logpdf(z_new, h, sigma, phi, nphi)
                    sigma_rev = float(np.max(phi * np.abs(h - z_new)))
                    w2 = _gauss_phi_logpdf(z, h, sigma_rev, phi, nphi)
                    log_a = lp_new - lp_z + (w1 - w2)
        else:  # hop
            sigma = float(np.max(phi * np.abs(h - z))) / 3.0
            if sigma > 0.0:
                z_new = np.where(phi, z + sigma * rng.standard_normal(d), z)
                if support_check(z_new) and np.all(z_new != h):
                    lp_new = float(log_density(z_new))
                    w1 = _gauss_phi_logpdf(z_new, z, sigma, phi, nphi)
                    sigma_rev = float(np.max(phi * np.abs(h - z_new))) / 3.0
                    w2 = _gauss_phi_logpdf(z, z_new, sigma_rev, phi, nphi)
                    log_a = lp_new - lp_z + (w1 - w2)

        if log_a >= 0.0 or math.log(rng.random()) < log_a:
            if lp_new is None:
                lp_new = lp_z
            if move_first:
                x, lp_x = z_new, lp_new
            else:
                xp, lp_xp = z_new, lp_new
            accepted += 1

        samples[it] = x
        log_post[it] = lp_x

    # burn-in from a provisional IAT on the second half of the run
    if burn_in is None:
        half = samples[iterations // 2 :]
        taus = [iat(half[:, k]) for k in range(d)] if len(half) >= 100 else [1.0]
        finite = [t for t in taus if math.isfinite(t)]
        tau_max = max(finite) if finite else 1.0
        burn_in = max(1000, int(math.ceil(2.0 * tau_max)))
    burn_in = min(int(burn_in), iterations // 2)

    kept = samples[burn_in:]
    kept_lp = log_post[burn_in:]
    taus = np.array(
        [iat(kept[:, k]) if len(kept) >= 100 else 1.0 for k in range(d)]
    )
    t_kept = kept.shape[0]
    with np.errstate(divide="ignore"):
        ess_vec = np.minimum(t_kept / taus, float(t_kept))
    return Chain(
        samples=kept,
        log_post=kept_lp,
        seed=seed,
        acceptance_rate=accepted / iterations,
        iat_per_dim=taus,
        ess_per_dim=ess_vec,
        burn_in=burn_in,
    )


def iat(series):
    """Integrated autocorrelation time 1 + 2 sum rho_k, truncated by Geyer's
    initial positive sequence.  A constant series returns +inf."""
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 100:
        raise ValueError("need a 1-d series of length >= 100")
    n = x.size
    x = x - x.mean()
    var0 = float(np.dot(x, x))
    if var0 == 0.0:
        return _INF
    # autocovariance by FFT
    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conjugate(f))[:n].real
    rho = acov / var0
    # Geyer: sum pair sums Gamma_m = rho_{2m} + rho_{2m+1} while positive
    tau = 0.0
    m = 0
    while 2 * m + 1 < n:
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0.0:
            break
        tau += gamma
        m += 1
    return 2.0 * tau - 1.0


def ess(chain):
    """Effective sample size per dimension: len(chain) / IAT, clamped at the
    chain length."""
    t = len(chain)
    with np.errstate(divide="ignore"):
        return np.minimum(t / chain.iat_per_dim, float(t))


def chain_to_csv(chain, path, names=None):
    """Write a chain as CSV: one row per iteration, parameter columns plus
    the log posterior, 17 significant digits."""
    d = chain.dim
    if names is None:
        names = [f"p{k}" for k in range(d)]
    if len(names) != d:
        raise ValueError(f"need {d} names, got {len(names)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + ["log_post"])
        for row, lp in zip(chain.samples, chain.log_post):
            writer.writerow([f"{v:.17g}" for v in row] + [f"{lp:.17g}"])
