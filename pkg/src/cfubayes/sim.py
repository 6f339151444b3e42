"""Forward simulation of the dilution cascade and the multi-dilution
information study (are counts beyond the first countable dilution worth
recording?)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import exactpost
from .design import Experiment, RepetitionCounts
from .kernels import success_prob

__all__ = [
    "CascadeRealization",
    "simulate_cascade",
    "first_countable_dilution",
    "realization_to_rep",
    "StudyReport",
    "all_vs_first_study",
]


@dataclass(frozen=True, eq=False)
class CascadeRealization:
    """One draw of the cascade: tube abundances n (length J, n[0] = n0) and
    the J x D matrix of drop counts y."""

    n: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.n) > 0):
            raise ValueError("tube abundances must be nonincreasing")
        if np.any(self.y > self.n[:, None]):
            raise ValueError("a drop cannot exceed its tube's abundance")


def simulate_cascade(n0, design, seed, q_override=None):
    """Draw tube abundances and drop counts by binomial thinning.

    Tube 1 keeps a fraction 1/(alpha*alpha0) of tube 0, later tubes 1/alpha
    of their predecessor; a drop from tube j keeps (1-q)/alpha_p, with the
    extra 1/alpha0 at j = 0.  ``seed`` may be an int, SeedSequence or
    Generator.  q_override may be any value in [0, 1] (q = 1 discards every
    microbe at the plating step).
    """
    n0 = int(n0)
    if n0 < 0:
        raise ValueError("n0 must be >= 0")
    q = design.q if q_override is None else q_override
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be in [0, 1], got {q}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    J, D = design.J, design.D
    n = np.empty(J, dtype=np.int64)
    y = np.empty((J, D), dtype=np.int64)
    n[0] = n0
    for j in range(1, J):
        p_tube = 1.0 / (design.alpha * (design.alpha0 if j == 1 else 1.0))
        n[j] = rng.binomial(n[j - 1], p_tube)
    for j in range(J):
        p_drop = (1.0 - q) / (design.alpha_p * (design.alpha0 if j == 0 else 1.0))
        y[j] = rng.binomial(n[j], p_drop, size=D)
    return CascadeRealization(n=n, y=y)


def first_countable_dilution(realization, c):
    """Smallest dilution whose D drops are all <= c (0 when everything is
    zero); None when every dilution has a TNTC drop (fully censored)."""
    for j in range(realization.y.shape[0]):
        if np.all(realization.y[j] <= c):
            return j
    return None


def realization_to_rep(realization, design, rep_id="sim", keep_all=False):
    """Record a realization the way a technician would: counts at the first
    countable dilution, TNTC marks above c.  With keep_all, every dilution
    is recorded (censored marks included) in other_dilutions."""
    j_sel = first_countable_dilution(realization, design.c)
    if j_sel is None:
        raise ValueError("no countable dilution: every tube has a TNTC drop")
    mark = lambda v: int(v) if v <= design.c else None
    selected = tuple(mark(v) for v in realization.y[j_sel])
    others = ()
    if keep_all:
        others = tuple(
            (j, tuple(mark(v) for v in realization.y[j]))
            for j in range(realization.y.shape[0])
            if j != j_sel
        )
    return RepetitionCounts(
        rep_id=rep_id,
        selected_dilution=j_sel,
        drops=selected,
        other_dilutions=others,
    )


@dataclass(frozen=True, eq=False)
class StudyReport:
    """Averaged posteriors of the multi-dilution study on a common support.

    pmf_first uses only the first countable dilution; pmf_all_countable adds
    every fully countable dilution; pmf_all additionally keeps the censored
    TNTC terms.  TV distances and mean differences are taken against the
    first-dilution posterior.
    """

    n0_true: int
    n_sims: int
    seed: int
    support: np.ndarray
    pmf_first: np.ndarray
    pmf_all_countable: np.ndarray
    pmf_all: np.ndarray
    mean_first: float
    mean_all_countable: float
    mean_all: float
    tv_first_vs_all_countable: float
    tv_first_vs_all: float
    tv_all_vs_all_countable: float

    @property
    def rel_mean_diff_all_countable(self):
        return abs(self.mean_all_countable - self.mean_first) / self.mean_first

    @property
    def rel_mean_diff_all(self):
        return abs(self.mean_all - self.mean_first) / self.mean_first


def _tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def all_vs_first_study(design, n0_true, priors, n_sims=120, seed=0, q_override=None):
    """Simulate n_sims data sets at a fixed true abundance, compute the
    exact posterior of N0 per data set under the three recording policies,
    and average each family of posteriors on the union support."""
    n0_true = int(n0_true)
    s0 = success_prob(design, 0, q_override).s_star
    if n0_true * s0 > design.c:
        raise ValueError(
            f"n0_true={n0_true} gives expected first-dilution counts "
            f"{n0_true * s0:.1f} > c={design.c}; the study wants countable "
            "first dilutions"
        )
    ss = np.random.SeedSequence(seed)
    results = {"first": [], "all-countable": [], "all": []}
    for child in ss.spawn(n_sims):
        rng = np.random.Generator(np.random.PCG64(child))
        realization = simulate_cascade(n0_true, design, rng, q_override=q_override)
        rep = realization_to_rep(realization, design, keep_all=True)
        for mode, key in (
            ("selected", "first"),
            ("all-countable", "all-countable"),
            ("all", "all"),
        ):
            post = exactpost.free_posterior(
                rep, design, priors, q_override=q_override, dilutions=mode
            )
            if np.any(np.diff(post.support) != 1):
                raise RuntimeError("study posteriors must be exact (stride-1)")
            results[key].append(post)
    hi = max(int(p.support[-1]) for posts in results.values() for p in posts)
    avg = {}
    for key, posts in results.items():
        acc = np.zeros(hi + 1)
        for p in posts:
            acc[p.support[0] : p.support[-1] + 1] += p.mass
        acc /= acc.sum()
        avg[key] = acc
    support = np.arange(hi + 1, dtype=np.int64)
    means = {k: float(np.sum(support * v)) for k, v in avg.items()}
    return StudyReport(
        n0_true=n0_true,
        n_sims=n_sims,
        seed=seed,
        support=support,
        pmf_first=avg["first"],
        pmf_all_countable=avg["all-countable"],
        pmf_all=avg["all"],
        mean_first=means["first"],
        mean_all_countable=means["all-countable"],
        mean_all=means["all"],
        tv_first_vs_all_countable=_tv(avg["first"], avg["all-countable"]),
        tv_first_vs_all=_tv(avg["first"], avg["all"]),
        tv_all_vs_all_countable=_tv(avg["all"], avg["all-countable"]),
    )
