"""Inter-laboratory hierarchy: each lab's mean log abundance E_l follows a
gamma law around a global mean with global dispersion, on top of the
intra-lab model, plus the reproducibility metrics built from log-reduction
chains."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mcmc
from .hier import A_CAP_FACTOR, HierParams, HierPosterior, initial_points
from .kernels import log_hier_density

__all__ = [
    "InterLabParams",
    "InterLabChain",
    "InterLabPosterior",
    "interlab_log_posterior",
    "fit_interlab",
    "reproducibility_metrics",
]

_NEG_INF = float("-inf")


@dataclass(frozen=True)
class InterLabParams:
    """Global (e_g, a_g) plus one intra-lab block per laboratory."""

    e_g: float
    a_g: float
    labs: tuple  # of HierParams

    def as_vector(self):
        parts = [self.e_g, self.a_g]
        for lab in self.labs:
            parts.extend([lab.e, lab.a, *lab.x])
        return np.array(parts, dtype=float)


@dataclass(eq=False)
class InterLabChain:
    """A fitted inter-lab chain; parameter layout is
    [e_global, a_global, (e_l, a_l, x_l1..x_lK) per lab]."""

    chain: mcmc.Chain
    labs: dict
    priors: object
    seed: object
    n0_prior: str

    @property
    def param_names(self):
        names = ["e_global", "a_global"]
        for lab, exp in self.labs.items():
            names += [f"e_{lab}", f"a_{lab}"]
            names += [f"x_{lab}_{rep.rep_id}" for rep in exp.reps]
        return names

    @property
    def e_global_samples(self):
        return self.chain.samples[:, 0]

    @property
    def a_global_samples(self):
        return self.chain.samples[:, 1]

    def lab_offset(self, lab):
        off = 2
        for name, exp in self.labs.items():
            if name == lab:
                return off
            off += 2 + exp.K
        raise KeyError(lab)

    def lab_e_samples(self, lab):
        return self.chain.samples[:, self.lab_offset(lab)]

    def __len__(self):
        return len(self.chain)


class InterLabPosterior:
    """Callable log posterior of the two-level hierarchy."""

    def __init__(self, labs, priors, n0_prior="uniform-x", q_override=None):
        if len(labs) < 2:
            raise ValueError("the inter-lab model needs at least two labs")
        self.labs = dict(labs)
        self.M = priors.M
        self.b = priors.b
        self.a_cap = A_CAP_FACTOR * priors.b
        self.posts = [
            HierPosterior(exp, priors, n0_prior=n0_prior, q_override=q_override)
            for exp in self.labs.values()
        ]
        self.dim = 2 + sum(2 + p.K for p in self.posts)

    def support(self, theta):
        if not (0.0 < theta[0] < self.M and 0.0 < theta[1] < self.a_cap):
            return False
        off = 2
        for p in self.posts:
            if not p.support(theta[off : off + 2 + p.K]):
                return False
            off += 2 + p.K
        return True

    def __call__(self, theta):
        e_g = float(theta[0])
        a_g = float(theta[1])
        if not (0.0 < e_g < self.M and 0.0 < a_g < self.a_cap):
            return _NEG_INF
        lp = -math.log(self.M) - math.log(self.b) - a_g / self.b
        off = 2
        for p in self.posts:
            e_l = float(theta[off])
            a_l = float(theta[off + 1])
            xs = theta[off + 2 : off + 2 + p.K]
            t = p.lab_terms(e_l, a_l, xs)
            if t == _NEG_INF:
                return _NEG_INF
            lp += t + log_hier_density(e_l, e_g, a_g)
            off += 2 + p.K
        return lp


def interlab_log_posterior(params, labs, priors, n0_prior="uniform-x", q_override=None):
    """Log posterior at one point (InterLabParams or flat vector)."""
    post = InterLabPosterior(labs, priors, n0_prior=n0_prior, q_override=q_override)
    theta = (
        params.as_vector() if isinstance(params, InterLabParams) else np.asarray(params, float)
    )
    if theta.size != post.dim:
        raise ValueError(f"expected {post.dim} parameters, got {theta.size}")
    return post(theta)


def fit_interlab(
    labs,
    priors,
    iterations=500_000,
    seed=0,
    n0_prior="uniform-x",
    q_override=None,
    burn_in=None,
    min_ess=1000.0,
    check_diagnostics=True,
):
    """Sample the inter-lab posterior with the t-walk; labs is an ordered
    {lab_name: Experiment} sharing one treatment."""
    post = InterLabPosterior(labs, priors, n0_prior=n0_prior, q_override=q_override)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, walk_ss = ss.spawn(2)
    rng = np.random.Generator(np.random.PCG64(init_ss))

    def one_point():
        blocks = []
        e_ls = []
        for exp in post.labs.values():
            pa, _pb = initial_points(exp, priors, rng, q_override=q_override)
            blocks.append(pa)
            e_ls.append(pa[0])
        eps = 1e-9 * priors.M
        e_g = min(max(float(np.mean(e_ls)), eps), priors.M - eps)
        a_g = min(max(rng.exponential(priors.b), 1e-6), 0.9 * A_CAP_FACTOR * priors.b)
        return np.concatenate([[e_g, a_g], *blocks])

    pa = one_point()
    pb = one_point()
    for _ in range(100):
        if np.all(pa != pb):
            break
        pb = one_point()
    chain = mcmc.sample(
        post, post.support, pa, pb, iterations=iterations, seed=walk_ss, burn_in=burn_in
    )
    ichain = InterLabChain(
        chain=chain, labs=dict(labs), priors=priors, seed=seed, n0_prior=n0_prior
    )
    if check_diagnostics:
        ess_eg = float(chain.ess_per_dim[0])
        if not ess_eg >= min_ess:
            raise mcmc.DiagnosticError(
                f"ESS of the global E is {ess_eg:.0f} < {min_ess:.0f} "
                f"(per-dimension ESS: {np.array2string(chain.ess_per_dim, precision=1)})",
                chain=ichain,
            )
    return ichain


def reproducibility_metrics(global_lr, lab_lrs, threshold=3.0):
    """Reproducibility table: per lab the expected absolute gap between the
    global and the lab log reduction (paired by iteration after truncation
    to the common length) and P(LR_l > threshold); plus the global
    P(LR > threshold)."""
    global_lr = np.asarray(global_lr, dtype=float)
    labs = {name: np.asarray(v, dtype=float) for name, v in lab_lrs.items()}
    n = min([global_lr.size] + [v.size for v in labs.values()])
    if n == 0:
        raise ValueError("empty log-reduction chain after alignment")
    g = global_lr[:n]
    table = {
        "threshold": float(threshold),
        "global_p_exceed": float(np.mean(g > threshold)),
        "labs": {},
    }
    for name, v in labs.items():
        vv = v[:n]
        table["labs"][name] = {
            "mean_abs_diff": float(np.mean(np.abs(g - vv))),
            "p_exceed": float(np.mean(vv > threshold)),
        }
    return table
