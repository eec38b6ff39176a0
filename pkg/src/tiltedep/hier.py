"""EP for models with shared parameters ``phi`` and per-shard locals ``alpha_k``.

Two routes are offered.  :func:`marginal_mode_run` keeps sites on ``phi``
only and integrates ``alpha_k`` out inside each tilted computation.
:func:`hier_run` keeps joint ``(alpha_k, phi)`` sites in block form and
never assembles the joint over all locals; the ``phi`` marginal and the
cavities come from per-site Schur complements.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from . import engine
from .engine import EPConfig, EPResult, RunTrace, init_sites, run
from .models import ModelShard
from .natgauss import (
    DimensionMismatch,
    MomentGaussian,
    NaturalGaussian,
    NotPositiveDefinite,
    clamp_eigenvalues,
    is_pd,
)
from .tilted import SamplerConfig, find_mode, jittered_cholesky, rwm


@dataclass(eq=False)
class HierSite:
    a: np.ndarray
    b: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray  # d_alpha × d_phi

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        da, dp = self.a.size, self.b.size
        self.A = np.asarray(self.A, dtype=float).reshape(da, da)
        self.B = np.asarray(self.B, dtype=float).reshape(dp, dp)
        self.C = np.asarray(self.C, dtype=float).reshape(da, dp)

    @classmethod
    def zero(cls, d_alpha: int, d_phi: int) -> "HierSite":
        return cls(np.zeros(d_alpha), np.zeros(d_phi), np.zeros((d_alpha, d_alpha)), np.zeros((d_phi, d_phi)),
                   np.zeros((d_alpha, d_phi)))

    @classmethod
    def from_joint(cls, g: NaturalGaussian, d_alpha: int) -> "HierSite":
        m = d_alpha
        return cls(g.r[:m], g.r[m:], g.Q[:m, :m], g.Q[m:, m:], g.Q[:m, m:])

    @property
    def d_alpha(self) -> int:
        return self.a.size

    @property
    def d_phi(self) -> int:
        return self.b.size

    def joint(self) -> NaturalGaussian:
        return NaturalGaussian(np.r_[self.a, self.b], np.block([[self.A, self.C], [self.C.T, self.B]]))

    def axpy(self, c: float, other: "HierSite") -> "HierSite":
        return HierSite(self.a + c * other.a, self.b + c * other.b, self.A + c * other.A, self.B + c * other.B,
                        self.C + c * other.C)

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(x))) if x.size else 0.0 for x in (self.a, self.b, self.A, self.B, self.C))


@dataclass(eq=False)
class HierPriors:
    a0: np.ndarray
    A0: np.ndarray
    b0: np.ndarray
    B0: np.ndarray

    def __post_init__(self):
        self.a0 = np.asarray(self.a0, dtype=float).reshape(-1)
        self.b0 = np.asarray(self.b0, dtype=float).reshape(-1)
        self.A0 = np.asarray(self.A0, dtype=float).reshape(self.a0.size, self.a0.size)
        self.B0 = np.asarray(self.B0, dtype=float).reshape(self.b0.size, self.b0.size)
        if not is_pd(self.A0) or not is_pd(self.B0):
            raise NotPositiveDefinite("hierarchical priors must have PD precisions")

    @property
    def alpha(self) -> NaturalGaussian:
        return NaturalGaussian(self.a0, self.A0)

    @property
    def phi(self) -> NaturalGaussian:
        return NaturalGaussian(self.b0, self.B0)


def _contribution(site: HierSite, priors: HierPriors, k: int = -1):
    """What site ``k`` adds to the phi marginal once ``alpha_k`` is integrated out."""
    try:
        cho = linalg.cho_factor(site.A + priors.A0, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"site {k}: A_k + A_0 is not positive definite") from exc
    b = site.b - site.C.T @ linalg.cho_solve(cho, site.a + priors.a0)
    B = site.B - site.C.T @ linalg.cho_solve(cho, site.C)
    return b, B


def phi_marginal(sites: Sequence[HierSite], priors: HierPriors) -> NaturalGaussian:
    b = priors.b0.copy()
    B = priors.B0.copy()
    for k, s in enumerate(sites):
        bk, Bk = _contribution(s, priors, k)
        b += bk
        B += Bk
    return NaturalGaussian(b, B)


def hier_cavity(sites: Sequence[HierSite], priors: HierPriors, k: int, phi: Optional[NaturalGaussian] = None):
    """``(alpha_cavity, phi_cavity)`` for site ``k``; the former is always the alpha prior."""
    phi = phi if phi is not None else phi_marginal(sites, priors)
    bk, Bk = _contribution(sites[k], priors, k)
    return priors.alpha, NaturalGaussian(phi.r - bk, phi.Q - Bk)


def hier_joint_cavity(site: HierSite, priors: HierPriors, phi_cavity: NaturalGaussian,
                      eta: float = 1.0) -> NaturalGaussian:
    """Cavity over ``(alpha_k, phi)`` when a fraction ``eta`` of the site is removed.

    With ``eta = 1`` it factorizes into the alpha prior and ``phi_cavity``.
    """
    keep = 1.0 - eta
    r = np.r_[priors.a0 + keep * site.a, phi_cavity.r + keep * site.b]
    Q = np.block([[priors.A0 + keep * site.A, keep * site.C],
                  [keep * site.C.T, phi_cavity.Q + keep * site.B]])
    return NaturalGaussian(r, Q)


def alpha_marginal(site: HierSite, priors: HierPriors, phi_cavity: NaturalGaussian) -> MomentGaussian:
    """Moments of ``alpha_k`` under the global approximation, with ``phi`` integrated out."""
    Bt = phi_cavity.Q + site.B
    bt = phi_cavity.r + site.b
    try:
        cho = linalg.cho_factor(Bt, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("B_-k + B_k is not positive definite") from exc
    P = priors.A0 + site.A - site.C @ linalg.cho_solve(cho, site.C.T)
    h = priors.a0 + site.a - site.C @ linalg.cho_solve(cho, bt)
    try:
        choP = linalg.cho_factor(P, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite("alpha marginal precision is not positive definite") from exc
    Sigma = linalg.cho_solve(choP, np.eye(P.shape[0]))
    return MomentGaussian(Sigma @ h, Sigma)


def hier_tilted_update(shard: ModelShard, priors: HierPriors, site: HierSite, phi_cavity: NaturalGaussian,
                       backend: Callable, eta: float = 1.0, key=(), cache=None):
    """One joint tilted fit over ``(alpha_k, phi)``.

    ``shard`` holds only ``p(y_k | alpha_k, phi)``; the alpha prior enters
    through the cavity.  Returns ``(delta, log_z, tilted)``; ``delta`` is all
    zero when the tilted fit is unusable.
    """
    if shard.n_local != site.d_alpha or shard.d_phi != site.d_phi:
        raise DimensionMismatch("shard and site block sizes differ")
    cav = hier_joint_cavity(site, priors, phi_cavity, eta)
    t = backend(shard, cav, eta, key=key, cache=cache)
    tj = t.joint if t.joint is not None else t.natural()
    if not np.isfinite(t.log_z) or not is_pd(tj.Q):
        return HierSite.zero(site.d_alpha, site.d_phi), t.log_z, t
    d = NaturalGaussian((tj.r - cav.r) / eta, (tj.Q - cav.Q) / eta)
    delta = HierSite.from_joint(d, site.d_alpha).axpy(-1.0, site)
    return delta, t.log_z, t


def _guard(sites, priors, eta) -> bool:
    try:
        phi = phi_marginal(sites, priors)
    except NotPositiveDefinite:
        return False
    if not is_pd(phi.Q):
        return False
    for k, s in enumerate(sites):
        _, pc = hier_cavity(sites, priors, k, phi)
        if not is_pd(hier_joint_cavity(s, priors, pc, eta).Q):
            return False
    return True


@dataclass(eq=False)
class HierResult:
    phi: NaturalGaussian
    sites: list
    trace: RunTrace
    converged: bool
    iterations: int
    tilted: list = field(default_factory=list)

    def alpha(self, k: int, priors: HierPriors) -> MomentGaussian:
        _, pc = hier_cavity(self.sites, priors, k, self.phi)
        return alpha_marginal(self.sites[k], priors, pc)


def hier_run(shards: Sequence[ModelShard], priors: HierPriors, cfg: EPConfig, backend: Callable,
             sites: Optional[list] = None) -> HierResult:
    """Block-form hierarchical EP with damping, PD backoff and a clamp fallback."""
    cfg.validate()
    K = len(shards)
    da, dp = priors.a0.size, priors.b0.size
    sites = list(sites) if sites is not None else [HierSite.zero(da, dp) for _ in range(K)]
    trace = RunTrace()
    caches = [None] * K
    tilted = [None] * K
    phi = phi_marginal(sites, priors)
    converged = False
    it = 0

    def work(k, phi):
        _, pc = hier_cavity(sites, priors, k, phi)
        if not is_pd(pc.Q):
            pc = NaturalGaussian(pc.r, clamp_eigenvalues(pc.Q, cfg.pd_floor))
            trace.event(it, k, "cavity_clamped")
        return hier_tilted_update(shards[k], priors, sites[k], pc, backend, cfg.eta, key=(k, it), cache=caches[k])

    def accept(current, deltas, idx):
        dlt, rejects = cfg.delta0, 0
        while True:
            prop = list(current)
            for i in idx:
                prop[i] = current[i].axpy(dlt, deltas[i])
            if _guard(prop, priors, cfg.eta):
                return prop, dlt, rejects
            rejects += 1
            if rejects >= engine.MAX_CONSECUTIVE_REJECTS:
                try:
                    ok = is_pd(phi_marginal(prop, priors).Q)
                except NotPositiveDefinite:
                    ok = False
                trace.event(it, idx[0] if len(idx) == 1 else -1, "accepted_with_cavity_clamp" if ok else "update_reverted")
                return (prop, dlt, rejects) if ok else (list(current), 0.0, rejects)
            dlt *= cfg.delta_backoff

    for it in range(1, cfg.max_iters + 1):
        biggest = 0.0
        t0 = time.perf_counter()
        if cfg.schedule == "parallel":
            outs = [work(k, phi) for k in range(K)]
            deltas = [o[0] for o in outs]
            sites, dlt, rej = accept(sites, deltas, list(range(K)))
            phi = phi_marginal(sites, priors)
            for k, o in enumerate(outs):
                caches[k], tilted[k] = o[2].cache, o[2]
                trace.append(iter=it, site=k, dr_inf=max(_inf(o[0].a), _inf(o[0].b)),
                             dQ_inf=max(_inf(o[0].A), _inf(o[0].B), _inf(o[0].C)), delta_used=dlt,
                             pd_rejects=rej, logml=math.nan, ms=(time.perf_counter() - t0) * 1e3 / K)
                biggest = max(biggest, o[0].max_abs())
        else:
            for k in range(K):
                tk = time.perf_counter()
                delta, _, t = work(k, phi)
                deltas = [HierSite.zero(da, dp)] * K
                deltas[k] = delta
                sites, dlt, rej = accept(sites, deltas, [k])
                phi = phi_marginal(sites, priors)
                caches[k], tilted[k] = t.cache, t
                trace.append(iter=it, site=k, dr_inf=max(_inf(delta.a), _inf(delta.b)),
                             dQ_inf=max(_inf(delta.A), _inf(delta.B), _inf(delta.C)), delta_used=dlt,
                             pd_rejects=rej, logml=math.nan, ms=(time.perf_counter() - tk) * 1e3)
                biggest = max(biggest, delta.max_abs())
        if biggest < cfg.conv_tol:
            converged = True
            break
    return HierResult(phi, sites, trace, converged, it, tilted)


def _inf(x) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def marginal_mode_run(shards: Sequence[ModelShard], phi_prior: NaturalGaussian, cfg: EPConfig,
                      backend: Callable, **kwargs) -> EPResult:
    """EP on ``phi`` alone; each shard integrates its own locals.

    Shards must include the local prior ``p(alpha_k | phi)`` in their
    log-likelihood.  Per-site tilted fits (with any draws) stay on the
    returned sites for reporting on the locals.
    """
    d = phi_prior.d
    if any(s.d_phi != d for s in shards):
        raise DimensionMismatch("every shard must share the prior's phi dimension")
    _, sites = init_sites(len(shards), d, cfg, phi_prior)
    return run(sites, cfg, backend, shards, phi_prior, **kwargs)


def outer_from_inner(u_list, v_list, r_tilde_list, Q_tilde_list) -> HierSite:
    """Assemble a joint site from per-observation sites on ``z_j = u_j'alpha + v_j'phi``.

    ``u_j`` is ``d_alpha × d_z`` and ``v_j`` is ``d_phi × d_z``; the inner
    site ``j`` has natural parameters ``(r̃_j, Q̃_j)`` in ``z_j``.
    """
    if not (len(u_list) == len(v_list) == len(r_tilde_list) == len(Q_tilde_list)):
        raise DimensionMismatch("inner-site lists differ in length")
    if not u_list:
        raise DimensionMismatch("need at least one inner site")
    site = None
    for u, v, r, Q in zip(u_list, v_list, r_tilde_list, Q_tilde_list):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        u = u[:, None] if u.ndim == 1 else u
        v = v[:, None] if v.ndim == 1 else v
        r = np.atleast_1d(np.asarray(r, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        dz = r.size
        if u.shape[1] != dz or v.shape[1] != dz or Q.shape != (dz, dz):
            raise DimensionMismatch("inner-site shapes do not agree")
        if site is None:
            site = HierSite.zero(u.shape[0], v.shape[0])
        elif u.shape[0] != site.d_alpha or v.shape[0] != site.d_phi:
            raise DimensionMismatch("inner-site block sizes differ")
        site = HierSite(site.a + u @ r, site.b + v @ r, site.A + u @ Q @ u.T, site.B + v @ Q @ v.T,
                        site.C + u @ Q @ v.T)
    return site


def conditional_local_inference(phi_draws: np.ndarray, shards: Sequence[ModelShard],
                                sc: Optional[SamplerConfig] = None) -> list:
    """Draw ``alpha_k | phi, y_k`` once per ``phi`` draw and shard.

    Each ``phi`` draw drives its own chain (all chains of one shard run
    vectorized), and the chain's final state is kept.  Returns one array of
    shape ``(n_phi, n_local)`` per shard, in shard coordinates.
    """
    phi_draws = np.atleast_2d(np.asarray(phi_draws, dtype=float))
    sc = sc or SamplerConfig(n_warmup=200, n_draws=1)
    n = phi_draws.shape[0]
    out = []
    for k, shard in enumerate(shards):
        m = shard.n_local
        if phi_draws.shape[1] != shard.d_phi:
            raise DimensionMismatch("phi draws do not match the shard's shared dimension")
        rng = np.random.default_rng([int(sc.seed), k])
        # proposal scale from the conditional mode at the average phi
        phibar = phi_draws.mean(axis=0)
        cond = ModelShard(
            log_lik=lambda a, pb=phibar, sh=shard: sh.log_lik(np.r_[a, pb]),
            grad=lambda a, pb=phibar, sh=shard: np.asarray(sh.grad(np.r_[a, pb]))[:m],
            hess=lambda a, pb=phibar, sh=shard: sh.hessian(np.r_[a, pb])[:m, :m],
            dim=m,
        )
        mode = find_mode(cond, NaturalGaussian.unit(m), 1.0)
        L, _ = jittered_cholesky(np.linalg.inv(mode.precision))

        def logp(A, sh=shard):
            return sh.loglik_many(np.hstack([A, phi_draws]))

        x0 = mode.x + rng.standard_normal((n, m)) @ L.T
        ch = rwm(logp, x0, L, SamplerConfig(n_warmup=sc.n_warmup, n_draws=max(sc.n_draws, 1), n_chains=n,
                                            proposal_scale=sc.proposal_scale, adapt_target=sc.adapt_target,
                                            seed=sc.seed), rng)
        out.append(ch.draws[:, -1, :])
    return out
