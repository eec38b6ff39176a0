"""EP for likelihood terms that depend on a low-dimensional projection.

Each site is a Gaussian factor in ``z_k = U_k' theta`` (``U_k`` is ``d × d_z``),
so only ``d_z``-dimensional quantities cross the wire: the projected global
moments go out, a ``d_z`` site update comes back.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, special

from .engine import (
    MAX_CONSECUTIVE_REJECTS,
    EPConfig,
    EPResult,
    GlobalApprox,
    RunTrace,
    _prior_proper,
)
from .models import ModelShard
from .natgauss import NaturalGaussian, NotPositiveDefinite, is_pd, log_norm, to_moments
from .tilted import TiltedMoments


class NonpositiveNormalizer(ValueError):
    pass


@dataclass(eq=False)
class LowRankSite:
    U: np.ndarray
    r: np.ndarray
    Q: np.ndarray
    log_zk: Optional[float] = None

    def __post_init__(self):
        self.U = np.asarray(self.U, dtype=float)
        if self.U.ndim == 1:
            self.U = self.U[:, None]
        dz = self.U.shape[1]
        if dz > self.U.shape[0]:
            raise ValueError("d_z must not exceed d")
        self.r = np.asarray(self.r, dtype=float).reshape(dz)
        self.Q = np.asarray(self.Q, dtype=float).reshape(dz, dz)
        self.Q = 0.5 * (self.Q + self.Q.T)

    @classmethod
    def zero(cls, U) -> "LowRankSite":
        U = np.asarray(U, dtype=float)
        dz = 1 if U.ndim == 1 else U.shape[1]
        return cls(U, np.zeros(dz), np.zeros((dz, dz)))

    @property
    def dz(self) -> int:
        return self.U.shape[1]

    def lifted(self) -> NaturalGaussian:
        """The site as a (rank-deficient) factor in theta."""
        return NaturalGaussian(self.U @ self.r, self.U @ self.Q @ self.U.T)


@dataclass(frozen=True)
class BatchPlan:
    groups: tuple

    @classmethod
    def single(cls, K: int) -> "BatchPlan":
        return cls((tuple(range(K)),))

    @classmethod
    def chunks(cls, K: int, m: int) -> "BatchPlan":
        """``m`` contiguous, nearly equal batches."""
        bounds = np.linspace(0, K, m + 1).round().astype(int)
        return cls(tuple(tuple(range(bounds[i], bounds[i + 1])) for i in range(m) if bounds[i] < bounds[i + 1]))

    def validate(self, K: int) -> None:
        flat = [k for g in self.groups for k in g]
        if sorted(flat) != list(range(K)):
            raise ValueError("batches must be disjoint and cover every site")


def lr_rebuild_global(sites: Sequence[LowRankSite], prior: NaturalGaussian,
                      plan: Optional[BatchPlan] = None) -> GlobalApprox:
    """``Q = Σ U_k Q_k U_k' + Q_0``, ``r = Σ U_k r_k + r_0``; per-batch partial sums, then central."""
    plan = plan or BatchPlan.single(len(sites))
    plan.validate(len(sites))
    r = prior.r.copy()
    Q = prior.Q.copy()
    for group in plan.groups:
        rb = np.zeros_like(r)
        Qb = np.zeros_like(Q)
        for k in group:
            s = sites[k]
            rb += s.U @ s.r
            Qb += s.U @ s.Q @ s.U.T
        r += rb
        Q += Qb
    return GlobalApprox(NaturalGaussian(r, Q), prior, valid=is_pd(Q))


def _psi(g: NaturalGaussian) -> float:
    return log_norm(g)


def lr_cavity(mu: np.ndarray, Sigma: np.ndarray, site: LowRankSite, eta: float = 1.0):
    """z-space cavity and the normalizer offset ``c_k``.

    Returns ``(cavity, c_k)`` where the cavity has precision
    ``V⁻¹ - eta Q_k`` with ``m = U'mu``, ``V = U'Sigma U``, and
    ``c_k = Ψ(cavity) - Ψ(V⁻¹m, V⁻¹)``.  ``c_k`` is NaN when the cavity is not PD.
    """
    U = site.U
    m = U.T @ mu
    V = U.T @ Sigma @ U
    try:
        cho = linalg.cho_factor(V, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"projected covariance not PD: {exc}") from exc
    Vinv = linalg.cho_solve(cho, np.eye(V.shape[0]))
    marg = NaturalGaussian(Vinv @ m, Vinv)
    cav = NaturalGaussian(marg.r - eta * site.r, marg.Q - eta * site.Q)
    c_k = _psi(cav) - _psi(marg) if is_pd(cav.Q) else math.nan
    return cav, c_k


def lr_tilted_1d(loglik_z: Callable[[np.ndarray], np.ndarray], cavity: NaturalGaussian, eta: float = 1.0,
                 quad_nodes: int = 32):
    """``(log Z, mean, var)`` of ``p(y|z)^eta N(z | cavity)`` by Gauss-Hermite quadrature.

    ``log Z`` is relative to the normalized cavity.
    """
    if cavity.d != 1:
        raise ValueError("quadrature tilted moments need a one-dimensional cavity")
    q = float(cavity.Q[0, 0])
    if not q > 0:
        raise NotPositiveDefinite("cavity variance is not positive")
    v = 1.0 / q
    m = float(cavity.r[0]) * v
    x, w = np.polynomial.hermite.hermgauss(quad_nodes)
    z = m + math.sqrt(2.0 * v) * x
    lw = np.log(w) - 0.5 * math.log(math.pi) + eta * np.asarray(loglik_z(z), dtype=float)
    log_z = special.logsumexp(lw)
    if not np.isfinite(log_z):
        raise NonpositiveNormalizer("tilted normalizer is zero or not finite")
    p = np.exp(lw - log_z)
    mean = float(p @ z)
    var = float(p @ (z - mean) ** 2)
    return float(log_z), mean, var


def probit_tilted_moments(y: float, m: float, v: float):
    """Closed-form ``(log Z, mean, var)`` for ``Φ(y z) N(z | m, v)``, ``y = ±1``."""
    s = math.sqrt(1.0 + v)
    zz = y * m / s
    log_cdf = special.log_ndtr(zz)
    ratio = math.exp(-0.5 * zz * zz - 0.5 * math.log(2 * math.pi) - log_cdf)  # N(zz) / Φ(zz)
    mean = m + y * v * ratio / s
    var = v - v * v * ratio / (1.0 + v) * (zz + ratio)
    return float(log_cdf), mean, var


def lr_site_delta(tilted, cavity: NaturalGaussian, site: LowRankSite, eta: float = 1.0):
    """z-space moment matching: ``(delta, flags)``, with zero delta on discard.

    ``tilted`` is ``(log Z, mean, cov)`` in z.
    """
    log_z, mean, cov = tilted
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    zero = NaturalGaussian(np.zeros(site.dz), np.zeros((site.dz, site.dz)))
    if not np.isfinite(log_z) or not is_pd(cov):
        return zero, ["discarded"]
    Qt = np.linalg.inv(cov)
    rt = Qt @ mean
    return NaturalGaussian((rt - cavity.r) / eta - site.r, (Qt - cavity.Q) / eta - site.Q), []


def lr_guard(sites: Sequence[LowRankSite], prior: NaturalGaussian, eta: float, plan=None) -> bool:
    g = lr_rebuild_global(sites, prior, plan)
    if not g.valid:
        return False
    Sigma = to_moments(g.g).Sigma
    strict = _prior_proper(prior)
    for s in sites:
        V = s.U.T @ Sigma @ s.U
        C = np.linalg.inv(V) - eta * s.Q
        if strict:
            if not is_pd(C):
                return False
        elif np.linalg.eigvalsh(C).min() < -1e-10 * max(1.0, np.abs(C).max()):
            return False
    return True


@dataclass(eq=False)
class LowRankResult(EPResult):
    pass


MomentFn = Callable[[int, NaturalGaussian, float, int], tuple]


def lr_run(sites: list, prior: NaturalGaussian, cfg: EPConfig, moment_fn: MomentFn,
           plan: Optional[BatchPlan] = None, callback: Optional[Callable] = None) -> LowRankResult:
    """Synchronous low-rank EP.

    ``moment_fn(k, cavity_z, eta, iteration)`` returns ``(log Z, mean, cov)``
    of site ``k``'s tilted distribution in z.  Each iteration: one
    Cholesky of the global precision, per-batch cavities and tilted moments
    against that frozen state, then one damped update with PD backoff.
    """
    cfg.validate()
    plan = plan or BatchPlan.single(len(sites))
    plan.validate(len(sites))
    sites = [LowRankSite(s.U, s.r.copy(), s.Q.copy(), s.log_zk) for s in sites]
    g = lr_rebuild_global(sites, prior, plan)
    trace = RunTrace()
    converged = False
    it = 0
    workers = cfg.workers or 1
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def batch_work(group, mu, Sigma, it):
        out = []
        for k in group:
            s = sites[k]
            cav, c_k = lr_cavity(mu, Sigma, s, cfg.eta)
            try:
                t = moment_fn(k, cav, cfg.eta, it)
            except NonpositiveNormalizer:
                t = (-math.inf, np.zeros(s.dz), np.eye(s.dz))
            delta, flags = lr_site_delta(t, cav, s, cfg.eta)
            log_zk = (t[0] + c_k) / cfg.eta if not flags and np.isfinite(c_k) else None
            out.append((k, delta, log_zk, flags))
        return out

    try:
        for it in range(1, cfg.max_iters + 1):
            t0 = time.perf_counter()
            mom = to_moments(g.g)
            jobs = [(grp, mom.mu, mom.Sigma, it) for grp in plan.groups]
            parts = list(pool.map(lambda a: batch_work(*a), jobs)) if pool else [batch_work(*a) for a in jobs]
            results = sorted((x for p in parts for x in p), key=lambda x: x[0])
            deltas = [x[1] for x in results]
            dlt, rejects = cfg.delta0, 0
            while True:
                proposed = [LowRankSite(s.U, s.r + dlt * d.r, s.Q + dlt * d.Q, s.log_zk)
                            for s, d in zip(sites, deltas)]
                if lr_guard(proposed, prior, cfg.eta, plan):
                    break
                rejects += 1
                if rejects >= MAX_CONSECUTIVE_REJECTS:
                    if lr_rebuild_global(proposed, prior, plan).valid:
                        trace.event(it, -1, "accepted_with_cavity_clamp")
                    else:
                        trace.event(it, -1, "update_reverted")
                        proposed, dlt = sites, 0.0
                    break
                dlt *= cfg.delta_backoff
            for (k, _, log_zk, flags), s in zip(results, proposed):
                if log_zk is not None:
                    s.log_zk = log_zk
                for f in flags:
                    trace.event(it, k, f)
            sites = proposed
            g = lr_rebuild_global(sites, prior, plan)
            ms = (time.perf_counter() - t0) * 1e3
            logml = _lr_logml(sites, g, prior)
            for k, d, _, _ in results:
                trace.append(iter=it, site=k, dr_inf=float(np.max(np.abs(d.r))), dQ_inf=float(np.max(np.abs(d.Q))),
                             delta_used=dlt, pd_rejects=rejects, logml=logml, ms=ms / len(sites))
            if callback is not None:
                callback(it, g, sites)
            biggest = max(max(float(np.max(np.abs(d.r))), float(np.max(np.abs(d.Q)))) for d in deltas)
            if biggest < cfg.conv_tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return LowRankResult(g, sites, trace, converged, it)


def _lr_logml(sites, g: GlobalApprox, prior) -> float:
    if any(s.log_zk is None for s in sites) or not g.valid:
        return math.nan
    return lr_log_marginal_likelihood(sites, g, prior)


def lr_log_marginal_likelihood(sites: Sequence[LowRankSite], g: GlobalApprox, prior: NaturalGaussian) -> float:
    """``Σ_k (log Z_\\k + c_k)/eta + Ψ(global) - Ψ(prior)``."""
    total = sum(s.log_zk for s in sites) + log_norm(g.g)
    if _prior_proper(prior):
        total -= log_norm(prior)
    return float(total)


def quadrature_moment_fn(loglik_z: Sequence[Callable], quad_nodes: int = 32) -> MomentFn:
    """Moment callback for rank-1 sites with pointwise log-likelihoods in z."""

    def fn(k, cav, eta, it):
        log_z, m, v = lr_tilted_1d(loglik_z[k], cav, eta, quad_nodes)
        return log_z, np.array([m]), np.array([[v]])

    return fn


class RankOneQuadratureBackend:
    """Dense-theta tilted moments for shards whose likelihood depends on ``x'theta``.

    The shard must carry ``data["u"]`` (the projection vector) and
    ``data["loglik_z"]``.  The cavity is projected onto ``z``, the
    one-dimensional tilted moments come from quadrature, and the theta
    moments follow from the Gaussian conditional of theta given z.
    """

    name = "quadrature"

    def __init__(self, quad_nodes: int = 32):
        self.quad_nodes = quad_nodes

    def __call__(self, shard: ModelShard, cavity: NaturalGaussian, eta: float = 1.0, *, key=(), cache=None):
        u = np.asarray(shard.data["u"], dtype=float)
        cm = to_moments(cavity)
        Su = cm.Sigma @ u
        v = float(u @ Su)
        m = float(u @ cm.mu)
        zc = NaturalGaussian(np.array([m / v]), np.array([[1.0 / v]]))
        log_z, mt, vt = lr_tilted_1d(shard.data["loglik_z"], zc, eta, self.quad_nodes)
        mean = cm.mu + Su * (mt - m) / v
        cov = cm.Sigma - np.outer(Su, Su) * (v - vt) / v**2
        cov = 0.5 * (cov + cov.T)
        Q = np.linalg.inv(cov)
        return TiltedMoments(mean, cov, NaturalGaussian(Q @ mean, Q), log_z, "quadrature")


def rank_one_shards(X: np.ndarray, y: np.ndarray, loglik_factory: Callable[[float], Callable]) -> list:
    """One shard per observation with likelihood ``p(y_i | x_i'theta)``."""
    shards = []
    for i, (x, yi) in enumerate(zip(np.asarray(X, dtype=float), np.asarray(y, dtype=float))):
        f = loglik_factory(yi)

        def ll(t, f=f, x=x):
            return float(f(np.array([x @ t]))[0])

        shards.append(ModelShard(log_lik=ll, grad=lambda t: None, dim=x.size, data={"u": x, "loglik_z": f},
                                 name=f"obs{i}"))
    return shards
