"""Approximating the tilted distribution ``p(y_k | x)^eta * cavity(phi)``.

Two backends are provided: a Laplace (mode + curvature) fit and adaptive
random-walk Metropolis.  Shards with local parameters are handled by running
the backend on the joint ``(alpha_k, phi)`` and marginalizing the Gaussian
fit onto ``phi``; the cavity never touches the local block.

Every backend is a callable ``backend(shard, cavity, eta, *, key, cache)``
that returns a :class:`TiltedMoments`.  ``key`` seeds per-invocation random
state and ``cache`` is whatever the backend stored last time for this site.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from .models import ModelShard
from .natgauss import (
    LOG_2PI,
    NaturalGaussian,
    WeightedDraws,
    clamp_eigenvalues,
    is_pd,
    jittered_cholesky,
    log_norm,
    moments_from_draws,
    symmetrize,
    to_moments,
)

log = logging.getLogger(__name__)


class ModeSearchFailed(RuntimeError):
    pass


class ChainDiverged(RuntimeError):
    pass


class AllZeroWeights(ValueError):
    pass


@dataclass(eq=False)
class TiltedMoments:
    mean: np.ndarray
    cov: np.ndarray
    nat: Optional[NaturalGaussian]
    log_z: float
    backend: str
    ess: Optional[float] = None
    draws: Optional[WeightedDraws] = None
    joint: Optional[NaturalGaussian] = None  # fit over (alpha_k, phi) for local shards
    log_z_low_precision: bool = False
    flags: list = field(default_factory=list)
    cache: Any = None
    accept_rate: Optional[float] = None

    def natural(self) -> NaturalGaussian:
        if self.nat is not None:
            return self.nat
        Q = np.linalg.inv(self.cov)
        return NaturalGaussian(Q @ self.mean, Q)


@dataclass
class SamplerConfig:
    n_warmup: int = 200
    n_draws: int = 1000
    n_chains: int = 1
    proposal_scale: Optional[float] = None  # None -> 2.38 / sqrt(d)
    adapt_target: float = 0.30
    seed: int = 0
    proposal: str = "auto"  # auto | cavity | laplace

    def __post_init__(self):
        if self.n_warmup < 0 or self.n_draws < 1 or self.n_chains < 1:
            raise ValueError("sampler counts must be positive")
        if not 0 < self.adapt_target < 1:
            raise ValueError("adapt_target must lie in (0, 1)")
        if self.proposal not in ("auto", "cavity", "laplace"):
            raise ValueError(f"unknown proposal {self.proposal!r}")


def embed_cavity(cavity: NaturalGaussian, shard: ModelShard) -> NaturalGaussian:
    """Lift a cavity on ``phi`` to the shard's full coordinate vector.

    A cavity that already spans every coordinate is returned as is.
    """
    m = shard.n_local
    if cavity.d == shard.dim:
        return cavity
    if m == 0 or cavity.d != shard.d_phi:
        raise ValueError(f"cavity dimension {cavity.d} != shared dimension {shard.d_phi}")
    r = np.zeros(shard.dim)
    Q = np.zeros((shard.dim, shard.dim))
    r[m:] = cavity.r
    Q[m:, m:] = cavity.Q
    return NaturalGaussian(r, Q)


def _from_joint(joint: NaturalGaussian, shard: ModelShard) -> NaturalGaussian:
    return joint.marginal(shard.phi_index) if shard.n_local else joint


def _start_point(cav_full: NaturalGaussian) -> np.ndarray:
    x0, *_ = np.linalg.lstsq(cav_full.Q, cav_full.r, rcond=None)
    return x0


# ------------------------------------------------------------------ Laplace


@dataclass(eq=False)
class ModeResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    precision: np.ndarray  # -Hessian of the objective at x
    iterations: int
    clamped: bool


def find_mode(shard: ModelShard, cav_full: NaturalGaussian, eta: float, x0: Optional[np.ndarray] = None,
              max_iter: int = 100, gtol: float = 1e-8, floor: float = 1e-8) -> ModeResult:
    """Newton ascent on ``eta * loglik(x) - 0.5 x'Qx + r'x`` with Armijo backtracking."""

    def f(x):
        return eta * shard.log_lik(x) + float(cav_full.logpdf_unnorm(x))

    def g(x):
        return eta * np.asarray(shard.grad(x)) - cav_full.Q @ x + cav_full.r

    def negH(x):
        return symmetrize(-eta * shard.hessian(x) + cav_full.Q)

    x = _start_point(cav_full) if x0 is None else np.asarray(x0, dtype=float).copy()
    fx, gx = f(x), g(x)
    if not np.isfinite(fx):
        raise ModeSearchFailed("objective not finite at the starting point")
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(gx)) < gtol:
            break
        p = _newton_step(negH(x), gx, floor)
        slope = float(gx @ p)
        t = 1.0
        while True:
            xn = x + t * p
            fn = f(xn)
            if np.isfinite(fn) and fn >= fx + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                break
        if t < 1e-12:
            # no ascent possible along the Newton direction: at numerical optimum
            break
        x, fx = xn, fn
        gx = g(x)
        if not np.all(np.isfinite(gx)):
            raise ModeSearchFailed("gradient not finite during mode search")
    gmax = float(np.max(np.abs(gx)))
    if gmax > 1e-5 * (1.0 + abs(fx)):
        raise ModeSearchFailed(f"mode search stopped with gradient {gmax:.3g} after {it} iterations")
    H = negH(x)
    clamped = False
    if not is_pd(H):
        H = clamp_eigenvalues(H, floor)
        clamped = True
    return ModeResult(x, fx, gx, H, it, clamped)


def _newton_step(H: np.ndarray, g: np.ndarray, floor: float) -> np.ndarray:
    try:
        return linalg.cho_solve(linalg.cho_factor(H, lower=True), g)
    except linalg.LinAlgError:
        pass
    # indefinite or singular curvature: solve with a floored spectrum
    lam, V = np.linalg.eigh(H)
    lam = np.maximum(lam, max(floor, 1e-8 * float(np.max(np.abs(lam)))))
    return V @ ((V.T @ g) / lam)


def laplace_moments(shard: ModelShard, cavity: NaturalGaussian, eta: float = 1.0,
                    x0: Optional[np.ndarray] = None) -> TiltedMoments:
    """Gaussian fit at the tilted mode with precision ``-eta ∇²loglik + Q_cav``."""
    cav_full = embed_cavity(cavity, shard)
    mode = find_mode(shard, cav_full, eta, x0=x0)
    H = mode.precision
    # adding the residual gradient makes r exact when the target is Gaussian
    joint = NaturalGaussian(H @ mode.x + mode.grad, H)
    # log Z = log ∫ exp(f) - Ψ(cavity);  ∫ exp(f) ≈ exp(f(m)) |H / 2π|^{-1/2}
    logdetH = 2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(H))))
    log_int = mode.f + 0.5 * (shard.dim * LOG_2PI - logdetH)
    log_z = log_int - _psi_or_zero(cavity)
    nat = _from_joint(joint, shard)
    mom = to_moments(nat)
    flags = ["hessian_clamped"] if mode.clamped else []
    return TiltedMoments(mom.mu, mom.Sigma, nat, float(log_z), "laplace", joint=joint, flags=flags,
                         cache={"mode": mode.x})


def _psi_or_zero(g: NaturalGaussian) -> float:
    # flat (improper) cavities carry no normalizer
    if not np.any(g.Q):
        return 0.0
    if not is_pd(g.Q):
        return math.nan
    return log_norm(g)


# --------------------------------------------------------------------- MCMC


def ess(weights) -> float:
    """Effective sample size ``(Σw)² / Σw²`` of importance weights."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    s2 = float(w @ w)
    if s2 == 0.0:
        raise AllZeroWeights("all weights are zero")
    return float(w.sum() ** 2 / s2)


def autocorr_ess(x: np.ndarray) -> float:
    """Effective sample size of a scalar chain (Geyer's initial positive sequence)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    tau = 1.0
    for t in range(1, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair < 0:
            break
        tau += 2 * pair
    return float(n / tau)


@dataclass(eq=False)
class ChainResult:
    draws: np.ndarray  # (n_chains, n_draws, d)
    accept_rate: float
    scale: float


def rwm(logp: Callable[[np.ndarray], np.ndarray], x0: np.ndarray, chol: np.ndarray, sc: SamplerConfig,
        rng: np.random.Generator) -> ChainResult:
    """Adaptive random-walk Metropolis, vectorized over chains.

    Proposals are ``x + s L z``.  During warmup ``log s`` follows a
    Robbins-Monro recursion toward ``sc.adapt_target``; it is frozen after.
    """
    X = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    C, d = X.shape
    lp = np.asarray(logp(X), dtype=float)
    if not np.all(np.isfinite(lp)):
        raise ChainDiverged("log density not finite at the initial state")
    log_s = math.log(sc.proposal_scale if sc.proposal_scale else 2.38 / math.sqrt(d))
    out = np.empty((C, sc.n_draws, d))
    n_acc = 0
    for t in range(sc.n_warmup + sc.n_draws):
        prop = X + math.exp(log_s) * rng.standard_normal((C, d)) @ chol.T
        lpp = np.asarray(logp(prop), dtype=float)
        lpp = np.where(np.isnan(lpp), -np.inf, lpp)
        acc = np.log(rng.uniform(size=C)) < lpp - lp
        X[acc] = prop[acc]
        lp[acc] = lpp[acc]
        if t < sc.n_warmup:
            log_s += (t + 1) ** -0.6 * (float(np.mean(acc)) - sc.adapt_target)
        else:
            out[:, t - sc.n_warmup] = X
            n_acc += int(acc.sum())
        if not np.all(np.isfinite(lp)):
            raise ChainDiverged("accepted a state with non-finite log density")
    return ChainResult(out, n_acc / (C * sc.n_draws), math.exp(log_s))


def reuse_or_resample(prev: WeightedDraws, old_logpdf: Callable, new_logpdf: Callable,
                      threshold_frac: float = 0.5) -> Optional[WeightedDraws]:
    """Reweight draws of an old tilted density toward a new one.

    Weights are multiplied by ``new/old`` in log space.  Returns the
    reweighted draws when their ESS is at least ``threshold_frac * S``, and
    ``None`` when fresh draws are needed.
    """
    logw = np.log(prev.weights) + new_logpdf(prev.draws) - old_logpdf(prev.draws)
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = np.max(logw)
    if not np.isfinite(top):
        return None
    w = np.exp(logw - top)
    if ess(w) < threshold_frac * prev.S:
        return None
    return WeightedDraws(prev.draws, w, prev.source_id)


@dataclass(eq=False)
class DrawCache:
    """Draws from one tilted fit, kept so later cavities can reweight them."""

    draws: np.ndarray
    cavity: NaturalGaussian  # cavity (on phi) the draws were targeted at
    log_z: float
    grads: Optional[np.ndarray] = None
    hessians: Optional[np.ndarray] = None
    log_weights: Optional[np.ndarray] = None


def _score_site(X: np.ndarray, w: np.ndarray, G: np.ndarray, H: np.ndarray, eta: float) -> NaturalGaussian:
    """Gaussian pseudo-likelihood matching the weighted mean gradient and Hessian.

    Precision ``eta * E[-∇²ℓ]``; location chosen so that the Gaussian's
    gradient has the same expectation as ``eta * ∇ℓ`` under the draws.
    """
    P = -eta * np.einsum("s,sij->ij", w, H)
    xbar = w @ X
    return NaturalGaussian(eta * (w @ G) + P @ xbar, P)


class MCMCBackend:
    """Tilted moments from adaptive random-walk Metropolis.

    ``estimator="moments"`` inverts the weighted sample covariance of the
    draws.  ``estimator="score"`` averages the shard's gradient and Hessian
    over the same draws, so the site estimate has noise on the scale of the
    site rather than of the whole tilted distribution.  With ``reuse`` set,
    draws from the previous call are importance-reweighted to the new cavity
    and kept while their ESS stays above ``threshold_frac`` of the count.
    """

    name = "mcmc"

    def __init__(self, sc: Optional[SamplerConfig] = None, estimator: str = "moments", reuse: bool = False,
                 threshold_frac: float = 0.5, pd_floor: float = 1e-8):
        if estimator not in ("moments", "score"):
            raise ValueError(f"unknown estimator {estimator!r}")
        self.sc = sc or SamplerConfig()
        self.estimator = estimator
        self.reuse = reuse
        self.threshold_frac = threshold_frac
        self.pd_floor = pd_floor

    def __call__(self, shard: ModelShard, cavity: NaturalGaussian, eta: float = 1.0, *,
                 key: Sequence[int] = (), cache: Any = None) -> TiltedMoments:
        cav_full = embed_cavity(cavity, shard)
        if self.reuse and isinstance(cache, DrawCache) and cache.draws.shape[1] == shard.dim:
            t = self._reweighted(shard, cavity, cav_full, eta, cache)
            if t is not None:
                return t
        rng = np.random.default_rng([int(self.sc.seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])
        return self._fresh(shard, cavity, cav_full, eta, rng)

    # -- fresh sampling
    def _proposal(self, shard, cavity, cav_full, eta):
        use_cav = self.sc.proposal == "cavity" or (
            self.sc.proposal == "auto" and shard.n_local == 0 and is_pd(cavity.Q))
        if use_cav:
            m = to_moments(cavity)
            return m.mu, np.linalg.cholesky(m.Sigma)
        mode = find_mode(shard, cav_full, eta)
        L, _ = jittered_cholesky(np.linalg.inv(mode.precision))
        return mode.x, L

    def _fresh(self, shard, cavity, cav_full, eta, rng) -> TiltedMoments:
        sc = self.sc

        def logp(X):
            return eta * shard.loglik_many(X) + cav_full.logpdf_unnorm(X)

        center, L = self._proposal(shard, cavity, cav_full, eta)
        x0 = center + rng.standard_normal((sc.n_chains, shard.dim)) @ L.T
        ch = rwm(logp, x0, L, sc, rng)
        X = ch.draws.reshape(-1, shard.dim)
        wd = WeightedDraws.unweighted(X, source_id=shard.name)
        log_z = self._is_log_z(shard, cavity, cav_full, eta, X, rng)
        cache = DrawCache(X, cavity, log_z)
        if self.estimator == "score":
            cache.grads = shard.grad_many(X)
            cache.hessians = shard.hess_many(X)
        t = self._summarize(shard, cav_full, eta, wd, cache)
        t.accept_rate = ch.accept_rate
        return t

    def _is_log_z(self, shard, cavity, cav_full, eta, X, rng) -> float:
        # proposal: Gaussian matched to the draws, same budget as the chain
        m = moments_from_draws(WeightedDraws.unweighted(X))
        L, S = jittered_cholesky(m.Sigma)
        Z = rng.standard_normal(X.shape)
        Y = m.mu + Z @ L.T
        logq = -0.5 * np.sum(Z**2, axis=1) - np.sum(np.log(np.diag(L))) - 0.5 * shard.dim * LOG_2PI
        logt = eta * shard.loglik_many(Y) + cav_full.logpdf_unnorm(Y) - _psi_or_zero(cavity)
        lw = np.where(np.isfinite(logt), logt - logq, -np.inf)
        top = lw.max()
        return float(top + np.log(np.mean(np.exp(lw - top))))

    # -- reuse
    def _reweighted(self, shard, cavity, cav_full, eta, cache: DrawCache) -> Optional[TiltedMoments]:
        old_full = embed_cavity(cache.cavity, shard)
        lw0 = cache.log_weights if cache.log_weights is not None else np.zeros(cache.draws.shape[0])
        prev = WeightedDraws(cache.draws, np.exp(lw0 - lw0.max()), shard.name)
        # the likelihood factor is common to both tilted densities and cancels
        rw = reuse_or_resample(prev, old_full.logpdf_unnorm, cav_full.logpdf_unnorm, self.threshold_frac)
        if rw is None:
            return None
        # draws stay tied to the cavity they were sampled under
        lw = old_full.logpdf_unnorm(cache.draws)
        lw = cav_full.logpdf_unnorm(cache.draws) - lw
        top = lw.max()
        log_z = (cache.log_z + _psi_or_zero(cache.cavity) - _psi_or_zero(cavity)
                 + float(top + np.log(np.mean(np.exp(lw - top)))))
        new_cache = DrawCache(cache.draws, cache.cavity, cache.log_z, cache.grads, cache.hessians, lw)
        t = self._summarize(shard, cav_full, eta, rw, new_cache, log_z=log_z)
        t.backend = "reuse"
        t.flags.append("reused")
        return t

    # -- moment summaries
    def _summarize(self, shard, cav_full, eta, wd: WeightedDraws, cache: DrawCache,
                   log_z: Optional[float] = None) -> TiltedMoments:
        w = wd.weights / wd.weights.sum()
        flags = []
        if self.estimator == "score":
            site = _score_site(wd.draws, w, cache.grads, cache.hessians, eta)
            Q = site.Q + cav_full.Q
            if not is_pd(Q):
                Q = clamp_eigenvalues(Q, self.pd_floor)
                flags.append("precision_clamped")
            joint = NaturalGaussian(site.r + cav_full.r, Q)
        else:
            m = moments_from_draws(wd)
            Q = np.linalg.inv(m.Sigma)
            joint = NaturalGaussian(Q @ m.mu, Q)
        nat = _from_joint(joint, shard)
        mom = to_moments(nat)
        return TiltedMoments(
            mom.mu, mom.Sigma, nat, cache.log_z if log_z is None else log_z, "mcmc",
            ess=ess(w), draws=wd, joint=joint, log_z_low_precision=True, flags=flags, cache=cache,
        )


def mcmc_moments(shard: ModelShard, cavity: NaturalGaussian, eta: float = 1.0,
                 sc: Optional[SamplerConfig] = None, estimator: str = "moments",
                 key: Sequence[int] = ()) -> TiltedMoments:
    return MCMCBackend(sc, estimator=estimator)(shard, cavity, eta, key=key)


class LaplaceBackend:
    """Mode-and-curvature fit; warm-starts Newton from the previous mode."""

    name = "laplace"

    def __call__(self, shard: ModelShard, cavity: NaturalGaussian, eta: float = 1.0, *,
                 key: Sequence[int] = (), cache: Any = None) -> TiltedMoments:
        x0 = cache.get("mode") if isinstance(cache, dict) else None
        try:
            return laplace_moments(shard, cavity, eta, x0=x0)
        except ModeSearchFailed:
            if x0 is None:
                raise
            return laplace_moments(shard, cavity, eta)


class SplitNormalBackend:
    """Placeholder slot for split-normal / split-t refinements of the mode fit."""

    name = "split_normal"

    def __call__(self, *args, **kwargs):
        raise NotImplementedError("split-normal tilted refinement is not implemented")


def make_backend(name: str, sc: Optional[SamplerConfig] = None, **kwargs):
    if name == "laplace":
        return LaplaceBackend()
    if name == "mcmc":
        return MCMCBackend(sc, **kwargs)
    raise ValueError(f"unknown backend {name!r}")
