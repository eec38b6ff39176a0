"""The EP outer loop: sites, cavities, damped updates, PD guard, schedules."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .models import ModelShard
from .natgauss import (
    DimensionMismatch,
    NaturalGaussian,
    clamp_eigenvalues,
    divide,
    is_pd,
    log_norm,
)
from .tilted import TiltedMoments

log = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "site", "dr_inf", "dQ_inf", "delta_used", "pd_rejects", "logml", "ms"]
MAX_CONSECUTIVE_REJECTS = 10


class InvalidConfig(ValueError):
    pass


class MissingNormalizers(ValueError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, result: "EPResult"):
        super().__init__(f"no convergence after {result.iterations} iterations")
        self.result = result


@dataclass
class EPConfig:
    eta: float = 1.0
    delta0: float = 1.0
    delta_backoff: float = 0.5
    max_iters: int = 50
    conv_tol: float = 1e-6
    init: str = "zero"  # zero | broad | broad_per_site
    init_scale: float = 10.0
    schedule: str = "serial"  # serial | parallel
    pd_floor: float = 1e-8
    on_indefinite: str = "clamp"  # clamp | discard
    workers: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 < self.eta <= 1:
            raise InvalidConfig(f"eta must lie in (0, 1], got {self.eta}")
        if not 0 < self.delta0 <= 1:
            raise InvalidConfig(f"delta0 must lie in (0, 1], got {self.delta0}")
        if not 0 < self.delta_backoff < 1:
            raise InvalidConfig(f"delta_backoff must lie in (0, 1), got {self.delta_backoff}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise InvalidConfig(f"max_iters must be a nonnegative integer, got {self.max_iters}")
        if not self.conv_tol > 0:
            raise InvalidConfig("conv_tol must be positive")
        if self.init not in ("zero", "broad", "broad_per_site"):
            raise InvalidConfig(f"unknown init policy {self.init!r}")
        if self.init != "zero" and not self.init_scale > 0:
            raise InvalidConfig("init_scale must be positive for broad initialization")
        if self.schedule not in ("serial", "parallel"):
            raise InvalidConfig(f"unknown schedule {self.schedule!r}")
        if not self.pd_floor > 0:
            raise InvalidConfig("pd_floor must be positive")
        if self.on_indefinite not in ("clamp", "discard"):
            raise InvalidConfig(f"unknown indefinite policy {self.on_indefinite!r}")
        if self.workers is not None and self.workers < 1:
            raise InvalidConfig("workers must be at least 1")


@dataclass(eq=False)
class SiteState:
    k: int
    site: NaturalGaussian
    delta: Optional[NaturalGaussian] = None
    log_zk: Optional[float] = None
    cached_draws: Any = None
    tilted: Optional[TiltedMoments] = None

    def __post_init__(self):
        if self.delta is None:
            self.delta = NaturalGaussian.unit(self.site.d)
        if self.delta.d != self.site.d:
            raise DimensionMismatch("delta and site dimensions differ")


@dataclass(eq=False)
class GlobalApprox:
    g: NaturalGaussian
    prior: NaturalGaussian
    valid: bool = True

    def moments(self):
        from .natgauss import to_moments

        return to_moments(self.g)


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({c: row[c] for c in TRACE_COLUMNS})

    def event(self, it: int, site: int, what: str):
        self.events.append((it, site, what))

    def max_delta_by_iter(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out[r["iter"]] = max(out.get(r["iter"], 0.0), r["dr_inf"], r["dQ_inf"])
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in TRACE_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "RunTrace":
        tr = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != TRACE_COLUMNS:
                raise ValueError(f"{path}: line 1: expected header {','.join(TRACE_COLUMNS)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    if len(row) != len(TRACE_COLUMNS):
                        raise ValueError(f"expected {len(TRACE_COLUMNS)} fields, got {len(row)}")
                    tr.rows.append({
                        "iter": int(row[0]), "site": int(row[1]), "dr_inf": float(row[2]),
                        "dQ_inf": float(row[3]), "delta_used": float(row[4]), "pd_rejects": int(row[5]),
                        "logml": float(row[6]), "ms": float(row[7]),
                    })
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from None
        return tr


@dataclass(eq=False)
class EPResult:
    global_approx: GlobalApprox
    sites: list
    trace: RunTrace
    converged: bool
    iterations: int

    def __iter__(self):
        # allows ``g, trace = run(...)``
        return iter((self.global_approx, self.trace))


# ------------------------------------------------------------------ pieces


def init_sites(K: int, d: int, cfg: EPConfig, prior: NaturalGaussian):
    """Initial sites and the global approximation they imply.

    ``broad`` splits ``N(0, A² I)`` into ``K`` equal factors, so each site is
    ``N(0, K A² I)`` and their product (with a flat prior) has covariance
    ``A² I``.  ``broad_per_site`` instead gives every site covariance
    ``A² I / K``, which makes the product much tighter (``A² I / K²``).
    """
    if K < 1 or d < 1:
        raise InvalidConfig("need K >= 1 and d >= 1")
    if prior.d != d:
        raise DimensionMismatch(f"prior has dimension {prior.d}, expected {d}")
    if cfg.init == "zero":
        sites = [SiteState(k, NaturalGaussian.unit(d)) for k in range(K)]
    else:
        q = 1.0 / (K * cfg.init_scale**2) if cfg.init == "broad" else K / cfg.init_scale**2
        sites = [SiteState(k, NaturalGaussian(np.zeros(d), q * np.eye(d))) for k in range(K)]
    return rebuild_global([s.site for s in sites], prior), sites


def cavity(g: GlobalApprox | NaturalGaussian, s: SiteState | NaturalGaussian, eta: float) -> NaturalGaussian:
    gg = g.g if isinstance(g, GlobalApprox) else g
    site = s.site if isinstance(s, SiteState) else s
    if gg.d != site.d:
        raise DimensionMismatch(f"global dimension {gg.d} != site dimension {site.d}")
    if eta == 1.0:
        return divide(gg, site)
    return NaturalGaussian(gg.r - eta * site.r, gg.Q - eta * site.Q)


def site_delta_from_tilted(t: TiltedMoments, cav: NaturalGaussian, s: SiteState | NaturalGaussian, eta: float,
                           pd_floor: float = 1e-8, on_indefinite: str = "clamp"):
    """Moment-matching step: returns ``(delta, log_zk, flags)``.

    ``delta = (tilted - cavity) / eta - site``.  An indefinite tilted
    precision is either clamped (keeping the tilted mean) or discarded, in
    which case ``delta`` is zero and ``log_zk`` is ``None``.
    """
    site = s.site if isinstance(s, SiteState) else s
    tn = t.natural()
    flags = []
    if not is_pd(tn.Q):
        if on_indefinite == "discard":
            return NaturalGaussian.unit(site.d), None, ["discarded"]
        Qc = clamp_eigenvalues(tn.Q, pd_floor)
        tn = NaturalGaussian(Qc @ np.asarray(t.mean), Qc)
        flags.append("tilted_clamped")
    delta = NaturalGaussian((tn.r - cav.r) / eta - site.r, (tn.Q - cav.Q) / eta - site.Q)
    log_zk = None
    if t.log_z is not None and np.isfinite(t.log_z):
        log_zk = (t.log_z - log_norm(tn) + _psi(cav)) / eta
        if not np.isfinite(log_zk):
            log_zk = None
    return delta, log_zk, flags


def _psi(g: NaturalGaussian) -> float:
    if not np.any(g.Q):
        return 0.0
    if not is_pd(g.Q):
        return math.nan
    return log_norm(g)


def apply_damped(sites: Sequence[NaturalGaussian], deltas: Sequence[NaturalGaussian], delta: float) -> list:
    if not 0 < delta <= 1:
        raise ValueError("damping must lie in (0, 1]")
    return [NaturalGaussian(s.r + delta * d.r, s.Q + delta * d.Q) for s, d in zip(sites, deltas)]


def rebuild_global(sites: Sequence[NaturalGaussian], prior: NaturalGaussian) -> GlobalApprox:
    r = prior.r.copy()
    Q = prior.Q.copy()
    for s in sites:  # fixed order keeps sums reproducible
        r = r + s.r
        Q = Q + s.Q
    g = NaturalGaussian(r, Q)
    return GlobalApprox(g, prior, valid=is_pd(Q))


def _prior_proper(prior: NaturalGaussian) -> bool:
    return is_pd(prior.Q)


def _cavity_ok(Q: np.ndarray, strict: bool) -> bool:
    if strict:
        return is_pd(Q)
    # improper priors leave cavities that may be flat along some directions
    lam = np.linalg.eigvalsh(Q)
    return bool(lam.min() >= -1e-10 * max(1.0, abs(lam).max()))


def pd_guard(sites: Sequence[NaturalGaussian], prior: NaturalGaussian, eta: float) -> bool:
    """Accept iff the global precision and every cavity precision are PD.

    Under a flat prior a cavity only needs to be positive semidefinite.
    """
    g = rebuild_global(sites, prior)
    if not g.valid:
        return False
    strict = _prior_proper(prior)
    return all(_cavity_ok(g.g.Q - eta * s.Q, strict) for s in sites)


def log_marginal_likelihood(sites: Sequence[SiteState], g: GlobalApprox, prior: NaturalGaussian) -> float:
    """``Σ log Z_k + Ψ(global) - Ψ(prior)``; a flat prior contributes nothing."""
    missing = [s.k for s in sites if s.log_zk is None]
    if missing:
        raise MissingNormalizers(f"sites without normalizers: {missing}")
    total = sum(s.log_zk for s in sites) + log_norm(g.g)
    if _prior_proper(prior):
        total -= log_norm(prior)
    else:
        log.warning("flat prior: omitting the prior normalizer from the evidence")
    return float(total)


# ------------------------------------------------------------------ run loop


@dataclass(eq=False)
class _SiteWork:
    tilted: Optional[TiltedMoments]
    delta: NaturalGaussian
    log_zk: Optional[float]
    flags: list


def _usable_cavity(cav: NaturalGaussian, strict: bool, floor: float):
    if _cavity_ok(cav.Q, strict):
        return cav, False
    Qc = clamp_eigenvalues(cav.Q, floor)
    return NaturalGaussian(cav.r, Qc), True


def _site_work(g: NaturalGaussian, site: SiteState, shard: ModelShard, backend: Callable, cfg: EPConfig,
               it: int, strict: bool) -> _SiteWork:
    cav = cavity(g, site.site, cfg.eta)
    cav, clamped = _usable_cavity(cav, strict, cfg.pd_floor)
    t = backend(shard, cav, cfg.eta, key=(site.k, it), cache=site.cached_draws)
    delta, log_zk, flags = site_delta_from_tilted(t, cav, site, cfg.eta, cfg.pd_floor, cfg.on_indefinite)
    if clamped:
        flags.append("cavity_clamped")
    return _SiteWork(t, delta, log_zk, flags)


def _inf(x: np.ndarray) -> float:
    return float(np.max(np.abs(x))) if x.size else 0.0


def _try_logml(sites, g: GlobalApprox, prior) -> float:
    if any(s.log_zk is None for s in sites) or not g.valid:
        return math.nan
    try:
        total = sum(s.log_zk for s in sites) + log_norm(g.g)
        return float(total - log_norm(prior)) if _prior_proper(prior) else float(total)
    except np.linalg.LinAlgError:
        return math.nan


def _damped_accept(current: list, deltas: list, idx: Sequence[int], prior, cfg: EPConfig, trace: RunTrace,
                   it: int):
    """Backoff loop.  Returns ``(new_sites, delta_used, rejects)``."""
    dlt = cfg.delta0
    rejects = 0
    while True:
        proposed = list(current)
        stepped = apply_damped([current[i] for i in idx], [deltas[i] for i in idx], dlt)
        for i, s in zip(idx, stepped):
            proposed[i] = s
        if pd_guard(proposed, prior, cfg.eta):
            return proposed, dlt, rejects
        rejects += 1
        if rejects >= MAX_CONSECUTIVE_REJECTS:
            # fall back: keep the step if the global precision survives and
            # clamp offending cavities when they are next formed
            if rebuild_global(proposed, prior).valid:
                trace.event(it, -1 if len(idx) != 1 else idx[0], "accepted_with_cavity_clamp")
                return proposed, dlt, rejects
            trace.event(it, -1 if len(idx) != 1 else idx[0], "update_reverted")
            return list(current), 0.0, rejects
        dlt *= cfg.delta_backoff


def run(sites: list, cfg: EPConfig, backend: Callable, shards: Sequence[ModelShard], prior: NaturalGaussian,
        raise_on_fail: bool = False, callback: Optional[Callable] = None) -> EPResult:
    """Iterate cavity → tilted → moment matching until the site deltas vanish.

    ``serial`` updates one site at a time and refreshes the global
    approximation after each; ``parallel`` computes every site against the
    same frozen global and applies one synchronized damped update.
    """
    cfg.validate()
    if len(sites) != len(shards):
        raise InvalidConfig(f"{len(sites)} sites but {len(shards)} shards")
    sites = [replace(s) for s in sites]
    strict = _prior_proper(prior)
    g = rebuild_global([s.site for s in sites], prior)
    trace = RunTrace()
    converged = False
    it = 0
    workers = cfg.workers or os.cpu_count() or 1
    pool = ThreadPoolExecutor(workers) if cfg.schedule == "parallel" and workers > 1 else None
    try:
        for it in range(1, cfg.max_iters + 1):
            t0 = time.perf_counter()
            if cfg.schedule == "parallel":
                fn = lambda k: _site_work(g.g, sites[k], shards[k], backend, cfg, it, strict)  # noqa: E731
                work = list(pool.map(fn, range(len(sites)))) if pool else [fn(k) for k in range(len(sites))]
                current = [s.site for s in sites]
                deltas = [w.delta for w in work]
                new, dlt, rej = _damped_accept(current, deltas, range(len(sites)), prior, cfg, trace, it)
                for s, w, ns in zip(sites, work, new):
                    _commit(s, w, ns, trace, it)
                g = rebuild_global(new, prior)
                ms = (time.perf_counter() - t0) * 1e3
                logml = _try_logml(sites, g, prior)
                for s, w in zip(sites, work):
                    trace.append(iter=it, site=s.k, dr_inf=_inf(w.delta.r), dQ_inf=_inf(w.delta.Q),
                                 delta_used=dlt, pd_rejects=rej, logml=logml, ms=ms / len(sites))
                biggest = max(max(_inf(w.delta.r), _inf(w.delta.Q)) for w in work)
            else:
                biggest = 0.0
                for k, s in enumerate(sites):
                    tk = time.perf_counter()
                    w = _site_work(g.g, s, shards[k], backend, cfg, it, strict)
                    current = [x.site for x in sites]
                    deltas = [NaturalGaussian.unit(x.site.d) for x in sites]
                    deltas[k] = w.delta
                    new, dlt, rej = _damped_accept(current, deltas, [k], prior, cfg, trace, it)
                    _commit(s, w, new[k], trace, it)
                    g = rebuild_global(new, prior)
                    trace.append(iter=it, site=s.k, dr_inf=_inf(w.delta.r), dQ_inf=_inf(w.delta.Q),
                                 delta_used=dlt, pd_rejects=rej, logml=_try_logml(sites, g, prior),
                                 ms=(time.perf_counter() - tk) * 1e3)
                    biggest = max(biggest, _inf(w.delta.r), _inf(w.delta.Q))
            if callback is not None:
                callback(it, g, sites)
            if biggest < cfg.conv_tol:
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()
    result = EPResult(g, sites, trace, converged, it)
    if not converged and raise_on_fail:
        raise NoConvergence(result)
    return result


def _commit(s: SiteState, w: _SiteWork, new_site: NaturalGaussian, trace: RunTrace, it: int):
    s.site = new_site
    s.delta = w.delta
    s.tilted = w.tilted
    if w.tilted is not None:
        s.cached_draws = w.tilted.cache
    if w.log_zk is not None:
        s.log_zk = w.log_zk
    for f in w.flags:
        trace.event(it, s.k, f)
