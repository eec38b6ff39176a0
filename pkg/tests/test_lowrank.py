import math

import numpy as np
import pytest
from scipy import integrate

from tiltedep.engine import EPConfig, cavity, init_sites, log_marginal_likelihood, rebuild_global, run
from tiltedep.lowrank import (
    BatchPlan,
    LowRankSite,
    NonpositiveNormalizer,
    RankOneQuadratureBackend,
    lr_cavity,
    lr_log_marginal_likelihood,
    lr_rebuild_global,
    lr_run,
    lr_site_delta,
    lr_tilted_1d,
    probit_tilted_moments,
    quadrature_moment_fn,
    rank_one_shards,
)
from tiltedep.models import conjugate_gaussian_model, probit_loglik_z, probit_shard
from tiltedep.natgauss import NaturalGaussian, to_moments
from tiltedep.tilted import SamplerConfig, laplace_moments, rwm


def random_rank1_sites(rng, K, d):
    return [LowRankSite(rng.standard_normal(d), rng.standard_normal(1), [[abs(rng.standard_normal()) + 0.1]])
            for _ in range(K)]


# --------------------------------------------------------------- assembly


def test_rebuild_identity_matches_dense():
    rng = np.random.default_rng(0)
    prior = NaturalGaussian(rng.standard_normal(3), np.eye(3))
    dense = [NaturalGaussian(rng.standard_normal(3), np.eye(3) * (k + 1)) for k in range(4)]
    lr = [LowRankSite(np.eye(3), s.r, s.Q) for s in dense]
    a = lr_rebuild_global(lr, prior).g
    b = rebuild_global(dense, prior).g
    np.testing.assert_allclose(a.r, b.r, atol=1e-14)
    np.testing.assert_allclose(a.Q, b.Q, atol=1e-14)


def test_rebuild_zero_sites_is_prior():
    prior = NaturalGaussian([1.0, 2.0], [[2.0, 0.5], [0.5, 1.0]])
    g = lr_rebuild_global([LowRankSite.zero(np.ones(2))] * 3, prior).g
    assert np.array_equal(g.r, prior.r) and np.array_equal(g.Q, prior.Q)


def test_rebuild_rank_one_vs_dense():
    rng = np.random.default_rng(1)
    sites = random_rank1_sites(rng, 6, 4)
    prior = NaturalGaussian(np.zeros(4), np.eye(4))
    g = lr_rebuild_global(sites, prior).g
    Q = np.eye(4) + sum(float(s.Q[0, 0]) * np.outer(s.U[:, 0], s.U[:, 0]) for s in sites)
    r = sum(float(s.r[0]) * s.U[:, 0] for s in sites)
    np.testing.assert_allclose(g.Q, Q, atol=1e-12)
    np.testing.assert_allclose(g.r, r, atol=1e-12)


def test_batch_plan_invariance():
    rng = np.random.default_rng(2)
    sites = random_rank1_sites(rng, 10, 3)
    prior = NaturalGaussian(np.zeros(3), np.eye(3))
    base = lr_rebuild_global(sites, prior, BatchPlan.single(10)).g
    for plan in (BatchPlan.chunks(10, 3), BatchPlan.chunks(10, 10), BatchPlan(((9, 1, 3), (0, 2, 4, 5, 6, 7, 8)))):
        g = lr_rebuild_global(sites, prior, plan).g
        np.testing.assert_allclose(g.Q, base.Q, atol=1e-12)
        np.testing.assert_allclose(g.r, base.r, atol=1e-12)


def test_batch_plan_validation():
    with pytest.raises(ValueError):
        BatchPlan(((0, 1), (1, 2))).validate(3)
    with pytest.raises(ValueError):
        BatchPlan(((0,),)).validate(2)
    with pytest.raises(ValueError):
        LowRankSite(np.ones((2, 3)), np.zeros(3), np.zeros((3, 3)))


# ------------------------------------------------------------------ cavity


def test_cavity_scalar_projection():
    mu = np.array([1.0, -2.0])
    Sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    site = LowRankSite(np.array([1.0, 0.0]), [0.5], [[0.25]])
    cav, c_k = lr_cavity(mu, Sigma, site, 1.0)
    assert cav.Q[0, 0] == pytest.approx(1 / 2.0 - 0.25)
    assert cav.r[0] == pytest.approx(1.0 / 2.0 - 0.5)
    marg = NaturalGaussian([0.5], [[0.5]])
    from tiltedep.natgauss import log_norm

    assert c_k == pytest.approx(log_norm(cav) - log_norm(marg))


def test_cavity_zero_site_is_marginal():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((3, 3))
    Sigma = A @ A.T + np.eye(3)
    mu = rng.standard_normal(3)
    u = rng.standard_normal(3)
    cav, c_k = lr_cavity(mu, Sigma, LowRankSite.zero(u), 1.0)
    v = u @ Sigma @ u
    assert cav.Q[0, 0] == pytest.approx(1 / v)
    assert cav.r[0] == pytest.approx((u @ mu) / v)
    assert c_k == pytest.approx(0.0, abs=1e-14)


def test_cavity_identity_matches_dense_divide():
    rng = np.random.default_rng(4)
    g = NaturalGaussian(rng.standard_normal(3), np.eye(3) * 3 + 0.2)
    site = NaturalGaussian(rng.standard_normal(3), np.eye(3))
    m = to_moments(g)
    for eta in (1.0, 0.5):
        cav, _ = lr_cavity(m.mu, m.Sigma, LowRankSite(np.eye(3), site.r, site.Q), eta)
        dense = cavity(g, site, eta)
        np.testing.assert_allclose(cav.Q, dense.Q, atol=1e-12)
        np.testing.assert_allclose(cav.r, dense.r, atol=1e-12)


# ------------------------------------------------------------- quadrature


def _gaussian_case(y, m, v, s2, nodes):
    cav = NaturalGaussian([m / v], [[1 / v]])
    got = lr_tilted_1d(lambda z: -0.5 * (y - z) ** 2 / s2 - 0.5 * math.log(2 * math.pi * s2), cav,
                       quad_nodes=nodes)
    V = 1 / (1 / v + 1 / s2)
    expect = (-0.5 * math.log(2 * math.pi * (v + s2)) - 0.5 * (y - m) ** 2 / (v + s2), V * (m / v + y / s2), V)
    return np.abs(np.array(got) - np.array(expect)).max()


@pytest.mark.parametrize("v,s2", [(1.0, 1.0), (1.0, 2.0), (0.5, 4.0), (2.0, 3.0)])
def test_quadrature_gaussian_pseudo_likelihood(v, s2):
    assert _gaussian_case(0.7, 0.3, v, s2, 32) < 1e-10


def test_quadrature_sharp_gaussian_needs_more_nodes():
    # integrand is not polynomial; a likelihood much sharper than the cavity needs more nodes
    e32 = _gaussian_case(0.7, 0.3, 2.0, 0.5, 32)
    e64 = _gaussian_case(0.7, 0.3, 2.0, 0.5, 64)
    assert e32 > 1e-6 and e64 < 1e-9


@pytest.mark.parametrize("y,m,v", [(1.0, 0.0, 1.0), (-1.0, 0.5, 0.3), (1.0, -1.2, 2.0), (-1.0, 2.0, 0.7)])
def test_quadrature_probit_analytic(y, m, v):
    cav = NaturalGaussian([m / v], [[1 / v]])
    got = lr_tilted_1d(probit_loglik_z(y), cav)
    expect = probit_tilted_moments(y, m, v)
    np.testing.assert_allclose(got, expect, atol=1e-8)


def test_quadrature_logistic_grid():
    m, v = 0.4, 1.5
    cav = NaturalGaussian([m / v], [[1 / v]])
    log_z, mean, var = lr_tilted_1d(lambda z: -np.logaddexp(0.0, -z), cav)
    z = np.linspace(m - 14 * math.sqrt(v), m + 14 * math.sqrt(v), 1_000_001)
    lf = -np.logaddexp(0.0, -z) - 0.5 * (z - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
    f = np.exp(lf)
    Z = integrate.trapezoid(f, z)
    mu = integrate.trapezoid(z * f, z) / Z
    var_g = integrate.trapezoid((z - mu) ** 2 * f, z) / Z
    assert log_z == pytest.approx(math.log(Z), abs=1e-6)
    assert mean == pytest.approx(mu, abs=1e-6)
    assert var == pytest.approx(var_g, abs=1e-6)


def test_quadrature_errors():
    with pytest.raises(NonpositiveNormalizer):
        lr_tilted_1d(lambda z: np.full_like(z, -np.inf), NaturalGaussian([0.0], [[1.0]]))
    with pytest.raises(ValueError):
        lr_tilted_1d(lambda z: z, NaturalGaussian.unit(2))


# ----------------------------------------------------------------- deltas


def test_site_delta_examples():
    site = LowRankSite(np.ones(2), [0.0], [[0.5]])
    cav = NaturalGaussian([0.0], [[2.0]])
    delta, flags = lr_site_delta((0.0, [0.0], [[1 / 3.0]]), cav, site, 1.0)
    assert delta.Q[0, 0] == pytest.approx(0.5) and flags == []
    # fixed point
    site = LowRankSite(np.ones(2), [0.25], [[0.5]])
    cav = NaturalGaussian([0.5], [[2.0]])
    Qt = 2.5
    delta, _ = lr_site_delta((0.0, [0.75 / Qt], [[1 / Qt]]), cav, site, 1.0)
    assert abs(delta.Q[0, 0]) < 1e-15 and abs(delta.r[0]) < 1e-15
    delta, flags = lr_site_delta((-math.inf, [0.0], [[1.0]]), cav, site, 1.0)
    assert flags == ["discarded"] and not np.any(delta.Q)


# -------------------------------------------------------------------- runs


def _laplace_moment_fn(shards):
    def fn(k, cav, eta, it):
        t = laplace_moments(shards[k], cav, eta)
        return t.log_z, t.mean, t.cov
    return fn


@pytest.mark.parametrize("eta,delta", [(1.0, 1.0), (0.5, 0.6)])
def test_identity_projection_matches_engine_trajectory(eta, delta):
    model = conjugate_gaussian_model(5, 3, seed=2)
    cfg = EPConfig(schedule="parallel", eta=eta, delta0=delta, init="broad", conv_tol=1e-12, max_iters=40,
                   workers=1)
    traj_dense, traj_lr = [], []
    _, sites = init_sites(5, 3, cfg, model.prior)
    dense = run(sites, cfg, __import__("tiltedep.tilted", fromlist=["LaplaceBackend"]).LaplaceBackend(),
                model.shards, model.prior, callback=lambda it, g, s: traj_dense.append(g.g))
    lr_sites = [LowRankSite(np.eye(3), s.site.r, s.site.Q) for s in sites]
    lr = lr_run(lr_sites, model.prior, cfg, _laplace_moment_fn(model.shards),
                callback=lambda it, g, s: traj_lr.append(g.g))
    assert len(traj_dense) == len(traj_lr) and dense.converged and lr.converged
    for a, b in zip(traj_dense, traj_lr):
        np.testing.assert_allclose(a.Q, b.Q, atol=1e-8)
        np.testing.assert_allclose(a.r, b.r, atol=1e-8)
    np.testing.assert_allclose(lr.global_approx.g.Q, model.posterior.Q, atol=1e-8)
    # evidence: low-rank assembly matches the dense formula
    a = lr_log_marginal_likelihood(lr.sites, lr.global_approx, model.prior)
    b = log_marginal_likelihood(dense.sites, dense.global_approx, model.prior)
    assert a == pytest.approx(b, abs=1e-8)
    assert a == pytest.approx(model.log_evidence, abs=1e-6)


def _probit_data(seed, N, beta):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, len(beta)))
    y = np.where(rng.uniform(size=N) < 0.5 * (1 + np.vectorize(math.erf)(X @ beta / math.sqrt(2))), 1.0, -1.0)
    return X, y


def test_batching_does_not_change_result():
    X, y = _probit_data(0, 40, [1.0, -0.5])
    prior = NaturalGaussian(np.zeros(2), np.eye(2))
    fn = quadrature_moment_fn([probit_loglik_z(v) for v in y])
    cfg = EPConfig(conv_tol=1e-9, delta0=0.8, max_iters=100)
    out = []
    for plan in (BatchPlan.single(40), BatchPlan.chunks(40, 40), BatchPlan.chunks(40, 7)):
        sites = [LowRankSite.zero(x) for x in X]
        out.append(lr_run(sites, prior, cfg, fn, plan).global_approx.g)
    for g in out[1:]:
        np.testing.assert_allclose(g.Q, out[0].Q, atol=1e-12)
        np.testing.assert_allclose(g.r, out[0].r, atol=1e-12)


def test_rank_one_matches_dense_quadrature_ep():
    X, y = _probit_data(1, 30, [0.8, -1.2])
    prior = NaturalGaussian(np.zeros(2), np.eye(2))
    cfg = EPConfig(schedule="parallel", conv_tol=1e-10, delta0=0.8, max_iters=200, workers=1)
    lr = lr_run([LowRankSite.zero(x) for x in X], prior, cfg,
                quadrature_moment_fn([probit_loglik_z(v) for v in y]))
    shards = rank_one_shards(X, y, probit_loglik_z)
    _, sites = init_sites(len(shards), 2, cfg, prior)
    dense = run(sites, cfg, RankOneQuadratureBackend(), shards, prior)
    assert lr.converged and dense.converged
    np.testing.assert_allclose(lr.global_approx.g.Q, dense.global_approx.g.Q, atol=1e-6)
    np.testing.assert_allclose(lr.global_approx.g.r, dense.global_approx.g.r, atol=1e-6)


def test_probit_regression_against_mcmc():
    X, y = _probit_data(2, 200, [0.5, -1.0, 0.8])
    prior = NaturalGaussian(np.zeros(3), np.eye(3))
    cfg = EPConfig(conv_tol=1e-8, delta0=0.8, max_iters=200)
    res = lr_run([LowRankSite.zero(x) for x in X], prior, cfg,
                 quadrature_moment_fn([probit_loglik_z(v) for v in y]), BatchPlan.chunks(200, 4))
    assert res.converged
    ep_mean = to_moments(res.global_approx.g).mu

    shard = probit_shard(X, y)

    def logp(B):
        return shard.loglik_many(B) - 0.5 * np.sum(B**2, axis=1)

    L = np.linalg.cholesky(to_moments(res.global_approx.g).Sigma)
    sc = SamplerConfig(n_warmup=2000, n_draws=20_000, n_chains=4, seed=0)
    rng = np.random.default_rng(0)
    ch = rwm(logp, np.zeros((4, 3)), L, sc, rng)
    mc_mean = ch.draws.reshape(-1, 3).mean(axis=0)
    np.testing.assert_allclose(ep_mean, mc_mean, atol=0.05)
