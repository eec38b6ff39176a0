import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltedep.engine import EPConfig
from tiltedep.hier import (
    HierPriors,
    HierSite,
    alpha_marginal,
    conditional_local_inference,
    hier_cavity,
    hier_run,
    hier_tilted_update,
    marginal_mode_run,
    outer_from_inner,
    phi_marginal,
)
from tiltedep.models import conjugate_hier_model, gaussian_shard, gaussian_site_exact
from tiltedep.natgauss import DimensionMismatch, NaturalGaussian, NotPositiveDefinite, to_moments
from tiltedep.tilted import LaplaceBackend, SamplerConfig


def random_instance(seed, K=3, da=2, dp=3):
    rng = np.random.default_rng(seed)
    priors = HierPriors(rng.standard_normal(da), np.eye(da) * 1.3, rng.standard_normal(dp), np.eye(dp) * 0.8)
    sites = []
    for _ in range(K):
        G = rng.standard_normal((da + dp, da + dp))
        sites.append(HierSite.from_joint(NaturalGaussian(rng.standard_normal(da + dp), 0.5 * G @ G.T), da))
    return priors, sites


def dense_joint(sites, priors, skip=None):
    """Precision over (alpha_1..alpha_K, phi), assembled explicitly."""
    K = len(sites)
    da, dp = priors.a0.size, priors.b0.size
    D = K * da + dp
    Q = np.zeros((D, D))
    r = np.zeros(D)
    ph = slice(K * da, D)
    Q[ph, ph] = priors.B0
    r[ph] = priors.b0
    for k, s in enumerate(sites):
        al = slice(k * da, (k + 1) * da)
        Q[al, al] = priors.A0
        r[al] = priors.a0
        if k == skip:
            continue
        Q[al, al] += s.A
        r[al] += s.a
        Q[al, ph] = s.C
        Q[ph, al] = s.C.T
        Q[ph, ph] += s.B
        r[ph] += s.b
    return NaturalGaussian(r, Q)


def schur(g, idx):
    idx = np.asarray(idx)
    rest = np.setdiff1d(np.arange(g.d), idx)
    Qrr_inv = np.linalg.inv(g.Q[np.ix_(rest, rest)])
    Qir = g.Q[np.ix_(idx, rest)]
    return (g.r[idx] - Qir @ Qrr_inv @ g.r[rest], g.Q[np.ix_(idx, idx)] - Qir @ Qrr_inv @ Qir.T)


@pytest.mark.parametrize("seed", range(5))
def test_phi_marginal_matches_dense(seed):
    priors, sites = random_instance(seed)
    phi = phi_marginal(sites, priors)
    r, Q = schur(dense_joint(sites, priors), np.arange(6, 9))
    np.testing.assert_allclose(phi.r, r, atol=1e-10)
    np.testing.assert_allclose(phi.Q, Q, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_cavity_matches_resummation_and_dense(seed):
    priors, sites = random_instance(seed)
    for k in range(3):
        a_cav, p_cav = hier_cavity(sites, priors, k)
        assert np.array_equal(a_cav.r, priors.a0) and np.array_equal(a_cav.Q, priors.A0)
        others = phi_marginal([s for j, s in enumerate(sites) if j != k], priors)
        np.testing.assert_allclose(p_cav.r, others.r, atol=1e-12)
        np.testing.assert_allclose(p_cav.Q, others.Q, atol=1e-12)
        r, Q = schur(dense_joint(sites, priors, skip=k), np.arange(6, 9))
        np.testing.assert_allclose(p_cav.r, r, atol=1e-10)
        np.testing.assert_allclose(p_cav.Q, Q, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_alpha_marginal_matches_dense(seed):
    priors, sites = random_instance(seed)
    m = to_moments(dense_joint(sites, priors))
    for k in range(3):
        _, p_cav = hier_cavity(sites, priors, k)
        am = alpha_marginal(sites[k], priors, p_cav)
        sl = slice(2 * k, 2 * k + 2)
        np.testing.assert_allclose(am.mu, m.mu[sl], atol=1e-10)
        np.testing.assert_allclose(am.Sigma, m.Sigma[sl, sl], atol=1e-10)


def test_block_simple_cases():
    priors, sites = random_instance(0)
    zero = [HierSite.zero(2, 3)] * 3
    phi = phi_marginal(zero, priors)
    assert np.array_equal(phi.r, priors.b0) and np.array_equal(phi.Q, priors.B0)
    decoupled = [HierSite(s.a, s.b, s.A, s.B, np.zeros_like(s.C)) for s in sites]
    phi = phi_marginal(decoupled, priors)
    np.testing.assert_allclose(phi.r, priors.b0 + sum(s.b for s in sites), atol=1e-14)
    # single site: phi cavity is the phi prior
    _, pc = hier_cavity(sites[:1], priors, 0)
    np.testing.assert_allclose(pc.r, priors.b0, atol=1e-12)
    np.testing.assert_allclose(pc.Q, priors.B0, atol=1e-12)
    # zero site k: cavity equals the full marginal
    mixed = [HierSite.zero(2, 3)] + sites[1:]
    _, pc = hier_cavity(mixed, priors, 0)
    full = phi_marginal(mixed, priors)
    assert np.array_equal(pc.r, full.r) and np.array_equal(pc.Q, full.Q)
    # alpha marginal: no coupling -> precision A0 + A_k; zero site -> prior
    am = alpha_marginal(decoupled[0], priors, priors.phi)
    np.testing.assert_allclose(np.linalg.inv(am.Sigma), priors.A0 + decoupled[0].A, atol=1e-12)
    am = alpha_marginal(HierSite.zero(2, 3), priors, priors.phi)
    np.testing.assert_allclose(am.Sigma, np.linalg.inv(priors.A0), atol=1e-14)


def test_block_errors_name_site():
    priors, sites = random_instance(1)
    bad = HierSite(sites[1].a, sites[1].b, -10 * np.eye(2), sites[1].B, sites[1].C)
    with pytest.raises(NotPositiveDefinite, match="site 1"):
        phi_marginal([sites[0], bad, sites[2]], priors)
    with pytest.raises(NotPositiveDefinite):
        HierPriors(np.zeros(1), -np.eye(1), np.zeros(1), np.eye(1))


# ------------------------------------------------------------- EP runs


@pytest.mark.parametrize("schedule,eta", [("serial", 1.0), ("parallel", 1.0), ("serial", 0.5), ("parallel", 0.5)])
def test_hier_run_conjugate_exact(schedule, eta):
    model = conjugate_hier_model(4, 2, 3, seed=3)
    priors = HierPriors(model.alpha_prior.r, model.alpha_prior.Q, model.phi_prior.r, model.phi_prior.Q)
    cfg = EPConfig(schedule=schedule, eta=eta, conv_tol=1e-11, max_iters=50)
    res = hier_run(model.lik_shards, priors, cfg, LaplaceBackend())
    assert res.converged
    np.testing.assert_allclose(res.phi.r, model.phi_posterior.r, atol=1e-8)
    np.testing.assert_allclose(res.phi.Q, model.phi_posterior.Q, atol=1e-8)
    for k in range(4):
        am = res.alpha(k, priors)
        ex = model.alpha_posterior(k)
        np.testing.assert_allclose(am.mu, ex.mu, atol=1e-8)
        np.testing.assert_allclose(am.Sigma, ex.Sigma, atol=1e-8)


def test_marginal_route_matches_block_route():
    model = conjugate_hier_model(4, 2, 3, seed=5)
    priors = HierPriors(model.alpha_prior.r, model.alpha_prior.Q, model.phi_prior.r, model.phi_prior.Q)
    cfg = EPConfig(conv_tol=1e-11)
    block = hier_run(model.lik_shards, priors, cfg, LaplaceBackend())
    marg = marginal_mode_run(model.local_shards, model.phi_prior, cfg, LaplaceBackend())
    np.testing.assert_allclose(marg.global_approx.g.Q, block.phi.Q, atol=1e-8)
    np.testing.assert_allclose(marg.global_approx.g.r, block.phi.r, atol=1e-8)
    np.testing.assert_allclose(marg.global_approx.g.Q, model.phi_posterior.Q, atol=1e-8)


def test_marginal_route_single_shard_is_direct():
    model = conjugate_hier_model(1, 2, 2, seed=8)
    res = marginal_mode_run(model.local_shards, model.phi_prior, EPConfig(max_iters=1), LaplaceBackend())
    np.testing.assert_allclose(res.global_approx.g.Q, model.phi_posterior.Q, atol=1e-10)
    np.testing.assert_allclose(res.global_approx.g.r, model.phi_posterior.r, atol=1e-10)


def test_marginal_route_checks_dimensions():
    model = conjugate_hier_model(2, 1, 2, seed=0)
    with pytest.raises(DimensionMismatch):
        marginal_mode_run(model.local_shards, NaturalGaussian.unit(3), EPConfig(), LaplaceBackend())


def test_empty_shard_drives_site_to_zero():
    model = conjugate_hier_model(2, 2, 2, seed=1, empty_shards=[0])
    priors = HierPriors(model.alpha_prior.r, model.alpha_prior.Q, model.phi_prior.r, model.phi_prior.Q)
    _, sites = random_instance(2, K=1, da=2, dp=2)
    site = sites[0]
    delta, _, _ = hier_tilted_update(model.lik_shards[0], priors, site, priors.phi, LaplaceBackend())
    back = site.axpy(1.0, delta)
    assert back.max_abs() < 1e-10


def test_tilted_update_checks_blocks():
    model = conjugate_hier_model(1, 2, 2, seed=1)
    priors = HierPriors(np.zeros(3), np.eye(3), np.zeros(1), np.eye(1))
    with pytest.raises(DimensionMismatch):
        hier_tilted_update(model.lik_shards[0], priors, HierSite.zero(3, 1), priors.phi, LaplaceBackend())


# --------------------------------------------------------- outer from inner


def test_outer_single_observation():
    Q = np.array([[2.5]])
    s = outer_from_inner([np.array([1.0, 0.0])], [np.zeros(2)], [np.array([0.7])], [Q])
    np.testing.assert_array_equal(s.A, np.array([[2.5, 0.0], [0.0, 0.0]]))
    np.testing.assert_array_equal(s.C, np.zeros((2, 2)))
    np.testing.assert_array_equal(s.a, [0.7, 0.0])


def test_outer_linear_model_gram():
    rng = np.random.default_rng(0)
    n, da, dp = 7, 2, 3
    X = rng.standard_normal((n, da + dp))
    w = rng.uniform(0.5, 2.0, n)
    y = rng.standard_normal(n)
    s = outer_from_inner([x[:da] for x in X], [x[da:] for x in X], [np.array([wi * yi]) for wi, yi in zip(w, y)],
                         [np.array([[wi]]) for wi in w])
    G = X.T @ np.diag(w) @ X
    np.testing.assert_allclose(s.A, G[:da, :da], atol=1e-12)
    np.testing.assert_allclose(s.B, G[da:, da:], atol=1e-12)
    np.testing.assert_allclose(s.C, G[:da, da:], atol=1e-12)
    np.testing.assert_allclose(np.r_[s.a, s.b], X.T @ (w * y), atol=1e-12)
    # it is exactly the Gaussian likelihood site of that linear model
    shard = gaussian_shard(X, np.diag(1 / w), y, n_local=da)
    e = gaussian_site_exact(shard)
    np.testing.assert_allclose(s.joint().Q, e.Q, atol=1e-10)


def test_outer_zero_inner_sites():
    s = outer_from_inner([np.ones(2)] * 3, [np.ones(1)] * 3, [np.zeros(1)] * 3, [np.zeros((1, 1))] * 3)
    assert s.max_abs() == 0.0


def test_outer_shape_errors():
    with pytest.raises(DimensionMismatch):
        outer_from_inner([np.ones(2)], [np.ones(1)], [np.zeros(1)], [])
    with pytest.raises(DimensionMismatch):
        outer_from_inner([np.ones(2)], [np.ones(1)], [np.zeros(2)], [np.zeros((2, 2))])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_outer_linear_in_inner_precision(seed, j):
    rng = np.random.default_rng(seed)
    u = [rng.standard_normal(2) for _ in range(4)]
    v = [rng.standard_normal(3) for _ in range(4)]
    r = [rng.standard_normal(1) for _ in range(4)]
    Q = [np.abs(rng.standard_normal((1, 1))) for _ in range(4)]
    base = outer_from_inner(u, v, r, Q)
    Q2 = list(Q)
    Q2[j] = 2 * Q[j]
    doubled = outer_from_inner(u, v, r, Q2)
    uj, vj = u[j][:, None], v[j][:, None]
    np.testing.assert_allclose(doubled.A - base.A, uj @ Q[j] @ uj.T, atol=1e-12)
    np.testing.assert_allclose(doubled.B - base.B, vj @ Q[j] @ vj.T, atol=1e-12)
    np.testing.assert_allclose(doubled.C - base.C, uj @ Q[j] @ vj.T, atol=1e-12)


# ------------------------------------------------- conditional local draws


def _conditional_alpha(model, k, phi):
    shard = model.local_shards[k]
    m = shard.n_local
    x = np.r_[np.zeros(m), phi]
    H = shard.hessian(x)[:m, :m]
    g = np.asarray(shard.grad(x))[:m]
    P = -H
    return np.linalg.solve(P, g), np.linalg.inv(P)


def test_conditional_draws_match_closed_form():
    model = conjugate_hier_model(2, 2, 2, seed=4, n_per_shard=5)
    phi = np.array([0.3, -0.4])
    draws = conditional_local_inference(np.tile(phi, (3000, 1)), model.local_shards,
                                        SamplerConfig(n_warmup=300, n_draws=1, seed=0))
    for k in range(2):
        mu, S = _conditional_alpha(model, k, phi)
        D = draws[k]
        se = np.sqrt(np.diag(S) / D.shape[0])
        assert np.all(np.abs(D.mean(axis=0) - mu) < 4 * se)
        np.testing.assert_allclose(np.cov(D.T), S, atol=0.15 * np.abs(S).max())


def test_conditional_draws_empty_group_follow_prior():
    model = conjugate_hier_model(1, 1, 1, seed=0, empty_shards=[0])
    draws = conditional_local_inference(np.zeros((3000, 1)), model.local_shards,
                                        SamplerConfig(n_warmup=300, n_draws=1, seed=2))[0]
    m = to_moments(model.alpha_prior)
    assert abs(draws.mean() - m.mu[0]) < 4 * np.sqrt(m.Sigma[0, 0] / 3000)
    assert draws.var() == pytest.approx(m.Sigma[0, 0], rel=0.1)


def test_conditional_draws_deterministic():
    model = conjugate_hier_model(2, 1, 2, seed=6)
    phi = np.random.default_rng(0).standard_normal((20, 2))
    sc = SamplerConfig(n_warmup=50, n_draws=1, seed=9)
    a = conditional_local_inference(phi, model.local_shards, sc)
    b = conditional_local_inference(phi, model.local_shards, sc)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(DimensionMismatch):
        conditional_local_inference(np.zeros((2, 3)), model.local_shards, sc)
