"""Laplace and sampling backends against a long full-data reference chain.

The reference is adaptive random-walk Metropolis on the unpartitioned
noncentered model (flat prior on the shared parameters), started at a
Laplace fit.  The sampling backend is repeated over sampler seeds to give
its Monte Carlo standard error.
"""

import argparse

import numpy as np

from tiltedep.cli import run_experiment
from tiltedep.config import ExperimentConfig
from tiltedep.models import hlogit_phi_names, hlogit_shards, simulate_hlogit
from tiltedep.natgauss import NaturalGaussian, to_moments
from tiltedep.tilted import SamplerConfig, autocorr_ess, find_mode, rwm


def reference_chain(ds, n_draws, n_chains, seed):
    full = hlogit_shards(ds, groups_per_shard=ds.J)[0]
    d = full.dim
    # a weak anchor on log tau only to locate the start point
    Q = np.zeros((d, d))
    Q[-1, -1] = 1.0
    r = np.zeros(d)
    r[-1] = np.log(2.0)
    mode = find_mode(full, NaturalGaussian(r, Q), 1.0)
    L = np.linalg.cholesky(np.linalg.inv(mode.precision))
    rng = np.random.default_rng(seed)
    sc = SamplerConfig(n_warmup=n_draws // 10, n_draws=n_draws, n_chains=n_chains, seed=seed)
    ch = rwm(full.loglik_many, mode.x + rng.standard_normal((n_chains, d)) @ L.T, L, sc, rng)
    draws = ch.draws[:, :, ds.J:]
    ess = np.array([sum(autocorr_ess(draws[c, :, j]) for c in range(n_chains)) for j in range(draws.shape[2])])
    flat = draws.reshape(-1, draws.shape[2])
    return flat.mean(axis=0), flat.std(axis=0), ess


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=6)
    p.add_argument("--ref-draws", type=int, default=60_000)
    p.add_argument("--ref-chains", type=int, default=8)
    args = p.parse_args(argv)
    ds = simulate_hlogit(20, 40, 10, args.seed)
    names = hlogit_phi_names(10)

    ref_mu, ref_sd, ess = reference_chain(ds, args.ref_draws, args.ref_chains, seed=1)
    reps = []
    for rep in range(args.replicates):
        res, _ = run_experiment(ExperimentConfig(seed=args.seed, sampler_seed=rep), ds)
        reps.append(to_moments(res.global_approx.g).mu)
    reps = np.array(reps)
    mc_se = reps.std(axis=0, ddof=1)
    rows = {"mcmc": reps[0]}
    for label, param in (("laplace-joint", "noncentered"), ("laplace-integrated", "integrated")):
        res, _ = run_experiment(ExperimentConfig(seed=args.seed, backend="laplace", parameterization=param), ds)
        rows[label] = to_moments(res.global_approx.g).mu

    print(f"{'param':<9}{'reference':>10}{'ref mcse':>9}{'ep mcse':>9}" + "".join(f"{k:>20}" for k in rows))
    for j, n in enumerate(names):
        line = f"{n:<9}{ref_mu[j]:>10.4f}{ref_sd[j] / np.sqrt(ess[j]):>9.4f}{mc_se[j]:>9.4f}"
        line += "".join(f"{rows[k][j] - ref_mu[j]:>+20.4f}" for k in rows)
        print(line)
    print("backend columns are differences from the reference mean")
    z = np.abs(rows["laplace-integrated"] - rows["mcmc"]) / mc_se
    print(f"integrated Laplace vs sampling backend: max z {z.max():.1f}; beyond 3 se: {int(np.sum(z > 3))}/{z.size}")


if __name__ == "__main__":
    main()
