"""Command line: ``simulate``, ``run`` and ``report``.

Every configuration key can be given as ``--key value`` after the
subcommand; flags override the config file, and ``EP_SEED`` overrides both
for the seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as config_mod
from .engine import RunTrace, init_sites, run
from .hier import marginal_mode_run
from .models import (
    conjugate_gaussian_model,
    coverage_report,
    hlogit_phi_names,
    hlogit_shards,
    load_dataset,
    load_truth,
    save_dataset,
    simulate_hlogit,
)
from .natgauss import NaturalGaussian, to_moments

EXIT_OK, EXIT_ERROR, EXIT_NO_CONVERGENCE = 0, 1, 2
LEVELS = (1, 2, 3)


def _split_overrides(extra: list) -> dict:
    out = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise config_mod.ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise config_mod.ConfigError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 2
        out[key] = val
    return out


def _paths(cfg, args):
    out = Path(args.out or cfg.out_dir)
    data = Path(args.data) if getattr(args, "data", None) else out / "data.csv"
    truth = Path(args.truth) if getattr(args, "truth", None) else out / "truth.csv"
    return out, data, truth


def cmd_simulate(cfg: config_mod.ExperimentConfig, args) -> int:
    if cfg.kind != "hlogit":
        raise config_mod.ConfigError("simulate only applies to the hlogit model")
    out, data, truth = _paths(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    ds = simulate_hlogit(cfg.J, cfg.N_j, cfg.D, cfg.seed, tau=cfg.tau)
    save_dataset(ds, data, truth)
    print(f"wrote {data} ({ds.N} rows) and {truth}")
    return EXIT_OK


def write_summary(path, names, mean, sd) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "mean", "sd"])
        for n, m, s in zip(names, mean, sd):
            w.writerow([n, repr(float(m)), repr(float(s))])


def read_summary(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["param", "mean", "sd"]:
        raise ValueError(f"{path}: line 1: expected header param,mean,sd")
    names, mean, sd = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            if len(row) != 3:
                raise ValueError(f"expected 3 fields, got {len(row)}")
            names.append(row[0])
            mean.append(float(row[1]))
            sd.append(float(row[2]))
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return names, np.array(mean), np.array(sd)


def write_coverage(path, fractions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "fraction"])
        for lvl, f in zip(LEVELS, fractions):
            w.writerow([lvl, repr(float(f))])


def _coverage(names, mean, sd, truth: dict):
    keep = [i for i, n in enumerate(names) if n in truth]
    if not keep:
        return None
    t = np.array([truth[names[i]] for i in keep])
    return coverage_report(mean[keep], sd[keep], t)


def run_experiment(cfg: config_mod.ExperimentConfig, ds=None, workers: Optional[int] = 1):
    """Build the configured model and run EP on it: ``(result, param_names)``.

    ``ds`` is the dataset for the hlogit model and is ignored otherwise.
    """
    ep = cfg.ep_config(workers=workers)
    backend = cfg.make_backend()
    if cfg.kind == "hlogit":
        if ds.D != cfg.D:
            raise config_mod.ConfigError(f"dataset has D={ds.D} predictors but the config says D={cfg.D}")
        shards = hlogit_shards(ds, groups_per_shard=cfg.groups_per_shard, parameterization=cfg.parameterization)
        d = cfg.D + 1
        prior = NaturalGaussian(np.zeros(d), np.zeros((d, d)))
        return marginal_mode_run(shards, prior, ep, backend), hlogit_phi_names(cfg.D)
    model = conjugate_gaussian_model(cfg.K, cfg.d, seed=cfg.seed)
    _, sites = init_sites(cfg.K, cfg.d, ep, model.prior)
    return run(sites, ep, backend, model.shards, model.prior), [f"theta{i + 1}" for i in range(cfg.d)]


def cmd_run(cfg: config_mod.ExperimentConfig, args) -> int:
    out, data, truth_path = _paths(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    truth = None
    ds = None
    if cfg.kind == "hlogit":
        ds = load_dataset(data)
        if truth_path.exists():
            truth = load_truth(truth_path)
    result, names = run_experiment(cfg, ds, workers=args.workers)
    result.trace.to_csv(out / "trace.csv")
    with open(out / "config.ini", "w") as fh:
        fh.write(config_mod.render(cfg))
    try:
        mom = to_moments(result.global_approx.g)
        write_summary(out / "summary.csv", names, mom.mu, mom.sd)
    except np.linalg.LinAlgError:
        write_summary(out / "summary.csv", [], [], [])
        mom = None
    cov = None
    if truth is not None and mom is not None:
        cov = _coverage(names, mom.mu, mom.sd, truth)
        if cov is not None:
            write_coverage(out / "coverage.csv", cov.fractions())
    report = render_report(result.trace, names, mom.mu if mom else [], mom.sd if mom else [], cov,
                           converged=result.converged)
    (out / "report.txt").write_text(report)
    print(report)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def render_report(trace: RunTrace, names, mean, sd, cov=None, converged: Optional[bool] = None) -> str:
    lines = []
    md = trace.max_delta_by_iter()
    n_iter = max(md) if md else 0
    status = "" if converged is None else (" (converged)" if converged else " (not converged)")
    lines.append(f"iterations: {n_iter}{status}")
    if md:
        lines.append(f"final max |delta|: {md[n_iter]:.4g}")
        total_ms = sum(r["ms"] for r in trace.rows)
        lines.append(f"wall time: {total_ms / 1e3:.2f} s")
        rej = sum(r["pd_rejects"] for r in trace.rows)
        lines.append(f"pd rejections: {rej}")
        last = [r["logml"] for r in trace.rows if r["iter"] == n_iter]
        if last and math.isfinite(last[-1]):
            lines.append(f"log marginal likelihood: {last[-1]:.6g}")
    lines.append("")
    lines.append(f"{'param':<12}{'mean':>12}{'sd':>12}")
    for n, m, s in zip(names, mean, sd):
        lines.append(f"{n:<12}{m:>12.4f}{s:>12.4f}")
    if cov is not None:
        lines.append("")
        lines.append("coverage (fraction of |mean - truth| within k sd):")
        for lvl, f in zip(LEVELS, cov.fractions()):
            lines.append(f"  {lvl} sd: {f:.3f}")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    trace = RunTrace.from_csv(args.trace)
    names, mean, sd = read_summary(args.summary)
    cov = None
    if args.truth:
        cov = _coverage(names, mean, sd, load_truth(args.truth))
    print(render_report(trace, names, mean, sd, cov), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiltedep", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "run"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI file; see tiltedep.config")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--data", help="dataset CSV (default: <out>/data.csv)")
        sp.add_argument("--truth", help="truth CSV (default: <out>/truth.csv)")
        if name == "run":
            sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    rp = sub.add_parser("report")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--summary", required=True)
    rp.add_argument("--truth")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "report":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            return cmd_report(args)
        cfg = config_mod.load(args.config, _split_overrides(extra))
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        return cmd_run(cfg, args)
    except (config_mod.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        # a site computation failed; no usable approximation exists
        print(f"error: run aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
