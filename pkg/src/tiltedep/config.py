"""Experiment configuration: an INI file with sections, overridable per key."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .engine import EPConfig
from .tilted import SamplerConfig, make_backend


class ConfigError(ValueError):
    pass


# key -> section; keys are unique across sections so flags can stay flat
SECTIONS = {
    "model": ["kind", "J", "N_j", "D", "tau", "seed", "K", "d"],
    "partition": ["groups_per_shard", "parameterization"],
    "ep": ["eta", "delta0", "delta_backoff", "max_iters", "conv_tol", "init", "init_scale", "schedule",
           "pd_floor", "on_indefinite"],
    "backend": ["backend", "n_warmup", "n_draws", "n_chains", "proposal_scale", "adapt_target", "sampler_seed",
                "estimator", "reuse", "threshold_frac"],
    "output": ["out_dir"],
}


@dataclass
class ExperimentConfig:
    kind: str = "hlogit"  # hlogit | conjugate
    J: int = 20
    N_j: int = 40
    D: int = 10
    tau: float = 2.0
    seed: int = 0
    K: int = 5  # conjugate model only
    d: int = 4  # conjugate model only
    groups_per_shard: int = 1
    parameterization: str = "noncentered"
    eta: float = 1.0
    delta0: float = 1.0
    delta_backoff: float = 0.5
    max_iters: int = 30
    conv_tol: float = 1e-2
    init: str = "broad"
    init_scale: float = 10.0
    schedule: str = "serial"
    pd_floor: float = 1e-8
    on_indefinite: str = "clamp"
    backend: str = "mcmc"
    n_warmup: int = 50
    n_draws: int = 200
    n_chains: int = 4
    proposal_scale: Optional[float] = None
    adapt_target: float = 0.30
    sampler_seed: Optional[int] = None  # defaults to seed
    estimator: str = "score"
    reuse: bool = True
    threshold_frac: float = 0.3
    out_dir: str = "out"

    def validate(self) -> "ExperimentConfig":
        if self.kind not in ("hlogit", "conjugate"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for name in ("J", "N_j", "D", "K", "d", "groups_per_shard"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if self.parameterization not in ("centered", "noncentered", "integrated"):
            raise ConfigError(f"unknown parameterization {self.parameterization!r}")
        if self.backend not in ("laplace", "mcmc"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.estimator not in ("moments", "score"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if not 0 < self.threshold_frac <= 1:
            raise ConfigError("threshold_frac must lie in (0, 1]")
        try:
            self.ep_config()
            self.sampler_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def ep_config(self, workers: Optional[int] = None) -> EPConfig:
        return EPConfig(eta=self.eta, delta0=self.delta0, delta_backoff=self.delta_backoff,
                        max_iters=self.max_iters, conv_tol=self.conv_tol, init=self.init,
                        init_scale=self.init_scale, schedule=self.schedule, pd_floor=self.pd_floor,
                        on_indefinite=self.on_indefinite, workers=workers)

    def sampler_config(self) -> SamplerConfig:
        seed = self.seed if self.sampler_seed is None else self.sampler_seed
        return SamplerConfig(n_warmup=self.n_warmup, n_draws=self.n_draws, n_chains=self.n_chains,
                             proposal_scale=self.proposal_scale, adapt_target=self.adapt_target, seed=seed)

    def make_backend(self):
        if self.backend == "laplace":
            return make_backend("laplace")
        return make_backend("mcmc", self.sampler_config(), estimator=self.estimator, reuse=self.reuse,
                            threshold_frac=self.threshold_frac)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown configuration key {key!r}")
    t = _TYPES[key]
    raw = raw.strip()
    if "Optional" in t:
        if raw.lower() in ("", "none"):
            return None
        t = t.replace("Optional[", "").rstrip("]")
    try:
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _render_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    values = asdict(cfg)
    for section, keys in SECTIONS.items():
        cp[section] = {k: _render_value(values[k]) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in SECTIONS[section]:
                raise ConfigError(f"key {key!r} does not belong in [{section}]")
            values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values).validate()


def load(path: Optional[str], overrides: Optional[dict] = None, env=None) -> ExperimentConfig:
    """Read a config file (or defaults), apply overrides, then ``EP_SEED``."""
    env = os.environ if env is None else env
    text = ""
    if path:
        with open(path) as fh:
            text = fh.read()
    overrides = dict(overrides or {})
    if env.get("EP_SEED"):
        overrides["seed"] = env["EP_SEED"]
    return parse(text, overrides)
