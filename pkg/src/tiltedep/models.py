"""Model shards, the hierarchical logistic simulator and conjugate oracles.

A :class:`ModelShard` is one partition's log likelihood with derivative
evaluators.  Hierarchical shards put their ``n_local`` local parameters
(``alpha_k``) first and the shared parameters (``phi``) last; the cavity
only ever acts on the shared block.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit, log_ndtr, logsumexp

from .natgauss import LOG_2PI, MomentGaussian, NaturalGaussian, is_pd, log_norm, to_moments


class InvalidPartition(ValueError):
    pass


@dataclass(eq=False)
class ModelShard:
    log_lik: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int
    hess: Optional[Callable[[np.ndarray], np.ndarray]] = None
    n_local: int = 0
    data: Any = None
    transform_info: dict = field(default_factory=dict)
    log_lik_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hess_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    @property
    def d_phi(self) -> int:
        return self.dim - self.n_local

    @property
    def phi_index(self) -> np.ndarray:
        return np.arange(self.n_local, self.dim)

    def loglik_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.log_lik_batch is not None:
            return np.asarray(self.log_lik_batch(X), dtype=float)
        return np.array([self.log_lik(x) for x in X], dtype=float)

    def grad_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.grad_batch is not None:
            return np.asarray(self.grad_batch(X), dtype=float)
        return np.array([self.grad(x) for x in X], dtype=float)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        """Analytic Hessian when available, else central differences of ``grad``."""
        x = np.asarray(x, dtype=float)
        if self.hess is not None:
            return np.asarray(self.hess(x), dtype=float)
        return fd_hessian(self.grad, x)

    def hess_many(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.hess_batch is not None:
            return np.asarray(self.hess_batch(X), dtype=float)
        return np.array([self.hessian(x) for x in X], dtype=float)


def fd_hessian(grad: Callable, x: np.ndarray) -> np.ndarray:
    d = x.size
    H = np.empty((d, d))
    for i in range(d):
        h = 1e-5 * (1.0 + abs(x[i]))
        e = np.zeros(d)
        e[i] = h
        H[:, i] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2 * h)
    return 0.5 * (H + H.T)


def fd_gradient(f: Callable, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    d = x.size
    g = np.empty(d)
    for i in range(d):
        h = step * (1.0 + abs(x[i]))
        e = np.zeros(d)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_gradients(shard: ModelShard, points: np.ndarray, rtol: float = 1e-5, hess_rtol: float = 1e-4) -> dict:
    """Compare analytic derivatives against central differences.

    Returns the worst relative errors; raises ``AssertionError`` if either
    exceeds its tolerance.  Relative error is measured against
    ``max(1, |analytic|)`` so that near-zero entries do not dominate.
    """
    worst_g = worst_h = 0.0
    for x in np.atleast_2d(points):
        g = np.asarray(shard.grad(x))
        g_fd = fd_gradient(shard.log_lik, x)
        worst_g = max(worst_g, float(np.max(np.abs(g - g_fd) / np.maximum(1.0, np.abs(g)))))
        if shard.hess is not None:
            H = np.asarray(shard.hess(x))
            H_fd = fd_hessian(shard.grad, x)
            worst_h = max(worst_h, float(np.max(np.abs(H - H_fd) / np.maximum(1.0, np.abs(H)))))
    if worst_g > rtol:
        raise AssertionError(f"gradient mismatch {worst_g:.3g} > {rtol}")
    if worst_h > hess_rtol:
        raise AssertionError(f"Hessian mismatch {worst_h:.3g} > {hess_rtol}")
    return {"grad": worst_g, "hess": worst_h}


# ---------------------------------------------------------------- Gaussian


def gaussian_shard(A: np.ndarray, V: np.ndarray, y: np.ndarray, n_local: int = 0, name: str = "") -> ModelShard:
    """Shard with ``y ~ N(A x, V)`` including the normalizing constant."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n, d = A.shape
    P = linalg.inv(V) if n else np.zeros((0, 0))
    P = 0.5 * (P + P.T)
    const = -0.5 * (n * LOG_2PI + np.linalg.slogdet(V)[1]) if n else 0.0
    AtP = A.T @ P
    H = -AtP @ A

    def ll_batch(X):
        R = y[None, :] - X @ A.T
        return const - 0.5 * np.einsum("ni,ij,nj->n", R, P, R)

    def grad_batch(X):
        R = y[None, :] - X @ A.T
        return R @ AtP.T

    return ModelShard(
        log_lik=lambda x: float(ll_batch(np.atleast_2d(x))[0]),
        grad=lambda x: grad_batch(np.atleast_2d(x))[0],
        hess=lambda x: H.copy(),
        dim=d,
        n_local=n_local,
        data={"A": A, "V": V, "y": y},
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=lambda X: np.broadcast_to(H, (np.atleast_2d(X).shape[0], d, d)).copy(),
        name=name,
    )


def gaussian_site_exact(shard: ModelShard) -> NaturalGaussian:
    """Natural parameters of a Gaussian shard's likelihood as a function of x."""
    A, V, y = shard.data["A"], shard.data["V"], shard.data["y"]
    if A.shape[0] == 0:
        return NaturalGaussian.unit(shard.dim)
    P = linalg.inv(V)
    return NaturalGaussian(A.T @ P @ y, A.T @ P @ A)


@dataclass(eq=False)
class ConjugateModel:
    shards: list
    prior: NaturalGaussian
    posterior: NaturalGaussian
    log_evidence: float


def conjugate_gaussian_model(
    K: int, d: int, seed: int = 0, n_per_shard: int = 3, prior: Optional[NaturalGaussian] = None,
    empty_shards: Sequence[int] = (),
) -> ConjugateModel:
    """``y_k | θ ~ N(A_k θ, V_k)`` shards with the exact posterior and evidence."""
    rng = np.random.default_rng(seed)
    if prior is None:
        prior = NaturalGaussian(np.zeros(d), np.eye(d))
    shards = []
    for k in range(K):
        n = 0 if k in empty_shards else n_per_shard
        A = rng.normal(size=(n, d))
        L = rng.normal(size=(n, n)) * 0.3
        V = L @ L.T + np.diag(rng.uniform(0.5, 1.5, size=n))
        y = rng.normal(size=n) * 2.0
        shards.append(gaussian_shard(A, V, y, name=f"shard{k}"))
    post = prior
    for s in shards:
        e = gaussian_site_exact(s)
        post = NaturalGaussian(post.r + e.r, post.Q + e.Q)
    if not is_pd(prior.Q):
        # an improper prior has no evidence
        return ConjugateModel(shards, prior, post, math.nan)
    # evidence: stacked y ~ N(A m0, A S0 A' + V)
    m0 = to_moments(prior)
    A = np.vstack([s.data["A"] for s in shards])
    y = np.concatenate([s.data["y"] for s in shards])
    V = linalg.block_diag(*[s.data["V"] for s in shards if s.data["A"].shape[0]])
    C = A @ m0.Sigma @ A.T + V
    R = y - A @ m0.mu
    logev = -0.5 * (y.size * LOG_2PI + np.linalg.slogdet(C)[1] + R @ linalg.solve(C, R))
    return ConjugateModel(shards, prior, post, float(logev))


# ------------------------------------------------------------ GLM shards


def logistic_shard(X: np.ndarray, y: np.ndarray, name: str = "") -> ModelShard:
    """Bernoulli-logit likelihood in the coefficient vector."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)

    def ll_batch(B):
        E = B @ X.T
        return np.sum(y * E - np.logaddexp(0.0, E), axis=1)

    def grad_batch(B):
        return (y - expit(B @ X.T)) @ X

    def hess_batch(B):
        p = expit(B @ X.T)
        return -np.einsum("ni,ij,ik->njk", p * (1 - p), X, X)

    return ModelShard(
        log_lik=lambda b: float(ll_batch(np.atleast_2d(b))[0]),
        grad=lambda b: grad_batch(np.atleast_2d(b))[0],
        hess=lambda b: hess_batch(np.atleast_2d(b))[0],
        dim=X.shape[1],
        data={"X": X, "y": y},
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=hess_batch,
        name=name,
    )


def probit_loglik_z(y: float) -> Callable[[np.ndarray], np.ndarray]:
    """``log Φ(y z)`` for a label ``y ∈ {-1, +1}``, vectorized over ``z``."""
    return lambda z: log_ndtr(y * np.asarray(z, dtype=float))


def logistic_loglik_z(y: float) -> Callable[[np.ndarray], np.ndarray]:
    """``log σ(y z)`` for a label ``y ∈ {-1, +1}``."""
    return lambda z: -np.logaddexp(0.0, -y * np.asarray(z, dtype=float))


def probit_shard(X: np.ndarray, y: np.ndarray, name: str = "") -> ModelShard:
    """Probit likelihood with labels in ``{-1, +1}``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)

    def ll_batch(B):
        return np.sum(log_ndtr((B @ X.T) * y), axis=1)

    def _ratio(Z):
        # φ(z)/Φ(z) computed in log space
        return np.exp(-0.5 * Z**2 - 0.5 * LOG_2PI - log_ndtr(Z))

    def grad_batch(B):
        Z = (B @ X.T) * y
        return (_ratio(Z) * y) @ X

    def hess_batch(B):
        Z = (B @ X.T) * y
        lam = _ratio(Z)
        w = -lam * (Z + lam)
        return np.einsum("ni,ij,ik->njk", w, X, X)

    return ModelShard(
        log_lik=lambda b: float(ll_batch(np.atleast_2d(b))[0]),
        grad=lambda b: grad_batch(np.atleast_2d(b))[0],
        hess=lambda b: hess_batch(np.atleast_2d(b))[0],
        dim=X.shape[1],
        data={"X": X, "y": y},
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=hess_batch,
        name=name,
    )


# ------------------------------------------- hierarchical logistic model


@dataclass(eq=False)
class HLogitDataset:
    group: np.ndarray  # 0-based group index per observation
    y: np.ndarray
    X: np.ndarray
    beta: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    tau: Optional[float] = None

    @property
    def J(self) -> int:
        return int(self.group.max()) + 1 if self.group.size else 0

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return self.y.size

    def truth(self) -> dict:
        if self.beta is None:
            return {}
        out = {f"beta{i + 1}": float(b) for i, b in enumerate(self.beta)}
        out["log_tau"] = math.log(self.tau) if self.tau and self.tau > 0 else float("-inf")
        for j, a in enumerate(self.alpha):
            out[f"alpha{j + 1}"] = float(a)
        return out


def simulate_hlogit(J: int, N_j: int, D: int, seed: int, tau: float = 2.0,
                    beta: Optional[np.ndarray] = None, X: Optional[np.ndarray] = None) -> HLogitDataset:
    """Simulate ``y ~ Bernoulli(logit^-1(alpha_j + x'beta))``.

    ``x ~ N(0, 1)``, ``alpha_j ~ N(0, tau^2)``, ``beta ~ N(0, 1)``.  Passing
    ``beta`` or ``X`` pins them instead of drawing.
    """
    if J < 1 or N_j < 1 or D < 1:
        raise ValueError("J, N_j and D must be positive")
    rng = np.random.default_rng(seed)
    drawn_beta = rng.normal(size=D)
    beta = drawn_beta if beta is None else np.asarray(beta, dtype=float).reshape(D)
    alpha = tau * rng.normal(size=J)
    group = np.repeat(np.arange(J), N_j)
    drawn_X = rng.normal(size=(J * N_j, D))
    X = drawn_X if X is None else np.asarray(X, dtype=float).reshape(J * N_j, D)
    p = expit(alpha[group] + X @ beta)
    y = (rng.uniform(size=p.size) < p).astype(int)
    return HLogitDataset(group, y, X, beta, alpha, tau)


def save_dataset(ds: HLogitDataset, path, truth_path=None) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "y"] + [f"x{i + 1}" for i in range(ds.D)])
        for g, yy, row in zip(ds.group, ds.y, ds.X):
            w.writerow([int(g) + 1, int(yy)] + [repr(float(v)) for v in row])
    if truth_path is not None and ds.beta is not None:
        with Path(truth_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "value"])
            for k, v in ds.truth().items():
                w.writerow([k, repr(v)])


def load_dataset(path, truth_path=None) -> HLogitDataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:2] != ["group", "y"]:
        raise ValueError(f"{path}: expected header group,y,x1..xD")
    body = np.array(rows[1:], dtype=float)
    group = body[:, 0].astype(int) - 1
    y = body[:, 1].astype(int)
    if group.min() < 0 or not set(np.unique(y)) <= {0, 1}:
        raise ValueError(f"{path}: groups must be 1-based and outcomes binary")
    ds = HLogitDataset(group, y, body[:, 2:])
    if truth_path is not None:
        truth = load_truth(truth_path)
        ds.beta = np.array([truth[f"beta{i + 1}"] for i in range(ds.D)])
        ds.tau = math.exp(truth["log_tau"])
        ds.alpha = np.array([truth[f"alpha{j + 1}"] for j in range(ds.J)])
    return ds


def load_truth(path) -> dict:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["param", "value"]:
        raise ValueError(f"{path}: expected header param,value")
    return {k: float(v) for k, v in rows[1:]}


def hlogit_local_shard(X: np.ndarray, y: np.ndarray, group: np.ndarray, n_groups: int, name: str = "") -> ModelShard:
    """Local model ``p(y_k | alpha_k, beta) p(alpha_k | tau)`` of one shard.

    Parameter layout: ``(alpha_1..alpha_m, beta_1..beta_D, log_tau)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, D = n_groups, X.shape[1]
    G = np.zeros((y.size, m))
    G[np.arange(y.size), group] = 1.0
    Z = np.hstack([G, X])  # linear predictor design, log_tau excluded
    p_dim = m + D + 1

    def split(P):
        return P[:, :m], P[:, m:m + D], P[:, -1]

    def ll_batch(P):
        P = np.atleast_2d(P)
        a, _, s = split(P)
        E = P[:, :m + D] @ Z.T
        lik = np.sum(y * E - np.logaddexp(0.0, E), axis=1)
        with np.errstate(over="ignore", invalid="ignore"):
            prec = np.exp(-2.0 * s)
            prior = -0.5 * m * LOG_2PI - m * s - 0.5 * prec * np.sum(a**2, axis=1)
        out = lik + prior
        return np.where(np.isnan(out), -np.inf, out)

    def grad_batch(P):
        P = np.atleast_2d(P)
        a, _, s = split(P)
        E = P[:, :m + D] @ Z.T
        g = np.empty_like(P)
        g[:, :m + D] = (y - expit(E)) @ Z
        prec = np.exp(-2.0 * s)
        g[:, :m] -= a * prec[:, None]
        g[:, -1] = -m + prec * np.sum(a**2, axis=1)
        return g

    def hess_batch(P):
        P = np.atleast_2d(P)
        a, _, s = split(P)
        E = P[:, :m + D] @ Z.T
        pr = expit(E)
        H = np.zeros((P.shape[0], p_dim, p_dim))
        H[:, :m + D, :m + D] = -np.einsum("ni,ij,ik->njk", pr * (1 - pr), Z, Z)
        prec = np.exp(-2.0 * s)
        idx = np.arange(m)
        H[:, idx, idx] -= prec[:, None]
        H[:, idx, -1] = 2.0 * a * prec[:, None]
        H[:, -1, idx] = H[:, idx, -1]
        H[:, -1, -1] = -2.0 * prec * np.sum(a**2, axis=1)
        return H

    return ModelShard(
        log_lik=lambda x: float(ll_batch(x)[0]),
        grad=lambda x: grad_batch(x)[0],
        hess=lambda x: hess_batch(x)[0],
        dim=p_dim,
        n_local=m,
        data={"X": X, "y": y, "group": group},
        transform_info={"log_tau": p_dim - 1},
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=hess_batch,
        name=name,
    )


def hlogit_noncentered_shard(X: np.ndarray, y: np.ndarray, group: np.ndarray, n_groups: int,
                             name: str = "") -> ModelShard:
    """Local model with group effects written as ``alpha_j = tau * u_j``, ``u_j ~ N(0, 1)``.

    Parameter layout: ``(u_1..u_m, beta_1..beta_D, log_tau)``.  Unlike the
    centered form, the joint density stays bounded as ``tau -> 0``, so the
    joint mode exists.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, D = n_groups, X.shape[1]
    G = np.zeros((y.size, m))
    G[np.arange(y.size), group] = 1.0
    p_dim = m + D + 1

    def eta_lin(P):
        tau = np.exp(P[:, -1])
        alpha = P[:, :m] * tau[:, None]
        return alpha @ G.T + P[:, m:m + D] @ X.T, alpha, tau

    def ll_batch(P):
        P = np.atleast_2d(P)
        with np.errstate(over="ignore", invalid="ignore"):
            E, _, _ = eta_lin(P)
            lik = np.sum(y * E - np.logaddexp(0.0, E), axis=1)
        # proposals far in the tails overflow; treat them as zero density
        lik = np.where(np.isfinite(lik), lik, -np.inf)
        return lik - 0.5 * np.sum(P[:, :m] ** 2, axis=1) - 0.5 * m * LOG_2PI

    def jac(alpha, tau):
        # rows: d E_i / d (u, beta, log_tau)
        n = alpha.shape[0]
        J = np.empty((n, y.size, p_dim))
        J[:, :, :m] = tau[:, None, None] * G[None]
        J[:, :, m:m + D] = X[None]
        J[:, :, -1] = alpha @ G.T
        return J

    def grad_batch(P):
        P = np.atleast_2d(P)
        E, alpha, tau = eta_lin(P)
        w = y - expit(E)
        g = np.einsum("ni,nij->nj", w, jac(alpha, tau))
        g[:, :m] -= P[:, :m]
        return g

    def hess_batch(P):
        P = np.atleast_2d(P)
        out = np.empty((P.shape[0], p_dim, p_dim))
        for lo in range(0, P.shape[0], 64):
            Pc = P[lo:lo + 64]
            E, alpha, tau = eta_lin(Pc)
            pr = expit(E)
            w = y - pr
            J = jac(alpha, tau)
            H = -np.einsum("nij,ni,nik->njk", J, pr * (1 - pr), J)
            idx = np.arange(m)
            H[:, idx, idx] -= 1.0
            cross = tau[:, None] * (w @ G)  # second derivative of E in (u_j, log_tau)
            H[:, idx, -1] += cross
            H[:, -1, idx] += cross
            H[:, -1, -1] += np.sum(w * (alpha @ G.T), axis=1)
            out[lo:lo + 64] = H
        return out

    return ModelShard(
        log_lik=lambda x: float(ll_batch(x)[0]),
        grad=lambda x: grad_batch(x)[0],
        hess=lambda x: hess_batch(x)[0],
        dim=p_dim,
        n_local=m,
        data={"X": X, "y": y, "group": group},
        transform_info={"log_tau": p_dim - 1, "local": "noncentered"},
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=hess_batch,
        name=name,
    )


MAX_LOG_TAU = 100.0


def _group_modes(b, y, G, tau, max_iter=50, tol=1e-12):
    """Per-group mode and curvature of the standardized effect ``u``.

    The integrand in ``u`` is strictly log-concave (curvature <= -1), so a
    plain Newton iteration from zero converges.
    """
    m = G.shape[1]
    u = np.zeros(m)
    for _ in range(max_iter):
        p = expit(b + tau * (G @ u))
        g = tau * (G.T @ (y - p)) - u
        h = tau**2 * (G.T @ (p * (1.0 - p))) + 1.0
        step = g / h
        u = u + step
        if np.max(np.abs(step)) < tol:
            break
    p = expit(b + tau * (G @ u))
    h = tau**2 * (G.T @ (p * (1.0 - p))) + 1.0
    return u, 1.0 / np.sqrt(h)


def hlogit_integrated_shard(X: np.ndarray, y: np.ndarray, group: np.ndarray, n_groups: int, name: str = "",
                            n_nodes: int = 24) -> ModelShard:
    """Shard on ``(beta, log_tau)`` with each group effect integrated out.

    ``alpha_j = tau * u_j`` with ``u_j ~ N(0, 1)``; each one-dimensional
    integral over ``u_j`` uses Gauss-Hermite nodes recentred at the group's
    conditional mode and scaled by its curvature.  Derivatives are posterior
    expectations over the nodes (the node placement is held fixed).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    m, D = n_groups, X.shape[1]
    G = np.zeros((y.size, m))
    G[np.arange(y.size), group] = 1.0
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    log_w = np.log(w) + t**2 + 0.5 * math.log(2.0)

    def nodes(phi):
        beta, s = phi[:D], phi[D]
        tau = math.exp(s)
        b = X @ beta
        u_hat, sd = _group_modes(b, y, G, tau)
        U = u_hat[:, None] + math.sqrt(2.0) * sd[:, None] * t[None, :]  # (m, N)
        E = b[:, None] + tau * (G @ U)  # (n, N)
        ll = G.T @ (y[:, None] * E - np.logaddexp(0.0, E)) - 0.5 * U**2 - 0.5 * LOG_2PI
        logv = ll + log_w[None, :] + np.log(sd)[:, None]
        return tau, U, E, logv

    def log_lik(phi):
        phi = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi)) or phi[D] > MAX_LOG_TAU:
            # tau would overflow; the integrated likelihood is treated as zero there
            return -math.inf
        *_, logv = nodes(phi)
        return float(np.sum(logsumexp(logv, axis=1)))

    def _moments(phi):
        tau, U, E, logv = nodes(phi)
        lse = logsumexp(logv, axis=1)
        P = np.exp(logv - lse[:, None])  # (m, N) node posteriors per group
        Pi = G @ P  # (n, N) node posteriors of each row's group
        R = y[:, None] - expit(E)
        S = expit(E) * (1.0 - expit(E))
        TU = tau * (G @ U)  # d E / d log_tau at each node
        # per-group per-node gradient (m, N, D+1)
        gb = np.einsum("ij,in,id->jnd", G, R, X)
        gs = G.T @ (R * TU)
        Gn = np.concatenate([gb, gs[:, :, None]], axis=2)
        gbar = np.einsum("jn,jnd->jd", P, Gn)
        return P, Pi, R, S, TU, Gn, gbar

    def grad(phi):
        *_, gbar = _moments(np.asarray(phi, dtype=float))
        return gbar.sum(axis=0)

    def hess(phi):
        P, Pi, R, S, TU, Gn, gbar = _moments(np.asarray(phi, dtype=float))
        H = np.zeros((D + 1, D + 1))
        ws = np.sum(Pi * S, axis=1)
        H[:D, :D] = -(X * ws[:, None]).T @ X
        H[:D, D] = H[D, :D] = -X.T @ np.sum(Pi * S * TU, axis=1)
        H[D, D] = np.sum(Pi * (R * TU - S * TU**2))
        # variance of the per-node gradient within each group
        H += np.einsum("jn,jnd,jne->de", P, Gn, Gn) - gbar.T @ gbar
        return 0.5 * (H + H.T)

    return ModelShard(
        log_lik=log_lik,
        grad=grad,
        dim=D + 1,
        hess=hess,
        n_local=0,
        data={"X": X, "y": y, "group": group},
        transform_info={"log_tau": D, "local": "integrated"},
        name=name,
    )


def local_to_alpha(shard: ModelShard, x: np.ndarray) -> np.ndarray:
    """Group effects ``alpha`` from shard coordinates (rows of ``x``)."""
    x = np.atleast_2d(x)
    a = x[:, :shard.n_local]
    if shard.transform_info.get("local") == "noncentered":
        a = a * np.exp(x[:, [shard.transform_info["log_tau"]]])
    return a


def hlogit_shards(ds: HLogitDataset, groups_per_shard: int = 1, assignment: Optional[Sequence[Sequence[int]]] = None,
                  parameterization: str = "noncentered") -> list:
    """Partition the dataset so that each group lives in exactly one shard.

    Shared parameters are ``phi = (beta, log tau)``.  ``parameterization``
    selects how the group effects enter: ``centered`` uses ``alpha_j``
    directly, ``noncentered`` uses ``alpha_j / tau``, and ``integrated``
    removes the group effects by quadrature so the shard lives on ``phi``.
    """
    builders = {"centered": hlogit_local_shard, "noncentered": hlogit_noncentered_shard,
                "integrated": hlogit_integrated_shard}
    if parameterization not in builders:
        raise ValueError(f"unknown parameterization {parameterization!r}")
    J = ds.J
    if assignment is None:
        if groups_per_shard < 1:
            raise InvalidPartition("groups_per_shard must be positive")
        assignment = [list(range(s, min(s + groups_per_shard, J))) for s in range(0, J, groups_per_shard)]
    flat = sorted(g for part in assignment for g in part)
    if flat != list(range(J)):
        raise InvalidPartition("partition must cover every group exactly once")
    shards = []
    for k, groups in enumerate(assignment):
        groups = list(groups)
        local = {g: i for i, g in enumerate(groups)}
        mask = np.isin(ds.group, groups)
        gidx = np.array([local[g] for g in ds.group[mask]], dtype=int)
        sh = builders[parameterization](ds.X[mask], ds.y[mask], gidx, len(groups), name=f"shard{k}")
        sh.data["groups"] = groups
        shards.append(sh)
    return shards


def hlogit_phi_names(D: int) -> list:
    return [f"beta{i + 1}" for i in range(D)] + ["log_tau"]


# ------------------------------------------------- coverage and reporting


@dataclass(eq=False)
class CoverageReport:
    z: np.ndarray
    within: dict  # level -> fraction

    def fractions(self):
        return tuple(self.within[k] for k in (1, 2, 3))


def coverage_report(mean: np.ndarray, sd: np.ndarray, truth: np.ndarray) -> CoverageReport:
    z = (np.asarray(mean, dtype=float) - np.asarray(truth, dtype=float)) / np.asarray(sd, dtype=float)
    within = {lvl: float(np.mean(np.abs(z) <= lvl)) for lvl in (1, 2, 3)}
    return CoverageReport(z, within)


# ------------------------------------------- hierarchical conjugate model


@dataclass(eq=False)
class HierConjugateModel:
    lik_shards: list  # p(y_k | alpha_k, phi) only
    local_shards: list  # p(y_k | alpha_k, phi) p(alpha_k)
    alpha_prior: NaturalGaussian
    phi_prior: NaturalGaussian
    joint_posterior: NaturalGaussian  # over (alpha_1..alpha_K, phi)
    phi_posterior: NaturalGaussian
    d_alpha: int
    d_phi: int

    def alpha_posterior(self, k: int) -> MomentGaussian:
        m = to_moments(self.joint_posterior)
        sl = slice(k * self.d_alpha, (k + 1) * self.d_alpha)
        return MomentGaussian(m.mu[sl], m.Sigma[sl, sl])


def conjugate_hier_model(K: int, d_alpha: int, d_phi: int, seed: int = 0, n_per_shard: int = 4,
                         empty_shards: Sequence[int] = ()) -> HierConjugateModel:
    """``y_k = U_k alpha_k + W_k phi + e`` with independent Gaussian priors."""
    rng = np.random.default_rng(seed)
    a_prior = NaturalGaussian(rng.normal(size=d_alpha) * 0.3, np.eye(d_alpha) * 0.8)
    p_prior = NaturalGaussian(rng.normal(size=d_phi) * 0.3, np.eye(d_phi) * 0.5)
    lik, local = [], []
    D = K * d_alpha + d_phi
    Qj = linalg.block_diag(*([a_prior.Q] * K), p_prior.Q)
    rj = np.concatenate([a_prior.r] * K + [p_prior.r])
    for k in range(K):
        n = 0 if k in empty_shards else n_per_shard
        A = rng.normal(size=(n, d_alpha + d_phi))
        V = np.diag(rng.uniform(0.5, 1.5, size=n))
        y = rng.normal(size=n) * 2.0
        lik.append(gaussian_shard(A, V, y, n_local=d_alpha, name=f"shard{k}"))
        local.append(_add_gaussian_prior(lik[-1], a_prior))
        if n:
            e = gaussian_site_exact(lik[-1])
            idx = np.r_[k * d_alpha:(k + 1) * d_alpha, K * d_alpha:D]
            Qj[np.ix_(idx, idx)] += e.Q
            rj[idx] += e.r
    joint = NaturalGaussian(rj, Qj)
    phi = joint.marginal(np.arange(K * d_alpha, D))
    return HierConjugateModel(lik, local, a_prior, p_prior, joint, phi, d_alpha, d_phi)


def _add_gaussian_prior(shard: ModelShard, prior: NaturalGaussian) -> ModelShard:
    """Fold a normalized Gaussian prior on the local block into a shard."""
    m = shard.n_local
    c = log_norm(prior)

    def lp(X):
        A = np.atleast_2d(X)[:, :m]
        return prior.logpdf_unnorm(A) - c

    def ll_batch(X):
        return shard.loglik_many(X) + lp(X)

    def grad_batch(X):
        G = shard.grad_many(X).copy()
        G[:, :m] += prior.r - np.atleast_2d(X)[:, :m] @ prior.Q
        return G

    def hess_one(x):
        H = shard.hessian(x).copy()
        H[:m, :m] -= prior.Q
        return H

    return ModelShard(
        log_lik=lambda x: float(ll_batch(np.atleast_2d(x))[0]),
        grad=lambda x: grad_batch(np.atleast_2d(x))[0],
        hess=hess_one,
        dim=shard.dim,
        n_local=m,
        data=shard.data,
        log_lik_batch=ll_batch,
        grad_batch=grad_batch,
        hess_batch=lambda X: np.array([hess_one(x) for x in np.atleast_2d(X)]),
        name=shard.name,
    )


__all__ = [
    "ModelShard", "InvalidPartition", "check_gradients", "fd_hessian", "fd_gradient",
    "gaussian_shard", "gaussian_site_exact", "ConjugateModel", "conjugate_gaussian_model",
    "logistic_shard", "probit_shard", "probit_loglik_z", "logistic_loglik_z",
    "HLogitDataset", "simulate_hlogit", "save_dataset", "load_dataset", "load_truth",
    "hlogit_local_shard", "hlogit_integrated_shard", "hlogit_noncentered_shard", "local_to_alpha", "hlogit_shards", "hlogit_phi_names", "CoverageReport", "coverage_report",
    "HierConjugateModel", "conjugate_hier_model",
]
