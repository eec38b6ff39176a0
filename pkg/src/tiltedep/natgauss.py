"""Multivariate Gaussians in natural parameters.

A Gaussian factor is stored as ``(r, Q)`` with unnormalized log density
``-0.5 * x' Q x + r' x``.  Products and quotients of factors are sums and
differences of natural parameters, so the quotient of two valid Gaussians may
well be indefinite; ``Q`` is therefore *not* required to be positive definite
and a separate ``valid`` flag records the result of the last PD check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegenerateDraws(ValueError):
    pass


def symmetrize(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class NaturalGaussian:
    r: np.ndarray
    Q: np.ndarray
    valid: Optional[bool] = field(default=None, compare=False)

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.r, dtype=float)).reshape(-1)
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        if Q.shape != (r.size, r.size):
            raise DimensionMismatch(f"r has length {r.size} but Q has shape {Q.shape}")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "Q", symmetrize(Q))

    @property
    def d(self) -> int:
        return self.r.size

    @classmethod
    def unit(cls, d: int) -> "NaturalGaussian":
        """The identity element ``g = 1``."""
        return cls(np.zeros(d), np.zeros((d, d)), valid=False)

    def checked(self) -> "NaturalGaussian":
        """Copy with ``valid`` set from a zero-jitter Cholesky of ``Q``."""
        return replace(self, valid=is_pd(self.Q))

    def scale(self, c: float) -> "NaturalGaussian":
        return NaturalGaussian(c * self.r, c * self.Q)

    def mean(self) -> np.ndarray:
        return _chol_solve(self.Q, self.r)

    def logpdf_unnorm(self, x: np.ndarray) -> np.ndarray:
        """``-0.5 x'Qx + r'x`` for a point or a stack of points (rows)."""
        x = np.asarray(x, dtype=float)
        quad = np.einsum("...i,ij,...j->...", x, self.Q, x)
        return -0.5 * quad + x @ self.r

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return self.logpdf_unnorm(x) - log_norm(self)

    def marginal(self, idx) -> "NaturalGaussian":
        """Natural parameters of the marginal over coordinates ``idx``.

        The complementary block must be positive definite; it is eliminated
        by a Schur complement.
        """
        idx = np.asarray(idx)
        rest = np.setdiff1d(np.arange(self.d), idx)
        if rest.size == 0:
            return self
        Qrr = self.Q[np.ix_(rest, rest)]
        Qir = self.Q[np.ix_(idx, rest)]
        cho = _cho_factor(Qrr)
        Qm = self.Q[np.ix_(idx, idx)] - Qir @ linalg.cho_solve(cho, Qir.T)
        rm = self.r[idx] - Qir @ linalg.cho_solve(cho, self.r[rest])
        return NaturalGaussian(rm, Qm)


@dataclass(frozen=True, eq=False)
class MomentGaussian:
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float)).reshape(-1)
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"mu has length {mu.size} but Sigma has shape {S.shape}")
        S = symmetrize(S)
        if not is_pd(S):
            raise NotPositiveDefinite("covariance is not positive definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", S)

    @property
    def d(self) -> int:
        return self.mu.size

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Sigma))


@dataclass(frozen=True, eq=False)
class WeightedDraws:
    draws: np.ndarray
    weights: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        X = np.asarray(self.draws, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size != X.shape[0]:
            raise DimensionMismatch(f"{X.shape[0]} draws but {w.size} weights")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be nonnegative with at least one positive")
        object.__setattr__(self, "draws", X)
        object.__setattr__(self, "weights", w)

    @classmethod
    def unweighted(cls, draws, source_id: str = "") -> "WeightedDraws":
        draws = np.asarray(draws, dtype=float)
        return cls(draws, np.ones(draws.shape[0]), source_id)

    @property
    def S(self) -> int:
        return self.draws.shape[0]


def _cho_factor(Q: np.ndarray):
    try:
        return linalg.cho_factor(Q, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def _chol_solve(Q: np.ndarray, b: np.ndarray) -> np.ndarray:
    return linalg.cho_solve(_cho_factor(Q), b)


def is_pd(Q: np.ndarray) -> bool:
    """True iff a Cholesky factorization with zero jitter succeeds."""
    Q = np.asarray(Q, dtype=float)
    if Q.size == 0:
        return True
    if not np.all(np.isfinite(Q)):
        return False
    _, info = linalg.lapack.dpotrf(symmetrize(Q), lower=1)
    return info == 0


def log_norm(g: NaturalGaussian) -> float:
    """``log ∫ exp(-0.5 x'Qx + r'x) dx = 0.5 * (-log|Q/2π| + r'Q^{-1}r)``."""
    cho = _cho_factor(g.Q)
    L = cho[0]
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    quad = float(g.r @ linalg.cho_solve(cho, g.r))
    return 0.5 * (-(logdet - g.d * LOG_2PI) + quad)


def _check_dims(a: NaturalGaussian, b: NaturalGaussian):
    if a.d != b.d:
        raise DimensionMismatch(f"dimensions {a.d} and {b.d} differ")


def multiply(a: NaturalGaussian, b: NaturalGaussian) -> NaturalGaussian:
    _check_dims(a, b)
    return NaturalGaussian(a.r + b.r, a.Q + b.Q)


def divide(a: NaturalGaussian, b: NaturalGaussian) -> NaturalGaussian:
    # no PD check: cavities are allowed to be indefinite until guarded
    _check_dims(a, b)
    return NaturalGaussian(a.r - b.r, a.Q - b.Q)


def to_moments(g: NaturalGaussian) -> MomentGaussian:
    cho = _cho_factor(g.Q)
    Sigma = linalg.cho_solve(cho, np.eye(g.d))
    return MomentGaussian(linalg.cho_solve(cho, g.r), Sigma)


def from_moments(m: MomentGaussian) -> NaturalGaussian:
    cho = _cho_factor(m.Sigma)
    Q = linalg.cho_solve(cho, np.eye(m.d))
    return NaturalGaussian(Q @ m.mu, Q)


def clamp_eigenvalues(Q: np.ndarray, floor: float) -> np.ndarray:
    """Replace eigenvalues below ``floor`` by ``floor``, keeping eigenvectors.

    Matrices whose spectrum already sits at or above the floor are returned
    unchanged (up to symmetrization).
    """
    if floor <= 0:
        raise ValueError("floor must be positive")
    Q = symmetrize(Q)
    lam, V = np.linalg.eigh(Q)
    tol = 1e-12 * max(1.0, float(np.max(np.abs(lam))))
    if lam.min() >= floor - tol:
        return Q
    return symmetrize((V * np.maximum(lam, floor)) @ V.T)


def jittered_cholesky(S: np.ndarray, start: float = 1e-10, stop: float = 1e-4):
    """Cholesky of ``S + j I`` with ``j`` escalating ×10 from ``start·tr/d``.

    Returns ``(L, S_used)``.  Raises :class:`DegenerateDraws` if even the
    largest jitter fails.
    """
    S = symmetrize(S)
    d = S.shape[0]
    try:
        return np.linalg.cholesky(S), S
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(S) / d
    if not np.isfinite(scale) or scale <= 0:
        raise DegenerateDraws("covariance has non-positive trace")
    jit = start
    while jit <= stop * (1 + 1e-9):
        Sj = S + jit * scale * np.eye(d)
        try:
            return np.linalg.cholesky(Sj), Sj
        except np.linalg.LinAlgError:
            jit *= 10.0
    raise DegenerateDraws("covariance not positive definite after jitter escalation")


def moments_from_draws(d: WeightedDraws) -> MomentGaussian:
    """Weighted mean and unbiased weighted covariance of a draw set.

    With normalized weights ``w``, the covariance is
    ``Σ w_s (x_s - m)(x_s - m)' / (1 - Σ w_s²)``, which reduces to the usual
    ``n - 1`` denominator for equal weights.
    """
    w = d.weights / d.weights.sum()
    sw2 = float(w @ w)
    if 1.0 / sw2 < 2.0 - 1e-9:
        raise DegenerateDraws(f"effective sample size {1.0 / sw2:.3g} < 2")
    mu = w @ d.draws
    R = d.draws - mu
    S = (R.T * w) @ R / (1.0 - sw2)
    _, S = jittered_cholesky(S)
    return MomentGaussian(mu, S)
