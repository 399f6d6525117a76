"""Squared-exponential kernel and the dense Gaussian linear algebra shared by
the inference code.

The kernel is written with a single scale ``l`` dividing the squared distance,

    k(x, x') = theta * exp(-||x - x'||^2 / (2 l)),

so ``l`` has units of squared input distance. Both hyperparameters are stored
in log domain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import InputError, NumericalError

MAX_JITTER_RETRIES = 6


@dataclass(frozen=True)
class SEKernelParams:
    log_amplitude: float = 0.0
    log_scale: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.log_amplitude) and np.isfinite(self.log_scale)):
            raise InputError("kernel parameters must be finite")

    @property
    def amplitude(self) -> float:
        return float(np.exp(self.log_amplitude))

    @property
    def scale(self) -> float:
        return float(np.exp(self.log_scale))

    @classmethod
    def from_values(cls, amplitude: float = 1.0, scale: float = 1.0) -> "SEKernelParams":
        if amplitude <= 0 or scale <= 0:
            raise InputError("amplitude and scale must be positive")
        return cls(float(np.log(amplitude)), float(np.log(scale)))

    def to_dict(self) -> dict:
        return {"log_amplitude": self.log_amplitude, "log_scale": self.log_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "SEKernelParams":
        return cls(float(d["log_amplitude"]), float(d["log_scale"]))


@dataclass
class GaussianPosterior:
    """Multivariate normal over the latent values at the training inputs."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.diag(self.cov).copy()


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise InputError(f"expected a 2-D input matrix, got shape {X.shape}")
    return X


def sq_dist(X, X2=None) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    X = _as_2d(X)
    X2 = X if X2 is None else _as_2d(X2)
    if X.shape[1] != X2.shape[1]:
        raise InputError(
            f"dimension mismatch: {X.shape[1]} vs {X2.shape[1]} features")
    D = (np.sum(X ** 2, axis=1)[:, None] + np.sum(X2 ** 2, axis=1)[None, :]
         - 2.0 * X @ X2.T)
    np.maximum(D, 0.0, out=D)
    if X2 is X:
        np.fill_diagonal(D, 0.0)
        D = 0.5 * (D + D.T)
    return D


def se_kernel(x, x2, p: SEKernelParams) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise InputError(f"dimension mismatch: {x.size} vs {x2.size}")
    d2 = float(np.sum((x - x2) ** 2))
    return p.amplitude * float(np.exp(-0.5 * d2 / p.scale))


def kernel_matrix(X, p: SEKernelParams, X2=None) -> np.ndarray:
    """Gram matrix ``K[i, j] = k(X[i], X2[j])``; symmetric when ``X2`` is None."""
    X = _as_2d(X)
    if X.shape[0] < 1:
        raise InputError("need at least one input row")
    D = sq_dist(X, X2)
    return p.amplitude * np.exp(-0.5 * D / p.scale)


def kernel_grads(X, p: SEKernelParams, K=None) -> dict[str, np.ndarray]:
    """Derivatives of the Gram matrix w.r.t. the log-domain hyperparameters."""
    D = sq_dist(X)
    if K is None:
        K = p.amplitude * np.exp(-0.5 * D / p.scale)
    return {"log_amplitude": K.copy(), "log_scale": K * D / (2.0 * p.scale)}


def median_sq_dist(X) -> float:
    """Median of the pairwise squared distances between distinct rows."""
    X = _as_2d(X)
    n = X.shape[0]
    if n < 2:
        return 1.0
    D = sq_dist(X)
    vals = D[np.triu_indices(n, k=1)]
    med = float(np.median(vals))
    if med <= 0.0:
        pos = vals[vals > 0]
        med = float(np.median(pos)) if pos.size else 1.0
    return med


def chol_with_jitter(M, base_jitter: float | None = None) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``M + jitter * I``.

    The first attempt uses no jitter; after that the jitter starts at
    ``base_jitter`` (default ``1e-8`` times the mean diagonal) and grows
    tenfold per retry, at most ``MAX_JITTER_RETRIES`` times.

    Returns
    -------
    L : ndarray
        Lower-triangular factor.
    jitter : float
        Jitter actually added to the diagonal.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InputError(f"expected a square matrix, got shape {M.shape}")
    scale = max(float(np.max(np.abs(M))), 1e-300)
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-12 * scale):
        raise InputError("matrix is not symmetric")
    if base_jitter is None:
        base_jitter = 1e-8 * max(float(np.mean(np.diag(M))), 1e-300)
    n = M.shape[0]
    jitter = 0.0
    for attempt in range(MAX_JITTER_RETRIES + 1):
        try:
            L = np.linalg.cholesky(M + jitter * np.eye(n) if jitter else M)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = base_jitter * 10.0 ** attempt
    eig = np.linalg.eigvalsh(0.5 * (M + M.T))
    raise NumericalError(
        f"Cholesky failed after {MAX_JITTER_RETRIES} jitter retries "
        f"(last jitter {base_jitter * 10.0 ** (MAX_JITTER_RETRIES - 1):.3g}); "
        f"eigenvalue range [{eig[0]:.3g}, {eig[-1]:.3g}], "
        f"condition estimate {abs(eig[-1]) / max(abs(eig[0]), 1e-300):.3g}")


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = b`` given the lower factor."""
    z = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, z, lower=False)
