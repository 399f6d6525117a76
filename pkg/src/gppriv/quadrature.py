"""Gauss-Hermite rules, stable normal-CDF helpers and tilted moments.

A tilted distribution is a one-site cavity Gaussian multiplied by the exact
likelihood factor. Its normalizer ``Z`` and the partial derivatives of
``log Z`` with respect to the cavity means and variances are all EP needs to
moment-match a site.

For the privileged-noise likelihood

    Z = int Phi(y m_f / sqrt(v_f + exp(g))) N(g | m_g, v_g) dg

is evaluated with the substitution ``g = m_g + sqrt(2 v_g) t`` and a
Gauss-Hermite rule, accumulated in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import erfcx, log_ndtr, ndtr

from .exceptions import InputError

LOG_SQRT_PI = 0.5 * np.log(np.pi)
MAX_ORDER = 128


@dataclass(frozen=True)
class GHRule:
    """Nodes and weights for the weight function ``exp(-t^2)``."""

    nodes: np.ndarray
    weights: np.ndarray
    log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "log_weights", np.log(self.weights))

    @property
    def order(self) -> int:
        return int(self.nodes.size)

    def expect(self, fn, mean: float, var: float) -> float:
        """E[fn(x)] for x ~ N(mean, var)."""
        x = mean + np.sqrt(2.0 * var) * self.nodes
        return float(self.weights @ fn(x)) / np.sqrt(np.pi)


@dataclass(frozen=True)
class CavityMoments:
    m_f: float
    v_f: float
    m_g: float = 0.0
    v_g: float = 0.0


@dataclass(frozen=True)
class TiltedMoments:
    log_z: float
    d_mf: float
    d_vf: float
    d_mg: float = 0.0
    d_vg: float = 0.0


@lru_cache(maxsize=None)
def _rule(order: int) -> GHRule:
    t, w = hermgauss(order)
    rule = GHRule(t, w)
    for a in (rule.nodes, rule.weights, rule.log_weights):
        a.setflags(write=False)
    return rule


def gauss_hermite(order: int = 32) -> GHRule:
    if isinstance(order, bool) or int(order) != order or not 1 <= order <= MAX_ORDER:
        raise InputError(f"quadrature order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    return _rule(int(order))


def std_norm_cdf(u):
    return ndtr(u)


def log_std_norm_cdf(u):
    return log_ndtr(u)


SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
INV_SQRT2 = 1.0 / np.sqrt(2.0)


def inv_mills(u):
    """phi(u) / Phi(u) via the scaled complementary error function, which
    stays accurate for arbitrarily negative u (where it tends to -u)."""
    u = np.asarray(u, dtype=float)
    return SQRT_2_OVER_PI / erfcx(-u * INV_SQRT2)


def _check_label(y) -> float:
    if y not in (1, -1, 1.0, -1.0):
        raise InputError(f"labels must be +1 or -1 internally, got {y!r}")
    return float(y)


def tilted_gpc(y, m: float, v: float, noise_var: float) -> TiltedMoments:
    """Closed-form tilted moments of the homoscedastic probit likelihood
    ``Phi(y f / sigma)`` against a cavity ``N(f | m, v)``."""
    y = _check_label(y)
    if v < 0 or noise_var <= 0:
        raise InputError(f"need v >= 0 and noise_var > 0, got v={v}, noise_var={noise_var}")
    s2 = v + noise_var
    s = np.sqrt(s2)
    z = y * m / s
    r = float(inv_mills(z))
    return TiltedMoments(
        log_z=float(log_ndtr(z)),
        d_mf=y * r / s,
        d_vf=-0.5 * z * r / s2,
    )


def tilted_gpcplus(y, cav: CavityMoments, rule: GHRule | None = None) -> TiltedMoments:
    """Tilted moments of the privileged-noise likelihood by one-dimensional
    quadrature over g.

    ``log_z`` is a log-sum-exp over the nodes. The f-derivatives apply the
    derivative of Phi inside the integral. The g-derivatives differentiate
    the node positions ``g = m_g + sqrt(2 v_g) t``, so they are the exact
    derivatives of the computed ``log_z``: ``d/dm_g E[F(g)] = E[F'(g)]`` and
    ``d/dv_g E[F(g)] = E[F'(g) t] / sqrt(2 v_g)``. Below ``v_g = 1e-10`` the
    latter switches to its limit ``E[F''(g)] / 2``. All four are ratios to
    ``Z`` formed with normalized node weights, so nothing underflows.
    """
    y = _check_label(y)
    if rule is None:
        rule = gauss_hermite(32)
    m_f, v_f, m_g, v_g = cav.m_f, cav.v_f, cav.m_g, cav.v_g
    if not v_f >= 0:
        raise InputError(f"cavity variance of f must be non-negative, got {v_f}")
    if not v_g >= 0:
        raise InputError(f"cavity variance of g must be non-negative, got {v_g}")

    g = m_g + np.sqrt(2.0 * v_g) * rule.nodes
    u = np.exp(g)
    s2 = v_f + u
    a = y * m_f / np.sqrt(s2)
    log_phi_cdf = log_ndtr(a)
    lw = rule.log_weights + log_phi_cdf
    top = lw.max()
    e = np.exp(lw - top)
    total = e.sum()
    log_z = float(top + np.log(total) - LOG_SQRT_PI)
    p = e / total  # posterior weight of each node

    r = SQRT_2_OVER_PI / erfcx(-a * INV_SQRT2)
    # a(g) derivatives w.r.t. g
    h = u / s2
    da = -0.5 * a * h

    d_mf = float(p @ (r * y / np.sqrt(s2)))
    d_vf = float(p @ (r * (-0.5 * a / s2)))
    d_mg = float(p @ (r * da))
    if v_g > 1e-10:
        d_vg = float(p @ (r * da * rule.nodes)) / np.sqrt(2.0 * v_g)
    else:
        d2a = -0.5 * da * h - 0.5 * a * h * (v_f / s2)
        d_vg = float(0.5 * (p @ (r * (d2a - a * da * da))))
    return TiltedMoments(log_z, d_mf, d_vf, d_mg, d_vg)


def moment_update(m: float, v: float, d_m: float, d_v: float):
    """Mean and variance of the tilted distribution from the log-Z derivatives.

    Returns ``None`` when the matched variance is not positive.
    """
    beta = d_m * d_m - 2.0 * d_v
    shrink = 1.0 - v * beta
    if not shrink > 0:
        return None
    return m + v * d_m, v * shrink
