"""Expectation propagation for the baseline probit GPC and the
privileged-noise GPC+ model.

The approximate posterior factorizes into independent Gaussians over the
latent values ``f`` (one per training input) and ``g`` (one per privileged
input). Each likelihood term is replaced by a site carrying natural
parameters ``(tau, nu)`` for each block; the posterior of a block is

    Sigma = (K^-1 + diag(tau))^-1,   mu = Sigma nu,

computed as ``Sigma = L B^-1 L^T`` with ``K = L L^T`` and
``B = I + L^T diag(tau) L``. This form stays valid when site precisions are
negative, as happens for the g-block, and fails loudly (B not positive
definite) exactly when the posterior would not be a proper Gaussian.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import blas, solve_triangular

from .exceptions import InputError, NotConvergedError, NumericalError
from .kernels import GaussianPosterior, SEKernelParams, chol_with_jitter, kernel_grads, kernel_matrix
from .quadrature import (
    CavityMoments,
    TiltedMoments,
    gauss_hermite,
    moment_update,
    tilted_gpc,
    tilted_gpcplus,
)

log = logging.getLogger(__name__)

GPC = "gpc"
GPC_PLUS = "gpc+"
VARIANTS = (GPC, GPC_PLUS)


def normalize_variant(variant: str) -> str:
    v = str(variant).lower().replace("_plus", "+").replace("plus", "+")
    if v not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return v


def to_pm1(y) -> np.ndarray:
    """Map labels in {0, 1} (or already in {-1, +1}) to {-1, +1}."""
    y = np.asarray(y, dtype=float).ravel()
    vals = set(np.unique(y).tolist())
    if vals <= {0.0, 1.0}:
        return np.where(y > 0, 1.0, -1.0)
    if vals <= {-1.0, 1.0}:
        return y.copy()
    raise InputError(f"labels must be in {{0, 1}} or {{-1, +1}}, got values {sorted(vals)}")


@dataclass
class EPConfig:
    max_sweeps: int = 200
    tol: float = 1e-4
    damping: float = 0.8
    quadrature_order: int = 32
    min_cavity_var: float = 1e-10
    shuffle: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise InputError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise InputError("damping must lie in (0, 1]")
        if self.max_sweeps < 1:
            raise InputError("max_sweeps must be at least 1")

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class Sites:
    """Site natural parameters, one entry per training point."""

    tau_f: np.ndarray
    nu_f: np.ndarray
    tau_g: np.ndarray | None = None
    nu_g: np.ndarray | None = None
    log_zbar: np.ndarray | None = None

    @classmethod
    def zeros(cls, n: int, with_g: bool) -> "Sites":
        z = lambda: np.zeros(n)  # noqa: E731
        return cls(z(), z(), z() if with_g else None, z() if with_g else None, z())

    def copy(self) -> "Sites":
        c = lambda a: None if a is None else a.copy()  # noqa: E731
        return Sites(c(self.tau_f), c(self.nu_f), c(self.tau_g), c(self.nu_g), c(self.log_zbar))

    def max_abs_diff(self, other: "Sites") -> float:
        pairs = [(self.tau_f, other.tau_f), (self.nu_f, other.nu_f)]
        if self.tau_g is not None:
            pairs += [(self.tau_g, other.tau_g), (self.nu_g, other.nu_g)]
        return max(float(np.max(np.abs(a - b), initial=0.0)) for a, b in pairs)


@dataclass
class EPProblem:
    """Training inputs, labels (+/-1) and hyperparameters of one EP run."""

    X: np.ndarray
    y: np.ndarray
    kf: SEKernelParams
    variant: str = GPC
    Xstar: np.ndarray | None = None
    kg: SEKernelParams | None = None
    noise_var: float = 1.0

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = to_pm1(self.y)
        if self.X.shape[0] != self.y.size:
            raise InputError(f"{self.X.shape[0]} input rows but {self.y.size} labels")
        if self.variant == GPC_PLUS:
            if self.Xstar is None:
                raise InputError("GPC+ needs privileged inputs Xstar")
            self.Xstar = np.asarray(self.Xstar, dtype=float)
            if self.Xstar.ndim == 1:
                self.Xstar = self.Xstar[:, None]
            if self.Xstar.shape[0] != self.y.size:
                raise InputError("Xstar and y have different numbers of rows")
            if self.kg is None:
                self.kg = SEKernelParams()
        elif not self.noise_var > 0:
            raise InputError("noise_var must be positive")

    @property
    def n(self) -> int:
        return self.y.size


class _Block:
    """Prior factor, site naturals and posterior of one latent function."""

    def __init__(self, K: np.ndarray, tau: np.ndarray, nu: np.ndarray, base_jitter=None):
        self.K = K
        self.L, self.jitter = chol_with_jitter(K, base_jitter)
        self.tau = tau
        self.nu = nu
        self.refresh()

    def refresh(self):
        n = self.tau.size
        LtT = self.L.T * self.tau[None, :]
        B = np.eye(n) + LtT @ self.L
        try:
            self.C = np.linalg.cholesky(0.5 * (B + B.T))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("posterior covariance lost positive definiteness") from exc
        W = solve_triangular(self.C, self.L.T, lower=True)
        self.Sigma = W.T @ W
        self.mu = self.Sigma @ self.nu

    def cavity(self, i: int):
        s = self.Sigma[i, i]
        tau_c = 1.0 / s - self.tau[i]
        nu_c = self.mu[i] / s - self.nu[i]
        return tau_c, nu_c

    def rank_one(self, i: int, tau_new: float, nu_new: float) -> bool:
        dt = tau_new - self.tau[i]
        denom = 1.0 + dt * self.Sigma[i, i]
        if not denom > 0:
            return False
        si = self.Sigma[:, i].copy()
        # Sigma is symmetric, so its transpose is the Fortran-ordered view BLAS updates in place
        blas.dger(-dt / denom, si, si, a=self.Sigma.T, overwrite_a=1)
        self.tau[i] = tau_new
        self.nu[i] = nu_new
        self.mu = self.Sigma @ self.nu
        return True

    def log_det_ratio(self) -> float:
        """log|Sigma| - log|K|, i.e. -log|B|."""
        return -2.0 * float(np.sum(np.log(np.diag(self.C))))

    def posterior(self) -> GaussianPosterior:
        return GaussianPosterior(self.mu.copy(), self.Sigma.copy())

    def evidence_matrix(self) -> np.ndarray:
        """d log Z / d K with site parameters held fixed."""
        b = self.nu - self.tau * self.mu
        R = np.diag(self.tau) - self.tau[:, None] * self.Sigma * self.tau[None, :]
        return 0.5 * (np.outer(b, b) - R)


@dataclass
class EPState:
    problem: EPProblem
    sites: Sites
    posterior_f: GaussianPosterior
    posterior_g: GaussianPosterior | None
    log_evidence: float = float("nan")
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)
    _blocks: tuple = field(default=(), repr=False)

    @property
    def block_f(self) -> _Block:
        return self._blocks[0]

    @property
    def block_g(self) -> _Block | None:
        return self._blocks[1] if len(self._blocks) > 1 else None


def _phi1(tau, nu):
    # log normalizer of a 1-D Gaussian in natural form, up to log(2 pi)/2
    return nu * nu / (2.0 * tau) - 0.5 * np.log(tau)


def _tilted(problem: EPProblem, i: int, cav: CavityMoments, rule) -> TiltedMoments:
    if problem.variant == GPC:
        return tilted_gpc(problem.y[i], cav.m_f, cav.v_f, problem.noise_var)
    return tilted_gpcplus(problem.y[i], cav, rule)


def moment_match(tm: TiltedMoments, cav: CavityMoments):
    """Tilted marginal moments from the log-Z derivatives.

    Returns ``((m_f, v_f), (m_g, v_g))``; an entry is ``None`` when the
    matched variance is not positive (the update must be rejected).
    """
    f = moment_update(cav.m_f, cav.v_f, tm.d_mf, tm.d_vf)
    g = moment_update(cav.m_g, cav.v_g, tm.d_mg, tm.d_vg)
    return f, g


def _site_from_tilted(m: float, v: float, d_m: float, d_v: float):
    """Site naturals that reproduce the tilted moments when combined with the
    cavity ``N(m, v)``; algebraically ``1/v_new - 1/v`` and
    ``m_new/v_new - m/v`` without the cancellation."""
    beta = d_m * d_m - 2.0 * d_v
    shrink = 1.0 - v * beta
    if not shrink > 0:
        return None
    return beta / shrink, (d_m + m * beta) / shrink


def _build_blocks(problem: EPProblem, sites: Sites) -> tuple:
    Kf = kernel_matrix(problem.X, problem.kf)
    blocks = [_Block(Kf, sites.tau_f, sites.nu_f, 1e-8 * problem.kf.amplitude)]
    if problem.variant == GPC_PLUS:
        Kg = kernel_matrix(problem.Xstar, problem.kg)
        blocks.append(_Block(Kg, sites.tau_g, sites.nu_g, 1e-8 * problem.kg.amplitude))
    return tuple(blocks)


def init_state(problem: EPProblem, sites: Sites | None = None) -> EPState:
    if sites is None:
        sites = Sites.zeros(problem.n, problem.variant == GPC_PLUS)
    else:
        sites = sites.copy()
        if sites.tau_f.size != problem.n:
            raise InputError("initial sites do not match the number of training points")
        if problem.variant == GPC_PLUS and sites.tau_g is None:
            sites.tau_g, sites.nu_g = np.zeros(problem.n), np.zeros(problem.n)
    blocks = _build_blocks(problem, sites)
    return EPState(
        problem=problem,
        sites=sites,
        posterior_f=blocks[0].posterior(),
        posterior_g=blocks[1].posterior() if len(blocks) > 1 else None,
        _blocks=blocks,
        diagnostics={"skipped_cavity": 0, "rejected_update": 0, "max_delta": []},
    )


def cavity(state: EPState, i: int, min_cavity_var: float = 1e-10):
    """Cavity moments at site ``i``, or ``None`` if the f-cavity (or a
    proper g-cavity) is not available."""
    bf, bg = state.block_f, state.block_g
    tau_c, nu_c = bf.cavity(i)
    if not tau_c > 0 or 1.0 / tau_c < min_cavity_var:
        return None
    m_f, v_f = nu_c / tau_c, 1.0 / tau_c
    if bg is None:
        return CavityMoments(m_f, v_f)
    tg, ng = bg.cavity(i)
    if not tg > 0:
        return None
    return CavityMoments(m_f, v_f, ng / tg, 1.0 / tg)


def _snapshot(state: EPState, **changes) -> EPState:
    bf, bg = state.block_f, state.block_g
    return replace(
        state,
        posterior_f=bf.posterior(),
        posterior_g=None if bg is None else bg.posterior(),
        **changes,
    )


def ep_sweep(state: EPState, config: EPConfig | None = None, order=None) -> EPState:
    """One pass of sequential site updates; returns a new state.

    Sites are visited in ``order`` (default ascending). Each accepted update
    is applied to the posterior by a rank-one correction; the posterior is
    then recomputed from the prior factor and all sites at the end.
    """
    config = config or EPConfig()
    problem = state.problem
    sites = state.sites.copy()
    blocks = _build_blocks(problem, sites)
    work = replace(state, sites=sites, _blocks=blocks, diagnostics=dict(state.diagnostics))
    _sweep_inplace(work, config, order)
    blocks[0].refresh()
    if len(blocks) > 1:
        blocks[1].refresh()
    return _snapshot(work, iterations=state.iterations + 1)


def _sweep_inplace(state: EPState, config: EPConfig, order=None) -> None:
    problem = state.problem
    rule = gauss_hermite(config.quadrature_order) if problem.variant == GPC_PLUS else None
    bf, bg = state.block_f, state.block_g
    sites = state.sites
    d = config.damping
    diag = state.diagnostics
    if order is None:
        order = range(problem.n)
    for i in order:
        cav = cavity(state, i, config.min_cavity_var)
        if cav is None:
            diag["skipped_cavity"] = diag.get("skipped_cavity", 0) + 1
            continue
        tm = _tilted(problem, i, cav, rule)
        new_f = _site_from_tilted(cav.m_f, cav.v_f, tm.d_mf, tm.d_vf)
        lzb = tm.log_z
        if new_f is None:
            diag["rejected_update"] = diag.get("rejected_update", 0) + 1
        else:
            t = d * new_f[0] + (1 - d) * bf.tau[i]
            v = d * new_f[1] + (1 - d) * bf.nu[i]
            if not bf.rank_one(i, t, v):
                diag["rejected_update"] = diag.get("rejected_update", 0) + 1
            tc, nc = 1.0 / cav.v_f, cav.m_f / cav.v_f
            lzb -= _phi1(tc + bf.tau[i], nc + bf.nu[i]) - _phi1(tc, nc)
        if bg is not None:
            if cav.v_g < config.min_cavity_var:
                diag["skipped_cavity"] = diag.get("skipped_cavity", 0) + 1
            else:
                new_g = _site_from_tilted(cav.m_g, cav.v_g, tm.d_mg, tm.d_vg)
                if new_g is None:
                    diag["rejected_update"] = diag.get("rejected_update", 0) + 1
                else:
                    t = d * new_g[0] + (1 - d) * bg.tau[i]
                    v = d * new_g[1] + (1 - d) * bg.nu[i]
                    if not bg.rank_one(i, t, v):
                        diag["rejected_update"] = diag.get("rejected_update", 0) + 1
                tc, nc = 1.0 / cav.v_g, cav.m_g / cav.v_g
                lzb -= _phi1(tc + bg.tau[i], nc + bg.nu[i]) - _phi1(tc, nc)
        sites.log_zbar[i] = lzb


def _evidence(state: EPState, config: EPConfig) -> tuple[float, np.ndarray]:
    """EP approximation of log p(y | X, X*) from the current sites, with
    cavities recomputed from the current posterior. Also returns, for every
    site, the derivative of log Z_n w.r.t. the f-cavity variance (used by the
    noise-variance gradient)."""
    problem = state.problem
    rule = gauss_hermite(config.quadrature_order) if problem.variant == GPC_PLUS else None
    blocks = state._blocks
    total = 0.0
    d_vf = np.zeros(problem.n)
    log_zbar = np.zeros(problem.n)
    for i in range(problem.n):
        terms = []
        for b in blocks:
            s = b.Sigma[i, i]
            tp, np_ = 1.0 / s, b.mu[i] / s
            tc, nc = tp - b.tau[i], np_ - b.nu[i]
            terms.append((tp, np_, tc, nc))
        tc_f, nc_f = terms[0][2], terms[0][3]
        if not tc_f > 0:
            return float("nan"), d_vf
        if len(terms) > 1:
            tc_g, nc_g = terms[1][2], terms[1][3]
            if not tc_g > 0:
                return float("nan"), d_vf
            cav = CavityMoments(nc_f / tc_f, 1.0 / tc_f, nc_g / tc_g, 1.0 / tc_g)
        else:
            cav = CavityMoments(nc_f / tc_f, 1.0 / tc_f)
        tm = _tilted(problem, i, cav, rule)
        d_vf[i] = tm.d_vf
        s_i = tm.log_z
        for tp, np_, tc, nc in terms:
            s_i -= _phi1(tp, np_) - _phi1(tc, nc)
        log_zbar[i] = s_i
        total += s_i
    for b in blocks:
        total += 0.5 * float(b.nu @ b.mu) + 0.5 * b.log_det_ratio()
    state.sites.log_zbar = log_zbar
    return total, d_vf


def run_ep(
    X,
    y,
    kf: SEKernelParams,
    config: EPConfig | None = None,
    variant: str = GPC,
    Xstar=None,
    kg: SEKernelParams | None = None,
    noise_var: float = 1.0,
    init_sites: Sites | None = None,
) -> EPState:
    """Run EP to convergence (or ``max_sweeps``).

    Labels may be given in {0, 1} or {-1, +1}. Non-convergence is reported
    through ``state.converged`` rather than raised. A posterior that loses
    positive definiteness stops the run with ``diagnostics["failed"]`` set.
    """
    problem = EPProblem(X, y, kf, variant, Xstar, kg, noise_var)
    return run_ep_problem(problem, config, init_sites)


def run_ep_problem(problem: EPProblem, config: EPConfig | None = None,
                   init_sites: Sites | None = None) -> EPState:
    config = config or EPConfig()
    state = init_state(problem, init_sites)
    rng = np.random.default_rng(config.seed) if config.shuffle else None
    converged = False
    sweeps = 0
    try:
        for sweeps in range(1, config.max_sweeps + 1):
            before = state.sites.copy()
            order = rng.permutation(problem.n) if rng is not None else None
            _sweep_inplace(state, config, order)
            for b in state._blocks:
                b.refresh()
            delta = state.sites.max_abs_diff(before)
            state.diagnostics["max_delta"].append(delta)
            if not np.isfinite(delta):
                raise NumericalError("site parameters became non-finite")
            if delta < config.tol:
                converged = True
                break
    except NumericalError as exc:
        log.debug("EP failed after %d sweeps: %s", sweeps, exc)
        state.diagnostics["failed"] = str(exc)
        return _snapshot(state, iterations=sweeps, converged=False)
    state.iterations = sweeps
    state.converged = converged
    lz, _ = _evidence(state, config)
    return _snapshot(state, iterations=sweeps, converged=converged, log_evidence=lz)


def log_evidence(state: EPState, config: EPConfig | None = None) -> float:
    """Recompute the EP evidence for the sites stored in ``state``."""
    lz, _ = _evidence(state, config or EPConfig())
    return lz


def evidence_grad(state: EPState, which: str = "f", config: EPConfig | None = None,
                  allow_unconverged: bool = False) -> np.ndarray:
    """Gradient of the log evidence w.r.t. log hyperparameters.

    ``which`` is ``"f"`` or ``"g"`` (returns ``[d/dlog_amplitude,
    d/dlog_scale]`` of that kernel) or ``"noise"`` (returns
    ``[d/dlog_noise_var]`` for the baseline model). Site parameters are
    treated as fixed, which is exact at an EP fixed point.
    """
    if not state.converged and not allow_unconverged:
        raise NotConvergedError(
            f"evidence gradient needs a converged EP state "
            f"(ran {state.iterations} sweeps, last change "
            f"{(state.diagnostics.get('max_delta') or [float('nan')])[-1]:.3g})")
    problem = state.problem
    if which == "f":
        A = state.block_f.evidence_matrix()
        dK = kernel_grads(problem.X, problem.kf)
        return np.array([np.sum(A * dK["log_amplitude"]), np.sum(A * dK["log_scale"])])
    if which == "g":
        if state.block_g is None:
            raise InputError("the baseline model has no g-kernel")
        A = state.block_g.evidence_matrix()
        dK = kernel_grads(problem.Xstar, problem.kg)
        return np.array([np.sum(A * dK["log_amplitude"]), np.sum(A * dK["log_scale"])])
    if which == "noise":
        if problem.variant != GPC:
            raise InputError("noise variance is a parameter of the baseline model only")
        _, d_vf = _evidence(state, config or EPConfig())
        return np.array([problem.noise_var * float(np.sum(d_vf))])
    raise InputError(f"which must be 'f', 'g' or 'noise', got {which!r}")
