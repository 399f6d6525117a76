"""Training (type-II maximum likelihood) and prediction for GPC and GPC+."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr

from .data import Dataset, PreprocRecipe, apply_steps
from .ep import (
    GPC,
    GPC_PLUS,
    EPConfig,
    EPProblem,
    EPState,
    Sites,
    evidence_grad,
    init_state,
    normalize_variant,
    run_ep_problem,
)
from .exceptions import FitError, InputError
from .kernels import SEKernelParams, kernel_matrix, median_sq_dist

log = logging.getLogger(__name__)

MODEL_FORMAT = "gppriv-model"
MODEL_VERSION = 1
_PENALTY = 1e12


@dataclass
class FitOptions:
    max_evals: int = 60
    restarts: int = 3
    amplitude: float = 1.0
    log_scale_bounds: tuple[float, float] | None = None
    log_scale_bounds_g: tuple[float, float] | None = None
    log_noise_bounds: tuple[float, float] = (float(np.log(1e-4)), float(np.log(1e2)))
    seed: int = 0
    ep: EPConfig = field(default_factory=EPConfig)
    test_noise: str = "prior"
    warm_start: bool = True

    def __post_init__(self):
        if isinstance(self.ep, dict):
            self.ep = EPConfig(**self.ep)
        if self.restarts < 1:
            raise InputError("restarts must be at least 1")
        if self.test_noise not in ("prior", "posterior"):
            raise InputError("test_noise must be 'prior' or 'posterior'")
        for b in (self.log_scale_bounds, self.log_scale_bounds_g, self.log_noise_bounds):
            if b is not None and not (np.all(np.isfinite(b)) and b[0] < b[1]):
                raise InputError(f"invalid bounds {b}")

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["ep"] = self.ep.to_dict()
        return d


@dataclass
class GPCModel:
    variant: str
    X: np.ndarray
    y: np.ndarray
    kf: SEKernelParams
    state: EPState
    Xstar: np.ndarray | None = None
    kg: SEKernelParams | None = None
    noise_var: float = 1.0
    test_noise: str = "prior"
    ep_config: EPConfig = field(default_factory=EPConfig)
    recipe: PreprocRecipe | None = None
    fit_log: dict = field(default_factory=dict)
    input_names: list[str] | None = None

    @property
    def converged(self) -> bool:
        return self.state.converged

    @property
    def log_evidence(self) -> float:
        return self.state.log_evidence

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def test_noise_var(self) -> float:
        if self.variant == GPC:
            return self.noise_var
        if self.test_noise == "prior":
            return 1.0
        post = self.state.posterior_g
        return float(np.mean(np.exp(post.mean + 0.5 * np.diag(post.cov))))

    def latent_predictive(self, Xnew) -> tuple[np.ndarray, np.ndarray]:
        """Mean and variance of f at new inputs under the EP posterior."""
        Xnew = np.asarray(Xnew, dtype=float)
        if Xnew.ndim == 1:
            Xnew = Xnew[None, :] if Xnew.size == self.d else Xnew[:, None]
        if Xnew.shape[1] != self.d:
            raise InputError(f"model expects {self.d} features, got {Xnew.shape[1]}")
        if Xnew.shape[0] == 0:
            return np.zeros(0), np.zeros(0)
        b = self.state.block_f
        Ks = kernel_matrix(self.X, self.kf, Xnew)  # N x M
        A = solve_triangular(b.L, Ks, lower=True)
        alpha = cho_solve((b.C, True), b.L.T @ b.nu)
        mean = A.T @ alpha
        CA = solve_triangular(b.C, A, lower=True)
        CT = solve_triangular(b.C, b.L.T @ (b.tau[:, None] * Ks), lower=True)
        var = self.kf.amplitude - np.sum(CA * CT, axis=0)
        return mean, np.maximum(var, 0.0)

    def predict_proba(self, Xnew) -> np.ndarray:
        """P(y = 1) at new inputs. Privileged features are never used here."""
        mean, var = self.latent_predictive(Xnew)
        return ndtr(mean / np.sqrt(var + self.test_noise_var()))

    def predict_label(self, Xnew) -> np.ndarray:
        return labels_from_proba(self.predict_proba(Xnew))

    def prepare(self, Xraw) -> np.ndarray:
        """Apply the stored preprocessing recipe (if any) to raw inputs."""
        Xraw = np.asarray(Xraw, dtype=float)
        if Xraw.ndim == 1:
            Xraw = Xraw[:, None]
        if self.input_names is not None and Xraw.shape[1] != len(self.input_names):
            raise InputError(
                f"model was trained on {len(self.input_names)} features, got {Xraw.shape[1]}")
        if self.recipe is None or Xraw.shape[0] == 0:
            return Xraw if self.recipe is None else np.zeros((0, self.d))
        return apply_steps(self.recipe.x_steps, Xraw)

    # -- serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        s = self.state.sites
        opt = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": self.variant,
            "kernel_f": self.kf.to_dict(),
            "kernel_g": None if self.kg is None else self.kg.to_dict(),
            "noise_var": self.noise_var,
            "test_noise": self.test_noise,
            "ep_config": self.ep_config.to_dict(),
            "X": self.X.tolist(),
            "Xstar": opt(self.Xstar),
            "y": self.y.astype(int).tolist(),
            "sites": {
                "tau_f": s.tau_f.tolist(), "nu_f": s.nu_f.tolist(),
                "tau_g": opt(s.tau_g), "nu_g": opt(s.nu_g),
                "log_zbar": opt(s.log_zbar),
            },
            "ep": {
                "converged": bool(self.state.converged),
                "iterations": int(self.state.iterations),
                "log_evidence": float(self.state.log_evidence),
            },
            "recipe": None if self.recipe is None else self.recipe.to_dict(),
            "recipe_id": None if self.recipe is None else self.recipe.recipe_id,
            "fit_log": self.fit_log,
            "input_names": self.input_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GPCModel":
        if d.get("format") != MODEL_FORMAT:
            raise InputError("not a gppriv model document")
        if d.get("version") != MODEL_VERSION:
            raise InputError(f"unsupported model version {d.get('version')!r}")
        variant = normalize_variant(d["variant"])
        arr = lambda a: None if a is None else np.array(a, dtype=float)  # noqa: E731
        X = np.array(d["X"], dtype=float).reshape(len(d["X"]), -1)
        Xstar = arr(d["Xstar"])
        if Xstar is not None:
            Xstar = Xstar.reshape(len(d["Xstar"]), -1)
        y = np.array(d["y"], dtype=int)
        kf = SEKernelParams.from_dict(d["kernel_f"])
        kg = None if d["kernel_g"] is None else SEKernelParams.from_dict(d["kernel_g"])
        st = d["sites"]
        sites = Sites(arr(st["tau_f"]), arr(st["nu_f"]), arr(st["tau_g"]), arr(st["nu_g"]),
                      arr(st["log_zbar"]))
        problem = EPProblem(X, y, kf, variant, Xstar, kg, float(d["noise_var"]))
        state = init_state(problem, sites)
        state.sites.log_zbar = sites.log_zbar
        state.converged = bool(d["ep"]["converged"])
        state.iterations = int(d["ep"]["iterations"])
        state.log_evidence = float(d["ep"]["log_evidence"])
        recipe = None if d.get("recipe") is None else PreprocRecipe.from_dict(d["recipe"])
        return cls(variant, X, y, kf, state, Xstar, kg, float(d["noise_var"]),
                   d.get("test_noise", "prior"), EPConfig(**d["ep_config"]), recipe,
                   d.get("fit_log", {}), d.get("input_names"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "GPCModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "GPCModel":
        return cls.from_json(Path(path).read_text())


def labels_from_proba(p) -> np.ndarray:
    """Label 1 iff probability >= 0.5 (an exact tie goes to 1)."""
    return (np.asarray(p) >= 0.5).astype(int)


def build_model(data: Dataset, variant: str, kf: SEKernelParams, kg: SEKernelParams | None = None,
                noise_var: float = 1.0, ep: EPConfig | None = None, test_noise: str = "prior",
                init_sites: Sites | None = None) -> GPCModel:
    """Run EP at fixed hyperparameters and wrap the result as a model."""
    variant = normalize_variant(variant)
    ep = ep or EPConfig()
    if data.y is None:
        raise InputError("training data needs labels")
    problem = EPProblem(data.X, data.y, kf, variant,
                        data.Xstar if variant == GPC_PLUS else None, kg, noise_var)
    state = run_ep_problem(problem, ep, init_sites)
    return GPCModel(variant, data.X.copy(), np.asarray(data.y).copy(), kf, state,
                    None if data.Xstar is None or variant == GPC else data.Xstar.copy(),
                    kg if variant == GPC_PLUS else None, noise_var, test_noise, ep)


def _initial_points(data: Dataset, variant: str, opts: FitOptions):
    dbar = median_sq_dist(data.X)
    lb = opts.log_scale_bounds or (float(np.log(1e-3 * dbar)), float(np.log(1e3 * dbar)))
    factors = [1.0, 0.1, 10.0]
    while len(factors) < opts.restarts:
        factors.append(float(10.0 ** np.random.default_rng(opts.seed + len(factors)).uniform(-2, 2)))
    factors = factors[:opts.restarts]
    if variant == GPC:
        bounds = [lb, tuple(opts.log_noise_bounds)]
        starts = [[np.log(f * dbar), 0.0] for f in factors]
    else:
        dstar = median_sq_dist(data.Xstar)
        lbg = opts.log_scale_bounds_g or (float(np.log(1e-3 * dstar)), float(np.log(1e3 * dstar)))
        bounds = [lb, lbg]
        starts = [[np.log(f * dbar), np.log(f * dstar)] for f in factors]
    starts = [np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds]) for s in starts]
    return starts, bounds


def fit(data: Dataset, variant: str = GPC, opts: FitOptions | None = None) -> GPCModel:
    """Fit by maximizing the EP evidence over the kernel scale(s) and, for the
    baseline, the noise variance. The amplitude stays fixed.

    Each restart runs L-BFGS-B with the analytic evidence gradient. A point
    where EP fails or does not converge scores ``-inf``. The best evaluated
    point over all restarts is returned.
    """
    variant = normalize_variant(variant)
    opts = opts or FitOptions()
    if data.y is None:
        raise InputError("training data needs labels")
    if variant == GPC_PLUS and data.Xstar is None:
        raise InputError("GPC+ needs privileged features (Xstar)")
    log_amp = float(np.log(opts.amplitude))
    starts, bounds = _initial_points(data, variant, opts)
    Xstar = data.Xstar if variant == GPC_PLUS else None

    trace = []
    best = {"lz": -np.inf, "state": None, "x": None}

    def unpack(x):
        kf = SEKernelParams(log_amp, float(x[0]))
        if variant == GPC:
            return kf, None, float(np.exp(x[1]))
        return kf, SEKernelParams(log_amp, float(x[1])), 1.0

    for r, x0 in enumerate(starts):
        warm = {"sites": None}

        def objective(x):
            kf, kg, nv = unpack(x)
            problem = EPProblem(data.X, data.y, kf, variant, Xstar, kg, nv)
            state = run_ep_problem(problem, opts.ep, warm["sites"] if opts.warm_start else None)
            lz = state.log_evidence
            ok = state.converged and np.isfinite(lz)
            if not ok and warm["sites"] is not None:
                # retry from scratch before giving the point up
                state = run_ep_problem(problem, opts.ep, None)
                lz = state.log_evidence
                ok = state.converged and np.isfinite(lz)
            trace.append({"restart": r, "x": [float(v) for v in x],
                          "log_evidence": float(lz) if ok else None})
            if not ok:
                return _PENALTY, np.zeros_like(x)
            warm["sites"] = state.sites
            if lz > best["lz"]:
                best.update(lz=lz, state=state, x=np.array(x, dtype=float))
            gf = evidence_grad(state, "f")
            g2 = evidence_grad(state, "noise" if variant == GPC else "g", opts.ep)
            grad = np.array([gf[1], g2[0] if variant == GPC else g2[1]])
            return -lz, -grad

        try:
            minimize(objective, np.asarray(x0, dtype=float), jac=True, method="L-BFGS-B",
                     bounds=bounds, options={"maxfun": opts.max_evals, "maxiter": opts.max_evals})
        except (FloatingPointError, ValueError) as exc:  # pragma: no cover - defensive
            log.warning("restart %d aborted: %s", r, exc)

    if best["state"] is None:
        raise FitError(f"EP failed at every one of {len(trace)} hyperparameter evaluations")
    kf, kg, nv = unpack(best["x"])
    state = best["state"]
    model = GPCModel(variant, data.X.copy(), np.asarray(data.y).copy(), kf, state,
                     None if Xstar is None else Xstar.copy(), kg, nv, opts.test_noise, opts.ep)
    best_so_far = np.maximum.accumulate(
        [t["log_evidence"] if t["log_evidence"] is not None else -np.inf for t in trace])
    model.fit_log = {
        "evaluations": len(trace),
        "trace": trace,
        "best_so_far": [float(v) if np.isfinite(v) else None for v in best_so_far],
        "initial_points": [[float(v) for v in s] for s in starts],
        "bounds": [list(map(float, b)) for b in bounds],
        "best_log_evidence": float(state.log_evidence),
        "converged": bool(state.converged),
        "ep_iterations": int(state.iterations),
    }
    return model
