"""Datasets, CSV ingestion, fit-on-train preprocessing, splits and a
synthetic generator with privileged noise information."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import InputError

DEFAULT_LABEL = "label"
DEFAULT_PRIV_PREFIX = "priv_"


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None
    Xstar: np.ndarray | None = None
    feature_names: list[str] | None = None
    priv_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        n = self.X.shape[0]
        if self.y is not None:
            self.y = np.asarray(self.y).ravel()
            if self.y.size != n:
                raise InputError(f"X has {n} rows but y has {self.y.size} entries")
            vals = set(np.unique(self.y).tolist())
            if not vals <= {0, 1}:
                raise InputError(f"labels must be in {{0, 1}}, got {sorted(vals)}")
            self.y = self.y.astype(int)
        if self.Xstar is not None:
            self.Xstar = np.asarray(self.Xstar, dtype=float)
            if self.Xstar.ndim == 1:
                self.Xstar = self.Xstar[:, None]
            if self.Xstar.shape[0] != n:
                raise InputError(f"X has {n} rows but Xstar has {self.Xstar.shape[0]}")
            if not np.all(np.isfinite(self.Xstar)):
                raise InputError("Xstar contains NaN or Inf")
        if not np.all(np.isfinite(self.X)):
            raise InputError("X contains NaN or Inf")
        if self.feature_names is None:
            self.feature_names = [f"x{j}" for j in range(self.d)]
        if self.Xstar is not None and self.priv_names is None:
            self.priv_names = [f"{DEFAULT_PRIV_PREFIX}{j}" for j in range(self.Xstar.shape[1])]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def d_star(self) -> int:
        return 0 if self.Xstar is None else self.Xstar.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.X[idx],
            None if self.y is None else self.y[idx],
            None if self.Xstar is None else self.Xstar[idx],
            list(self.feature_names),
            None if self.priv_names is None else list(self.priv_names),
        )


# -- CSV ---------------------------------------------------------------------

def load_csv(path, label_column: str = DEFAULT_LABEL, priv_prefix: str = DEFAULT_PRIV_PREFIX,
             require_label: bool = True) -> Dataset:
    """Read a numeric CSV with a header row.

    Columns whose name starts with ``priv_prefix`` become ``Xstar``; the label
    column becomes ``y`` (values 0/1, with -1 read as 0); everything else is
    ``X``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, expected a header row") from None
        if label_column in header:
            label_idx = header.index(label_column)
        elif require_label:
            raise InputError(f"{path}: missing label column {label_column!r}")
        else:
            label_idx = None
        priv_idx = [j for j, h in enumerate(header) if h.startswith(priv_prefix) and j != label_idx]
        x_idx = [j for j in range(len(header)) if j != label_idx and j not in priv_idx]
        rows = []
        labels = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}, line {lineno}: expected {len(header)} fields, found {len(row)}")
            vals = []
            for j, cell in enumerate(row):
                if j == label_idx:
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}, line {lineno}, column {header[j]!r}: "
                        f"non-numeric value {cell!r}") from None
            rows.append(vals)
            if label_idx is not None:
                cell = row[label_idx].strip()
                try:
                    lab = float(cell)
                except ValueError:
                    lab = math.nan
                if lab not in (0.0, 1.0, -1.0):
                    raise InputError(
                        f"{path}, line {lineno}, column {label_column!r}: "
                        f"label must be 0 or 1, got {cell!r}")
                labels.append(1 if lab == 1.0 else 0)
    order = [j for j in range(len(header)) if j != label_idx]
    pos = {j: k for k, j in enumerate(order)}
    M = np.array(rows, dtype=float).reshape(len(rows), len(order))
    X = M[:, [pos[j] for j in x_idx]]
    Xstar = M[:, [pos[j] for j in priv_idx]] if priv_idx else None
    return Dataset(
        X,
        np.array(labels, dtype=int) if label_idx is not None else None,
        Xstar,
        [header[j] for j in x_idx],
        [header[j] for j in priv_idx] if priv_idx else None,
    )


def save_csv(data: Dataset, path, label_column: str = DEFAULT_LABEL) -> None:
    """Write ``data`` so that ``load_csv`` reproduces it bit for bit."""
    header = list(data.feature_names)
    if data.Xstar is not None:
        header += list(data.priv_names)
    if data.y is not None:
        header.append(label_column)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.X[i]]
            if data.Xstar is not None:
                row += [repr(float(v)) for v in data.Xstar[i]]
            if data.y is not None:
                row.append(str(int(data.y[i])))
            w.writerow(row)


# -- preprocessing ---------------------------------------------------------------

@dataclass
class Standardize:
    mean: np.ndarray
    std: np.ndarray
    keep: np.ndarray
    dropped: list[int] = field(default_factory=list)
    kind: str = "standardize"

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != self.keep.size + len(self.dropped):
            raise InputError(
                f"recipe expects {self.keep.size + len(self.dropped)} features, got {X.shape[1]}")
        return (X[:, self.keep] - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean.tolist(), "std": self.std.tolist(),
                "keep": self.keep.tolist(), "dropped": list(self.dropped)}


@dataclass
class PCAStep:
    mean: np.ndarray
    components: np.ndarray  # d x k, columns ordered by decreasing variance
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    kind: str = "pca"

    @property
    def k(self) -> int:
        return self.components.shape[1]

    def apply(self, X: np.ndarray) -> np.ndarray:
        if X.shape[1] != self.components.shape[0]:
            raise InputError(f"recipe expects {self.components.shape[0]} features, got {X.shape[1]}")
        return (X - self.mean) @ self.components

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        return Z @ self.components.T + self.mean

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": self.mean.tolist(),
                "components": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist(),
                "explained_variance_ratio": self.explained_variance_ratio.tolist()}


def _step_from_dict(d: dict):
    if d["kind"] == "standardize":
        return Standardize(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float),
                           np.array(d["keep"], dtype=int), list(d["dropped"]))
    if d["kind"] == "pca":
        comps = np.array(d["components"], dtype=float)
        return PCAStep(np.array(d["mean"], dtype=float), comps.reshape(len(d["components"]), -1),
                       np.array(d["explained_variance"], dtype=float),
                       np.array(d["explained_variance_ratio"], dtype=float))
    raise InputError(f"unknown preprocessing step {d['kind']!r}")


@dataclass
class PreprocRecipe:
    """Ordered preprocessing steps per domain, fitted on a training split."""

    x_steps: list = field(default_factory=list)
    xstar_steps: list = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __add__(self, other: "PreprocRecipe") -> "PreprocRecipe":
        return PreprocRecipe(self.x_steps + other.x_steps, self.xstar_steps + other.xstar_steps,
                             self.warnings + other.warnings)

    @property
    def order(self) -> dict[str, list[str]]:
        return {"x": [s.kind for s in self.x_steps], "xstar": [s.kind for s in self.xstar_steps]}

    def to_dict(self) -> dict:
        return {"x": [s.to_dict() for s in self.x_steps],
                "xstar": [s.to_dict() for s in self.xstar_steps],
                "order": self.order, "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocRecipe":
        return cls([_step_from_dict(s) for s in d["x"]],
                   [_step_from_dict(s) for s in d["xstar"]], list(d.get("warnings", [])))

    @property
    def recipe_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _fit_standardize(X: np.ndarray, names: Sequence[str], domain: str):
    mean = X.mean(axis=0)
    std = X.std(axis=0)  # population (1/N)
    tiny = 1e-12 * np.maximum(1.0, np.abs(mean))
    keep = np.flatnonzero(std > tiny)
    dropped = [int(j) for j in np.flatnonzero(std <= tiny)]
    msgs = []
    if dropped:
        msg = f"{domain}: dropped zero-variance features {[names[j] for j in dropped]}"
        warnings.warn(msg, stacklevel=3)
        msgs.append(msg)
    return Standardize(mean[keep], std[keep], keep, dropped), msgs


def fit_standardizer(train: Dataset) -> PreprocRecipe:
    if train.n < 1:
        raise InputError("cannot fit a standardizer on an empty training split")
    sx, wx = _fit_standardize(train.X, train.feature_names, "x")
    recipe = PreprocRecipe([sx], [], wx)
    if train.Xstar is not None:
        ss, ws = _fit_standardize(train.Xstar, train.priv_names, "xstar")
        recipe.xstar_steps.append(ss)
        recipe.warnings += ws
    return recipe


def _fit_pca(X: np.ndarray, k: int) -> PCAStep:
    n, d = X.shape
    if not 1 <= k <= min(n - 1, d):
        raise InputError(f"PCA needs 1 <= k <= min(N-1, d) = {min(n - 1, d)}, got k={k}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / n
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    idx = np.argsort(evals)[::-1]
    evals = np.clip(evals[idx], 0.0, None)
    evecs = evecs[:, idx]
    # deterministic sign: largest-magnitude entry of each component positive
    big = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[big, np.arange(d)])
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    total = evals.sum()
    ratio = evals / total if total > 0 else np.zeros_like(evals)
    return PCAStep(mean, evecs[:, :k].copy(), evals[:k].copy(), ratio[:k].copy())


def fit_pca(train: Dataset, k: int, domains: Sequence[str] = ("x", "xstar")) -> PreprocRecipe:
    recipe = PreprocRecipe()
    if "x" in domains:
        recipe.x_steps.append(_fit_pca(train.X, k))
    if "xstar" in domains and train.Xstar is not None:
        recipe.xstar_steps.append(_fit_pca(train.Xstar, k))
    return recipe


def fit_pipeline(train: Dataset, standardize: bool = True, pca_k: int | None = None,
                 pca_domains: Sequence[str] = ("x", "xstar")) -> PreprocRecipe:
    """Standardize, project onto the top ``pca_k`` components, re-standardize.

    PCA is skipped for a domain that already has at most ``pca_k`` features.
    """
    recipe = PreprocRecipe()
    cur = train
    if standardize:
        recipe = fit_standardizer(cur)
        cur = apply(recipe, cur)
    if pca_k:
        domains = [dom for dom in pca_domains
                   if (cur.d if dom == "x" else cur.d_star) > pca_k]
        if domains:
            step = fit_pca(cur, pca_k, domains)
            cur = apply(step, cur)
            recipe = recipe + step
            if standardize:
                again = fit_standardizer(cur)
                if "x" not in domains:
                    again.x_steps = []
                if "xstar" not in domains:
                    again.xstar_steps = []
                recipe = recipe + again
    return recipe


def apply_steps(steps, X) -> np.ndarray:
    """Run a sequence of fitted steps on a raw feature matrix."""
    for s in steps:
        X = s.apply(X)
    return X


def apply(recipe: PreprocRecipe, data: Dataset) -> Dataset:
    """Transform a split with a fitted recipe; labels pass through untouched."""
    X = apply_steps(recipe.x_steps, data.X)
    names = _names_after(recipe.x_steps, data.feature_names, "x")
    Xstar, pnames = data.Xstar, data.priv_names
    if Xstar is not None:
        Xstar = apply_steps(recipe.xstar_steps, Xstar)
        pnames = _names_after(recipe.xstar_steps, data.priv_names, DEFAULT_PRIV_PREFIX)
    return Dataset(X, data.y, Xstar, names, pnames)


def _names_after(steps, names, prefix):
    names = list(names)
    for s in steps:
        if isinstance(s, Standardize):
            names = [names[j] for j in s.keep]
        else:
            names = [f"{prefix}pc{j}" for j in range(s.k)]
    return names


# -- splits --------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int = 0
    seed: int = 0


def split_indices(n: int, spec: SplitSpec):
    if spec.n_train < 1 or spec.n_val < 0:
        raise InputError("need n_train >= 1 and n_val >= 0")
    if spec.n_train + spec.n_val > n:
        raise InputError(
            f"cannot take {spec.n_train} train + {spec.n_val} validation rows from {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return perm[:a], perm[a:b], perm[b:]


def split(data: Dataset, spec: SplitSpec):
    """Seeded shuffle, then partition into (train, validation, test)."""
    tr, va, te = split_indices(data.n, spec)
    return data.subset(tr), data.subset(va), data.subset(te)


# -- synthetic data with privileged noise information --------------------------

def parse_noise_law(law) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Build a sampler of per-sample noise scales.

    Accepts a number (constant), a sequence (uniform choice among its values),
    a string ``"const:a"``, ``"bimodal:a,b"``, ``"choice:a,b,..."`` or
    ``"uniform:a,b"``, or a callable ``(rng, n) -> scales``.
    """
    if callable(law):
        return law
    if isinstance(law, (int, float)):
        c = float(law)
        return lambda rng, n: np.full(n, c)
    if isinstance(law, str):
        name, _, arg = law.partition(":")
        vals = [float(v) for v in arg.split(",") if v.strip()]
        if name == "const" and len(vals) == 1:
            return parse_noise_law(vals[0])
        if name in ("bimodal", "choice") and vals:
            return parse_noise_law(vals)
        if name == "uniform" and len(vals) == 2:
            lo, hi = vals
            return lambda rng, n: rng.uniform(lo, hi, size=n)
        raise InputError(f"cannot parse noise law {law!r}")
    vals = np.asarray(list(law), dtype=float)
    if vals.size == 0 or np.any(vals < 0):
        raise InputError("noise scales must be non-negative")
    return lambda rng, n: vals[rng.integers(0, vals.size, size=n)]


def synth_lupi(n: int, d: int = 2, noise_law="bimodal:0.1,5.0", seed: int = 0,
               separation: float = 3.0, priv_noise: float = 0.1,
               return_latent: bool = False):
    """Two-cluster data whose labels are corrupted by per-sample noise.

    Each point gets a noise scale ``s`` from ``noise_law``; its label is
    ``[h(x) + s * eps >= 0]`` where ``h`` is the clean linear decision value.
    The privileged feature is ``log s`` plus a little observation noise, so it
    tells easy samples from hard ones but says nothing about the class.
    """
    if n < 2:
        raise InputError("need at least two samples")
    if d < 1:
        raise InputError("need at least one feature")
    rng = np.random.default_rng(seed)
    sampler = parse_noise_law(noise_law)
    w = np.ones(d) / np.sqrt(d)
    cls = rng.integers(0, 2, size=n)
    X = rng.normal(size=(n, d)) + np.outer((2 * cls - 1) * separation / 2.0, w)
    h = X @ w
    s = np.asarray(sampler(rng, n), dtype=float)
    if s.shape != (n,) or np.any(s < 0):
        raise InputError("noise law must return n non-negative scales")
    eps = rng.normal(size=n)
    y = (h + s * eps >= 0).astype(int)
    xstar = np.log(np.maximum(s, 1e-3)) + priv_noise * rng.normal(size=n)
    data = Dataset(X, y, xstar[:, None])
    if return_latent:
        return data, {"h": h, "s": s, "clean": (h >= 0).astype(int)}
    return data
