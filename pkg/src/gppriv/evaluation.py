"""Experiment protocol and multi-method comparison statistics.

Covers test-error rates, repeated random-split experiments summarized as
mean and standard error, average ranks over tasks, the Friedman omnibus test
and the Nemenyi critical distance, and JSON/CSV reports.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .data import Dataset, SplitSpec, apply, fit_pipeline, split, synth_lupi
from .ep import GPC, GPC_PLUS, normalize_variant
from .exceptions import GPPrivError, InputError
from .model import FitOptions, fit

log = logging.getLogger(__name__)

REPORT_VERSION = 1
DEFAULT_METHODS = ("gpc", "gpc_plus", "svm", "svm_plus")
FIXTURES = {
    "table1": "lupi_attribute_discovery_texts.csv",
    "awa_decaf": "awa_decaf.csv",
    "awa_attributes": "awa_attributes.csv",
}

# Two-tailed Nemenyi critical values q_alpha(k): studentized range quantiles
# with infinite degrees of freedom divided by sqrt(2).
NEMENYI_Q = {
    0.05: {2: 1.960, 3: 2.344, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.948, 8: 3.031, 9: 3.102, 10: 3.164},
    0.10: {2: 1.645, 3: 2.052, 4: 2.291, 5: 2.460, 6: 2.589, 7: 2.693, 8: 2.780, 9: 2.855, 10: 2.920},
}


# -- error rates and repeats ---------------------------------------------------

def error_rate(pred, truth) -> float:
    """Percentage of mismatching labels."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.size == 0 or truth.size == 0:
        raise InputError("error_rate needs at least one label")
    if pred.size != truth.size:
        raise InputError(f"{pred.size} predictions for {truth.size} labels")
    return 100.0 * float(np.count_nonzero(pred != truth)) / pred.size


def mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error (sample std with n - 1, over sqrt(n))."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class TaskSpec:
    """One binary problem to repeat.

    Either ``data`` (a fixed pool that is re-split each repeat) or ``synth``
    (keyword arguments for :func:`synth_lupi`, redrawn each repeat) is given.
    With ``synth`` the pool size is ``n_train + n_test``.
    """

    name: str
    n_train: int
    data: Dataset | None = None
    synth: dict | None = None
    n_test: int | None = None
    methods: tuple[str, ...] = (GPC, GPC_PLUS)
    standardize: bool = True
    pca_k: int | None = None
    pca_domains: tuple[str, ...] = ("x", "xstar")
    fit_options: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if (self.data is None) == (self.synth is None):
            raise InputError("give exactly one of data and synth")
        self.methods = tuple(normalize_variant(m) for m in self.methods)
        if self.synth is not None and self.n_test is None:
            self.n_test = 1000
        if GPC_PLUS in self.methods and self.data is not None and self.data.Xstar is None:
            raise InputError(f"task {self.name!r}: gpc+ needs privileged features")

    def draw(self, seed: int) -> tuple[Dataset, Dataset]:
        if self.synth is not None:
            pool = synth_lupi(self.n_train + self.n_test, seed=seed, **self.synth)
        else:
            pool = self.data
        train, _, test = split(pool, SplitSpec(self.n_train, 0, seed))
        if self.n_test is not None:
            test = test.subset(np.arange(min(self.n_test, test.n)))
        if test.n == 0:
            raise InputError(f"task {self.name!r} leaves no test points")
        return train, test


@dataclass
class RepeatResult:
    """Per-method test errors (%) of every repeat; ``None`` marks a failure."""

    task: str
    methods: list[str]
    seeds: list[int]
    errors: dict[str, list[float | None]]

    def ok(self, method: str) -> np.ndarray:
        return np.array([e for e in self.errors[method] if e is not None], dtype=float)

    def failures(self, method: str) -> int:
        return sum(e is None for e in self.errors[method])

    def summary(self, method: str) -> tuple[float, float]:
        return mean_stderr(self.ok(method))

    def paired_difference(self, a: str, b: str) -> tuple[float, float]:
        """Mean and standard error of ``error[a] - error[b]`` over repeats where
        both methods succeeded."""
        d = [x - y for x, y in zip(self.errors[a], self.errors[b])
             if x is not None and y is not None]
        return mean_stderr(d)

    def to_dict(self) -> dict:
        out = {"task": self.task, "methods": list(self.methods), "seeds": list(self.seeds),
               "errors": {m: list(self.errors[m]) for m in self.methods}, "summary": {}}
        for m in self.methods:
            mu, se = self.summary(m)
            out["summary"][m] = {"mean": _num(mu), "stderr": _num(se),
                                 "n_ok": int(self.ok(m).size), "failures": self.failures(m)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RepeatResult":
        return cls(d["task"], list(d["methods"]), [int(s) for s in d["seeds"]],
                   {m: [None if e is None else float(e) for e in d["errors"][m]] for m in d["methods"]})


def _threads(requested: int | None) -> int:
    if requested is None:
        env = os.environ.get("GPPRIV_THREADS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise InputError(f"GPPRIV_THREADS must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    return max(1, int(requested))


def _one_repeat(task: TaskSpec, seed: int) -> dict[str, float | None]:
    train, test = task.draw(seed)
    recipe = fit_pipeline(train, task.standardize, task.pca_k, task.pca_domains)
    train, test = apply(recipe, train), apply(recipe, test)
    out = {}
    for m in task.methods:
        try:
            model = fit(train, m, task.fit_options)
            out[m] = error_rate(model.predict_label(test.X), test.y)
        except GPPrivError as exc:
            log.warning("task %s, seed %d, %s failed: %s", task.name, seed, m, exc)
            out[m] = None
    return out


def repeat_experiment(task: TaskSpec, n_repeats: int, base_seed: int = 0,
                      threads: int | None = None) -> RepeatResult:
    """Run ``n_repeats`` random splits; repeat ``r`` uses seed ``base_seed + r``.

    A method that fails on a repeat records ``None`` for it; the summary
    excludes those repeats and reports the failure count. Repeats may run in
    parallel threads (``threads``, else ``GPPRIV_THREADS``, else the core
    count); results are merged by repeat index so the output does not depend
    on scheduling.
    """
    if n_repeats < 2:
        raise InputError("n_repeats must be at least 2")
    seeds = [base_seed + r for r in range(n_repeats)]
    workers = min(_threads(threads), n_repeats)
    if workers == 1:
        rows = [_one_repeat(task, s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda s: _one_repeat(task, s), seeds))
    methods = list(task.methods)
    return RepeatResult(task.name, methods, seeds, {m: [row[m] for row in rows] for m in methods})


# -- error tables and ranks ----------------------------------------------------

@dataclass
class ErrorTable:
    """Mean test error (%) per task (row) and method (column)."""

    tasks: list[str]
    methods: list[str]
    errors: np.ndarray
    stderr: np.ndarray | None = None

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float).reshape(len(self.tasks), len(self.methods))
        if self.stderr is not None:
            self.stderr = np.asarray(self.stderr, dtype=float)
            if self.stderr.shape != self.errors.shape:
                raise InputError("stderr must have the same shape as errors")
        if len(set(self.methods)) != len(self.methods):
            raise InputError("duplicate method names")
        if self.errors.size and not np.all((self.errors >= 0) & (self.errors <= 100)):
            raise InputError("errors must lie in [0, 100]")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=0) if self.n_tasks else np.full(len(self.methods), np.nan)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(self.methods)
        if self.stderr is not None:
            cols += [f"{m}_stderr" for m in self.methods]
        w.writerow(["task"] + cols)
        for i, t in enumerate(self.tasks):
            row = [repr(float(v)) for v in self.errors[i]]
            if self.stderr is not None:
                row += [repr(float(v)) for v in self.stderr[i]]
            w.writerow([t] + row)
        return buf.getvalue()

    @classmethod
    def from_results(cls, results: Sequence[RepeatResult]) -> "ErrorTable":
        """Table of mean errors; tasks where some method never succeeded are dropped."""
        if not results:
            return cls([], [], np.zeros((0, 0)))
        methods = list(results[0].methods)
        tasks, E, S = [], [], []
        for r in results:
            if list(r.methods) != methods:
                raise InputError("all results must share the same methods")
            row = [r.summary(m) for m in methods]
            if any(not np.isfinite(mu) for mu, _ in row):
                log.warning("task %s dropped from ranking: a method has no successful repeat", r.task)
                continue
            tasks.append(r.task)
            E.append([mu for mu, _ in row])
            S.append([se for _, se in row])
        return cls(tasks, methods, np.array(E).reshape(len(tasks), len(methods)),
                   np.array(S).reshape(len(tasks), len(methods)))


def _read_table(text: str, source: str) -> ErrorTable:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not rows[0]:
        raise InputError(f"{source}: empty error table")
    head = [h.strip() for h in rows[0]]
    if head[0] != "task":
        raise InputError(f"{source}: first column must be 'task', got {head[0]!r}")
    se_cols = [h for h in head[1:] if h.endswith("_stderr")]
    methods = [h for h in head[1:] if not h.endswith("_stderr")]
    if len(methods) < 1:
        raise InputError(f"{source}: no method columns")
    if se_cols and sorted(se_cols) != sorted(f"{m}_stderr" for m in methods):
        raise InputError(f"{source}: stderr columns must cover every method or none")
    idx = {h: j for j, h in enumerate(head)}
    tasks, E, S = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(head):
            raise InputError(f"{source}:{lineno}: expected {len(head)} fields, got {len(row)}")
        try:
            E.append([float(row[idx[m]]) for m in methods])
            if se_cols:
                S.append([float(row[idx[f"{m}_stderr"]]) for m in methods])
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from None
        tasks.append(row[0].strip())
    shape = (len(tasks), len(methods))
    return ErrorTable(tasks, methods, np.array(E).reshape(shape),
                      np.array(S).reshape(shape) if se_cols else None)


def load_error_table_csv(path) -> ErrorTable:
    """Read a table with header ``task, <method>..., [<method>_stderr...]``."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {p}: {exc}") from exc
    return _read_table(text, str(p))


def load_fixture(name: str) -> ErrorTable:
    """One of the bundled published error tables (see ``FIXTURES``)."""
    if name not in FIXTURES:
        raise InputError(f"unknown fixture {name!r}; available: {sorted(FIXTURES)}")
    text = resources.files("gppriv.fixtures").joinpath(FIXTURES[name]).read_text()
    return _read_table(text, name)


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    """Critical distance ``q_alpha(k) * sqrt(k (k + 1) / (6 N))``."""
    alpha = float(alpha)
    table = next((v for a, v in NEMENYI_Q.items() if math.isclose(a, alpha)), None)
    if table is None or k not in table:
        raise InputError(
            f"no Nemenyi value for k={k}, alpha={alpha}; available alpha "
            f"{sorted(NEMENYI_Q)} with k in {min(NEMENYI_Q[0.05])}..{max(NEMENYI_Q[0.05])}")
    if n < 1:
        raise InputError("need at least one task")
    return table[k] * math.sqrt(k * (k + 1) / (6.0 * n))


def task_ranks(errors, ties: str = "average") -> np.ndarray:
    """Per-task ranks, 1 = lowest error.

    ``ties="average"`` gives tied methods their mid-rank; ``ties="first"``
    breaks ties by column order.
    """
    E = np.atleast_2d(np.asarray(errors, dtype=float))
    if ties not in ("average", "first"):
        raise InputError("ties must be 'average' or 'first'")
    method = "average" if ties == "average" else "ordinal"
    return np.vstack([stats.rankdata(row, method=method) for row in E]) if E.size else E


def friedman(avg_ranks, n: int) -> dict:
    """Friedman chi-square and the Iman-Davenport F statistic from average ranks."""
    R = np.asarray(avg_ranks, dtype=float)
    k = R.size
    chi2 = 12.0 * n / (k * (k + 1)) * (np.sum(R ** 2) - k * (k + 1) ** 2 / 4.0)
    out = {"chi2": float(chi2), "chi2_df": k - 1, "chi2_p": float(stats.chi2.sf(chi2, k - 1))}
    denom = n * (k - 1) - chi2
    df1, df2 = k - 1, (k - 1) * (n - 1)
    if denom > 0 and df2 > 0:
        F = (n - 1) * chi2 / denom
        out.update(f=float(F), f_df=[df1, df2], f_p=float(stats.f.sf(F, df1, df2)))
    else:
        out.update(f=None, f_df=[df1, df2], f_p=None)
    return out


@dataclass
class RankSummary:
    """Average ranks and, when ``alpha`` is set, Friedman statistics, the
    critical distance and pairwise significance flags."""

    methods: list[str]
    average_ranks: list[float]
    n_tasks: int
    ties: str = "average"
    alpha: float | None = None
    cd: float | None = None
    friedman: dict | None = None
    pairs: list[dict] = field(default_factory=list)

    @property
    def best(self) -> str:
        return self.methods[int(np.argmin(self.average_ranks))]

    def rank_of(self, method: str) -> float:
        return self.average_ranks[self.methods.index(method)]

    def significant(self, a: str, b: str) -> bool:
        for p in self.pairs:
            if {p["a"], p["b"]} == {a, b}:
                return p["significant"]
        raise InputError(f"no significance verdict for {a} vs {b}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RankSummary":
        return cls(**d)


def average_ranks(table: ErrorTable, ties: str = "average") -> RankSummary:
    """Mean per-task rank of each method (1 = best)."""
    k = len(table.methods)
    if k < 2:
        raise InputError("need at least two methods to rank")
    if table.n_tasks < 1:
        raise InputError("need at least one task to rank")
    R = task_ranks(table.errors, ties)
    return RankSummary(list(table.methods), [float(v) for v in R.mean(axis=0)], table.n_tasks, ties)


def rank_summary(table: ErrorTable, alpha: float | None = 0.05, ties: str = "average") -> RankSummary:
    """Average ranks plus, unless ``alpha`` is None, the Friedman test and
    Nemenyi verdicts for every method pair."""
    s = average_ranks(table, ties)
    if alpha is None:
        return s
    k, n = len(s.methods), s.n_tasks
    s.alpha = float(alpha)
    s.cd = nemenyi_cd(k, n, alpha)
    s.friedman = friedman(s.average_ranks, n)
    for i in range(k):
        for j in range(i + 1, k):
            gap = abs(s.average_ranks[i] - s.average_ranks[j])
            s.pairs.append({"a": s.methods[i], "b": s.methods[j], "gap": gap,
                            "significant": bool(gap > s.cd)})
    return s


# -- reports -------------------------------------------------------------------

def _num(v):
    return None if v is None or not np.isfinite(v) else float(v)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Report:
    config: dict
    seeds: list[int]
    results: list[dict]
    ranks: dict | None = None
    report_version: int = REPORT_VERSION
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def to_dict(self) -> dict:
        return {"report_version": self.report_version, "config_hash": self.config_hash,
                "config": self.config, "seeds": list(self.seeds),
                "results": self.results, "ranks": self.ranks}

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        if d.get("report_version") != REPORT_VERSION:
            raise InputError(f"unsupported report version {d.get('report_version')!r}")
        return cls(d["config"], list(d["seeds"]), list(d["results"]), d.get("ranks"),
                   d["report_version"], d["config_hash"])


def build_report(results: Sequence[RepeatResult], config: dict, alpha: float | None = 0.05,
                 ties: str = "average") -> Report:
    """Bundle repeat results with rank statistics. Ranks need two or more
    methods and at least one task; otherwise ``ranks`` is None."""
    seeds = sorted({s for r in results for s in r.seeds})
    table = ErrorTable.from_results(results)
    ranks = None
    if table.n_tasks >= 1 and len(table.methods) >= 2:
        ranks = rank_summary(table, alpha, ties).to_dict()
    return Report(json.loads(json.dumps(config, default=str)), seeds,
                  [r.to_dict() for r in results], ranks)


def _csv_rows(report: Report):
    d = report.to_dict()
    yield ("meta", "", "", "report_version", d["report_version"])
    yield ("meta", "", "", "config_hash", d["config_hash"])
    yield ("meta", "", "", "config", d["config"])
    yield ("meta", "", "", "seeds", d["seeds"])
    for r in d["results"]:
        for m in r["methods"]:
            for key, val in r["summary"][m].items():
                yield ("summary", r["task"], m, key, val)
            yield ("errors", r["task"], m, "errors", r["errors"][m])
        yield ("task", r["task"], "", "seeds", r["seeds"])
        yield ("task", r["task"], "", "methods", r["methods"])
    if d["ranks"] is not None:
        for key, val in d["ranks"].items():
            yield ("ranks", "", "", key, val)


def emit_report(report: Report, path=None, format: str = "json") -> str:
    """Serialize ``report`` deterministically; write it to ``path`` if given.

    CSV is long-form: ``section, task, method, field, value`` with values
    JSON-encoded, so :func:`parse_report` restores the report exactly.
    """
    if format == "json":
        text = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    elif format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "task", "method", "field", "value"])
        for sec, task, m, key, val in _csv_rows(report):
            w.writerow([sec, task, m, key, json.dumps(val, sort_keys=True)])
        text = buf.getvalue()
    else:
        raise InputError(f"unknown report format {format!r}; use 'json' or 'csv'")
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_report(text: str, format: str = "json") -> Report:
    if format == "json":
        return Report.from_dict(json.loads(text))
    if format != "csv":
        raise InputError(f"unknown report format {format!r}; use 'json' or 'csv'")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["section", "task", "method", "field", "value"]:
        raise InputError("not a report CSV")
    meta, ranks, tasks = {}, None, {}
    for sec, task, m, key, val in rows[1:]:
        val = json.loads(val)
        if sec == "meta":
            meta[key] = val
        elif sec == "ranks":
            ranks = ranks or {}
            ranks[key] = val
        else:
            t = tasks.setdefault(task, {"task": task, "errors": {}, "summary": {}})
            if sec == "summary":
                t["summary"].setdefault(m, {})[key] = val
            elif sec == "errors":
                t["errors"][m] = val
            elif sec == "task":
                t[key] = val
    results = [{"task": t["task"], "methods": t["methods"], "seeds": t["seeds"],
                "errors": t["errors"], "summary": t["summary"]} for t in tasks.values()]
    return Report.from_dict({**meta, "results": results, "ranks": ranks})
