"""Command-line interface: ``gppriv {train,predict,benchmark,ranks,synth}``.

Runs are driven by a JSON config (``--config``) whose fields can be
overridden with ``--set key=value`` (dotted keys reach into nested
sections, values are parsed as JSON when possible). Logs go to stderr; data
products go only to the declared output paths, except for ``ranks``, which
prints its summary to stdout.

Exit codes: 0 success, 2 invalid input or config, 3 numerical or fitting
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_csv, save_csv, synth_lupi, fit_pipeline, apply
from .ep import GPC_PLUS, EPConfig, normalize_variant
from .evaluation import (
    FIXTURES,
    TaskSpec,
    build_report,
    config_hash,
    emit_report,
    error_rate,
    load_error_table_csv,
    load_fixture,
    rank_summary,
    repeat_experiment,
)
from .exceptions import GPPrivError, InputError
from .model import FitOptions, GPCModel, fit

log = logging.getLogger("gppriv")

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3


@dataclass
class RunConfig:
    """Settings for a run. Every field has a default; see the README for a
    description of each."""

    seed: int = 0
    # data: a CSV file, or a synthetic draw when train_csv is unset
    train_csv: str | None = None
    label_column: str = "label"
    priv_prefix: str = "priv_"
    synth: dict = field(default_factory=lambda: {
        "d": 2, "noise_law": "bimodal:0.1,5.0", "separation": 3.0, "priv_noise": 0.1})
    # preprocessing, fitted on the training split only
    standardize: bool = True
    pca_k: int | None = None
    pca_domains: list = field(default_factory=lambda: ["x", "xstar"])
    # models
    variant: str = "gpc+"
    methods: list = field(default_factory=lambda: ["gpc", "gpc+"])
    fit: dict = field(default_factory=dict)
    ep: dict = field(default_factory=dict)
    # protocol
    n_train: int = 100
    n_test: int | None = 1000
    n_repeats: int = 50
    alpha: float = 0.05
    threads: int | None = None
    # outputs
    model_out: str = "model.json"
    fit_log_out: str | None = None
    report_out: str = "report.json"
    report_format: str = "json"

    def __post_init__(self):
        self.variant = normalize_variant(self.variant)
        self.methods = [normalize_variant(m) for m in self.methods]
        if self.train_csv is not None and not Path(self.train_csv).is_file():
            raise InputError(f"train_csv {self.train_csv!r} does not exist")
        if self.report_format not in ("json", "csv"):
            raise InputError("report_format must be 'json' or 'csv'")
        if self.n_train < 1:
            raise InputError("n_train must be positive")
        self.fit_options()  # validate early

    def fit_options(self) -> FitOptions:
        extra = dict(self.fit)
        unknown = set(extra) - {f.name for f in fields(FitOptions)}
        if unknown:
            raise InputError(f"unknown fit option(s): {sorted(unknown)}")
        extra.pop("ep", None)
        extra.setdefault("seed", self.seed)
        try:
            return FitOptions(**extra, ep=EPConfig(**self.ep))
        except TypeError as exc:
            raise InputError(f"invalid ep/fit settings: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def computation(self) -> dict:
        """Every field that affects results (outputs and thread count excluded)."""
        d = self.to_dict()
        for k in ("model_out", "fit_log_out", "report_out", "report_format", "threads"):
            d.pop(k)
        return d

    def computation_hash(self) -> str:
        return config_hash(self.computation())


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs) -> dict:
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise InputError(f"--set expects key=value, got {item!r}")
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise InputError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise InputError("config must be a JSON object")
    raw = apply_overrides(raw, args.set)
    if args.seed is not None:
        raw["seed"] = args.seed
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise InputError(f"unknown config key(s): {sorted(unknown)}")
    return RunConfig(**raw)


def _training_data(cfg: RunConfig) -> Dataset:
    if cfg.train_csv is not None:
        return load_csv(cfg.train_csv, cfg.label_column, cfg.priv_prefix)
    return synth_lupi(cfg.n_train, seed=cfg.seed, **cfg.synth)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    data = _training_data(cfg)
    if cfg.variant == GPC_PLUS and data.Xstar is None:
        raise InputError(
            f"variant gpc+ needs privileged columns (prefix {cfg.priv_prefix!r}); none found")
    opts = cfg.fit_options()
    recipe = fit_pipeline(data, cfg.standardize, cfg.pca_k, cfg.pca_domains)
    train = apply(recipe, data)
    t0 = time.perf_counter()
    model = fit(train, cfg.variant, opts)
    elapsed = time.perf_counter() - t0
    model.recipe = recipe
    model.input_names = list(data.feature_names)
    train_err = error_rate(model.predict_label(train.X), train.y)
    model.fit_log["training_error"] = train_err
    model.fit_log["config_hash"] = cfg.computation_hash()
    model.save(cfg.model_out)
    log_path = cfg.fit_log_out or f"{cfg.model_out}.log.json"
    _write_json(log_path, {"config": cfg.to_dict(), "config_hash": cfg.computation_hash(),
                           "variant": model.variant, "training_error": train_err,
                           "fit": model.fit_log})
    log.info("trained %s on %d points in %.1fs: log evidence %.4f, converged %s, "
             "training error %.2f%%", model.variant, train.n, elapsed, model.log_evidence,
             model.converged, train_err)
    log.info("wrote %s and %s", cfg.model_out, log_path)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    try:
        model = GPCModel.load(args.model)
    except OSError as exc:
        raise InputError(f"cannot read model {args.model}: {exc}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{args.model} is not a valid model file: {exc}") from None
    data = load_csv(args.input, cfg.label_column, cfg.priv_prefix, require_label=False)
    if data.Xstar is not None:
        warnings.warn(f"ignoring privileged columns {data.priv_names}: they are never used "
                      "for prediction", stacklevel=1)
    if model.input_names is not None and data.n and list(data.feature_names) != model.input_names:
        if len(data.feature_names) != len(model.input_names):
            raise InputError(f"input has features {data.feature_names}, "
                             f"model expects {model.input_names}")
        log.warning("feature names differ from training; using column order")
    X = model.prepare(data.X) if data.n else np.zeros((0, model.d))
    proba = model.predict_proba(X)
    labels = model.predict_label(X)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "proba", "label"])
        for i, (p, lab) in enumerate(zip(proba, labels)):
            w.writerow([i, repr(float(p)), int(lab)])
    if data.y is not None and data.n:
        log.info("error on labelled input: %.2f%%", error_rate(labels, data.y))
    log.info("wrote %d predictions to %s", data.n, args.output)
    return EXIT_OK


def cmd_benchmark(cfg: RunConfig, args) -> int:
    opts = cfg.fit_options()
    common = dict(n_train=cfg.n_train, n_test=cfg.n_test, methods=tuple(cfg.methods),
                  standardize=cfg.standardize, pca_k=cfg.pca_k,
                  pca_domains=tuple(cfg.pca_domains), fit_options=opts)
    if cfg.train_csv is not None:
        data = load_csv(cfg.train_csv, cfg.label_column, cfg.priv_prefix)
        task = TaskSpec(Path(cfg.train_csv).stem, data=data, **common)
    else:
        task = TaskSpec("synth_lupi", synth=dict(cfg.synth), **common)
    t0 = time.perf_counter()
    result = repeat_experiment(task, cfg.n_repeats, cfg.seed, cfg.threads)
    for m in result.methods:
        mu, se = result.summary(m)
        log.info("%s: %s error %.2f +- %.2f (%d failures)", task.name, m, mu, se, result.failures(m))
    if len(result.methods) == 2:
        a, b = result.methods
        d, se = result.paired_difference(a, b)
        log.info("paired difference %s - %s: %.3f +- %.3f", a, b, d, se)
    report = build_report([result], cfg.computation(), cfg.alpha)
    emit_report(report, cfg.report_out, cfg.report_format)
    log.info("benchmark took %.1fs; wrote %s", time.perf_counter() - t0, cfg.report_out)
    return EXIT_OK


def cmd_ranks(cfg: RunConfig, args) -> int:
    if (args.table is None) == (args.fixture is None):
        raise InputError("give exactly one of --table and --fixture")
    table = load_fixture(args.fixture) if args.fixture else load_error_table_csv(args.table)
    alpha = None if args.no_test else args.alpha
    s = rank_summary(table, alpha, args.ties)
    out = sys.stdout
    out.write(f"tasks: {s.n_tasks}  ties: {s.ties}\n")
    mean_err = table.mean_errors()
    for m, r, e in zip(s.methods, s.average_ranks, mean_err):
        out.write(f"{m:>12s}  rank {r:.3f}  mean error {e:.3f}\n")
    out.write(f"best: {s.best}\n")
    if s.cd is not None:
        out.write(f"friedman chi2 {s.friedman['chi2']:.3f} (p={s.friedman['chi2_p']:.3g})\n")
        out.write(f"critical distance (alpha={s.alpha:g}): {s.cd:.4f}\n")
        for p in s.pairs:
            verdict = "significant" if p["significant"] else "not significant"
            out.write(f"{p['a']} vs {p['b']}: gap {p['gap']:.3f} {verdict}\n")
    if args.output:
        _write_json(args.output, {**s.to_dict(), "best": s.best,
                                  "mean_errors": mean_err.tolist()})
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    params = dict(cfg.synth)
    if args.d is not None:
        params["d"] = args.d
    if args.noise_law is not None:
        params["noise_law"] = args.noise_law
    data = synth_lupi(args.n, seed=cfg.seed, **params)
    save_csv(data, args.output, cfg.label_column)
    log.info("wrote %d synthetic rows to %s", data.n, args.output)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, help="base seed (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field; repeatable, dotted keys allowed")

    p = argparse.ArgumentParser(prog="gppriv", parents=[common],
                                description="GP classification with privileged noise information")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="fit a model and save it as JSON")
    t.add_argument("--data", help="training CSV (sets train_csv)")
    t.add_argument("--variant", help="gpc or gpc+")
    t.add_argument("--out", help="model path (sets model_out)")

    pr = sub.add_parser("predict", parents=[common], help="predict with a saved model")
    pr.add_argument("model")
    pr.add_argument("input")
    pr.add_argument("output")

    b = sub.add_parser("benchmark", parents=[common], help="repeated-split comparison")
    b.add_argument("--data", help="CSV pool to resample (sets train_csv)")
    b.add_argument("--repeats", type=int, help="sets n_repeats")
    b.add_argument("--out", help="report path (sets report_out)")

    r = sub.add_parser("ranks", parents=[common], help="average ranks and critical distance")
    r.add_argument("--table", help="error table CSV")
    r.add_argument("--fixture", choices=sorted(FIXTURES), help="bundled published table")
    r.add_argument("--alpha", type=float, default=0.05)
    r.add_argument("--ties", choices=["average", "first"], default="average")
    r.add_argument("--no-test", action="store_true", help="ranks only, no significance verdicts")
    r.add_argument("--output", help="write the summary as JSON")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset as CSV")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--d", type=int)
    s.add_argument("--noise-law")
    s.add_argument("--output", required=True)
    return p


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "benchmark": cmd_benchmark,
            "ranks": cmd_ranks, "synth": cmd_synth}


def _fold_flags(args) -> None:
    sets = list(args.set or [])
    for attr, key in (("data", "train_csv"), ("variant", "variant"), ("out", None),
                      ("repeats", "n_repeats")):
        val = getattr(args, attr, None)
        if val is None:
            continue
        if attr == "out":
            key = "model_out" if args.command == "train" else "report_out"
        sets.append(f"{key}={json.dumps(val)}")
    args.set = sets


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    logging.captureWarnings(True)
    try:
        _fold_flags(args)
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except GPPrivError as exc:
        log.error("%s", exc)
        return EXIT_COMPUTE
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
