"""``fddh`` command line: train, encode, update, eval, diagnose, synth."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import tomli

from . import diagnostics, retrieval
from .data import (
    FeatureMatrix, load_labels, load_matrix, load_model, save_matrix, save_model,
)
from .pipeline import fit_pipeline, from_archive, prepare_features, to_archive
from .projector import DEFAULT_GAMMA, DEFAULT_MAX_ROUNDS, fit_offline, fit_online, project_codes
from .trainer import PRESETS, VARIANTS, Hyperparams, train_on_features

log = logging.getLogger("fddh")


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    x1: str = ""
    x2: str = ""
    labels: str = ""
    model: str = ""
    trace: str = ""
    q: int = 32
    mu: float = 1e-2
    theta: float = 1e-3
    delta: float = 1e3
    gamma: float = DEFAULT_GAMMA
    k: int = 500
    m: int = 500
    tol: float = 1e-5
    max_iters: int = 50
    seed: int = 0
    variant: str = "full"

    @classmethod
    def resolve(cls, file_values=None, overrides=None, preset=None):
        """Defaults, then preset, then config file, then command-line flags."""
        values = {}
        file_values = dict(file_values or {})
        overrides = dict(overrides or {})
        file_preset = file_values.pop("preset", None)
        preset = overrides.pop("preset", None) or preset or file_preset
        if preset is not None:
            if preset not in PRESETS:
                raise CliError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            values.update(PRESETS[preset])
        known = {f.name for f in fields(cls)}
        for source in (file_values, overrides):
            for key, value in source.items():
                if value is None:
                    continue
                if key not in known:
                    raise CliError(f"unknown configuration key {key!r}")
                values[key] = value
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self):
        for name in ("q", "k", "m", "max_iters", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise CliError(f"{name} must be an integer, got {value!r}")
        for name in ("mu", "theta", "delta", "gamma", "tol"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise CliError(f"{name} must be a number, got {value!r}")
            setattr(self, name, float(value))
        if self.q < 1 or self.k < 1 or self.m < 2 or self.max_iters < 0:
            raise CliError("need q >= 1, k >= 1, m >= 2 and max_iters >= 0")
        if min(self.mu, self.theta, self.delta) < 0:
            raise CliError("mu, theta and delta must be nonnegative")
        if not self.gamma > 0 or not self.tol > 0:
            raise CliError("gamma and tol must be positive")
        if self.variant not in VARIANTS:
            raise CliError(f"variant must be one of {VARIANTS}")

    def hyperparams(self):
        return Hyperparams(q=self.q, mu=self.mu, theta=self.theta, delta=self.delta,
                           max_iters=self.max_iters, tol=self.tol)

    def dump(self):
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, str):
                lines.append(f"{key} = {_toml_string(value)}")
            elif isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _toml_string(s):
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def read_config(path):
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise CliError(f"cannot parse config {path}: {exc}") from None
    nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise CliError(f"config {path} must be flat key = value pairs; offending keys {nested}")
    return data


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_training_data(cfg):
    for name in ("x1", "x2", "labels"):
        path = getattr(cfg, name)
        if not path:
            raise CliError(f"missing required input {name!r}")
        if not Path(path).exists():
            raise CliError(f"{name} file not found: {path}")
    a1, a2 = load_matrix(cfg.x1), load_matrix(cfg.x2)
    labels = load_labels(cfg.labels)
    n = labels.values.shape[1]
    if a1.shape[1] != n or a2.shape[1] != n:
        raise CliError(
            f"sample counts differ: {cfg.x1} is {a1.shape[0]}x{a1.shape[1]}, "
            f"{cfg.x2} is {a2.shape[0]}x{a2.shape[1]}, {cfg.labels} is "
            f"{labels.values.shape[0]}x{n} (features and labels are column-per-sample)"
        )
    return FeatureMatrix(a1, 1), FeatureMatrix(a2, 2), labels


def _train_config(args):
    file_values = read_config(args.config) if args.config else {}
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    overrides["preset"] = args.preset
    return RunConfig.resolve(file_values, overrides)


def _fit(cfg, callback=None):
    x1, x2, labels = _load_training_data(cfg)
    n = labels.values.shape[1]
    return fit_pipeline(
        x1, x2, labels, cfg.hyperparams(), k=min(cfg.k, n), m=min(cfg.m, n),
        gamma=cfg.gamma, seed=cfg.seed, variant=cfg.variant, callback=callback,
    )


def cmd_train(args):
    cfg = _train_config(args)
    if not cfg.model:
        raise CliError("missing required output 'model'")
    fp = _fit(cfg)
    save_model(to_archive(fp), cfg.model)
    if cfg.trace:
        _write_csv(cfg.trace, ["iteration", "objective"], enumerate(fp.model.objective_trace))
    if args.dump_config:
        Path(args.dump_config).write_text(cfg.dump(), encoding="utf-8")
    log.info("trained %d iterations, final objective %.6g",
             fp.model.iterations, fp.model.objective_trace[-1])


def cmd_encode(args):
    fp = from_archive(load_model(args.model))
    x = load_matrix(args.input)
    codes = fp.encode(args.modality, x)
    save_matrix(codes.values, args.output)


def cmd_update(args):
    archive = load_model(args.model)
    fp = from_archive(archive, require_cache=True)
    x = load_matrix(args.input)
    if x.shape[1] == 0:
        raise CliError("empty batch")
    phi = fp.features(args.modality, x)
    pm, codes, rounds = fit_online(fp.projections[args.modality - 1], phi, args.max_rounds)
    updated = to_archive(fp.with_projection(args.modality, pm))
    # Carry over metadata this version does not interpret.
    for key, value in archive.metadata.items():
        updated.metadata.setdefault(key, value)
    save_model(updated, args.output)
    if args.codes:
        save_matrix(codes, args.codes)
    log.info("online update converged after %d rounds", rounds)


def _parse_k_list(text):
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise CliError("K values must be positive integers")
    return ks


def evaluate_direction(query_codes, db_codes, query_labels, db_labels, ks, cutoff=None, exclude_self=False):
    if query_codes.shape[1] != query_labels.shape[1]:
        raise CliError(f"{query_codes.shape[1]} query codes but {query_labels.shape[1]} query labels")
    if db_codes.shape[1] != db_labels.shape[1]:
        raise CliError(f"{db_codes.shape[1]} database codes but {db_labels.shape[1]} database labels")
    if query_codes.shape[0] != db_codes.shape[0]:
        raise CliError(f"code lengths differ: {query_codes.shape[0]} vs {db_codes.shape[0]}")
    ap = retrieval.per_query_ap(query_codes, db_codes, query_labels, db_labels, cutoff, exclude_self)
    topk = [retrieval.top_k_precision(query_codes, db_codes, query_labels, db_labels, K, exclude_self)
            for K in ks]
    pr = retrieval.pr_curve(query_codes, db_codes, query_labels, db_labels, exclude_self)
    return float(np.mean(ap)) if ap.size else 0.0, ap, topk, pr


def cmd_eval(args):
    ks = _parse_k_list(args.k)
    ql = load_matrix(args.query_labels)
    dl = load_matrix(args.db_labels)
    directions = []
    if args.query_codes_1 and args.db_codes_2:
        directions.append(("1to2", args.query_codes_1, args.db_codes_2))
    if args.query_codes_2 and args.db_codes_1:
        directions.append(("2to1", args.query_codes_2, args.db_codes_1))
    if not directions:
        raise CliError("supply --query-codes-1 with --db-codes-2 and/or --query-codes-2 with --db-codes-1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["direction", "map"] + [f"top{K}" for K in ks]
    if args.timing:
        header.append("runtime_s")
    summary = []
    for name, qpath, dpath in directions:
        start = time.perf_counter()
        qc, dc = load_matrix(qpath), load_matrix(dpath)
        mAP, ap, topk, pr = evaluate_direction(qc, dc, ql, dl, ks, args.map_cutoff, args.exclude_self)
        row = [name, mAP, *topk]
        if args.timing:
            row.append(time.perf_counter() - start)
        summary.append(row)
        _write_csv(out / f"ap_{name}.csv", ["query", "ap"], enumerate(ap.tolist()))
        _write_csv(out / f"pr_{name}.csv", ["radius", "precision", "recall"], pr)
        print(f"{name}: mAP={mAP:.4f} " + " ".join(f"top{K}={v:.4f}" for K, v in zip(ks, topk)))
    _write_csv(out / "summary.csv", header, summary)


def _diagnose_errors(args, out):
    fp = from_archive(load_model(args.model))
    if not args.labels:
        raise CliError("errors mode needs --labels (the training labels)")
    labels = load_labels(args.labels).values
    H = fp.model.H
    if labels.shape[1] != H.shape[1]:
        raise CliError(f"{args.labels} has {labels.shape[1]} columns, model codes have {H.shape[1]}")
    targets = fp.model.Ybar if args.use_dragged else labels
    report = diagnostics.error_terms(fp.model.C, targets, H)
    pairs = diagnostics.sample_pairs(H.shape[1], args.pairs, args.seed or 0)
    result = diagnostics.bilipschitz_check(report, targets, H, pairs)
    edges, c1, c2 = result.histograms(args.bins)
    _write_csv(out / "error_histogram.csv", ["bin_low", "bin_high", "count_eps1", "count_eps2"],
               zip(edges[:-1].tolist(), edges[1:].tolist(), c1.tolist(), c2.tolist()))
    f1, f2 = result.fraction_small()
    _write_csv(out / "error_summary.csv",
               ["pairs", "equal_label_pairs", "pass_rate", "kappa", "frac_eps1_le_0.1", "frac_eps2_le_0.1"],
               [[result.n_pairs, result.n_equal_labels, result.pass_rate, report.kappa, f1, f2]])
    print(f"bi-Lipschitz pass rate {result.pass_rate:.4f}; eps1<=0.1: {f1:.3f}, eps2<=0.1: {f2:.3f}")


def _diagnose_stability(args, out):
    sizes = _parse_k_list(args.sizes)
    first = args.seed or 0
    seeds = tuple(range(first, first + args.seeds))
    gamma = DEFAULT_GAMMA if args.gamma is None else args.gamma
    cfg = diagnostics.StabilityConfig(batch=args.batch, gamma=gamma, modality=args.modality)
    report = diagnostics.stability_experiment(sizes, cfg, seeds)
    rows = [(n, n + cfg.batch, float(p), float(b))
            for n, p, b in zip(report.sizes, report.mean_perturbation, report.bounds.mean(axis=0))]
    _write_csv(out / "stability.csv", ["n", "n_plus_m", "mean_perturbation", "bound"], rows)
    _write_csv(out / "stability_fit.csv", ["slope", "intercept", "excluded_sizes"],
               [[report.slope, report.intercept, " ".join(map(str, report.excluded))]])
    print(f"log-log slope {report.slope:.3f}")


def _diagnose_convergence(args, out):
    cfg = _train_config(args)
    x1, x2, labels = _load_training_data(cfg)
    n = labels.values.shape[1]
    _, _, (phi1, phi2) = prepare_features(
        x1, x2, n, min(cfg.k, n), min(cfg.m, n), cfg.seed, cfg.variant)
    L = labels.values
    nq = min(args.queries, n)
    rows = []

    def record(it, state):
        b1 = project_codes(fit_offline(state.H, phi1, cfg.gamma).P, phi1)
        b2 = project_codes(fit_offline(state.H, phi2, cfg.gamma).P, phi2)
        m12 = retrieval.mean_ap(b1[:, :nq], b2, L[:, :nq], L)
        m21 = retrieval.mean_ap(b2[:, :nq], b1, L[:, :nq], L)
        rows.append((it, state.objective_trace[-1], 0.5 * (m12 + m21)))

    model = train_on_features(cfg.variant, phi1, phi2, L, cfg.hyperparams(), cfg.seed, record)
    rows.insert(0, (0, model.objective_trace[0], float("nan")))
    _write_csv(out / "convergence.csv", ["iteration", "objective", "map"], rows)
    print(f"{model.iterations} iterations, final objective {model.objective_trace[-1]:.6g}")


def cmd_diagnose(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = {"errors": _diagnose_errors, "stability": _diagnose_stability,
             "convergence": _diagnose_convergence}
    if args.mode not in modes:
        raise CliError(f"unknown mode {args.mode!r}")
    modes[args.mode](args, out)


def cmd_synth(args):
    x1, x2, labels = diagnostics.synth_dataset(args.n, args.c, args.d1, args.d2, args.noise, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if args.format == "csv" else ".fdh"
    save_matrix(x1.values, out / f"x1{ext}")
    save_matrix(x2.values, out / f"x2{ext}")
    save_matrix(labels.values, out / f"labels{ext}")


def _add_train_options(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--x1", help="modality-1 features, d1 x n")
    p.add_argument("--x2", help="modality-2 features, d2 x n")
    p.add_argument("--labels", help="zero-one labels, c x n")
    p.add_argument("--model", help="output model archive")
    p.add_argument("--trace", help="objective trace CSV")
    p.add_argument("--q", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--k", type=int, help="anchors per modality")
    p.add_argument("--m", type=int, help="samples for the kernel width")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=VARIANTS)


def build_parser():
    parser = argparse.ArgumentParser(prog="fddh", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn codes and hash functions")
    _add_train_options(p)
    p.add_argument("--dump-config", help="write the effective configuration here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="hash raw features with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--modality", type=int, required=True, choices=(1, 2))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("update", help="fold a streaming batch into a hash function")
    p.add_argument("--model", required=True)
    p.add_argument("--modality", type=int, required=True, choices=(1, 2))
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True, help="updated model archive")
    p.add_argument("--codes", help="write the batch codes here")
    p.add_argument("--max-rounds", type=int, default=DEFAULT_MAX_ROUNDS)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("eval", help="retrieval metrics for code files")
    p.add_argument("--query-codes-1")
    p.add_argument("--query-codes-2")
    p.add_argument("--db-codes-1")
    p.add_argument("--db-codes-2")
    p.add_argument("--query-labels", required=True)
    p.add_argument("--db-labels", required=True)
    p.add_argument("--k", default="50", help="comma-separated top-K list")
    p.add_argument("--map-cutoff", type=int, help="compute mAP@K instead of full-ranking mAP")
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--timing", action="store_true", help="add a runtime column to the summary")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="error, stability and convergence analyses")
    p.add_argument("--mode", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--use-dragged", action="store_true", help="errors: use dragged targets")
    p.add_argument("--pairs", type=int, default=10000)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--sizes", default="256,512,1024,2048,4096,8192")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--modality", type=int, default=1, choices=(1, 2))
    p.add_argument("--queries", type=int, default=200, help="convergence: queries for mAP")
    _add_train_options(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth", help="write a synthetic two-modality dataset")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--c", type=int, default=8)
    p.add_argument("--d1", type=int, default=64)
    p.add_argument("--d2", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("FDDH_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(int(threads)):
                args.func(args)
        else:
            args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"fddh {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
