"""``isowatt`` command line driver.

Exit codes: 0 success, 1 usage error, 2 data error. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from . import evaluation, pipeline, regressors, synthgen, telemetry
from .errors import DataError, StoreIOError
from .extractor import to_rates
from .isolator import DEFAULT_RHO_THRESHOLD, IsolationConfig, Method
from .telemetry import USAGE_PRODUCERS

log = logging.getLogger("isowatt")

DEFAULTS = {
    "approaches": "linear",
    "method": "proposed",
    "rho_threshold": DEFAULT_RHO_THRESHOLD,
    "seed": 42,
    "format": "csv",
    "reference": "auto",
    "kind": "container",
    "duration": 900,
    "threshold": DEFAULT_RHO_THRESHOLD,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add(p, *names, **kw):
    kw.setdefault("default", None)
    p.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isowatt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, *flags):
        _add(p, "--config", help="JSON file supplying any flag; explicit flags win")
        for flag in flags:
            {
                "data": lambda: _add(p, "--data", help="dataset directory, telemetry file, or suite directory"),
                "store": lambda: _add(p, "--store", help="model store directory"),
                "producer": lambda: _add(p, "--producer", choices=[x.value for x in USAGE_PRODUCERS]),
                "approaches": lambda: _add(p, "--approaches", help=f"comma list of {','.join(regressors.APPROACHES)}"),
                "method": lambda: _add(p, "--method", help="proposed, profiling, heuristic_min, none (or all)"),
                "rho": lambda: _add(p, "--rho-threshold", type=float),
                "profile": lambda: _add(p, "--profile-watts", type=float),
                "seed": lambda: _add(p, "--seed", type=int),
                "out": lambda: _add(p, "--out"),
            }[flag]()

    p = sub.add_parser("synth", help="generate the 9-dataset synthetic grid")
    common(p, "seed", "out")
    _add(p, "--duration", type=int)

    p = sub.add_parser("ingest", help="validate a telemetry file and summarize it")
    common(p, "data", "out")
    _add(p, "--format", choices=["csv", "jsonl"])

    p = sub.add_parser("train", help="run the training pipeline on one dataset")
    common(p, "data", "store", "producer", "approaches", "method", "rho", "profile", "seed")
    _add(p, "--background", help="comma list of background container ids")
    _add(p, "--tag", help="dataset tag (default: dataset directory name)")
    _add(p, "--checkpoint", help="tag of a previous run to continue incrementally")

    p = sub.add_parser("isolate", help="compute workload power labels for one dataset")
    common(p, "data", "producer", "approaches", "method", "rho", "profile", "seed", "out")
    _add(p, "--background", help="comma list of background container ids")

    p = sub.add_parser("eval", help="evaluation reports")
    esub = p.add_subparsers(dest="eval_command", parser_class=_Parser)
    q = esub.add_parser("cross", help="cross-dataset validation matrix")
    common(q, "store", "data", "producer", "method", "out")
    _add(q, "--approach", help="one approach; default: every trained approach plus their minimum")
    _add(q, "--reference", choices=["auto", "truth", "isolated"])
    q.add_argument("--no-plot", action="store_true")
    q = esub.add_parser("table2", help="minimum power difference and dynamic background power")
    common(q, "store", "data", "producer", "out")
    _add(q, "--approach")
    q = esub.add_parser("goodness", help="share of datasets with high isolation goodness")
    common(q, "store", "data", "producer")
    _add(q, "--threshold", type=float)

    p = sub.add_parser("report", help="all evaluation outputs for every method in the store")
    common(p, "store", "data", "producer", "out")
    _add(p, "--reference", choices=["auto", "truth", "isolated"])
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("select", help="best stored model id")
    common(p, "store", "producer")
    _add(p, "--kind", choices=list(regressors.KINDS))
    _add(p, "--method")
    _add(p, "--approach")
    return parser


def _merge_config(args) -> None:
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in config.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise UsageError(f"config key {key!r} is not a flag of this command")
            if getattr(args, dest) is None:
                if isinstance(value, list):
                    value = ",".join(str(v) for v in value)
                setattr(args, dest, value)
    for key, value in DEFAULTS.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)


def _infer_producer(args) -> None:
    """Fill ``--producer`` from the store's run records when only one producer was trained."""
    if args.producer is not None or args.store is None:
        return
    root = os.path.join(args.store, pipeline.RUNS_DIR)
    found = sorted(os.listdir(root)) if os.path.isdir(root) else []
    if len(found) == 1:
        args.producer = found[0]
    elif found:
        raise UsageError(f"store holds runs for producers {found}; pass --producer")


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _approaches(args) -> list[str]:
    names = [a.strip() for a in str(args.approaches).split(",") if a.strip()]
    bad = [a for a in names if a not in regressors.APPROACHES]
    if bad or not names:
        raise UsageError(f"unknown approach(es) {bad}; choose from {','.join(regressors.APPROACHES)}")
    return names


def _methods(value) -> list[Method]:
    if value == "all":
        return list(Method)
    try:
        return [Method(v.strip()) for v in str(value).split(",")]
    except ValueError:
        raise UsageError(f"unknown method {value!r}") from None


# -- dataset discovery


def _telemetry_file(path):
    if os.path.isfile(path):
        return path, ("jsonl" if path.endswith((".jsonl", ".json")) else "csv")
    for name, fmt in (("telemetry.csv", "csv"), ("telemetry.jsonl", "jsonl")):
        candidate = os.path.join(path, name)
        if os.path.isfile(candidate):
            return candidate, fmt
    return None, None


def load_dataset(path, background=None):
    """``(tag, frame, truth)`` for a dataset directory or telemetry file."""
    fpath, fmt = _telemetry_file(path)
    if fpath is None:
        raise DataError(f"no telemetry.csv or telemetry.jsonl under {path}")
    directory = path if os.path.isdir(path) else os.path.dirname(path) or "."
    tag = os.path.basename(os.path.normpath(directory))
    frame = telemetry.ingest(fpath, fmt)
    truth = synthgen.read_ground_truth(directory)
    ids = None
    if background is not None:
        ids = [b for b in background.split(",") if b]
    elif truth is not None:
        ids = truth.background_ids
    if ids:
        frame = telemetry.mark_background(frame, ids)
    return tag, frame, truth


def discover(path) -> list[str]:
    if _telemetry_file(path)[0] is not None:
        return [path]
    if not os.path.isdir(path):
        raise DataError(f"no dataset at {path}")
    found = sorted(
        os.path.join(path, d) for d in os.listdir(path)
        if os.path.isdir(os.path.join(path, d)) and _telemetry_file(os.path.join(path, d))[0]
    )
    if not found:
        raise DataError(f"no dataset directories under {path}")
    return found


def _profile(args, truth):
    if getattr(args, "profile_watts", None) is not None:
        return args.profile_watts
    return None if truth is None else truth.profile_background_watts


# -- commands


def cmd_synth(args):
    _need(args, "out")
    suite = synthgen.grid(args.out, seed=args.seed, duration=args.duration)
    for tag, frame, _ in suite:
        log.info("wrote %s (%d points)", os.path.join(args.out, tag), frame.n)
    print(json.dumps({"datasets": [t for t, _, _ in suite], "out": args.out}))


def cmd_ingest(args):
    _need(args, "data")
    path = args.data
    if os.path.isdir(path):
        path, fmt = _telemetry_file(path)
        if path is None:
            raise DataError(f"no telemetry file under {args.data}")
    else:
        fmt = args.format
    frame = telemetry.ingest(path, fmt)
    summary = {
        "path": path,
        "n": frame.n,
        "start": frame.start,
        "interval": frame.interval,
        "containers": sorted(frame.containers),
        "producers": sorted(p.value for p in frame.producers),
        "series": len(frame.series),
    }
    if args.out:
        telemetry.write(frame, args.out)
        summary["written"] = args.out
    print(json.dumps(summary, sort_keys=True))


def _cfg(args, truth):
    return IsolationConfig(rho_threshold=args.rho_threshold, profile_background_watts=_profile(args, truth))


def cmd_train(args):
    _need(args, "data", "store", "producer")
    tag, frame, truth = load_dataset(args.data, args.background)
    tag = args.tag or tag
    cfg = _cfg(args, truth)
    runs = []
    for method in _methods(args.method):
        if args.checkpoint:
            prev = pipeline.load_run_record(args.store, args.producer, method, args.checkpoint)
            r = pipeline.run_online(prev, frame, cfg, args.store, dataset_tag=tag, seed=args.seed)
        else:
            r = pipeline.run(frame, args.producer, cfg, _approaches(args), args.store, method=method,
                             dataset_tag=tag, seed=args.seed)
        log.info("%s/%s: dε=%s", tag, method.value, r.container_errors)
        runs.append(r.to_dict())
    print(json.dumps(runs[0] if len(runs) == 1 else runs, sort_keys=True))


def cmd_isolate(args):
    _need(args, "data", "producer")
    tag, frame, truth = load_dataset(args.data, args.background)
    (method,) = _methods(args.method)
    U, x, result, _ = pipeline.isolate(frame, args.producer, method, _cfg(args, truth), _approaches(args),
                                       seed=args.seed, dataset_tag=tag)
    if args.out:
        ts = to_rates(frame).timestamps[list(U.cleaning.kept_rows)]
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "node_watts", "label_watts", "raw_label_watts"])
            for row in zip(ts, U.labels, result.labels, result.raw_labels):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    print(result.to_json())


def _load_suite(args, method):
    """Frames, truths and run records of every dataset under ``--data``."""
    frames, truths, runs = [], [], []
    for path in discover(args.data):
        tag, frame, truth = load_dataset(path)
        runs.append(pipeline.load_run_record(args.store, args.producer, method, tag))
        frames.append(frame)
        truths.append(truth)
    return frames, truths, runs


def _references(args, frames, truths, suite_runs):
    mode = args.reference
    have_truth = all(t is not None for t in truths)
    if mode == "truth" and not have_truth:
        raise DataError("--reference truth needs ground_truth.json for every dataset")
    if mode == "truth" or (mode == "auto" and have_truth):
        return [t.workload_watts for t in truths]
    proposed = suite_runs(Method.PROPOSED)[2]
    return [r.isolation.labels for r in proposed]


def _cross(args, methods, approach=None):
    cache = {}

    def suite(method):
        if method not in cache:
            cache[method] = _load_suite(args, method)
        return cache[method]

    results = []
    for method in methods:
        frames, truths, runs = suite(method)
        refs = _references(args, frames, truths, suite)
        profiles = [_profile(args, t) for t in truths]
        profiles = profiles if all(p is not None for p in profiles) else None
        approaches = [approach] if approach else sorted(set.intersection(*(set(r.container_models) for r in runs)))
        per = [
            evaluation.cross_validate(runs, frames, method, a, store=args.store, references=refs,
                                      profiles=profiles)
            for a in approaches
        ]
        results.extend(per)
        if not approach and len(per) > 1:
            results.append(evaluation.min_over_approaches(per))
    return results, cache


def cmd_eval(args):
    if args.eval_command is None:
        raise UsageError("eval needs a subcommand: cross, table2 or goodness")
    _infer_producer(args)
    _need(args, "store", "data", "producer")
    if args.eval_command == "cross":
        _need(args, "out")
        cross, _ = _cross(args, _methods(args.method), args.approach)
        report = evaluation.EvaluationReport(datasets=cross[0].datasets, cross=cross)
        for path in evaluation.write_report(report, args.out, plot=not args.no_plot):
            log.info("wrote %s", path)
        print(json.dumps(report.avg_ce, sort_keys=True))
    elif args.eval_command == "table2":
        _need(args, "out")
        rows = _table2(args)
        report = evaluation.EvaluationReport(datasets=[r.dataset for r in rows], table2=rows)
        evaluation.write_report(report, args.out)
        sys.stdout.write(evaluation.table2_csv(rows))
    else:
        print(json.dumps(_goodness(args, args.threshold), sort_keys=True))


def _table2(args):
    frames, truths, runs = _load_suite(args, Method.PROPOSED)
    profiles = []
    for t in truths:
        p_profile = _profile(args, t)
        profiles.append((None if t is None else t.idle_watts, p_profile))
    return evaluation.table2_report(frames, runs, profiles, store=args.store,
                                    approach=getattr(args, "approach", None))


def _goodness(args, threshold):
    out = {}
    for method in Method:
        try:
            _, _, runs = _load_suite(args, method)
        except StoreIOError:
            continue
        out[method.value] = evaluation.goodness_fraction([r.isolation for r in runs], threshold)
    if not out:
        raise DataError("no run records found in the store")
    return out


def cmd_report(args):
    _infer_producer(args)
    _need(args, "store", "data", "producer", "out")
    methods = []
    tags = [os.path.basename(os.path.normpath(p)) for p in discover(args.data)]
    for method in Method:
        if all(os.path.exists(pipeline.run_path(args.store, args.producer, method, t)) for t in tags):
            methods.append(method)
    if not methods:
        raise DataError("no complete set of run records for these datasets")
    cross, _ = _cross(args, methods)
    table2 = _table2(args) if Method.PROPOSED in methods else []
    report = evaluation.EvaluationReport(
        datasets=cross[0].datasets, cross=cross, table2=table2,
        goodness=_goodness(args, DEFAULT_RHO_THRESHOLD),
    )
    for path in evaluation.write_report(report, args.out, plot=not args.no_plot):
        log.info("wrote %s", path)
    print(json.dumps(report.avg_ce, sort_keys=True))


def cmd_select(args):
    _need(args, "store", "producer")
    method = None if args.method is None else _methods(args.method)[0]
    print(pipeline.select_best(args.store, args.producer, args.kind, method=method, approach=args.approach))


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "isolate": cmd_isolate,
    "eval": cmd_eval,
    "report": cmd_report,
    "select": cmd_select,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _merge_config(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"isowatt: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"isowatt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
