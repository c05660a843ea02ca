import argparse
import concurrent.futures
import csv
import logging
import math
import os
import sys
import time

import numpy as np

from . import config as run_config
from .baselines import NystromConfig, model_from_alpha, nystrom_solve, spectrum
from .data import (
    CLASSIFICATION,
    CsvSchema,
    center,
    fit_power_size,
    format_float,
    gen_noisy_sinc,
    gen_two_spiral,
    is_power_size,
    load_csv,
    save_csv,
    spiral_train_test,
)
from .dual import DENSE_CAP, DualProblem, solve_dense_direct
from .errors import ConfigError, DataError, InvalidArgument, NumericalFailure, ResourceLimitError, TNKFError
from .kalman import tnkf_train, write_trace
from .modelfile import load_model, save_model
from .predict import metric_labeled, metric_rmse, predict_batch, predict_mean, summarize

logger = logging.getLogger("tnkf")

METHODS = ("tnkf", "nystrom", "direct")


class Progress:
    """Print a throttled one-line training status."""

    interval = 0.5

    def __init__(self, stream=sys.stderr):
        self._stream = stream
        self._last = 0.0
        self._prefix = "" if os.name == "nt" else "\r\x1b[K"
        self._enabled = stream.isatty()

    def __call__(self, state, total):
        now = time.monotonic()
        if not self._enabled or (now - self._last < self.interval and state.k < total):
            return
        self._last = now
        record = state.record
        print(
            f"{self._prefix}Training progress: {state.k}/{total} rows "
            f"(|P| = {record.p_frobenius:.3g}, ranks m {record.max_rank_m}, P {record.max_rank_P}).",
            end="" if self._prefix else "\n",
            file=self._stream,
            flush=True,
        )

    def finish(self):
        if self._enabled and self._prefix:
            print(file=self._stream)


def _config(args):
    entries = run_config.load(args.config) if args.config else None
    return run_config.build(entries, {key: getattr(args, key) for key in run_config.KEYS})


def _sized(dataset, args):
    if is_power_size(dataset.N):
        return dataset
    if not args.auto_size:
        raise DataError(f"{dataset.N} rows is not n^d for n in 2, 3, 5, 7; rerun with --auto-size to keep the largest such subset.")
    subset, (n, d) = fit_power_size(dataset, args.base, args.seed_subset)
    print(f"Using {subset.N} = {n}^{d} of {dataset.N} rows.")
    return subset


def _problem(centered, config):
    return DualProblem(centered.X, centered.y, config.gamma, config.kernel_spec(), config.sigma_r2, config.sigma_e2)


def _write_rows(path, rows):
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows(rows)
    except OSError as exc:
        raise DataError(f"Cannot write {path}: {exc.strerror}.") from exc


def _fmt(value, digits=6):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "NA"
    return f"{value:.{digits}g}"


def gen(args):
    if args.dataset == "two-spiral":
        if args.holdout_output:
            train, test = spiral_train_test(args.n, args.stride, args.scale)
        else:
            train, test = gen_two_spiral(args.n, args.seed, args.scale), None
    else:
        train = gen_noisy_sinc(args.n, args.noise, args.seed, args.low, args.high)
        test = None
        if args.holdout_output:
            test = gen_noisy_sinc(args.test_n or args.n // 2, args.noise, args.seed + 1, args.low, args.high)
    save_csv(train, args.output)
    print(f"Wrote {train.N} rows to {args.output}.")
    if test is not None:
        save_csv(test, args.holdout_output)
        print(f"Wrote {test.N} rows to {args.holdout_output}.")


def train(args):
    config = _config(args)
    dataset = _sized(load_csv(args.data, config.schema()), args)
    centered = center(dataset)
    problem = _problem(centered, config)
    filter_config = config.tnkf_config()
    monitor = None
    if config.rmse_every:
        indices = np.arange(min(args.monitor, dataset.N)) * dataset.N // min(args.monitor, dataset.N)
        monitor = centered.X[indices], centered.y[indices]
    progress = Progress()
    start = time.perf_counter()
    try:
        model = tnkf_train(
            problem, filter_config, centering=centered.centering, task=config.task, encoding=dataset.encoding,
            prefetch=args.prefetch, progress=progress, monitor=monitor,
        )
    finally:
        progress.finish()
    elapsed = time.perf_counter() - start
    save_model(model, args.model, reference=args.reference)
    if args.trace:
        write_trace(model.trace, args.trace)
    last = model.trace[-1]
    print(f"Trained {model.iterations} of {dataset.N} rows in {elapsed:.3f} s.")
    print(f"Final |P|_F = {_fmt(last.p_frobenius)}, max rank m = {last.max_rank_m}, P = {last.max_rank_P}.")
    y_hat = np.array([predict_mean(model, x) for x in dataset.X])
    if config.task == CLASSIFICATION:
        print(f"Training labeled: {_fmt(metric_labeled(dataset.y, y_hat))}%.")
    else:
        print(f"Training RMSE: {_fmt(metric_rmse(dataset.y, y_hat))}.")
    print(f"Model written to {args.model}.")


def _load_test(path, model):
    if model.encoding is not None:
        dataset = load_csv(path, encoding=model.encoding)
    else:
        dataset = load_csv(path, CsvSchema(task=model.task))
    if dataset.f != model.f:
        raise ConfigError(f"Test data has {dataset.f} features, the model expects {model.f}.")
    return dataset


def _print_metrics(metrics):
    for name, value in metrics.items():
        suffix = "" if name == "rmse" or value is None else "%"
        print(f"{name}: {_fmt(value)}{suffix}")


def predict(args):
    model = load_model(args.model)
    dataset = _load_test(args.data, model)
    predictions = predict_batch(model, dataset.X, args.workers)
    if args.output:
        try:
            with open(args.output, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                labels = model.task == CLASSIFICATION
                writer.writerow([f"x{j}" for j in range(dataset.f)] + ["y", "y_hat", "sigma", "lower", "upper"]
                                + ["label"] * labels)
                for i in range(dataset.N):
                    row = [format_float(v) for v in dataset.X[i]] + [
                        format_float(dataset.y[i]),
                        format_float(predictions.mean[i]),
                        format_float(predictions.sigma[i]),
                        format_float(predictions.lower[i]),
                        format_float(predictions.upper[i]),
                    ]
                    if labels:
                        row.append("%d" % predictions.labels[i])
                    writer.writerow(row)
        except OSError as exc:
            raise DataError(f"Cannot write {args.output}: {exc.strerror}.") from exc
    _print_metrics(summarize(model.task, dataset.y, predictions))
    if predictions.clamped:
        print(f"clamped variances: {predictions.clamped}")


def _methods(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise argparse.ArgumentTypeError(f"unknown method {m!r}")
    if not methods:
        raise argparse.ArgumentTypeError("empty method list")
    return methods


def _run_method(method, problem, centered, config, args, encoding):
    start = time.perf_counter()
    if method == "tnkf":
        model = tnkf_train(problem, config.tnkf_config(), centering=centered.centering, task=config.task,
                           encoding=encoding)
        memory = model.nbytes
    elif method == "nystrom":
        nystrom = NystromConfig(args.S or problem.N, args.EV, args.nystrom_seed)
        model = nystrom_solve(problem, nystrom, centering=centered.centering, task=config.task, encoding=encoding)
        memory = 8 * (problem.N * nystrom.EV + nystrom.S ** 2 + problem.N)
    else:
        if problem.N > DENSE_CAP:
            raise ResourceLimitError(f"Direct solve skipped: {problem.N} points exceed the dense cap {DENSE_CAP}.")
        alpha = solve_dense_direct(problem)
        model = model_from_alpha(problem, alpha, centering=centered.centering, task=config.task, encoding=encoding)
        memory = 8 * problem.N ** 2
    return model, time.perf_counter() - start, memory


def bench(args):
    config = _config(args)
    dataset = _sized(load_csv(args.data, config.schema()), args)
    centered = center(dataset)
    problem = _problem(centered, config)
    config.tnkf_config()  # Validate before any worker starts.
    test = load_csv(args.test, encoding=dataset.encoding) if args.test else dataset
    with concurrent.futures.ThreadPoolExecutor(max_workers=len(args.methods)) as pool:
        futures = {
            method: pool.submit(_run_method, method, problem, centered, config, args, dataset.encoding)
            for method in args.methods
        }
    rows = []
    for method, future in futures.items():
        try:
            model, wall, memory = future.result()
        except TNKFError as exc:
            logger.warning("%s failed: %s", method, exc)
            rows.append([method, "NA", "NA", "NA", "NA", str(exc)])
            continue
        predictions = predict_batch(model, test.X, config.workers)
        metrics = list(summarize(config.task, test.y, predictions).values())
        rows.append([method, _fmt(metrics[0]), _fmt(metrics[1]), f"{wall:.3f}", str(memory), ""])
    header = ["method", "labeled" if config.task == CLASSIFICATION else "rmse",
              "confidence" if config.task == CLASSIFICATION else "fit", "wall_s", "memory_bytes", "error"]
    widths = [max(len(str(r[i])) for r in rows + [header]) for i in range(len(header))]
    for row in [header] + rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
    if args.output:
        _write_rows(args.output, [header] + rows)


def _sizes(text):
    try:
        sizes = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid size list {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError(f"invalid size list {text!r}")
    return sizes


def spectrum_(args):
    config = _config(args)
    largest = max(args.sizes)
    if largest > args.cap:
        raise ResourceLimitError(f"Refusing to eigendecompose a {largest}x{largest} kernel matrix (cap {args.cap}).")
    if args.data:
        dataset = load_csv(args.data, config.schema())
    elif args.dataset == "two-spiral":
        dataset = gen_two_spiral(largest + largest % 2, scale=args.scale)
    else:
        dataset = gen_noisy_sinc(largest, 0.0, low=args.low, high=args.high)
    problem = DualProblem(dataset.X, dataset.y, config.gamma, config.kernel_spec(), config.sigma_r2)
    spectra = spectrum(problem, args.sizes, args.cap)
    if args.output:
        _write_rows(args.output, [("size", "index", "eigenvalue")] + [
            (n, i, format_float(value)) for n, values in spectra.items() for i, value in enumerate(values)
        ])
    for n, values in spectra.items():
        count = int(np.count_nonzero(values > 1e-3 * values[0]))
        print(f"size {n}: lambda_max = {_fmt(values[0])}, {count} eigenvalues above 1e-3 lambda_max.")


def _add_config_flags(parser):
    parser.add_argument("--config", help="Path to a `key = value` config file.", metavar="<config>")
    group = parser.add_argument_group("configuration", "Override config file values.")
    for key in run_config.KEYS:
        group.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="<value>")


def _add_sizing_flags(parser):
    parser.add_argument("--auto-size", help="Keep the largest n^d subset of the data.", action="store_true")
    parser.add_argument("--base", help="Base n for --auto-size.", type=int, default=None, metavar="<n>")
    parser.add_argument("--seed-subset", help="Seed for --auto-size on unordered data.", type=int, default=0,
                        metavar="<seed>")


def _add_interval_flags(parser):
    parser.add_argument("--low", help="Left end of the sinc interval.", type=float, default=-5.0, metavar="<x>")
    parser.add_argument("--high", help="Right end of the sinc interval.", type=float, default=5.0, metavar="<x>")


def build_parser():
    parser = argparse.ArgumentParser(prog="tnkf", description="Train LS-SVMs with a tensor-network Kalman filter.")
    parser.add_argument("-v", "--verbose", help="Log more (repeat for debug output).", action="count", default=0)
    commands = parser.add_subparsers(metavar="<command>", required=True)

    p = commands.add_parser("gen", help="Generate a synthetic dataset.")
    p.add_argument("--dataset", help="Dataset to generate.", choices=["sinc", "two-spiral"], required=True)
    p.add_argument("--n", help="Number of (training) points.", type=int, required=True, metavar="<n>")
    p.add_argument("--noise", help="Noise standard deviation (sinc).", type=float, default=0.1, metavar="<sigma>")
    p.add_argument("--seed", help="Random seed.", type=int, default=0, metavar="<seed>")
    p.add_argument("--scale", help="Coordinate scale (two-spiral).", type=float, default=1.0, metavar="<scale>")
    p.add_argument("--output", help="Output CSV.", required=True, metavar="<path>")
    p.add_argument("--holdout-output", help="Also write a test set here.", metavar="<path>")
    p.add_argument("--stride", help="Hold out every stride-th point (two-spiral).", type=int, default=4,
                   metavar="<stride>")
    p.add_argument("--test-n", help="Test points (sinc; default n/2).", type=int, metavar="<n>")
    _add_interval_flags(p)
    p.set_defaults(command=gen)

    p = commands.add_parser("train", help="Train a model with the filter.")
    p.add_argument("data", help="Training CSV.", metavar="<data>")
    p.add_argument("--model", help="Output model file.", required=True, metavar="<path>")
    p.add_argument("--trace", help="Output per-iteration trace CSV.", metavar="<path>")
    p.add_argument("--reference", help="Store training inputs in a sidecar file.", action="store_true")
    p.add_argument("--prefetch", help="Build kernel rows on a background thread.", action="store_true")
    p.add_argument("--monitor", help="Points scored for train_rmse.", type=int, default=256, metavar="<n>")
    _add_sizing_flags(p)
    _add_config_flags(p)
    p.set_defaults(command=train)

    p = commands.add_parser("predict", help="Predict with a saved model.")
    p.add_argument("model", help="Model file.", metavar="<model>")
    p.add_argument("data", help="Test CSV.", metavar="<data>")
    p.add_argument("--output", help="Output predictions CSV.", metavar="<path>")
    p.add_argument("--workers", help="Prediction threads.", type=int, default=1, metavar="<workers>")
    p.set_defaults(command=predict)

    p = commands.add_parser("bench", help="Compare the filter with baselines.")
    p.add_argument("data", help="Training CSV.", metavar="<data>")
    p.add_argument("--test", help="Test CSV (default: the training data).", metavar="<path>")
    p.add_argument("--methods", help="Comma-separated methods: tnkf, nystrom, direct.", type=_methods,
                   default=list(METHODS), metavar="<methods>")
    p.add_argument("--S", help="Nyström sample size (default: N).", type=int, default=None, metavar="<S>")
    p.add_argument("--EV", help="Nyström eigenpairs.", type=int, default=50, metavar="<EV>")
    p.add_argument("--nystrom-seed", help="Nyström sampling seed.", type=int, default=0, metavar="<seed>")
    p.add_argument("--output", help="Output report CSV.", metavar="<path>")
    _add_sizing_flags(p)
    _add_config_flags(p)
    p.set_defaults(command=bench)

    p = commands.add_parser("spectrum", help="Export kernel eigenvalue spectra.")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", help="Generated dataset.", choices=["sinc", "two-spiral"])
    source.add_argument("--data", help="Dataset CSV.", metavar="<path>")
    p.add_argument("--sizes", help="Comma-separated sizes.", type=_sizes, required=True, metavar="<sizes>")
    p.add_argument("--scale", help="Coordinate scale (two-spiral).", type=float, default=1.0, metavar="<scale>")
    p.add_argument("--cap", help="Largest size allowed.", type=int, default=DENSE_CAP, metavar="<cap>")
    p.add_argument("--output", help="Output spectrum CSV.", metavar="<path>")
    _add_interval_flags(p)
    _add_config_flags(p)
    p.set_defaults(command=spectrum_)
    return parser


def main(argv=None):
    """Run the command line `argv` and return its exit status."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.command(args) or 0
    except (ConfigError, InvalidArgument, ResourceLimitError) as exc:
        print(f"tnkf: error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"tnkf: error: {exc}", file=sys.stderr)
        return 3
    except NumericalFailure as exc:
        print(f"tnkf: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
