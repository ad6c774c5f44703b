"""Command-line harness: ``admmqp bench | gradcheck | train``.

Exit codes: 0 success, 1 check failed (tolerance or descent), 2 bad usage.
Any flag can also come from a JSON file given with ``--config``; flags on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import gc
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ipo
from .admm import admm_solve
from .core import SingularBackwardSystem, SolverConfig, generate_exp1_problem
from .diff import BackwardMethod, backward
from .oracle import complementarity_margin, fd_bundle, reference_solve

log = logging.getLogger("admmqp")

BENCH_EPS = (1e-1, 1e-3, 1e-5)
MARGIN = 1e-3
# relative error is measured against max(|reference|, SCALE_FLOOR): at the
# default 1e-4 tolerance an absolute error of 1e-7 always passes
SCALE_FLOOR = 1e-3
OBJECTIVE_FLAGS = {"learn-p": "qp_decision", "max-sharpe": "max_sharpe", "min-var": "min_variance"}
# min-variance losses and gradients are two orders of magnitude smaller
DEFAULT_LR = {"learn-p": 0.05, "max-sharpe": 0.05, "min-var": 5.0}
# forward tolerance during training; the portfolio problems are solved tighter
DEFAULT_TRAIN_EPS = {"learn-p": 1e-3, "max-sharpe": 1e-4, "min-var": 1e-4}


@dataclass
class BenchRow:
    d_z: int
    method: str
    eps_tol: float
    trial: int
    forward_seconds: float
    backward_seconds: float
    iterations: int
    converged: int  # instances of the batch that met the tolerance


BENCH_COLUMNS = tuple(f.name for f in fields(BenchRow))
TRAIN_COLUMNS = ("epoch", "mean_loss", "fwd_seconds", "bwd_seconds")


def instance_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = SCALE_FLOOR) -> float:
    """max |a - b| relative to max |b|, with a floor on the scale."""
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    return float(np.abs(a - b).max() / max(np.abs(b).max(), floor))


# -- bench ----------------------------------------------------------------------


@contextlib.contextmanager
def _gc_paused():
    # as in timeit: a collection inside a timed sweep would be charged to
    # whichever call happened to trigger it
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _solve_batch(problems, cfg, pool):
    def one(problem):
        t0 = time.perf_counter()
        sol = admm_solve(problem, cfg)
        return sol, time.perf_counter() - t0

    with _gc_paused():
        return list(pool.map(one, problems)) if pool else [one(p) for p in problems]


def _backward_batch(problems, solutions, grad, method, pool, repeats=1):
    def one(args):
        problem, sol = args
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            try:
                backward(problem, sol, grad, method)
            except SingularBackwardSystem:
                log.info("singular backward system (%s, d_z=%d)", method.value, problem.d_z)
            best = min(best, time.perf_counter() - t0)
        return best

    pairs = list(zip(problems, solutions))
    with _gc_paused():
        one(pairs[0])  # warm-up, untimed
        return list(pool.map(one, pairs)) if pool else [one(a) for a in pairs]


def run_bench(
    dims,
    eps_list,
    batch=128,
    trials=10,
    methods=("fp", "kkt", "unroll"),
    seed=0,
    jobs=1,
    rho=1.0,
    repeats=1,
):
    """Time forward and backward passes over random batches.

    One row per (d_z, trial, eps, method).  A trial draws one batch and runs
    it at every tolerance, so tolerances are compared on the same instances.
    Seconds are summed over the batch and cover only the solver and backward
    calls; with ``repeats > 1`` each instance's backward time is the fastest
    of that many runs.
    """
    methods = [BackwardMethod(m) for m in methods]
    rows = []
    pool = ThreadPoolExecutor(jobs) if jobs > 1 else None
    try:
        for d_z in dims:
            for trial in range(trials):
                problems = [generate_exp1_problem(d_z, instance_seed(seed, d_z, trial, i)) for i in range(batch)]
                grad = np.random.default_rng(instance_seed(seed, d_z, trial, 2**32 - 1)).standard_normal(d_z)
                for eps in eps_list:
                    for method in methods:
                        cfg = SolverConfig.with_tol(eps, rho=rho, record_trace=method is BackwardMethod.UNROLLED)
                        solved = _solve_batch(problems, cfg, pool)
                        sols = [s for s, _ in solved]
                        bwd = _backward_batch(problems, sols, grad, method, pool, repeats)
                        rows.append(
                            BenchRow(
                                d_z=d_z,
                                method=method.value,
                                eps_tol=eps,
                                trial=trial,
                                forward_seconds=sum(t for _, t in solved),
                                backward_seconds=sum(bwd),
                                iterations=sum(s.iterations for s in sols),
                                converged=sum(s.converged for s in sols),
                            )
                        )
    finally:
        if pool is not None:
            pool.shutdown()
    return rows


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in asdict(row).values()])


def read_bench_csv(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != BENCH_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        return [
            BenchRow(
                d_z=int(r["d_z"]),
                method=r["method"],
                eps_tol=float(r["eps_tol"]),
                trial=int(r["trial"]),
                forward_seconds=float(r["forward_seconds"]),
                backward_seconds=float(r["backward_seconds"]),
                iterations=int(r["iterations"]),
                converged=int(r["converged"]),
            )
            for r in reader
        ]


def cmd_bench(args) -> int:
    rows = run_bench(
        args.dims, args.eps, args.batch, args.trials, args.methods, args.seed, args.jobs, args.rho, args.repeats
    )
    write_bench_csv(rows, args.out)
    meta = {"seed": args.seed, "batch": args.batch, "jobs": args.jobs, "rho": args.rho, "repeats": args.repeats}
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=1))
    for method in sorted({r.method for r in rows}):
        sel = [r for r in rows if r.method == method]
        print(
            f"{method:>6}: median forward {np.median([r.forward_seconds for r in sel]):.4f}s, "
            f"median backward {np.median([r.backward_seconds for r in sel]):.4f}s"
        )
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# -- gradcheck ------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_error: dict
    checked: int
    skipped: int

    @property
    def worst(self) -> float:
        return max(self.max_error.values(), default=0.0)


def run_gradcheck(d_z, trials, method="fp", seed=0, eps=None, step=1e-5, rho=1.0) -> GradcheckReport:
    """Compare a backward engine with finite differences through the oracle.

    Instances whose solution lies within 1e-3 of a nondifferentiable point
    are skipped and counted.
    """
    method = BackwardMethod(method)
    if eps is None:
        eps = 1e-8 if method is BackwardMethod.UNROLLED else 1e-10
    cfg = SolverConfig.with_tol(eps, rho=rho, max_iter=100_000, record_trace=method is BackwardMethod.UNROLLED)
    worst = {name: 0.0 for name in ("dQ", "dp", "dA", "db", "dl", "du")}
    checked = skipped = 0
    for trial in range(trials):
        problem = generate_exp1_problem(d_z, instance_seed(seed, d_z, trial))
        ref = reference_solve(problem, rho=rho)
        if complementarity_margin(problem, ref) < MARGIN:
            skipped += 1
            continue
        sol = admm_solve(problem, cfg)
        g = np.random.default_rng(instance_seed(seed, d_z, trial, 1)).standard_normal(d_z)
        try:
            ours = backward(problem, sol, g, method).as_dict()
        except SingularBackwardSystem:
            skipped += 1
            continue
        fd = fd_bundle(problem, lambda z: float(g @ z), step=step)
        for name in worst:
            worst[name] = max(worst[name], relative_error(ours[name], fd[name]))
        checked += 1
    return GradcheckReport(worst, checked, skipped)


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.dz, args.trials, args.method, args.seed, args.eps)
    for name, err in report.max_error.items():
        print(f"{name}: max relative error {err:.3e}")
    print(f"checked {report.checked}, skipped {report.skipped} degenerate instances")
    ok = report.checked > 0 and report.worst <= args.tol
    print("PASS" if ok else f"FAIL (tolerance {args.tol:g})")
    return 0 if ok else 1


# -- train ----------------------------------------------------------------------


def make_dataset(objective_flag: str, d_z: int, d_w: int, m: int, seed: int) -> ipo.IPODataset:
    if objective_flag == "learn-p":
        return ipo.generate_exp2_dataset(d_z, d_w, m, 0.10, seed)
    return ipo.generate_factor_dataset(d_z, d_w, m, 0.10, seed)


def write_train_csv(history: ipo.TrainHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_COLUMNS)
        for e, (loss, f, b) in enumerate(zip(history.loss, history.forward_seconds, history.backward_seconds)):
            writer.writerow([e + 1, repr(loss), repr(f), repr(b)])


def read_train_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAIN_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in TRAIN_COLUMNS[1:]}} for r in reader
        ]


def cmd_train(args) -> int:
    dataset = make_dataset(args.objective, args.dz, args.dw, args.m, args.seed)
    lr = DEFAULT_LR[args.objective] if args.lr is None else args.lr
    eps = DEFAULT_TRAIN_EPS[args.objective] if args.eps is None else args.eps
    config = ipo.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=lr,
        backward_method=args.method,
        train_eps=eps,
        eval_eps=min(eps, 1e-6),
        seed=args.seed,
        jobs=args.jobs,
    )
    history = ipo.train(dataset, OBJECTIVE_FLAGS[args.objective], config)
    if args.out:
        write_train_csv(history, args.out)
    initial, final = history.loss[0], history.loss[-1]
    print(f"initial loss {initial:.6g}, final loss {final:.6g}")
    if not final < initial:
        print("FAIL: training loss did not decrease")
        return 1
    return 0


# -- argument parsing -----------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive integers")
    return values


def _eps_list(text: str) -> list[float]:
    values = _float_list(text)
    bad = [v for v in values if not any(math.isclose(v, e) for e in BENCH_EPS)]
    if not values or bad:
        raise argparse.ArgumentTypeError(f"eps must be drawn from {BENCH_EPS}")
    return values


def _method_list(text: str) -> list[str]:
    values = [t for t in text.split(",") if t]
    valid = {m.value for m in BackwardMethod}
    if not values or any(v not in valid for v in values):
        raise argparse.ArgumentTypeError(f"methods must be a subset of {sorted(valid)}")
    return values


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _nonneg_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not value >= 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="admmqp", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="JSON file of flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="time forward/backward passes on random batches")
    bench.add_argument("--dims", type=_int_list, default=[10, 50, 100])
    bench.add_argument("--eps", type=_eps_list, default=list(BENCH_EPS))
    bench.add_argument("--batch", type=_positive_int, default=128)
    bench.add_argument("--trials", type=_positive_int, default=10)
    bench.add_argument("--methods", type=_method_list, default=["fp", "kkt", "unroll"])
    bench.add_argument("--out", type=Path, default=Path("bench.csv"))
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--jobs", type=_positive_int, default=1)
    bench.add_argument("--rho", type=float, default=1.0)
    bench.add_argument("--repeats", type=_positive_int, default=1, help="backward timing is the min of this many runs")
    bench.set_defaults(func=cmd_bench)

    grad = sub.add_parser("gradcheck", help="compare a backward engine with finite differences")
    grad.add_argument("--dz", type=_positive_int, default=10)
    grad.add_argument("--trials", type=_positive_int, default=20)
    grad.add_argument("--method", choices=[m.value for m in BackwardMethod], default="fp")
    grad.add_argument("--seed", type=int, default=0)
    grad.add_argument("--tol", type=_nonneg_float, default=1e-4)
    grad.add_argument("--eps", type=float, default=None, help="forward tolerance (default 1e-10, unroll 1e-8)")
    grad.set_defaults(func=cmd_gradcheck)

    train = sub.add_parser("train", help="IPO training on synthetic data")
    train.add_argument("--objective", choices=sorted(OBJECTIVE_FLAGS), default="learn-p")
    train.add_argument("--dz", type=_positive_int, default=50)
    train.add_argument("--dw", type=_positive_int, default=5)
    train.add_argument("--m", type=_positive_int, default=640)
    train.add_argument("--epochs", type=_positive_int, default=30)
    train.add_argument("--batch", type=_positive_int, default=32)
    train.add_argument("--lr", type=_nonneg_float, default=None, help="default depends on the objective")
    train.add_argument("--method", choices=[m.value for m in BackwardMethod], default="fp")
    train.add_argument("--eps", type=float, default=None, help="forward tolerance during training (default by objective)")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--jobs", type=_positive_int, default=1)
    train.add_argument("--out", type=Path, default=None)
    train.set_defaults(func=cmd_train)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        data = json.loads(args.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(data, dict):
        parser.error("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in subparser._actions}
    unknown = set(data) - known
    if unknown:
        parser.error(f"unknown config keys: {sorted(unknown)}")
    # run file values through the same converters as flags
    converted = {}
    for action in subparser._actions:
        if action.dest in data:
            value = data[action.dest]
            if action.type is not None:
                text = ",".join(map(str, value)) if isinstance(value, list) else str(value)
                try:
                    value = action.type(text)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    parser.error(f"config key {action.dest}: {exc}")
            converted[action.dest] = value
    subparser.set_defaults(**converted)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
