"""Command-line entry point: ``group-influence {train,influence,sweep,select,replay}``.

Every command writes a run manifest in ``key=value`` form. The same format is
accepted by ``--config`` and by ``replay``, so a manifest is also a config
file. Lines starting with ``#`` carry metadata (tool version, dataset digests)
and are checked, not applied, on replay.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .bench import SweepConfig, emit_report, ground_truth_influence, run_sweep, select_test_point
from .data import (
    SyntheticSpec,
    gen_synthetic,
    load_csv_labeled,
    load_mnist_idx,
    sample_groups,
    train_test_split,
)
from .influence import (
    ORDERS,
    HessianSolver,
    all_individual_influences,
    group_influence,
    test_loss_influence,
    write_reports_csv,
)
from .model import Dataset, GroupSpec, LossModel, total_gradient
from .selection import (
    build_selection_problem,
    greedy_first_order_group,
    random_group_baseline,
    select_group,
    write_selection_csv,
)
from .solver import ORACLE_CONFIG, TrainConfig, TrainedModel, load_model, save_model, train

logger = logging.getLogger("group_influence")

COMMANDS = ("train", "influence", "sweep", "select")


class UsageError(Exception):
    pass


# --- datasets ----------------------------------------------------------------

def resolve_data(args) -> Tuple[Dataset, Dataset]:
    """Turn ``--data`` (plus size/seed flags) into a (train, test) pair.

    URIs: ``synth:gaussian``, ``synth:blobs``, ``idx:IMAGES,LABELS``, ``csv:PATH``.
    Synthetic test sets come from a separate stream of the same seed; file
    datasets are split with ``--test-frac``.
    """
    uri = args.data
    kind, _, rest = uri.partition(":")
    if kind == "synth":
        names = {"gaussian": "gaussian_binary", "gaussian_binary": "gaussian_binary",
                 "blobs": "blobs"}
        if rest not in names:
            raise UsageError(f"unknown synthetic dataset {rest!r} (use gaussian or blobs)")
        spec = SyntheticSpec(kind=names[rest], m=args.m, d=args.d, seed=args.seed,
                             add_bias=args.bias)
        train_ds = gen_synthetic(spec)
        test_ds = gen_synthetic(SyntheticSpec(kind=names[rest], m=args.m_test, d=args.d,
                                              seed=args.seed, add_bias=args.bias, stream="test"))
        return train_ds, test_ds
    if kind == "idx":
        parts = rest.split(",")
        if len(parts) != 2:
            raise UsageError("idx URI must be idx:IMAGES_PATH,LABELS_PATH")
        classes = _int_list(args.classes) if args.classes else None
        full = load_mnist_idx(parts[0], parts[1], classes=classes,
                              max_per_class=args.max_per_class, add_bias=args.bias)
    elif kind == "csv":
        full = load_csv_labeled(rest, add_bias=args.bias, regression=args.family in ("quadratic", "ridge"))
    else:
        raise UsageError(f"unknown dataset URI {uri!r}")
    return train_test_split(full, args.test_frac, args.seed)


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _float_list(text: str) -> List[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None
    return vals


def _train_config(args) -> TrainConfig:
    return TrainConfig(grad_tol=args.grad_tol, max_outer_iters=args.max_iters, cg_tol=args.cg_tol)


def _model_from_args(args, train_ds) -> Tuple[TrainedModel, LossModel]:
    if getattr(args, "model", None):
        tm = load_model(args.model, hessian_damping=args.damping)
        g = total_gradient(tm.model, train_ds, tm.theta_star)
        tm = TrainedModel(tm.theta_star, float(np.linalg.norm(g)), 0, tm.model, train_ds.id)
        return tm, tm.model
    if not args.family:
        raise UsageError("--family is required (or pass --model)")
    model = LossModel(args.family, args.l2, args.damping)
    return train(model, train_ds, config=_train_config(args)), model


def _pick_test(args, tm, train_ds, test_ds) -> int:
    if args.test is None:
        return select_test_point(tm, train_ds, test_ds, "misclassified_first")
    return select_test_point(tm, train_ds, test_ds, "index", args.test)


# --- manifests -----------------------------------------------------------------

_SKIP = {"func", "config", "command", "verbose"}


def write_manifest(path, command: str, args, datasets, extra: Optional[dict] = None) -> None:
    lines = [f"# tool_version={__version__}"]
    for role, ds in datasets:
        lines.append(f"# {role}_sha256={ds.digest()}")
        lines.append(f"# {role}_id={ds.id}")
    for key, val in (extra or {}).items():
        lines.append(f"# {key}={val}")
    lines.append(f"command={command}")
    for key in sorted(vars(args)):
        if key in _SKIP:
            continue
        val = getattr(args, key)
        if val is None:
            continue
        if isinstance(val, bool):
            val = int(val)
        lines.append(f"{key}={val}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path) -> Tuple[dict, dict]:
    """Parse ``key=value`` lines; returns (settings, metadata from ``#`` lines)."""
    settings, meta = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        target = settings
        if line.startswith("#"):
            line = line[1:].strip()
            target = meta
            if "=" not in line:
                continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        target[key.strip().replace("-", "_")] = val.strip()
    return settings, meta


# --- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    if not args.family:
        raise UsageError("--family is required")
    train_ds, test_ds = resolve_data(args)
    model = LossModel(args.family, args.l2, args.damping)
    tm = train(model, train_ds, config=_train_config(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(tm, out, train_ds.d, train_ds.class_count)
    write_manifest(str(out) + ".manifest", "train", args, [("train", train_ds), ("test", test_ds)],
                   {"final_grad_norm": repr(tm.final_grad_norm), "newton_iters": tm.iterations_used})
    logger.info("trained %s on %s: |grad|=%.2e in %d Newton steps", model.family, train_ds.id,
                tm.final_grad_norm, tm.iterations_used)
    print(out)
    return 0


def cmd_influence(args) -> int:
    train_ds, test_ds = resolve_data(args)
    tm, _ = _model_from_args(args, train_ds)
    z_idx = _pick_test(args, tm, train_ds, test_ds)
    z_t = test_ds.sample(z_idx)
    oracle = TrainConfig(grad_tol=args.oracle_tol, max_outer_iters=args.max_iters,
                         cg_tol=args.cg_tol)
    solver = HessianSolver(tm, train_ds, oracle)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.individual:
        if not args.group:
            raise UsageError("--individual needs --group with the training indices to score")
        idx = _int_list(args.group)
        scores = all_individual_influences(tm, train_ds, z_t, solver=solver)
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["train_index", "test_index", "individual_influence"])
            for i in idx:
                if not 0 <= i < train_ds.m:
                    raise UsageError(f"training index {i} out of range for m={train_ds.m}")
                w.writerow([i, z_idx, repr(float(scores[i]))])
    else:
        if args.group:
            groups = [GroupSpec(_int_list(args.group), train_ds.m, id="cli")]
        elif args.fraction is not None:
            if not 0 < args.fraction < 1:
                raise UsageError("--fraction must lie in (0, 1)")
            size = int(min(max(round(args.fraction * train_ds.m), 1), train_ds.m - 1))
            groups = sample_groups(train_ds, size, args.count, args.mode, args.seed, stream="cli")
        else:
            raise UsageError("give --group, or --fraction with --count")
        if args.order:
            order = args.order.replace("-", "_")
            with open(out, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["group_id", "group_size", "test_index", "order", "influence"])
                for U in groups:
                    val = test_loss_influence(tm, train_ds, U, z_t, order, solver=solver)
                    w.writerow([U.id, len(U), z_idx, order, repr(val)])
        else:
            reports = []
            for U in groups:
                rep = group_influence(tm, train_ds, U, z_t, z_idx, solver=solver)
                if not args.timings:
                    rep.wall_times = {}  # keeps the CSV byte-identical on replay
                if args.ground_truth:
                    rep.ground_truth = ground_truth_influence(tm, train_ds, U, z_t, oracle)
                reports.append(rep)
            write_reports_csv(reports, out)
    write_manifest(str(out) + ".manifest", "influence", args,
                   [("train", train_ds), ("test", test_ds)], {"test_index": z_idx})
    print(out)
    return 0


def cmd_sweep(args) -> int:
    fractions = _float_list(args.fractions)
    if not fractions:
        raise UsageError("--fractions must list at least one fraction")
    train_ds, test_ds = resolve_data(args)
    tm, model = _model_from_args(args, train_ds)
    cfg = SweepConfig(group_fractions=sorted(fractions), groups_per_size=args.groups_per_size,
                      trials=args.trials, mode=args.mode,
                      test_selection="misclassified_first" if args.test is None else "index",
                      test_index=args.test or 0, seed=args.seed, jobs=args.jobs)
    oracle = TrainConfig(grad_tol=args.oracle_tol, max_outer_iters=args.max_iters,
                         cg_tol=args.cg_tol)
    result = run_sweep(model, train_ds, test_ds, cfg, oracle_config=oracle, tm=tm)
    out = Path(args.out)
    emit_report(result, out, include_timings=args.timings)
    write_manifest(out / "manifest.txt", "sweep", args, [("train", train_ds), ("test", test_ds)],
                   {"test_index": result.test_index})
    for f in cfg.group_fractions:
        logger.info("fraction %g: mean pearson first=%.4f first_unscaled=%.4f second=%.4f", f,
                    result.mean_pearson(f, "first"), result.mean_pearson(f, "first_unscaled"),
                    result.mean_pearson(f, "second"))
    print(out / "sweep.csv")
    return 0


def cmd_select(args) -> int:
    train_ds, test_ds = resolve_data(args)
    m = train_ds.m
    if args.k is not None:
        k = args.k
    elif args.k_frac is not None:
        k = int(round(args.k_frac * m))
    else:
        raise UsageError("give --k or --k-frac")
    if not 1 <= k < m:
        raise UsageError(f"group size k must satisfy 1 <= k < m={m}, got {k}")
    tm, _ = _model_from_args(args, train_ds)
    z_idx = _pick_test(args, tm, train_ds, test_ds)
    z_t = test_ds.sample(z_idx)
    solver = HessianSolver(tm, train_ds, TrainConfig(cg_tol=args.cg_tol),
                           method="dense" if args.dense else "cg")
    problem = build_selection_problem(tm, train_ds, z_t, k, solver=solver)
    result = select_group(problem, step=args.step, iters=args.iters, seed=args.seed)
    greedy = greedy_first_order_group(tm, train_ds, z_t, k, solver=solver)
    greedy_val = problem.objective(problem.indicator(greedy.indices))
    rand_mean, _ = random_group_baseline(problem, args.random_groups, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_selection_csv(result, out / "selection.csv")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "objective", "k", "m", "test_index"])
        w.writerow(["optimal_pgd", repr(result.objective_discrete), k, m, z_idx])
        w.writerow(["greedy_first_order", repr(greedy_val), k, m, z_idx])
        w.writerow(["random_mean", repr(rand_mean), k, m, z_idx])
        w.writerow(["optimal_pgd_relaxed", repr(result.objective_relaxed), k, m, z_idx])
    write_manifest(out / "manifest.txt", "select", args, [("train", train_ds), ("test", test_ds)],
                   {"test_index": z_idx, "suboptimal": int(result.suboptimal)})
    print(out / "summary.csv")
    return 0


def cmd_replay(args) -> int:
    settings, meta = read_config(args.manifest)
    command = settings.pop("command", None)
    if command not in COMMANDS:
        raise UsageError(f"manifest has no valid command (got {command!r})")
    argv = [command]
    for key, val in settings.items():
        argv += [f"--{key.replace('_', '-')}", val]
    if args.out:
        argv += ["--out", args.out]
    ns = build_parser().parse_args(argv)
    train_ds, test_ds = resolve_data(ns)
    for role, ds in (("train", train_ds), ("test", test_ds)):
        want = meta.get(f"{role}_sha256")
        if want and want != ds.digest():
            raise UsageError(f"{role} dataset digest differs from the manifest; inputs changed")
    return ns.func(ns)


# --- parser ----------------------------------------------------------------------

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_common(p: argparse.ArgumentParser, out_default: str, model_flag: bool = True):
    g = p.add_argument_group("data")
    g.add_argument("--data", default="synth:gaussian",
                   help="synth:gaussian | synth:blobs | idx:IMAGES,LABELS | csv:PATH")
    g.add_argument("--m", type=int, default=1000, help="synthetic training size")
    g.add_argument("--m-test", type=int, default=200, help="synthetic test size")
    g.add_argument("--d", type=int, default=5, help="synthetic feature count")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bias", type=_bool, nargs="?", const=True, default=False,
                   help="append a constant-1 feature column")
    g.add_argument("--classes", default=None, help="idx: digit filter, e.g. 1,7")
    g.add_argument("--max-per-class", type=int, default=None)
    g.add_argument("--test-frac", type=float, default=0.2, help="held-out share for file data")
    g = p.add_argument_group("model")
    g.add_argument("--family", default=None, help="binary_logistic|logistic|softmax|quadratic")
    g.add_argument("--l2", type=float, default=0.01)
    g.add_argument("--damping", type=float, default=0.0)
    if model_flag:
        g.add_argument("--model", default=None, help="trained model file (skips training)")
    g = p.add_argument_group("solver")
    g.add_argument("--grad-tol", type=float, default=1e-10)
    g.add_argument("--max-iters", type=int, default=100)
    g.add_argument("--cg-tol", type=float, default=1e-10)
    p.add_argument("--out", default=out_default)
    p.add_argument("--config", default=None, help="key=value file with flag defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="group-influence",
                                     description="Second-order group influence toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model and write it as a GTRC file")
    _add_common(p, "model.gtrc", model_flag=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("influence", help="first/second-order influence of groups")
    _add_common(p, "influence.csv")
    p.add_argument("--group", default=None, help="comma-separated training indices")
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--mode", choices=("random", "coherent"), default="random")
    p.add_argument("--test", type=int, default=None, help="test index (default: first misclassified)")
    p.add_argument("--ground-truth", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--individual", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--order", default=None,
                   choices=[o for o in ORDERS] + [o.replace("_", "-") for o in ORDERS if "_" in o],
                   help="write only this prediction, one row per group")
    p.add_argument("--timings", type=_bool, nargs="?", const=True, default=False,
                   help="fill the wall-time columns (breaks bitwise replay)")
    p.add_argument("--oracle-tol", type=float, default=ORACLE_CONFIG.grad_tol)
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("sweep", help="correlation sweep over group sizes")
    _add_common(p, "sweep_out")
    p.add_argument("--fractions", default="0.016,0.1,0.36,0.6")
    p.add_argument("--groups-per-size", type=int, default=50)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--mode", choices=("random", "coherent"), default="random")
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="concurrent retrains")
    p.add_argument("--timings", type=_bool, nargs="?", const=True, default=False,
                   help="also put wall times in sweep.csv (breaks bitwise replay)")
    p.add_argument("--oracle-tol", type=float, default=ORACLE_CONFIG.grad_tol)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("select", help="most influential group by relaxed QP")
    _add_common(p, "select_out")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--k-frac", type=float, default=None)
    p.add_argument("--test", type=int, default=None)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--random-groups", type=int, default=100)
    p.add_argument("--dense", type=_bool, nargs="?", const=True, default=False,
                   help="dense Cholesky instead of CG for H^-1")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="write outputs elsewhere")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_replay)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: List[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        settings, _ = read_config(args.config)
        settings.pop("command", None)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(settings) - known
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        # config values become defaults; explicit flags still win
        typed = {}
        for a in sub._actions:
            if a.dest in settings:
                val = settings[a.dest]
                typed[a.dest] = a.type(val) if a.type else val
        sub.set_defaults(**typed)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"group-influence: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, RuntimeError, OSError) as exc:
        print(f"group-influence: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
