"""Leave-k-out ground truth, correlation sweeps, timing and report files."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import sample_groups
from .influence import HessianSolver, group_influence
from .model import Dataset, GroupSpec, LossModel, as_sample, ensure_group, predict, sample_loss
from .solver import ORACLE_CONFIG, TrainConfig, TrainedModel, train

logger = logging.getLogger(__name__)

METHODS = ("first", "first_unscaled", "second")


class DegenerateCorrelationError(ValueError):
    """One of the inputs to :func:`pearson` has zero variance."""


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d arrays of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    # relative threshold: values identical up to rounding still count as constant
    if sx <= 1e-14 * np.abs(x).max() or sy <= 1e-14 * np.abs(y).max() or sx == 0 or sy == 0:
        raise DegenerateCorrelationError("zero variance input; correlation undefined")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def retrain_without(tm: TrainedModel, data: Dataset, U, config: TrainConfig = ORACLE_CONFIG,
                    warm_start: bool = True) -> TrainedModel:
    """Retrain on ``S \\ U`` with the ``1/(m - |U|)`` normalisation (L2 term unchanged)."""
    U = ensure_group(U, data.m)
    k = len(U)
    w = np.full(data.m, data.m / (data.m - k))
    w[U.indices] = 0.0
    return train(tm.model, data, w, config, theta0=tm.theta_star if warm_start else None)


def ground_truth_delta_theta(tm: TrainedModel, data: Dataset, U,
                             config: TrainConfig = ORACLE_CONFIG) -> np.ndarray:
    U = ensure_group(U, data.m)
    if len(U) == 0:
        return np.zeros_like(tm.theta_star)
    return retrain_without(tm, data, U, config).theta_star - tm.theta_star


def ground_truth_influence(tm: TrainedModel, data: Dataset, U, z_t,
                           config: TrainConfig = ORACLE_CONFIG) -> float:
    """Actual change of the loss at ``z_t`` after retraining without ``U``."""
    U = ensure_group(U, data.m)
    if len(U) == 0:
        return 0.0
    z_t = as_sample(z_t)
    new = retrain_without(tm, data, U, config)
    return (sample_loss(tm.model, data, new.theta_star, z_t)
            - sample_loss(tm.model, data, tm.theta_star, z_t))


@dataclass(frozen=True)
class SweepConfig:
    group_fractions: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    groups_per_size: int = 50
    trials: int = 5
    mode: str = "random"
    test_selection: str = "misclassified_first"
    test_index: int = 0
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        fr = tuple(float(f) for f in self.group_fractions)
        if not fr:
            raise ValueError("at least one group fraction is required")
        if any(not 0 < f < 1 for f in fr):
            raise ValueError("group fractions must lie in (0, 1)")
        if list(fr) != sorted(fr):
            raise ValueError("group fractions must be sorted ascending")
        object.__setattr__(self, "group_fractions", fr)
        if self.groups_per_size < 2:
            raise ValueError("groups_per_size must be at least 2")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if self.mode not in ("random", "coherent"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.test_selection not in ("misclassified_first", "index"):
            raise ValueError(f"unknown test_selection {self.test_selection!r}")


@dataclass
class GroupRecord:
    fraction: float
    trial: int
    group_id: str
    group_size: int
    first: float
    first_unscaled: float
    second: float
    truth: float
    t_first_s: float
    t_second_s: float

    def prediction(self, method: str) -> float:
        return getattr(self, method)


@dataclass
class SweepCell:
    fraction: float
    trial: int
    seed: int
    n_groups: int
    pearson: Dict[str, Optional[float]]
    mean_abs_pred: Dict[str, float]
    mean_abs_truth: float
    wall_s: Dict[str, float]

    def degenerate(self, method: str) -> bool:
        return self.pearson[method] is None

    @property
    def pearson_first(self):
        return self.pearson["first"]

    @property
    def pearson_first_unscaled(self):
        return self.pearson["first_unscaled"]

    @property
    def pearson_second(self):
        return self.pearson["second"]


@dataclass
class SweepResult:
    dataset_id: str
    mode: str
    cells: List[SweepCell] = field(default_factory=list)
    records: List[GroupRecord] = field(default_factory=list)
    test_index: int = -1
    manifest: dict = field(default_factory=dict)

    def by_fraction(self, fraction: float) -> List[SweepCell]:
        return [c for c in self.cells if c.fraction == fraction]

    def mean_pearson(self, fraction: float, method: str) -> float:
        vals = [c.pearson[method] for c in self.by_fraction(fraction) if c.pearson[method] is not None]
        return float(np.mean(vals)) if vals else float("nan")


def select_test_point(tm: TrainedModel, train_data: Dataset, test_data: Dataset,
                      selection: str = "misclassified_first", index: int = 0) -> int:
    """Index into ``test_data``; the first misclassified point, else the highest-loss one."""
    if selection == "index":
        if not 0 <= index < test_data.m:
            raise IndexError(f"test index {index} out of range for {test_data.m} test points")
        return index
    if tm.model.family != "quadratic":
        wrong = np.flatnonzero(predict(tm.model, train_data, tm.theta_star, test_data.features)
                               != test_data.labels)
        if wrong.size:
            return int(wrong[0])
    losses = [sample_loss(tm.model, train_data, tm.theta_star, test_data.sample(i))
              for i in range(test_data.m)]
    return int(np.argmax(losses))


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))  # map preserves input order


def run_sweep(model: LossModel, data: Dataset, test_data: Dataset, cfg: SweepConfig,
              train_config: TrainConfig = TrainConfig(), oracle_config: TrainConfig = ORACLE_CONFIG,
              tm: Optional[TrainedModel] = None, solver_method: str = "cg") -> SweepResult:
    """Correlate predicted and retrained test-loss changes across group sizes.

    For every fraction ``f`` and trial, ``groups_per_size`` groups of size
    ``round(f * m)`` are sampled; each gets the three predictions plus one
    leave-k-out retrain. Correlations that are undefined (constant inputs) are
    stored as ``None`` rather than raising.
    """
    if tm is None:
        tm = train(model, data, config=train_config)
    z_idx = select_test_point(tm, data, test_data, cfg.test_selection, cfg.test_index)
    z_t = test_data.sample(z_idx)
    solver = HessianSolver(tm, data, oracle_config, method=solver_method)
    result = SweepResult(data.id, cfg.mode, test_index=z_idx)
    result.manifest = {
        "dataset_id": data.id, "dataset_sha256": data.digest(), "test_sha256": test_data.digest(),
        "family": model.family, "l2": model.l2_strength, "damping": model.hessian_damping,
        "fractions": list(cfg.group_fractions), "groups_per_size": cfg.groups_per_size,
        "trials": cfg.trials, "mode": cfg.mode, "seed": cfg.seed, "test_index": z_idx,
        "test_selection": cfg.test_selection, "solver": solver_method,
        "theta_star_grad_norm": tm.final_grad_norm,
    }
    for f in cfg.group_fractions:
        size = int(min(max(round(f * data.m), 1), data.m - 1))
        for trial in range(cfg.trials):
            groups = sample_groups(data, size, cfg.groups_per_size, cfg.mode, cfg.seed,
                                   stream=f"fraction={f!r}/trial={trial}")
            reports = [group_influence(tm, data, U, z_t, z_idx, solver=solver) for U in groups]
            truths = _map(lambda U: ground_truth_influence(tm, data, U, z_t, oracle_config),
                          groups, cfg.jobs)
            recs = [GroupRecord(f, trial, r.group.id, len(r.group), r.first_order,
                                r.first_unscaled, r.second_order, t,
                                r.wall_times["first"], r.wall_times["second"])
                    for r, t in zip(reports, truths)]
            result.records.extend(recs)
            truth = np.array([r.truth for r in recs])
            corr, mean_abs = {}, {}
            for meth in METHODS:
                pred = np.array([r.prediction(meth) for r in recs])
                try:
                    corr[meth] = pearson(pred, truth)
                except DegenerateCorrelationError:
                    corr[meth] = None
                mean_abs[meth] = float(np.mean(np.abs(pred)))
            t_first = float(np.mean([r.t_first_s for r in recs]))
            t_second = float(np.mean([r.t_second_s for r in recs]))
            cell = SweepCell(f, trial, cfg.seed, len(recs), corr, mean_abs,
                             float(np.mean(np.abs(truth))),
                             {"first": t_first, "first_unscaled": t_first, "second": t_second})
            result.cells.append(cell)
            logger.info("fraction %.3f trial %d: pearson first=%s second=%s", f, trial,
                        corr["first"], corr["second"])
    return result


SWEEP_COLUMNS = ("dataset_id", "mode", "fraction", "trial", "method", "pearson", "n_groups",
                 "mean_abs_pred", "mean_abs_truth", "wall_s", "seed")


def emit_report(result: SweepResult, out_dir, include_timings: bool = False) -> List[Path]:
    """Write ``sweep.csv``, ``groups.csv`` and one scatter SVG per (fraction, method).

    Wall times are not reproducible, so ``sweep.csv`` leaves ``wall_s`` blank
    unless ``include_timings`` is set; ``timings.csv`` always carries them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in result.cells:
            for meth in METHODS:
                r = c.pearson[meth]
                w.writerow([result.dataset_id, result.mode, repr(c.fraction), c.trial, meth,
                            "degenerate" if r is None else repr(r), c.n_groups,
                            repr(c.mean_abs_pred[meth]), repr(c.mean_abs_truth),
                            repr(c.wall_s[meth]) if include_timings else "", c.seed])
    written.append(path)
    path = out / "groups.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "trial", "group_id", "group_size", "first", "first_unscaled",
                    "second", "ground_truth"])
        for r in result.records:
            w.writerow([repr(r.fraction), r.trial, r.group_id, r.group_size, repr(r.first),
                        repr(r.first_unscaled), repr(r.second), repr(r.truth)])
    written.append(path)
    path = out / "timings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "trial", "method", "wall_s"])
        for c in result.cells:
            for meth in METHODS:
                w.writerow([repr(c.fraction), c.trial, meth, repr(c.wall_s[meth])])
    written.append(path)
    for f in sorted({r.fraction for r in result.records}):
        recs = [r for r in result.records if r.fraction == f]
        for meth in METHODS:
            svg = scatter_svg([r.prediction(meth) for r in recs], [r.truth for r in recs],
                              title=f"{result.dataset_id} {result.mode} f={f:g} {meth}",
                              xlabel=f"predicted ({meth})", ylabel="ground truth")
            path = out / f"scatter_f{f:g}_{meth}.svg"
            path.write_text(svg)
            written.append(path)
    return written


def scatter_svg(x, y, title: str = "", xlabel: str = "", ylabel: str = "",
                size: int = 400, pad: int = 50) -> str:
    """Minimal scatter plot with the ``y = x`` guide line."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    vals = np.concatenate([x, y]) if x.size else np.array([0.0, 1.0])
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-300:
        lo, hi = lo - 1.0, hi + 1.0
    span = hi - lo
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    inner = size - 2 * pad

    def sx(v):
        return pad + (v - lo) / (hi - lo) * inner

    def sy(v):
        return size - pad - (v - lo) / (hi - lo) * inner

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<title>{escape(title)}</title>',
             f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
             f'<line class="identity" x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" '
             f'y2="{sy(hi):.2f}" stroke="green" stroke-width="1.5"/>']
    for xi, yi in zip(x, y):
        parts.append(f'<circle cx="{sx(xi):.2f}" cy="{sy(yi):.2f}" r="2.5" fill="steelblue" '
                     f'fill-opacity="0.7"/>')
    parts += [f'<text x="{size / 2:.0f}" y="{pad / 2:.0f}" text-anchor="middle" '
              f'font-size="12">{escape(title)}</text>',
              f'<text x="{size / 2:.0f}" y="{size - 12}" text-anchor="middle" '
              f'font-size="11">{escape(xlabel)}</text>',
              f'<text x="14" y="{size / 2:.0f}" text-anchor="middle" font-size="11" '
              f'transform="rotate(-90 14 {size / 2:.0f})">{escape(ylabel)}</text>',
              f'<text x="{pad}" y="{size - pad + 14}" font-size="9">{lo:.3g}</text>',
              f'<text x="{size - pad}" y="{size - pad + 14}" font-size="9" '
              f'text-anchor="end">{hi:.3g}</text>',
              "</svg>"]
    return "\n".join(parts) + "\n"


class Timing(NamedTuple):
    mean_first_s: float
    mean_second_s: float
    ratio: float
    std_first_s: float
    std_second_s: float


def time_methods(tm: TrainedModel, data: Dataset, groups: Sequence[GroupSpec], z_t,
                 config: Optional[TrainConfig] = None, warmup: int = 3) -> Timing:
    """Wall-clock the first-order and the full second-order pipeline per group.

    The first ``warmup`` evaluations (cycling through ``groups``) are discarded.
    """
    if not groups:
        raise ValueError("time_methods needs at least one group")
    solver = HessianSolver(tm, data, config)
    for j in range(warmup):
        group_influence(tm, data, groups[j % len(groups)], z_t, solver=solver)
    t1, t2 = [], []
    for U in groups:
        rep = group_influence(tm, data, U, z_t, solver=solver)
        t1.append(rep.wall_times["first"])
        t2.append(rep.wall_times["second"])
    m1, m2 = float(np.mean(t1)), float(np.mean(t2))
    return Timing(m1, m2, m2 / m1 if m1 > 0 else float("inf"), float(np.std(t1)), float(np.std(t2)))
