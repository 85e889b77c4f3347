"""Search for the most influential size-``k`` group of a test point.

The second-order removal influence of a group with indicator ``w`` is the
quadratic ``f(w) = c1 * a.w + c2 * w.B w`` where

    a_i    = v1 . grad l(z_i),                 v1 = H^{-1} grad l(z_t)
    B_ij   = v1 . hess l(z_i) H^{-1} grad l(z_j)
    c1     = (1 - 2p) / ((1 - p)^2 m),  c2 = 1 / ((1 - p)^2 m^2),  p = k / m

The cardinality constraint is relaxed to ``0 <= w <= 1``, ``||w||_1 <= k`` and
the relaxed problem is climbed by projected gradient ascent. Sample terms
carry their share of the L2 penalty, as in :mod:`group_influence.influence`.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import rng_stream
from .influence import HessianSolver, all_individual_influences
from .model import (
    Dataset,
    GroupSpec,
    as_sample,
    group_gradient_sum,
    per_sample_gradients,
    per_sample_hessian_forms,
    sample_gradient,
    weighted_hvp,
)
from .solver import TrainConfig, TrainedModel

logger = logging.getLogger(__name__)


class SelectionError(RuntimeError):
    pass


@dataclass
class SelectionProblem:
    a: np.ndarray
    apply_B: Callable[[np.ndarray], np.ndarray]
    apply_BT: Callable[[np.ndarray], np.ndarray]
    c1: float
    c2: float
    k: int

    @property
    def m(self) -> int:
        return self.a.size

    def objective(self, w, Bw=None) -> float:
        w = np.asarray(w, dtype=np.float64)
        if Bw is None:
            Bw = self.apply_B(w)
        return float(self.c1 * (self.a @ w) + self.c2 * (w @ Bw))

    def indicator(self, indices) -> np.ndarray:
        w = np.zeros(self.m)
        w[np.asarray(indices, dtype=np.int64)] = 1.0
        return w

    def dense_B(self) -> np.ndarray:
        eye = np.eye(self.m)
        return np.column_stack([self.apply_B(eye[:, j]) for j in range(self.m)])


@dataclass
class SelectionResult:
    weights: np.ndarray
    chosen: GroupSpec
    objective_relaxed: float
    objective_discrete: float
    iterations: int = 0
    step: float = float("nan")
    exhaustive_best: Optional[float] = None
    suboptimal: bool = False
    metadata: dict = field(default_factory=dict)


def build_selection_problem(tm: TrainedModel, data: Dataset, z_t, k: int,
                            config: Optional[TrainConfig] = None,
                            solver: Optional[HessianSolver] = None) -> SelectionProblem:
    """Assemble ``a``, matrix-free ``B`` / ``B^T`` and the constants for a test point.

    Each ``apply_B`` or ``apply_BT`` call costs one inverse-HVP.
    """
    m = data.m
    if not 1 <= k < m:
        raise ValueError(f"k must satisfy 1 <= k < m={m}, got {k}")
    slv = solver or HessianSolver(tm, data, config)
    model, theta = tm.model, tm.theta_star
    g_t = sample_gradient(model, data, theta, as_sample(z_t))
    v1 = slv.solve(g_t)
    G = per_sample_gradients(model, data, theta, include_l2=True)
    a = G @ v1
    p = k / m
    c1 = (1.0 - 2.0 * p) / ((1.0 - p) ** 2 * m)
    c2 = 1.0 / ((1.0 - p) ** 2 * m * m)

    def apply_B(w):
        u = slv.solve(group_gradient_sum(model, data, theta, np.asarray(w, dtype=np.float64), True))
        return per_sample_hessian_forms(model, data, theta, v1, u, include_l2=True)

    def apply_BT(w):
        return G @ slv.solve(weighted_hvp(model, data, theta, v1, np.asarray(w, dtype=np.float64),
                                          include_l2=True))

    return SelectionProblem(a, apply_B, apply_BT, c1, c2, k)


def project_l1(v, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` (sort-based, exact)."""
    v = np.asarray(v, dtype=np.float64)
    if radius <= 0:
        raise ValueError("radius must be positive")
    if not np.all(np.isfinite(v)):
        raise ValueError("project_l1 input must be finite")
    u = np.abs(v)
    if u.sum() <= radius:
        return v.copy()
    s = np.sort(u)[::-1]
    css = np.cumsum(s)
    rho = np.nonzero(s * np.arange(1, s.size + 1) > css - radius)[0][-1]
    tau = (css[rho] - radius) / (rho + 1.0)
    return np.sign(v) * np.maximum(u - tau, 0.0)


def top_k(values, k: int, tie_break=None) -> np.ndarray:
    """Indices of the ``k`` largest values, sorted.

    Ties go to the larger ``tie_break`` entry when one is given, then to the
    lower index.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.arange(values.size)
    if tie_break is None:
        order = np.lexsort((idx, -values))
    else:
        order = np.lexsort((idx, -np.asarray(tie_break, dtype=np.float64), -values))
    return np.sort(order[:k])


def _spectral_estimate(problem: SelectionProblem, rng, iters: int = 30) -> float:
    x = rng.standard_normal(problem.m)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = problem.c2 * (problem.apply_B(x) + problem.apply_BT(x))
        nrm = np.linalg.norm(y)
        if nrm == 0.0 or not np.isfinite(nrm):
            break
        est = nrm
        x = y / nrm
    return est


def select_group(problem: SelectionProblem, step: Optional[float] = None, iters: int = 500,
                 seed: int = 0, exhaustive_limit: int = 20000, tol: float = 1e-12) -> SelectionResult:
    """Projected gradient ascent on the relaxed selection objective.

    Each iterate is clipped to the unit box and then projected onto the L1
    ball of radius ``k``. The step defaults to ``0.5 / L`` with ``L`` a power
    iteration estimate of ``||c2 (B + B^T)||``; a step that lowers the
    objective is halved and retried. The final group is the top-``k``
    coordinates of ``|w|``; ties (typically the block of zeros when fewer than
    ``k`` coordinates survive) go to the larger objective gradient at ``w``,
    then to the lower index. When ``C(m, k)`` is at most
    ``exhaustive_limit`` the discrete answer is compared against enumeration
    and flagged if it falls short by more than ``1e-9``.
    """
    m, k = problem.m, problem.k
    rng = rng_stream(seed, "selection/power-iteration")
    if step is None:
        L = _spectral_estimate(problem, rng)
        scale = max(L, 1e-12 * max(np.abs(problem.c1 * problem.a).max(), 1e-300))
        step = 0.5 / scale
    w = np.full(m, k / m)
    Bw = problem.apply_B(w)
    f = problem.objective(w, Bw)
    it = 0
    for it in range(1, iters + 1):
        grad = problem.c1 * problem.a + problem.c2 * (Bw + problem.apply_BT(w))
        if not np.all(np.isfinite(grad)):
            raise SelectionError("non-finite gradient; use a smaller step")
        while True:
            w_new = project_l1(np.clip(w + step * grad, 0.0, 1.0), k)
            Bw_new = problem.apply_B(w_new)
            f_new = problem.objective(w_new, Bw_new)
            if not np.isfinite(f_new):
                raise SelectionError(f"objective diverged at step {step:g}; use a smaller step")
            if f_new >= f - 1e-15 * abs(f) or step < 1e-30:
                break
            step *= 0.5
        moved = np.linalg.norm(w_new - w)
        w, Bw, f = w_new, Bw_new, f_new
        if moved <= tol:
            break
    # when the relaxed optimum keeps fewer than k coordinates the rest tie at zero;
    # fill them by marginal gain at w
    grad = problem.c1 * problem.a + problem.c2 * (Bw + problem.apply_BT(w))
    chosen_idx = top_k(np.abs(w), k, tie_break=grad)
    f_disc = problem.objective(problem.indicator(chosen_idx))
    result = SelectionResult(w, GroupSpec(chosen_idx, m, id="pgd"), f, f_disc, it, step,
                             metadata={"l1_radius": k, "box": "[0, 1]", "rounding": "top-k |w|, ties by gradient then index",
                                       "gradient": "c1*a + c2*(B + B^T) w"})
    if math.comb(m, k) <= exhaustive_limit:
        best, _ = exhaustive_optimum(problem)
        result.exhaustive_best = best
        result.suboptimal = f_disc < best - 1e-9
        if result.suboptimal:
            logger.warning("PGD group objective %.6g below exhaustive optimum %.6g", f_disc, best)
    return result


def exhaustive_optimum(problem: SelectionProblem):
    """Best discrete objective over every size-``k`` group, from a dense ``B``."""
    B = problem.dense_B()
    best, best_idx = -np.inf, None
    for idx in itertools.combinations(range(problem.m), problem.k):
        idx = list(idx)
        val = problem.c1 * problem.a[idx].sum() + problem.c2 * B[np.ix_(idx, idx)].sum()
        if val > best:
            best, best_idx = val, idx
    return float(best), np.array(best_idx)


def greedy_first_order_group(tm: TrainedModel, data: Dataset, z_t, k: int,
                             config: Optional[TrainConfig] = None,
                             solver: Optional[HessianSolver] = None) -> GroupSpec:
    """The ``k`` samples with the largest individual influence (ties: lower index)."""
    if not 1 <= k < data.m:
        raise ValueError(f"k must satisfy 1 <= k < m={data.m}, got {k}")
    scores = all_individual_influences(tm, data, z_t, config, solver)
    return GroupSpec(top_k(scores, k), data.m, id="greedy")


def random_group_baseline(problem: SelectionProblem, n_groups: int = 100, seed: int = 0):
    """Mean (and all values) of the discrete objective over random size-``k`` groups."""
    rng = rng_stream(seed, "selection/random-baseline")
    vals = np.array([problem.objective(problem.indicator(rng.choice(problem.m, problem.k, replace=False)))
                     for _ in range(n_groups)])
    return float(vals.mean()), vals


def write_selection_csv(result: SelectionResult, path) -> None:
    chosen = np.zeros(result.weights.size, dtype=bool)
    chosen[result.chosen.indices] = True
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "weight", "chosen"])
        for i, (wi, ci) in enumerate(zip(result.weights, chosen)):
            writer.writerow([i, repr(float(wi)), int(ci)])
        fh.write(f"# objective_relaxed={result.objective_relaxed!r},"
                 f"objective_discrete={result.objective_discrete!r},"
                 f"suboptimal={int(result.suboptimal)}\n")
