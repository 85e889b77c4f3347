"""First- and second-order group influence on parameters and on a test loss.

Every number reported here describes *removing* the group ``U`` (the
perturbation series evaluated at ``eps = -1``), so

    delta_theta ~= -theta1 + theta2

with

    theta1 = -1 / (m (1 - p)) * H^{-1} sum_{z in U} grad l(z)
    theta2 = p / (1 - p) * (theta1 - H^{-1} (1/|U|) sum_{z in U} hess l(z) theta1)

where ``H`` is the Hessian of the full objective (L2 term and damping
included) at ``theta_star`` and ``p = |U| / m``. The sample terms ``l`` carry
their ``1/m`` share of the L2 penalty, ``l(z) + (l2/2)||theta||^2``, so that
the shares of all samples sum to a zero gradient at ``theta_star`` and the
weighted objective at ``eps = -1`` is exactly the leave-``U``-out objective.
Damping enters ``H`` only. A positive test-loss
influence predicts that the test loss goes *up* once ``U`` is removed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import (
    Dataset,
    GroupSpec,
    as_sample,
    ensure_group,
    group_gradient_sum,
    hessian_matrix,
    per_sample_gradients,
    sample_gradient,
    weighted_hvp,
)
from .solver import TrainConfig, TrainedModel, inverse_hvp

ORDERS = ("first", "second", "first_unscaled")


class HessianSolver:
    """Applies ``H^{-1}`` at a trained model, by CG (default) or a dense Cholesky factor.

    The dense route assembles ``H`` explicitly and is meant for small problems
    and for cross-checking the CG path.
    """

    def __init__(self, tm: TrainedModel, data: Dataset, config: Optional[TrainConfig] = None,
                 method: str = "cg"):
        if method not in ("cg", "dense"):
            raise ValueError("method must be 'cg' or 'dense'")
        self.tm = tm
        self.data = data
        self.config = config or TrainConfig()
        self.method = method
        self.n_solves = 0
        self._factor = None
        if method == "dense":
            H = hessian_matrix(tm.model, data, tm.theta_star)
            self._factor = cho_factor(0.5 * (H + H.T))

    def solve(self, b) -> np.ndarray:
        self.n_solves += 1
        if self._factor is not None:
            return cho_solve(self._factor, np.asarray(b, dtype=np.float64))
        return inverse_hvp(self.tm, self.data, b, self.config)


def _solver(tm, data, config, solver) -> HessianSolver:
    if solver is not None:
        return solver
    return HessianSolver(tm, data, config)


def _group_weights(U: GroupSpec) -> np.ndarray:
    w = np.zeros(U.m)
    w[U.indices] = 1.0
    return w


def _subset_hvp(tm: TrainedModel, data: Dataset, v, U: GroupSpec) -> np.ndarray:
    return weighted_hvp(tm.model, data, tm.theta_star, v, _group_weights(U), include_l2=True)


def _check_p(U: GroupSpec):
    if len(U) >= U.m:
        raise ValueError("p = 1: the whole training set cannot be removed")


def theta1(tm: TrainedModel, data: Dataset, U, config: Optional[TrainConfig] = None,
           solver: Optional[HessianSolver] = None) -> np.ndarray:
    """First-order perturbation ``-1/(m(1-p)) H^{-1} sum_U grad l``. Empty ``U`` gives zeros."""
    U = ensure_group(U, data.m)
    _check_p(U)
    if len(U) == 0:
        return np.zeros_like(tm.theta_star)
    g_U = group_gradient_sum(tm.model, data, tm.theta_star, _group_weights(U), True)
    v1 = _solver(tm, data, config, solver).solve(g_U)
    return -v1 / (data.m * (1.0 - U.p))


def theta2(tm: TrainedModel, data: Dataset, U, t1, config: Optional[TrainConfig] = None,
           solver: Optional[HessianSolver] = None) -> np.ndarray:
    """Second-order perturbation ``p/(1-p) (t1 - H^{-1} (1/|U|) sum_U hess l t1)``."""
    U = ensure_group(U, data.m)
    _check_p(U)
    if len(U) == 0:
        return np.zeros_like(tm.theta_star)
    w = _subset_hvp(tm, data, t1, U) / len(U)
    p = U.p
    return (p / (1.0 - p)) * (np.asarray(t1) - _solver(tm, data, config, solver).solve(w))


def _perturbations(tm, data, U, config, solver):
    """theta1, theta2 and the cached ``v1 = H^{-1} g_U``; two solves in total."""
    slv = _solver(tm, data, config, solver)
    zero = np.zeros_like(tm.theta_star)
    if len(U) == 0:
        return zero, zero, zero
    p = U.p
    g_U = group_gradient_sum(tm.model, data, tm.theta_star, _group_weights(U), True)
    v1 = slv.solve(g_U)
    t1 = -v1 / (data.m * (1.0 - p))
    w = _subset_hvp(tm, data, t1, U) / len(U)
    t2 = (p / (1.0 - p)) * (t1 - slv.solve(w))
    return t1, t2, v1


def predict_removal_delta_theta(tm: TrainedModel, data: Dataset, U,
                                config: Optional[TrainConfig] = None,
                                solver: Optional[HessianSolver] = None) -> np.ndarray:
    """Predicted ``theta_U - theta_star`` after removing ``U``: ``-theta1 + theta2``."""
    U = ensure_group(U, data.m)
    _check_p(U)
    t1, t2, _ = _perturbations(tm, data, U, config, solver)
    return -t1 + t2


def predict_removal_delta_theta_first(tm, data, U, config=None, solver=None) -> np.ndarray:
    return -theta1(tm, data, U, config, solver)


def test_loss_influence(tm: TrainedModel, data: Dataset, U, z_t, order: str = "second",
                        config: Optional[TrainConfig] = None,
                        solver: Optional[HessianSolver] = None) -> float:
    """Predicted change of the loss at ``z_t`` when ``U`` is removed.

    ``order`` is ``"first"``, ``"second"`` or ``"first_unscaled"``; the last one
    drops the ``1/(1-p)`` factor of the first-order term.
    """
    order = order.replace("-", "_")
    if order not in ORDERS:
        raise ValueError(f"order must be one of {ORDERS}")
    U = ensure_group(U, data.m)
    _check_p(U)
    g_t = sample_gradient(tm.model, data, tm.theta_star, as_sample(z_t))
    if order == "second":
        D = predict_removal_delta_theta(tm, data, U, config, solver)
    else:
        D = -theta1(tm, data, U, config, solver)
        if order == "first_unscaled":
            D = D * (1.0 - U.p)
    return float(g_t @ D)


test_loss_influence.__test__ = False  # not a pytest test despite the name


def individual_influence(tm: TrainedModel, data: Dataset, i: int, z_t,
                         config: Optional[TrainConfig] = None,
                         solver: Optional[HessianSolver] = None) -> float:
    """``(1/m) grad l(z_t)^T H^{-1} grad l(z_i)``: removal effect of one sample."""
    if not 0 <= i < data.m:
        raise IndexError(f"sample index {i} out of range for m={data.m}")
    g_t = sample_gradient(tm.model, data, tm.theta_star, as_sample(z_t))
    g_i = per_sample_gradients(tm.model, data, tm.theta_star, [i], include_l2=True)[0]
    return float(g_t @ _solver(tm, data, config, solver).solve(g_i)) / data.m


def all_individual_influences(tm: TrainedModel, data: Dataset, z_t,
                              config: Optional[TrainConfig] = None,
                              solver: Optional[HessianSolver] = None) -> np.ndarray:
    """Individual influences of every training sample from a single solve."""
    g_t = sample_gradient(tm.model, data, tm.theta_star, as_sample(z_t))
    v = _solver(tm, data, config, solver).solve(g_t)
    return per_sample_gradients(tm.model, data, tm.theta_star, include_l2=True) @ v / data.m


def term_decomposition(tm: TrainedModel, data: Dataset, U, z_t,
                       config: Optional[TrainConfig] = None,
                       solver: Optional[HessianSolver] = None) -> Tuple[float, float]:
    """Split the second-order removal influence into an additive and a pairwise part.

    term1 = (1/m) (1-2p)/(1-p)^2 g_t^T H^{-1} g_U
    term2 = 1/((1-p)^2 m^2) g_t^T H^{-1} (sum_U hess l) H^{-1} g_U

    computed as ``v1 = H^{-1} g_U``, ``v2 = sum_U hess l v1``, ``v3 = H^{-1} v2``.
    """
    U = ensure_group(U, data.m)
    _check_p(U)
    if len(U) == 0:
        return 0.0, 0.0
    slv = _solver(tm, data, config, solver)
    m, p = data.m, U.p
    g_t = sample_gradient(tm.model, data, tm.theta_star, as_sample(z_t))
    g_U = group_gradient_sum(tm.model, data, tm.theta_star, _group_weights(U), True)
    v1 = slv.solve(g_U)
    v2 = _subset_hvp(tm, data, v1, U)
    v3 = slv.solve(v2)
    c1 = (1.0 - 2.0 * p) / ((1.0 - p) ** 2 * m)
    c2 = 1.0 / ((1.0 - p) ** 2 * m * m)
    return float(c1 * (g_t @ v1)), float(c2 * (g_t @ v3))


@dataclass
class InfluenceReport:
    group: GroupSpec
    test_index: int
    first_order: float
    second_order: float
    correction: float
    first_unscaled: float
    ground_truth: Optional[float] = None
    wall_times: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isclose(self.second_order, self.first_order + self.correction,
                          rtol=1e-12, atol=1e-300):
            raise ValueError("second_order must equal first_order + correction")

    def row(self) -> dict:
        gt = self.ground_truth
        return {
            "group_id": self.group.id,
            "group_size": len(self.group),
            "p": repr(self.group.p),
            "test_index": self.test_index,
            "first_order": repr(self.first_order),
            "first_unscaled": repr(self.first_unscaled),
            "second_order": repr(self.second_order),
            "ground_truth": "" if gt is None else repr(gt),
            "t_first_s": repr(self.wall_times.get("first", float("nan"))),
            "t_second_s": repr(self.wall_times.get("second", float("nan"))),
        }


REPORT_COLUMNS = ("group_id", "group_size", "p", "test_index", "first_order", "first_unscaled",
                  "second_order", "ground_truth", "t_first_s", "t_second_s")


def group_influence(tm: TrainedModel, data: Dataset, U, z_t, test_index: int = -1,
                    config: Optional[TrainConfig] = None,
                    solver: Optional[HessianSolver] = None) -> InfluenceReport:
    """All three predictions for one (group, test point) pair, with wall times.

    The first-order figure costs one inverse-HVP; the second-order figure reuses
    it and adds one subset HVP and one more inverse-HVP.
    """
    U = ensure_group(U, data.m)
    _check_p(U)
    slv = _solver(tm, data, config, solver)
    g_t = sample_gradient(tm.model, data, tm.theta_star, as_sample(z_t))
    if len(U) == 0:
        return InfluenceReport(U, test_index, 0.0, 0.0, 0.0, 0.0,
                               wall_times={"first": 0.0, "second": 0.0})
    m, p = data.m, U.p
    t0 = time.perf_counter()
    g_U = group_gradient_sum(tm.model, data, tm.theta_star, _group_weights(U), True)
    v1 = slv.solve(g_U)
    t1 = -v1 / (m * (1.0 - p))
    first = float(g_t @ -t1)
    t_first = time.perf_counter() - t0
    w = _subset_hvp(tm, data, t1, U) / len(U)
    t2 = (p / (1.0 - p)) * (t1 - slv.solve(w))
    correction = float(g_t @ t2)
    t_second = time.perf_counter() - t0
    return InfluenceReport(U, test_index, first, first + correction, correction,
                           first * (1.0 - p), wall_times={"first": t_first, "second": t_second})


def write_reports_csv(reports: Iterable[InfluenceReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            writer.writerow(rep.row())
