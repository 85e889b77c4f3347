"""Newton-CG training and conjugate-gradient inverse-Hessian-vector products."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .model import (
    FAMILIES,
    Dataset,
    LossModel,
    _check_theta,
    hvp,
    total_gradient,
    weighted_hvp,
    weighted_loss,
)

logger = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    """Training did not reach ``grad_tol``; ``grad_norm`` is the last gradient norm."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class CGError(RuntimeError):
    def __init__(self, message: str, residual_norm: float):
        super().__init__(f"{message} (residual norm {residual_norm:.3e})")
        self.residual_norm = residual_norm


@dataclass(frozen=True)
class TrainConfig:
    grad_tol: float = 1e-8
    max_outer_iters: int = 100
    cg_tol: float = 1e-10
    cg_max_iters: Optional[int] = None  # None -> 10 * n_params + 50

    def __post_init__(self):
        if not (self.grad_tol > 0 and self.cg_tol > 0 and self.max_outer_iters > 0):
            raise ValueError("TrainConfig tolerances and iteration counts must be positive")
        if self.cg_max_iters is not None and self.cg_max_iters <= 0:
            raise ValueError("cg_max_iters must be positive")

    def cg_iters_for(self, n: int) -> int:
        return self.cg_max_iters if self.cg_max_iters is not None else 10 * n + 50


ORACLE_CONFIG = TrainConfig(grad_tol=1e-10)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    theta_star: np.ndarray
    final_grad_norm: float
    iterations_used: int
    model: LossModel
    data_id: str = ""

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=np.float64)
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta_star must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)


@dataclass
class CGInfo:
    iterations: int = 0
    residual_norms: List[float] = field(default_factory=list)
    # 0.5 x'Ax - b'x; differs from 0.5 ||x - x*||_A^2 by a constant, so it must decrease
    energies: List[float] = field(default_factory=list)


def cg_solve(apply_H: Callable[[np.ndarray], np.ndarray], b, tol: float = 1e-10,
             max_iters: int = 1000, return_info: bool = False):
    """Solve ``H x = b`` for symmetric positive definite ``H`` by conjugate gradients.

    Starts from zero, no preconditioner. Stops once
    ``||H x - b|| <= tol * ||b||``.

    Raises
    ------
    CGError
        If ``max_iters`` is exhausted or a non-finite / non-positive curvature
        value shows up (the operator is not positive definite).
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    info = CGInfo()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        info.residual_norms.append(0.0)
        info.energies.append(0.0)
        return (x, info) if return_info else x
    r = b.copy()
    p = r.copy()
    rr = r @ r
    target = tol * bnorm
    info.residual_norms.append(np.sqrt(rr))
    info.energies.append(0.0)
    for it in range(1, max_iters + 1):
        Hp = apply_H(p)
        pHp = p @ Hp
        if not np.isfinite(pHp) or pHp <= 0.0:
            raise CGError("non-positive or non-finite curvature; operator is not SPD", np.sqrt(rr))
        alpha = rr / pHp
        x += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        info.iterations = it
        info.residual_norms.append(np.sqrt(rr_new))
        if return_info:
            info.energies.append(0.5 * (x @ (b - r)) - b @ x)
        if not np.isfinite(rr_new):
            raise CGError("non-finite residual", rr_new)
        if np.sqrt(rr_new) <= target:
            return (x, info) if return_info else x
        p = r + (rr_new / rr) * p
        rr = rr_new
    # the recursive residual drifts; confirm with the true one before giving up
    true_res = np.linalg.norm(apply_H(x) - b)
    if true_res <= target:
        return (x, info) if return_info else x
    raise CGError(f"CG did not reach tol={tol:g} in {max_iters} iterations", true_res)


def train(model: LossModel, data: Dataset, weights=None, config: TrainConfig = TrainConfig(),
          theta0=None) -> TrainedModel:
    """Minimize ``(1/m) sum_i w_i l(z_i) + (l2/2)||theta||^2`` by damped Newton-CG.

    Newton directions come from CG on the weighted Hessian (no damping term);
    steps are chosen by Armijo backtracking (start 1.0, shrink 0.5, slope 1e-4).
    ``theta0`` warm-starts the iteration (zero by default).
    """
    n = model.n_params(data)
    w = np.ones(data.m) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (data.m,):
        raise ValueError(f"weights must have length m={data.m}")
    theta = np.zeros(n) if theta0 is None else np.array(_check_theta(model, data, theta0))
    reg = model.l2_strength

    def objective(t):
        return weighted_loss(model, data, t, w)

    def gradient(t):
        return total_gradient(model, data, t, w)

    f = objective(theta)
    g = gradient(theta)
    gnorm = np.linalg.norm(g)
    if not np.isfinite(f):
        raise ConvergenceError("non-finite loss at the starting point", gnorm)
    it = 0
    cg_iters = config.cg_iters_for(n)
    while gnorm > config.grad_tol:
        if it >= config.max_outer_iters:
            raise ConvergenceError(f"no convergence in {config.max_outer_iters} Newton steps", gnorm)
        it += 1

        def apply_H(v, t=theta):
            return weighted_hvp(model, data, t, v, w) / data.m + reg * v

        forcing = min(0.5, np.sqrt(gnorm)) * 1e-2
        try:
            step = cg_solve(apply_H, -g, tol=forcing, max_iters=cg_iters)
        except CGError:
            # singular curvature (e.g. l2 = 0 with rank-deficient features): fall back to gradient
            step = -g
        slope = g @ step
        if slope >= 0:
            step, slope = -g, -(g @ g)
        t = 1.0
        accepted = False
        # below rounding level of f the Armijo test is noise; judge by the gradient instead
        noisy = -slope <= 1e3 * np.finfo(float).eps * max(abs(f), 1.0)
        while t >= 1e-12 and not noisy:
            cand = theta + t * step
            f_new = objective(cand)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # near the optimum loss differences drop below rounding; accept a full
            # step if it still shrinks the gradient
            cand = theta + step
            g_cand = gradient(cand)
            if np.linalg.norm(g_cand) < gnorm:
                f_new = objective(cand)
            else:
                raise ConvergenceError("line search failed", gnorm)
        theta = cand
        f = f_new
        if not np.isfinite(f):
            raise ConvergenceError("non-finite loss", gnorm)
        g = gradient(theta)
        gnorm = np.linalg.norm(g)
        logger.debug("newton iter %d: loss=%.12g |g|=%.3e step=%g", it, f, gnorm, t)
    return TrainedModel(theta, float(gnorm), it, model, data.id)


def inverse_hvp(tm: TrainedModel, data: Dataset, b, config: TrainConfig = TrainConfig(),
                return_info: bool = False):
    """``(H + damping I)^{-1} b`` with ``H`` the full-objective Hessian at ``theta_star``."""
    model, theta = tm.model, tm.theta_star
    b = _check_theta(model, data, b)

    def apply_H(v):
        return hvp(model, data, theta, v)

    return cg_solve(apply_H, b, tol=config.cg_tol,
                    max_iters=config.cg_iters_for(theta.size), return_info=return_info)


# --- binary model file -------------------------------------------------------
# little-endian: b"GTRC" | u16 version | u8 family | f64 l2 | u32 d | u32 k | f64[d*k]

MAGIC = b"GTRC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBdII")


def save_model(tm: TrainedModel, path, d: int, class_count: Optional[int] = None) -> None:
    k = class_count if tm.model.family == "softmax" else 1
    if tm.theta_star.size != d * k:
        raise ValueError(f"parameter length {tm.theta_star.size} != d*k = {d * k}")
    fam = FAMILIES.index(tm.model.family)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, fam, tm.model.l2_strength, d, k))
        fh.write(tm.theta_star.astype("<f8").tobytes())


def load_model(path, hessian_damping: float = 0.0) -> TrainedModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError("model file truncated: header incomplete")
    magic, version, fam, l2, d, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"not a model file: magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    if fam >= len(FAMILIES):
        raise ValueError(f"unknown family code {fam}")
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * d * k:
        raise ValueError(f"model payload has {len(payload)} bytes, expected {8 * d * k}")
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    model = LossModel(FAMILIES[fam], l2, hessian_damping)
    return TrainedModel(theta, float("nan"), 0, model, "")
