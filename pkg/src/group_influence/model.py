"""Datasets, loss families and matrix-free curvature for convex ERM models.

Three loss families are supported:

* ``binary_logistic``: labels in {0, 1}, ``l(z) = log(1 + exp(x.theta)) - y * x.theta``
* ``softmax``: labels are class ids, parameters are ``class_count`` blocks of
  length ``d`` stored row-major (block ``k`` is ``theta[k*d:(k+1)*d]``)
* ``quadratic``: real targets, ``l(z) = 0.5 * (x.theta - y)**2``

The L2 term ``(l2_strength / 2) * ||theta||**2`` is charged once to the total
objective. Per-sample gradients and Hessians leave it out by default; the
``include_l2`` switches add each sample's equal share of it instead, which is
what the group-influence expansions need (the shares then sum to zero
gradient at the optimum).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, logsumexp, softmax

FAMILIES = ("binary_logistic", "softmax", "quadratic")


class DimensionError(ValueError):
    """Raised when array shapes disagree; ``axis`` names the offending axis."""

    def __init__(self, axis: str, expected, got):
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"dimension mismatch on {axis}: expected {expected}, got {got}")


class Sample(NamedTuple):
    x: np.ndarray
    y: Union[int, float]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with labels.

    ``labels`` are integer class ids when ``class_count`` is set and real
    regression targets otherwise.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: Optional[int] = None
    id: str = "dataset"

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DimensionError("features", "(m >= 1, d >= 1)", X.shape)
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise DimensionError("labels", X.shape[0], y.shape)
        if self.class_count is not None:
            if self.class_count < 1:
                raise ValueError("class_count must be positive")
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("classification labels must be integers")
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.class_count):
                raise ValueError(f"labels must lie in [0, {self.class_count})")
        else:
            y = y.astype(np.float64)
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        X.setflags(write=False)
        y = np.ascontiguousarray(y)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.m

    def sample(self, i: int) -> Sample:
        if not 0 <= i < self.m:
            raise IndexError(f"sample index {i} out of range for m={self.m}")
        return Sample(self.features[i], self.labels[i].item())

    def subset(self, indices, id: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count,
                       id or f"{self.id}[{idx.size}]")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class LossModel:
    family: str
    l2_strength: float = 0.0
    hessian_damping: float = 0.0

    def __post_init__(self):
        aliases = {"logistic": "binary_logistic", "multinomial": "softmax", "ridge": "quadratic"}
        fam = aliases.get(self.family, self.family)
        if fam not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}; choose from {FAMILIES}")
        object.__setattr__(self, "family", fam)
        for name in ("l2_strength", "hessian_damping"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {val}")
            object.__setattr__(self, name, val)

    def n_params(self, data: Dataset) -> int:
        if self.family == "softmax":
            if data.class_count is None:
                raise ValueError("softmax family needs a dataset with class_count")
            return data.d * data.class_count
        return data.d


@dataclass(frozen=True)
class GroupSpec:
    """A subset ``U`` of the ``m`` training indices (sorted, no duplicates, ``|U| < m``)."""

    indices: np.ndarray
    m: int
    id: str = field(default="", compare=False)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        uniq = np.unique(idx)
        if uniq.size != idx.size:
            raise ValueError("group indices contain duplicates")
        if uniq.size and (uniq[0] < 0 or uniq[-1] >= self.m):
            raise IndexError(f"group indices out of range for m={self.m}")
        if uniq.size >= self.m:
            raise ValueError("a group may not contain every training sample (p = 1)")
        uniq.setflags(write=False)
        object.__setattr__(self, "indices", uniq)

    def __eq__(self, other):
        return (isinstance(other, GroupSpec) and self.m == other.m
                and np.array_equal(self.indices, other.indices))

    def __hash__(self):
        return hash((self.m, self.indices.tobytes()))

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def p(self) -> float:
        return self.indices.size / self.m


def _check_theta(model: LossModel, data: Dataset, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    n = model.n_params(data)
    if theta.ndim != 1 or theta.shape[0] != n:
        raise DimensionError("theta", n, theta.shape)
    return theta


def _rows(data: Dataset, idx):
    if idx is None:
        return data.features, data.labels
    return data.features[idx], data.labels[idx]


def _softmax_probs(W, X):
    return softmax(X @ W.T, axis=1)


def sample_losses(model: LossModel, data: Dataset, theta, idx=None) -> np.ndarray:
    """Per-sample losses ``l(z_i; theta)`` (no regularizer)."""
    theta = _check_theta(model, data, theta)
    X, y = _rows(data, idx)
    if model.family == "binary_logistic":
        z = X @ theta
        return np.logaddexp(0.0, z) - y * z
    if model.family == "quadratic":
        r = X @ theta - y
        return 0.5 * r * r
    W = theta.reshape(data.class_count, data.d)
    S = X @ W.T
    return logsumexp(S, axis=1) - S[np.arange(len(y)), y]


def total_loss(model: LossModel, data: Dataset, theta) -> float:
    """``(1/m) * sum_i l(z_i; theta) + (l2/2) * ||theta||^2``."""
    theta = _check_theta(model, data, theta)
    return float(np.mean(sample_losses(model, data, theta))
                 + 0.5 * model.l2_strength * theta @ theta)


def weighted_loss(model: LossModel, data: Dataset, theta, weights=None) -> float:
    theta = _check_theta(model, data, theta)
    losses = sample_losses(model, data, theta)
    if weights is not None:
        losses = losses * weights
    return float(np.sum(losses) / data.m + 0.5 * model.l2_strength * theta @ theta)


def _residual_factors(model, data, theta, idx=None):
    """Gradient of the loss with respect to the linear predictor(s)."""
    X, y = _rows(data, idx)
    if model.family == "binary_logistic":
        return expit(X @ theta) - y
    if model.family == "quadratic":
        return X @ theta - y
    P = _softmax_probs(theta.reshape(data.class_count, data.d), X)
    P[np.arange(len(y)), y] -= 1.0
    return P


def per_sample_gradients(model: LossModel, data: Dataset, theta, idx=None,
                         include_l2: bool = False) -> np.ndarray:
    """Stack of per-sample gradients, shape ``(n, n_params)``.

    ``include_l2`` adds each sample's equal share of the regularizer, i.e. the
    gradient of ``l(z_i) + (l2/2)||theta||^2``.
    """
    theta = _check_theta(model, data, theta)
    X, _ = _rows(data, idx)
    r = _residual_factors(model, data, theta, idx)
    if model.family == "softmax":
        G = (r[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
    else:
        G = r[:, None] * X
    if include_l2:
        G += model.l2_strength * theta
    return G


def per_sample_gradient(model: LossModel, data: Dataset, theta, i: int) -> np.ndarray:
    if not 0 <= i < data.m:
        raise IndexError(f"sample index {i} out of range for m={data.m}")
    return per_sample_gradients(model, data, theta, [i])[0]


def sample_gradient(model: LossModel, data: Dataset, theta, z: Sample) -> np.ndarray:
    """Gradient of the loss at a single (possibly held-out) sample."""
    one = Dataset(np.asarray(z.x, dtype=np.float64).reshape(1, -1), np.array([z.y]),
                  data.class_count, "z")
    return per_sample_gradients(model, one, theta)[0]


def sample_loss(model: LossModel, data: Dataset, theta, z: Sample) -> float:
    one = Dataset(np.asarray(z.x, dtype=np.float64).reshape(1, -1), np.array([z.y]),
                  data.class_count, "z")
    return float(sample_losses(model, one, theta)[0])


def group_gradient_sum(model: LossModel, data: Dataset, theta, weights,
                       include_l2: bool = False) -> np.ndarray:
    """``sum_i weights[i] * grad l(z_i)`` without forming the per-sample stack."""
    theta = _check_theta(model, data, theta)
    weights = np.asarray(weights, dtype=np.float64)
    r = _residual_factors(model, data, theta)
    X = data.features
    if model.family == "softmax":
        g = ((r * weights[:, None]).T @ X).ravel()
    else:
        g = X.T @ (r * weights)
    if include_l2:
        g += model.l2_strength * weights.sum() * theta
    return g


def total_gradient(model: LossModel, data: Dataset, theta, weights=None) -> np.ndarray:
    """Gradient of ``(1/m) sum w_i l_i + (l2/2)||theta||^2`` (``w = 1`` by default)."""
    theta = _check_theta(model, data, theta)
    w = np.ones(data.m) if weights is None else np.asarray(weights, dtype=np.float64)
    return group_gradient_sum(model, data, theta, w) / data.m + model.l2_strength * theta


def _curvature(model, data, theta, idx=None):
    X, _ = _rows(data, idx)
    if model.family == "binary_logistic":
        s = expit(X @ theta)
        return s * (1.0 - s)
    if model.family == "quadratic":
        return np.ones(X.shape[0])
    return _softmax_probs(theta.reshape(data.class_count, data.d), X)


def weighted_hvp(model: LossModel, data: Dataset, theta, v, weights,
                 include_l2: bool = False) -> np.ndarray:
    """``sum_i weights[i] * hess l(z_i) @ v`` (raw sum, no scaling).

    The regularizer is left out unless ``include_l2`` asks for each sample's
    share ``l2 * weights[i] * v``. Damping is never added here.
    """
    theta = _check_theta(model, data, theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionError("v", theta.shape, v.shape)
    weights = np.asarray(weights, dtype=np.float64)
    if include_l2:
        return (weighted_hvp(model, data, theta, v, weights)
                + model.l2_strength * weights.sum() * v)
    keep = np.flatnonzero(weights)
    if keep.size == 0:
        return np.zeros_like(theta)
    X = data.features[keep]
    w = weights[keep]
    c = _curvature(model, data, theta, keep)
    if model.family == "softmax":
        K, d = data.class_count, data.d
        U = X @ v.reshape(K, d).T                     # (n, K) = V x_i
        Q = c * U - c * np.sum(c * U, axis=1, keepdims=True)
        return ((Q * w[:, None]).T @ X).ravel()
    return X.T @ (w * c * (X @ v))


def hvp(model: LossModel, data: Dataset, theta, v, subset=None) -> np.ndarray:
    """Hessian-vector product.

    With ``subset=None`` this is the full-objective Hessian including the L2
    term and the damping: ``((1/m) sum_i H_i + (l2 + damping) I) v``.
    With a :class:`GroupSpec` (or index array) it is the raw sum
    ``sum_{i in subset} H_i v``: no ``1/m``, no L2 term, no damping.
    """
    theta = _check_theta(model, data, theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise DimensionError("v", theta.shape, v.shape)
    if subset is None:
        Hv = weighted_hvp(model, data, theta, v, np.ones(data.m)) / data.m
        return Hv + (model.l2_strength + model.hessian_damping) * v
    idx = subset.indices if isinstance(subset, GroupSpec) else np.asarray(subset, dtype=np.int64)
    w = np.zeros(data.m)
    np.add.at(w, idx, 1.0)
    return weighted_hvp(model, data, theta, v, w)


def per_sample_hessian_forms(model: LossModel, data: Dataset, theta, a, b,
                             include_l2: bool = False) -> np.ndarray:
    """Vector of bilinear forms ``a^T hess l(z_i) b`` for every training sample."""
    theta = _check_theta(model, data, theta)
    X = data.features
    c = _curvature(model, data, theta)
    if model.family == "softmax":
        K, d = data.class_count, data.d
        Ua = X @ np.reshape(a, (K, d)).T
        Ub = X @ np.reshape(b, (K, d)).T
        out = np.sum(c * Ua * Ub, axis=1) - np.sum(c * Ua, axis=1) * np.sum(c * Ub, axis=1)
    else:
        out = c * (X @ a) * (X @ b)
    if include_l2:
        out += model.l2_strength * float(np.dot(a, b))
    return out


def hessian_matrix(model: LossModel, data: Dataset, theta, subset=None) -> np.ndarray:
    """Dense Hessian assembled column by column from :func:`hvp`. Small problems only."""
    theta = _check_theta(model, data, theta)
    n = theta.size
    eye = np.eye(n)
    return np.column_stack([hvp(model, data, theta, eye[:, j], subset) for j in range(n)])


def predict(model: LossModel, data: Dataset, theta, X=None) -> np.ndarray:
    """Class predictions (classification) or fitted values (quadratic)."""
    theta = _check_theta(model, data, theta)
    X = data.features if X is None else np.atleast_2d(X)
    if model.family == "binary_logistic":
        return (X @ theta > 0).astype(np.int64)
    if model.family == "quadratic":
        return X @ theta
    return np.argmax(X @ theta.reshape(data.class_count, data.d).T, axis=1)


def as_sample(z) -> Sample:
    if isinstance(z, Sample):
        return z
    if isinstance(z, Dataset):
        if z.m != 1:
            raise ValueError("a test dataset passed as a sample must have exactly one row")
        return z.sample(0)
    x, y = z
    return Sample(np.asarray(x, dtype=np.float64), y)


def ensure_group(U, m: int) -> GroupSpec:
    if isinstance(U, GroupSpec):
        if U.m != m:
            raise DimensionError("group.m", m, U.m)
        return U
    return GroupSpec(np.asarray(list(U) if not isinstance(U, np.ndarray) else U), m)


__all__: Sequence[str] = [
    "FAMILIES", "DimensionError", "Sample", "Dataset", "LossModel", "GroupSpec",
    "sample_losses", "total_loss", "weighted_loss", "per_sample_gradients",
    "per_sample_gradient", "sample_gradient", "sample_loss", "group_gradient_sum",
    "total_gradient", "weighted_hvp", "hvp", "per_sample_hessian_forms",
    "hessian_matrix", "predict", "as_sample", "ensure_group",
]
