# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Removing half of a two-sample problem
#
# The smallest problem where first- and second-order group influence differ.
# Two quadratic samples:
#
# * `l1(theta) = theta^2` (feature `sqrt(2)`, target 0, curvature 2)
# * `l2(theta) = (theta - 2)^2 / 2` (feature 1, target 2, curvature 1)
#
# The optimum is `theta* = 2/3` and the Hessian of the mean loss is `3/2`.
# We remove the first sample, so `p = 1/2`.

# %%
import numpy as np

from group_influence import Dataset, GroupSpec, LossModel, train
from group_influence.bench import ground_truth_delta_theta
from group_influence.influence import predict_removal_delta_theta, term_decomposition, theta1, theta2
from group_influence.model import Sample
from group_influence.solver import ORACLE_CONFIG

data = Dataset(np.array([[np.sqrt(2.0)], [1.0]]), np.array([0.0, 2.0]))
tm = train(LossModel("quadratic"), data, config=ORACLE_CONFIG)
U = GroupSpec([0], data.m)
print("theta* =", tm.theta_star[0])

# %% [markdown]
# The first-order term only sees the removed gradient. The second-order term
# also notices that the removed sample was *more* curved than average, which
# makes the remaining problem flatter and the shift larger.

# %%
t1 = theta1(tm, data, U)
t2 = theta2(tm, data, U, t1)
pred = predict_removal_delta_theta(tm, data, U)
true = ground_truth_delta_theta(tm, data, U)
print(f"theta1 = {t1[0]: .6f}   (hand value -8/9 = {-8 / 9: .6f})")
print(f"theta2 = {t2[0]: .6f}   (hand value 8/27 = {8 / 27: .6f})")
print(f"first-order shift  {-t1[0]:.6f}  error {abs(-t1[0] - true[0]):.4f}")
print(f"second-order shift {pred[0]:.6f}  error {abs(pred[0] - true[0]):.4f}")
print(f"retrained shift    {true[0]:.6f}")

# %% [markdown]
# On a test point whose loss has unit gradient at `theta*`, the test-loss
# influence splits into an additive part and a pairwise part. At `p = 1/2`
# the additive coefficient `(1 - 2p)` vanishes, so everything sits in the
# pairwise term.

# %%
z_t = Sample(np.array([1.0]), tm.theta_star[0] - 1.0)
print("term1, term2 =", term_decomposition(tm, data, U, z_t))
