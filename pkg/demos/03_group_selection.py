# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Finding the most influential group
#
# Choosing the size-`k` group whose removal hurts a test point most is a
# quadratic problem over 0/1 indicators. We relax it to the box `[0, 1]` with
# an L1 budget of `k`, climb it by projected gradient ascent and keep the `k`
# largest weights.
#
# Two baselines: the `k` samples with the largest individual influence
# (greedy first order), and the average over random groups.

# %%
from group_influence import LossModel, train
from group_influence.bench import select_test_point
from group_influence.data import SyntheticSpec, gen_synthetic
from group_influence.influence import HessianSolver
from group_influence.selection import (
    build_selection_problem,
    greedy_first_order_group,
    random_group_baseline,
    select_group,
)

train_ds = gen_synthetic(SyntheticSpec("blobs", m=600, seed=0, add_bias=True))
test_ds = gen_synthetic(SyntheticSpec("blobs", m=100, seed=0, add_bias=True, stream="test"))
tm = train(LossModel("softmax", 0.01), train_ds)
z_t = test_ds.sample(select_test_point(tm, train_ds, test_ds))
solver = HessianSolver(tm, train_ds)

# %%
for frac in (0.1, 0.2, 0.3):
    k = int(frac * train_ds.m)
    problem = build_selection_problem(tm, train_ds, z_t, k, solver=solver)
    chosen = select_group(problem)
    greedy = greedy_first_order_group(tm, train_ds, z_t, k, solver=solver)
    rand_mean, _ = random_group_baseline(problem, 100)
    print(f"k = {k:3d}: relaxed QP {chosen.objective_discrete:.4f}   "
          f"greedy {problem.objective(problem.indicator(greedy.indices)):.4f}   "
          f"random {rand_mean:.5f}")

# %% [markdown]
# The greedy group ignores how removed samples interact through the Hessian.
# The quadratic objective accounts for it and never does worse here. On
# well-separated blobs the most influential samples barely interact, so the
# margin over greedy is small; both sit far above a random group.
