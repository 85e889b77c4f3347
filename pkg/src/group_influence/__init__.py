"""Second-order group influence for convex empirical-risk models."""

from .model import (
    Dataset,
    DimensionError,
    GroupSpec,
    LossModel,
    Sample,
    hvp,
    per_sample_gradient,
    total_gradient,
    total_loss,
)
from .solver import (
    CGError,
    ConvergenceError,
    TrainConfig,
    TrainedModel,
    cg_solve,
    inverse_hvp,
    load_model,
    save_model,
    train,
)
from .influence import (
    HessianSolver,
    InfluenceReport,
    group_influence,
    individual_influence,
    predict_removal_delta_theta,
    term_decomposition,
    test_loss_influence,
    theta1,
    theta2,
)
from .selection import (
    SelectionProblem,
    SelectionResult,
    build_selection_problem,
    greedy_first_order_group,
    project_l1,
    select_group,
)
from .data import SyntheticSpec, gen_synthetic, load_csv_labeled, load_mnist_idx, sample_groups
from .bench import SweepConfig, SweepResult, emit_report, ground_truth_influence, pearson, run_sweep

__version__ = "0.1.0"
