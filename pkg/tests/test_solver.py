"""Newton-CG training, conjugate gradients and the GTRC model file."""

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import solve

from group_influence.data import SyntheticSpec, gen_synthetic
from group_influence.model import Dataset, LossModel, hessian_matrix, hvp, total_gradient
from group_influence.solver import (
    CGError,
    ConvergenceError,
    ORACLE_CONFIG,
    TrainConfig,
    TrainedModel,
    cg_solve,
    inverse_hvp,
    load_model,
    save_model,
    train,
)

from conftest import random_problem


def spd(rng, n):
    M = rng.standard_normal((n, n))
    return M.T @ M + np.eye(n)


class TestCG:
    def test_identity(self):
        b = np.array([3.0, -1.0, 2.5])
        np.testing.assert_allclose(cg_solve(lambda v: v, b), b)

    def test_diagonal(self):
        np.testing.assert_allclose(cg_solve(lambda v: np.array([2.0, 4.0]) * v, np.array([2.0, 4.0])),
                                   [1.0, 1.0], rtol=1e-12)

    def test_zero_rhs(self):
        np.testing.assert_array_equal(cg_solve(lambda v: 2 * v, np.zeros(4)), np.zeros(4))

    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 20))
    def test_matches_dense_solve(self, seed, n):
        rng = np.random.default_rng(seed)
        A, b = spd(rng, n), rng.standard_normal(n)
        x = cg_solve(lambda v: A @ v, b, tol=1e-12, max_iters=10 * n + 50)
        ref = solve(A, b, assume_a="pos")
        assert np.linalg.norm(x - ref) <= 1e-8 * np.linalg.norm(ref)

    def test_residual_meets_tolerance(self):
        rng = np.random.default_rng(2)
        A, b = spd(rng, 15), rng.standard_normal(15)
        x = cg_solve(lambda v: A @ v, b, tol=1e-9, max_iters=200)
        assert np.linalg.norm(A @ x - b) <= 1e-9 * np.linalg.norm(b)

    def test_energy_decreases(self):
        # 0.5 x'Ax - b'x is the A-norm error up to a constant, so it may not go up
        rng = np.random.default_rng(4)
        A, b = spd(rng, 20), rng.standard_normal(20)
        _, info = cg_solve(lambda v: A @ v, b, tol=1e-12, max_iters=500, return_info=True)
        e = np.array(info.energies)
        assert info.iterations == len(e) - 1
        assert np.all(np.diff(e) <= 1e-12 * np.abs(e).max())

    def test_a_norm_error_decreases(self):
        rng = np.random.default_rng(5)
        A, b = spd(rng, 12), rng.standard_normal(12)
        ref = solve(A, b)
        # ||x_k - x*||_A^2 = 2 * energy_k + x*'Ax*
        _, info = cg_solve(lambda v: A @ v, b, tol=1e-12, max_iters=200, return_info=True)
        const = 0.5 * ref @ A @ ref
        a_err = np.sqrt(np.maximum(2 * (np.array(info.energies) + const), 0))
        assert np.all(np.diff(a_err) <= 1e-9 * a_err[0])

    def test_exhausted_iterations(self):
        rng = np.random.default_rng(6)
        A, b = spd(rng, 30), rng.standard_normal(30)
        with pytest.raises(CGError) as exc:
            cg_solve(lambda v: A @ v, b, tol=1e-14, max_iters=2)
        assert exc.value.residual_norm > 0

    def test_indefinite_operator(self):
        with pytest.raises(CGError):
            cg_solve(lambda v: np.array([1.0, -1.0]) * v, np.array([1.0, 1.0]))

    def test_non_finite_operator(self):
        with pytest.raises(CGError):
            cg_solve(lambda v: v * np.nan, np.ones(3))


class TestTrain:
    def test_ridge_one_sample(self):
        data = Dataset(np.array([[1.0]]), np.array([2.0]))
        tm = train(LossModel("quadratic", 1.0), data)
        assert tm.theta_star[0] == pytest.approx(1.0, abs=1e-12)

    def test_mean_of_two_targets(self):
        data = Dataset(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]))
        assert train(LossModel("quadratic"), data).theta_star[0] == pytest.approx(1.0, abs=1e-12)

    def test_gaussian_logistic_converges(self):
        data = gen_synthetic(SyntheticSpec("gaussian_binary", m=2000, seed=3))
        model = LossModel("binary_logistic", 0.1)
        tm = train(model, data)
        assert tm.final_grad_norm <= 1e-8
        assert np.linalg.norm(total_gradient(model, data, tm.theta_star)) <= 1e-8
        # independent check: plain gradient descent with step 1/L
        L = np.linalg.norm(data.features, 2) ** 2 / (4 * data.m) + 0.1
        theta = np.zeros(data.d)
        for _ in range(20000):
            g = total_gradient(model, data, theta)
            if np.linalg.norm(g) < 1e-10:
                break
            theta -= g / L
        assert np.linalg.norm(theta - tm.theta_star) <= 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        model, data = random_problem(rng, "softmax", m=60, d=4)
        a, b = train(model, data), train(model, data)
        assert a.theta_star.tobytes() == b.theta_star.tobytes()

    def test_unit_weights_equal_unweighted(self):
        rng = np.random.default_rng(1)
        model, data = random_problem(rng, "binary_logistic", m=50)
        a = train(model, data)
        b = train(model, data, weights=np.ones(data.m))
        assert a.theta_star.tobytes() == b.theta_star.tobytes()

    def test_warm_start_is_idempotent(self):
        rng = np.random.default_rng(2)
        model, data = random_problem(rng, "binary_logistic", m=80)
        cfg = TrainConfig(grad_tol=1e-8)
        tm = train(model, data, config=cfg)
        again = train(model, data, config=cfg, theta0=tm.theta_star)
        assert np.linalg.norm(again.theta_star - tm.theta_star) < cfg.grad_tol
        # one forced Newton step from the optimum barely moves
        H = hessian_matrix(model, data, tm.theta_star)
        step = solve(H, -total_gradient(model, data, tm.theta_star))
        assert np.linalg.norm(step) < cfg.grad_tol

    def test_oracle_tolerance_reached(self):
        rng = np.random.default_rng(3)
        model, data = random_problem(rng, "softmax", m=100, d=5)
        assert train(model, data, config=ORACLE_CONFIG).final_grad_norm <= 1e-10

    def test_no_convergence_reports_gradient(self):
        rng = np.random.default_rng(4)
        model, data = random_problem(rng, "binary_logistic", m=100)
        with pytest.raises(ConvergenceError) as exc:
            train(model, data, config=TrainConfig(grad_tol=1e-12, max_outer_iters=1))
        assert exc.value.grad_norm > 0

    def test_weights_length_checked(self):
        data = Dataset(np.ones((3, 1)), np.ones(3))
        with pytest.raises(ValueError):
            train(LossModel("quadratic"), data, weights=np.ones(2))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(grad_tol=0)
        with pytest.raises(ValueError):
            TrainConfig(cg_max_iters=0)

    def test_trained_model_is_frozen(self):
        tm = TrainedModel(np.ones(2), 0.0, 0, LossModel("quadratic"))
        with pytest.raises(ValueError):
            tm.theta_star[0] = 2.0


class TestInverseHVP:
    def test_recovers_vector(self):
        rng = np.random.default_rng(8)
        model, data = random_problem(rng, "binary_logistic", m=60, d=6)
        tm = train(model, data)
        v = rng.standard_normal(data.d)
        x = inverse_hvp(tm, data, hvp(model, data, tm.theta_star, v))
        assert np.linalg.norm(x - v) <= 1e-6 * np.linalg.norm(v)

    def test_two_sample_quadratic(self):
        data = Dataset(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]))
        tm = train(LossModel("quadratic"), data)
        np.testing.assert_allclose(inverse_hvp(tm, data, np.array([4 / 3])), [4 / 3], rtol=1e-12)

    def test_dense_oracle_d20(self):
        rng = np.random.default_rng(9)
        model, data = random_problem(rng, "binary_logistic", m=200, d=20, l2=0.01)
        tm = train(model, data)
        b = rng.standard_normal(20)
        ref = solve(hessian_matrix(model, data, tm.theta_star), b, assume_a="pos")
        assert np.linalg.norm(inverse_hvp(tm, data, b) - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_damping_enters(self):
        data = Dataset(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]))
        tm = train(LossModel("quadratic", 0.0, 1.0), data)
        np.testing.assert_allclose(inverse_hvp(tm, data, np.array([2.0])), [1.0], rtol=1e-12)


class TestModelFile:
    def test_round_trip_softmax(self, tmp_path):
        rng = np.random.default_rng(10)
        model, data = random_problem(rng, "softmax", m=40, d=3, classes=4)
        tm = train(model, data)
        path = tmp_path / "m.gtrc"
        save_model(tm, path, data.d, data.class_count)
        back = load_model(path)
        assert back.theta_star.tobytes() == tm.theta_star.tobytes()
        assert back.model.family == "softmax" and back.model.l2_strength == model.l2_strength

    def test_header_layout(self, tmp_path):
        tm = TrainedModel(np.array([1.5, -2.0]), 0.0, 0, LossModel("quadratic", 0.25))
        path = tmp_path / "q.gtrc"
        save_model(tm, path, 2)
        raw = path.read_bytes()
        assert raw[:4] == b"GTRC"
        assert struct.unpack_from("<H", raw, 4) == (1,)
        assert raw[6] == 2  # quadratic
        assert struct.unpack_from("<d", raw, 7) == (0.25,)
        assert struct.unpack_from("<II", raw, 15) == (2, 1)
        assert struct.unpack_from("<2d", raw, 23) == (1.5, -2.0)
        assert len(raw) == 23 + 16

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(b"XXXX" + bytes(40))
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_truncated_payload(self, tmp_path):
        tm = TrainedModel(np.ones(3), 0.0, 0, LossModel("quadratic"))
        path = tmp_path / "t.gtrc"
        save_model(tm, path, 3)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload"):
            load_model(path)

    def test_size_mismatch_on_save(self, tmp_path):
        tm = TrainedModel(np.ones(3), 0.0, 0, LossModel("quadratic"))
        with pytest.raises(ValueError):
            save_model(tm, tmp_path / "x", 2)
