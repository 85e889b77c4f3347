"""Ground-truth oracle, Pearson, sweeps, reports and timing."""

import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from scipy.linalg import solve

from group_influence.bench import (
    SWEEP_COLUMNS,
    DegenerateCorrelationError,
    SweepCell,
    SweepConfig,
    SweepResult,
    emit_report,
    ground_truth_influence,
    pearson,
    retrain_without,
    run_sweep,
    scatter_svg,
    select_test_point,
    time_methods,
)
from group_influence.data import SyntheticSpec, gen_synthetic, sample_groups
from group_influence.influence import predict_removal_delta_theta, test_loss_influence
from group_influence.model import Dataset, GroupSpec, LossModel, Sample, sample_gradient
from group_influence.solver import ORACLE_CONFIG, train

from conftest import random_problem

SVG_NS = "{http://www.w3.org/2000/svg}"


class TestPearson:
    def test_perfect(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)

    def test_anti(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_hand_value(self):
        assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateCorrelationError):
            pearson([1, 1, 1], [1, 2, 3])
        with pytest.raises(DegenerateCorrelationError):
            pearson([1, 2, 3], [0.1 + 0.2, 0.3, 0.30000000000000004])

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [1])


class TestGroundTruth:
    def test_empty_group(self, two_point):
        tm, data = two_point
        assert ground_truth_influence(tm, data, GroupSpec([], 2), Sample(np.array([1.0]), 0.0)) == 0.0

    def test_equal_curvature_hand_value(self, equal_curvature):
        tm, data = equal_curvature
        z_t = Sample(np.array([1.0]), 0.0)  # y_t = theta* - 1
        assert ground_truth_influence(tm, data, [0], z_t) == pytest.approx(1.5, abs=1e-10)

    def test_leave_one_out_ridge(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            model, data = random_problem(rng, "quadratic", m=30, d=4, l2=0.1)
            tm = train(model, data, config=ORACLE_CONFIG)
            i = int(rng.integers(30))
            keep = np.delete(np.arange(30), i)
            X, y = data.features[keep], data.labels[keep]
            closed = solve(X.T @ X / 29 + 0.1 * np.eye(4), X.T @ y / 29)
            z_t = Sample(rng.standard_normal(4), float(rng.standard_normal()))
            want = 0.5 * (z_t.x @ closed - z_t.y) ** 2 - 0.5 * (z_t.x @ tm.theta_star - z_t.y) ** 2
            assert ground_truth_influence(tm, data, [i], z_t) == pytest.approx(want, abs=1e-8)

    def test_quadratic_exactness_projection(self):
        rng = np.random.default_rng(1)
        X = rng.choice([-1.3, 1.3], size=(20, 1))
        data = Dataset(X, rng.standard_normal(20))
        tm = train(LossModel("quadratic"), data, config=ORACLE_CONFIG)
        U = GroupSpec([2, 5, 7, 11], 20)
        z_t = Sample(np.array([0.7]), 0.2)
        g_t = sample_gradient(tm.model, data, tm.theta_star, z_t)
        new = retrain_without(tm, data, U)
        np.testing.assert_allclose(g_t @ (new.theta_star - tm.theta_star),
                                   g_t @ predict_removal_delta_theta(tm, data, U), atol=1e-8)

    def test_retrain_normalisation(self):
        # unit weights on the kept rows, divided by m - k, equals training on the subset
        rng = np.random.default_rng(2)
        model, data = random_problem(rng, "binary_logistic", m=40)
        tm = train(model, data, config=ORACLE_CONFIG)
        U = GroupSpec([0, 1, 2, 3, 4], 40)
        sub = data.subset(np.arange(5, 40))
        direct = train(model, sub, config=ORACLE_CONFIG)
        np.testing.assert_allclose(retrain_without(tm, data, U).theta_star, direct.theta_star, atol=1e-9)

    def test_sign_coherence(self):
        rng = np.random.default_rng(3)
        agree = total = 0
        for _ in range(30):
            model, data = random_problem(rng, "binary_logistic", m=int(rng.integers(30, 80)))
            tm = train(model, data, config=ORACLE_CONFIG)
            z_t = Sample(rng.standard_normal(data.d), float(rng.integers(0, 2)))
            for U in sample_groups(data, max(1, data.m // 10), 5, "random", int(rng.integers(1 << 30))):
                truth = ground_truth_influence(tm, data, U, z_t)
                if abs(truth) <= 1e-8:
                    continue
                total += 1
                agree += np.sign(truth) == np.sign(test_loss_influence(tm, data, U, z_t, "second"))
        assert total > 100
        assert agree >= 0.9 * total


class TestSweep:
    def test_replicated_quadratic_family(self):
        X = np.array([[np.sqrt(2.0)]] * 20 + [[1.0]] * 20)
        data = Dataset(X, np.array([0.0] * 20 + [2.0] * 20))
        test = Dataset(np.array([[1.0]]), np.array([0.0]))
        model = LossModel("quadratic")
        tm = train(model, data, config=ORACLE_CONFIG)
        wins = 0
        for seed in range(10):
            cfg = SweepConfig((0.5,), groups_per_size=30, trials=1, seed=seed, test_selection="index")
            cell = run_sweep(model, data, test, cfg, tm=tm).cells[0]
            wins += cell.pearson["second"] >= cell.pearson["first"]
        assert wins >= 8

    def test_degenerate_cell(self):
        data = Dataset(np.ones((10, 1)), np.ones(10))
        test = Dataset(np.array([[1.0]]), np.array([5.0]))
        res = run_sweep(LossModel("quadratic", 0.1), data, test,
                        SweepConfig((0.3,), groups_per_size=2, trials=1, test_selection="index"))
        assert res.cells[0].pearson == {"first": None, "first_unscaled": None, "second": None}
        assert res.cells[0].degenerate("second")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SweepConfig(())
        with pytest.raises(ValueError):
            SweepConfig((0.5, 0.1))
        with pytest.raises(ValueError):
            SweepConfig((0.1,), groups_per_size=1)
        with pytest.raises(ValueError):
            SweepConfig((1.0,))

    def test_jobs_do_not_change_results(self, tmp_path):
        data = gen_synthetic(SyntheticSpec(m=150, seed=2))
        test = gen_synthetic(SyntheticSpec(m=30, seed=2, stream="test"))
        model = LossModel("binary_logistic", 0.01)
        cfg = dict(group_fractions=(0.1, 0.4), groups_per_size=6, trials=2, seed=5)
        a = run_sweep(model, data, test, SweepConfig(**cfg, jobs=1))
        b = run_sweep(model, data, test, SweepConfig(**cfg, jobs=3))
        emit_report(a, tmp_path / "a")
        emit_report(b, tmp_path / "b")
        for name in ("sweep.csv", "groups.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert all(-1 <= c.pearson[m] <= 1 for c in a.cells for m in c.pearson)
        assert len(a.records) == 2 * 2 * 6

    def test_test_point_selection(self):
        rng = np.random.default_rng(4)
        model, data = random_problem(rng, "binary_logistic", m=60)
        tm = train(model, data)
        test = Dataset(np.vstack([data.features[:3], -data.features[:3]]),
                       np.concatenate([data.labels[:3], data.labels[:3]]), 2)
        idx = select_test_point(tm, data, test)
        pred = (test.features @ tm.theta_star > 0).astype(int)
        assert pred[idx] != test.labels[idx]
        assert np.all(pred[:idx] == test.labels[:idx])
        assert select_test_point(tm, data, test, "index", 2) == 2
        with pytest.raises(IndexError):
            select_test_point(tm, data, test, "index", 6)

    def test_highest_loss_fallback(self):
        data = Dataset(np.array([[1.0], [-1.0]]), np.array([1, 0]), 2)
        tm = train(LossModel("binary_logistic", 0.1), data)
        test = Dataset(np.array([[3.0], [0.5], [-2.0]]), np.array([1, 1, 0]), 2)
        assert select_test_point(tm, data, test) == 1


class TestReport:
    def test_empty_result(self, tmp_path):
        emit_report(SweepResult("d", "random"), tmp_path)
        assert (tmp_path / "sweep.csv").read_text().splitlines() == [",".join(SWEEP_COLUMNS)]

    def test_one_cell(self, tmp_path):
        cell = SweepCell(0.5, 0, 7, 10, {"first": 0.9, "first_unscaled": 0.9, "second": None},
                         {"first": 1.0, "first_unscaled": 0.5, "second": 1.2}, 1.1,
                         {"first": 0.01, "first_unscaled": 0.01, "second": 0.02})
        res = SweepResult("d", "random", cells=[cell])
        emit_report(res, tmp_path)
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert [r["method"] for r in rows] == ["first", "first_unscaled", "second"]
        assert rows[2]["pearson"] == "degenerate"
        assert rows[0]["wall_s"] == ""
        emit_report(res, tmp_path, include_timings=True)
        rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
        assert float(rows[2]["wall_s"]) == 0.02

    def test_svg_structure(self, tmp_path):
        data = gen_synthetic(SyntheticSpec(m=80, seed=1))
        test = gen_synthetic(SyntheticSpec(m=20, seed=1, stream="test"))
        res = run_sweep(LossModel("binary_logistic", 0.01), data, test,
                        SweepConfig((0.25,), groups_per_size=5, trials=1))
        files = emit_report(res, tmp_path)
        svgs = [p for p in files if p.suffix == ".svg"]
        assert len(svgs) == 3
        for p in svgs:
            root = ET.parse(p).getroot()
            assert root.tag == SVG_NS + "svg"
            assert len(root.findall(SVG_NS + "circle")) == 5
            ident = [e for e in root.iter(SVG_NS + "line") if e.get("class") == "identity"]
            assert len(ident) == 1
            x1, y1, x2, y2 = (float(ident[0].get(k)) for k in ("x1", "y1", "x2", "y2"))
            assert x2 - x1 == pytest.approx(y1 - y2)  # slope one in data space

    def test_svg_escapes_text(self):
        root = ET.fromstring(scatter_svg([1, 2], [1, 2], title="a < b & c"))
        assert root.find(SVG_NS + "title").text == "a < b & c"


class TestTiming:
    def test_second_order_costs_more(self):
        data = gen_synthetic(SyntheticSpec(m=3000, d=30, seed=0))
        tm = train(LossModel("binary_logistic", 0.01), data)
        groups = sample_groups(data, 300, 12, "random", 0)
        t = time_methods(tm, data, groups, data.sample(0))
        assert t.ratio >= 1.0
        assert t.std_first_s >= 0 and t.std_second_s >= 0

    def test_needs_groups(self):
        data = gen_synthetic(SyntheticSpec(m=20))
        tm = train(LossModel("binary_logistic", 0.1), data)
        with pytest.raises(ValueError):
            time_methods(tm, data, [], data.sample(0))
