"""Tests for JSON configuration loading and the simulation adapters."""

import copy
import json

import numpy as np
import pytest

from fbsweep.config import (
    DEFAULT_SLICE_FRACTIONS,
    SolverSettings,
    bundled_config_path,
    load_config,
    obstacle_running_cost,
    parse_config,
    simulation_cost,
    simulation_dynamics,
)
from fbsweep.core import ProblemError, as_time_fn


def lqg_doc():
    return json.loads(bundled_config_path("lqg").read_text())


def obstacle_doc():
    return json.loads(bundled_config_path("obstacle").read_text())


class TestBundledConfigs:
    def test_lqg_parses(self):
        cfg = parse_config(lqg_doc())
        assert cfg.family == "lqg"
        assert cfg.lqg_problem is not None
        assert cfg.lqg_problem.d_x == 1
        assert cfg.lqg_problem.d_z == 1
        assert cfg.lqg_problem.horizon == 10.0
        assert cfg.solver.tol == 0.0
        assert cfg.seed == 20240817

    def test_obstacle_parses(self):
        cfg = parse_config(obstacle_doc())
        assert cfg.family == "obstacle-grid"
        assert cfg.grid is not None
        assert cfg.grid.shape == (101, 101)
        assert cfg.grid.n_t == 1000
        assert cfg.grid_problem is not None
        assert cfg.slice_times == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_unknown_bundle_name(self):
        with pytest.raises(ProblemError, match="no bundled config"):
            bundled_config_path("nonexistent")

    def test_default_slice_times(self):
        doc = obstacle_doc()
        del doc["slice_times"]
        cfg = parse_config(doc)
        horizon = doc["domain"]["horizon"]
        assert cfg.slice_times == [f * horizon for f in DEFAULT_SLICE_FRACTIONS]


class TestValidation:
    def test_unknown_family(self):
        with pytest.raises(ProblemError, match="unknown config family"):
            parse_config({"family": "banana"})

    def test_missing_field(self):
        doc = lqg_doc()
        del doc["A"]
        with pytest.raises(ProblemError, match="'A'"):
            parse_config(doc)

    def test_wrong_shape(self):
        doc = lqg_doc()
        doc["Q"] = [[1.0]]
        with pytest.raises(ProblemError, match="shape"):
            parse_config(doc)

    def test_non_finite_entry(self):
        doc = lqg_doc()
        doc["A"][0][0] = float("nan")
        with pytest.raises(ProblemError, match="non-finite"):
            parse_config(doc)

    def test_non_numeric_entry(self):
        doc = lqg_doc()
        doc["A"][0][0] = "fast"
        with pytest.raises(ProblemError, match="not numeric"):
            parse_config(doc)

    def test_invalid_problem_rejected(self):
        doc = lqg_doc()
        doc["R"] = [[0.0, 0.0], [0.0, 0.0]]
        with pytest.raises(ProblemError, match="invalid problem"):
            parse_config(doc)

    def test_unknown_solver_key(self):
        doc = lqg_doc()
        doc["solver"]["warp"] = 9
        with pytest.raises(ProblemError, match="unknown solver setting"):
            parse_config(doc)

    def test_negative_solver_values(self):
        doc = lqg_doc()
        doc["solver"]["max_iters"] = -1
        with pytest.raises(ProblemError, match="max_iters"):
            parse_config(doc)
        doc = lqg_doc()
        doc["solver"]["tol"] = -1e-6
        with pytest.raises(ProblemError, match="tol"):
            parse_config(doc)

    def test_obstacle_window_order(self):
        doc = obstacle_doc()
        doc["obstacle"]["t_on"] = 0.7
        with pytest.raises(ProblemError, match="window"):
            parse_config(doc)

    def test_obstacle_band_order(self):
        doc = obstacle_doc()
        doc["obstacle"]["inner"] = 2.5
        with pytest.raises(ProblemError, match="band"):
            parse_config(doc)

    def test_positivity_requirements(self):
        for key in ("control_cost", "control_bound", "initial_cov"):
            doc = obstacle_doc()
            doc[key] = 0.0
            with pytest.raises(ProblemError, match=key):
                parse_config(doc)

    def test_slice_time_outside_horizon(self):
        doc = obstacle_doc()
        doc["slice_times"] = [0.0, 1.5]
        with pytest.raises(ProblemError, match="slice time"):
            parse_config(doc)

    def test_domain_shape_entries(self):
        doc = obstacle_doc()
        doc["domain"]["shape"] = [101]
        with pytest.raises(ProblemError, match="two entries"):
            parse_config(doc)


class TestLoadConfig:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ProblemError, match="not found"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ProblemError, match="not valid JSON"):
            load_config(path)

    def test_non_object_root(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ProblemError, match="JSON object"):
            load_config(path)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "lqg.json"
        path.write_text(json.dumps(lqg_doc()))
        cfg = load_config(path)
        assert cfg.family == "lqg"


class TestObstacleRunningCost:
    def test_window_and_band(self):
        cost = obstacle_running_cost(1000.0, 0.3, 0.6, 0.1, 2.0)
        x = np.array([0.0, 0.05, 0.1, 1.0, 2.0, 2.5, -1.5])
        inside = cost(0.45, [x, np.zeros_like(x)])
        np.testing.assert_array_equal(
            inside, [0.0, 0.0, 1000.0, 1000.0, 1000.0, 0.0, 1000.0]
        )
        before = cost(0.2, [x, np.zeros_like(x)])
        np.testing.assert_array_equal(before, np.zeros_like(x))
        after = cost(0.7, [x, np.zeros_like(x)])
        np.testing.assert_array_equal(after, np.zeros_like(x))


class TestSimulationAdapters:
    def test_lqg_dynamics_match_matrices(self):
        cfg = parse_config(lqg_doc())
        dyn = simulation_dynamics(cfg)
        problem = cfg.lqg_problem
        s = np.array([[0.5, -1.0], [2.0, 0.25]])
        u = np.array([[1.0, 0.0], [0.0, -2.0]])
        drift = dyn.drift(0.3, s, u)
        A = np.asarray(as_time_fn(problem.A)(0.3))
        B = np.asarray(as_time_fn(problem.B)(0.3))
        np.testing.assert_allclose(drift, s @ A.T + u @ B.T, atol=1e-14)
        sigma = np.asarray(as_time_fn(problem.sigma)(0.3))
        np.testing.assert_allclose(dyn.diffusion(0.3, s, u), sigma)

    def test_lqg_cost_matches_quadratic_form(self):
        cfg = parse_config(lqg_doc())
        cost = simulation_cost(cfg)
        problem = cfg.lqg_problem
        rng = np.random.default_rng(7)
        s = rng.normal(size=(5, 2))
        u = rng.normal(size=(5, 2))
        running = cost.running_cost(0.2, s, u)
        Q = np.asarray(as_time_fn(problem.Q)(0.2))
        R = np.asarray(as_time_fn(problem.R)(0.2))
        expected = np.einsum("ni,ij,nj->n", s, Q, s) + np.einsum(
            "ni,ij,nj->n", u, R, u
        )
        np.testing.assert_allclose(running, expected, atol=1e-12)
        terminal = cost.terminal_cost(s)
        np.testing.assert_allclose(
            terminal, np.einsum("ni,ij,nj->n", s, np.asarray(problem.P), s),
            atol=1e-12,
        )

    def test_obstacle_dynamics_stack_control_and_state(self):
        cfg = parse_config(obstacle_doc())
        dyn = simulation_dynamics(cfg)
        s = np.array([[0.5, -1.0], [2.0, 0.25]])
        u = np.array([[3.0], [-1.0]])
        drift = dyn.drift(0.1, s, u)
        np.testing.assert_allclose(drift[:, 0], u[:, 0])
        np.testing.assert_allclose(drift[:, 1], s[:, 0])
        np.testing.assert_allclose(dyn.diffusion(0.1, s, u), np.eye(2))
        assert dyn.d_w == 2

    def test_obstacle_cost_matches_grid_problem(self):
        cfg = parse_config(obstacle_doc())
        cost = simulation_cost(cfg)
        s = np.array([[1.0, 0.2], [0.05, -3.0], [2.4, 1.0]])
        u = np.array([[2.0], [0.0], [-1.0]])
        running = cost.running_cost(0.45, s, u)
        np.testing.assert_allclose(running, [1000.0 + 4.0, 0.0, 1.0])
        off_window = cost.running_cost(0.9, s, u)
        np.testing.assert_allclose(off_window, [4.0, 0.0, 1.0])
        terminal = cost.terminal_cost(s)
        np.testing.assert_allclose(terminal, 10.0 * s[:, 0] ** 2)


class TestSolverSettings:
    def test_defaults(self):
        settings = SolverSettings()
        assert settings.max_iters == 50
        assert settings.tol == 1e-6
        assert settings.method == "rk4"

    def test_document_is_kept(self):
        doc = obstacle_doc()
        snapshot = copy.deepcopy(doc)
        cfg = parse_config(doc)
        assert cfg.document == snapshot
