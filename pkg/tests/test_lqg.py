"""Tests for the Riccati-sweep solver."""

import numpy as np
import pytest

from fbsweep.core import (
    DivergenceError,
    LqgProblem,
    ProblemError,
    SingularPrecisionError,
)
from fbsweep.lqg import (
    fbsm_lqg,
    inference_gain,
    lambda_rhs,
    lqg_control,
    lqg_objective,
    mu_rhs,
    pi_rhs,
    psi_rhs,
    solve_mu,
    solve_psi,
)


def tracking_problem(horizon=10.0, dt=0.01):
    """Unstable scalar state with an integrating noisy-observation memory."""
    return LqgProblem(
        A=np.array([[1.0, 0.0], [1.0, 0.0]]),
        B=np.eye(2),
        sigma=np.eye(2),
        Q=np.diag([1.0, 0.0]),
        R=np.eye(2),
        P=np.zeros((2, 2)),
        mu0=np.zeros(2),
        lambda0=np.eye(2),
        horizon=horizon,
        dt=dt,
        d_x=1,
        d_z=1,
    )


def scalar_problem(**overrides):
    kwargs = dict(
        A=np.array([[1.0]]),
        B=np.array([[1.0]]),
        sigma=np.array([[1.0]]),
        Q=np.array([[1.0]]),
        R=np.array([[1.0]]),
        P=np.array([[0.0]]),
        mu0=np.array([0.0]),
        lambda0=np.array([[1.0]]),
        horizon=20.0,
        dt=0.01,
        d_x=1,
        d_z=0,
    )
    kwargs.update(overrides)
    return LqgProblem(**kwargs)


class TestInferenceGain:
    def test_diagonal_precision_kills_inference_term(self):
        K = inference_gain(np.eye(2), d_x=1)
        assert np.allclose(K, [[0.0, 0.0], [0.0, 1.0]])

    def test_two_by_two_value(self):
        K = inference_gain(np.array([[2.0, 1.0], [1.0, 1.0]]), d_x=1)
        assert np.allclose(K, [[0.0, -0.5], [0.0, 1.0]])

    def test_conditional_mean_property(self):
        # K(s - mu) + mu must equal the Gaussian conditional mean of s
        # given the memory block, computed independently from covariances.
        rng = np.random.default_rng(3)
        for _ in range(20):
            root = rng.normal(size=(4, 4))
            lam = root @ root.T + 4 * np.eye(4)
            d_x = 2
            K = inference_gain(lam, d_x)
            cov = np.linalg.inv(lam)
            gain_cov = cov[:d_x, d_x:] @ np.linalg.inv(cov[d_x:, d_x:])
            mu = rng.normal(size=4)
            s = rng.normal(size=4)
            expect_x = mu[:d_x] + gain_cov @ (s[d_x:] - mu[d_x:])
            got = K @ (s - mu) + mu
            assert np.allclose(got[:d_x], expect_x, atol=1e-12)
            assert np.allclose(got[d_x:], s[d_x:], atol=1e-12)

    def test_singular_state_block(self):
        with pytest.raises(SingularPrecisionError):
            inference_gain(np.array([[0.0, 0.0], [0.0, 1.0]]), d_x=1)

    def test_dimension_mismatch(self):
        with pytest.raises(ProblemError):
            inference_gain(np.eye(3), d_x=1, d_z=1)


class TestRhsFunctions:
    def test_psi_rhs_at_zero_is_q(self):
        prob = tracking_problem()
        assert np.allclose(psi_rhs(prob, 0.0, np.zeros((2, 2))), np.diag([1.0, 0.0]))

    def test_psi_rhs_stationary_root(self):
        prob = scalar_problem()
        root = 1.0 + np.sqrt(2.0)
        assert abs(psi_rhs(prob, 0.0, np.array([[root]]))[0, 0]) < 1e-12

    def test_rhs_preserve_symmetry(self):
        prob = tracking_problem()
        rng = np.random.default_rng(11)
        for _ in range(20):
            sym = rng.normal(size=(2, 2))
            sym = sym + sym.T
            pd = sym @ sym.T + 3 * np.eye(2)
            for out in (
                psi_rhs(prob, 0.3, sym),
                pi_rhs(prob, 0.3, sym, inference_gain(pd, 1)),
                lambda_rhs(prob, 0.3, pd, sym),
            ):
                assert np.abs(out - out.T).max() < 1e-10

    def test_pi_rhs_at_zero_is_q(self):
        prob = tracking_problem()
        out = pi_rhs(prob, 0.0, np.zeros((2, 2)), np.eye(2))
        assert np.allclose(out, np.diag([1.0, 0.0]))

    def test_pi_rhs_with_identity_gain_recovers_psi_rhs(self):
        prob = tracking_problem()
        rng = np.random.default_rng(5)
        for _ in range(100):
            sym = rng.normal(size=(2, 2))
            sym = sym + sym.T
            diff = pi_rhs(prob, 0.7, sym, np.eye(2)) - psi_rhs(prob, 0.7, sym)
            assert np.abs(diff).max() <= 1e-12

    def test_pi_rhs_hand_value(self):
        prob = tracking_problem()
        K = inference_gain(np.array([[2.0, 1.0], [1.0, 1.0]]), d_x=1)
        out = pi_rhs(prob, 0.0, np.eye(2), K)
        assert np.allclose(out, [[3.0, 1.5], [1.5, -0.75]])

    def test_lambda_rhs_pure_diffusion(self):
        prob = tracking_problem(horizon=1.0)
        prob = LqgProblem(
            A=np.zeros((2, 2)), B=prob.B, sigma=np.eye(2), Q=prob.Q, R=prob.R,
            P=prob.P, mu0=prob.mu0, lambda0=prob.lambda0, horizon=1.0, dt=0.01,
            d_x=1, d_z=1,
        )
        lam = np.array([[2.0, 1.0], [1.0, 1.0]])
        assert np.allclose(lambda_rhs(prob, 0.0, lam, np.zeros((2, 2))), -lam @ lam)

    def test_lambda_rhs_pure_lyapunov(self):
        base = tracking_problem(horizon=1.0)
        prob = LqgProblem(
            A=base.A, B=base.B, sigma=np.zeros((2, 2)), Q=base.Q, R=base.R,
            P=base.P, mu0=base.mu0, lambda0=base.lambda0, horizon=1.0, dt=0.01,
            d_x=1, d_z=1,
        )
        A = np.asarray(base.A)
        lam = np.array([[2.0, 0.5], [0.5, 1.0]])
        expect = -A.T @ lam - lam @ A
        assert np.allclose(lambda_rhs(prob, 0.0, lam, np.zeros((2, 2))), expect)

    def test_lambda_rhs_hand_value(self):
        prob = tracking_problem()
        out = lambda_rhs(prob, 0.0, np.eye(2), np.zeros((2, 2)))
        assert np.allclose(out, [[-3.0, -1.0], [-1.0, -1.0]])

    def test_mu_rhs_zero_mean(self):
        prob = tracking_problem()
        assert np.allclose(mu_rhs(prob, 0.0, np.zeros(2), np.eye(2)), 0.0)

    def test_mu_rhs_zero_psi_gives_drift(self):
        prob = tracking_problem()
        mu = np.array([1.0, 2.0])
        assert np.allclose(mu_rhs(prob, 0.0, mu, np.zeros((2, 2))), [1.0, 1.0])

    def test_mu_rhs_scalar_value(self):
        prob = scalar_problem()
        out = mu_rhs(prob, 0.0, np.array([3.0]), np.array([[2.0]]))
        assert np.allclose(out, [-3.0])


class TestSolvePsi:
    def test_zero_cost_fixed_point(self):
        prob = tracking_problem(horizon=1.0)
        prob = LqgProblem(
            A=prob.A, B=prob.B, sigma=prob.sigma, Q=np.zeros((2, 2)), R=prob.R,
            P=np.zeros((2, 2)), mu0=prob.mu0, lambda0=prob.lambda0,
            horizon=1.0, dt=0.01, d_x=1, d_z=1,
        )
        assert np.abs(solve_psi(prob)).max() == 0.0

    def test_scalar_stationary_limit(self):
        psi = solve_psi(scalar_problem())
        assert abs(psi[0, 0, 0] - (1.0 + np.sqrt(2.0))) <= 1e-6

    def test_terminal_condition_and_symmetry(self):
        prob = tracking_problem(horizon=2.0)
        prob = LqgProblem(
            A=prob.A, B=prob.B, sigma=prob.sigma, Q=prob.Q, R=prob.R,
            P=np.diag([0.5, 0.25]), mu0=prob.mu0, lambda0=prob.lambda0,
            horizon=2.0, dt=0.01, d_x=1, d_z=1,
        )
        psi = solve_psi(prob)
        assert np.allclose(psi[-1], np.diag([0.5, 0.25]))
        assert np.abs(psi - np.swapaxes(psi, 1, 2)).max() < 1e-12

    def test_divergence_raises(self):
        prob = scalar_problem(B=np.array([[0.0]]), horizon=400.0, dt=0.1)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                solve_psi(prob)


class TestSolveMu:
    def test_zero_initial_mean_stays_zero(self):
        prob = tracking_problem(horizon=1.0)
        psi = solve_psi(prob)
        assert np.abs(solve_mu(prob, psi)).max() == 0.0

    def test_uncontrolled_exponential(self):
        prob = scalar_problem(B=np.array([[0.0]]), mu0=np.array([1.0]), horizon=1.0)
        psi = solve_psi(prob)
        mu = solve_mu(prob, psi)
        assert abs(mu[-1, 0] - np.e) < 1e-8


class TestFbsmLqg:
    def test_zero_cost_zero_fixed_point(self):
        base = tracking_problem(horizon=1.0)
        prob = LqgProblem(
            A=base.A, B=base.B, sigma=base.sigma, Q=np.zeros((2, 2)), R=base.R,
            P=np.zeros((2, 2)), mu0=base.mu0, lambda0=base.lambda0,
            horizon=1.0, dt=0.01, d_x=1, d_z=1,
        )
        res = fbsm_lqg(prob, max_iters=10, tol=1e-10)
        assert res.converged
        assert np.allclose(res.objective_history, 0.0)
        assert np.abs(res.gains.pi).max() == 0.0

    def test_short_run_monotone_and_positive_definite(self):
        res = fbsm_lqg(tracking_problem(horizon=2.0), max_iters=12, tol=0.0)
        hist = res.objective_history
        assert len(hist) == 13
        slack = 1e-8 * (1.0 + np.abs(hist[:-1]))
        assert np.all(hist[1:] <= hist[:-1] + slack)
        assert res.gains.min_lambda_eigenvalue().min() > 0
        assert res.iterations == 12

    def test_iterate_bookkeeping_carries_held_trajectories(self):
        res = fbsm_lqg(tracking_problem(horizon=1.0), max_iters=4, tol=0.0)
        # iteration 1 refreshes Pi, holds Lambda; iteration 2 the reverse
        assert res.lambda_iterates[1] is res.lambda_iterates[0]
        assert res.pi_iterates[2] is res.pi_iterates[1]
        assert res.pi_iterates[1] is not res.pi_iterates[0]

    def test_control_law_reads_only_memory(self):
        res = fbsm_lqg(tracking_problem(horizon=1.0), max_iters=6, tol=0.0)
        law = res.control_law()
        s1 = np.array([0.3, -1.2])
        s2 = np.array([9.9, -1.2])
        assert np.allclose(law.evaluate(0.5, s1), law.evaluate(0.5, s2))

    def test_control_law_hand_evaluation(self):
        res = fbsm_lqg(tracking_problem(horizon=1.0), max_iters=6, tol=0.0)
        law = res.control_law()
        g = res.gains
        s = np.array([1.0, 1.0])
        i = g.index_for(0.25)
        K = inference_gain(g.lam[i], 1)
        expect = -np.eye(2) @ (g.pi[i] @ K @ (s - g.mu[i]) + g.psi[i] @ g.mu[i])
        assert np.allclose(lqg_control(law, 0.25, s), expect)

    def test_control_at_mean_with_zero_psi_mu_is_zero(self):
        res = fbsm_lqg(tracking_problem(horizon=1.0), max_iters=4, tol=0.0)
        law = res.control_law()
        # mu stays zero here, so s = mu gives u = -R^{-1}B'(0 + Psi*0) = 0
        assert np.allclose(law.evaluate(0.5, np.zeros(2)), 0.0)

    def test_time_outside_horizon_rejected(self):
        res = fbsm_lqg(tracking_problem(horizon=1.0), max_iters=2, tol=0.0)
        law = res.control_law()
        with pytest.raises(ProblemError):
            law.evaluate(1.5, np.zeros(2))

    def test_objective_formula_matches_recorded_history_at_fixed_point(self):
        res = fbsm_lqg(tracking_problem(horizon=2.0), max_iters=20, tol=0.0)
        closed_form = lqg_objective(res.problem, res.gains)
        recorded = res.objective_history[-1]
        assert abs(closed_form - recorded) <= 1e-4 * (1.0 + abs(recorded))

    def test_fixed_point_satisfies_both_equations(self):
        prob = tracking_problem(horizon=2.0)
        res = fbsm_lqg(prob, max_iters=30, tol=0.0)
        g = res.gains
        dt = prob.dt
        worst_pi = worst_lam = 0.0
        for i in range(0, prob.n_steps, 7):
            t = g.times[i]
            K = inference_gain(g.lam[i], 1)
            pi_dot = (g.pi[i + 1] - g.pi[i]) / dt
            lam_dot = (g.lam[i + 1] - g.lam[i]) / dt
            worst_pi = max(worst_pi, np.abs(pi_dot + pi_rhs(prob, t, g.pi[i], K)).max())
            worst_lam = max(worst_lam, np.abs(lam_dot - lambda_rhs(prob, t, g.lam[i], g.pi[i])).max())
        # forward-difference residual of the converged trajectories is O(dt)
        assert worst_pi < 50 * dt
        assert worst_lam < 50 * dt

    def test_euler_mode_agrees_loosely_with_rk4(self):
        prob = tracking_problem(horizon=1.0, dt=0.002)
        r1 = fbsm_lqg(prob, max_iters=14, tol=0.0, method="rk4")
        r2 = fbsm_lqg(prob, max_iters=14, tol=0.0, method="euler")
        a, b = r1.objective_history[-1], r2.objective_history[-1]
        assert abs(a - b) < 0.02 * (1.0 + abs(a))

    def test_unknown_method_rejected(self):
        with pytest.raises(ProblemError):
            fbsm_lqg(tracking_problem(horizon=1.0), method="heun")

    def test_invalid_problem_rejected(self):
        bad = tracking_problem(horizon=1.0)
        bad = LqgProblem(
            A=bad.A, B=bad.B, sigma=bad.sigma, Q=bad.Q, R=np.zeros((2, 2)),
            P=bad.P, mu0=bad.mu0, lambda0=bad.lambda0, horizon=1.0, dt=0.01,
            d_x=1, d_z=1,
        )
        with pytest.raises(ProblemError):
            fbsm_lqg(bad)


class TestLqgObjective:
    def test_zero_gains_zero_cost(self):
        base = tracking_problem(horizon=1.0)
        prob = LqgProblem(
            A=base.A, B=base.B, sigma=base.sigma, Q=np.zeros((2, 2)), R=base.R,
            P=np.zeros((2, 2)), mu0=base.mu0, lambda0=base.lambda0,
            horizon=1.0, dt=0.01, d_x=1, d_z=1,
        )
        res = fbsm_lqg(prob, max_iters=2, tol=0.0)
        assert lqg_objective(prob, res.gains) == 0.0

    def test_zero_initial_mean_kills_mu_terms(self):
        prob = tracking_problem(horizon=1.0)
        res = fbsm_lqg(prob, max_iters=6, tol=0.0)
        assert np.abs(res.gains.mu).max() == 0.0
