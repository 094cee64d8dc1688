"""Tests for problem models and extended-state assembly."""

import numpy as np
import pytest

from fbsweep.core import (
    Gaussian,
    GridSpec,
    LqgProblem,
    ProblemError,
    RawPoscSpec,
    assemble_extended_dynamics,
    validate_lqg,
)


def make_raw(kappa_shape=(1, 1), eta=None, d_z=1, d_y=1):
    """Scalar state with noisy observation fed into scalar memory."""
    return RawPoscSpec(
        d_x=1,
        d_y=d_y,
        d_z=d_z,
        d_u=1,
        d_v=0,
        state_drift=lambda t, x, u: x + u,
        state_diffusion=lambda t, x, u: np.eye(1),
        observation_drift=lambda t, x: np.broadcast_to(x[..., :1], x.shape[:-1] + (d_y,)),
        observation_noise=lambda t: np.eye(d_y),
        memory_drift=lambda t, z, v: np.zeros(z.shape[:-1] + (d_z,)),
        observation_gain=lambda t, z, v: np.ones(kappa_shape),
        memory_noise=eta,
        initial_state=Gaussian([0.0], [[1.0]]),
        initial_memory=Gaussian(np.zeros(d_z), np.eye(d_z)),
    )


class TestGaussian:
    def test_density_matches_scalar_formula(self):
        g = Gaussian([1.0], [[4.0]])
        pts = np.array([[0.0], [1.0], [3.0]])
        expected = np.exp(-((pts[:, 0] - 1.0) ** 2) / 8.0) / np.sqrt(8.0 * np.pi)
        assert np.allclose(g.density(pts), expected)

    def test_density_integrates_to_one_on_grid(self):
        g = Gaussian([0.0, 0.0], [[0.5, 0.1], [0.1, 0.3]])
        axes = [np.linspace(-6, 6, 201)] * 2
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        vol = (axes[0][1] - axes[0][0]) ** 2
        assert abs(g.density(pts).sum() * vol - 1.0) < 1e-6

    def test_sample_moments(self):
        g = Gaussian([2.0, -1.0], [[1.0, 0.3], [0.3, 0.5]])
        rng = np.random.default_rng(7)
        samples = g.sample(rng, 200_000)
        assert np.allclose(samples.mean(axis=0), g.mean, atol=0.02)
        assert np.allclose(np.cov(samples.T), g.cov, atol=0.02)

    def test_product_is_block_diagonal(self):
        g = Gaussian([1.0], [[2.0]]).product(Gaussian([3.0], [[4.0]]))
        assert np.allclose(g.mean, [1.0, 3.0])
        assert np.allclose(g.cov, [[2.0, 0.0], [0.0, 4.0]])

    def test_rejects_indefinite_covariance(self):
        with pytest.raises(ProblemError):
            Gaussian([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


class TestAssembleExtendedDynamics:
    def test_drift_stacks_state_and_coupled_memory(self):
        ext = assemble_extended_dynamics(make_raw())
        s = np.array([[2.0, 5.0]])
        u = np.array([[3.0]])
        # state part: x + u = 5, memory part: c + kappa*h = 0 + 1*2 = 2
        assert np.allclose(ext.drift(0.0, s, u), [[5.0, 2.0]])

    def test_diffusion_block_structure(self):
        ext = assemble_extended_dynamics(make_raw())
        s = np.array([[0.5, -0.5]])
        u = np.array([[0.0]])
        sig = ext.diffusion(0.0, s, u)
        assert sig.shape == (1, 2, 2)
        # [[sigma, 0], [0, kappa*gamma]]
        assert np.allclose(sig[0], [[1.0, 0.0], [0.0, 1.0]])

    def test_memory_noise_appends_noise_column(self):
        ext = assemble_extended_dynamics(
            make_raw(eta=lambda t, z, v: 0.5 * np.eye(1))
        )
        assert ext.d_w == 3
        sig = ext.diffusion(0.0, np.zeros((1, 2)), np.zeros((1, 1)))
        assert np.allclose(sig[0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.5]])

    def test_initial_density_is_product(self):
        ext = assemble_extended_dynamics(make_raw())
        assert np.allclose(ext.initial_density.mean, [0.0, 0.0])
        assert np.allclose(ext.initial_density.cov, np.eye(2))

    def test_batched_evaluation(self):
        ext = assemble_extended_dynamics(make_raw())
        s = np.random.default_rng(0).normal(size=(40, 2))
        u = np.random.default_rng(1).normal(size=(40, 1))
        drift = ext.drift(0.0, s, u)
        assert drift.shape == (40, 2)
        assert np.allclose(drift[:, 0], s[:, 0] + u[:, 0])
        assert np.allclose(drift[:, 1], s[:, 0])

    def test_rejects_mismatched_observation_gain(self):
        with pytest.raises(ProblemError):
            assemble_extended_dynamics(make_raw(kappa_shape=(2, 3)))


class TestValidateLqg:
    def base_problem(self, **overrides):
        kwargs = dict(
            A=np.array([[1.0, 0.0], [1.0, 0.0]]),
            B=np.eye(2),
            sigma=np.eye(2),
            Q=np.diag([1.0, 0.0]),
            R=np.eye(2),
            P=np.zeros((2, 2)),
            mu0=np.zeros(2),
            lambda0=np.eye(2),
            horizon=10.0,
            dt=0.01,
            d_x=1,
            d_z=1,
        )
        kwargs.update(overrides)
        return LqgProblem(**kwargs)

    def test_standard_problem_passes(self):
        rep = validate_lqg(self.base_problem())
        assert rep.ok, str(rep)

    def test_zero_r_fails(self):
        rep = validate_lqg(self.base_problem(R=np.zeros((2, 2))))
        assert not rep.ok
        assert any("R positive definite" in name for name, _ in rep.failures())

    def test_indefinite_lambda0_fails(self):
        rep = validate_lqg(self.base_problem(lambda0=np.diag([1.0, -1.0])))
        assert not rep.ok

    def test_negative_horizon_fails(self):
        rep = validate_lqg(self.base_problem(horizon=-1.0))
        assert not rep.ok

    def test_time_varying_coefficients(self):
        rep = validate_lqg(
            self.base_problem(Q=lambda t: np.diag([1.0 + t, 0.0]))
        )
        assert rep.ok, str(rep)

    def test_n_steps_and_times(self):
        prob = self.base_problem()
        assert prob.n_steps == 1000
        times = prob.times()
        assert times.shape == (1001,)
        assert times[0] == 0.0 and times[-1] == 10.0


class TestGridSpec:
    def test_spacing_and_volume(self):
        g = GridSpec(lower=[-3, -3], upper=[3, 3], shape=(61, 61), n_t=100, horizon=1.0)
        assert np.allclose(g.spacing, [0.1, 0.1])
        assert abs(g.cell_volume - 0.01) < 1e-15
        assert abs(g.dt - 0.01) < 1e-15

    def test_axes_hit_bounds(self):
        g = GridSpec(lower=[-1], upper=[2], shape=(4,), n_t=10, horizon=1.0)
        assert np.allclose(g.axes()[0], [-1.0, 0.0, 1.0, 2.0])

    def test_mesh_shapes(self):
        g = GridSpec(lower=[0, 0], upper=[1, 1], shape=(3, 5), n_t=10, horizon=1.0)
        mesh = g.mesh()
        assert len(mesh) == 2
        assert mesh[0].shape == (3, 5)

    def test_memory_split(self):
        g = GridSpec(lower=[0, 0], upper=[1, 1], shape=(3, 5), n_t=10, horizon=1.0)
        assert g.memory_shape(1) == (5,)
        assert np.allclose(g.memory_axes(1)[0], np.linspace(0, 1, 5))

    def test_rejects_bad_bounds(self):
        with pytest.raises(ProblemError):
            GridSpec(lower=[1], upper=[0], shape=(5,), n_t=10, horizon=1.0)

    def test_rejects_single_node_axis(self):
        with pytest.raises(ProblemError):
            GridSpec(lower=[0], upper=[1], shape=(1,), n_t=10, horizon=1.0)
