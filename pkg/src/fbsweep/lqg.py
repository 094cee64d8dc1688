"""Riccati-sweep solver for linear-quadratic memory-feedback control.

For linear dynamics ds = (A s + B u) dt + sigma dw over the extended
state s = (x, z), quadratic cost, and Gaussian densities, the optimal
memory-feedback control is affine,

    u(t, z) = -R^{-1} B^T (Pi K(Lambda)(s - mu) + Psi mu),

where (mu, Lambda) are the mean and precision of the extended-state
Gaussian, Psi solves the classical Riccati equation of the fully
observable problem, and Pi solves a modified Riccati equation whose
extra term prices the information lost by feeding back the conditional
mean E[s|z] = K(Lambda)(s - mu) + mu instead of s. Because the Pi
equation runs backward given Lambda and the Lambda equation runs forward
given Pi, the coupled system is solved by alternating sweeps that hold
the opposite trajectory fixed, recording the closed-loop cost after
every sweep. Cost of each iterate is evaluated from the exact
closed-loop second moments, so the recorded objective is meaningful even
mid-iteration when Lambda is stale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from fbsweep.core import (
    DivergenceError,
    LqgProblem,
    ProblemError,
    SingularPrecisionError,
    StabilityError,
    as_time_fn,
    validate_lqg,
)

MONOTONICITY_SLACK = 1e-8


def _sym(mat: np.ndarray) -> np.ndarray:
    return (mat + np.swapaxes(mat, -1, -2)) / 2.0


def inference_gain(lam: np.ndarray, d_x: int, d_z: Optional[int] = None) -> np.ndarray:
    """Gain K mapping centered extended states to centered conditional means.

    For a Gaussian with precision matrix lam partitioned into state and
    memory blocks, E[s | z] = K (s - mu) + mu with

        K = [[0, -lam_xx^{-1} lam_xz], [0, I]].

    Only the memory block of s enters K (s - mu), so any control built
    from it is automatically a function of z alone.
    """
    lam = np.asarray(lam, dtype=float)
    d_s = lam.shape[0]
    if d_z is not None and d_x + d_z != d_s:
        raise ProblemError(f"d_x + d_z = {d_x + d_z} does not match matrix size {d_s}")
    lam_xx = lam[:d_x, :d_x]
    lam_xz = lam[:d_x, d_x:]
    try:
        cross = np.linalg.solve(lam_xx, lam_xz)
    except np.linalg.LinAlgError as exc:
        raise SingularPrecisionError(
            "state block of the precision matrix is singular"
        ) from exc
    if not np.all(np.isfinite(cross)):
        raise SingularPrecisionError(
            "state block of the precision matrix is numerically singular"
        )
    gain = np.zeros((d_s, d_s))
    gain[:d_x, d_x:] = -cross
    gain[d_x:, d_x:] = np.eye(d_s - d_x)
    return gain


class _Coefficients:
    """Problem coefficients tabulated on the time grid and its midpoints.

    Index 2i is node t_i, index 2i+1 the midpoint of step i. Also caches
    M = B R^{-1} B^T and sigma sigma^T, the only combinations the sweep
    equations need.
    """

    def __init__(self, problem: LqgProblem):
        n = problem.n_steps
        self.n = n
        self.dt = problem.horizon / n
        self.times = np.linspace(0.0, problem.horizon, 2 * n + 1)
        A_f, B_f = as_time_fn(problem.A), as_time_fn(problem.B)
        s_f = as_time_fn(problem.sigma)
        Q_f, R_f = as_time_fn(problem.Q), as_time_fn(problem.R)
        d = problem.d_s

        def tab(fn, shape):
            out = np.empty((2 * n + 1,) + shape)
            for j, t in enumerate(self.times):
                out[j] = np.atleast_2d(np.asarray(fn(t), dtype=float))
            return out

        self.A = tab(A_f, (d, d))
        self.Q = tab(Q_f, (d, d))
        B0 = np.atleast_2d(np.asarray(B_f(0.0), dtype=float))
        self.B = tab(B_f, B0.shape)
        R0 = np.atleast_2d(np.asarray(R_f(0.0), dtype=float))
        self.R = tab(R_f, R0.shape)
        sig0 = np.atleast_2d(np.asarray(s_f(0.0), dtype=float))
        sig = tab(s_f, sig0.shape)
        self.M = np.einsum(
            "tij,tjk,tlk->til", self.B, np.linalg.inv(self.R), self.B
        )
        self.SS = np.einsum("tij,tkj->tik", sig, sig)

    def at(self, idx2: int):
        """Coefficient tuple (A, M, Q, SS) at half-grid index idx2."""
        return self.A[idx2], self.M[idx2], self.Q[idx2], self.SS[idx2]


def psi_rhs(problem: LqgProblem, t: float, psi: np.ndarray) -> np.ndarray:
    """Backward increment of the classical Riccati equation.

    Returns Q + A'Psi + Psi A - Psi B R^{-1} B' Psi, the value of
    -dPsi/dt; callers integrating backward add rhs * dt per step.
    """
    psi = np.asarray(psi, dtype=float)
    A = np.atleast_2d(np.asarray(as_time_fn(problem.A)(t), dtype=float))
    B = np.atleast_2d(np.asarray(as_time_fn(problem.B)(t), dtype=float))
    Q = np.atleast_2d(np.asarray(as_time_fn(problem.Q)(t), dtype=float))
    R = np.atleast_2d(np.asarray(as_time_fn(problem.R)(t), dtype=float))
    M = B @ np.linalg.solve(R, B.T)
    return Q + A.T @ psi + psi @ A - psi @ M @ psi


def pi_rhs(problem: LqgProblem, t: float, pi: np.ndarray, gain: np.ndarray) -> np.ndarray:
    """Backward increment of the memory-feedback Riccati equation.

    Returns Q + A'Pi + Pi A - Pi M Pi + (I-K)' Pi M Pi (I-K) with
    M = B R^{-1} B'. With gain K = I the last term vanishes and the
    classical Riccati increment is recovered exactly.
    """
    pi = np.asarray(pi, dtype=float)
    gain = np.asarray(gain, dtype=float)
    A = np.atleast_2d(np.asarray(as_time_fn(problem.A)(t), dtype=float))
    B = np.atleast_2d(np.asarray(as_time_fn(problem.B)(t), dtype=float))
    Q = np.atleast_2d(np.asarray(as_time_fn(problem.Q)(t), dtype=float))
    R = np.atleast_2d(np.asarray(as_time_fn(problem.R)(t), dtype=float))
    M = B @ np.linalg.solve(R, B.T)
    ik = np.eye(pi.shape[0]) - gain
    pmp = pi @ M @ pi
    return Q + A.T @ pi + pi @ A - pmp + ik.T @ pmp @ ik


def lambda_rhs(problem: LqgProblem, t: float, lam: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Forward derivative of the closed-loop precision matrix.

    Returns -Atilde' Lambda - Lambda Atilde - Lambda sigma sigma' Lambda
    with Atilde = A - B R^{-1} B' Pi K(Lambda), the drift of the
    centered state under the affine memory-feedback law.
    """
    lam = np.asarray(lam, dtype=float)
    pi = np.asarray(pi, dtype=float)
    A = np.atleast_2d(np.asarray(as_time_fn(problem.A)(t), dtype=float))
    B = np.atleast_2d(np.asarray(as_time_fn(problem.B)(t), dtype=float))
    R = np.atleast_2d(np.asarray(as_time_fn(problem.R)(t), dtype=float))
    sig = np.atleast_2d(np.asarray(as_time_fn(problem.sigma)(t), dtype=float))
    M = B @ np.linalg.solve(R, B.T)
    K = inference_gain(lam, problem.d_x)
    At = A - M @ pi @ K
    return -At.T @ lam - lam @ At - lam @ (sig @ sig.T) @ lam


def mu_rhs(problem: LqgProblem, t: float, mu: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Forward derivative of the mean: (A - B R^{-1} B' Psi) mu."""
    mu = np.asarray(mu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    A = np.atleast_2d(np.asarray(as_time_fn(problem.A)(t), dtype=float))
    B = np.atleast_2d(np.asarray(as_time_fn(problem.B)(t), dtype=float))
    R = np.atleast_2d(np.asarray(as_time_fn(problem.R)(t), dtype=float))
    M = B @ np.linalg.solve(R, B.T)
    return (A - M @ psi) @ mu


def _check_finite(traj: np.ndarray, times: np.ndarray, what: str):
    bad = ~np.isfinite(traj).reshape(traj.shape[0], -1).all(axis=1)
    if bad.any():
        t_bad = times[int(np.argmax(bad))]
        raise DivergenceError(f"{what} became non-finite at t={t_bad:.6g}")


def solve_psi(problem: LqgProblem, method: str = "rk4") -> np.ndarray:
    """Integrate the classical Riccati equation backward from Psi(T) = P.

    Classical fourth-order Runge-Kutta on the dt grid (explicit Euler
    behind method="euler"). Output is symmetrized every step.
    """
    coeffs = _Coefficients(problem)
    return _solve_psi_tab(problem, coeffs, method)


def _psi_increment(coeffs: _Coefficients, idx2: int, psi: np.ndarray) -> np.ndarray:
    A, M, Q, _ = coeffs.at(idx2)
    return Q + A.T @ psi + psi @ A - psi @ M @ psi


def _solve_psi_tab(problem: LqgProblem, coeffs: _Coefficients, method: str) -> np.ndarray:
    n, dt = coeffs.n, coeffs.dt
    d = problem.d_s
    psi = np.empty((n + 1, d, d))
    psi[n] = _sym(problem.P)
    for i in range(n - 1, -1, -1):
        top = psi[i + 1]
        if method == "euler":
            step = _psi_increment(coeffs, 2 * i, top)
        else:
            k1 = _psi_increment(coeffs, 2 * i + 2, top)
            k2 = _psi_increment(coeffs, 2 * i + 1, top + 0.5 * dt * k1)
            k3 = _psi_increment(coeffs, 2 * i + 1, top + 0.5 * dt * k2)
            k4 = _psi_increment(coeffs, 2 * i, top + dt * k3)
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        psi[i] = _sym(top + dt * step)
    _check_finite(psi, np.linspace(0, problem.horizon, n + 1), "Psi")
    return psi


def solve_mu(problem: LqgProblem, psi: np.ndarray, method: str = "rk4") -> np.ndarray:
    """Integrate the mean ODE forward from mu(0) = mu0 given Psi."""
    coeffs = _Coefficients(problem)
    return _solve_mu_tab(problem, coeffs, psi, method)


def _solve_mu_tab(
    problem: LqgProblem, coeffs: _Coefficients, psi: np.ndarray, method: str
) -> np.ndarray:
    n, dt = coeffs.n, coeffs.dt
    mu = np.empty((n + 1, problem.d_s))
    mu[0] = problem.mu0
    if not np.any(problem.mu0):
        mu[:] = 0.0
        return mu

    def rhs(idx2, psi_val, m):
        A, M, _, _ = coeffs.at(idx2)
        return (A - M @ psi_val) @ m

    for i in range(n):
        base = mu[i]
        psi_mid = 0.5 * (psi[i] + psi[i + 1])
        if method == "euler":
            step = rhs(2 * i, psi[i], base)
        else:
            k1 = rhs(2 * i, psi[i], base)
            k2 = rhs(2 * i + 1, psi_mid, base + 0.5 * dt * k1)
            k3 = rhs(2 * i + 1, psi_mid, base + 0.5 * dt * k2)
            k4 = rhs(2 * i + 2, psi[i + 1], base + dt * k3)
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        mu[i + 1] = base + dt * step
    _check_finite(mu, np.linspace(0, problem.horizon, n + 1), "mu")
    return mu


@dataclass
class GainTrajectory:
    """Time-indexed gains (Psi, Pi, Lambda, mu) of the affine control law.

    All matrix trajectories are stored symmetrized at the grid nodes.
    Lookup is piecewise constant from the left: t in [t_i, t_{i+1}) maps
    to node i, and t = T maps to the last node.
    """

    times: np.ndarray
    psi: np.ndarray
    pi: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    d_x: int

    def __post_init__(self):
        for name in ("psi", "pi", "lam"):
            traj = np.asarray(getattr(self, name), dtype=float)
            drift = np.abs(traj - np.swapaxes(traj, -1, -2)).max()
            if drift > 1e-10:
                raise ProblemError(f"{name} trajectory asymmetric by {drift:.3e}")
            setattr(self, name, _sym(traj))

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def index_for(self, t: float) -> int:
        if t < -1e-9 or t > self.horizon * (1 + 1e-12) + 1e-9:
            raise ProblemError(f"t={t} outside the horizon [0, {self.horizon}]")
        idx = int(np.searchsorted(self.times, t, side="right") - 1)
        return min(max(idx, 0), self.n_steps)

    def min_lambda_eigenvalue(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.lam).min(axis=1)


@dataclass(frozen=True)
class LqgControlLaw:
    """Affine memory-feedback law u(t, z) built from a gain trajectory."""

    gains: GainTrajectory
    problem: LqgProblem

    def evaluate_memory(self, t: float, z: np.ndarray) -> np.ndarray:
        """Evaluate u at time t for memory points z of shape (..., d_z)."""
        z = np.asarray(z, dtype=float)
        d_x = self.problem.d_x
        i = self.gains.index_for(t)
        t_i = self.gains.times[i]
        K = inference_gain(self.gains.lam[i], d_x)
        mu = self.gains.mu[i]
        ez = z - mu[d_x:]
        ks = np.concatenate([ez @ K[:d_x, d_x:].T, ez], axis=-1)
        core = ks @ self.gains.pi[i].T + self.gains.psi[i] @ mu
        B = np.atleast_2d(np.asarray(as_time_fn(self.problem.B)(t_i), dtype=float))
        R = np.atleast_2d(np.asarray(as_time_fn(self.problem.R)(t_i), dtype=float))
        return -core @ np.linalg.solve(R, B.T).T

    def evaluate(self, t: float, s: np.ndarray) -> np.ndarray:
        """Evaluate u at extended states s; reads only the memory block."""
        s = np.asarray(s, dtype=float)
        return self.evaluate_memory(t, s[..., self.problem.d_x :])


def lqg_control(law: LqgControlLaw, t: float, s: np.ndarray) -> np.ndarray:
    """Evaluate the affine law at extended state(s) s."""
    return law.evaluate(t, s)


@dataclass
class LqgSweepResult:
    """Gains, per-iteration objective history, and iterate trajectories."""

    problem: LqgProblem
    gains: GainTrajectory
    objective_history: np.ndarray
    pi_iterates: List[np.ndarray]
    lambda_iterates: List[np.ndarray]
    converged: bool
    iterations: int
    final_delta: float
    method: str

    def control_law(self) -> LqgControlLaw:
        return LqgControlLaw(self.gains, self.problem)


def _backward_pi(problem, coeffs, lam_stale, method):
    """One backward sweep of Pi holding the precision trajectory fixed."""
    n, dt = coeffs.n, coeffs.dt
    d = problem.d_s
    d_x = problem.d_x

    def rhs(idx2, pi_val, lam_val):
        A, M, Q, _ = coeffs.at(idx2)
        K = inference_gain(lam_val, d_x)
        ik = np.eye(d) - K
        pmp = pi_val @ M @ pi_val
        return Q + A.T @ pi_val + pi_val @ A - pmp + ik.T @ pmp @ ik

    pi = np.empty((n + 1, d, d))
    pi[n] = _sym(problem.P)
    for i in range(n - 1, -1, -1):
        top = pi[i + 1]
        if method == "euler":
            step = rhs(2 * i, top, lam_stale[i])
        else:
            lam_mid = 0.5 * (lam_stale[i] + lam_stale[i + 1])
            k1 = rhs(2 * i + 2, top, lam_stale[i + 1])
            k2 = rhs(2 * i + 1, top + 0.5 * dt * k1, lam_mid)
            k3 = rhs(2 * i + 1, top + 0.5 * dt * k2, lam_mid)
            k4 = rhs(2 * i, top + dt * k3, lam_stale[i])
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        pi[i] = _sym(top + dt * step)
    return pi


def _forward_lambda(problem, coeffs, pi_stale, method):
    """One forward sweep of Lambda holding the Pi trajectory fixed."""
    n, dt = coeffs.n, coeffs.dt
    d = problem.d_s
    d_x = problem.d_x

    def rhs(idx2, lam_val, pi_val):
        A, M, _, SS = coeffs.at(idx2)
        K = inference_gain(lam_val, d_x)
        At = A - M @ pi_val @ K
        return -At.T @ lam_val - lam_val @ At - lam_val @ SS @ lam_val

    lam = np.empty((n + 1, d, d))
    lam[0] = _sym(problem.lambda0)
    for i in range(n):
        base = lam[i]
        if method == "euler":
            step = rhs(2 * i, base, pi_stale[i + 1])
        else:
            pi_mid = 0.5 * (pi_stale[i] + pi_stale[i + 1])
            k1 = rhs(2 * i, base, pi_stale[i])
            k2 = rhs(2 * i + 1, base + 0.5 * dt * k1, pi_mid)
            k3 = rhs(2 * i + 1, base + 0.5 * dt * k2, pi_mid)
            k4 = rhs(2 * i + 2, base + dt * k3, pi_stale[i + 1])
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        lam[i + 1] = _sym(base + dt * step)
    return lam


def _closed_loop_objective(problem, coeffs, psi, pi, lam, mu, method):
    """Expected cost of the affine law defined by (psi, pi, lam, mu).

    Integrates the true closed-loop covariance Sigma (not Lambda^{-1},
    which is only consistent after a forward sweep) and accumulates the
    quadratic cost by trapezoidal quadrature.
    """
    n, dt = coeffs.n, coeffs.dt
    d_x = problem.d_x

    def closed_loop_drift(idx2, pi_val, lam_val):
        A, M, _, _ = coeffs.at(idx2)
        return A - M @ pi_val @ inference_gain(lam_val, d_x)

    def cost_density(i):
        A, M, Q, _ = coeffs.at(2 * i)
        K = inference_gain(lam[i], d_x)
        PK = pi[i] @ K
        state_term = np.trace(Q @ sigma_nodes[i]) + mu[i] @ Q @ mu[i]
        ctrl_gain = PK.T @ M @ PK
        ctrl_term = np.trace(ctrl_gain @ sigma_nodes[i]) + mu[i] @ psi[i] @ M @ psi[i] @ mu[i]
        return state_term + ctrl_term

    sigma_nodes = np.empty_like(lam)
    sigma_nodes[0] = np.linalg.inv(problem.lambda0)
    for i in range(n):
        base = sigma_nodes[i]

        def rhs(idx2, sig_val, pi_val, lam_val):
            At = closed_loop_drift(idx2, pi_val, lam_val)
            _, _, _, SS = coeffs.at(idx2)
            return At @ sig_val + sig_val @ At.T + SS

        if method == "euler":
            step = rhs(2 * i, base, pi[i], lam[i])
        else:
            pi_mid = 0.5 * (pi[i] + pi[i + 1])
            lam_mid = 0.5 * (lam[i] + lam[i + 1])
            k1 = rhs(2 * i, base, pi[i], lam[i])
            k2 = rhs(2 * i + 1, base + 0.5 * dt * k1, pi_mid, lam_mid)
            k3 = rhs(2 * i + 1, base + 0.5 * dt * k2, pi_mid, lam_mid)
            k4 = rhs(2 * i + 2, base + dt * k3, pi[i + 1], lam[i + 1])
            step = (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        sigma_nodes[i + 1] = _sym(base + dt * step)
    _check_finite(sigma_nodes, np.linspace(0, problem.horizon, n + 1), "Sigma")

    densities = np.array([cost_density(i) for i in range(n + 1)])
    running = float(np.trapezoid(densities, dx=dt))
    terminal = float(
        np.trace(problem.P @ sigma_nodes[n]) + mu[n] @ problem.P @ mu[n]
    )
    return running + terminal


def fbsm_lqg(
    problem: LqgProblem,
    pi0: Optional[np.ndarray] = None,
    max_iters: int = 50,
    tol: float = 1e-6,
    method: str = "rk4",
) -> LqgSweepResult:
    """Alternate backward Pi sweeps and forward Lambda sweeps to a fixed point.

    Starts from the given Pi trajectory (zero by default), integrates
    Lambda forward under it, then alternates: even iterations refresh Pi
    backward against the held Lambda, odd iterations refresh Lambda
    forward against the held Pi. The closed-loop objective is recorded
    after the initial step and after every sweep; iteration stops when
    the objective change falls within tol * (1 + |J|) or at max_iters.

    Raises StabilityError if the recorded objective ever increases by
    more than the monotonicity slack, and DivergenceError on non-finite
    trajectories.
    """
    if method not in ("rk4", "euler"):
        raise ProblemError(f"unknown integration method {method!r}")
    report = validate_lqg(problem)
    if not report.ok:
        raise ProblemError("invalid problem:\n" + str(report))

    coeffs = _Coefficients(problem)
    n = coeffs.n
    times = np.linspace(0.0, problem.horizon, n + 1)
    d = problem.d_s

    psi = _solve_psi_tab(problem, coeffs, method)
    mu = _solve_mu_tab(problem, coeffs, psi, method)

    if pi0 is None:
        pi = np.zeros((n + 1, d, d))
    else:
        pi = _sym(np.asarray(pi0, dtype=float).copy())
        if pi.shape != (n + 1, d, d):
            raise ProblemError(
                f"pi0 must have shape {(n + 1, d, d)}, got {pi.shape}"
            )
    lam = _forward_lambda(problem, coeffs, pi, method)
    _check_finite(lam, times, "Lambda")

    history = [
        _closed_loop_objective(problem, coeffs, psi, pi, lam, mu, method)
    ]
    pi_iterates = [pi]
    lambda_iterates = [lam]

    converged = False
    final_delta = np.inf
    k = 0
    while k < max_iters:
        if k % 2 == 0:
            pi = _backward_pi(problem, coeffs, lam, method)
            _check_finite(pi, times, f"Pi (iteration {k + 1})")
        else:
            lam = _forward_lambda(problem, coeffs, pi, method)
            _check_finite(lam, times, f"Lambda (iteration {k + 1})")
        J = _closed_loop_objective(problem, coeffs, psi, pi, lam, mu, method)
        if not np.isfinite(J):
            raise DivergenceError(f"objective non-finite at iteration {k + 1}")
        # Euler iterates track the continuous descent only to first order
        # in dt, so the guard loosens accordingly in that mode.
        slack_rel = MONOTONICITY_SLACK if method == "rk4" else max(MONOTONICITY_SLACK, coeffs.dt)
        slack = slack_rel * (1.0 + abs(history[-1]))
        if J > history[-1] + slack:
            raise StabilityError(
                f"objective increased at iteration {k + 1}: "
                f"{history[-1]:.10g} -> {J:.10g}"
            )
        final_delta = abs(history[-1] - J)
        history.append(J)
        pi_iterates.append(pi)
        lambda_iterates.append(lam)
        k += 1
        if final_delta <= tol * (1.0 + abs(J)):
            converged = True
            break

    gains = GainTrajectory(
        times=times, psi=psi, pi=pi, lam=lam, mu=mu, d_x=problem.d_x
    )
    return LqgSweepResult(
        problem=problem,
        gains=gains,
        objective_history=np.asarray(history),
        pi_iterates=pi_iterates,
        lambda_iterates=lambda_iterates,
        converged=converged,
        iterations=k,
        final_delta=float(final_delta),
        method=method,
    )


def lqg_objective(problem: LqgProblem, gains: GainTrajectory) -> float:
    """Closed-form expected cost of the affine law from Gaussian moments.

    Uses Sigma_t = Lambda_t^{-1} as the closed-loop covariance, which is
    exact when the Lambda trajectory is the forward solution consistent
    with the Pi trajectory (always true for converged sweep output).
    """
    lam = gains.lam
    try:
        sigma = np.linalg.inv(lam)
    except np.linalg.LinAlgError as exc:
        raise SingularPrecisionError("Lambda trajectory not invertible") from exc
    n = gains.n_steps
    dt = gains.horizon / n
    d_x = gains.d_x
    Q_f = as_time_fn(problem.Q)
    B_f, R_f = as_time_fn(problem.B), as_time_fn(problem.R)
    densities = np.empty(n + 1)
    for i, t in enumerate(gains.times):
        Q = np.atleast_2d(np.asarray(Q_f(t), dtype=float))
        B = np.atleast_2d(np.asarray(B_f(t), dtype=float))
        R = np.atleast_2d(np.asarray(R_f(t), dtype=float))
        M = B @ np.linalg.solve(R, B.T)
        K = inference_gain(lam[i], d_x)
        PK = gains.pi[i] @ K
        mu_i = gains.mu[i]
        densities[i] = (
            np.trace(Q @ sigma[i])
            + mu_i @ Q @ mu_i
            + np.trace(PK.T @ M @ PK @ sigma[i])
            + mu_i @ gains.psi[i] @ M @ gains.psi[i] @ mu_i
        )
    running = float(np.trapezoid(densities, dx=dt))
    terminal = float(np.trace(problem.P @ sigma[n]) + gains.mu[n] @ problem.P @ gains.mu[n])
    return running + terminal
