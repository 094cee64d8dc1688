"""JSON problem configurations for the command-line front end.

One JSON document describes one problem instance plus solver settings.
The "family" field selects the parametric form:

* "lqg": linear dynamics, quadratic costs, Gaussian initial law --
  matrices row-major, solved by the Riccati sweep backend.
* "obstacle-grid": scalar state with direct control, scalar noisy
  integrator memory, time-windowed obstacle running cost plus quadratic
  control and terminal costs -- solved by the finite-difference backend.

Anything not expressible in these forms goes through the library API.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from fbsweep.core import (
    CostSpec,
    ExtendedDynamics,
    Gaussian,
    GridSpec,
    LqgProblem,
    ProblemError,
    as_time_fn,
    validate_lqg,
)
from fbsweep.gridpde import GridProblem, QuadraticControl, quadratic_grid_problem

FAMILIES = ("lqg", "obstacle-grid")
DEFAULT_SLICE_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class SolverSettings:
    """Iteration budget and convergence settings common to both backends."""

    max_iters: int = 50
    tol: float = 1e-6
    method: str = "rk4"
    minimizer: str = "auto"


@dataclass
class LoadedConfig:
    """A parsed configuration plus the objects it describes."""

    family: str
    document: dict
    solver: SolverSettings
    seed: int
    lqg_problem: Optional[LqgProblem] = None
    grid_problem: Optional[GridProblem] = None
    grid: Optional[GridSpec] = None
    slice_times: Optional[List[float]] = None


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ProblemError(f"config is missing {context}'{key}'")
    return doc[key]


def _matrix(doc: dict, key: str, shape=None) -> np.ndarray:
    value = _require(doc, key, "")
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"config field {key!r} is not numeric: {exc}") from None
    if shape is not None and arr.shape != shape:
        raise ProblemError(f"config field {key!r} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"config field {key!r} contains non-finite entries")
    return arr


def _solver_settings(doc: dict) -> SolverSettings:
    solver = doc.get("solver", {})
    if not isinstance(solver, dict):
        raise ProblemError("config field 'solver' must be an object")
    settings = SolverSettings()
    for key, value in solver.items():
        if key == "max_iters":
            settings.max_iters = int(value)
            if settings.max_iters < 0:
                raise ProblemError("solver.max_iters must be nonnegative")
        elif key == "tol":
            settings.tol = float(value)
            if settings.tol < 0:
                raise ProblemError("solver.tol must be nonnegative")
        elif key == "method":
            settings.method = str(value)
        elif key == "minimizer":
            settings.minimizer = str(value)
        else:
            raise ProblemError(f"unknown solver setting {key!r}")
    return settings


def _load_lqg(doc: dict) -> LoadedConfig:
    d_x = int(_require(doc, "d_x", ""))
    d_z = int(_require(doc, "d_z", ""))
    d_s = d_x + d_z
    A = _matrix(doc, "A", (d_s, d_s))
    B = _matrix(doc, "B")
    if B.ndim != 2 or B.shape[0] != d_s:
        raise ProblemError(f"config field 'B' must have {d_s} rows")
    sigma = _matrix(doc, "sigma")
    if sigma.ndim != 2 or sigma.shape[0] != d_s:
        raise ProblemError(f"config field 'sigma' must have {d_s} rows")
    Q = _matrix(doc, "Q", (d_s, d_s))
    d_u = B.shape[1]
    R = _matrix(doc, "R", (d_u, d_u))
    P = _matrix(doc, "P", (d_s, d_s))
    mu0 = _matrix(doc, "mu0", (d_s,))
    lambda0 = _matrix(doc, "lambda0", (d_s, d_s))
    horizon = float(_require(doc, "horizon", ""))
    dt = float(_require(doc, "dt", ""))
    problem = LqgProblem(
        A=A, B=B, sigma=sigma, Q=Q, R=R, P=P,
        mu0=mu0, lambda0=lambda0,
        horizon=horizon, dt=dt, d_x=d_x, d_z=d_z,
    )
    report = validate_lqg(problem)
    if not report.ok:
        raise ProblemError(f"invalid problem: {report}")
    return LoadedConfig(
        family="lqg",
        document=doc,
        solver=_solver_settings(doc),
        seed=int(doc.get("seed", 0)),
        lqg_problem=problem,
    )


def obstacle_running_cost(strength, t_on, t_off, inner, outer):
    """Indicator-window obstacle cost on the state coordinate."""

    def cost(t, S):
        x = S[0]
        if t < t_on or t > t_off:
            return np.zeros_like(x)
        band = (np.abs(x) >= inner) & (np.abs(x) <= outer)
        return np.where(band, strength, 0.0)

    return cost


def _load_obstacle_grid(doc: dict) -> LoadedConfig:
    domain = _require(doc, "domain", "")
    lower = _matrix(domain, "lower", (2,))
    upper = _matrix(domain, "upper", (2,))
    shape = tuple(int(n) for n in _require(domain, "shape", "domain."))
    if len(shape) != 2:
        raise ProblemError("domain.shape must have two entries (state, memory)")
    n_t = int(_require(domain, "n_t", "domain."))
    horizon = float(_require(domain, "horizon", "domain."))
    grid = GridSpec(lower=lower, upper=upper, shape=shape, n_t=n_t, horizon=horizon)

    obstacle = _require(doc, "obstacle", "")
    strength = float(_require(obstacle, "strength", "obstacle."))
    t_on = float(_require(obstacle, "t_on", "obstacle."))
    t_off = float(_require(obstacle, "t_off", "obstacle."))
    inner = float(_require(obstacle, "inner", "obstacle."))
    outer = float(_require(obstacle, "outer", "obstacle."))
    if not (0.0 <= t_on <= t_off <= horizon):
        raise ProblemError("obstacle window must satisfy 0 <= t_on <= t_off <= horizon")
    if not (0.0 <= inner <= outer):
        raise ProblemError("obstacle band must satisfy 0 <= inner <= outer")

    terminal_weight = float(_require(doc, "terminal_weight", ""))
    control_cost = float(doc.get("control_cost", 1.0))
    if control_cost <= 0:
        raise ProblemError("control_cost must be positive")
    bound = float(_require(doc, "control_bound", ""))
    if bound <= 0:
        raise ProblemError("control_bound must be positive")
    init_cov = float(_require(doc, "initial_cov", ""))
    if init_cov <= 0:
        raise ProblemError("initial_cov must be positive")

    quad = QuadraticControl(
        r_diag=[control_cost],
        b_matrix=[[1.0], [0.0]],
        drift0=lambda t, S: [np.zeros_like(S[0]), S[0]],
        base_cost=obstacle_running_cost(strength, t_on, t_off, inner, outer),
    )
    solver = _solver_settings(doc)
    problem = quadratic_grid_problem(
        d_x=1,
        d_z=1,
        quadratic=quad,
        diffusion=lambda t, S: np.eye(2),
        terminal_cost=lambda S: terminal_weight * S[0] ** 2,
        initial_density=Gaussian(np.zeros(2), init_cov * np.eye(2)),
        control_lower=[-bound],
        control_upper=[bound],
        minimizer=solver.minimizer,
    )

    slice_times = doc.get(
        "slice_times", [f * horizon for f in DEFAULT_SLICE_FRACTIONS]
    )
    slice_times = [float(t) for t in slice_times]
    for t in slice_times:
        if not (0.0 <= t <= horizon):
            raise ProblemError(f"slice time {t} outside [0, {horizon}]")

    return LoadedConfig(
        family="obstacle-grid",
        document=doc,
        solver=solver,
        seed=int(doc.get("seed", 0)),
        grid_problem=problem,
        grid=grid,
        slice_times=slice_times,
    )


def parse_config(doc: dict) -> LoadedConfig:
    """Validate a configuration document and build its problem objects."""
    if not isinstance(doc, dict):
        raise ProblemError("config root must be a JSON object")
    family = _require(doc, "family", "")
    if family == "lqg":
        return _load_lqg(doc)
    if family == "obstacle-grid":
        return _load_obstacle_grid(doc)
    raise ProblemError(f"unknown config family {family!r}; expected one of {FAMILIES}")


def load_config(path) -> LoadedConfig:
    """Read and parse a JSON configuration file."""
    path = Path(path)
    if not path.exists():
        raise ProblemError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProblemError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)


def bundled_config_path(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    path = Path(__file__).parent / "configs" / f"{name}.json"
    if not path.exists():
        raise ProblemError(f"no bundled config named {name!r}")
    return path


def simulation_dynamics(cfg: LoadedConfig) -> ExtendedDynamics:
    """Closed-loop dynamics of a configured problem for path simulation."""
    if cfg.family == "lqg":
        p = cfg.lqg_problem
        A_f, B_f = as_time_fn(p.A), as_time_fn(p.B)
        sigma_f = as_time_fn(p.sigma)
        d_w = np.atleast_2d(np.asarray(sigma_f(0.0), dtype=float)).shape[1]

        def drift(t, s, u):
            A = np.atleast_2d(np.asarray(A_f(t), dtype=float))
            B = np.atleast_2d(np.asarray(B_f(t), dtype=float))
            return s @ A.T + u @ B.T

        def diffusion(t, s, u):
            return np.atleast_2d(np.asarray(sigma_f(t), dtype=float))

        return ExtendedDynamics(
            d_x=p.d_x, d_z=p.d_z, d_u=p.d_u, d_w=d_w,
            drift=drift, diffusion=diffusion,
            initial_density=p.initial_density(),
        )

    # Obstacle family: dx = u dt + dw, dz = x dt + dnu, unit noise on both.
    def drift(t, s, u):
        return np.stack([u[..., 0], s[..., 0]], axis=-1)

    def diffusion(t, s, u):
        return np.eye(2)

    return ExtendedDynamics(
        d_x=1, d_z=1, d_u=1, d_w=2,
        drift=drift, diffusion=diffusion,
        initial_density=cfg.grid_problem.initial_density,
    )


def simulation_cost(cfg: LoadedConfig) -> CostSpec:
    """Running/terminal cost of a configured problem on batched states."""
    if cfg.family == "lqg":
        p = cfg.lqg_problem
        Q_f, R_f = as_time_fn(p.Q), as_time_fn(p.R)

        def running(t, s, u):
            Q = np.atleast_2d(np.asarray(Q_f(t), dtype=float))
            R = np.atleast_2d(np.asarray(R_f(t), dtype=float))
            return (
                np.einsum("...i,ij,...j->...", s, Q, s)
                + np.einsum("...i,ij,...j->...", u, R, u)
            )

        def terminal(s):
            return np.einsum("...i,ij,...j->...", s, p.P, s)

        return CostSpec(running_cost=running, terminal_cost=terminal)

    gp = cfg.grid_problem

    def running(t, s, u):
        S = [s[..., i] for i in range(gp.d_s)]
        U = [u[..., i] for i in range(gp.d_u)]
        return np.asarray(gp.running_cost(t, S, U), dtype=float)

    def terminal(s):
        S = [s[..., i] for i in range(gp.d_s)]
        return np.asarray(gp.terminal_cost(S), dtype=float)

    return CostSpec(running_cost=running, terminal_cost=terminal)
