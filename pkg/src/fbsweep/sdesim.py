"""Euler-Maruyama simulation of the closed-loop extended system.

Paths of ds = b(t, s, u) dt + sigma(t, s, u) dw are advanced on a fixed
time grid under a memory-feedback law u(t, z). The simulator only ever
hands the control evaluator (t, z): the state block of s never reaches
it, so controller measurability is enforced by the interface rather than
by convention.

Reproducibility: a root seed is split into one child stream per path
plus one for the initial draw, so ensembles are bit-for-bit identical
for a fixed (seed, n_paths, dt) regardless of scheduling or batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from fbsweep.core import CostSpec, ExtendedDynamics, GridSpec, ProblemError


@dataclass
class PathEnsemble:
    """Simulated closed-loop paths plus per-path bookkeeping.

    states has shape (n_paths, n_steps + 1, d_s) and controls
    (n_paths, n_steps, d_u). cumulative_costs holds the left-endpoint
    running-cost integral (zero at t=0) when the simulation was given a
    cost, so it is non-decreasing whenever f >= 0. Paths that left the
    finite range are frozen at their last finite state and flagged
    invalid; clamp_counts tallies, per path, how many steps needed the
    memory clamped onto the control law's domain.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    cumulative_costs: Optional[np.ndarray]
    valid: np.ndarray
    clamp_counts: np.ndarray
    seed: int
    d_x: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_excluded(self) -> int:
        return int((~self.valid).sum())

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


class GridControlLaw:
    """Evaluate a grid-solver control table as a function u(t, z).

    Piecewise constant to the left in time (the table defines one control
    per step interval) and multilinear in the memory coordinates, with
    out-of-grid memory points clamped to the boundary.
    """

    def __init__(self, values: np.ndarray, grid: GridSpec, d_x: int):
        values = np.asarray(values, dtype=float)
        self.values = values
        self.grid = grid
        self.d_x = d_x
        self.z_lower = grid.lower[d_x:]
        self.z_upper = grid.upper[d_x:]
        self._axes = grid.memory_axes(d_x)
        if values.shape[0] != grid.n_t:
            raise ProblemError(
                f"control table has {values.shape[0]} slices, expected {grid.n_t}"
            )

    def _time_index(self, t: float) -> int:
        if t < -1e-12 or t > self.grid.horizon + 1e-12:
            raise ProblemError(f"time {t} outside [0, {self.grid.horizon}]")
        return min(int(t / self.grid.dt + 1e-9), self.grid.n_t - 1)

    def evaluate_memory(self, t: float, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        table = self.values[self._time_index(t)]
        if not self._axes:
            return np.broadcast_to(table, z.shape[:-1] + (table.shape[-1],)).copy()
        zc = np.clip(z, self.z_lower, self.z_upper)
        interp = RegularGridInterpolator(self._axes, table, method="linear")
        return interp(zc)


def _control_evaluator(control) -> Callable:
    if hasattr(control, "evaluate_memory"):
        return control.evaluate_memory
    if callable(control):
        return control
    raise ProblemError("control must be callable or expose evaluate_memory")


def simulate_paths(
    dynamics: ExtendedDynamics,
    control,
    horizon: float,
    dt: float,
    n_paths: int,
    seed: int,
    cost: Optional[CostSpec] = None,
) -> PathEnsemble:
    """Simulate n_paths closed-loop trajectories over [0, horizon].

    Initial states are drawn from the problem's initial density; Wiener
    increments are Normal(0, dt I) from one child RNG stream per path.
    The control evaluator receives only (t, z); if it declares a memory
    domain (z_lower/z_upper attributes), z is clamped onto it first and
    the clamps counted. Non-finite states freeze their path and exclude
    it from the valid set.
    """
    if dt <= 0 or horizon <= 0:
        raise ProblemError("horizon and dt must be positive")
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon) or n_steps < 1:
        raise ProblemError(f"horizon {horizon} is not a multiple of dt {dt}")
    if n_paths < 1:
        raise ProblemError("n_paths must be at least 1")

    d_s = dynamics.d_s
    d_x = dynamics.d_x
    d_u = dynamics.d_u
    d_w = dynamics.d_w
    eval_u = _control_evaluator(control)
    z_lower = getattr(control, "z_lower", None)
    z_upper = getattr(control, "z_upper", None)

    streams = np.random.SeedSequence(seed).spawn(n_paths + 1)
    rng0 = np.random.default_rng(streams[0])
    s0 = dynamics.initial_density.sample(rng0, n_paths)
    increments = np.empty((n_paths, n_steps, d_w))
    for m in range(n_paths):
        rng = np.random.default_rng(streams[m + 1])
        increments[m] = rng.standard_normal((n_steps, d_w))
    increments *= np.sqrt(dt)

    times = np.linspace(0.0, horizon, n_steps + 1)
    states = np.empty((n_paths, n_steps + 1, d_s))
    states[:, 0, :] = s0
    controls = np.empty((n_paths, n_steps, d_u))
    cum = np.zeros((n_paths, n_steps + 1)) if cost is not None else None
    valid = np.ones(n_paths, dtype=bool)
    clamp_counts = np.zeros(n_paths, dtype=int)

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_steps):
            t = times[i]
            s = states[:, i, :]
            z = s[:, d_x:]
            if z_lower is not None:
                zc = np.clip(z, z_lower, z_upper)
                clamp_counts += np.any(zc != z, axis=-1)
                z = zc
            u = np.asarray(eval_u(t, z), dtype=float).reshape(n_paths, d_u)
            controls[:, i, :] = u
            b = np.asarray(dynamics.drift(t, s, u), dtype=float)
            sig = np.asarray(dynamics.diffusion(t, s, u), dtype=float)
            if sig.ndim == 2:
                noise = increments[:, i, :] @ sig.T
            else:
                noise = np.einsum("nij,nj->ni", sig, increments[:, i, :])
            s_next = s + b * dt + noise
            finite = np.all(np.isfinite(s_next), axis=-1)
            newly_bad = valid & ~finite
            if newly_bad.any():
                s_next[newly_bad] = s[newly_bad]
                valid &= finite
            s_next[~valid] = states[~valid, i, :]
            states[:, i + 1, :] = s_next
            if cum is not None:
                f = np.asarray(cost.running_cost(t, s, u), dtype=float).reshape(n_paths)
                cum[:, i + 1] = cum[:, i] + f * dt

    return PathEnsemble(
        times=times,
        states=states,
        controls=controls,
        cumulative_costs=cum,
        valid=valid,
        clamp_counts=clamp_counts,
        seed=seed,
        d_x=d_x,
    )


def estimate_objective(ensemble: PathEnsemble, cost: CostSpec) -> Tuple[float, float]:
    """Sample mean and standard error of the per-path discrete cost.

    Per path: left-endpoint running-cost sum plus terminal cost at the
    final state, over valid paths only.
    """
    valid = ensemble.valid
    if not valid.any():
        raise ProblemError("no valid paths to estimate from")
    dt = ensemble.dt
    if ensemble.cumulative_costs is not None:
        running = ensemble.cumulative_costs[valid, -1]
    else:
        running = np.zeros(int(valid.sum()))
        s = ensemble.states[valid]
        u = ensemble.controls[valid]
        for i in range(ensemble.times.size - 1):
            f = np.asarray(
                cost.running_cost(ensemble.times[i], s[:, i, :], u[:, i, :]),
                dtype=float,
            )
            running += f.reshape(running.shape) * dt
    terminal = np.asarray(
        cost.terminal_cost(ensemble.states[valid, -1, :]), dtype=float
    ).reshape(running.shape)
    per_path = running + terminal
    mean = float(per_path.mean())
    n = per_path.size
    se = float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se
