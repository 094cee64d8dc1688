"""Finite-difference solver for coupled density/value sweeps.

The controlled diffusion over the extended state s = (x, z) induces two
grid equations: the density p(t, s) moves forward under the adjoint
generator, the value w(t, s) moves backward under the generator itself,
and the memory-feedback control u(t, z) couples them through

    u(t, z) = argmin_u E_{p(x|z)}[ f(t, s, u) + (L_u w)(s) ].

The generator L_u is discretized with first-order upwinding of the drift,
central 3-point stencils for the diagonal diffusion, central cross
stencils for off-diagonal diffusion, and a reflecting (no-flux) boundary
closure obtained by zeroing boundary-crossing coefficients. The adjoint
is the exact matrix transpose, so mass conservation and the discrete
duality <w, L'p> = <Lw, p> hold to rounding error by construction.

Under the explicit-scheme stability bound, I + dt L_u is a nonnegative
row-stochastic matrix: each time slice is an exact finite-state Markov
decision step. The alternating sweeps then minimize the exact discrete
objective node by node (ties broken toward the previous control), which
is what makes the recorded objective monotone across iterations.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import ndimage, sparse

from fbsweep.core import (
    DivergenceError,
    GridSpec,
    ProblemError,
    StabilityError,
)

STABILITY_FRACTION = 0.9
NEGATIVE_MASS_LIMIT = 1e-6
MARGINAL_FLOOR = 1e-12
TIE_TOLERANCE = 1e-12
DEFAULT_CANDIDATES = 41


class MonotonicityWarning(UserWarning):
    """Recorded objective increased beyond the discretization slack."""


@dataclass(frozen=True)
class QuadraticControl:
    """Declaration that control enters affinely with quadratic cost.

    drift = drift0(t, S) + b_matrix @ u and running cost
    f = base_cost(t, S) + sum_c r_diag[c] * u_c^2. This shape admits the
    closed-form minimizer branch of the conditional Hamiltonian.
    """

    r_diag: np.ndarray
    b_matrix: np.ndarray
    drift0: Callable
    base_cost: Callable

    def __post_init__(self):
        object.__setattr__(self, "r_diag", np.atleast_1d(np.asarray(self.r_diag, float)))
        object.__setattr__(self, "b_matrix", np.atleast_2d(np.asarray(self.b_matrix, float)))
        if np.any(self.r_diag <= 0):
            raise ProblemError("quadratic control cost requires positive r_diag")
        if self.b_matrix.shape[1] != self.r_diag.size:
            raise ProblemError("b_matrix columns must match r_diag length")


@dataclass(frozen=True)
class GridProblem:
    """Problem data evaluated directly on mesh arrays.

    drift(t, S, U) -> list of d_s arrays, diffusion(t, S) -> (d_s, d_s)
    nested array-like (control-independent), running_cost(t, S, U) and
    terminal_cost(S) -> grid arrays, initial_density(S) -> grid array.
    S is the meshgrid tuple of the extended-state grid; U is a list of
    d_u arrays shaped to broadcast over the grid (memory axes trailing).
    """

    d_x: int
    d_z: int
    d_u: int
    drift: Callable
    diffusion: Callable
    running_cost: Callable
    terminal_cost: Callable
    initial_density: Callable
    control_lower: Optional[np.ndarray] = None
    control_upper: Optional[np.ndarray] = None
    quadratic: Optional[QuadraticControl] = None
    minimizer: str = "auto"

    @property
    def d_s(self) -> int:
        return self.d_x + self.d_z

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = (
            np.full(self.d_u, -np.inf)
            if self.control_lower is None
            else np.broadcast_to(np.asarray(self.control_lower, float), (self.d_u,))
        )
        hi = (
            np.full(self.d_u, np.inf)
            if self.control_upper is None
            else np.broadcast_to(np.asarray(self.control_upper, float), (self.d_u,))
        )
        if np.any(lo >= hi):
            raise ProblemError("control bounds must satisfy lower < upper")
        return lo, hi

    def minimizer_mode(self) -> str:
        if self.minimizer != "auto":
            return self.minimizer
        return "exact" if self.quadratic is not None else "search"


def quadratic_grid_problem(
    d_x: int,
    d_z: int,
    quadratic: QuadraticControl,
    diffusion: Callable,
    terminal_cost: Callable,
    initial_density: Callable,
    control_lower=None,
    control_upper=None,
    minimizer: str = "auto",
) -> GridProblem:
    """Build a GridProblem whose drift/cost derive from one declaration.

    Guarantees the drift and running cost are consistent with the
    quadratic structure the closed-form minimizer assumes.
    """
    B = quadratic.b_matrix
    r = quadratic.r_diag
    d_u = r.size

    def drift(t, S, U):
        base = list(quadratic.drift0(t, S))
        out = []
        for i in range(d_x + d_z):
            term = np.asarray(base[i], dtype=float)
            for c in range(d_u):
                if B[i, c] != 0.0:
                    term = term + B[i, c] * U[c]
            out.append(term)
        return out

    def running_cost(t, S, U):
        total = np.asarray(quadratic.base_cost(t, S), dtype=float)
        for c in range(d_u):
            total = total + r[c] * np.square(U[c])
        return total

    return GridProblem(
        d_x=d_x,
        d_z=d_z,
        d_u=d_u,
        drift=drift,
        diffusion=diffusion,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        initial_density=initial_density,
        control_lower=control_lower,
        control_upper=control_upper,
        quadratic=quadratic,
        minimizer=minimizer,
    )


@dataclass
class DensityField:
    """p(t, s) on the time x extended-state grid."""

    values: np.ndarray
    grid: GridSpec

    def mass_per_slice(self) -> np.ndarray:
        axes = tuple(range(1, self.values.ndim))
        return self.values.sum(axis=axes) * self.grid.cell_volume


@dataclass
class ValueField:
    """w(t, s) on the time x extended-state grid."""

    values: np.ndarray
    grid: GridSpec


@dataclass
class ControlField:
    """u(t, z) on the time x memory grid; no state index by construction."""

    values: np.ndarray
    grid: GridSpec
    d_x: int

    @property
    def d_u(self) -> int:
        return self.values.shape[-1]


def _values(obj) -> np.ndarray:
    return obj.values if hasattr(obj, "values") else np.asarray(obj, dtype=float)


def _shifted(arr: np.ndarray, axis: int, offset: int) -> np.ndarray:
    """arr sampled at s + offset*e_axis, zero where that leaves the grid."""
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if offset == 1:
        dst[axis] = slice(0, -1)
        src[axis] = slice(1, None)
    elif offset == -1:
        dst[axis] = slice(1, None)
        src[axis] = slice(0, -1)
    else:
        raise ValueError("offset must be +1 or -1")
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _shifted2(arr: np.ndarray, axis_i: int, off_i: int, axis_j: int, off_j: int) -> np.ndarray:
    return _shifted(_shifted(arr, axis_i, off_i), axis_j, off_j)


def _axis_edge(shape, axis, last: bool):
    idx = [slice(None)] * len(shape)
    idx[axis] = -1 if last else 0
    return tuple(idx)


class DiscreteGenerator:
    """Upwind/central discretization of one time slice's generator.

    Stored as per-cell coefficient arrays rather than an assembled
    matrix: `up[i]` multiplies w(s + e_i), `down[i]` multiplies
    w(s - e_i), `cross[(i, j)]` multiplies the four-corner mixed stencil,
    and the diagonal is minus the sum of up and down (row sums are zero
    exactly, so constants are harmonic and the adjoint conserves mass).
    apply/apply_adjoint are exact transposes of each other.
    """

    def __init__(self, grid: GridSpec, up, down, cross):
        self.grid = grid
        self.up = up
        self.down = down
        self.cross = cross
        self.diag = -sum(up) - sum(down)

    def apply(self, w: np.ndarray) -> np.ndarray:
        out = self.diag * w
        for i in range(self.grid.dim):
            out += self.up[i] * _shifted(w, i, 1)
            out += self.down[i] * _shifted(w, i, -1)
        for (i, j), c in self.cross.items():
            out += c * (
                _shifted2(w, i, 1, j, 1)
                - _shifted2(w, i, 1, j, -1)
                - _shifted2(w, i, -1, j, 1)
                + _shifted2(w, i, -1, j, -1)
            )
        return out

    def apply_adjoint(self, p: np.ndarray) -> np.ndarray:
        out = self.diag * p
        for i in range(self.grid.dim):
            out += _shifted(self.up[i] * p, i, -1)
            out += _shifted(self.down[i] * p, i, 1)
        for (i, j), c in self.cross.items():
            cp = c * p
            out += (
                _shifted2(cp, i, -1, j, -1)
                - _shifted2(cp, i, -1, j, 1)
                - _shifted2(cp, i, 1, j, -1)
                + _shifted2(cp, i, 1, j, 1)
            )
        return out

    def to_sparse(self) -> sparse.csr_matrix:
        """Assemble the explicit matrix (testing/inspection only)."""
        shape = self.grid.shape
        n = int(np.prod(shape))
        flat = np.arange(n).reshape(shape)
        rows, cols, vals = [], [], []

        def add(coeff, col_index_arr):
            mask = coeff != 0.0
            rows.append(flat[mask])
            cols.append(col_index_arr[mask])
            vals.append(coeff[mask])

        add(np.asarray(self.diag, float), flat)
        for i in range(self.grid.dim):
            up = np.broadcast_to(self.up[i], shape)
            down = np.broadcast_to(self.down[i], shape)
            add(np.asarray(up, float), np.roll(flat, -1, axis=i))
            add(np.asarray(down, float), np.roll(flat, 1, axis=i))
        for (i, j), c in self.cross.items():
            c = np.broadcast_to(np.asarray(c, float), shape)
            add(c, np.roll(np.roll(flat, -1, axis=i), -1, axis=j))
            add(-c, np.roll(np.roll(flat, -1, axis=i), 1, axis=j))
            add(-c, np.roll(np.roll(flat, 1, axis=i), -1, axis=j))
            add(c, np.roll(np.roll(flat, 1, axis=i), 1, axis=j))
        rows = np.concatenate(rows) if rows else np.empty(0, int)
        cols = np.concatenate(cols) if cols else np.empty(0, int)
        vals = np.concatenate(vals) if vals else np.empty(0, float)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def stability_sums(self) -> np.ndarray:
        """Per-cell sum of outflow rates before boundary zeroing effects."""
        return self._full_sums

    def check_stability(self, dt: float):
        sums = self._full_sums
        limit = float(sums.max())
        if dt * limit > STABILITY_FRACTION + 1e-12:
            cell = np.unravel_index(int(np.argmax(sums)), sums.shape)
            raise StabilityError(
                f"explicit step unstable: dt={dt:.6g} exceeds "
                f"{STABILITY_FRACTION}/rate = {STABILITY_FRACTION / limit:.6g} "
                f"(binding cell {cell}, outflow rate {limit:.6g})"
            )


def control_to_grid(u_slice: np.ndarray, d_x: int, d_u: int) -> list:
    """Reshape (z_shape, d_u) control values to broadcast over the grid."""
    u_slice = np.asarray(u_slice, dtype=float)
    z_shape = u_slice.shape[:-1]
    return [
        u_slice[..., c].reshape((1,) * d_x + z_shape) for c in range(d_u)
    ]


def build_generator(
    problem: GridProblem,
    grid: GridSpec,
    t: float,
    u_slice: np.ndarray,
    dt: Optional[float] = None,
) -> DiscreteGenerator:
    """Discretize the generator at time t under the given control slice.

    Drift terms are upwinded in the drift sign, diagonal diffusion uses
    central 3-point stencils, mixed diffusion uses central cross stencils,
    and coefficients that would reach across the boundary are zeroed
    (reflecting closure). If dt is given, the explicit stability bound
    dt * max_cell(sum_i D_ii/ds_i^2 + |b_i|/ds_i) <= 0.9 is enforced and
    violation reports the binding cell.
    """
    d = grid.dim
    shape = grid.shape
    spacing = grid.spacing
    S = grid.mesh()
    U = control_to_grid(u_slice, problem.d_x, problem.d_u)
    b = problem.drift(t, S, U)
    if len(b) != d:
        raise ProblemError(f"drift returned {len(b)} components, expected {d}")
    D = problem.diffusion(t, S)

    def dval(i, j):
        return np.asarray(D[i][j], dtype=float)

    up, down = [], []
    full_sums = np.zeros(shape)
    for i in range(d):
        dii = dval(i, i)
        if np.any(dii < 0):
            raise ProblemError(f"diffusion D[{i}][{i}] must be nonnegative")
        bi = np.asarray(b[i], dtype=float)
        base = dii / (2.0 * spacing[i] ** 2)
        up_i = np.broadcast_to(base + np.maximum(bi, 0.0) / spacing[i], shape).copy()
        down_i = np.broadcast_to(base + np.maximum(-bi, 0.0) / spacing[i], shape).copy()
        full_sums = full_sums + up_i + down_i
        up_i[_axis_edge(shape, i, last=True)] = 0.0
        down_i[_axis_edge(shape, i, last=False)] = 0.0
        up.append(up_i)
        down.append(down_i)

    cross = {}
    for i in range(d):
        for j in range(i + 1, d):
            dij = dval(i, j)
            dji = dval(j, i)
            if np.max(np.abs(dij - dji)) > 1e-12:
                raise ProblemError("diffusion matrix must be symmetric")
            if np.any(dij != 0.0):
                c = np.broadcast_to(
                    dij / (4.0 * spacing[i] * spacing[j]), shape
                ).copy()
                for axis in (i, j):
                    c[_axis_edge(shape, axis, last=True)] = 0.0
                    c[_axis_edge(shape, axis, last=False)] = 0.0
                cross[(i, j)] = c

    gen = DiscreteGenerator(grid, up, down, cross)
    gen._full_sums = full_sums
    if dt is not None:
        gen.check_stability(dt)
    return gen


@dataclass
class MassLog:
    """Per-run accumulation of density bookkeeping."""

    steps: int = 0
    max_negative_mass: float = 0.0
    max_mass_drift: float = 0.0

    def record(self, negative_mass: float, drift: float):
        self.steps += 1
        self.max_negative_mass = max(self.max_negative_mass, negative_mass)
        self.max_mass_drift = max(self.max_mass_drift, drift)


def fp_step(
    p_slice: np.ndarray,
    gen: DiscreteGenerator,
    dt: float,
    log: Optional[MassLog] = None,
) -> np.ndarray:
    """One explicit forward step p + dt L'p, clamped and renormalized.

    Negative values produced by the step are clamped at zero and the
    slice renormalized to unit mass; the pre-clamp negative mass and the
    pre-normalization mass drift are recorded in log. Negative mass
    beyond the abort limit raises StabilityError instead of being hidden.
    """
    vol = gen.grid.cell_volume
    q = p_slice + dt * gen.apply_adjoint(p_slice)
    neg = q[q < 0.0]
    negative_mass = float(-neg.sum() * vol) if neg.size else 0.0
    if negative_mass > NEGATIVE_MASS_LIMIT:
        raise StabilityError(
            f"negative density mass {negative_mass:.3e} exceeds "
            f"{NEGATIVE_MASS_LIMIT:.0e}; the explicit step is unstable"
        )
    if neg.size:
        q = np.maximum(q, 0.0)
    mass = float(q.sum() * vol)
    if not np.isfinite(mass) or mass <= 0.0:
        raise StabilityError("density mass became non-finite or zero")
    if log is not None:
        log.record(negative_mass, abs(mass - 1.0))
    return q / mass


def hjb_step(
    problem: GridProblem,
    grid: GridSpec,
    t: float,
    w_next: np.ndarray,
    u_slice: np.ndarray,
    dt: Optional[float] = None,
    gen: Optional[DiscreteGenerator] = None,
) -> np.ndarray:
    """One explicit backward step w + dt [f + L w] at time t."""
    dt = grid.dt if dt is None else dt
    if gen is None:
        gen = build_generator(problem, grid, t, u_slice, dt=dt)
    U = control_to_grid(u_slice, problem.d_x, problem.d_u)
    f = np.asarray(problem.running_cost(t, grid.mesh(), U), dtype=float)
    w_t = w_next + dt * (f + gen.apply(w_next))
    if not np.all(np.isfinite(w_t)):
        raise StabilityError(f"value slice became non-finite at t={t:.6g}")
    return w_t


def conditional_density(
    p_slice: np.ndarray,
    grid: GridSpec,
    d_x: int,
    floor: float = MARGINAL_FLOOR,
):
    """Split p(t, x, z) into p(x|z) and the memory marginal p(z).

    Returns (conditional, marginal, defined): conditional integrates to
    one over x wherever defined; at memory nodes whose marginal density
    falls below the floor the conditional is zeroed and flagged.
    """
    p_slice = np.asarray(p_slice, dtype=float)
    x_axes = tuple(range(d_x))
    vol_x = float(np.prod(grid.spacing[:d_x]))
    marginal = p_slice.sum(axis=x_axes) * vol_x
    defined = marginal > floor
    denom = np.where(defined, marginal, 1.0)
    cond = (p_slice / denom) * defined
    return cond, marginal, defined


def _conditional_expectation(cond: np.ndarray, field: np.ndarray, d_x: int, vol_x: float):
    return (cond * field).sum(axis=tuple(range(d_x))) * vol_x


def _upwind_differences(w: np.ndarray, axis: int, spacing: float):
    """Forward and backward difference quotients, zeroed where they cross."""
    gf = (_shifted(w, axis, 1) - w) / spacing
    gf[_axis_edge(w.shape, axis, last=True)] = 0.0
    gb = (w - _shifted(w, axis, -1)) / spacing
    gb[_axis_edge(w.shape, axis, last=False)] = 0.0
    return gf, gb


def _central_gradient(w: np.ndarray, axis: int, spacing: float):
    g = (_shifted(w, axis, 1) - _shifted(w, axis, -1)) / (2.0 * spacing)
    shape = w.shape
    first = _axis_edge(shape, axis, last=False)
    last = _axis_edge(shape, axis, last=True)
    sl = [slice(None)] * w.ndim
    sl[axis] = 1
    g[first] = (w[tuple(sl)] - w[first]) / spacing
    sl[axis] = -2
    g[last] = (w[last] - w[tuple(sl)]) / spacing
    return g


def _driven_dimensions(problem: GridProblem) -> list:
    """Map control component -> the single grid dimension it drives."""
    B = problem.quadratic.b_matrix
    driven = []
    for c in range(problem.d_u):
        rows = np.nonzero(B[:, c])[0]
        if rows.size != 1:
            raise ProblemError(
                "closed-form minimizer needs each control component to "
                "drive exactly one coordinate; use minimizer='search' or 'central'"
            )
        driven.append(int(rows[0]))
    if len(set(driven)) != len(driven):
        raise ProblemError(
            "closed-form minimizer needs distinct driven coordinates per "
            "control component; use minimizer='search' or 'central'"
        )
    return driven


def _base_drift_per_memory(b0_i: np.ndarray, shape, d_x: int, what: str) -> np.ndarray:
    """Reduce the control-free drift of a driven coordinate to a z-array.

    The exact branch needs this drift to be constant across x for each
    memory node, so that the upwind side switches at one control value
    per node; anything else must fall back to the search branch.
    """
    arr = np.broadcast_to(np.asarray(b0_i, dtype=float), shape)
    x_axes = tuple(range(d_x))
    if x_axes:
        lo = arr.min(axis=x_axes)
        hi = arr.max(axis=x_axes)
        if np.max(hi - lo) > 1e-10 * (1.0 + np.max(np.abs(arr))):
            raise ProblemError(
                f"{what} varies across the state for fixed memory; the "
                "closed-form minimizer does not apply (use 'search')"
            )
        return lo
    return arr


def _fill_undefined(u_new: np.ndarray, defined: np.ndarray, grid: GridSpec, d_x: int):
    """Copy controls onto low-mass memory nodes from the nearest defined node."""
    if defined.all():
        return u_new
    if not defined.any():
        raise ProblemError("conditional density undefined at every memory node")
    z_spacing = grid.spacing[d_x:]
    _, idx = ndimage.distance_transform_edt(
        ~defined, sampling=z_spacing, return_indices=True
    )
    src = tuple(idx[k] for k in range(idx.shape[0]))
    return u_new[src]


def minimize_conditional_hamiltonian(
    problem: GridProblem,
    grid: GridSpec,
    t: float,
    cond: np.ndarray,
    w_next: np.ndarray,
    u_prev: np.ndarray,
    defined: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-memory-node argmin of the conditional expected Hamiltonian.

    Vectorized over all memory nodes: cond is the conditional table,
    w_next the value slice the generator acts on, u_prev the previous
    iterate's control slice (kept on ties, which pins fixed points).
    Three branches:

    * "exact": for the declared quadratic structure, the discrete
      conditional Hamiltonian is piecewise quadratic in each control
      component (the upwind side switches where the driven drift changes
      sign), so the argmin is found exactly from the two branch vertices,
      the breakpoint, and the previous control.
    * "central": closed form -1/2 R^{-1} B' E[grad w | z] with central
      differences, clipped to bounds.
    * "search": exhaustive evaluation over a uniform candidate grid plus
      the previous control.

    Low-mass nodes (defined=False) inherit the control of the nearest
    defined node.
    """
    mode = problem.minimizer_mode()
    u_prev = np.asarray(u_prev, dtype=float)
    lo, hi = problem.bounds()
    d_x = problem.d_x
    vol_x = float(np.prod(grid.spacing[:d_x]))

    if mode == "exact":
        u_new = _minimize_exact(problem, grid, t, cond, w_next, u_prev, lo, hi, vol_x)
    elif mode == "central":
        u_new = _minimize_central(problem, grid, t, cond, w_next, lo, hi, vol_x)
    elif mode == "search":
        u_new = _minimize_search(problem, grid, t, cond, w_next, u_prev, lo, hi, vol_x)
    else:
        raise ProblemError(f"unknown minimizer mode {mode!r}")

    if defined is not None:
        u_new = _fill_undefined(u_new, defined, grid, d_x)
    return u_new


def _minimize_exact(problem, grid, t, cond, w_next, u_prev, lo, hi, vol_x):
    if problem.quadratic is None:
        raise ProblemError("minimizer 'exact' requires a quadratic declaration")
    quad = problem.quadratic
    driven = _driven_dimensions(problem)
    d_x = problem.d_x
    S = grid.mesh()
    b0 = quad.drift0(t, S)
    z_shape = grid.memory_shape(d_x)
    u_new = np.empty(z_shape + (problem.d_u,))

    for c in range(problem.d_u):
        i = driven[c]
        Bc = float(quad.b_matrix[i, c])
        Rc = float(quad.r_diag[c])
        gf_field, gb_field = _upwind_differences(w_next, i, grid.spacing[i])
        gf = _conditional_expectation(cond, gf_field, d_x, vol_x)
        gb = _conditional_expectation(cond, gb_field, d_x, vol_x)
        b0z = _base_drift_per_memory(b0[i], grid.shape, d_x, f"drift0[{i}]")
        b0z = np.broadcast_to(b0z, z_shape)

        def phi(u):
            v = b0z + Bc * u
            return Rc * u * u + np.maximum(v, 0.0) * gf - np.maximum(-v, 0.0) * gb

        u_star = -b0z / Bc
        vert_a = -Bc * gf / (2.0 * Rc)
        vert_b = -Bc * gb / (2.0 * Rc)
        if Bc > 0:
            lo_a, hi_a = np.maximum(u_star, lo[c]), np.full_like(u_star, hi[c])
            lo_b, hi_b = np.full_like(u_star, lo[c]), np.minimum(u_star, hi[c])
        else:
            lo_a, hi_a = np.full_like(u_star, lo[c]), np.minimum(u_star, hi[c])
            lo_b, hi_b = np.maximum(u_star, lo[c]), np.full_like(u_star, hi[c])

        cands, phis = [], []
        for vert, lo_i, hi_i in ((vert_a, lo_a, hi_a), (vert_b, lo_b, hi_b)):
            empty = lo_i > hi_i
            cand = np.clip(vert, np.where(empty, lo[c], lo_i), np.where(empty, hi[c], hi_i))
            val = np.where(empty, np.inf, phi(cand))
            cands.append(cand)
            phis.append(val)
        kink = np.clip(u_star, lo[c], hi[c])
        cands.append(kink)
        phis.append(phi(kink))
        prev = np.clip(u_prev[..., c], lo[c], hi[c])

        cands = np.stack(cands)
        phis = np.stack(phis)
        best = np.argmin(phis, axis=0)
        u_best = np.take_along_axis(cands, best[None], axis=0)[0]
        phi_best = np.take_along_axis(phis, best[None], axis=0)[0]
        phi_prev = phi(prev)
        keep_prev = phi_prev <= phi_best + TIE_TOLERANCE * (1.0 + np.abs(phi_best))
        u_new[..., c] = np.where(keep_prev, prev, u_best)
    return u_new


def _minimize_central(problem, grid, t, cond, w_next, lo, hi, vol_x):
    if problem.quadratic is None:
        raise ProblemError("minimizer 'central' requires a quadratic declaration")
    quad = problem.quadratic
    d_x = problem.d_x
    z_shape = grid.memory_shape(d_x)
    grad_exp = np.zeros(z_shape + (problem.d_s,))
    needed = np.nonzero(np.any(quad.b_matrix != 0.0, axis=1))[0]
    for i in needed:
        g = _central_gradient(w_next, i, grid.spacing[i])
        grad_exp[..., i] = _conditional_expectation(cond, g, d_x, vol_x)
    coeff = quad.b_matrix / (2.0 * quad.r_diag[None, :])
    u_new = -np.einsum("...i,ic->...c", grad_exp, coeff)
    return np.clip(u_new, lo, hi)


def conditional_hamiltonian(
    problem: GridProblem,
    grid: GridSpec,
    t: float,
    cond: np.ndarray,
    w_next: np.ndarray,
    u_slice: np.ndarray,
) -> np.ndarray:
    """E_{p(x|z)}[ f(t, s, u) + drift-upwind part of (L_u w) ] per memory node.

    Control-independent generator terms (diffusion, mixed stencils) are
    omitted, so differences of this quantity across controls equal
    differences of the full conditional expected Hamiltonian exactly, and
    its minimizers coincide with the sweep's control updates.
    """
    d_x = problem.d_x
    S = grid.mesh()
    vol_x = float(np.prod(grid.spacing[:d_x]))
    U = control_to_grid(np.asarray(u_slice, dtype=float), d_x, problem.d_u)
    f = np.asarray(problem.running_cost(t, S, U), dtype=float)
    b = problem.drift(t, S, U)
    ham = np.broadcast_to(f, grid.shape).astype(float)
    for i in range(grid.dim):
        gf, gb = _upwind_differences(w_next, i, grid.spacing[i])
        bi = np.asarray(b[i], dtype=float)
        ham = ham + np.maximum(bi, 0.0) * gf - np.maximum(-bi, 0.0) * gb
    return _conditional_expectation(cond, ham, d_x, vol_x)


def _minimize_search(problem, grid, t, cond, w_next, u_prev, lo, hi, vol_x):
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ProblemError("minimizer 'search' requires finite control bounds")
    d_x = problem.d_x
    d_u = problem.d_u
    z_shape = grid.memory_shape(d_x)

    axes = [np.linspace(lo[c], hi[c], DEFAULT_CANDIDATES) for c in range(d_u)]
    best_phi = None
    best_u = None
    for combo in itertools.product(*axes):
        u_slice = np.broadcast_to(np.asarray(combo), z_shape + (d_u,))
        val = conditional_hamiltonian(problem, grid, t, cond, w_next, u_slice)
        if best_phi is None:
            best_phi = val
            best_u = [np.full(z_shape, combo[c]) for c in range(d_u)]
        else:
            better = val < best_phi
            best_phi = np.where(better, val, best_phi)
            for c in range(d_u):
                best_u[c] = np.where(better, combo[c], best_u[c])

    u_prev_clipped = np.clip(u_prev, lo, hi)
    phi_prev = conditional_hamiltonian(problem, grid, t, cond, w_next, u_prev_clipped)
    keep_prev = phi_prev <= best_phi + TIE_TOLERANCE * (1.0 + np.abs(best_phi))
    u_new = np.stack(best_u, axis=-1)
    return np.where(keep_prev[..., None], u_prev_clipped, u_new)


def grid_objective(problem: GridProblem, grid: GridSpec, density, control) -> float:
    """Discrete objective: sum_t E_p[f] dt + E_p[g] at the final slice."""
    p = _values(density)
    u = _values(control)
    S = grid.mesh()
    vol = grid.cell_volume
    dt = grid.dt
    times = grid.times()
    total = 0.0
    for i in range(grid.n_t):
        U = control_to_grid(u[i], problem.d_x, problem.d_u)
        f = np.asarray(problem.running_cost(times[i], S, U), dtype=float)
        total += float((f * p[i]).sum()) * vol * dt
    g = np.asarray(problem.terminal_cost(S), dtype=float)
    total += float((g * p[-1]).sum()) * vol
    return total


@dataclass
class GridSweepResult:
    """Final fields, per-iteration objective history, and bookkeeping."""

    problem: GridProblem
    grid: GridSpec
    control: ControlField
    value: Optional[ValueField]
    density: DensityField
    objective_history: np.ndarray
    converged: bool
    iterations: int
    final_delta: float
    mass_log: MassLog
    monotonicity_violations: List[tuple]


def _initial_density_slice(problem: GridProblem, grid: GridSpec) -> np.ndarray:
    S = grid.mesh()
    init = problem.initial_density
    if hasattr(init, "density"):
        p0 = init.density(np.stack(S, axis=-1))
    else:
        p0 = np.asarray(init(S), dtype=float)
    p0 = np.broadcast_to(np.asarray(p0, dtype=float), grid.shape).copy()
    if np.any(p0 < 0) or not np.all(np.isfinite(p0)):
        raise ProblemError("initial density must be finite and nonnegative")
    mass = p0.sum() * grid.cell_volume
    if mass <= 0:
        raise ProblemError("initial density has zero mass on the grid")
    return p0 / mass


def _validate_grid_setup(problem: GridProblem, grid: GridSpec, u0: np.ndarray):
    if grid.dim != problem.d_s:
        raise ProblemError(
            f"grid dimension {grid.dim} does not match problem d_s={problem.d_s}"
        )
    z_shape = grid.memory_shape(problem.d_x)
    expected = (grid.n_t,) + z_shape + (problem.d_u,)
    if u0.shape != expected:
        raise ProblemError(f"u0 must have shape {expected}, got {u0.shape}")
    lo, hi = problem.bounds()
    if np.any(u0 < lo) or np.any(u0 > hi):
        raise ProblemError("u0 violates the declared control bounds")


def fbsm_grid(
    problem: GridProblem,
    grid: GridSpec,
    u0: Optional[np.ndarray] = None,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> GridSweepResult:
    """Alternate backward value sweeps and forward density sweeps.

    Initial step: solve the density forward under u0 (zero by default)
    and record its objective. Then, per iteration: even iterations sweep
    backward, refreshing the control at each step from the held density
    and the in-construction value before stepping the value; odd
    iterations sweep forward, refreshing the control from the fresh
    density and the held value before stepping the density. The recorded
    objective is the exact discrete cost of each iterate's control:
    <p0, w0> after backward sweeps, the accumulated running cost after
    forward sweeps. Objective increases beyond 1e-6*(1+|J|) are reported
    as MonotonicityWarning (discretization slack), not silently ignored.
    """
    d_x = problem.d_x
    z_shape = grid.memory_shape(d_x)
    n = grid.n_t
    dt = grid.dt
    vol = grid.cell_volume
    times = grid.times()
    S = grid.mesh()

    if u0 is None:
        u = np.zeros((n,) + z_shape + (problem.d_u,))
    else:
        u = np.asarray(u0, dtype=float).copy()
    _validate_grid_setup(problem, grid, u)

    p0 = _initial_density_slice(problem, grid)
    g_terminal = np.asarray(problem.terminal_cost(S), dtype=float)
    mass_log = MassLog()

    def forward_pass(u_field, w_stale):
        """Forward density sweep; refreshes controls when w_stale given."""
        p = np.empty((n + 1,) + grid.shape)
        p[0] = p0
        u_out = u_field.copy()
        running = 0.0
        for i in range(n):
            if w_stale is not None:
                cond, _, defined = conditional_density(p[i], grid, d_x)
                u_out[i] = minimize_conditional_hamiltonian(
                    problem, grid, times[i], cond, w_stale[i + 1], u_field[i], defined
                )
            U = control_to_grid(u_out[i], d_x, problem.d_u)
            gen = build_generator(problem, grid, times[i], u_out[i], dt=dt)
            f = np.asarray(problem.running_cost(times[i], S, U), dtype=float)
            running += float((f * p[i]).sum()) * vol * dt
            p[i + 1] = fp_step(p[i], gen, dt, log=mass_log)
        J = running + float((g_terminal * p[n]).sum()) * vol
        return p, u_out, J

    def backward_pass(u_field, p_stale):
        """Backward value sweep; refreshes controls from the held density."""
        w = np.empty((n + 1,) + grid.shape)
        w[n] = g_terminal
        u_out = u_field.copy()
        for i in range(n - 1, -1, -1):
            cond, _, defined = conditional_density(p_stale[i], grid, d_x)
            u_out[i] = minimize_conditional_hamiltonian(
                problem, grid, times[i], cond, w[i + 1], u_field[i], defined
            )
            gen = build_generator(problem, grid, times[i], u_out[i], dt=dt)
            w[i] = hjb_step(problem, grid, times[i], w[i + 1], u_out[i], dt=dt, gen=gen)
        J = float((p0 * w[0]).sum()) * vol
        return w, u_out, J

    p, u, J0 = forward_pass(u, None)
    history = [J0]
    w = None
    violations = []
    converged = False
    final_delta = np.inf

    k = 0
    while k < max_iters:
        if k % 2 == 0:
            w, u, J = backward_pass(u, p)
        else:
            p, u, J = forward_pass(u, w)
        if not np.isfinite(J):
            raise DivergenceError(f"objective non-finite at iteration {k + 1}")
        slack = 1e-6 * (1.0 + abs(history[-1]))
        if J > history[-1] + slack:
            violations.append((k + 1, history[-1], J))
            warnings.warn(
                f"objective increased at iteration {k + 1}: "
                f"{history[-1]:.10g} -> {J:.10g}",
                MonotonicityWarning,
                stacklevel=2,
            )
        final_delta = abs(history[-1] - J)
        history.append(J)
        k += 1
        if final_delta <= tol * (1.0 + abs(J)):
            converged = True
            break

    return GridSweepResult(
        problem=problem,
        grid=grid,
        control=ControlField(u, grid, d_x),
        value=None if w is None else ValueField(w, grid),
        density=DensityField(p, grid),
        objective_history=np.asarray(history),
        converged=converged,
        iterations=k,
        final_delta=float(final_delta),
        mass_log=mass_log,
        monotonicity_violations=violations,
    )
