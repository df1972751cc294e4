"""Linearized systems of every order and the adjoint pair, solved through
one space-time template.

Template rows for a backward variable ``b`` and a forward variable ``f``
on time levels ``0..N`` (N = nt - 1):

    value rows      -(b^{n+1} - b^n)/dt - L b^n - C_f(f^n) = g_b^n,  n = 0..N-1
    terminal row    b^N - DG(f^N) = g_T
    density rows    (f^n - f^{n-1})/dt - L f^n - C_b(b^n) = g_f^n,   n = 1..N
    initial row     f^0 = g_0

Directional derivatives of the state system use ``C_f = F_1 *``,
``C_b = L`` and ``DG = delta G``; the adjoint pair uses ``C_f = L``,
``C_b = F *`` and ``DG = 0`` (the roles of the couplings swap, nothing
else changes).  The system is solved monolithically by GMRES with two
block Gauss-Seidel sweeps as the preconditioner, each inverting the
shifted Laplacian exactly in its eigenbasis.

Boundary flavors: ``neumann-outer`` (unknowns on every outer node),
``dirichlet-zero-inner`` and ``dirichlet-data-inner`` (unknowns on inner
interior nodes; prescribed ring values enter through the stencil coupling
and the mollified terminal operator).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from . import _backend
from .costs import MAX_ORDER, RunningCost, TerminalCost
from .errors import CapabilityError, ConfigError, SolverError
from .grid import (
    Field,
    Grid,
    boundary_coupling,
    ring_embed,
    solve_shift_dirichlet,
    solve_shift_neumann,
)

BC_NEUMANN = "neumann-outer"
BC_ZERO = "dirichlet-zero-inner"
BC_DATA = "dirichlet-data-inner"
_BCS = (BC_NEUMANN, BC_ZERO, BC_DATA)


# ---------------------------------------------------------------------------
# batched kernels over the time axis
# ---------------------------------------------------------------------------

def _lap_neumann_batch(v: np.ndarray, dx: tuple) -> np.ndarray:
    out = np.empty_like(v)
    for n in range(v.shape[0]):
        out[n] = _backend.lap_neumann(v[n], dx)
    return out


def _lap_interior_batch(grid: Grid, v: np.ndarray) -> np.ndarray:
    """Interior Dirichlet Laplacian applied levelwise (zero ring)."""
    full_shape = grid.shape("inner")
    interior = (slice(1, -1),) * grid.dim
    out = np.empty_like(v)
    full = np.zeros(full_shape, dtype=v.dtype)
    for n in range(v.shape[0]):
        full[...] = 0.0
        full[interior] = v[n]
        out[n] = _backend.lap_dirichlet(full, grid.dx)[interior]
    return out


# ---------------------------------------------------------------------------
# template
# ---------------------------------------------------------------------------

@dataclass
class TemplateOps:
    L_batch: object          # (nt, *shape) -> same
    C_f_batch: object
    C_b_batch: object
    DG: object               # spatial slice -> spatial slice


@dataclass
class TemplateResult:
    b: np.ndarray
    f: np.ndarray
    residual: float
    iterations: int


def template_rows(grid: Grid, ops: TemplateOps, b: np.ndarray, f: np.ndarray,
                  g_b: np.ndarray, g_T: np.ndarray, g_f: np.ndarray,
                  g_0: np.ndarray, c_b: float = 1.0,
                  c_f: float = 1.0) -> tuple:
    """Row residuals of the template for given fields (diagnostics/tests).

    c_b and c_f scale the off-level entries of the two difference
    quotients; values other than one arise when an exponential envelope
    has been factored out of the unknowns.
    """
    dt = grid.dt
    Lb = ops.L_batch(b)
    Lf = ops.L_batch(f)
    rb = np.empty_like(b)
    rb[:-1] = -(c_b * b[1:] - b[:-1]) / dt - Lb[:-1] \
        - ops.C_f_batch(f)[:-1] - g_b[:-1]
    rb[-1] = b[-1] - ops.DG(f[-1]) - g_T
    rf = np.empty_like(f)
    rf[1:] = (f[1:] - c_f * f[:-1]) / dt - Lf[1:] \
        - ops.C_b_batch(b)[1:] - g_f[1:]
    rf[0] = f[0] - g_0
    return rb, rf


def solve_template(grid: Grid, ops: TemplateOps, shape: tuple,
                   g_b=None, g_T=None, g_f=None, g_0=None, *,
                   shift_solve, dtype=np.float64, tol=1e-10,
                   restart=60, maxiter=500, c_b: float = 1.0,
                   c_f: float = 1.0) -> TemplateResult:
    nt = grid.nt
    dt = grid.dt
    size = int(np.prod(shape))
    half = nt * size

    def fill(g, spatial=False):
        want = shape if spatial else (nt,) + shape
        if g is None:
            return np.zeros(want, dtype=dtype)
        g = np.asarray(g, dtype=dtype)
        if g.shape != want:
            raise ConfigError(f"source shape {g.shape}, expected {want}")
        return g

    g_b = fill(g_b)
    g_f = fill(g_f)
    g_T = fill(g_T, spatial=True)
    g_0 = fill(g_0, spatial=True)

    def matvec(x):
        b = x[:half].reshape((nt,) + shape)
        f = x[half:].reshape((nt,) + shape)
        Lb = ops.L_batch(b)
        Lf = ops.L_batch(f)
        rb = np.empty_like(b)
        rb[:-1] = -(c_b * b[1:] - b[:-1]) / dt - Lb[:-1] - ops.C_f_batch(f)[:-1]
        rb[-1] = b[-1] - ops.DG(f[-1])
        rf = np.empty_like(f)
        rf[1:] = (f[1:] - c_f * f[:-1]) / dt - Lf[1:] - ops.C_b_batch(b)[1:]
        rf[0] = f[0]
        rb[:-1] *= dt
        rf[1:] *= dt
        return np.concatenate([rb.ravel(), rf.ravel()])

    def psolve(x):
        rb = x[:half].reshape((nt,) + shape).copy()
        rf = x[half:].reshape((nt,) + shape).copy()
        rb[:-1] /= dt
        rf[1:] /= dt
        btil = np.zeros_like(rb)
        ftil = np.zeros_like(rf)
        for _ in range(2):
            ftil[0] = rf[0]
            cb = ops.C_b_batch(btil)
            for n in range(1, nt):
                rhs = rf[n] + c_f * ftil[n - 1] / dt + cb[n]
                ftil[n] = shift_solve(rhs, 1.0 / dt)
            btil[-1] = rb[-1] + ops.DG(ftil[-1])
            cf = ops.C_f_batch(ftil)
            for n in range(nt - 2, -1, -1):
                rhs = rb[n] + c_b * btil[n + 1] / dt + cf[n]
                btil[n] = shift_solve(rhs, 1.0 / dt)
        return np.concatenate([btil.ravel(), ftil.ravel()])

    rhs_b = g_b.copy()
    rhs_b[-1] = g_T
    rhs_f = g_f.copy()
    rhs_f[0] = g_0
    rhs_b[:-1] *= dt
    rhs_f[1:] *= dt
    rhs = np.concatenate([rhs_b.ravel(), rhs_f.ravel()])

    if not np.any(rhs):
        zero = np.zeros((nt,) + shape, dtype=dtype)
        return TemplateResult(zero, zero.copy(), 0.0, 0)

    A = LinearOperator((2 * half, 2 * half), matvec=matvec, dtype=dtype)
    M = LinearOperator((2 * half, 2 * half), matvec=psolve, dtype=dtype)
    iters = [0]

    def count(_):
        iters[0] += 1

    try:
        x, info = gmres(A, rhs, rtol=tol * 1e-2, atol=0.0, restart=restart,
                        maxiter=maxiter, M=M, callback=count,
                        callback_type="pr_norm")
    except TypeError:  # older scipy spells the tolerance "tol"
        x, info = gmres(A, rhs, tol=tol * 1e-2, atol=0.0, restart=restart,
                        maxiter=maxiter, M=M, callback=count,
                        callback_type="pr_norm")
    res = float(np.linalg.norm(matvec(x) - rhs) / np.linalg.norm(rhs))
    if info != 0 or res > tol:
        raise SolverError(
            f"space-time solve stalled: info={info}, relative residual {res:.3e}",
            history=[res],
        )
    b = x[:half].reshape((nt,) + shape)
    f = x[half:].reshape((nt,) + shape)
    return TemplateResult(b, f, res, iters[0])


# ---------------------------------------------------------------------------
# operator factories per boundary flavor
# ---------------------------------------------------------------------------

def _interior_slices(grid: Grid) -> tuple:
    return (slice(1, -1),) * grid.dim


def _restrict_interior(grid: Grid, outer_arr: np.ndarray) -> np.ndarray:
    return outer_arr[grid.inner_slices][_interior_slices(grid)]


def _delta_g_batchless(terminal: TerminalCost, h: np.ndarray) -> np.ndarray:
    return terminal.delta_g([h])


def make_ops(grid: Grid, running: RunningCost, terminal: TerminalCost | None,
             bc: str, roles: str = "linearized") -> tuple:
    """Build (ops, shape, shift_solve) for a boundary flavor and role set.

    ``roles='linearized'``: C_f multiplies by F_1, C_b applies L.
    ``roles='adjoint'``:    C_f applies L, C_b multiplies by F_1.
    """
    if bc not in _BCS:
        raise ConfigError(f"unknown boundary flavor {bc!r}")
    if bc == BC_NEUMANN:
        shape = grid.shape("outer")
        lap = lambda v: _lap_neumann_batch(v, grid.dx)
        f1 = running.coefficient(1)
        shift_solve = lambda rhs, s: solve_shift_neumann(grid, rhs, s)

        def dg(h):
            if terminal is None:
                return np.zeros_like(h)
            return _delta_g_batchless(terminal, h)
    else:
        shape = tuple(n - 2 for n in grid.shape("inner"))
        lap = lambda v: _lap_interior_batch(grid, v)
        f1 = _restrict_interior(grid, running.coefficient(1))
        shift_solve = lambda rhs, s: solve_shift_dirichlet(grid, rhs, s)

        def dg(h):
            if terminal is None:
                return np.zeros_like(h)
            outer = np.zeros(grid.shape("outer"), dtype=h.dtype)
            inner = np.zeros(grid.shape("inner"), dtype=h.dtype)
            inner[_interior_slices(grid)] = h
            outer[grid.inner_slices] = inner
            return _restrict_interior(grid, _delta_g_batchless(terminal, outer))

    mult = lambda v: f1 * v  # broadcasts over the time axis
    if roles == "linearized":
        ops = TemplateOps(L_batch=lap, C_f_batch=mult, C_b_batch=lap, DG=dg)
    elif roles == "adjoint":
        ops = TemplateOps(L_batch=lap, C_f_batch=lap, C_b_batch=mult,
                          DG=lambda h: np.zeros_like(h))
    else:
        raise ConfigError(f"unknown role set {roles!r}")
    return ops, shape, shift_solve


# ---------------------------------------------------------------------------
# public solvers
# ---------------------------------------------------------------------------

@dataclass
class LinearizedPair:
    """One (value, density) directional derivative pair."""

    grid: Grid
    u: Field
    m: Field
    bc: str
    order: int
    residual: float
    iterations: int
    meta: dict = field(default_factory=dict)


@dataclass
class InnerData:
    """Prescribed ring traces for the data flavor, shape (nt, n_ring)."""

    gamma_u: np.ndarray
    gamma_m: np.ndarray


def _assemble_inner_sources(grid: Grid, terminal: TerminalCost | None,
                            data: InnerData, g_b, g_f, g_T, dtype):
    """Move prescribed ring values into template sources."""
    nt = grid.nt
    shape = tuple(n - 2 for n in grid.shape("inner"))
    interior = _interior_slices(grid)
    g_b = np.zeros((nt,) + shape, dtype=dtype) if g_b is None else np.asarray(g_b, dtype=dtype).copy()
    g_f = np.zeros((nt,) + shape, dtype=dtype) if g_f is None else np.asarray(g_f, dtype=dtype).copy()
    g_T = np.zeros(shape, dtype=dtype) if g_T is None else np.asarray(g_T, dtype=dtype).copy()
    Bu = boundary_coupling(grid, np.asarray(data.gamma_u, dtype=dtype))
    Bm = boundary_coupling(grid, np.asarray(data.gamma_m, dtype=dtype))
    g_b[:-1] += Bu[:-1]
    g_f[1:] += Bm[1:] + Bu[1:]
    if terminal is not None:
        ring_T = ring_embed(grid, np.asarray(data.gamma_m[-1], dtype=dtype))
        outer = np.zeros(grid.shape("outer"), dtype=dtype)
        outer[grid.inner_slices] = ring_T
        g_T += _restrict_interior(grid, _delta_g_batchless(terminal, outer))
    return g_b, g_f, g_T


def _fill_ring(grid: Grid, interior_levels: np.ndarray, data: InnerData | None,
               which: str) -> np.ndarray:
    """Embed interior level values into the full inner box, ring from data."""
    nt = grid.nt
    full = np.zeros((nt,) + grid.shape("inner"), dtype=interior_levels.dtype)
    full[(slice(None),) + _interior_slices(grid)] = interior_levels
    if data is not None:
        gamma = data.gamma_u if which == "u" else data.gamma_m
        full += ring_embed(grid, np.asarray(gamma, dtype=interior_levels.dtype))
    return full


def solve_linearized_order1(grid: Grid, running: RunningCost,
                            terminal: TerminalCost, direction=None, *,
                            bc: str = BC_NEUMANN, inner_data: InnerData | None = None,
                            source_u=None, source_m=None, terminal_extra=None,
                            tol: float = 1e-10, c_b: float = 1.0,
                            c_f: float = 1.0) -> LinearizedPair:
    """First directional derivative of the state solution map.

    ``direction`` is the initial density direction (outer array for the
    Neumann flavor, inner interior array otherwise; ``None`` means zero).
    Extra sources/terminal data admit manufactured problems and reuse by
    the higher-order solvers.  ``c_b``/``c_f`` scale the off-level
    difference-quotient entries; passing e^{-lam^2 dt} and its inverse
    solves the system in envelope-stripped variables.
    """
    dtype = np.complex128 if any(
        x is not None and np.iscomplexobj(np.asarray(x))
        for x in (direction, source_u, source_m, terminal_extra,
                  None if inner_data is None else inner_data.gamma_u,
                  None if inner_data is None else inner_data.gamma_m)
    ) else np.float64
    ops, shape, shift_solve = make_ops(grid, running, terminal, bc, "linearized")
    g_T = terminal_extra
    g_b, g_f = source_u, source_m
    if bc == BC_DATA:
        if inner_data is None:
            raise ConfigError("dirichlet-data-inner requires inner_data")
        g_b, g_f, g_T = _assemble_inner_sources(
            grid, terminal, inner_data, g_b, g_f, g_T, dtype
        )
    elif inner_data is not None:
        raise ConfigError(f"inner_data is only meaningful with bc={BC_DATA!r}")
    res = solve_template(
        grid, ops, shape, g_b=g_b, g_T=g_T, g_f=g_f, g_0=direction,
        shift_solve=shift_solve, dtype=dtype, tol=tol, c_b=c_b, c_f=c_f,
    )
    if bc == BC_NEUMANN:
        u = Field(grid, "outer", res.b)
        m = Field(grid, "outer", res.f)
    else:
        u = Field(grid, "inner", _fill_ring(grid, res.b, inner_data, "u"))
        m = Field(grid, "inner", _fill_ring(grid, res.f, inner_data, "m"))
    return LinearizedPair(grid, u, m, bc, 1, res.residual, res.iterations)


def solve_adjoint(grid: Grid, running: RunningCost, drive, *,
                  bc: str = BC_ZERO, source_rho=None, source_v=None,
                  tol: float = 1e-10) -> LinearizedPair:
    """Adjoint pair (rho, v): rho marches backward from ``drive`` at time T,
    v marches forward from zero, couplings swapped relative to the
    linearized system, no terminal operator.

    Returned as a LinearizedPair with ``u`` holding rho and ``m`` holding v.
    """
    dtype = np.complex128 if any(
        x is not None and np.iscomplexobj(np.asarray(x))
        for x in (drive, source_rho, source_v)
    ) else np.float64
    ops, shape, shift_solve = make_ops(grid, running, None, bc, "adjoint")
    res = solve_template(
        grid, ops, shape, g_b=source_rho, g_T=drive, g_f=source_v, g_0=None,
        shift_solve=shift_solve, dtype=dtype, tol=tol,
    )
    if bc == BC_NEUMANN:
        rho = Field(grid, "outer", res.b)
        v = Field(grid, "outer", res.f)
    else:
        rho = Field(grid, "inner", _fill_ring(grid, res.b, None, "u"))
        v = Field(grid, "inner", _fill_ring(grid, res.f, None, "m"))
    pair = LinearizedPair(grid, rho, v, bc, 1, res.residual, res.iterations)
    pair.meta["roles"] = "adjoint"
    return pair


# ---------------------------------------------------------------------------
# higher orders through set partitions
# ---------------------------------------------------------------------------

def _set_partitions(items: tuple):
    """All partitions of a tuple into unordered nonempty blocks."""
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [(first,)] + part
        for i in range(len(part)):
            yield part[:i] + [tuple(sorted((first,) + part[i]))] + part[i + 1:]


def _proper_subsets(items: tuple):
    """Nonempty proper subsets, each with its complement, unordered pairs
    yielded once."""
    n = len(items)
    seen = set()
    for mask in range(1, 2**n - 1):
        s = tuple(items[i] for i in range(n) if mask & (1 << i))
        c = tuple(items[i] for i in range(n) if not mask & (1 << i))
        key = frozenset((s, c))
        if key in seen:
            continue
        seen.add(key)
        yield s, c


def solve_linearized_order_n(grid: Grid, running: RunningCost,
                             terminal: TerminalCost, directions, *,
                             bc: str = BC_NEUMANN, tol: float = 1e-10,
                             _cache=None) -> LinearizedPair:
    """Mixed directional derivative of any order up to 4.

    ``directions`` maps the derivative slots to initial density directions.
    All lower mixed derivatives are solved recursively (memoized) and feed
    the right-hand sides through the combinatorics of repeated
    differentiation of the composite nonlinearities.
    """
    n = len(directions)
    if not 1 <= n <= MAX_ORDER:
        raise CapabilityError(f"linearization order {n} outside the supported range")
    if bc == BC_DATA:
        raise ConfigError("higher order solves support homogeneous flavors only")
    cache = {} if _cache is None else _cache
    labels = tuple(range(n))

    def solve_subset(subset: tuple) -> LinearizedPair:
        if subset in cache:
            return cache[subset]
        if len(subset) == 1:
            pair = solve_linearized_order1(
                grid, running, terminal, directions[subset[0]], bc=bc, tol=tol
            )
        else:
            pair = _solve_mixed(subset)
        cache[subset] = pair
        return pair

    def _solve_mixed(subset: tuple) -> LinearizedPair:
        k = len(subset)
        lower = {s: solve_subset(s) for s, _ in _proper_subsets(subset)}
        lower.update({c: solve_subset(c) for _, c in _proper_subsets(subset)})
        shape_full = grid.shape("outer") if bc == BC_NEUMANN else grid.shape("inner")
        nt = grid.nt
        dtype = np.complex128 if any(
            p.m.is_complex or p.u.is_complex for p in lower.values()
        ) else np.float64
        g_b = np.zeros((nt,) + shape_full, dtype=dtype)
        g_f = np.zeros((nt,) + shape_full, dtype=dtype)
        # running cost: partitions with at least two blocks
        for part in _set_partitions(subset):
            if len(part) < 2:
                continue
            prod = np.ones((nt,) + shape_full, dtype=dtype)
            for block in part:
                prod = prod * lower[tuple(sorted(block))].m.values
            coeff = running.coefficient(len(part))
            if bc != BC_NEUMANN:
                coeff = coeff[grid.inner_slices]
            g_b += coeff * prod
        # Hamiltonian: unordered complementary pairs
        dx = grid.dx
        for s, c in _proper_subsets(subset):
            us, uc = lower[s].u.values, lower[c].u.values
            for lev in range(nt):
                g_b[lev] -= _backend.grad_dot(us[lev], uc[lev], dx)
        # transport: ordered nonempty proper subsets (m from one, u from other)
        for s, c in _proper_subsets(subset):
            ms, us = lower[s].m.values, lower[s].u.values
            mc, uc = lower[c].m.values, lower[c].u.values
            for lev in range(nt):
                g_f[lev] += _backend.adv_div(ms[lev], uc[lev], dx)
                g_f[lev] += _backend.adv_div(mc[lev], us[lev], dx)
        # terminal: partitions with at least two blocks
        g_T = np.zeros(shape_full, dtype=dtype)
        for part in _set_partitions(subset):
            if len(part) < 2:
                continue
            hs = []
            for block in part:
                mT = lower[tuple(sorted(block))].m.values[-1]
                if bc != BC_NEUMANN:
                    full = np.zeros(grid.shape("outer"), dtype=mT.dtype)
                    full[grid.inner_slices] = mT
                    hs.append(full)
                else:
                    hs.append(mT)
            term = terminal.delta_g(hs)
            if bc != BC_NEUMANN:
                term = term[grid.inner_slices]
            g_T += term
        if bc != BC_NEUMANN:
            interior = _interior_slices(grid)
            g_b = g_b[(slice(None),) + interior]
            g_f = g_f[(slice(None),) + interior]
            g_T = g_T[interior]
        pair = solve_linearized_order1(
            grid, running, terminal, None, bc=bc,
            source_u=g_b, source_m=g_f, terminal_extra=g_T, tol=tol,
        )
        pair.order = k
        return pair

    result = solve_subset(labels)
    result.meta["cache_size"] = len(cache)
    return result


def solve_linearized_order2(grid: Grid, running: RunningCost,
                            terminal: TerminalCost, f1, f2, *,
                            bc: str = BC_NEUMANN, tol: float = 1e-10) -> LinearizedPair:
    return solve_linearized_order_n(
        grid, running, terminal, [f1, f2], bc=bc, tol=tol
    )
