"""Nonlinear state system solver and synthetic boundary measurements.

The value function marches backward through

    -(u^{n+1} - u^n)/dt - lap u^n + |grad u^n|^2 / 2 - F(x, m^n) = 0,
    u^N = G(x, m^N),

with an inner lagged-gradient iteration per level (the shifted Laplacian is
diagonal in the cosine basis).  The density marches forward through the
conservative flux form

    (m^n - m^{n-1})/dt - lap m^n - div(m^n grad u^n) = 0,

one sparse LU per level, which conserves the trapezoid mass exactly.  A
damped Picard loop couples the two sweeps.  Both marches use the same
difference kernels as the linearized systems, so discrete linearizations
are exact directional derivatives of this scheme.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _backend
from .costs import RunningCost, TerminalCost
from .errors import ConfigError, DataError, SolverError
from .grid import (
    Field,
    Grid,
    load_field,
    ring_extract,
    save_field,
    solve_shift_neumann,
    spatial_weights,
)


# ---------------------------------------------------------------------------
# sparse assembly of the density operator m -> lap(m) + div(m grad u)
# ---------------------------------------------------------------------------

def kfp_operator_matrix(grid: Grid, u_level: np.ndarray) -> sp.csr_matrix:
    """Flux-form matrix of ``m -> lap_neumann(m) + adv_div(m, u_level)``.

    Boundary faces carry zero flux; boundary nodes use half-width dual
    cells, matching the mirror-ghost Laplacian row for row.
    """
    shape = grid.shape("outer")
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    rows, cols, vals = [], [], []
    for ax, h in enumerate(grid.dx):
        n = shape[ax]
        sl_lo = [slice(None)] * grid.dim
        sl_hi = [slice(None)] * grid.dim
        sl_lo[ax], sl_hi[ax] = slice(0, n - 1), slice(1, n)
        lo = idx[tuple(sl_lo)].ravel()
        hi = idx[tuple(sl_hi)].ravel()
        g = ((u_level[tuple(sl_hi)] - u_level[tuple(sl_lo)]) / h).ravel()
        w = np.full(n, h)
        w[0] = w[-1] = 0.5 * h
        w_nodes = np.broadcast_to(
            w.reshape([-1 if a == ax else 1 for a in range(grid.dim)]), shape
        )
        w_lo = w_nodes[tuple(sl_lo)].ravel()
        w_hi = w_nodes[tuple(sl_hi)].ravel()
        c_hi = 1.0 / h + 0.5 * g
        c_lo = -1.0 / h + 0.5 * g
        rows += [lo, lo, hi, hi]
        cols += [hi, lo, hi, lo]
        vals += [c_hi / w_lo, c_lo / w_lo, -c_hi / w_hi, -c_lo / w_hi]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.csr_matrix((vals, (rows, cols)), shape=(size, size))


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@dataclass
class MFGSolution:
    grid: Grid
    u: Field
    m: Field
    residual_history: list
    sweeps: int
    row_residual: float
    max_face_jump: float
    options: dict = field(default_factory=dict)


def _hjb_sweep(grid: Grid, running: RunningCost, terminal: TerminalCost,
               m: np.ndarray, inner_tol: float, inner_max: int) -> np.ndarray:
    nt = grid.nt
    dt = grid.dt
    u = np.empty_like(m)
    u[nt - 1] = terminal.evaluate(m[nt - 1])
    f_of_m = running.evaluate(m)
    for n in range(nt - 2, -1, -1):
        guess = u[n + 1]
        base = u[n + 1] / dt + f_of_m[n]
        for _ in range(inner_max):
            rhs = base - 0.5 * _backend.grad_sq(guess, grid.dx)
            new = solve_shift_neumann(grid, rhs, 1.0 / dt)
            delta = np.abs(new - guess).max()
            guess = new
            if delta <= inner_tol * max(1.0, np.abs(guess).max()):
                break
        else:
            raise SolverError(f"value sweep stalled at level {n}")
        u[n] = guess
    return u


def _kfp_sweep(grid: Grid, u: np.ndarray, m0: np.ndarray) -> tuple:
    nt = grid.nt
    dt = grid.dt
    shape = grid.shape("outer")
    size = int(np.prod(shape))
    eye = sp.identity(size, format="csr")
    m = np.empty_like(u)
    m[0] = m0
    max_jump = 0.0
    for n in range(1, nt):
        for ax, h in enumerate(grid.dx):
            jump = np.abs(np.diff(u[n], axis=ax)).max()
            max_jump = max(max_jump, float(jump))
        A = kfp_operator_matrix(grid, u[n])
        lu = splu((eye / dt - A).tocsc())
        m[n] = lu.solve(m[n - 1].ravel() / dt).reshape(shape)
    return m, max_jump


def _row_residual(grid: Grid, running, terminal, u, m, m0) -> float:
    dt = grid.dt
    worst = 0.0
    f_of_m = running.evaluate(m)
    for n in range(grid.nt - 1):
        r = (
            -(u[n + 1] - u[n]) / dt
            - _backend.lap_neumann(u[n], grid.dx)
            + 0.5 * _backend.grad_sq(u[n], grid.dx)
            - f_of_m[n]
        )
        worst = max(worst, float(np.abs(r).max()))
    worst = max(worst, float(np.abs(u[-1] - terminal.evaluate(m[-1])).max()))
    for n in range(1, grid.nt):
        r = (
            (m[n] - m[n - 1]) / dt
            - _backend.lap_neumann(m[n], grid.dx)
            - _backend.adv_div(m[n], u[n], grid.dx)
        )
        worst = max(worst, float(np.abs(r).max()))
    worst = max(worst, float(np.abs(m[0] - m0).max()))
    return worst


def solve_mfg(grid: Grid, running: RunningCost, terminal: TerminalCost,
              m0: np.ndarray, *, theta: float = 0.5, tol: float = 1e-11,
              max_sweeps: int = 200, inner_tol: float = 1e-12,
              inner_max: int = 400) -> MFGSolution:
    """Damped Picard iteration between the value and density marches."""
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.shape != grid.shape("outer"):
        raise ConfigError("m0 must be an outer spatial array")
    if m0.min() <= 0.0:
        raise ConfigError("m0 must be strictly positive")
    mass = float(np.sum(m0 * spatial_weights(grid, "outer")))
    if abs(mass - 1.0) > 1e-12:
        raise ConfigError(f"m0 must have unit mass, got {mass!r}")
    if not 0.0 < theta <= 1.0:
        raise ConfigError("theta must lie in (0, 1]")

    m = np.broadcast_to(m0, (grid.nt,) + grid.shape("outer")).copy()
    history = []
    max_jump = 0.0
    for sweep in range(1, max_sweeps + 1):
        u = _hjb_sweep(grid, running, terminal, m, inner_tol, inner_max)
        m_new, max_jump = _kfp_sweep(grid, u, m0)
        res = float(np.abs(m_new - m).max())
        history.append(res)
        m = (1.0 - theta) * m + theta * m_new
        if res <= tol * max(1.0, float(np.abs(m).max())):
            # finish on an exact fixed point of the two marches
            u = _hjb_sweep(grid, running, terminal, m, inner_tol, inner_max)
            m, max_jump = _kfp_sweep(grid, u, m0)
            break
    else:
        raise SolverError(
            f"Picard iteration did not reach {tol} in {max_sweeps} sweeps",
            history=history,
        )
    row_res = _row_residual(grid, running, terminal, u, m, m0)
    return MFGSolution(
        grid=grid,
        u=Field(grid, "outer", u),
        m=Field(grid, "outer", m),
        residual_history=history,
        sweeps=sweep,
        row_residual=row_res,
        max_face_jump=max_jump,
        options={"theta": theta, "tol": tol},
    )


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

@dataclass
class MeasurementData:
    """Boundary data of one state solution on the observation window.

    ``u_at0``/``m_atT`` are inner spatial fields; the lateral traces are
    ``(nt, n_ring)`` arrays in boundary-ring order.  One-sided outward
    normal derivatives are shipped alongside the traces (averaged over the
    outward axes at corners).
    """

    grid: Grid
    u_at0: Field
    m_atT: Field
    u_on_sigma: np.ndarray
    m_on_sigma: np.ndarray
    du_nu_on_sigma: np.ndarray
    dm_nu_on_sigma: np.ndarray
    mass_history: np.ndarray
    provenance: dict = field(default_factory=dict)


def _normal_derivatives(grid: Grid, outer_level: np.ndarray) -> np.ndarray:
    """One-sided outward normal differences on the inner boundary ring.

    Formed from the trace and its first neighbor inside the window, so a
    consumer can rebuild the inside layer exactly as
    ``trace - h * derivative`` without access to the field itself.
    """
    sl = grid.inner_slices
    offs = grid.inner_offset
    inner_shape = grid.shape("inner")
    acc = np.zeros(inner_shape)
    count = np.zeros(inner_shape)
    inner_vals = outer_level[sl]
    for ax, h in enumerate(grid.dx):
        for side, outward in ((0, -1), (inner_shape[ax] - 1, +1)):
            face = [slice(None)] * grid.dim
            face[ax] = side
            outer_idx = [
                slice(o, o + n) for o, n in zip(offs, inner_shape)
            ]
            outer_idx[ax] = offs[ax] + side - outward
            neighbor = outer_level[tuple(outer_idx)]
            acc[tuple(face)] += (inner_vals[tuple(face)] - neighbor) / h
            count[tuple(face)] += 1.0
    mask = count > 0
    acc[mask] /= count[mask]
    return ring_extract(grid, acc)


def measure(sol: MFGSolution) -> MeasurementData:
    grid = sol.grid
    sl = grid.inner_slices
    u = sol.u.values
    m = sol.m.values
    u_at0 = Field(grid, "inner", u[0][sl].copy(), spatial_only=True)
    m_atT = Field(grid, "inner", m[-1][sl].copy(), spatial_only=True)
    u_sigma = np.stack([ring_extract(grid, u[n][sl]) for n in range(grid.nt)])
    m_sigma = np.stack([ring_extract(grid, m[n][sl]) for n in range(grid.nt)])
    du_nu = np.stack([_normal_derivatives(grid, u[n]) for n in range(grid.nt)])
    dm_nu = np.stack([_normal_derivatives(grid, m[n]) for n in range(grid.nt)])
    w = spatial_weights(grid, "outer")
    mass = np.array([float(np.sum(m[n] * w)) for n in range(grid.nt)])
    return MeasurementData(
        grid=grid,
        u_at0=u_at0,
        m_atT=m_atT,
        u_on_sigma=u_sigma,
        m_on_sigma=m_sigma,
        du_nu_on_sigma=du_nu,
        dm_nu_on_sigma=dm_nu,
        mass_history=mass,
        provenance={"kind": "state-system"},
    )


def save_measurements(data: MeasurementData, directory, extra_manifest=None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_field(data.u_at0, directory / "u_at0")
    save_field(data.m_atT, directory / "m_atT")
    arrays = {
        "u_on_sigma": data.u_on_sigma,
        "m_on_sigma": data.m_on_sigma,
        "du_nu_on_sigma": data.du_nu_on_sigma,
        "dm_nu_on_sigma": data.dm_nu_on_sigma,
        "mass_history": data.mass_history,
    }
    digests = {}
    for name, arr in arrays.items():
        payload = np.ascontiguousarray(arr).astype("<f8").tobytes()
        (directory / f"{name}.bin").write_bytes(payload)
        digests[name] = hashlib.sha256(payload).hexdigest()
    manifest = {
        "format": "mfg-inverse-measurements-1",
        "grid": data.grid.hash_key(),
        "n_ring": int(data.u_on_sigma.shape[1]),
        "nt": data.grid.nt,
        "sha256": digests,
        "provenance": data.provenance,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_measurements(grid: Grid, directory) -> MeasurementData:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no measurement manifest in {directory}") from exc
    if manifest.get("grid") != grid.hash_key():
        raise DataError("measurements were recorded on a different grid")
    n_ring = manifest["n_ring"]
    arrays = {}
    for name, want in manifest["sha256"].items():
        payload = (directory / f"{name}.bin").read_bytes()
        if hashlib.sha256(payload).hexdigest() != want:
            raise DataError(f"checksum mismatch for {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f8")
    shape_tr = (grid.nt, n_ring)
    return MeasurementData(
        grid=grid,
        u_at0=load_field(grid, directory / "u_at0"),
        m_atT=load_field(grid, directory / "m_atT"),
        u_on_sigma=arrays["u_on_sigma"].reshape(shape_tr).copy(),
        m_on_sigma=arrays["m_on_sigma"].reshape(shape_tr).copy(),
        du_nu_on_sigma=arrays["du_nu_on_sigma"].reshape(shape_tr).copy(),
        dm_nu_on_sigma=arrays["dm_nu_on_sigma"].reshape(shape_tr).copy(),
        mass_history=arrays["mass_history"].copy(),
        provenance=manifest.get("provenance", {}),
    )
