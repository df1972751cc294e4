"""Boundary functionals, frequency samples, and coefficient recovery.

The recovery pipeline has three rungs.  ``boundary_functional`` evaluates
the exact discrete pairing between a measured response difference on the
observation window and a multiplier solving the reference dual system,
consuming nothing but the window data (traces, one-sided normal
derivatives, the initial value level and the terminal density level).
``fourier_sample`` and ``adjoint_sample`` wrap the functional into tagged
samples together with their exact sampling kernels.  ``reconstruct_order1``
and ``reconstruct_order_k`` fit band limited coefficient expansions to a
collection of samples by ridge least squares and report residuals,
regularization floors, and conditioning diagnostics.

Ground truth never enters a fit: every sample carries provenance, and the
fitters reject anything that does not trace back to measured data.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from . import _backend
from .cgo import CGOParams, CGOProbe, solve_correction
from .costs import RunningCost, TerminalCost
from .errors import (
    CapabilityError,
    ConfigError,
    DataError,
    GridMismatchError,
    IllConditionedError,
    ProbeError,
    VerificationError,
)
from .forward import MeasurementData
from .grid import Field, Grid, boundary_coupling, ring_mask, save_field, spatial_weights
from .linearized import (
    BC_DATA,
    BC_NEUMANN,
    BC_ZERO,
    InnerData,
    LinearizedPair,
    solve_adjoint,
    solve_linearized_order1,
    solve_linearized_order2,
)

__all__ = [
    "IdentitySample",
    "ReconstructionResult",
    "ProbePlanEntry",
    "measure_inner",
    "measurement_difference",
    "eval_identity",
    "boundary_functional",
    "probe_experiment",
    "order2_experiment",
    "fourier_sample",
    "richardson_sample",
    "adjoint_sample",
    "leading_time_factor",
    "probe_plan",
    "collect_order1_samples",
    "collect_order2_samples",
    "reconstruct_order1",
    "reconstruct_order_k",
    "score_against",
    "write_report",
]

_DATA_KIND = "boundary-data"


# ---------------------------------------------------------------------------
# small geometry helpers
# ---------------------------------------------------------------------------

def _same_grid(a: Grid, b: Grid) -> bool:
    return (
        a.dim == b.dim
        and a.nt == b.nt
        and abs(a.T - b.T) < 1e-14
        and a.shape("outer") == b.shape("outer")
        and a.shape("inner") == b.shape("inner")
        and all(abs(x - y) < 1e-14 for x, y in zip(a.dx, b.dx))
    )


def _interior(grid: Grid) -> tuple:
    return (slice(1, -1),) * grid.dim


def _restrict_interior(grid: Grid, outer_arr: np.ndarray) -> np.ndarray:
    return outer_arr[grid.inner_slices][_interior(grid)]


def _inner_levels(f: Field) -> np.ndarray:
    """Space-time values of a field on the inner box, envelope applied."""
    if f.spatial_only:
        raise GridMismatchError("a space-time field is required")
    vals = f.unfactored().values
    if f.region == "outer":
        vals = vals[(slice(None),) + f.grid.inner_slices]
    return vals


def _lap_box(grid: Grid, level: np.ndarray) -> np.ndarray:
    """Five point Laplacian of one full inner-box level at interior nodes."""
    return _backend.lap_dirichlet(level, grid.dx)[_interior(grid)]


# ---------------------------------------------------------------------------
# window measurements
# ---------------------------------------------------------------------------

def _window_normals(grid: Grid, level: np.ndarray) -> np.ndarray:
    """One-sided outward normal differences from inner-box values.

    Same convention as the forward measurement: the reported value lets a
    consumer rebuild the first inside layer as ``trace - h * derivative``;
    corner ring nodes average their two face contributions.
    """
    shape = grid.shape("inner")
    acc = np.zeros(shape, dtype=level.dtype)
    count = np.zeros(shape)
    for ax, h in enumerate(grid.dx):
        for side, inward in ((0, +1), (shape[ax] - 1, -1)):
            face = [slice(None)] * grid.dim
            face[ax] = side
            neighbor = list(face)
            neighbor[ax] = side + inward
            acc[tuple(face)] += (level[tuple(face)] - level[tuple(neighbor)]) / h
            count[tuple(face)] += 1.0
    np.divide(acc, count, out=acc, where=count > 0)
    vals = acc[ring_mask(grid)]
    return vals


def measure_inner(grid: Grid, u_levels: np.ndarray, m_levels: np.ndarray,
                  provenance: dict | None = None) -> MeasurementData:
    """Window measurement of a pair given on the inner box.

    Mirrors the forward solver's measurement but starts from inner-box
    space-time arrays (possibly complex), as produced by data-driven or
    homogeneous-window solves.
    """
    want = (grid.nt,) + grid.shape("inner")
    u_levels = np.asarray(u_levels)
    m_levels = np.asarray(m_levels)
    if u_levels.shape != want or m_levels.shape != want:
        raise GridMismatchError(
            f"expected inner space-time shape {want}, "
            f"got {u_levels.shape} and {m_levels.shape}"
        )
    mask = ring_mask(grid)
    u_at0 = Field(grid, "inner", u_levels[0].copy(), spatial_only=True)
    m_atT = Field(grid, "inner", m_levels[-1].copy(), spatial_only=True)
    du = np.stack([_window_normals(grid, u_levels[n]) for n in range(grid.nt)])
    dm = np.stack([_window_normals(grid, m_levels[n]) for n in range(grid.nt)])
    w = spatial_weights(grid, "inner")
    mass = np.stack([(w * m_levels[n]).sum() for n in range(grid.nt)])
    return MeasurementData(
        grid=grid,
        u_at0=u_at0,
        m_atT=m_atT,
        u_on_sigma=u_levels[:, mask].copy(),
        m_on_sigma=m_levels[:, mask].copy(),
        du_nu_on_sigma=du,
        dm_nu_on_sigma=dm,
        mass_history=mass,
        provenance=dict(provenance or {"kind": "inner-window"}),
    )


def measurement_difference(a: MeasurementData, b: MeasurementData) -> MeasurementData:
    """Entrywise difference of two window measurements on one grid."""
    if not _same_grid(a.grid, b.grid):
        raise GridMismatchError("measurements live on different grids")
    grid = a.grid
    return MeasurementData(
        grid=grid,
        u_at0=Field(grid, "inner", a.u_at0.values - b.u_at0.values,
                    spatial_only=True),
        m_atT=Field(grid, "inner", a.m_atT.values - b.m_atT.values,
                    spatial_only=True),
        u_on_sigma=a.u_on_sigma - b.u_on_sigma,
        m_on_sigma=a.m_on_sigma - b.m_on_sigma,
        du_nu_on_sigma=a.du_nu_on_sigma - b.du_nu_on_sigma,
        dm_nu_on_sigma=a.dm_nu_on_sigma - b.dm_nu_on_sigma,
        mass_history=a.mass_history - b.mass_history,
        provenance={
            "kind": "difference",
            "of": (a.provenance.get("kind"), b.provenance.get("kind")),
        },
    )


# ---------------------------------------------------------------------------
# the volume pairing and its boundary-data realization
# ---------------------------------------------------------------------------

def eval_identity(running_a: RunningCost, running_b: RunningCost, order: int,
                  m_field: Field, rho_field: Field) -> complex:
    """Volume pairing of a coefficient difference against a multiplier.

    Computes ``dt * sum_n <(F_a - F_b)(order) * m^n, rho^n>`` over interior
    nodes of the window and time levels ``n = 0..nt-2`` (left rectangle in
    time, which is the discretely exact quadrature for the value rows).
    ``m_field`` carries whatever density weight the order calls for: the
    experiment density at order one, the squared first derivative at order
    two, and so on.
    """
    grid = m_field.grid
    if not _same_grid(grid, rho_field.grid):
        raise GridMismatchError("density and multiplier grids differ")
    if not (_same_grid(grid, running_a.grid) and _same_grid(grid, running_b.grid)):
        raise GridMismatchError("cost grids do not match the field grid")
    delta = running_a.coefficient(order) - running_b.coefficient(order)
    delta_i = _restrict_interior(grid, delta)
    sl = (slice(None),) + _interior(grid)
    m_lv = _inner_levels(m_field)[sl]
    r_lv = _inner_levels(rho_field)[sl]
    voldx = float(np.prod(grid.dx))
    total = (delta_i * m_lv[:-1] * r_lv[:-1]).sum()
    return complex(grid.dt * voldx * total)


def _first_layer(grid: Grid, traces: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Interior-shaped levels holding trace - h*normal next to the ring.

    Only non-corner ring nodes contribute (their one-sided normal is exact),
    and they determine every first-layer interior node, including the
    interior corners which are rebuilt from either adjacent face.
    Elsewhere the array is zero, which suffices because these levels are
    only ever paired against ring-coupling terms supported on that layer.
    """
    shape = grid.shape("inner")
    idx = np.full(shape, -1)
    idx[ring_mask(grid)] = np.arange(int(ring_mask(grid).sum()))
    int_shape = tuple(n - 2 for n in shape)
    out = np.zeros((traces.shape[0],) + int_shape,
                   dtype=np.result_type(traces, normals))
    for ax, h in enumerate(grid.dx):
        for side in (0, shape[ax] - 1):
            face = [slice(1, -1)] * grid.dim
            face[ax] = side
            flat = idx[tuple(face)]
            target: list = [slice(None)] * (grid.dim + 1)
            target[1 + ax] = 0 if side == 0 else int_shape[ax] - 1
            out[tuple(target)] = traces[:, flat] - h * normals[:, flat]
    return out


def _multiplier_levels(grid: Grid, multiplier) -> tuple[np.ndarray, np.ndarray]:
    """Full inner-box levels (rho, v) of an admissible multiplier."""
    if isinstance(multiplier, CGOProbe):
        if multiplier.params.sign != -1:
            raise ProbeError(
                "multiplier probes must decay toward t=0 (minus sign)"
            )
        if not _same_grid(grid, multiplier.leading.grid):
            raise GridMismatchError("multiplier grid does not match the data")
        rho = multiplier.density.unfactored().values
        v = multiplier.u.unfactored().values
        return rho, v
    if isinstance(multiplier, LinearizedPair):
        if multiplier.meta.get("roles") != "adjoint":
            raise ConfigError(
                "pair multipliers must come from the adjoint solver"
            )
        if not _same_grid(grid, multiplier.grid):
            raise GridMismatchError("multiplier grid does not match the data")
        rho_f, v_f = multiplier.u, multiplier.m
        rho = _inner_levels(rho_f)
        v = _inner_levels(v_f)
        return rho, v
    raise ConfigError(
        f"unsupported multiplier type {type(multiplier).__name__}"
    )


def boundary_functional(diff: MeasurementData, multiplier, running_ref: RunningCost,
                        *, terminal: TerminalCost | None = None,
                        m0_diff: np.ndarray | None = None) -> complex:
    """Boundary-data evaluation of the volume pairing.

    For a response difference whose rows carry the reference first-order
    coupling and an unknown source, summation by parts in time and the
    discrete Green identity in space move everything onto quantities the
    window measurement provides: the t=0 value level, the t=T density
    level (through the terminal derivative), ring traces, and the first
    inside layer rebuilt from one-sided normal derivatives.  The result
    equals ``eval_identity`` applied to the source, exactly up to solver
    tolerances.

    The terminal derivative is applied to the zero-extended window level,
    which is exact when the difference is supported on the window (data
    driven experiments) or when the profile's first variation vanishes at
    the flat state; the mollifier makes it nonlocal otherwise.
    """
    grid = diff.grid
    if diff.du_nu_on_sigma is None or diff.dm_nu_on_sigma is None:
        raise DataError("normal derivative traces are missing from the data")
    if diff.u_on_sigma is None or diff.m_on_sigma is None:
        raise DataError("ring traces are missing from the data")
    rho, v = _multiplier_levels(grid, multiplier)
    rho = rho.astype(np.complex128, copy=False)
    v = v.astype(np.complex128, copy=False)
    dt = grid.dt
    voldx = float(np.prod(grid.dx))
    inter = _interior(grid)
    sl = (slice(None),) + inter

    w = np.zeros_like(rho)
    w[1:] = rho[1:] + rho[:-1] + v[:-1]

    rho_i = rho[sl]
    w_i = w[sl]
    lap_rho0 = _lap_box(grid, rho[0])
    lap_w_end = _lap_box(grid, w[-1])

    u0 = diff.u_at0.values[inter].astype(np.complex128, copy=False)
    mT_full = diff.m_atT.values
    mT = mT_full[inter].astype(np.complex128, copy=False)
    if terminal is None:
        uN = np.zeros_like(mT)
    else:
        outer = np.zeros(grid.shape("outer"), dtype=np.complex128)
        outer[grid.inner_slices] = mT_full
        uN = _restrict_interior(grid, terminal.delta_g([outer]))
    if m0_diff is None:
        m0 = np.zeros_like(mT)
    else:
        m0 = np.asarray(m0_diff).astype(np.complex128, copy=False)

    f1 = _restrict_interior(grid, running_ref.coefficient(1))

    gamma_u = diff.u_on_sigma.astype(np.complex128, copy=False)
    gamma_m = diff.m_on_sigma.astype(np.complex128, copy=False)
    u_first = _first_layer(grid, gamma_u, diff.du_nu_on_sigma)
    m_first = _first_layer(grid, gamma_m, diff.dm_nu_on_sigma)

    mask = ring_mask(grid)
    b_rho = boundary_coupling(grid, rho[:, mask])
    b_w = boundary_coupling(grid, w[:, mask])
    b_u = boundary_coupling(grid, gamma_u)
    b_m = boundary_coupling(grid, gamma_m)

    total = (u0 * rho_i[0]).sum() - dt * (u0 * lap_rho0).sum()
    total -= (uN * rho_i[-2]).sum()
    total += dt * (uN * lap_w_end).sum()
    total -= (mT * w_i[-1]).sum()
    total += dt * (mT * lap_w_end).sum()
    total += (m0 * w_i[1]).sum()
    total -= dt * (m0 * f1 * rho_i[0]).sum()

    total += dt * (u_first[:-1] * b_rho[:-1]).sum()
    total -= dt * (u_first[1:] * b_w[1:]).sum()
    total -= dt * (b_u[:-1] * rho_i[:-1]).sum()
    total += dt * (b_u[1:] * w_i[1:]).sum()
    total -= dt * (m_first[1:] * b_w[1:]).sum()
    total += dt * (b_m[1:] * w_i[1:]).sum()
    return complex(voldx * total)


# ---------------------------------------------------------------------------
# experiments: driving the unknown system and measuring the difference
# ---------------------------------------------------------------------------

def probe_experiment(grid: Grid, running_true: RunningCost,
                     terminal: TerminalCost | None, probe: CGOProbe, *,
                     tol: float = 1e-9) -> tuple[MeasurementData, np.ndarray]:
    """Window response difference of the unknown system to one probe.

    The unknown-cost linearized system is solved once with the probe's own
    ring trace and initial level as prescribed data (in envelope-stripped
    variables so the march stays bounded).  The reference response to the
    same data is the probe itself, by uniqueness of the data solve, so no
    second solve is needed.  Returns the measurement difference and the
    reference density levels, which later feed the sampling kernel.
    """
    p = probe.params
    if p.sign != 1:
        raise ProbeError("experiments drive the window with a plus probe")
    beta = float(np.exp(-p.lam ** 2 * grid.dt))
    dens = probe.leading.values + probe.correction.values
    mask = ring_mask(grid)
    data = InnerData(
        gamma_u=np.zeros((grid.nt, int(mask.sum())), dtype=np.complex128),
        gamma_m=dens[:, mask].copy(),
    )
    pair = solve_linearized_order1(
        grid, running_true, terminal, dens[0][_interior(grid)],
        bc=BC_DATA, inner_data=data, c_b=beta, c_f=1.0 / beta, tol=tol,
    )
    env = np.exp(probe.leading.log_env).reshape((-1,) + (1,) * grid.dim)
    ref_m = dens * env
    d_true = measure_inner(
        grid, pair.u.values * env, pair.m.values * env,
        provenance={"kind": "inner-window", "system": "unknown"},
    )
    d_ref = measure_inner(
        grid, probe.u.values * env, ref_m,
        provenance={"kind": "inner-window", "system": "reference"},
    )
    diff = measurement_difference(d_true, d_ref)
    diff.provenance = {
        "kind": _DATA_KIND,
        "experiment": "window-probe",
        "lam": p.lam,
    }
    return diff, ref_m


def order2_experiment(grid: Grid, running_true: RunningCost,
                      running_ref: RunningCost, terminal: TerminalCost | None,
                      direction: np.ndarray, *,
                      tol: float = 1e-10) -> tuple[MeasurementData, np.ndarray]:
    """Second directional response difference measured on the window.

    Both systems evolve under the full no-flux dynamics from the same
    initial direction.  With matched first-order coefficients the two
    first derivatives coincide, every quadratic source cancels in the
    difference, and what remains is the order-two coefficient difference
    weighted by the squared first-order density.  Returns the measurement
    difference and the first-order density levels on the window.
    """
    f1t = running_true.coefficient(1)
    f1r = running_ref.coefficient(1)
    if not np.array_equal(f1t, f1r):
        raise ConfigError(
            "order-two experiments need matched first-order coefficients"
        )
    if terminal is not None and terminal.psi_derivative_at_flat(1) != 0.0:
        raise ConfigError(
            "window data cannot rebuild the mollified terminal derivative of "
            "a whole-domain difference; use a profile with vanishing first "
            "variation at the flat state"
        )
    base = solve_linearized_order1(
        grid, running_ref, terminal, direction, bc=BC_NEUMANN, tol=tol
    )
    pa = solve_linearized_order2(
        grid, running_true, terminal, direction, direction,
        bc=BC_NEUMANN, tol=tol,
    )
    pb = solve_linearized_order2(
        grid, running_ref, terminal, direction, direction,
        bc=BC_NEUMANN, tol=tol,
    )
    sl = (slice(None),) + grid.inner_slices
    d_true = measure_inner(
        grid, pa.u.values[sl], pa.m.values[sl],
        provenance={"kind": "inner-window", "system": "unknown"},
    )
    d_ref = measure_inner(
        grid, pb.u.values[sl], pb.m.values[sl],
        provenance={"kind": "inner-window", "system": "reference"},
    )
    diff = measurement_difference(d_true, d_ref)
    diff.provenance = {"kind": _DATA_KIND, "experiment": "second-order"}
    return diff, base.m.values[sl].copy()


# ---------------------------------------------------------------------------
# samples
# ---------------------------------------------------------------------------

@dataclass
class IdentitySample:
    """One evaluated pairing with its exact sampling kernel.

    ``frequency`` is ``((k_x, k_y), tau_sum)`` for probe pairs and None for
    generic adjoint multipliers; ``weight`` is the interior kernel W with
    ``value = sum_x coeff_diff(x) W(x) dx`` up to linearization error.

    The recorded frequency refers to the plane wave e^{-i(k.x + tau t)} in
    the coordinates of the outer box, not relative to the window corner;
    oracles that anchor phases elsewhere pick up a constant rotation e^{-ik.a}.
    """

    value: complex
    frequency: tuple | None
    lam: float | None
    tau: float | None
    weight: np.ndarray | None
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def leading_time_factor(plus: CGOParams, minus: CGOParams, grid: Grid) -> complex:
    """Temporal factor of a pair's leading kernel under the left rule."""
    from .cgo import theta_profile

    t = grid.times
    th = theta_profile(plus, grid) * theta_profile(minus, grid)
    phase = np.exp(
        plus.osc_sign * 1j * plus.tau * t
        + minus.osc_sign * 1j * minus.tau * (t - grid.T)
    )
    return complex(grid.dt * (th[:-1] * phase[:-1]).sum())


def fourier_sample(diff: MeasurementData, plus: CGOProbe, minus: CGOProbe,
                   running_ref: RunningCost, *,
                   terminal: TerminalCost | None = None) -> IdentitySample:
    """Pairing of a probe-driven difference with the mirrored probe.

    The two carrier phases cancel only when the probes share the rapid
    direction, so mismatched xi is rejected.  The sampling kernel is
    accumulated from the envelope-stripped products, where the growing and
    decaying envelopes cancel level by level.
    """
    pp, mp = plus.params, minus.params
    if pp.sign != 1 or mp.sign != -1:
        raise ProbeError("a sample pairs a plus probe with a minus probe")
    if max(abs(a - b) for a, b in zip(pp.xi, mp.xi)) > 1e-12:
        raise ProbeError(
            "probe pair must share the carrier direction xi; "
            "opposite-sign envelopes already mirror the phase"
        )
    if abs(pp.lam - mp.lam) > 1e-12:
        raise ProbeError("probe pair must share the frequency scale lam")
    if abs(pp.freq_scale - mp.freq_scale) > 1e-12:
        raise ProbeError("probe pair must share the lattice stretch")
    if pp.osc_sign != -1 or mp.osc_sign != -1:
        raise ProbeError("sampling assumes the default oscillation sign")
    grid = diff.grid
    if not (_same_grid(grid, plus.leading.grid) and _same_grid(grid, minus.leading.grid)):
        raise GridMismatchError("probe grids do not match the data grid")
    value = boundary_functional(diff, minus, running_ref, terminal=terminal)
    d_plus = plus.leading.values + plus.correction.values
    d_minus = minus.leading.values + minus.correction.values
    logw = plus.leading.log_env + minus.leading.log_env
    env = np.exp(logw).reshape((-1,) + (1,) * grid.dim)
    lv = (d_plus * d_minus * env)[(slice(None),) + _interior(grid)]
    weight = grid.dt * lv[:-1].sum(axis=0)
    k = tuple(pp.freq_scale * (pp.eta[i] + mp.eta[i]) for i in range(grid.dim))
    return IdentitySample(
        value=value,
        frequency=(k, pp.tau + mp.tau),
        lam=pp.lam,
        tau=pp.tau + mp.tau,
        weight=weight,
        provenance=dict(diff.provenance),
        meta={"time_factor": leading_time_factor(pp, mp, grid)},
    )


def richardson_sample(lo: IdentitySample, hi: IdentitySample) -> IdentitySample:
    """Two-point extrapolation of normalized samples against the slow tail.

    Normalizes each sample by its leading temporal factor and removes the
    lam^{-1/2} truncation term.  The extrapolated sample carries no kernel;
    it estimates the plain transform of the coefficient difference.
    """
    if lo.frequency is None or hi.frequency is None:
        raise ProbeError("extrapolation needs probe-pair samples")
    kl, tl = lo.frequency
    kh, th = hi.frequency
    if max(abs(a - b) for a, b in zip(kl, kh)) > 1e-9 or abs(tl - th) > 1e-9:
        raise ProbeError("extrapolation needs samples at one frequency")
    if not hi.lam > lo.lam:
        raise ProbeError("extrapolation needs two distinct lam values, low first")
    h_lo = lo.value / lo.meta["time_factor"]
    h_hi = hi.value / hi.meta["time_factor"]
    s_lo, s_hi = np.sqrt(lo.lam), np.sqrt(hi.lam)
    value = (s_hi * h_hi - s_lo * h_lo) / (s_hi - s_lo)
    return IdentitySample(
        value=complex(value),
        frequency=lo.frequency,
        lam=hi.lam,
        tau=lo.tau,
        weight=None,
        provenance=dict(lo.provenance),
        meta={"extrapolated_from": (lo.lam, hi.lam)},
    )


def adjoint_sample(diff: MeasurementData, pair: LinearizedPair,
                   running_ref: RunningCost, kernel_levels: np.ndarray, *,
                   terminal: TerminalCost | None = None) -> IdentitySample:
    """Pairing of a difference with a generic adjoint multiplier.

    ``kernel_levels`` carries the known density weight of the order at
    hand on the inner box (the squared first derivative at order two); the
    sample's kernel is its product with the multiplier under the left rule.
    """
    grid = diff.grid
    value = boundary_functional(diff, pair, running_ref, terminal=terminal)
    rho = _inner_levels(pair.u)
    lv = (np.asarray(kernel_levels) * rho)[(slice(None),) + _interior(grid)]
    weight = grid.dt * lv[:-1].sum(axis=0)
    return IdentitySample(
        value=value,
        frequency=None,
        lam=None,
        tau=None,
        weight=weight,
        provenance=dict(diff.provenance),
        meta={},
    )


# ---------------------------------------------------------------------------
# probe plans and sample collection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbePlanEntry:
    """One planned pair: parameters for both probes and the lattice index."""

    plus: CGOParams
    minus: CGOParams
    k_index: tuple


def _unit(v: np.ndarray) -> tuple:
    return tuple(float(x) for x in v / np.linalg.norm(v))


def probe_plan(grid: Grid, *, lam: float = 3.0, tau: float = 0.8,
               band: int = 1) -> list[ProbePlanEntry]:
    """Deterministic pair plan covering the band-1 window lattice.

    Each lattice mode fixes the common slow direction of the pair (both
    probes share eta so the sum points along the mode) and the stretch
    factor that lands the sum exactly on the mode; the rapid direction is
    the in-plane normal.  Nonzero modes are repeated over a symmetric tau
    sweep, which totals 25 pairs at band 1.
    """
    if grid.dim != 2:
        raise CapabilityError("pair plans are built on two dimensional grids")
    if band != 1:
        raise CapabilityError("only the first lattice band is covered")
    k_base = np.array([
        2.0 * np.pi / (ax[-1] - ax[0]) for ax in grid.axes("inner")
    ])
    taus = [(0.0, 0.0), (tau, -tau), (-tau, tau)]
    entries: list[ProbePlanEntry] = []
    zero_eta = _unit(np.array([0.0, 1.0]))
    entries.append(ProbePlanEntry(
        plus=CGOParams(lam=lam, xi=(1.0, 0.0), eta=zero_eta, tau=0.0,
                       sign=1, freq_scale=0.5 * k_base[0]),
        minus=CGOParams(lam=lam, xi=(1.0, 0.0),
                        eta=_unit(-np.array(zero_eta)), tau=0.0,
                        sign=-1, freq_scale=0.5 * k_base[0]),
        k_index=(0, 0),
    ))
    modes = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1), (1, -1), (-1, 1)]
    for kx, ky in modes:
        wvec = np.array([k_base[0] * kx, k_base[1] * ky])
        scale = 0.5 * float(np.linalg.norm(wvec))
        eta = _unit(wvec)
        xi = _unit(np.array([-wvec[1], wvec[0]]))
        for t1, t2 in taus:
            entries.append(ProbePlanEntry(
                plus=CGOParams(lam=lam, xi=xi, eta=eta, tau=t1, sign=1,
                               freq_scale=scale),
                minus=CGOParams(lam=lam, xi=xi, eta=eta, tau=t2, sign=-1,
                                freq_scale=scale),
                k_index=(kx, ky),
            ))
    return entries


def collect_order1_samples(grid: Grid, running_true: RunningCost,
                           running_ref: RunningCost,
                           terminal: TerminalCost | None,
                           plan: list[ProbePlanEntry] | None = None, *,
                           lam: float = 3.0, tol: float = 1e-9,
                           workers: int = 0) -> list[IdentitySample]:
    """Run the pair plan against the unknown system and collect samples.

    Probe construction, the data-driven solve, and the pairing are
    independent across plan entries, so collection parallelizes over a
    thread pool; results keep the plan order regardless of worker count.
    """
    if plan is None:
        plan = probe_plan(grid, lam=lam)

    def run(entry: ProbePlanEntry) -> IdentitySample:
        plus = solve_correction(grid, running_ref, terminal, entry.plus)
        minus = solve_correction(grid, running_ref, terminal, entry.minus)
        diff, _ = probe_experiment(grid, running_true, terminal, plus, tol=tol)
        sample = fourier_sample(diff, plus, minus, running_ref,
                                terminal=terminal)
        sample.meta["k_index"] = entry.k_index
        return sample

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, plan))
    return [run(entry) for entry in plan]


def collect_order2_samples(grid: Grid, running_true: RunningCost,
                           running_ref: RunningCost,
                           terminal: TerminalCost | None,
                           direction: np.ndarray, *,
                           drives: list[np.ndarray] | None = None,
                           tol: float = 1e-10, workers: int = 0,
                           ) -> tuple[list[IdentitySample], np.ndarray]:
    """Collect order-two samples against generic adjoint multipliers.

    One experiment supplies the difference data; the multipliers sweep a
    family of terminal drives (the window lattice functions by default).
    Returns the samples and the first-order density levels whose aggregate
    gates the order-two fit.
    """
    diff, m1 = order2_experiment(
        grid, running_true, running_ref, terminal, direction, tol=tol
    )
    if drives is None:
        _, basis = _fourier_basis(grid, 1)
        drives = [basis[j][_interior(grid)].copy() for j in range(len(basis))]
    kernel = m1 ** 2

    def run(drive: np.ndarray) -> IdentitySample:
        pair = solve_adjoint(grid, running_ref, drive, bc=BC_ZERO, tol=tol)
        return adjoint_sample(diff, pair, running_ref, kernel,
                              terminal=terminal)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(run, drives))
    else:
        samples = [run(d) for d in drives]
    return samples, m1


# ---------------------------------------------------------------------------
# ridge fits
# ---------------------------------------------------------------------------

@dataclass
class ReconstructionResult:
    """Recovered coefficient at one order with fit diagnostics.

    ``field`` is the absolute estimate on the window (reference plus fitted
    difference, real part); ``delta`` keeps the complex fitted difference.
    ``floor`` is the regularization floor: the field-level response of the
    ridge solution to per-sample data error at the declared tolerance.
    """

    order: int
    field: Field
    delta: np.ndarray
    band: int
    ridge_weight: float
    residual: float
    floor: float
    coefficients: np.ndarray
    labels: list
    mask: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _fourier_basis(grid: Grid, band: int) -> tuple[list, np.ndarray]:
    """Real lattice functions on the inner box, deterministically ordered.

    One representative of each +-k pair contributes a cosine and, when
    nonzero, a sine; at band 1 in two dimensions that is nine functions.
    """
    axes = grid.axes("inner")
    k_base = [2.0 * np.pi / (ax[-1] - ax[0]) for ax in axes]
    coords = np.meshgrid(*[ax - ax[0] for ax in axes], indexing="ij")
    labels: list = []
    funcs: list = []
    for k in product(range(-band, band + 1), repeat=grid.dim):
        nonzero = [v for v in k if v != 0]
        if nonzero and nonzero[0] < 0:
            continue
        phase = sum(k_base[i] * k[i] * coords[i] for i in range(grid.dim))
        labels.append((k, "cos"))
        funcs.append(np.cos(phase) if nonzero else np.ones_like(coords[0]))
        if nonzero:
            labels.append((k, "sin"))
            funcs.append(np.sin(phase))
    return labels, np.stack(funcs)


def _assert_sample_provenance(samples: list[IdentitySample]) -> None:
    for i, s in enumerate(samples):
        if s.provenance.get("kind") != _DATA_KIND:
            raise VerificationError(
                f"sample {i} does not trace back to measured boundary data"
            )
        if s.weight is None:
            raise ConfigError(
                f"sample {i} carries no sampling kernel and cannot be fitted"
            )


def _ridge_solve(a: np.ndarray, b: np.ndarray, weight: float) -> np.ndarray:
    m = a.shape[1]
    top = np.vstack([a, weight * np.eye(m, dtype=a.dtype)])
    rhs = np.concatenate([b, np.zeros(m, dtype=b.dtype)])
    coef, *_ = np.linalg.lstsq(top, rhs, rcond=None)
    return coef

def _l_curve_weight(a: np.ndarray, b: np.ndarray) -> float:
    """Corner of the residual-versus-norm trade-off over a fixed sweep."""
    smax = float(np.linalg.svd(a, compute_uv=False)[0])
    if not smax > 0:
        return 1e-8
    candidates = smax * np.geomspace(1e-10, 1e-2, 17)
    log_r = np.empty(len(candidates))
    log_n = np.empty(len(candidates))
    for i, w in enumerate(candidates):
        c = _ridge_solve(a, b, w)
        log_r[i] = np.log10(max(np.linalg.norm(a @ c - b), 1e-300))
        log_n[i] = np.log10(max(np.linalg.norm(c), 1e-300))
    curvature = np.zeros(len(candidates))
    for i in range(1, len(candidates) - 1):
        d1r, d2r = log_r[i] - log_r[i - 1], log_r[i + 1] - log_r[i]
        d1n, d2n = log_n[i] - log_n[i - 1], log_n[i + 1] - log_n[i]
        curvature[i] = (d2r - d1r) - (d2n - d1n)
    return float(candidates[int(np.argmax(curvature))])


def _fit(samples: list[IdentitySample], grid: Grid, band: int,
         ridge_weight: float | None, tol_data: float):
    labels, basis = _fourier_basis(grid, band)
    basis_i = basis[(slice(None),) + _interior(grid)]
    voldx = float(np.prod(grid.dx))
    flat = basis_i.reshape(len(labels), -1)
    a = np.stack([
        voldx * (flat @ s.weight.reshape(-1)) for s in samples
    ]).astype(np.complex128)
    b = np.array([s.value for s in samples], dtype=np.complex128)
    if ridge_weight is None:
        ridge_weight = _l_curve_weight(a, b)
    coef = _ridge_solve(a, b, float(ridge_weight))
    residual = float(np.linalg.norm(a @ coef - b))
    sing = np.linalg.svd(a, compute_uv=False)
    gain = float((sing / (sing ** 2 + ridge_weight ** 2)).max())
    w_space = spatial_weights(grid, "inner")
    basis_norms = np.sqrt((w_space * basis ** 2).sum(axis=tuple(range(1, basis.ndim))))
    scale = max(1.0, float(np.abs(b).max(initial=0.0)))
    floor = gain * tol_data * scale * np.sqrt(len(samples)) \
        * float(np.sqrt((basis_norms ** 2).sum()))
    delta = np.tensordot(coef, basis, axes=(0, 0))
    meta: dict = {"samples": len(samples)}
    if len(samples) < len(labels):
        meta["conditioning"] = (
            "under-determined lattice: fewer samples than basis functions"
        )
    elif sing[0] > 0 and sing[0] / max(sing[-1], 1e-300) > 1e10:
        meta["conditioning"] = "ill-conditioned sampling matrix"
    re_norm = float(np.sqrt((w_space * delta.real ** 2).sum()))
    im_norm = float(np.sqrt((w_space * delta.imag ** 2).sum()))
    meta["imag_fraction"] = im_norm / max(re_norm, 1e-300)
    return labels, np.asarray(coef), float(ridge_weight), residual, floor, delta, meta


def reconstruct_order1(samples: list[IdentitySample], running_ref: RunningCost,
                       *, band: int = 1, ridge_weight: float | None = None,
                       tol_data: float = 1e-8) -> ReconstructionResult:
    """Fit the first-order coefficient difference and add the reference.

    Ridge least squares against the samples' exact kernels; the recovered
    field is real by construction of the basis, with the imaginary residue
    of the complex fit reported in the metadata.
    """
    _assert_sample_provenance(samples)
    grid = running_ref.grid
    labels, coef, w, residual, floor, delta, meta = _fit(
        samples, grid, band, ridge_weight, tol_data
    )
    ref = running_ref.coefficient(1)[grid.inner_slices]
    out = Field(grid, "inner", delta.real + ref, spatial_only=True)
    return ReconstructionResult(
        order=1, field=out, delta=delta, band=band, ridge_weight=w,
        residual=residual, floor=floor, coefficients=coef, labels=labels,
        mask=None, meta=meta,
    )


def reconstruct_order_k(k: int, samples: list[IdentitySample],
                        running_ref: RunningCost,
                        lower: list[ReconstructionResult],
                        weight_levels: np.ndarray, *, band: int = 1,
                        ridge_weight: float | None = None,
                        weight_floor: float = 0.02,
                        tol_data: float = 1e-8) -> ReconstructionResult:
    """Fit the order-k coefficient difference behind the density weight.

    ``weight_levels`` holds the chosen first-order density on the window;
    its time-aggregated (k-1)-th power gates the recovery.  Where the
    aggregate falls under the floor the kernel carries no information and
    the node is recorded in the mask; if that happens on more than a fifth
    of the window the fit refuses and asks for a positive direction.
    """
    if k < 2:
        raise ConfigError("orders below two use reconstruct_order1")
    if len(lower) != k - 1:
        raise ConfigError(
            f"order {k} needs the {k - 1} lower-order results, got {len(lower)}"
        )
    _assert_sample_provenance(samples)
    grid = running_ref.grid
    agg = grid.dt * (np.asarray(weight_levels)[:-1] ** (k - 1)).sum(axis=0)
    agg = agg[_interior(grid)]
    top = float(np.abs(agg).max())
    mask = np.abs(agg) < weight_floor * top
    frac = float(mask.mean())
    if frac > 0.20:
        raise IllConditionedError(
            f"density weight below floor on {frac:.0%} of the window; "
            "choose a positive initial direction"
        )
    labels, coef, w, residual, floor, delta, meta = _fit(
        samples, grid, band, ridge_weight, tol_data
    )
    meta["weight_floor"] = weight_floor
    ref = running_ref.coefficient(k)[grid.inner_slices]
    out = Field(grid, "inner", delta.real + ref, spatial_only=True)
    return ReconstructionResult(
        order=k, field=out, delta=delta, band=band, ridge_weight=w,
        residual=residual, floor=floor, coefficients=coef, labels=labels,
        mask=mask, meta=meta,
    )


def score_against(result: ReconstructionResult, truth: np.ndarray) -> dict:
    """Error metrics against a known absolute coefficient (test use only).

    Never called inside the recovery pipeline; the provenance gate keeps
    it that way.  Reports the relative weighted L2 error of the fitted
    difference and the error against the band-limited projection of the
    truth, which is the attainable target for out-of-band content.
    """
    grid = result.field.grid
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape == grid.shape("outer"):
        truth = truth[grid.inner_slices]
    if truth.shape != grid.shape("inner"):
        raise GridMismatchError("truth array matches neither box")
    ref = result.field.values - result.delta.real
    delta_true = truth - ref
    w = spatial_weights(grid, "inner")

    def norm(x):
        return float(np.sqrt((w * x ** 2).sum()))

    err = norm(result.delta.real - delta_true)
    den = norm(delta_true)
    metrics = {
        "abs_l2": err,
        "rel_l2": err / den if den > 0 else err,
        "delta_norm": den,
    }
    _, basis = _fourier_basis(grid, result.band)
    flat = basis.reshape(len(basis), -1)
    ww = w.reshape(-1)
    gram = (flat * ww) @ flat.T
    rhs = (flat * ww) @ delta_true.reshape(-1)
    proj = np.linalg.solve(gram, rhs) @ flat
    proj = proj.reshape(grid.shape("inner"))
    errp = norm(result.delta.real - proj)
    denp = norm(proj)
    metrics["rel_l2_projected"] = errp / denp if denp > 0 else errp
    result.metrics.update(metrics)
    return metrics


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_report(result: ReconstructionResult, samples: list[IdentitySample],
                 out_dir) -> dict:
    """Write the JSON report, the recovered field, and the sample table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_field(result.field, out / "recovered_field")
    report = {
        "order": result.order,
        "band": result.band,
        "ridge_weight": result.ridge_weight,
        "residual": result.residual,
        "floor": result.floor,
        "metrics": result.metrics,
        "meta": {k: v for k, v in result.meta.items() if not isinstance(v, complex)},
        "coefficients": [
            {"k": list(lab[0]), "part": lab[1],
             "re": float(c.real), "im": float(c.imag)}
            for lab, c in zip(result.labels, result.coefficients)
        ],
    }
    if result.mask is not None:
        report["masked_fraction"] = float(result.mask.mean())
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with (out / "samples.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k1", "k2", "tau", "re", "im", "lam"])
        for s in samples:
            if s.frequency is None:
                k1 = k2 = ""
            else:
                k1, k2 = (f"{v:.9g}" for v in s.frequency[0])
            writer.writerow([
                k1, k2,
                "" if s.tau is None else f"{s.tau:.9g}",
                f"{s.value.real:.17g}", f"{s.value.imag:.17g}",
                "" if s.lam is None else f"{s.lam:.9g}",
            ])
    return {
        "report": str(out / "report.json"),
        "field": str(out / "recovered_field.bin"),
        "samples": str(out / "samples.csv"),
    }
