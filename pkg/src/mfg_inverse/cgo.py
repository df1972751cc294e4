"""Oscillatory probing modes on the inner cylinder.

A probe is an exact discrete solution of the first-variation pair (sign +)
or of the adjoint pair (sign -) on the inner box, shaped like

    e^{-lam^2 t} e^{-i lam x.xi} (theta_+ e^{-i s0(eta.x) - i tau t} + w)

for the + sign and the time-mirrored, conjugate-phased analogue for the -
sign.  The real envelope e^{-+lam^2 t} is never materialized: fields are
stored factored (values carry phases and corrections, ``log_env`` carries
the envelope), and every march below runs in envelope-stripped variables.

Construction: the leading term is sampled on the grid; the pair is then
made into an exact solution by alternating exact marches in the interior
sine eigenbasis.  The density-side march is split per mode into a forward
or backward recursion, whichever is the stable direction for that mode at
the given envelope rate; anchors take the leading term's values at the
stable end.  The value-side companion march is unconditionally stable.
The alternation is the contraction map whose factor the certificates
report; it stops when the successive-iterate weighted distance falls
below tolerance, and the assembled pair's row residuals are certified.

``freq_scale`` records the frequency-lattice stretch: the (eta, tau)
oscillation is sampled as e^{-i(freq_scale*eta.x + tau*t)}, so a probe
pair with matched xi carries spatial frequency freq_scale*(eta1+eta2).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .costs import RunningCost, TerminalCost
from .errors import CapabilityError, ConfigError, ProbeError, RangeError
from .grid import (
    Field,
    Grid,
    boundary_coupling,
    dirichlet_eigen,
    ring_mask,
    spatial_weights,
    weighted_l2_norm,
)

_ENV_CAP = 20.0  # no stripped intermediate may exceed e^20
_SHIFT_CAP = float(np.exp(16.0))  # magnitude budget for anchor shifts


@dataclass(frozen=True)
class CGOParams:
    """Frequency-scale, directions, and sign conventions of one probe."""

    lam: float
    xi: tuple
    eta: tuple
    tau: float = 0.0
    sign: int = 1
    osc_sign: int = -1
    freq_scale: float = 1.0

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=np.float64)
        eta = np.asarray(self.eta, dtype=np.float64)
        if xi.ndim != 1 or xi.shape != eta.shape:
            raise ConfigError("xi and eta must be vectors of equal dimension")
        if xi.size < 2:
            raise CapabilityError(
                "orthogonal direction pairs need at least two dimensions"
            )
        if abs(np.linalg.norm(xi) - 1.0) > 1e-12 or abs(np.linalg.norm(eta) - 1.0) > 1e-12:
            raise ConfigError("xi and eta must be unit vectors")
        if abs(float(xi @ eta)) > 1e-12:
            raise ConfigError("xi and eta must be orthogonal")
        if not self.lam > 0:
            raise RangeError("lam must be positive")
        if self.sign not in (1, -1) or self.osc_sign not in (1, -1):
            raise ConfigError("sign and osc_sign must be +1 or -1")
        if not self.freq_scale > 0:
            raise RangeError("freq_scale must be positive")
        object.__setattr__(self, "xi", tuple(float(v) for v in xi))
        object.__setattr__(self, "eta", tuple(float(v) for v in eta))


def _check_grid(grid: Grid, params: CGOParams):
    if grid.dim != 2 or len(params.xi) != 2:
        raise CapabilityError("probes are built on two dimensional grids")
    if params.lam**2 * grid.dt > _ENV_CAP:
        raise RangeError(
            f"envelope step exp(lam^2 dt) would exceed e^{_ENV_CAP:.0f}; "
            "refine the time grid or lower lam"
        )


def theta_profile(params: CGOParams, grid: Grid) -> np.ndarray:
    """Switch-on profile: vanishes at t=0 (+) or t=T (-)."""
    rate = params.lam ** 0.75
    t = grid.times
    if params.sign > 0:
        return 1.0 - np.exp(-rate * t)
    return 1.0 - np.exp(-rate * (grid.T - t))


def log_envelope(params: CGOParams, grid: Grid) -> np.ndarray:
    """Per-level log of the real envelope e^{-+lam^2 t}."""
    return -params.sign * params.lam**2 * grid.times


def leading_term(grid: Grid, params: CGOParams) -> Field:
    """Sampled leading oscillation as a factored inner-region field."""
    _check_grid(grid, params)
    axes = grid.axes("inner")
    x0 = axes[0][:, None]
    x1 = axes[1][None, :]
    xi_dot = params.xi[0] * x0 + params.xi[1] * x1
    eta_dot = params.eta[0] * x0 + params.eta[1] * x1
    theta = theta_profile(params, grid)
    t = grid.times
    t_anchor = t if params.sign > 0 else t - grid.T
    carrier = -params.sign * 1j * params.lam * xi_dot
    vals = np.empty((grid.nt,) + grid.shape("inner"), dtype=np.complex128)
    for n in range(grid.nt):
        osc = params.osc_sign * 1j * (
            params.freq_scale * eta_dot + params.tau * t_anchor[n]
        )
        vals[n] = theta[n] * np.exp(carrier + osc)
    return Field(grid, "inner", vals, log_env=log_envelope(params, grid))


# ---------------------------------------------------------------------------
# envelope-stripped exact marches in the sine eigenbasis
# ---------------------------------------------------------------------------

class _Basis:
    def __init__(self, grid: Grid):
        (S0, mu0), (S1, mu1) = dirichlet_eigen(grid)
        self.S0, self.S1 = S0, S1
        self.mu = mu0[:, None] + mu1[None, :]

    def to_modes(self, interior: np.ndarray) -> np.ndarray:
        return np.einsum("ab,...bc,dc->...ad", self.S0, interior, self.S1)

    def to_nodes(self, modes: np.ndarray) -> np.ndarray:
        # S is symmetric orthonormal: inverse = itself
        return np.einsum("ab,...bc,dc->...ad", self.S0, modes, self.S1)


def _delta_g_inner(grid: Grid, terminal: TerminalCost | None,
                   full_level: np.ndarray) -> np.ndarray:
    """First variation of the terminal operator of a zero-extended inner
    level, restricted back to inner interior nodes."""
    interior = (slice(1, -1),) * grid.dim
    if terminal is None:
        return np.zeros(tuple(n - 2 for n in grid.shape("inner")),
                        dtype=full_level.dtype)
    outer = np.zeros(grid.shape("outer"), dtype=full_level.dtype)
    outer[grid.inner_slices] = full_level
    return terminal.delta_g([outer])[grid.inner_slices][interior]


@dataclass
class _Stripped:
    """Workspace: interior mode coefficients plus the prescribed ring."""

    grid: Grid
    basis: _Basis
    beta: float            # e^{-lam^2 dt}
    f1: np.ndarray         # running-cost first coefficient on interior
    ring_gamma: np.ndarray  # (nt, n_ring) stripped ring values of the density side
    ring_source: np.ndarray  # (nt, ni-2, ni-2) stencil coupling of ring_gamma

    def full(self, interior_levels: np.ndarray, with_ring: bool) -> np.ndarray:
        nt = self.grid.nt
        out = np.zeros((nt,) + self.grid.shape("inner"), dtype=np.complex128)
        out[(slice(None),) + (slice(1, -1),) * self.grid.dim] = interior_levels
        if with_ring:
            mask = ring_mask(self.grid)
            out[:, mask] = self.ring_gamma
        return out


def _make_workspace(grid: Grid, running: RunningCost | None, params: CGOParams,
                    lead: Field) -> _Stripped:
    basis = _Basis(grid)
    beta = float(np.exp(-params.lam**2 * grid.dt))
    interior = (slice(1, -1),) * grid.dim
    if running is None:
        f1 = np.zeros(tuple(n - 2 for n in grid.shape("inner")))
    else:
        f1 = running.coefficient(1)[grid.inner_slices][interior]
    gamma = lead.values[:, ring_mask(grid)]
    ring_source = boundary_coupling(grid, gamma)
    return _Stripped(grid, basis, beta, f1, gamma, ring_source)


def _march_value(ws: _Stripped, terminal: TerminalCost | None,
                 dens_hat: np.ndarray, dens_full_T: np.ndarray,
                 sign: int) -> np.ndarray:
    """Exact companion march: backward with terminal coupling for the +
    probe, forward from zero for the - probe.  Always stable."""
    grid, basis = ws.grid, ws.basis
    nt, dt = grid.nt, grid.dt
    beta = ws.beta
    denom = 1.0 / dt + basis.mu
    dens_nodes = basis.to_nodes(dens_hat)
    u_hat = np.empty_like(dens_hat)
    if sign > 0:
        u_hat[-1] = basis.to_modes(_delta_g_inner(grid, terminal, dens_full_T))
        for n in range(nt - 2, -1, -1):
            src = basis.to_modes(ws.f1 * dens_nodes[n])
            u_hat[n] = (beta * u_hat[n + 1] / dt + src) / denom
    else:
        u_hat[0] = 0.0
        for n in range(1, nt):
            src = basis.to_modes(ws.f1 * dens_nodes[n])
            u_hat[n] = (beta * u_hat[n - 1] / dt + src) / denom
    return u_hat


def _march_density(ws: _Stripped, u_hat: np.ndarray, lead_hat: np.ndarray,
                   sign: int) -> np.ndarray:
    """Exact per-mode dichotomy march of the stripped density side.

    The recursion factor alpha = e^{lam^2 dt}/(1 + dt*mu) exceeds one on
    modes below the discrete envelope rate; those are marched in the
    opposite time direction, anchored at the leading term's value at the
    stable end.  A final homogeneous shift per mode replaces the anchor
    by the value that minimizes the envelope-weighted distance to the
    leading term, so the returned trajectory is the row-exact solution
    closest to the ansatz.  Without the shift, marginally stable modes
    carry an O(1) anchor echo to the far end of the time interval, where
    the envelope weight no longer suppresses it.
    """
    grid, basis = ws.grid, ws.basis
    nt, dt = grid.nt, grid.dt
    denom = 1.0 / dt + basis.mu
    alpha = (1.0 / ws.beta) / (1.0 + dt * basis.mu)
    fwd = alpha <= 1.0
    src_hat = np.empty_like(u_hat)
    for n in range(nt):
        src_hat[n] = -basis.mu * u_hat[n] + basis.to_modes(ws.ring_source[n])
    out = np.zeros_like(u_hat)
    if sign > 0:
        # rows: (m^n - beta^{-1} m^{n-1})/dt - L m^n = L u^n + ring coupling
        out[0][fwd] = lead_hat[0][fwd]
        for n in range(1, nt):
            step = alpha * out[n - 1] + src_hat[n] / denom
            out[n][fwd] = step[fwd]
        bwd = ~fwd
        out[-1][bwd] = lead_hat[-1][bwd]
        for n in range(nt - 1, 0, -1):
            step = ws.beta * ((1.0 + dt * basis.mu) * out[n] - dt * src_hat[n])
            out[n - 1][bwd] = step[bwd]
    else:
        # rows: -(beta^{-1} rho^{n+1} - rho^n)/dt - L rho^n = L v^n + ring
        out[-1][fwd] = lead_hat[-1][fwd]
        for n in range(nt - 2, -1, -1):
            step = alpha * out[n + 1] + src_hat[n] / denom
            out[n][fwd] = step[fwd]
        bwd = ~fwd
        out[0][bwd] = lead_hat[0][bwd]
        for n in range(0, nt - 1):
            step = ws.beta * ((1.0 + dt * basis.mu) * out[n] - dt * src_hat[n])
            out[n + 1][bwd] = step[bwd]
    return _homogeneous_shift(ws, out, lead_hat, alpha, fwd, sign)


def _homogeneous_shift(ws: _Stripped, out: np.ndarray, lead_hat: np.ndarray,
                       alpha: np.ndarray, fwd: np.ndarray,
                       sign: int) -> np.ndarray:
    """Add the bounded homogeneous branch of each mode recursion, scaled
    by the weighted least-squares coefficient against the leading term.

    Homogeneous trajectories satisfy every recursion row, so only the
    free anchor slot moves.  The weights reproduce the true L2(Q) norm
    of the unstripped field: trapezoid in time multiplied by the squared
    envelope, written as a power of beta so that nothing overflows.

    Modes whose optimal coefficient exceeds the magnitude budget keep
    their anchored trajectory.  The coefficient grows like the anchor
    echo divided by the homogeneous value at the far end, so a large
    coefficient means the echo itself is exponentially damped and the
    shift would only inflate the stripped representation.
    """
    grid = ws.grid
    nt, dt = grid.nt, grid.dt
    steps = np.arange(nt, dtype=float)
    if sign < 0:
        steps = steps[::-1].copy()
    # The bounded branch pairs a nonpositive log(alpha) with nonnegative
    # exponents on the forward set and the reverse on the backward set,
    # so every entry of h lies in (0, 1].
    shift = np.where(fwd, 0.0, float(nt - 1))
    expo = steps[:, None, None] - shift[None]
    h = np.exp(np.log(alpha)[None] * expo)
    tw = np.full(nt, dt)
    tw[0] = tw[-1] = 0.5 * dt
    w = (tw * ws.beta ** (2.0 * steps))[:, None, None]
    diff = out - lead_hat
    num = (w * h * diff).sum(axis=0)
    den = (w * h * h).sum(axis=0)
    coef = -num / np.where(den > 0.0, den, 1.0)
    coef = np.where(np.abs(coef) <= _SHIFT_CAP, coef, 0.0)
    return out + coef[None] * h


def _weighted_q_norm(grid: Grid, stripped_levels: np.ndarray) -> float:
    """Envelope-weighted L2(Q) size of a stripped field: trapezoid in
    space, uniform in time, applied directly to the stripped values."""
    sw = spatial_weights(grid, "inner")
    vals = np.abs(stripped_levels) ** 2
    per_level = (vals * sw).reshape(grid.nt, -1).sum(axis=1)
    return float(np.sqrt(np.sum(per_level) * grid.dt))


@dataclass
class CGOProbe:
    """Assembled probe: leading term, correction, companion value field."""

    params: CGOParams
    leading: Field
    correction: Field
    u: Field
    residual: float
    correction_norm: float
    contraction: list = field(default_factory=list)
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def density(self) -> Field:
        """Leading plus correction (the full density-side probe)."""
        return Field(self.leading.grid, "inner",
                     self.leading.values + self.correction.values,
                     log_env=self.leading.log_env.copy())


def _residual_certificate(grid: Grid, running: RunningCost | None,
                          terminal: TerminalCost | None, params: CGOParams,
                          dens_full: np.ndarray, u_full: np.ndarray) -> float:
    """Max relative row residual of the assembled stripped pair."""
    from . import _backend

    nt, dt, dx = grid.nt, grid.dt, grid.dx
    beta = float(np.exp(-params.lam**2 * grid.dt))
    interior = (slice(1, -1),) * grid.dim
    if running is None:
        f1 = np.zeros(grid.shape("inner"))
    else:
        f1 = running.coefficient(1)[grid.inner_slices]
    scale = max(np.abs(dens_full).max(), np.abs(u_full).max(), 1.0) / dt
    worst = 0.0

    def lap(level):
        return (_backend.lap_dirichlet(level.real, dx)
                + 1j * _backend.lap_dirichlet(level.imag, dx))

    if params.sign > 0:
        for n in range(1, nt):
            r = (dens_full[n] - dens_full[n - 1] / beta) / dt \
                - lap(dens_full[n]) - lap(u_full[n])
            worst = max(worst, np.abs(r[interior]).max())
        for n in range(nt - 1):
            r = (u_full[n] - beta * u_full[n + 1]) / dt - lap(u_full[n]) \
                - f1 * dens_full[n]
            worst = max(worst, np.abs(r[interior]).max())
        rT = u_full[-1][interior] - _delta_g_inner(grid, terminal, dens_full[-1])
        worst = max(worst, np.abs(rT).max() / dt)
    else:
        for n in range(nt - 1):
            r = -(dens_full[n + 1] / beta - dens_full[n]) / dt \
                - lap(dens_full[n]) - lap(u_full[n])
            worst = max(worst, np.abs(r[interior]).max())
        for n in range(1, nt):
            r = (u_full[n] - beta * u_full[n - 1]) / dt - lap(u_full[n]) \
                - f1 * dens_full[n]
            worst = max(worst, np.abs(r[interior]).max())
        worst = max(worst, np.abs(u_full[0]).max() / dt)
    return worst / scale


def solve_correction(grid: Grid, running: RunningCost | None,
                     terminal: TerminalCost | None, params: CGOParams, *,
                     tol: float = 1e-10, max_sweeps: int = 80,
                     lambda_min: float | None = None) -> CGOProbe:
    """Build the probe by the alternating fixed point and certify it.

    The density side keeps the leading term's ring trace; the correction
    and the companion carry zero lateral data.  ``running=None`` (with
    ``terminal=None``) is the decoupled configuration: the companion
    vanishes and the fixed point is reached in one application.  Raises a
    probe error when the observed contraction factor reaches one or the
    sweep budget is exhausted, reporting the factor.
    """
    _check_grid(grid, params)
    if lambda_min is not None and params.lam < lambda_min:
        raise ProbeError(
            f"lam={params.lam} below the recorded contraction threshold {lambda_min}"
        )
    lead = leading_term(grid, params)
    ws = _make_workspace(grid, running, params, lead)
    interior = (slice(None),) + (slice(1, -1),) * grid.dim
    lead_hat = ws.basis.to_modes(lead.values[interior])

    dens_hat = lead_hat.copy()
    dens_full = ws.full(ws.basis.to_nodes(dens_hat), with_ring=True)
    lead_norm = _weighted_q_norm(grid, lead.values)
    history = []
    prev_delta = None
    for sweep in range(1, max_sweeps + 1):
        u_hat = _march_value(ws, terminal, dens_hat, dens_full[-1], params.sign)
        new_hat = _march_density(ws, u_hat, lead_hat, params.sign)
        delta = _weighted_q_norm(
            grid, ws.full(ws.basis.to_nodes(new_hat - dens_hat), with_ring=False)
        )
        if prev_delta is not None and prev_delta > 0:
            factor = delta / prev_delta
            history.append(factor)
            if factor >= 1.0:
                raise ProbeError(
                    f"contraction factor {factor:.3f} >= 1 at lam={params.lam}; "
                    "increase lam"
                )
        prev_delta = delta
        dens_hat = new_hat
        dens_full = ws.full(ws.basis.to_nodes(dens_hat), with_ring=True)
        if delta <= tol * max(lead_norm, 1e-300):
            break
    else:
        raise ProbeError(
            f"probe iteration did not settle in {max_sweeps} sweeps at "
            f"lam={params.lam} (last factor "
            f"{history[-1] if history else float('nan'):.3f})"
        )
    # the loop ends on a density march, so the density rows are exact and
    # the value rows are off only by the final increment
    u_hat = _march_value(ws, terminal, dens_hat, dens_full[-1], params.sign)
    dens_hat = _march_density(ws, u_hat, lead_hat, params.sign)
    dens_full = ws.full(ws.basis.to_nodes(dens_hat), with_ring=True)
    u_full = ws.full(ws.basis.to_nodes(u_hat), with_ring=False)

    residual = _residual_certificate(
        grid, running, terminal, params, dens_full, u_full
    )
    corr_vals = dens_full - lead.values
    env = log_envelope(params, grid)
    correction = Field(grid, "inner", corr_vals, log_env=env.copy())
    u_field = Field(grid, "inner", u_full, log_env=env.copy())
    probe = CGOProbe(
        params=params,
        leading=lead,
        correction=correction,
        u=u_field,
        residual=residual,
        correction_norm=_weighted_q_norm(grid, corr_vals),
        contraction=history,
        iterations=sweep,
    )
    probe.meta["lead_norm"] = lead_norm
    probe.meta["u_norm"] = _weighted_q_norm(grid, u_full)
    probe.meta["density_norm"] = _weighted_q_norm(grid, dens_full)
    return probe


def decay_certificate(grid: Grid, running: RunningCost | None,
                      terminal: TerminalCost | None, base: CGOParams,
                      lams) -> dict:
    """Correction-size table over a lam schedule.

    Passes when the reported norms strictly decrease and the log-log slope
    is at most -0.4.  The reported value is the true L2(Q) size of the
    correction (stored stripped values re-weighted by the envelope via
    log-space quadrature).
    """
    lams = [float(v) for v in lams]
    if sorted(lams) != lams:
        raise ConfigError("lam schedule must be increasing")
    rows = []
    for lam in lams:
        params = CGOParams(
            lam=lam, xi=base.xi, eta=base.eta, tau=base.tau, sign=base.sign,
            osc_sign=base.osc_sign, freq_scale=base.freq_scale,
        )
        probe = solve_correction(grid, running, terminal, params)
        norm = weighted_l2_norm(probe.correction, 0.0)
        rows.append({
            "lam": lam,
            "correction_l2": norm,
            "stripped_l2": probe.correction_norm,
            "residual": probe.residual,
            "contraction_last": probe.contraction[-1] if probe.contraction else None,
        })
    norms = [r["correction_l2"] for r in rows]
    decreasing = all(b < a for a, b in zip(norms, norms[1:]))
    slope = None
    if len(lams) >= 2 and all(v > 0 for v in norms):
        slope = float(np.polyfit(np.log(lams), np.log(norms), 1)[0])
    return {
        "rows": rows,
        "strictly_decreasing": decreasing,
        "loglog_slope": slope,
        "passes": decreasing and (slope is None or slope <= -0.4),
    }


def estimate_lambda_min(grid: Grid, running: RunningCost | None,
                        terminal: TerminalCost | None, proto: CGOParams,
                        candidates=(1.0, 2.0, 4.0)) -> dict:
    """Smallest candidate lam whose observed contraction factor stays
    below one, with the probed factors recorded."""
    factors = {}
    threshold = None
    for lam in sorted(float(v) for v in candidates):
        params = CGOParams(
            lam=lam, xi=proto.xi, eta=proto.eta, tau=proto.tau,
            sign=proto.sign, osc_sign=proto.osc_sign,
            freq_scale=proto.freq_scale,
        )
        try:
            probe = solve_correction(grid, running, terminal, params)
            factors[lam] = max(probe.contraction) if probe.contraction else 0.0
            if threshold is None:
                threshold = lam
        except ProbeError:
            factors[lam] = float("inf")
    return {"lambda_min": threshold, "factors": factors}
