"""Running and terminal cost structures.

The running cost is a truncated Taylor series in the density around the
flat state,

    F(x, m) = sum_{k=1..K} F_k(x) (m - 1)^k / k!,

with ``F(x, 1) = 0`` built in and a strict monotonicity floor
``F_1 >= a1 > 0``.  The terminal cost composes two mollifications with a
pointwise profile ``psi``:

    G(x, m) = (kappa * psi(kappa * m))(x),

where ``kappa`` is a compactly supported bump kernel normalized to unit
mass on the grid, applied with mirror padding so the flat state is an
exact fixed point: G(., 1) = psi(1).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import CapabilityError, ConfigError, GridMismatchError
from .grid import Field, Grid, spatial_weights

MAX_ORDER = 4


# ---------------------------------------------------------------------------
# running cost
# ---------------------------------------------------------------------------

@dataclass
class RunningCost:
    """Taylor coefficients ``F_k`` of the running cost on the outer box."""

    grid: Grid
    coeffs: tuple
    a1: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        if not 1 <= len(self.coeffs) <= MAX_ORDER:
            raise CapabilityError(
                f"running cost order must be between 1 and {MAX_ORDER}"
            )
        shape = self.grid.shape("outer")
        norm = []
        for k, c in enumerate(self.coeffs, start=1):
            arr = np.asarray(c, dtype=np.float64)
            if arr.ndim == 0:
                arr = np.full(shape, float(arr))
            if arr.shape != shape:
                raise GridMismatchError(
                    f"coefficient {k} has shape {arr.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"coefficient {k} must be finite")
            norm.append(arr)
        self.coeffs = tuple(norm)
        if not self.a1 > 0:
            raise ConfigError("a1 must be positive")
        if self.coeffs[0].min() <= self.a1:
            raise ConfigError(
                f"first coefficient must exceed a1={self.a1}, "
                f"min is {self.coeffs[0].min()}"
            )

    @property
    def order(self) -> int:
        return len(self.coeffs)

    def coefficient(self, k: int) -> np.ndarray:
        """``F_k`` as an outer spatial array (1-based order)."""
        if not 1 <= k <= MAX_ORDER:
            raise CapabilityError(f"order {k} outside the supported range")
        if k > self.order:
            return np.zeros(self.grid.shape("outer"))
        return self.coeffs[k - 1]

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        """F(x, m) for a spatial or space-time array of densities."""
        m = np.asarray(m)
        z = m - 1.0
        out = np.zeros_like(z)
        fact = 1.0
        power = np.ones_like(z)
        for k, c in enumerate(self.coeffs, start=1):
            fact *= k
            power = power * z
            out = out + c * power / fact
        return out

    def with_coefficient(self, k: int, values: np.ndarray) -> "RunningCost":
        """Copy of this cost with ``F_k`` replaced (padding with zeros)."""
        if not 1 <= k <= MAX_ORDER:
            raise CapabilityError(f"order {k} outside the supported range")
        coeffs = list(self.coeffs)
        while len(coeffs) < k:
            coeffs.append(np.zeros(self.grid.shape("outer")))
        coeffs[k - 1] = np.asarray(values, dtype=np.float64)
        return RunningCost(self.grid, tuple(coeffs), self.a1, self.name + "*")


def catalog() -> dict:
    """Built-in admissible running cost families."""
    return {
        "z-1": {
            "description": "linear coupling, single Taylor coefficient 1",
            "order": 1,
        },
        "exp(z-1)-1": {
            "description": "exponential coupling, all Taylor coefficients 1",
            "order": MAX_ORDER,
        },
    }


def make_running_cost(grid: Grid, name: str, order: int | None = None,
                      a1: float = 0.5) -> RunningCost:
    """Instantiate a catalog entry on a grid."""
    if name == "z-1":
        return RunningCost(grid, (np.ones(grid.shape("outer")),), a1, name)
    if name == "exp(z-1)-1":
        k = MAX_ORDER if order is None else int(order)
        if not 1 <= k <= MAX_ORDER:
            raise CapabilityError(f"order {k} outside the supported range")
        ones = np.ones(grid.shape("outer"))
        return RunningCost(grid, tuple(ones for _ in range(k)), a1, name)
    raise ConfigError(f"unknown catalog cost {name!r}; see catalog()")


# ---------------------------------------------------------------------------
# terminal cost
# ---------------------------------------------------------------------------

def _psi_registry() -> dict:
    """Pointwise profiles: value and derivatives through order 4 at any s.

    Every entry is nondecreasing on the sampled range so the terminal cost
    is monotone in the density.
    """
    def entry(value, derivs):
        return {"value": value, "derivs": derivs}

    return {
        # psi(s) = B + (s - 1)
        "linear": lambda p: entry(
            lambda s: p.get("B", 1.0) + (s - 1.0),
            [lambda s: np.ones_like(s), lambda s: np.zeros_like(s),
             lambda s: np.zeros_like(s), lambda s: np.zeros_like(s)],
        ),
        # psi(s) = B + (s - 1) + c (s - 1)^2
        "quadratic": lambda p: entry(
            lambda s: p.get("B", 1.0) + (s - 1.0) + p.get("c", 0.2) * (s - 1.0) ** 2,
            [lambda s: 1.0 + 2.0 * p.get("c", 0.2) * (s - 1.0),
             lambda s: np.full_like(s, 2.0 * p.get("c", 0.2)),
             lambda s: np.zeros_like(s), lambda s: np.zeros_like(s)],
        ),
        # psi(s) = s^p / p  (p >= 1)
        "power": lambda p: entry(
            lambda s: np.abs(s) ** p.get("p", 2.0) / p.get("p", 2.0),
            [lambda s: np.abs(s) ** (p.get("p", 2.0) - 1.0),
             lambda s: (p.get("p", 2.0) - 1.0) * np.abs(s) ** (p.get("p", 2.0) - 2.0),
             lambda s: (p.get("p", 2.0) - 1.0) * (p.get("p", 2.0) - 2.0)
             * np.abs(s) ** (p.get("p", 2.0) - 3.0),
             lambda s: (p.get("p", 2.0) - 1.0) * (p.get("p", 2.0) - 2.0)
             * (p.get("p", 2.0) - 3.0) * np.abs(s) ** (p.get("p", 2.0) - 4.0)],
        ),
        # psi(s) = B - 1 + exp(s - 1)
        "exp": lambda p: entry(
            lambda s: p.get("B", 1.0) - 1.0 + np.exp(s - 1.0),
            [lambda s: np.exp(s - 1.0)] * 4,
        ),
        # psi(s) = B + (s - 1)^3 / 3: vanishing first and second derivative
        # at the flat state, still nondecreasing
        "cubic_flat": lambda p: entry(
            lambda s: p.get("B", 1.0) + (s - 1.0) ** 3 / 3.0,
            [lambda s: (s - 1.0) ** 2, lambda s: 2.0 * (s - 1.0),
             lambda s: np.full_like(s, 2.0), lambda s: np.zeros_like(s)],
        ),
    }


@dataclass
class TerminalCost:
    """Doubly mollified terminal cost ``G(x, m) = kappa * psi(kappa * m)``."""

    grid: Grid
    psi: str = "linear"
    params: dict = field(default_factory=dict)
    radius: float | None = None

    def __post_init__(self):
        reg = _psi_registry()
        if self.psi not in reg:
            raise ConfigError(f"unknown psi profile {self.psi!r}; choose from {sorted(reg)}")
        self._entry = reg[self.psi](dict(self.params))
        h = min(self.grid.dx)
        if self.radius is None:
            self.radius = 4.0 * h
        if self.radius < h:
            raise ConfigError("mollifier radius must be at least one cell")
        if self.radius > 0.25 * min(hi - lo for lo, hi in self.grid.outer_extent):
            raise ConfigError("mollifier radius too large for the outer box")
        self.kernel = self._build_kernel()
        # monotonicity floor of the profile on a density bracket
        s = np.linspace(0.0, 2.0, 201)
        if self._entry["derivs"][0](s).min() < -1e-12:
            raise ConfigError(f"psi profile {self.psi!r} is not nondecreasing on [0, 2]")

    def _build_kernel(self) -> np.ndarray:
        dx = self.grid.dx
        taps = [int(np.ceil(self.radius / h)) - 1 for h in dx]
        offsets = np.meshgrid(
            *[np.arange(-t, t + 1) * h for t, h in zip(taps, dx)], indexing="ij"
        )
        r_sq = sum(o**2 for o in offsets) / self.radius**2
        w = np.where(r_sq < 1.0, (1.0 - np.minimum(r_sq, 1.0)) ** 3, 0.0)
        total = w.sum()
        if total <= 0:
            raise ConfigError("mollifier kernel is empty")
        return w / total

    def mollify(self, arr: np.ndarray) -> np.ndarray:
        if np.iscomplexobj(arr):
            return (ndimage.convolve(arr.real, self.kernel, mode="mirror")
                    + 1j * ndimage.convolve(arr.imag, self.kernel, mode="mirror"))
        return ndimage.convolve(arr, self.kernel, mode="mirror")

    @property
    def stationary_value(self) -> float:
        """B = psi(1): the flat-state value of G."""
        return float(self._entry["value"](np.array(1.0)))

    def evaluate(self, m: np.ndarray) -> np.ndarray:
        """G(x, m) for a spatial outer array m."""
        m = np.asarray(m, dtype=np.float64)
        if m.shape != self.grid.shape("outer"):
            raise GridMismatchError("terminal cost expects an outer spatial array")
        return self.mollify(self._entry["value"](self.mollify(m)))

    def psi_derivative_at_flat(self, k: int) -> float:
        if not 1 <= k <= MAX_ORDER:
            raise CapabilityError(f"derivative order {k} outside the supported range")
        return float(self._entry["derivs"][k - 1](np.array(1.0)))

    def delta_g(self, directions) -> np.ndarray:
        """k-th Gateaux derivative of G at the flat state applied to the
        given directions (outer spatial arrays); k = len(directions) <= 4.

        With a density independent profile this is
        ``psi^(k)(1) * kappa * (prod_j kappa * h_j)``.
        """
        k = len(directions)
        coeff = self.psi_derivative_at_flat(k)
        shape = self.grid.shape("outer")
        if coeff == 0.0:
            if any(np.iscomplexobj(h) for h in directions):
                return np.zeros(shape, dtype=np.complex128)
            return np.zeros(shape)
        prod = np.ones(shape)
        for h in directions:
            h = np.asarray(h)
            if not np.iscomplexobj(h):
                h = h.astype(np.float64)
            if h.shape != shape:
                raise GridMismatchError("delta_g directions must be outer spatial arrays")
            prod = prod * self.mollify(h)
        return coeff * self.mollify(prod)


def check_monotonicity(running: RunningCost, terminal: TerminalCost,
                       z_lo: float = 0.5, z_hi: float = 1.5) -> dict:
    """Sampled monotonicity certificate for both costs on a density bracket."""
    z = np.linspace(z_lo, z_hi, 101)
    slope_min = np.inf
    for zi in z:
        dz = zi - 1.0
        slope = np.zeros(running.grid.shape("outer"))
        fact = 1.0
        for k in range(1, running.order + 1):
            if k > 1:
                fact *= k - 1
            slope += running.coefficient(k) * dz ** (k - 1) / fact
        slope_min = min(slope_min, float(slope.min()))
    s = np.linspace(z_lo, z_hi, 101)
    psi_min = float(terminal._entry["derivs"][0](s).min())
    return {
        "running_min_slope": slope_min,
        "terminal_min_slope": psi_min,
        "a1": running.a1,
        "monotone": bool(slope_min > 0.0 and psi_min >= -1e-12),
    }


# ---------------------------------------------------------------------------
# perturbation directions
# ---------------------------------------------------------------------------

def validate_direction(grid: Grid, f: np.ndarray) -> np.ndarray:
    """Admissible initial-density direction: zero mean, sup norm at most 1."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape != grid.shape("outer"):
        raise GridMismatchError("direction must be an outer spatial array")
    scale = max(1.0, np.abs(f).max())
    mean = float(np.sum(f * spatial_weights(grid, "outer")))
    if abs(mean) > 1e-12 * scale:
        raise ConfigError(f"direction must have zero mean, got {mean}")
    if np.abs(f).max() > 1.0 + 1e-12:
        raise ConfigError("direction sup norm must be at most 1")
    return f


def band_limited_direction(grid: Grid, seed: int, kmax: int = 3,
                           amplitude: float = 1.0) -> np.ndarray:
    """Random zero-mean cosine combination, sup-normalized to ``amplitude``."""
    if not 0 < amplitude <= 1.0:
        raise ConfigError("amplitude must be in (0, 1]")
    rng = np.random.default_rng(seed)
    axes = grid.axes("outer")
    hats = [
        (a - lo) / (hi - lo) for a, (lo, hi) in zip(axes, grid.outer_extent)
    ]
    f = np.zeros(grid.shape("outer"))
    for kv in np.ndindex(*(kmax + 1,) * grid.dim):
        if all(k == 0 for k in kv):
            continue
        c = rng.standard_normal() / (1.0 + float(sum(k**2 for k in kv)))
        term = np.ones(grid.shape("outer"))
        for ax, k in enumerate(kv):
            shape = [1] * grid.dim
            shape[ax] = -1
            term = term * np.cos(k * np.pi * hats[ax]).reshape(shape)
        f += c * term
    f *= amplitude / np.abs(f).max()
    return validate_direction(grid, f)


def plateau_direction(grid: Grid, amplitude: float = 1.0,
                      margin: float = 0.05) -> np.ndarray:
    """Zero-mean direction close to ``amplitude`` on the inner box.

    A smooth plateau covering a neighborhood of the inner box minus its own
    mean; useful when a reconstruction needs a sign-definite weight there.
    """
    axes = grid.axes("outer")
    prof = np.ones(grid.shape("outer"))
    smooth = lambda t: t * t * (3.0 - 2.0 * t)
    for ax, a in enumerate(axes):
        lo, hi = grid.inner_extent[ax]
        lo -= margin
        hi += margin
        width = 0.15 * (grid.outer_extent[ax][1] - grid.outer_extent[ax][0])
        up = np.clip((a - (lo - width)) / width, 0.0, 1.0)
        dn = np.clip(((hi + width) - a) / width, 0.0, 1.0)
        shape = [1] * grid.dim
        shape[ax] = -1
        prof = prof * (smooth(up) * smooth(dn)).reshape(shape)
    w = spatial_weights(grid, "outer")
    prof -= np.sum(prof * w)  # unit volume, so this is the mean
    prof *= amplitude / np.abs(prof).max()
    return validate_direction(grid, prof)


def cost_pair_from_config(grid: Grid, cfg: dict):
    """Build (RunningCost, TerminalCost) from a JSON-style description."""
    rc = cfg.get("running", {"name": "z-1"})
    running = make_running_cost(
        grid, rc.get("name", "z-1"), rc.get("order"), rc.get("a1", 0.5)
    )
    tc = cfg.get("terminal", {})
    terminal = TerminalCost(
        grid,
        psi=tc.get("psi", "linear"),
        params=tc.get("params", {}),
        radius=tc.get("radius"),
    )
    return running, terminal
