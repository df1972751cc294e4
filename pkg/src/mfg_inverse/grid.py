"""Tensor product grids, fields, quadrature and spectral helpers.

The outer box (unit volume, Neumann side) carries the state system; the
inner box is the observation window.  Inner grid nodes must coincide with
outer nodes so restriction is exact.  Fields optionally carry a factored
exponential envelope ``exp(log_env[n]) * values[n]`` so that strongly
weighted quantities can be manipulated without overflow.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import _backend
from .errors import ConfigError, GridMismatchError, RangeError

_ALIGN_TOL = 1e-9
_VOLUME_TOL = 1e-12

# exp() of anything above this is not representable in float64
_EXP_MAX = 709.0


@dataclass(frozen=True)
class Grid:
    """Space-time discretization of the nested boxes.

    Parameters
    ----------
    dim:
        Spatial dimension, 1 or 2.
    outer_extent / inner_extent:
        Per-axis ``(lo, hi)`` tuples.  The outer box must have unit volume.
    nx_outer / nx_inner:
        Node counts per axis (inclusive of endpoints).
    T, nt:
        Time horizon and number of time levels (``dt = T / (nt - 1)``).
    """

    dim: int
    outer_extent: tuple
    inner_extent: tuple
    nx_outer: tuple
    nx_inner: tuple
    T: float
    nt: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        for name in ("outer_extent", "inner_extent", "nx_outer", "nx_inner"):
            if len(getattr(self, name)) != self.dim:
                raise ConfigError(f"{name} must have {self.dim} entries")
        if self.nt < 3:
            raise ConfigError("nt must be at least 3")
        vol = 1.0
        for (lo, hi), n in zip(self.outer_extent, self.nx_outer):
            if hi <= lo:
                raise ConfigError("outer extent must be increasing")
            if n < 4:
                raise ConfigError("nx_outer must be at least 4 per axis")
            vol *= hi - lo
        if abs(vol - 1.0) > _VOLUME_TOL:
            raise ConfigError(f"outer box must have unit volume, got {vol!r}")
        if self.T <= 0:
            raise ConfigError("T must be positive")
        for ax in range(self.dim):
            olo, ohi = self.outer_extent[ax]
            ilo, ihi = self.inner_extent[ax]
            n_out = self.nx_outer[ax]
            n_in = self.nx_inner[ax]
            h = (ohi - olo) / (n_out - 1)
            if n_in < 4:
                raise ConfigError("nx_inner must be at least 4 per axis")
            if ihi <= ilo:
                raise ConfigError("inner extent must be increasing")
            h_in = (ihi - ilo) / (n_in - 1)
            if abs(h_in - h) > _ALIGN_TOL * h:
                raise ConfigError(
                    f"inner spacing {h_in} does not match outer spacing {h} on axis {ax}"
                )
            off = (ilo - olo) / h
            if abs(off - round(off)) > _ALIGN_TOL:
                raise ConfigError(f"inner nodes not aligned with outer nodes on axis {ax}")
            if round(off) < 2 or round(off) + n_in - 1 > n_out - 3:
                raise ConfigError(
                    "inner box must keep a margin of at least two cells on every side"
                )

    # -- derived quantities -------------------------------------------------

    @property
    def dt(self) -> float:
        return self.T / (self.nt - 1)

    @property
    def dx(self) -> tuple:
        return tuple(
            (hi - lo) / (n - 1) for (lo, hi), n in zip(self.outer_extent, self.nx_outer)
        )

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.nt)

    @property
    def inner_offset(self) -> tuple:
        return tuple(
            int(round((ilo - olo) / h))
            for (olo, _), (ilo, _), h in zip(self.outer_extent, self.inner_extent, self.dx)
        )

    @property
    def inner_slices(self) -> tuple:
        return tuple(
            slice(o, o + n) for o, n in zip(self.inner_offset, self.nx_inner)
        )

    def axes(self, region: str) -> list:
        if region == "outer":
            ext, nx = self.outer_extent, self.nx_outer
        elif region == "inner":
            ext, nx = self.inner_extent, self.nx_inner
        else:
            raise ConfigError(f"unknown region {region!r}")
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(ext, nx)]

    def mesh(self, region: str) -> list:
        return list(np.meshgrid(*self.axes(region), indexing="ij"))

    def shape(self, region: str) -> tuple:
        return tuple(self.nx_outer if region == "outer" else self.nx_inner)

    def hash_key(self) -> str:
        payload = json.dumps(
            {
                "dim": self.dim,
                "outer_extent": [list(e) for e in self.outer_extent],
                "inner_extent": [list(e) for e in self.inner_extent],
                "nx_outer": list(self.nx_outer),
                "nx_inner": list(self.nx_inner),
                "T": repr(self.T),
                "nt": self.nt,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def make_grid(
    dim: int,
    outer_extent,
    inner_extent,
    nx_outer,
    nx_inner,
    T: float,
    nt: int,
) -> Grid:
    """Validate parameters and build a :class:`Grid`."""
    to_pairs = lambda e: tuple(tuple(float(v) for v in p) for p in e)
    return Grid(
        dim=int(dim),
        outer_extent=to_pairs(outer_extent),
        inner_extent=to_pairs(inner_extent),
        nx_outer=tuple(int(n) for n in nx_outer),
        nx_inner=tuple(int(n) for n in nx_inner),
        T=float(T),
        nt=int(nt),
    )


def reference_grid_2d(nx_outer=33, nx_inner=17, nt=65) -> Grid:
    """The default nested unit-box configuration used throughout the tests."""
    return make_grid(
        dim=2,
        outer_extent=[(0.0, 1.0), (0.0, 1.0)],
        inner_extent=[(0.25, 0.75), (0.25, 0.75)],
        nx_outer=(nx_outer, nx_outer),
        nx_inner=(nx_inner, nx_inner),
        T=1.0,
        nt=nt,
    )


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

@dataclass
class Field:
    """Array of nodal values on one of the two boxes.

    ``values`` has shape ``(nt, *spatial)`` unless ``spatial_only``; the
    optional ``log_env`` (shape ``(nt,)``) stores a factored exponential
    envelope so the represented field is ``exp(log_env[n]) * values[n]``.
    """

    grid: Grid
    region: str
    values: np.ndarray
    spatial_only: bool = False
    log_env: np.ndarray | None = None

    def __post_init__(self):
        if self.region not in ("outer", "inner"):
            raise ConfigError(f"region must be 'outer' or 'inner', got {self.region!r}")
        self.values = np.asarray(self.values)
        want = self.grid.shape(self.region)
        if self.spatial_only:
            if self.values.shape != want:
                raise GridMismatchError(
                    f"expected spatial shape {want}, got {self.values.shape}"
                )
        else:
            if self.values.shape != (self.grid.nt,) + want:
                raise GridMismatchError(
                    f"expected shape {(self.grid.nt,) + want}, got {self.values.shape}"
                )
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("field values must be finite")
        if self.log_env is not None:
            if self.spatial_only:
                raise ConfigError("spatial-only fields cannot carry a time envelope")
            self.log_env = np.asarray(self.log_env, dtype=np.float64)
            if self.log_env.shape != (self.grid.nt,):
                raise GridMismatchError("log_env must have shape (nt,)")
            if not np.all(np.isfinite(self.log_env)):
                raise ConfigError("log_env must be finite")

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    def copy(self) -> "Field":
        return replace(
            self,
            values=self.values.copy(),
            log_env=None if self.log_env is None else self.log_env.copy(),
        )

    def unfactored(self) -> "Field":
        """Materialize the envelope.  Raises RangeError on overflow."""
        if self.log_env is None:
            return self
        finite = self.values[np.abs(self.values) > 0]
        peak = self.log_env.max()
        if finite.size:
            peak = peak + np.log(np.abs(finite).max())
        if peak > _EXP_MAX:
            raise RangeError(
                f"unfactoring would overflow (log magnitude {peak:.1f} > {_EXP_MAX})"
            )
        env = np.exp(self.log_env)
        vals = self.values * env.reshape((-1,) + (1,) * (self.values.ndim - 1))
        return replace(self, values=vals, log_env=None)


def restrict(f: Field) -> Field:
    """Restrict an outer field to the inner box (exact, nodes coincide)."""
    if f.region != "outer":
        raise GridMismatchError("restrict expects an outer field")
    sl = f.grid.inner_slices
    vals = f.values[sl] if f.spatial_only else f.values[(slice(None),) + sl]
    return Field(f.grid, "inner", vals.copy(), f.spatial_only, f.log_env)


def extend_zero(f: Field) -> Field:
    """Extend an inner field by zero onto the outer box."""
    if f.region != "inner":
        raise GridMismatchError("extend_zero expects an inner field")
    shape = f.grid.shape("outer")
    if f.spatial_only:
        out = np.zeros(shape, dtype=f.values.dtype)
        out[f.grid.inner_slices] = f.values
    else:
        out = np.zeros((f.grid.nt,) + shape, dtype=f.values.dtype)
        out[(slice(None),) + f.grid.inner_slices] = f.values
    return Field(f.grid, "outer", out, f.spatial_only, f.log_env)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def spatial_weights(grid: Grid, region: str) -> np.ndarray:
    axes = [
        trapezoid_weights(n, h)
        for n, h in zip(grid.shape(region), grid.dx)
    ]
    w = axes[0]
    for a in axes[1:]:
        w = np.multiply.outer(w, a)
    return w


def time_weights(grid: Grid) -> np.ndarray:
    return trapezoid_weights(grid.nt, grid.dt)


def sigma_weights(grid: Grid) -> np.ndarray:
    """Line quadrature weights on the inner lateral boundary (2D) or the two
    endpoints (1D), shaped like an inner spatial slice (zero inside)."""
    shape = grid.shape("inner")
    w = np.zeros(shape)
    if grid.dim == 1:
        w[0] = w[-1] = 1.0
        return w
    h0, h1 = grid.dx
    w0 = trapezoid_weights(shape[1], h1)
    w1 = trapezoid_weights(shape[0], h0)
    w[0, :] += w0
    w[-1, :] += w0
    w[:, 0] += w1
    w[:, -1] += w1
    return w


def integrate(f: Field, region: str) -> float | complex:
    """Trapezoid quadrature over the requested region.

    Supported regions: ``Omega``/``Omegaprime`` for spatial-only fields,
    ``Q``/``Qprime`` for space-time fields, and ``Sigma`` for the lateral
    boundary of the inner box.
    """
    f = f.unfactored()
    if region in ("Omega", "Omegaprime"):
        want = "inner" if region == "Omega" else "outer"
        if not f.spatial_only or f.region != want:
            raise GridMismatchError(f"region {region} needs a spatial {want} field")
        return np.sum(f.values * spatial_weights(f.grid, want))
    if region in ("Q", "Qprime"):
        want = "inner" if region == "Q" else "outer"
        if f.spatial_only or f.region != want:
            raise GridMismatchError(f"region {region} needs a space-time {want} field")
        w = spatial_weights(f.grid, want)
        per_level = np.tensordot(f.values, w, axes=f.grid.dim)
        return np.sum(per_level * time_weights(f.grid))
    if region == "Sigma":
        if f.spatial_only or f.region != "inner":
            raise GridMismatchError("region Sigma needs a space-time inner field")
        w = sigma_weights(f.grid)
        per_level = np.tensordot(f.values, w, axes=f.grid.dim)
        return np.sum(per_level * time_weights(f.grid))
    raise ConfigError(f"unknown region {region!r}")


# ---------------------------------------------------------------------------
# differential operators on fields
# ---------------------------------------------------------------------------

def _apply_levels(fn, f: Field) -> Field:
    if f.spatial_only:
        return replace(f, values=fn(f.values))
    out = np.empty_like(f.values)
    for n in range(f.values.shape[0]):
        out[n] = fn(f.values[n])
    return replace(f, values=out)


def laplacian_neumann(f: Field) -> Field:
    if f.region != "outer":
        raise GridMismatchError("laplacian_neumann acts on outer fields")
    dx = f.grid.dx
    return _apply_levels(lambda v: _backend.lap_neumann(v, dx), f)


def laplacian_dirichlet(f: Field) -> Field:
    if f.region != "inner":
        raise GridMismatchError("laplacian_dirichlet acts on inner fields")
    dx = f.grid.dx
    return _apply_levels(lambda v: _backend.lap_dirichlet(v, dx), f)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def weighted_l2_norm(f: Field, lam: float, sign: int = 1) -> float:
    """L2 norm over the field's space-time region with weight exp(2*sign*lam^2*t).

    Works in log space throughout so factored fields with very large
    envelopes are handled without overflow; raises RangeError only when the
    final value itself is not representable.
    """
    if f.spatial_only:
        raise GridMismatchError("weighted_l2_norm needs a space-time field")
    if sign not in (-1, 1):
        raise ConfigError("sign must be +1 or -1")
    w_space = spatial_weights(f.grid, f.region)
    w_time = time_weights(f.grid)
    t = f.grid.times
    log_env = np.zeros(f.grid.nt) if f.log_env is None else f.log_env
    logs = []
    for n in range(f.grid.nt):
        s = np.sum(np.abs(f.values[n]) ** 2 * w_space)
        if s <= 0.0:
            continue
        logs.append(2.0 * (sign * lam**2 * t[n] + log_env[n]) + np.log(s * w_time[n]))
    if not logs:
        return 0.0
    logs = np.array(logs)
    m = logs.max()
    total = m + np.log(np.sum(np.exp(logs - m)))
    if 0.5 * total > _EXP_MAX:
        raise RangeError("weighted norm overflows float64")
    return float(np.exp(0.5 * total))


def h_minus1_norm(f: Field) -> float:
    """Dual Sobolev norm of a spatial inner field (zero boundary trace).

    Solves ``-lap w = f`` with homogeneous Dirichlet conditions on the
    interior nodes and returns ``sqrt(<f, w>)``.
    """
    if not f.spatial_only or f.region != "inner":
        raise GridMismatchError("h_minus1_norm needs a spatial inner field")
    interior = f.values[(slice(1, -1),) * f.grid.dim]
    w = solve_shift_dirichlet(f.grid, -interior, shift=0.0)
    cell = float(np.prod(f.grid.dx))
    val = np.sum(np.conj(interior) * (-w)) * cell
    return float(np.sqrt(np.real(val)))


# ---------------------------------------------------------------------------
# spectral helpers (exact diagonalizations of the two stencils)
# ---------------------------------------------------------------------------

_EIG_CACHE: dict = {}


def neumann_eigen(grid: Grid):
    """Per-axis cosine eigenvectors of the mirror-ghost Neumann stencil."""
    key = ("neumann", grid)
    if key not in _EIG_CACHE:
        per_axis = []
        for n, h in zip(grid.nx_outer, grid.dx):
            j = np.arange(n)
            k = np.arange(n)
            C = np.cos(np.outer(j, k) * np.pi / (n - 1))
            Cinv = np.linalg.inv(C)
            mu = (4.0 / h**2) * np.sin(k * np.pi / (2 * (n - 1))) ** 2
            per_axis.append((C, Cinv, mu))
        _EIG_CACHE[key] = per_axis
    return _EIG_CACHE[key]


def dirichlet_eigen(grid: Grid):
    """Per-axis sine eigenvectors of the interior Dirichlet stencil."""
    key = ("dirichlet", grid)
    if key not in _EIG_CACHE:
        per_axis = []
        for n, h in zip(grid.nx_inner, grid.dx):
            ni = n - 2
            j = np.arange(1, ni + 1)
            S = np.sqrt(2.0 / (ni + 1)) * np.sin(np.outer(j, j) * np.pi / (ni + 1))
            mu = (4.0 / h**2) * np.sin(j * np.pi / (2 * (ni + 1))) ** 2
            per_axis.append((S, mu))
        _EIG_CACHE[key] = per_axis
    return _EIG_CACHE[key]


def dirichlet_mu_min(grid: Grid) -> float:
    """Smallest eigenvalue of minus the interior Dirichlet Laplacian."""
    return float(sum(mu[0] for _, mu in dirichlet_eigen(grid)))


def solve_shift_neumann(grid: Grid, rhs: np.ndarray, shift: float) -> np.ndarray:
    """Solve ``(shift*I - lap_neumann) x = rhs`` on the outer box.

    ``rhs`` may carry leading batch axes.  ``shift`` must stay away from the
    spectrum; for implicit time stepping ``shift = 1/dt > 0`` is always safe.
    """
    per_axis = neumann_eigen(grid)
    if grid.dim == 1:
        C, Cinv, mu = per_axis[0]
        c = np.einsum("ij,...j->...i", Cinv, rhs)
        c /= shift + mu
        return np.einsum("ij,...j->...i", C, c)
    (C0, Ci0, mu0), (C1, Ci1, mu1) = per_axis
    c = np.einsum("ab,...bc,dc->...ad", Ci0, rhs, Ci1)
    c /= shift + mu0[:, None] + mu1[None, :]
    return np.einsum("ia,...ad,jd->...ij", C0, c, C1)


def solve_shift_dirichlet(grid: Grid, rhs: np.ndarray, shift: float) -> np.ndarray:
    """Solve ``(shift*I - lap_dirichlet) x = rhs`` on inner interior nodes."""
    per_axis = dirichlet_eigen(grid)
    if grid.dim == 1:
        S, mu = per_axis[0]
        c = np.einsum("ij,...j->...i", S, rhs)
        c /= shift + mu
        return np.einsum("ij,...j->...i", S, c)
    (S0, mu0), (S1, mu1) = per_axis
    c = np.einsum("ab,...bc,dc->...ad", S0, rhs, S1)
    c /= shift + mu0[:, None] + mu1[None, :]
    return np.einsum("ia,...ad,jd->...ij", S0, c, S1)


# ---------------------------------------------------------------------------
# inner boundary ring helpers
# ---------------------------------------------------------------------------

def ring_mask(grid: Grid) -> np.ndarray:
    shape = grid.shape("inner")
    m = np.zeros(shape, dtype=bool)
    for ax in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[ax] = 0
        m[tuple(sl)] = True
        sl[ax] = shape[ax] - 1
        m[tuple(sl)] = True
    return m


def ring_extract(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Flatten the boundary ring of inner-shaped arrays (row-major order)."""
    mask = ring_mask(grid)
    if values.shape[-grid.dim:] != grid.shape("inner"):
        raise GridMismatchError("ring_extract expects inner-shaped trailing axes")
    return values[..., mask]


def ring_embed(grid: Grid, ring: np.ndarray) -> np.ndarray:
    """Inverse of :func:`ring_extract`, zero on interior nodes."""
    mask = ring_mask(grid)
    shape = ring.shape[:-1] + grid.shape("inner")
    out = np.zeros(shape, dtype=ring.dtype)
    out[..., mask] = ring
    return out


def boundary_coupling(grid: Grid, ring: np.ndarray) -> np.ndarray:
    """Contribution of ring values to the interior Dirichlet stencil rows.

    Returns an interior-shaped array: applying the five point stencil to a
    field that equals ``ring`` on the boundary ring and zero inside, then
    restricting to interior nodes.
    """
    full = ring_embed(grid, ring)
    interior = (slice(1, -1),) * grid.dim
    if full.ndim == grid.dim:
        return _backend.lap_dirichlet(full, grid.dx)[interior]
    batch = full.shape[: full.ndim - grid.dim]
    out = np.empty(
        batch + tuple(n - 2 for n in grid.shape("inner")), dtype=full.dtype
    )
    for idx in np.ndindex(batch):
        out[idx] = _backend.lap_dirichlet(full[idx], grid.dx)[interior]
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_field(f: Field, path) -> None:
    """Write ``<path>.bin`` (little-endian float64, C order) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    if f.log_env is not None:
        blocks.append(f.log_env.astype("<f8"))
    if f.is_complex:
        v = np.ascontiguousarray(f.values)
        blocks.append(np.stack([v.real, v.imag], axis=-1).astype("<f8"))
    else:
        blocks.append(np.ascontiguousarray(f.values).astype("<f8"))
    with open(path.with_suffix(".bin"), "wb") as fh:
        for b in blocks:
            fh.write(b.tobytes(order="C"))
    meta = {
        "region": f.region,
        "spatial_only": f.spatial_only,
        "complex": bool(f.is_complex),
        "factored": f.log_env is not None,
        "dims": list(f.grid.shape(f.region)),
        "nt": None if f.spatial_only else f.grid.nt,
        "dt": f.grid.dt,
        "dx": list(f.grid.dx),
        "extent": [list(e) for e in
                   (f.grid.inner_extent if f.region == "inner" else f.grid.outer_extent)],
        "byte_order": "little",
        "order": "C",
    }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_field(grid: Grid, path) -> Field:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    region = meta["region"]
    want_ext = grid.inner_extent if region == "inner" else grid.outer_extent
    got_ext = tuple(tuple(e) for e in meta["extent"])
    if got_ext != want_ext or tuple(meta["dims"]) != grid.shape(region):
        raise GridMismatchError(f"{path}: stored field does not match the grid")
    if not meta["spatial_only"] and meta["nt"] != grid.nt:
        raise GridMismatchError(f"{path}: stored nt does not match the grid")
    raw = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    shape = tuple(meta["dims"])
    if not meta["spatial_only"]:
        shape = (grid.nt,) + shape
    log_env = None
    off = 0
    if meta["factored"]:
        log_env = raw[: grid.nt].copy()
        off = grid.nt
    if meta["complex"]:
        flat = raw[off:].reshape(shape + (2,))
        values = flat[..., 0] + 1j * flat[..., 1]
    else:
        values = raw[off:].reshape(shape).copy()
    return Field(grid, region, values, meta["spatial_only"], log_env)
