"""Finite difference kernels with a numba fast path and a numpy fallback.

The kernel set is deliberately small and shared by every solver in the
package so that discrete linearizations agree with the nonlinear scheme
to rounding error:

* ``lap_neumann``    five point Laplacian with mirror ghost nodes,
* ``lap_dirichlet``  five point Laplacian with zero extension,
* ``grad_sq``        |grad f|^2 with mirror ghosts (central differences),
* ``grad_dot``       grad a . grad b with mirror ghosts,
* ``adv_div``        div( avg(m) * grad(u) ) in conservative flux form with
                     zero flux through boundary faces and half-width dual
                     cells on the boundary.

Backend selection is controlled by the environment variable
``MFG_INVERSE_BACKEND`` with values ``auto`` (default), ``numba`` or
``numpy``.  The numba path covers the 1D/2D real and complex slices used in
hot loops; everything else falls back to vectorized numpy.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError

try:
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is an install requirement
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_VALID_BACKENDS = ("auto", "numba", "numpy")


def backend_name() -> str:
    """Resolve the active backend from the environment."""
    raw = os.environ.get("MFG_INVERSE_BACKEND", "auto").strip().lower()
    if raw not in _VALID_BACKENDS:
        raise ConfigError(
            f"MFG_INVERSE_BACKEND must be one of {_VALID_BACKENDS}, got {raw!r}"
        )
    if raw == "auto":
        return "numba" if _HAVE_NUMBA else "numpy"
    if raw == "numba" and not _HAVE_NUMBA:
        raise ConfigError("MFG_INVERSE_BACKEND=numba but numba is not importable")
    return raw


def _use_numba(arr: np.ndarray) -> bool:
    if backend_name() != "numba":
        return False
    if arr.ndim not in (1, 2):
        return False
    return arr.dtype in (np.float64, np.complex128)


# ---------------------------------------------------------------------------
# numpy reference implementations (any dimension, any float/complex dtype)
# ---------------------------------------------------------------------------

def _lap_neumann_np(f: np.ndarray, dx: tuple) -> np.ndarray:
    out = np.zeros_like(f)
    for ax, h in enumerate(dx):
        n = f.shape[ax]
        if n < 2:
            raise ConfigError("lap_neumann needs at least 2 nodes per axis")
        lo = [slice(None)] * f.ndim
        hi = [slice(None)] * f.ndim
        mid = [slice(None)] * f.ndim
        lo[ax], mid[ax], hi[ax] = slice(0, n - 2), slice(1, n - 1), slice(2, n)
        out[tuple(mid)] += (f[tuple(lo)] - 2.0 * f[tuple(mid)] + f[tuple(hi)]) / h**2
        first = [slice(None)] * f.ndim
        second = [slice(None)] * f.ndim
        first[ax], second[ax] = 0, 1
        out[tuple(first)] += 2.0 * (f[tuple(second)] - f[tuple(first)]) / h**2
        last = [slice(None)] * f.ndim
        penult = [slice(None)] * f.ndim
        last[ax], penult[ax] = n - 1, n - 2
        out[tuple(last)] += 2.0 * (f[tuple(penult)] - f[tuple(last)]) / h**2
    return out


def _lap_dirichlet_np(f: np.ndarray, dx: tuple) -> np.ndarray:
    out = np.zeros_like(f)
    for ax, h in enumerate(dx):
        n = f.shape[ax]
        shifted_lo = np.zeros_like(f)
        shifted_hi = np.zeros_like(f)
        src = [slice(None)] * f.ndim
        dst = [slice(None)] * f.ndim
        src[ax], dst[ax] = slice(0, n - 1), slice(1, n)
        shifted_lo[tuple(dst)] = f[tuple(src)]
        src[ax], dst[ax] = slice(1, n), slice(0, n - 1)
        shifted_hi[tuple(dst)] = f[tuple(src)]
        out += (shifted_lo - 2.0 * f + shifted_hi) / h**2
    return out


def _axis_grad_np(f: np.ndarray, ax: int, h: float) -> np.ndarray:
    """Central difference with mirror ghosts (normal derivative 0 on ends)."""
    g = np.zeros_like(f)
    n = f.shape[ax]
    lo = [slice(None)] * f.ndim
    hi = [slice(None)] * f.ndim
    mid = [slice(None)] * f.ndim
    lo[ax], mid[ax], hi[ax] = slice(0, n - 2), slice(1, n - 1), slice(2, n)
    g[tuple(mid)] = (f[tuple(hi)] - f[tuple(lo)]) / (2.0 * h)
    # mirror ghosts make the boundary central difference vanish
    return g


def _grad_sq_np(f: np.ndarray, dx: tuple) -> np.ndarray:
    out = np.zeros_like(f)
    for ax, h in enumerate(dx):
        g = _axis_grad_np(f, ax, h)
        out += g * g
    return out


def _grad_dot_np(a: np.ndarray, b: np.ndarray, dx: tuple) -> np.ndarray:
    out = np.zeros_like(a)
    for ax, h in enumerate(dx):
        out += _axis_grad_np(a, ax, h) * _axis_grad_np(b, ax, h)
    return out


def _adv_div_np(m: np.ndarray, u: np.ndarray, dx: tuple) -> np.ndarray:
    """div( avg(m) grad(u) ) in flux form; zero flux through boundary faces."""
    out = np.zeros_like(m)
    for ax, h in enumerate(dx):
        n = m.shape[ax]
        lo = [slice(None)] * m.ndim
        hi = [slice(None)] * m.ndim
        lo[ax], hi[ax] = slice(0, n - 1), slice(1, n)
        flux = 0.5 * (m[tuple(lo)] + m[tuple(hi)]) * (u[tuple(hi)] - u[tuple(lo)]) / h
        # divergence with half-width dual cells at the ends
        first = [slice(None)] * m.ndim
        last = [slice(None)] * m.ndim
        mid = [slice(None)] * m.ndim
        first[ax], last[ax], mid[ax] = 0, n - 1, slice(1, n - 1)
        f_lo = [slice(None)] * m.ndim
        f_hi = [slice(None)] * m.ndim
        f_lo[ax], f_hi[ax] = slice(0, n - 2), slice(1, n - 1)
        out[tuple(mid)] += (flux[tuple(f_hi)] - flux[tuple(f_lo)]) / h
        f_first = [slice(None)] * m.ndim
        f_last = [slice(None)] * m.ndim
        f_first[ax], f_last[ax] = 0, n - 2
        out[tuple(first)] += flux[tuple(f_first)] / (0.5 * h)
        out[tuple(last)] += -flux[tuple(f_last)] / (0.5 * h)
    return out


# ---------------------------------------------------------------------------
# numba kernels (1D / 2D slices)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _lap_neumann_1d_nb(f, h):  # pragma: no cover - exercised via dispatch
    n = f.shape[0]
    out = np.empty_like(f)
    inv = 1.0 / (h * h)
    out[0] = 2.0 * (f[1] - f[0]) * inv
    for i in range(1, n - 1):
        out[i] = (f[i - 1] - 2.0 * f[i] + f[i + 1]) * inv
    out[n - 1] = 2.0 * (f[n - 2] - f[n - 1]) * inv
    return out


@njit(cache=True)
def _lap_neumann_2d_nb(f, h0, h1):  # pragma: no cover
    n0, n1 = f.shape
    out = np.zeros_like(f)
    inv0 = 1.0 / (h0 * h0)
    inv1 = 1.0 / (h1 * h1)
    for i in range(n0):
        im = 1 if i == 0 else i - 1
        ip = n0 - 2 if i == n0 - 1 else i + 1
        c0 = 2.0 if (i == 0 or i == n0 - 1) else 1.0
        for j in range(n1):
            jm = 1 if j == 0 else j - 1
            jp = n1 - 2 if j == n1 - 1 else j + 1
            c1 = 2.0 if (j == 0 or j == n1 - 1) else 1.0
            if c0 == 1.0:
                out[i, j] += (f[im, j] - 2.0 * f[i, j] + f[ip, j]) * inv0
            else:
                out[i, j] += 2.0 * (f[ip, j] - f[i, j]) * inv0
            if c1 == 1.0:
                out[i, j] += (f[i, jm] - 2.0 * f[i, j] + f[i, jp]) * inv1
            else:
                out[i, j] += 2.0 * (f[i, jp] - f[i, j]) * inv1
    return out


@njit(cache=True)
def _lap_dirichlet_1d_nb(f, h):  # pragma: no cover
    n = f.shape[0]
    out = np.empty_like(f)
    inv = 1.0 / (h * h)
    for i in range(n):
        left = f[i - 1] if i > 0 else 0.0 * f[0]
        right = f[i + 1] if i < n - 1 else 0.0 * f[0]
        out[i] = (left - 2.0 * f[i] + right) * inv
    return out


@njit(cache=True)
def _lap_dirichlet_2d_nb(f, h0, h1):  # pragma: no cover
    n0, n1 = f.shape
    out = np.zeros_like(f)
    inv0 = 1.0 / (h0 * h0)
    inv1 = 1.0 / (h1 * h1)
    zero = 0.0 * f[0, 0]
    for i in range(n0):
        for j in range(n1):
            left = f[i - 1, j] if i > 0 else zero
            right = f[i + 1, j] if i < n0 - 1 else zero
            down = f[i, j - 1] if j > 0 else zero
            up = f[i, j + 1] if j < n1 - 1 else zero
            out[i, j] = (left - 2.0 * f[i, j] + right) * inv0 + (
                down - 2.0 * f[i, j] + up
            ) * inv1
    return out


@njit(cache=True)
def _grad_sq_2d_nb(f, h0, h1):  # pragma: no cover
    n0, n1 = f.shape
    out = np.zeros_like(f)
    for i in range(1, n0 - 1):
        for j in range(n1):
            g = (f[i + 1, j] - f[i - 1, j]) / (2.0 * h0)
            out[i, j] += g * g
    for i in range(n0):
        for j in range(1, n1 - 1):
            g = (f[i, j + 1] - f[i, j - 1]) / (2.0 * h1)
            out[i, j] += g * g
    return out


@njit(cache=True)
def _adv_div_2d_nb(m, u, h0, h1):  # pragma: no cover
    n0, n1 = m.shape
    out = np.zeros_like(m)
    for j in range(n1):
        prev = 0.0 * m[0, 0]
        for i in range(n0 - 1):
            flux = 0.5 * (m[i, j] + m[i + 1, j]) * (u[i + 1, j] - u[i, j]) / h0
            w = 0.5 * h0 if i == 0 else h0
            out[i, j] += (flux - prev) / w
            prev = flux
        out[n0 - 1, j] += (0.0 * prev - prev) / (0.5 * h0)
    for i in range(n0):
        prev = 0.0 * m[0, 0]
        for j in range(n1 - 1):
            flux = 0.5 * (m[i, j] + m[i, j + 1]) * (u[i, j + 1] - u[i, j]) / h1
            w = 0.5 * h1 if j == 0 else h1
            out[i, j] += (flux - prev) / w
            prev = flux
        out[i, n1 - 1] += (0.0 * prev - prev) / (0.5 * h1)
    return out


# ---------------------------------------------------------------------------
# public dispatchers
# ---------------------------------------------------------------------------

def lap_neumann(f: np.ndarray, dx: tuple) -> np.ndarray:
    f = np.asarray(f)
    if _use_numba(f):
        if f.ndim == 1:
            return _lap_neumann_1d_nb(f, dx[0])
        return _lap_neumann_2d_nb(f, dx[0], dx[1])
    return _lap_neumann_np(f, tuple(dx))


def lap_dirichlet(f: np.ndarray, dx: tuple) -> np.ndarray:
    f = np.asarray(f)
    if _use_numba(f):
        if f.ndim == 1:
            return _lap_dirichlet_1d_nb(f, dx[0])
        return _lap_dirichlet_2d_nb(f, dx[0], dx[1])
    return _lap_dirichlet_np(f, tuple(dx))


def grad_sq(f: np.ndarray, dx: tuple) -> np.ndarray:
    f = np.asarray(f)
    if _use_numba(f) and f.ndim == 2 and f.dtype == np.float64:
        return _grad_sq_2d_nb(f, dx[0], dx[1])
    return _grad_sq_np(f, tuple(dx))


def grad_dot(a: np.ndarray, b: np.ndarray, dx: tuple) -> np.ndarray:
    return _grad_dot_np(np.asarray(a), np.asarray(b), tuple(dx))


def adv_div(m: np.ndarray, u: np.ndarray, dx: tuple) -> np.ndarray:
    m = np.asarray(m)
    u = np.asarray(u)
    if m.shape != u.shape:
        raise ConfigError("adv_div arguments must share a shape")
    if _use_numba(m) and m.ndim == 2 and m.dtype == u.dtype:
        return _adv_div_2d_nb(m, u, dx[0], dx[1])
    return _adv_div_np(m, u, tuple(dx))
