"""Order-by-order checks of the space-time solver against the nonlinear
solver (finite differences in the perturbation size) and direct row
residuals for every boundary flavor."""
import numpy as np
import pytest

from mfg_inverse import _backend
from mfg_inverse.costs import (
    RunningCost,
    TerminalCost,
    band_limited_direction,
    make_running_cost,
)
from mfg_inverse.errors import CapabilityError, ConfigError
from mfg_inverse.forward import solve_mfg
from mfg_inverse.grid import Field, make_grid, ring_extract
from mfg_inverse.linearized import (
    BC_DATA,
    BC_NEUMANN,
    BC_ZERO,
    InnerData,
    solve_adjoint,
    solve_linearized_order1,
    solve_linearized_order2,
    solve_linearized_order_n,
)


@pytest.fixture(scope="module")
def grid():
    return make_grid(
        dim=2,
        outer_extent=((0.0, 1.0), (0.0, 1.0)),
        inner_extent=((0.25, 0.75), (0.25, 0.75)),
        nx_outer=(17, 17),
        nx_inner=(9, 9),
        T=0.5,
        nt=9,
    )


@pytest.fixture(scope="module")
def running(grid):
    base = np.ones(grid.shape("outer"))
    wobble = band_limited_direction(grid, seed=11, amplitude=0.3)
    return RunningCost(
        grid,
        coeffs=(base + wobble, 0.4 * (base - 0.5 * wobble), 0.2 * base, 0.1 * base),
        a1=0.5,
    )


@pytest.fixture(scope="module")
def terminal(grid):
    return TerminalCost(grid, psi="quadratic", params={"c": 0.3})


@pytest.fixture(scope="module")
def flat_terminal(grid):
    # cubic profile: value and slope vanish at the flat state, so the
    # first variation of the terminal operator is identically zero
    return TerminalCost(grid, psi="cubic_flat")


def interior(grid):
    return (slice(1, -1),) * grid.dim


class TestOrderOne:
    def test_matches_nonlinear_difference_quotient(self, grid, running, terminal):
        f = band_limited_direction(grid, seed=3)
        pair = solve_linearized_order1(grid, running, terminal, f)
        errs = []
        for eps in (2e-4, 1e-4):
            sol = solve_mfg(grid, running, terminal, 1.0 + eps * f)
            B = terminal.stationary_value
            du = (sol.u.values - B) / eps - pair.u.values
            dm = (sol.m.values - 1.0) / eps - pair.m.values
            errs.append(max(np.abs(du).max(), np.abs(dm).max()))
        scale = max(np.abs(pair.u.values).max(), np.abs(pair.m.values).max())
        assert errs[1] < 1e-3 * scale
        # halving eps halves the defect: the pair is the exact derivative
        assert 1.5 < errs[0] / errs[1] < 2.5

    def test_rows_satisfied_outer(self, grid, running, terminal):
        f = band_limited_direction(grid, seed=4)
        pair = solve_linearized_order1(grid, running, terminal, f)
        u, m = pair.u.values, pair.m.values
        dt, dx = grid.dt, grid.dx
        f1 = running.coefficient(1)
        scale = np.abs(u).max() / dt
        for n in range(grid.nt - 1):
            r = -(u[n + 1] - u[n]) / dt - _backend.lap_neumann(u[n], dx) - f1 * m[n]
            assert np.abs(r).max() < 1e-8 * scale
        rT = u[-1] - terminal.delta_g([m[-1]])
        assert np.abs(rT).max() < 1e-8 * scale
        for n in range(1, grid.nt):
            r = (m[n] - m[n - 1]) / dt - _backend.lap_neumann(m[n], dx) \
                - _backend.lap_neumann(u[n], dx)
            assert np.abs(r).max() < 1e-8 * scale
        assert np.abs(m[0] - f).max() < 1e-9 * np.abs(f).max()

    def test_zero_direction_gives_zero(self, grid, running, terminal):
        pair = solve_linearized_order1(grid, running, terminal, None)
        assert not pair.u.values.any()
        assert not pair.m.values.any()
        assert pair.iterations == 0

    def test_complex_direction_splits_linearly(self, grid, running, terminal):
        fa = band_limited_direction(grid, seed=5)
        fb = band_limited_direction(grid, seed=6)
        pc = solve_linearized_order1(grid, running, terminal, fa + 1j * fb)
        pa = solve_linearized_order1(grid, running, terminal, fa)
        pb = solve_linearized_order1(grid, running, terminal, fb)
        ref = pa.m.values + 1j * pb.m.values
        assert np.abs(pc.m.values - ref).max() < 1e-9 * np.abs(ref).max()


class TestInnerFlavors:
    def test_rows_satisfied_zero_dirichlet(self, grid, running, terminal):
        rng = np.random.default_rng(7)
        ni = tuple(n - 2 for n in grid.shape("inner"))
        f0 = rng.standard_normal(ni)
        pair = solve_linearized_order1(grid, running, terminal, f0, bc=BC_ZERO)
        u, m = pair.u.values, pair.m.values
        assert u.shape == (grid.nt,) + grid.shape("inner")
        # ring stays zero
        assert not u[:, 0].any() and not m[:, -1].any()
        self._check_inner_rows(grid, running, terminal, u, m, f0)

    def test_rows_satisfied_data_dirichlet(self, grid, running, terminal):
        rng = np.random.default_rng(8)
        n_ring = int(ring_extract(grid, np.zeros(grid.shape("inner"))).shape[-1])
        data = InnerData(
            gamma_u=0.1 * rng.standard_normal((grid.nt, n_ring)),
            gamma_m=0.1 * rng.standard_normal((grid.nt, n_ring)),
        )
        ni = tuple(n - 2 for n in grid.shape("inner"))
        f0 = rng.standard_normal(ni)
        pair = solve_linearized_order1(
            grid, running, terminal, f0, bc=BC_DATA, inner_data=data
        )
        u, m = pair.u.values, pair.m.values
        assert np.allclose(ring_extract(grid, u), data.gamma_u)
        assert np.allclose(ring_extract(grid, m), data.gamma_m)
        self._check_inner_rows(grid, running, terminal, u, m, f0)

    @staticmethod
    def _check_inner_rows(grid, running, terminal, u, m, f0):
        """Interior rows of the inner problem, using the actual neighbor
        values (ring included) through the zero-extension stencil."""
        dt, dx = grid.dt, grid.dx
        inr = interior(grid)
        f1 = running.coefficient(1)[grid.inner_slices][inr]
        scale = max(np.abs(u).max(), np.abs(m).max()) / dt
        for n in range(grid.nt - 1):
            r = -(u[n + 1] - u[n])[inr] / dt \
                - _backend.lap_dirichlet(u[n], dx)[inr] - f1 * m[n][inr]
            assert np.abs(r).max() < 1e-8 * scale
        ext = np.zeros(grid.shape("outer"))
        ext[grid.inner_slices] = m[-1]
        rT = u[-1][inr] - terminal.delta_g([ext])[grid.inner_slices][inr]
        assert np.abs(rT).max() < 1e-8 * scale
        for n in range(1, grid.nt):
            r = (m[n] - m[n - 1])[inr] / dt \
                - _backend.lap_dirichlet(m[n], dx)[inr] \
                - _backend.lap_dirichlet(u[n], dx)[inr]
            assert np.abs(r).max() < 1e-8 * scale
        assert np.allclose(m[0][inr], f0)

    def test_outer_restriction_solves_data_flavor(self, grid, running, flat_terminal):
        """Restrict an outer solve to the inner box, feed its ring traces
        back in as data: the inner solve must reproduce the interior."""
        f = band_limited_direction(grid, seed=9)
        outer = solve_linearized_order1(grid, running, flat_terminal, f)
        u_in = outer.u.values[(slice(None),) + grid.inner_slices]
        m_in = outer.m.values[(slice(None),) + grid.inner_slices]
        data = InnerData(
            gamma_u=ring_extract(grid, u_in), gamma_m=ring_extract(grid, m_in)
        )
        inr = interior(grid)
        pair = solve_linearized_order1(
            grid, running, flat_terminal, m_in[0][inr], bc=BC_DATA, inner_data=data
        )
        scale = np.abs(u_in).max()
        assert np.abs(pair.u.values - u_in).max() < 1e-7 * scale
        assert np.abs(pair.m.values - m_in).max() < 1e-7 * scale

    def test_inner_data_requires_payload(self, grid, running, terminal):
        with pytest.raises(ConfigError):
            solve_linearized_order1(grid, running, terminal, None, bc=BC_DATA)
        with pytest.raises(ConfigError):
            solve_linearized_order1(
                grid, running, terminal, None,
                inner_data=InnerData(np.zeros((9, 28)), np.zeros((9, 28))),
            )


class TestHigherOrders:
    def test_second_order_difference_quotient(self, grid, running, terminal):
        f = band_limited_direction(grid, seed=12)
        pair = solve_linearized_order2(grid, running, terminal, f, f)
        eps = 1e-3
        up = solve_mfg(grid, running, terminal, 1.0 + eps * f)
        dn = solve_mfg(grid, running, terminal, 1.0 - eps * f)
        B = terminal.stationary_value
        d2u = (up.u.values + dn.u.values - 2.0 * B) / eps**2
        d2m = (up.m.values + dn.m.values - 2.0) / eps**2
        scale = max(np.abs(pair.u.values).max(), np.abs(pair.m.values).max())
        assert np.abs(d2u - pair.u.values).max() < 2e-3 * scale
        assert np.abs(d2m - pair.m.values).max() < 2e-3 * scale

    def test_mixed_second_order_swap_symmetry(self, grid, running, terminal):
        fa = band_limited_direction(grid, seed=13)
        fb = band_limited_direction(grid, seed=14)
        ab = solve_linearized_order2(grid, running, terminal, fa, fb)
        ba = solve_linearized_order2(grid, running, terminal, fb, fa)
        assert np.array_equal(ab.u.values, ba.u.values)
        assert np.array_equal(ab.m.values, ba.m.values)

    def test_third_order_difference_quotient(self, grid, running, terminal):
        f = band_limited_direction(grid, seed=15)
        pair = solve_linearized_order_n(grid, running, terminal, [f, f, f])
        eps = 5e-3
        vals = {}
        for k in (-2, -1, 1, 2):
            sol = solve_mfg(grid, running, terminal, 1.0 + k * eps * f)
            vals[k] = sol.m.values
        d3m = (-0.5 * vals[-2] + vals[-1] - vals[1] + 0.5 * vals[2]) / eps**3
        scale = np.abs(pair.m.values).max()
        assert np.abs(d3m - pair.m.values).max() < 5e-2 * scale

    def test_order_cap(self, grid, running, terminal):
        f = band_limited_direction(grid, seed=16)
        with pytest.raises(CapabilityError):
            solve_linearized_order_n(grid, running, terminal, [f] * 5)


class TestAdjoint:
    def test_rows_satisfied(self, grid, running):
        rng = np.random.default_rng(17)
        ni = tuple(n - 2 for n in grid.shape("inner"))
        drive = rng.standard_normal(ni) + 1j * rng.standard_normal(ni)
        pair = solve_adjoint(grid, running, drive, bc=BC_ZERO)
        rho, v = pair.u.values, pair.m.values
        dt, dx = grid.dt, grid.dx
        inr = interior(grid)
        f1 = running.coefficient(1)[grid.inner_slices][inr]
        scale = np.abs(rho).max() / dt
        assert np.abs(rho[-1][inr] - drive).max() < 1e-10 * scale
        assert not v[0].any()
        for n in range(grid.nt - 1):
            r = -(rho[n + 1] - rho[n])[inr] / dt \
                - _backend.lap_dirichlet(rho[n], dx)[inr] \
                - _backend.lap_dirichlet(v[n], dx)[inr]
            assert np.abs(r).max() < 1e-8 * scale
        for n in range(1, grid.nt):
            r = (v[n] - v[n - 1])[inr] / dt \
                - _backend.lap_dirichlet(v[n], dx)[inr] - f1 * rho[n][inr]
            assert np.abs(r).max() < 1e-8 * scale

    def test_time_reversal_is_a_value_density_pair(self, grid, running, flat_terminal):
        """Reversing the adjoint in time yields the first-variation system
        with a terminal operator whose first variation vanishes."""
        rng = np.random.default_rng(18)
        ni = tuple(n - 2 for n in grid.shape("inner"))
        drive = rng.standard_normal(ni)
        adj = solve_adjoint(grid, running, drive, bc=BC_ZERO)
        fwd = solve_linearized_order1(
            grid, running, flat_terminal, drive, bc=BC_ZERO
        )
        scale = np.abs(adj.u.values).max()
        assert np.abs(fwd.m.values - adj.u.values[::-1]).max() < 1e-7 * scale
        assert np.abs(fwd.u.values - adj.m.values[::-1]).max() < 1e-7 * scale
