"""Window sampling and recovery: duality pairings evaluated from boundary
data, probe-pair Fourier samples with their exact kernels, and the closed
reconstruction loops at orders one and two."""
import copy
import json
import math

import numpy as np
import pytest

from mfg_inverse import _backend
from mfg_inverse.cgo import CGOParams, solve_correction
from mfg_inverse.costs import RunningCost, TerminalCost, band_limited_direction
from mfg_inverse.errors import (
    CapabilityError,
    ConfigError,
    DataError,
    GridMismatchError,
    IllConditionedError,
    ProbeError,
    VerificationError,
)
from mfg_inverse.grid import Field, load_field, make_grid, ring_mask, spatial_weights
from mfg_inverse.inverse import (
    boundary_functional,
    collect_order1_samples,
    collect_order2_samples,
    eval_identity,
    fourier_sample,
    measure_inner,
    measurement_difference,
    order2_experiment,
    probe_experiment,
    probe_plan,
    reconstruct_order1,
    reconstruct_order_k,
    richardson_sample,
    score_against,
    write_report,
)
from mfg_inverse.linearized import (
    BC_DATA,
    BC_NEUMANN,
    BC_ZERO,
    InnerData,
    solve_adjoint,
    solve_linearized_order1,
)

BOX = ((0.0, 1.0), (0.0, 1.0))
WINDOW = ((0.25, 0.75), (0.25, 0.75))
K = 4.0 * np.pi


@pytest.fixture(scope="module")
def grid():
    return make_grid(
        dim=2,
        outer_extent=BOX,
        inner_extent=WINDOW,
        nx_outer=(17, 17),
        nx_inner=(9, 9),
        T=0.5,
        nt=9,
    )


@pytest.fixture(scope="module")
def running_ref(grid):
    f1 = 1.2 + 0.4 * band_limited_direction(grid, seed=11, kmax=2)
    return RunningCost(grid, coeffs=(f1,), a1=0.5)


@pytest.fixture(scope="module")
def terminal(grid):
    return TerminalCost(grid, psi="quadratic", params={"c": 0.3})


@pytest.fixture(scope="module")
def small_true(grid, running_ref):
    # gentle in-band difference, small enough that linearization error
    # stays well under the kernel-agreement tolerances
    x, y = outer_coords(grid)
    bump = (0.02 * np.cos(K * (x - 0.25)) + 0.01) * np.ones_like(y)
    return RunningCost(grid, coeffs=(running_ref.coefficient(1) + bump,), a1=0.5)


@pytest.fixture(scope="module")
def probe_bundle(grid, running_ref, terminal, small_true):
    entry = probe_plan(grid, lam=3.0)[1]
    plus = solve_correction(grid, running_ref, terminal, entry.plus)
    minus = solve_correction(grid, running_ref, terminal, entry.minus)
    diff, _ = probe_experiment(grid, small_true, terminal, plus, tol=1e-11)
    return {"entry": entry, "plus": plus, "minus": minus, "diff": diff}


def outer_coords(grid):
    ax0 = grid.axes("outer")[0][:, None]
    ax1 = grid.axes("outer")[1][None, :]
    return ax0, ax1


def interior(grid):
    return (slice(1, -1),) * grid.dim


def inner_norm(grid, values):
    w = spatial_weights(grid, "inner")
    return float(np.sqrt((w * values**2).sum()))


def window_data_difference(grid, running_a, running_b, terminal, seed=7):
    """Measured difference of two data-driven window solves and the
    unknown-side pair, so tests can form the volume pairing directly."""
    rng = np.random.default_rng(seed)
    nring = int(ring_mask(grid).sum())
    ishape = tuple(n - 2 for n in grid.shape("inner"))
    data = InnerData(
        gamma_u=0.3 * rng.standard_normal((grid.nt, nring)),
        gamma_m=0.3 * rng.standard_normal((grid.nt, nring)),
    )
    m0 = rng.standard_normal(ishape)
    pair_a = solve_linearized_order1(
        grid, running_a, terminal, m0, bc=BC_DATA, inner_data=data, tol=1e-12
    )
    pair_b = solve_linearized_order1(
        grid, running_b, terminal, m0, bc=BC_DATA, inner_data=data, tol=1e-12
    )
    d_a = measure_inner(grid, pair_a.u.values, pair_a.m.values)
    d_b = measure_inner(grid, pair_b.u.values, pair_b.m.values)
    diff = measurement_difference(d_a, d_b)
    diff.provenance = {"kind": "boundary-data"}
    return diff, pair_a


class TestMeasurements:
    def test_shape_mismatch_rejected(self, grid):
        good = np.zeros((grid.nt,) + grid.shape("inner"))
        bad = np.zeros((grid.nt, 5, 5))
        with pytest.raises(GridMismatchError):
            measure_inner(grid, bad, good)

    def test_self_difference_vanishes(self, grid):
        shape = (grid.nt,) + grid.shape("inner")
        rng = np.random.default_rng(0)
        d = measure_inner(grid, rng.standard_normal(shape), rng.standard_normal(shape))
        diff = measurement_difference(d, d)
        assert np.all(diff.u_on_sigma == 0.0)
        assert np.all(diff.dm_nu_on_sigma == 0.0)
        assert np.all(diff.mass_history == 0.0)

    def test_cross_grid_difference_rejected(self, grid):
        other = make_grid(
            dim=2,
            outer_extent=BOX,
            inner_extent=WINDOW,
            nx_outer=(17, 17),
            nx_inner=(9, 9),
            T=0.5,
            nt=5,
        )
        shape = (grid.nt,) + grid.shape("inner")
        d = measure_inner(grid, np.zeros(shape), np.zeros(shape))
        shape2 = (other.nt,) + other.shape("inner")
        d2 = measure_inner(other, np.zeros(shape2), np.zeros(shape2))
        with pytest.raises(GridMismatchError):
            measurement_difference(d, d2)


class TestEvalIdentity:
    def test_equal_costs_vanish(self, grid, running_ref):
        rng = np.random.default_rng(1)
        shape = (grid.nt,) + grid.shape("inner")
        m = Field(grid, "inner", rng.standard_normal(shape))
        rho = Field(grid, "inner", rng.standard_normal(shape))
        assert eval_identity(running_ref, running_ref, 1, m, rho) == 0.0

    def test_matches_refined_quadrature(self, grid, running_ref):
        delta = 0.3 + 0.1 * np.cos(2 * np.pi * grid.axes("outer")[0])[:, None]
        other = RunningCost(
            grid, coeffs=(running_ref.coefficient(1) + delta,), a1=0.5
        )
        rng = np.random.default_rng(2)
        shape = (grid.nt,) + grid.shape("inner")
        mv = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        rv = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        val = eval_identity(other, running_ref, 1, Field(grid, "inner", mv),
                            Field(grid, "inner", rv))
        d_in = (other.coefficient(1) - running_ref.coefficient(1))
        d_in = d_in[grid.inner_slices][interior(grid)]
        sl = (slice(None),) + interior(grid)
        scale = grid.dt * float(np.prod(grid.dx))
        prods = d_in * mv[sl][:-1] * rv[sl][:-1]
        oracle = complex(
            math.fsum(prods.real.ravel().tolist()),
            math.fsum(prods.imag.ravel().tolist()),
        ) * scale
        assert abs(val - oracle) <= 1e-6 * abs(oracle)

    def test_grid_mismatch_rejected(self, grid, running_ref):
        other = make_grid(
            dim=2,
            outer_extent=BOX,
            inner_extent=WINDOW,
            nx_outer=(17, 17),
            nx_inner=(9, 9),
            T=0.5,
            nt=5,
        )
        m = Field(other, "inner", np.zeros((other.nt,) + other.shape("inner")))
        rho = Field(grid, "inner", np.zeros((grid.nt,) + grid.shape("inner")))
        with pytest.raises(GridMismatchError):
            eval_identity(running_ref, running_ref, 1, m, rho)

    def test_manufactured_difference_system_pairs_to_zero(self, grid, running_ref):
        """A compactly supported pair satisfying the homogeneous-data
        difference rows pairs to zero against any adjoint multiplier: the
        summation-by-parts chain closes discretely."""
        dt = grid.dt
        ishape = grid.shape("inner")
        inter = interior(grid)
        n_int = (ishape[0] - 2) * (ishape[1] - 2)

        def lap_box(level):
            return _backend.lap_dirichlet(level, grid.dx)[inter]

        a = np.zeros((n_int, n_int))
        for j in range(n_int):
            lev = np.zeros(ishape)
            lev[inter].flat[j] = 1.0
            a[:, j] = lap_box(lev).ravel()

        # time profile vanishing at the two leading and trailing levels,
        # spatial bump vanishing on the ring: zero data on every face
        nsteps = grid.nt - 1
        q = np.zeros(grid.nt)
        for n in range(2, nsteps - 1):
            q[n] = np.sin(np.pi * (n - 1) / (nsteps - 2)) ** 2
        s = np.sin(np.pi * np.linspace(0.0, 1.0, ishape[0])) ** 2
        psi = s[:, None] * s[None, :]
        mbar = np.stack([q[n] * psi for n in range(grid.nt)])

        ubar = np.zeros_like(mbar)
        for n in range(1, grid.nt):
            w = (mbar[n] - mbar[n - 1])[inter] / dt - lap_box(mbar[n])
            lev = np.zeros(ishape)
            lev[inter] = np.linalg.solve(a, w.ravel()).reshape(lev[inter].shape)
            ubar[n] = lev
        assert abs(ubar[0]).max() == 0.0 and abs(ubar[-1]).max() == 0.0

        delta = 0.3 + 0.1 * np.cos(2 * np.pi * grid.axes("outer")[0])[:, None]
        delta = delta * np.ones(grid.shape("outer"))
        running_a = RunningCost(
            grid, coeffs=(running_ref.coefficient(1) + delta,), a1=0.5
        )
        f1_in = running_ref.coefficient(1)[grid.inner_slices][inter]
        delta_in = delta[grid.inner_slices][inter]

        m2 = np.zeros((grid.nt,) + ishape)
        sources = []
        for n in range(nsteps):
            g = (
                -(ubar[n + 1] - ubar[n])[inter] / dt
                - lap_box(ubar[n])
                - f1_in * mbar[n][inter]
            )
            sources.append(g)
            m2[n][inter] = g / delta_in

        rng = np.random.default_rng(3)
        drive = rng.standard_normal(lev[inter].shape)
        adj = solve_adjoint(grid, running_ref, drive, bc=BC_ZERO, tol=1e-12)
        val = eval_identity(running_a, running_ref, 1,
                            Field(grid, "inner", m2), adj.u)
        rho = adj.u.values[(slice(None),) + inter]
        scale = dt * float(np.prod(grid.dx)) * sum(
            (np.abs(sources[n]) * np.abs(rho[n])).sum() for n in range(nsteps)
        )
        assert abs(val) <= 1e-8 * max(1.0, scale)


class TestBoundaryFunctional:
    @pytest.mark.parametrize("with_terminal", [False, True])
    def test_matches_volume_pairing(self, grid, running_ref, terminal,
                                    with_terminal):
        term = terminal if with_terminal else None
        delta = 0.3 + 0.1 * np.cos(2 * np.pi * grid.axes("outer")[0])[:, None]
        delta = delta * np.ones(grid.shape("outer"))
        running_a = RunningCost(
            grid, coeffs=(running_ref.coefficient(1) + delta,), a1=0.5
        )
        diff, pair_a = window_data_difference(grid, running_a, running_ref, term)
        drive = np.random.default_rng(4).standard_normal(
            tuple(n - 2 for n in grid.shape("inner"))
        )
        adj = solve_adjoint(grid, running_ref, drive, bc=BC_ZERO, tol=1e-12)
        bf = boundary_functional(diff, adj, running_ref, terminal=term)
        vol = eval_identity(running_a, running_ref, 1, pair_a.m, adj.u)
        assert abs(bf - vol) <= 1e-6 * abs(vol)

    def test_cgo_multiplier_matches_volume_pairing(self, grid, running_ref,
                                                   terminal):
        delta = 0.3 + 0.1 * np.cos(2 * np.pi * grid.axes("outer")[0])[:, None]
        delta = delta * np.ones(grid.shape("outer"))
        running_a = RunningCost(
            grid, coeffs=(running_ref.coefficient(1) + delta,), a1=0.5
        )
        diff, pair_a = window_data_difference(grid, running_a, running_ref,
                                              terminal)
        probe = solve_correction(
            grid, running_ref, terminal,
            CGOParams(lam=6.0, xi=(1.0, 0.0), eta=(0.0, 1.0), tau=0.8, sign=-1),
        )
        bf = boundary_functional(diff, probe, running_ref, terminal=terminal)
        vol = eval_identity(running_a, running_ref, 1, pair_a.m, probe.density)
        assert abs(bf - vol) <= 1e-6 * abs(vol)

    def test_zero_difference_vanishes(self, grid, running_ref):
        shape = (grid.nt,) + grid.shape("inner")
        rng = np.random.default_rng(5)
        d = measure_inner(grid, rng.standard_normal(shape), rng.standard_normal(shape))
        diff = measurement_difference(d, d)
        drive = rng.standard_normal(tuple(n - 2 for n in grid.shape("inner")))
        adj = solve_adjoint(grid, running_ref, drive, bc=BC_ZERO, tol=1e-10)
        assert boundary_functional(diff, adj, running_ref) == 0.0

    def test_linear_in_the_multiplier(self, grid, running_ref, terminal,
                                      probe_bundle):
        diff = probe_bundle["diff"]
        rng = np.random.default_rng(6)
        ishape = tuple(n - 2 for n in grid.shape("inner"))
        d1 = rng.standard_normal(ishape)
        d2 = rng.standard_normal(ishape)
        adj1 = solve_adjoint(grid, running_ref, d1, bc=BC_ZERO, tol=1e-12)
        adj2 = solve_adjoint(grid, running_ref, d2, bc=BC_ZERO, tol=1e-12)
        adj12 = solve_adjoint(grid, running_ref, d1 + 2.0 * d2, bc=BC_ZERO,
                              tol=1e-12)
        b1 = boundary_functional(diff, adj1, running_ref, terminal=terminal)
        b2 = boundary_functional(diff, adj2, running_ref, terminal=terminal)
        b12 = boundary_functional(diff, adj12, running_ref, terminal=terminal)
        assert abs(b12 - (b1 + 2.0 * b2)) <= 1e-12 * max(abs(b1), abs(b2), 1e-30)

    def test_missing_normals_rejected(self, grid, running_ref, probe_bundle):
        diff = copy.deepcopy(probe_bundle["diff"])
        diff.du_nu_on_sigma = None
        adj = solve_adjoint(
            grid, running_ref,
            np.ones(tuple(n - 2 for n in grid.shape("inner"))),
            bc=BC_ZERO, tol=1e-8,
        )
        with pytest.raises(DataError):
            boundary_functional(diff, adj, running_ref)

    def test_growing_probe_multiplier_rejected(self, grid, running_ref,
                                               probe_bundle):
        with pytest.raises(ProbeError):
            boundary_functional(probe_bundle["diff"], probe_bundle["plus"],
                                running_ref)

    def test_forward_pair_multiplier_rejected(self, grid, running_ref, terminal,
                                              probe_bundle):
        pair = solve_linearized_order1(
            grid, running_ref, terminal,
            band_limited_direction(grid, seed=8), bc=BC_NEUMANN, tol=1e-8
        )
        with pytest.raises(ConfigError):
            boundary_functional(probe_bundle["diff"], pair, running_ref)


class TestProbeExperiment:
    def test_equal_costs_give_tiny_samples(self, grid, running_ref, terminal,
                                           probe_bundle):
        diff, _ = probe_experiment(grid, running_ref, terminal,
                                   probe_bundle["plus"], tol=1e-11)
        sample = fourier_sample(diff, probe_bundle["plus"],
                                probe_bundle["minus"], running_ref,
                                terminal=terminal)
        assert abs(sample.value) <= 1e-7

    def test_requires_growing_probe(self, grid, running_ref, terminal,
                                    small_true, probe_bundle):
        with pytest.raises(ProbeError):
            probe_experiment(grid, small_true, terminal, probe_bundle["minus"])

    def test_returns_reference_density(self, grid, running_ref, terminal,
                                       small_true, probe_bundle):
        plus = probe_bundle["plus"]
        _, ref_m = probe_experiment(grid, small_true, terminal, plus, tol=1e-11)
        dens0 = (plus.leading.values + plus.correction.values)[0]
        assert np.allclose(ref_m[0], dens0, atol=1e-12)


class TestFourierSample:
    def test_frequency_and_kernel_recorded(self, grid, running_ref, terminal,
                                           small_true, probe_bundle):
        sample = fourier_sample(probe_bundle["diff"], probe_bundle["plus"],
                                probe_bundle["minus"], running_ref,
                                terminal=terminal)
        k, tau_sum = sample.frequency
        assert np.allclose(k, (K, 0.0), atol=1e-12)
        assert tau_sum == 0.0
        assert sample.lam == 3.0
        assert sample.provenance["kind"] == "boundary-data"
        assert sample.weight.shape == tuple(n - 2 for n in grid.shape("inner"))

    def test_kernel_matches_coefficient_pairing(self, grid, running_ref,
                                                terminal, small_true,
                                                probe_bundle):
        """The sample value is the coefficient difference paired with the
        recorded kernel, up to linearization error in the bump size."""
        sample = fourier_sample(probe_bundle["diff"], probe_bundle["plus"],
                                probe_bundle["minus"], running_ref,
                                terminal=terminal)
        delta = small_true.coefficient(1) - running_ref.coefficient(1)
        delta_in = delta[grid.inner_slices][interior(grid)]
        direct = float(np.prod(grid.dx)) * (delta_in * sample.weight).sum()
        assert abs(sample.value - direct) <= 1e-3 * abs(direct)

    @pytest.mark.parametrize(
        "patch",
        [
            {"xi": (1.0, 0.0), "eta": (0.0, 1.0)},
            {"lam": 3.5},
            {"freq_scale": 5.0},
            {"sign": 1},
            {"osc_sign": 1},
        ],
    )
    def test_mismatched_pairs_rejected(self, grid, running_ref, terminal,
                                       probe_bundle, patch):
        base = probe_bundle["entry"].minus
        params = CGOParams(
            lam=patch.get("lam", base.lam),
            xi=patch.get("xi", base.xi),
            eta=patch.get("eta", base.eta),
            tau=base.tau,
            sign=patch.get("sign", base.sign),
            osc_sign=patch.get("osc_sign", base.osc_sign),
            freq_scale=patch.get("freq_scale", base.freq_scale),
        )
        other = solve_correction(grid, running_ref, terminal, params)
        with pytest.raises(ProbeError):
            fourier_sample(probe_bundle["diff"], probe_bundle["plus"], other,
                           running_ref, terminal=terminal)

    def test_sweep_peaks_with_direct_integral(self, grid, running_ref, terminal):
        """A dense frequency sweep of normalized sample magnitudes tracks
        the direct windowed Fourier integral of the difference, peak
        included, for a half-mode cosine supported on the window."""
        x, y = outer_coords(grid)
        inside = (x >= 0.25) & (x <= 0.75) & (y >= 0.25) & (y <= 0.75)
        bump = 0.05 * np.cos(np.pi * (x - 0.25) / 0.5) * np.ones_like(y) * inside
        true = RunningCost(
            grid, coeffs=(running_ref.coefficient(1) + bump,), a1=0.5
        )
        xs = grid.axes("inner")[0][:, None]
        ys = grid.axes("inner")[1][None, :]
        w_in = spatial_weights(grid, "inner")
        delta_in = bump[grid.inner_slices]

        svals = np.linspace(0.3 * np.pi, 1.6 * np.pi, 12)
        oracle = []
        observed = []
        for s in svals:
            kernel = np.exp(-1j * 2.0 * s * xs) * np.ones_like(ys)
            oracle.append(abs((w_in * delta_in * kernel).sum()))
            pol = dict(xi=(0.0, 1.0), eta=(1.0, 0.0), tau=0.0, osc_sign=-1,
                       freq_scale=float(s))
            plus = solve_correction(grid, running_ref, terminal,
                                    CGOParams(lam=4.2, sign=1, **pol))
            minus = solve_correction(grid, running_ref, terminal,
                                     CGOParams(lam=4.2, sign=-1, **pol))
            diff, _ = probe_experiment(grid, true, terminal, plus, tol=1e-10)
            sample = fourier_sample(diff, plus, minus, running_ref,
                                    terminal=terminal)
            observed.append(abs(sample.value / sample.meta["time_factor"]))
        oracle = np.asarray(oracle) / max(oracle)
        observed = np.asarray(observed) / max(observed)
        peak = int(np.argmax(observed))
        assert 0 < peak < len(svals) - 1
        assert oracle[peak] >= 0.9
        assert np.linalg.norm(observed - oracle) <= 0.2 * np.linalg.norm(oracle)


@pytest.fixture(scope="module")
def suite_grid():
    return make_grid(
        dim=2,
        outer_extent=BOX,
        inner_extent=WINDOW,
        nx_outer=(17, 17),
        nx_inner=(9, 9),
        T=0.5,
        nt=33,
    )


@pytest.fixture(scope="module")
def extrapolation_suite(suite_grid):
    """Probe-pair samples at two lam values over twenty low frequencies,
    with the direct windowed transform of the difference as target."""
    grid = suite_grid
    x, y = outer_coords(grid)
    bump = (
        0.02 * np.cos(K * (x - 0.25))
        + 0.015 * np.sin(K * (y - 0.25))
        + 0.012 * np.cos(K * (x + y - 0.5))
        + 0.008
    )
    f1 = 1.2 + 0.4 * band_limited_direction(grid, seed=11, kmax=2)
    ref = RunningCost(grid, coeffs=(f1,), a1=0.5)
    true = RunningCost(grid, coeffs=(f1 + bump,), a1=0.5)
    term = TerminalCost(grid, psi="quadratic", params={"c": 0.3})

    xs = grid.axes("inner")[0][:, None]
    ys = grid.axes("inner")[1][None, :]
    voldx = float(np.prod(grid.dx))
    delta_in = bump[grid.inner_slices]

    angles = np.linspace(0.0, np.pi * 0.95, 20)
    mags = np.tile((0.4, 0.7, 1.0), 7)[:20]
    lo, hi, targets = [], [], []
    for phi, s in zip(angles, mags):
        eta = (float(np.cos(phi)), float(np.sin(phi)))
        xi = (-eta[1], eta[0])
        pair = []
        for lam in (2.0, 4.2):
            pol = dict(xi=xi, eta=eta, tau=0.0, osc_sign=-1, freq_scale=float(s))
            plus = solve_correction(grid, ref, term,
                                    CGOParams(lam=lam, sign=1, **pol))
            minus = solve_correction(grid, ref, term,
                                     CGOParams(lam=lam, sign=-1, **pol))
            diff, _ = probe_experiment(grid, true, term, plus, tol=1e-10)
            pair.append(fourier_sample(diff, plus, minus, ref, terminal=term))
        lo.append(pair[0])
        hi.append(pair[1])
        kvec = pair[0].frequency[0]
        kernel = np.exp(-1j * (kvec[0] * xs + kvec[1] * ys))
        targets.append(((delta_in * kernel)[1:-1, 1:-1]).sum() * voldx)
    return {"lo": lo, "hi": hi, "targets": targets, "ref": ref}


class TestExtrapolation:
    def test_two_point_estimate_beats_single_lam(self, extrapolation_suite):
        suite = extrapolation_suite
        wins = 0
        for lo, hi, target in zip(suite["lo"], suite["hi"], suite["targets"]):
            single = min(
                abs(lo.value / lo.meta["time_factor"] - target),
                abs(hi.value / hi.meta["time_factor"] - target),
            )
            extrapolated = richardson_sample(lo, hi)
            if abs(extrapolated.value - target) < single:
                wins += 1
        assert wins >= 16

    def test_extrapolated_sample_metadata(self, extrapolation_suite):
        lo = extrapolation_suite["lo"][0]
        hi = extrapolation_suite["hi"][0]
        ex = richardson_sample(lo, hi)
        assert ex.weight is None
        assert ex.meta["extrapolated_from"] == (2.0, 4.2)
        assert ex.frequency == lo.frequency

    def test_mismatched_extrapolation_rejected(self, extrapolation_suite):
        lo = extrapolation_suite["lo"]
        hi = extrapolation_suite["hi"]
        with pytest.raises(ProbeError):
            richardson_sample(hi[0], lo[0])
        with pytest.raises(ProbeError):
            richardson_sample(lo[0], hi[1])

    def test_extrapolated_samples_cannot_fit(self, extrapolation_suite):
        ex = richardson_sample(extrapolation_suite["lo"][0],
                               extrapolation_suite["hi"][0])
        with pytest.raises(ConfigError):
            reconstruct_order1([ex], extrapolation_suite["ref"])


class TestProbePlan:
    def test_covers_the_first_band(self, grid):
        plan = probe_plan(grid, lam=3.0)
        assert len(plan) == 25
        seen = {}
        for entry in plan:
            seen[entry.k_index] = seen.get(entry.k_index, 0) + 1
            assert entry.plus.sign == 1 and entry.minus.sign == -1
            assert entry.plus.xi == entry.minus.xi
            assert entry.plus.freq_scale == entry.minus.freq_scale
            assert entry.plus.tau + entry.minus.tau == 0.0
            total = entry.plus.freq_scale * (
                np.array(entry.plus.eta) + np.array(entry.minus.eta)
            )
            assert np.allclose(total, K * np.array(entry.k_index), atol=1e-12)
        assert seen[(0, 0)] == 1
        assert all(count == 3 for idx, count in seen.items() if idx != (0, 0))

    def test_rejects_other_dimensions(self):
        line = make_grid(
            dim=1,
            outer_extent=((0.0, 1.0),),
            inner_extent=((0.25, 0.75),),
            nx_outer=(17,),
            nx_inner=(9,),
            T=0.5,
            nt=9,
        )
        with pytest.raises(CapabilityError):
            probe_plan(line)

    def test_rejects_higher_bands(self, grid):
        with pytest.raises(CapabilityError):
            probe_plan(grid, band=2)

    def test_parallel_collection_matches_serial(self, grid, running_ref,
                                                terminal, small_true):
        plan = probe_plan(grid, lam=3.0)[:3]
        serial = collect_order1_samples(
            grid, small_true, running_ref, terminal, plan, tol=1e-10
        )
        threaded = collect_order1_samples(
            grid, small_true, running_ref, terminal, plan, tol=1e-10, workers=2
        )
        for a, b in zip(serial, threaded):
            assert abs(a.value - b.value) <= 1e-12 * max(abs(a.value), 1e-30)
            assert np.allclose(a.weight, b.weight, atol=1e-15)
            assert a.meta["k_index"] == b.meta["k_index"]


@pytest.fixture(scope="module")
def loop_grid():
    return make_grid(
        dim=2,
        outer_extent=BOX,
        inner_extent=WINDOW,
        nx_outer=(17, 17),
        nx_inner=(9, 9),
        T=0.5,
        nt=17,
    )


@pytest.fixture(scope="module")
def order1_loop(loop_grid):
    """Full order-one closed loop: in-band ground-truth difference,
    25-pair collection, ridge fit, scored against the known truth."""
    grid = loop_grid
    x, y = outer_coords(grid)
    bump = (
        0.08 * np.cos(K * (x - 0.25))
        + 0.05 * np.sin(K * (y - 0.25))
        + 0.06 * np.cos(K * (x + y - 0.5))
        - 0.04 * np.sin(K * (x - y))
        + 0.03
    )
    f1 = 1.2 + 0.4 * band_limited_direction(grid, seed=11, kmax=2)
    ref = RunningCost(grid, coeffs=(f1,), a1=0.5)
    true = RunningCost(grid, coeffs=(f1 + bump,), a1=0.5)
    term = TerminalCost(grid, psi="quadratic", params={"c": 0.3})
    samples = collect_order1_samples(grid, true, ref, term, lam=3.0, tol=1e-10)
    result = reconstruct_order1(samples, ref)
    metrics = score_against(result, true.coefficient(1))
    return {"ref": ref, "true": true, "samples": samples, "result": result,
            "metrics": metrics}


@pytest.fixture(scope="module")
def order2_loop(loop_grid):
    """Order-two ladder: matched first-order coefficients, flat-variation
    terminal, positive initial direction, adjoint multiplier sweep."""
    grid = loop_grid
    x, y = outer_coords(grid)
    bump2 = 0.1 * np.cos(K * (x - 0.25)) - 0.06 * np.sin(K * (x + y - 0.5)) + 0.04
    f1 = 1.2 + 0.4 * band_limited_direction(grid, seed=11, kmax=2)
    f2 = 0.8 + 0.2 * band_limited_direction(grid, seed=5, kmax=2)
    ref = RunningCost(grid, coeffs=(f1, f2), a1=0.5)
    true = RunningCost(grid, coeffs=(f1, f2 + bump2), a1=0.5)
    term = TerminalCost(grid, psi="cubic_flat", params={"c": 0.3})
    direction = 1.0 + 0.5 * np.cos(np.pi * x) * np.ones_like(y)

    order1_samples = collect_order1_samples(grid, true, ref, term, lam=3.0,
                                            tol=1e-10)
    r1 = reconstruct_order1(order1_samples, ref)
    samples, m1 = collect_order2_samples(grid, true, ref, term, direction,
                                         tol=1e-11)
    r2 = reconstruct_order_k(2, samples, ref, [r1], m1)
    metrics = score_against(r2, true.coefficient(2))
    return {"ref": ref, "true": true, "terminal": term, "direction": direction,
            "r1": r1, "samples": samples, "m1": m1, "r2": r2,
            "metrics": metrics}


class TestOrderOneLoop:
    def test_recovers_band_limited_difference(self, order1_loop):
        assert order1_loop["metrics"]["rel_l2"] <= 0.10

    def test_recovered_field_mostly_real(self, order1_loop):
        assert order1_loop["result"].meta["imag_fraction"] <= 0.01

    def test_fit_stays_within_declared_floor(self, order1_loop):
        result = order1_loop["result"]
        assert result.floor > 0.0
        assert result.residual <= result.floor

    def test_matched_costs_recover_the_reference(self, loop_grid, order2_loop):
        # the order-two ladder shares its first-order coefficient, so its
        # first rung doubles as the uniqueness direction: no difference
        # beyond the regularization floor
        r1 = order2_loop["r1"]
        assert inner_norm(loop_grid, r1.delta.real) <= 2.0 * r1.floor

    def test_out_of_band_scored_against_projection(self, grid, running_ref,
                                                   terminal):
        x, y = outer_coords(grid)
        inband = (0.06 * np.cos(K * (x - 0.25))
                  + 0.04 * np.sin(K * (y - 0.25)) + 0.02)
        outband = 0.05 * np.cos(2.0 * K * (x + y - 0.5))
        true = RunningCost(
            grid,
            coeffs=(running_ref.coefficient(1) + inband + outband,),
            a1=0.5,
        )
        samples = collect_order1_samples(grid, true, running_ref, terminal,
                                         lam=3.0, tol=1e-10)
        result = reconstruct_order1(samples, running_ref)
        metrics = score_against(result, true.coefficient(1))
        assert metrics["rel_l2_projected"] <= 0.10
        assert metrics["rel_l2"] > metrics["rel_l2_projected"]


class TestOrderTwoLoop:
    def test_recovers_second_order_difference(self, order2_loop):
        assert order2_loop["metrics"]["rel_l2"] <= 0.15

    def test_positive_direction_leaves_mask_empty(self, order2_loop):
        assert not order2_loop["r2"].mask.any()

    def test_all_orders_equal_gives_zero_field(self, loop_grid, order2_loop):
        ref = order2_loop["ref"]
        samples, m1 = collect_order2_samples(
            loop_grid, ref, ref, order2_loop["terminal"],
            order2_loop["direction"], tol=1e-11,
        )
        result = reconstruct_order_k(2, samples, ref, [order2_loop["r1"]], m1)
        assert inner_norm(loop_grid, result.delta.real) <= 2.0 * result.floor

    def test_dead_weight_rejected(self, loop_grid, order2_loop):
        levels = np.zeros((loop_grid.nt,) + loop_grid.shape("inner"))
        levels[:, :3, :] = 1.0
        with pytest.raises(IllConditionedError):
            reconstruct_order_k(2, order2_loop["samples"], order2_loop["ref"],
                                [order2_loop["r1"]], levels)

    def test_order_and_lower_rungs_validated(self, order2_loop):
        with pytest.raises(ConfigError):
            reconstruct_order_k(1, order2_loop["samples"], order2_loop["ref"],
                                [], order2_loop["m1"])
        with pytest.raises(ConfigError):
            reconstruct_order_k(2, order2_loop["samples"], order2_loop["ref"],
                                [], order2_loop["m1"])

    def test_mismatched_first_order_rejected(self, grid, running_ref, terminal,
                                             small_true):
        direction = np.ones(grid.shape("outer"))
        with pytest.raises(ConfigError):
            order2_experiment(grid, small_true, running_ref, None, direction)

    def test_mollified_terminal_rejected(self, grid, running_ref, terminal):
        direction = np.ones(grid.shape("outer"))
        with pytest.raises(ConfigError):
            order2_experiment(grid, running_ref, running_ref, terminal,
                              direction)


class TestProvenanceAndReports:
    def test_tampered_samples_rejected(self, order1_loop):
        sample = copy.deepcopy(order1_loop["samples"][0])
        sample.provenance["kind"] = "volume-oracle"
        with pytest.raises(VerificationError):
            reconstruct_order1([sample], order1_loop["ref"])

    def test_underdetermined_fit_warns_without_raising(self, order1_loop):
        result = reconstruct_order1(order1_loop["samples"][:5],
                                    order1_loop["ref"])
        assert "conditioning" in result.meta
        assert result.field.values.shape == order1_loop["result"].field.values.shape

    def test_report_roundtrip_and_determinism(self, loop_grid, order1_loop,
                                              tmp_path):
        result = order1_loop["result"]
        samples = order1_loop["samples"]
        paths = write_report(result, samples, tmp_path / "a")
        write_report(result, samples, tmp_path / "b")
        report = json.loads((tmp_path / "a" / "report.json").read_text())
        assert report["order"] == 1
        assert report["band"] == 1
        assert len(report["coefficients"]) == len(result.labels)
        assert report["ridge_weight"] == result.ridge_weight
        stored = load_field(loop_grid, tmp_path / "a" / "recovered_field")
        assert np.allclose(stored.values, result.field.values, atol=1e-15)
        for name in ("report.json", "samples.csv", "recovered_field.bin"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b
        assert set(paths) == {"report", "field", "samples"}
