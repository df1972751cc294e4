"""Batch front door: JSON experiment configs, orchestration of the
forward, linearization, probing, reconstruction and verification
pipelines, and deterministic persistence.

Every run directory receives a manifest binding the config hash, the
grid hash, the code version, the seed, and a checksum per emitted file,
so identical configs reproduce byte-identical outputs.  Plot emission is
data only (CSV and field files); rendering is left to external tools.
Exit codes: 0 success, 1 config, 2 solver, 3 probe, 4 verification,
5 data.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    check_apriori_adjoint,
    check_apriori_forward,
    check_carleman_minus,
    check_carleman_plus,
    check_energy_identity,
    draw_initial_bumps,
    write_estimate_report,
)
from .cgo import CGOParams
from .costs import (
    MAX_ORDER,
    RunningCost,
    TerminalCost,
    _psi_registry,
    band_limited_direction,
    catalog,
    make_running_cost,
    plateau_direction,
)
from .errors import (
    CapabilityError,
    ConfigError,
    MfgInverseError,
    SolverError,
    VerificationError,
)
from .forward import load_measurements, measure, save_measurements, solve_mfg
from .grid import Grid, load_field, make_grid, ring_mask, save_field, spatial_weights
from .inverse import (
    ProbePlanEntry,
    collect_order1_samples,
    collect_order2_samples,
    probe_plan,
    reconstruct_order1,
    reconstruct_order_k,
    score_against,
    write_report,
)
from .linearized import (
    BC_DATA,
    InnerData,
    solve_linearized_order1,
    solve_linearized_order_n,
)

_OUT_ROOT_ENV = "MFG_INVERSE_OUT_ROOT"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Parsed experiment document plus the effective run parameters."""

    doc: dict
    grid: Grid
    seed: int
    workers: int
    out: Path
    config_hash: str


def _canonical_hash(doc: dict, seed: int) -> str:
    effective = {k: v for k, v in doc.items() if k not in ("out", "workers")}
    effective["seed"] = seed
    blob = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _grid_from_config(doc: dict) -> Grid:
    spec = doc.get("grid")
    if not isinstance(spec, dict):
        raise ConfigError("config needs a grid section")
    try:
        return make_grid(
            dim=int(spec["dim"]),
            outer_extent=tuple(tuple(e) for e in spec["outer_extent"]),
            inner_extent=tuple(tuple(e) for e in spec["inner_extent"]),
            nx_outer=tuple(int(n) for n in spec["nx_outer"]),
            nx_inner=tuple(int(n) for n in spec["nx_inner"]),
            T=float(spec["T"]),
            nt=int(spec["nt"]),
        )
    except KeyError as exc:
        raise ConfigError(f"grid section is missing {exc}") from exc


def load_config(path, *, seed=None, out=None, workers=None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    grid = _grid_from_config(doc)
    eff_seed = int(seed if seed is not None else doc.get("seed", 0))
    eff_workers = int(workers if workers is not None else doc.get("workers", 0))
    out_raw = out if out is not None else doc.get("out")
    if out_raw is None:
        raise ConfigError("an output directory is required (--out or config)")
    out_path = Path(out_raw)
    root = os.environ.get(_OUT_ROOT_ENV)
    if root and not out_path.is_absolute():
        out_path = Path(root) / out_path
    return ExperimentConfig(
        doc=doc,
        grid=grid,
        seed=eff_seed,
        workers=eff_workers,
        out=out_path,
        config_hash=_canonical_hash(doc, eff_seed),
    )


def _window_bump(grid: Grid, spec: dict) -> np.ndarray:
    k = tuple(int(v) for v in spec.get("k", (1, 0)))
    if len(k) != grid.dim:
        raise ConfigError(f"bump index needs {grid.dim} entries")
    arg = np.zeros(grid.shape("outer"))
    for axis, (lo, hi), ki in zip(grid.mesh("outer"), grid.inner_extent, k):
        arg = arg + 2.0 * np.pi / (hi - lo) * ki * (axis - lo)
    profile = np.sin(arg) if spec.get("phase") == "sin" else np.cos(arg)
    return float(spec.get("amplitude", 0.05)) * profile


def _running_from_spec(grid: Grid, spec: dict) -> RunningCost:
    if not isinstance(spec, dict):
        raise ConfigError("running cost spec must be an object")
    a1 = float(spec.get("a1", 0.5))
    if "files" in spec or "file" in spec:
        paths = spec.get("files", [spec.get("file")])
        coeffs = []
        for p in paths:
            fp = Path(p)
            if fp.suffix in (".bin", ".json"):
                fp = fp.with_suffix("")
            if not (fp.with_suffix(".json").is_file() and fp.with_suffix(".bin").is_file()):
                raise ConfigError(f"cost file {fp} does not exist")
            f = load_field(grid, fp)
            if f.region != "outer":
                raise ConfigError("cost coefficient files must be outer fields")
            coeffs.append(np.real(f.values))
        cost = RunningCost(grid, tuple(coeffs), a1, spec.get("name", "from-file"))
    else:
        cost = make_running_cost(grid, spec.get("name", "z-1"), spec.get("order"), a1)
    by_order: dict = {}
    for bump in spec.get("bumps", []):
        by_order.setdefault(int(bump.get("order", 1)), []).append(bump)
    perturb = spec.get("perturb")
    for order in sorted(by_order):
        fk = cost.coefficient(order).copy()
        for bump in by_order[order]:
            fk = fk + _window_bump(grid, bump)
        cost = cost.with_coefficient(order, fk)
    if perturb:
        f1 = cost.coefficient(1) + float(
            perturb.get("amplitude", 0.1)
        ) * band_limited_direction(
            grid, int(perturb.get("seed", 0)), int(perturb.get("kmax", 2))
        )
        cost = cost.with_coefficient(1, f1)
    return cost


def _terminal_from_spec(grid: Grid, spec) -> TerminalCost | None:
    if spec is None:
        return None
    if not isinstance(spec, dict):
        raise ConfigError("terminal cost spec must be an object")
    return TerminalCost(
        grid,
        psi=spec.get("psi", "linear"),
        params=spec.get("params", {}),
        radius=spec.get("radius"),
    )


def _costs_from_config(cfg: ExperimentConfig, role: str):
    costs = cfg.doc.get("costs", {})
    key = f"running_{role}"
    spec = costs.get(key, costs.get("running") if role == "true" else None)
    if spec is None:
        raise ConfigError(f"config needs costs.{key}")
    running = _running_from_spec(cfg.grid, spec)
    terminal = _terminal_from_spec(cfg.grid, costs.get("terminal"))
    return running, terminal


def _known_costs(cfg: ExperimentConfig):
    """The reference system when declared, the true one otherwise."""
    try:
        return _costs_from_config(cfg, "reference")
    except ConfigError:
        return _costs_from_config(cfg, "true")


def _profile_from_spec(grid: Grid, spec: dict, default_kind: str) -> np.ndarray:
    kind = spec.get("kind", default_kind)
    offset = float(spec.get("offset", 0.0))
    amplitude = float(spec.get("amplitude", 0.05))
    if kind == "flat":
        return offset + np.zeros(grid.shape("outer"))
    if kind == "band":
        return offset + band_limited_direction(
            grid, int(spec.get("seed", 0)), int(spec.get("kmax", 3)), amplitude
        )
    if kind == "plateau":
        return offset + plateau_direction(grid, amplitude)
    if kind == "cosine":
        k = tuple(float(v) for v in spec.get("k", (1.0,) + (0.0,) * (grid.dim - 1)))
        arg = np.zeros(grid.shape("outer"))
        for axis, ki in zip(grid.mesh("outer"), k):
            arg = arg + np.pi * ki * axis
        return offset + amplitude * np.cos(arg)
    raise ConfigError(f"unknown profile kind {kind!r}")


def _m0_from_config(cfg: ExperimentConfig) -> np.ndarray:
    spec = cfg.doc.get("m0", {"kind": "flat"})
    return 1.0 + _profile_from_spec(cfg.grid, dict(spec), "flat")


# ---------------------------------------------------------------------------
# persistence helpers
# ---------------------------------------------------------------------------

def _write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _cross_section_csv(path, grid: Grid, region: str, columns: dict) -> None:
    """Middle row of each spatial array against the trailing coordinate."""
    axes = grid.axes(region)
    names = list(columns)
    if grid.dim == 1:
        coord = axes[0]
        rows = [col for col in zip(coord, *(columns[n] for n in names))]
    else:
        mid = grid.shape(region)[0] // 2
        coord = axes[-1]
        rows = [
            col for col in zip(coord, *(columns[n][mid] for n in names))
        ]
    _write_csv(path, ["x"] + names, rows)


def write_manifest(cfg: ExperimentConfig, command: str, extra=None) -> str:
    """Checksum every file in the run directory and bind the run identity."""
    files = {}
    for p in sorted(cfg.out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(cfg.out).as_posix()] = hashlib.sha256(
                p.read_bytes()
            ).hexdigest()
    doc = {
        "format": "mfg-inverse-run-1",
        "command": command,
        "code_version": __version__,
        "config_sha256": cfg.config_hash,
        "grid": cfg.grid.hash_key(),
        "seed": cfg.seed,
        "files": files,
    }
    if extra:
        doc.update(extra)
    payload = json.dumps(doc, indent=2, sort_keys=True)
    (cfg.out / "manifest.json").write_text(payload)
    return hashlib.sha256(payload.encode()).hexdigest()


def _samples_csv(path, samples) -> None:
    rows = []
    for s in samples:
        k = s.meta.get("k_index", ("", ""))
        rows.append([
            k[0], k[1], f"{s.tau:.17g}",
            f"{s.value.real:.17g}", f"{s.value.imag:.17g}", f"{s.lam:.17g}",
        ])
    _write_csv(path, ["k1", "k2", "tau", "re", "im", "lam"], rows)


# ---------------------------------------------------------------------------
# probe plans from config
# ---------------------------------------------------------------------------

def _unit(v) -> tuple:
    arr = np.asarray(v, dtype=np.float64)
    return tuple(float(x) for x in arr / np.linalg.norm(arr))


def _plan_from_config(grid: Grid, pcfg: dict) -> list:
    lam = float(pcfg.get("lam", 3.0))
    tau = float(pcfg.get("tau", 0.8))
    band = int(pcfg.get("band", 1))
    entries = pcfg.get("entries")
    if entries is None:
        return probe_plan(grid, lam=lam, tau=tau, band=band)
    k_base = [2.0 * np.pi / (hi - lo) for lo, hi in grid.inner_extent]
    plan = []
    for e in entries:
        k = tuple(int(v) for v in e.get("k", (0, 0)))
        taus = [float(v) for v in e.get("tau", (0.0, 0.0))]
        lam_e = float(e.get("lam", lam))
        if all(v == 0 for v in k):
            eta_plus, eta_minus = (0.0, 1.0), (0.0, -1.0)
            xi = (1.0, 0.0)
            scale = 0.5 * k_base[0]
        else:
            wvec = np.array([k_base[0] * k[0], k_base[1] * k[1]])
            eta_plus = eta_minus = _unit(wvec)
            xi = _unit((-wvec[1], wvec[0]))
            scale = 0.5 * float(np.linalg.norm(wvec))
        xi_plus = tuple(float(v) for v in e.get("xi_plus", e.get("xi", xi)))
        xi_minus = tuple(float(v) for v in e.get("xi_minus", e.get("xi", xi)))
        plan.append(ProbePlanEntry(
            plus=CGOParams(lam=lam_e, xi=xi_plus, eta=eta_plus, tau=taus[0],
                           sign=1, freq_scale=scale),
            minus=CGOParams(lam=lam_e, xi=xi_minus, eta=eta_minus, tau=taus[1],
                            sign=-1, freq_scale=scale),
            k_index=k,
        ))
    return plan


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_forward(cfg: ExperimentConfig) -> int:
    running, terminal = _costs_from_config(cfg, "true")
    if terminal is None:
        terminal = TerminalCost(cfg.grid, "linear", {})
    m0 = _m0_from_config(cfg)
    opts = cfg.doc.get("solver", {})
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        sol = solve_mfg(
            cfg.grid, running, terminal, m0,
            theta=float(opts.get("theta", 0.5)),
            tol=float(opts.get("tol", 1e-11)),
            max_sweeps=int(opts.get("max_sweeps", 200)),
        )
    except SolverError as exc:
        _write_csv(cfg.out / "residual_history.csv", ["sweep", "residual"],
                   [(i, f"{r:.17g}") for i, r in enumerate(exc.history)])
        write_manifest(cfg, "forward", {"converged": False})
        raise
    save_field(sol.u, cfg.out / "u")
    save_field(sol.m, cfg.out / "m")
    data = measure(sol)
    save_measurements(data, cfg.out / "measurements",
                      extra_manifest={"seed": cfg.seed,
                                      "config_sha256": cfg.config_hash})
    _write_csv(cfg.out / "residual_history.csv", ["sweep", "residual"],
               [(i, f"{r:.17g}") for i, r in enumerate(sol.residual_history)])
    _write_csv(cfg.out / "mass_history.csv", ["level", "mass"],
               [(n, f"{v:.17g}") for n, v in enumerate(data.mass_history)])
    _cross_section_csv(cfg.out / "u_at0_profile.csv", cfg.grid, "inner",
                       {"u_at0": data.u_at0.values})
    write_manifest(cfg, "forward", {
        "converged": True,
        "sweeps": sol.sweeps,
        "row_residual": sol.row_residual,
    })
    return 0


def cmd_linearize(cfg: ExperimentConfig) -> int:
    running, terminal = _costs_from_config(cfg, "true")
    if terminal is None:
        terminal = TerminalCost(cfg.grid, "linear", {})
    spec = cfg.doc.get("direction")
    if spec is None:
        raise ConfigError("linearize needs a direction section")
    direction = _profile_from_spec(cfg.grid, dict(spec), "band")
    order = int(cfg.doc.get("linearize", {}).get("order", 1))
    tol = float(cfg.doc.get("solver", {}).get("tol", 1e-10))
    if order == 1:
        pair = solve_linearized_order1(cfg.grid, running, terminal, direction,
                                       tol=tol)
    else:
        pair = solve_linearized_order_n(cfg.grid, running, terminal,
                                        [direction] * order, tol=tol)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_field(pair.u, cfg.out / f"u{order}")
    save_field(pair.m, cfg.out / f"m{order}")
    _cross_section_csv(cfg.out / "final_density_profile.csv", cfg.grid,
                       pair.m.region,
                       {f"m{order}_at_T": np.real(pair.m.values[-1])})
    write_manifest(cfg, "linearize", {
        "order": order,
        "residual": pair.residual,
    })
    return 0


def cmd_probe(cfg: ExperimentConfig) -> int:
    running_true, terminal = _costs_from_config(cfg, "true")
    running_ref, _ = _costs_from_config(cfg, "reference")
    pcfg = cfg.doc.get("probe", {})
    plan = _plan_from_config(cfg.grid, pcfg)
    samples = collect_order1_samples(
        cfg.grid, running_true, running_ref, terminal, plan,
        tol=float(pcfg.get("tol", 1e-9)), workers=cfg.workers,
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    _samples_csv(cfg.out / "samples.csv", samples)
    write_manifest(cfg, "probe", {"n_samples": len(samples)})
    return 0


def cmd_reconstruct(cfg: ExperimentConfig) -> int:
    costs = cfg.doc.get("costs", {})
    if "measurements" in cfg.doc:
        load_measurements(cfg.grid, cfg.doc["measurements"])
        if "running_true" not in costs:
            raise CapabilityError(
                "stored measurements cannot drive new probe pairs; "
                "provide a synthetic truth cost"
            )
    running_true, terminal = _costs_from_config(cfg, "true")
    running_ref, _ = _costs_from_config(cfg, "reference")
    rcfg = cfg.doc.get("reconstruction", {})
    pcfg = cfg.doc.get("probe", {})
    orders = [int(k) for k in rcfg.get("orders", [1])]
    if sorted(orders) != list(range(1, len(orders) + 1)):
        raise ConfigError("reconstruction orders must be 1..K without gaps")
    tol_probe = float(pcfg.get("tol", 1e-9))
    tol_data = float(rcfg.get("tol_data", 1e-8))
    band = int(pcfg.get("band", 1))

    plan = _plan_from_config(cfg.grid, pcfg)
    samples = collect_order1_samples(
        cfg.grid, running_true, running_ref, terminal, plan,
        tol=tol_probe, workers=cfg.workers,
    )
    results = [reconstruct_order1(samples, running_ref, band=band,
                                  tol_data=tol_data)]
    all_samples = [samples]
    if len(orders) >= 2:
        dspec = cfg.doc.get("direction", {"kind": "plateau", "offset": 1.0,
                                          "amplitude": 0.5})
        direction = _profile_from_spec(cfg.grid, dict(dspec), "plateau")
        lower = [results[0]]
        for k in orders[1:]:
            samples_k, weight = collect_order2_samples(
                cfg.grid, running_true, running_ref, terminal, direction,
                tol=tol_probe, workers=cfg.workers,
            ) if k == 2 else (None, None)
            if samples_k is None:
                raise CapabilityError(
                    f"order {k} recovery is not wired into the front end"
                )
            results.append(reconstruct_order_k(
                k, samples_k, running_ref, lower, weight, band=band,
                tol_data=tol_data,
            ))
            all_samples.append(samples_k)
            lower.append(results[-1])

    cfg.out.mkdir(parents=True, exist_ok=True)
    summary = []
    for result, s in zip(results, all_samples):
        order_dir = cfg.out / f"order{result.order}"
        write_report(result, s, order_dir)
        truth = running_true.coefficient(result.order)
        metrics = score_against(result, truth)
        _cross_section_csv(order_dir / "cross_section.csv", cfg.grid, "inner", {
            "truth": truth[cfg.grid.inner_slices],
            "recovered": result.field.values,
        })
        summary.append([
            result.order,
            f"{metrics['rel_l2']:.17g}",
            f"{metrics['abs_l2']:.17g}",
            f"{metrics['rel_l2_projected']:.17g}",
            f"{result.floor:.17g}",
            f"{result.residual:.17g}",
            f"{result.ridge_weight:.17g}",
            len(s),
        ])
    _write_csv(cfg.out / "summary.csv",
               ["order", "rel_l2", "abs_l2", "rel_l2_projected", "floor",
                "residual", "ridge_weight", "n_samples"],
               summary)
    write_manifest(cfg, "reconstruct", {"orders": [r.order for r in results]})
    return 0


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------

def _suite_stationary(cfg: ExperimentConfig, vcfg: dict) -> dict:
    grid = cfg.grid
    b_value = float(vcfg.get("B", 1.0))
    running = make_running_cost(grid, "z-1")
    terminal = TerminalCost(grid, "linear", {"B": b_value})
    sol = solve_mfg(grid, running, terminal, np.ones(grid.shape("outer")),
                    tol=float(vcfg.get("tol", 1e-11)))
    du = float(np.abs(sol.u.values - b_value).max())
    dm = float(np.abs(sol.m.values - 1.0).max())
    tol = float(vcfg.get("stationary_tol", 1e-8))
    return {
        "suite": "stationary",
        "passed": bool(du <= tol and dm <= tol),
        "detail": f"max|u-B| {du:.3e}, max|m-1| {dm:.3e}, tolerance {tol:.1e}",
        "sweeps": sol.sweeps,
    }


def _suite_mass(cfg: ExperimentConfig, vcfg: dict) -> dict:
    grid = cfg.grid
    running, terminal = _costs_from_config(cfg, "true")
    if terminal is None:
        terminal = TerminalCost(grid, "linear", {})
    count = int(vcfg.get("samples", 10))
    amplitude = float(vcfg.get("mass_amplitude", 0.05))
    tol = float(vcfg.get("mass_tol", 1e-10))
    w = spatial_weights(grid, "outer")
    worst = 0.0
    for i in range(count):
        m0 = 1.0 + band_limited_direction(grid, cfg.seed + i, 3, amplitude)
        sol = solve_mfg(grid, running, terminal, m0)
        mass = np.array([float(np.sum(level * w)) for level in sol.m.values])
        worst = max(worst, float(np.abs(mass - 1.0).max()))
    return {
        "suite": "mass",
        "passed": bool(worst <= tol),
        "detail": f"max|mass-1| {worst:.3e} over {count} runs, tolerance {tol:.1e}",
    }


def _estimate_suite(name, report, out_dir) -> dict:
    write_estimate_report(report, out_dir)
    return {
        "suite": name,
        "passed": bool(report.passed),
        "detail": (
            f"min ratio {report.min_ratio:.3e}, fitted C {report.fitted_c:.3e}, "
            f"threshold {report.threshold:g}"
        ),
    }


def _suite_energy(cfg: ExperimentConfig, vcfg: dict) -> dict:
    grid = cfg.grid
    running, terminal = _known_costs(cfg)
    if terminal is None:
        terminal = _terminal_from_spec(grid, {"psi": "quadratic"})
    gspec = dict(cfg.doc["grid"])
    gspec["nt"] = 2 * grid.nt - 1
    fine_grid = _grid_from_config({"grid": gspec})
    fine_running = RunningCost(
        fine_grid, running.coeffs, running.a1, running.name
    )
    fine_terminal = TerminalCost(
        fine_grid, terminal.psi, terminal.params, terminal.radius
    )
    f = draw_initial_bumps(grid, cfg.seed, 1)[0]

    def defect(g, rc, tc):
        n_ring = int(ring_mask(g).sum())
        data = InnerData(gamma_u=np.zeros((g.nt, n_ring)),
                         gamma_m=np.zeros((g.nt, n_ring)))
        pair = solve_linearized_order1(g, rc, tc, f, bc=BC_DATA,
                                       inner_data=data, tol=1e-12)
        return check_energy_identity(rc, pair)

    coarse = defect(grid, running, terminal)
    fine = defect(fine_grid, fine_running, fine_terminal)
    ratio = abs(coarse) / abs(fine) if fine != 0.0 else float("inf")
    lo, hi = (float(v) for v in vcfg.get("energy_ratio_range", (1.5, 2.7)))
    return {
        "suite": "energy",
        "passed": bool(lo <= ratio <= hi),
        "detail": (
            f"defect {coarse:.3e} -> {fine:.3e} under dt/2, ratio {ratio:.3f}, "
            f"expected within [{lo:g}, {hi:g}]"
        ),
    }


_SUITES = ("stationary", "mass", "carleman_plus", "carleman_minus",
           "apriori_forward", "apriori_adjoint", "energy")


def cmd_verify(cfg: ExperimentConfig) -> int:
    vcfg = cfg.doc.get("verify", {})
    suites = vcfg.get("suites", list(_SUITES))
    if not suites:
        raise ConfigError("verify requires a nonempty suite list")
    unknown = [s for s in suites if s not in _SUITES]
    if unknown:
        raise ConfigError(f"unknown verify suites {unknown}; pick from {_SUITES}")
    grid = cfg.grid
    lams = tuple(float(v) for v in vcfg.get("lams", (2.0, 4.0, 8.0)))
    count = int(vcfg.get("samples", 20))
    cfg.out.mkdir(parents=True, exist_ok=True)

    results = []
    for name in suites:
        if name == "stationary":
            results.append(_suite_stationary(cfg, vcfg))
        elif name == "mass":
            results.append(_suite_mass(cfg, vcfg))
        elif name == "carleman_plus":
            report = check_carleman_plus(grid, lams, seed=cfg.seed, count=count)
            results.append(_estimate_suite(name, report, cfg.out / name))
        elif name == "carleman_minus":
            report = check_carleman_minus(grid, lams, seed=cfg.seed, count=count)
            results.append(_estimate_suite(name, report, cfg.out / name))
        elif name == "apriori_forward":
            running, terminal = _known_costs(cfg)
            report = check_apriori_forward(grid, running, terminal,
                                           seed=cfg.seed, count=count)
            results.append(_estimate_suite(name, report, cfg.out / name))
        elif name == "apriori_adjoint":
            running, _ = _known_costs(cfg)
            report = check_apriori_adjoint(grid, running, seed=cfg.seed + 1,
                                           count=count)
            results.append(_estimate_suite(name, report, cfg.out / name))
        elif name == "energy":
            results.append(_suite_energy(cfg, vcfg))

    (cfg.out / "summary.json").write_text(
        json.dumps({"results": results}, indent=2, sort_keys=True)
    )
    write_manifest(cfg, "verify", {
        "passed": [r["suite"] for r in results if r["passed"]],
        "failed": [r["suite"] for r in results if not r["passed"]],
    })
    failing = [r for r in results if not r["passed"]]
    if failing:
        raise VerificationError(
            f"suite {failing[0]['suite']} failed: {failing[0]['detail']}"
        )
    return 0


def cmd_catalog(out=None) -> int:
    doc = {
        "running_costs": catalog(),
        "terminal_profiles": sorted(_psi_registry()),
        "max_order": MAX_ORDER,
        "dimensions": [1, 2],
        "probe_bands": [1],
    }
    payload = json.dumps(doc, indent=2, sort_keys=True)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "catalog.json").write_text(payload)
    else:
        print(payload)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfg-inverse",
                     description="Simulation, probing, recovery and "
                                 "certification for the coupled parabolic "
                                 "system on a windowed box.")
    sub = parser.add_subparsers(dest="command")
    for name in ("forward", "linearize", "probe", "reconstruct", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment JSON document")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
    c = sub.add_parser("catalog")
    c.add_argument("--out", default=None)
    return parser


_COMMANDS = {
    "forward": cmd_forward,
    "linearize": cmd_linearize,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a subcommand is required; see --help")
        if args.command == "catalog":
            return cmd_catalog(args.out)
        cfg = load_config(args.config, seed=args.seed, out=args.out,
                          workers=args.workers)
        return _COMMANDS[args.command](cfg)
    except MfgInverseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
