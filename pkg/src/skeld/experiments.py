"""Experiment drivers: one function per scenario kind, each writing into a run directory."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import grid as G
from . import io
from .errors import ConfigError, InfeasibleProblem, ResolutionError
from .nonlinearity import check_assumptions
from .rate import (OptimizerConfig, gamma_monotone, gamma_sweep, minimize_action, minimize_event_action,
                   recover_minimal_control, write_gamma_csv)
from .skeleton import entropy_report, solve_skeleton
from .spde import (L1DeviationEvent, NoiseConfig, deterministic_endpoint, estimate_event_probability,
                   simulate_ensemble, simulate_spde)


def write_json(path, obj):
    with open(path, "w", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _optimizer(sc):
    o = sc["optimizer"]
    return OptimizerConfig(mu=tuple(float(m) for m in o["mu"]), max_iter=o["max_iter"], gtol=o["gtol"],
                           ftol=o["ftol"], memory=o["memory"], max_linesearch=o["max_linesearch"],
                           feasibility_tol=o["feasibility_tol"])


def _trajectory_summary(traj):
    mass0 = traj.mass[0]
    drift = float(np.max(np.abs(traj.mass - mass0)))
    rep = entropy_report(traj)
    return {"entropy": rep, "entropy_margin_ok": rep["margin"] >= -0.05 * rep["rhs"] - 1e-6,
            "mass0": float(mass0), "mass_drift": drift,
            "mass_drift_relative": drift / mass0 if mass0 else drift,
            "min_density": float(min(np.min(f) for f in traj.fields)),
            "steps": int(len(traj.times) - 1), "T": traj.T}


def run_solve_skeleton(sc, out, workers=1):
    spec, grid, cfg = sc.nonlinearity(), sc.grid(), sc.solver_config()
    traj = solve_skeleton(spec, grid, sc.initial(), sc.build_control(), sc["T"], cfg)
    files = ["diagnostics.csv", "final_field.csv", "results.json"]
    io.write_diagnostics_csv(out / "diagnostics.csv", traj)
    io.write_field_csv(out / "final_field.csv", traj.final, grid, traj.T)
    stride = sc["output"]["snapshot_stride"]
    if stride > 0:
        for p in io.write_snapshots(out / "fields", traj, stride):
            files.append(str(p.relative_to(out)))
    write_json(out / "results.json", _trajectory_summary(traj))
    return files


def run_simulate_spde(sc, out, workers=1):
    spec, grid, cfg = sc.nonlinearity(), sc.grid(), sc.solver_config()
    nz = sc["noise"]
    eps_list = nz["epsilons"] or [nz["epsilon"]]
    rho0, g, T = sc.initial(), sc.build_control(), sc["T"]
    first = simulate_spde(spec, grid, rho0, NoiseConfig(nz["K"], eps_list[0], nz["eta"], sc["seed"], 0), g, T, cfg)
    io.write_diagnostics_csv(out / "diagnostics_replica0.csv", first.trajectory)
    ref = deterministic_endpoint(spec, grid, rho0, nz["K"], nz["eta"], g, T, cfg).final
    rows, stats = [], []
    m0 = G.mass(rho0, grid)
    for eps in eps_list:
        finals, rejected, _ = simulate_ensemble(spec, grid, rho0, eps, nz["K"], nz["eta"], sc["seed"],
                                                nz["replicas"], g, T, cfg, workers)
        dev = np.abs(finals - ref[None]).reshape(len(finals), -1).sum(axis=1) * grid.cell_volume
        mass_err = np.abs(finals.reshape(len(finals), -1).sum(axis=1) * grid.cell_volume - m0)
        for r in range(len(finals)):
            rows.append((eps, r, None if rejected[r] else dev[r], None if rejected[r] else mass_err[r],
                         bool(rejected[r])))
        ok = ~rejected
        stats.append({"epsilon": eps, "mean_l1_deviation": float(dev[ok].mean()) if ok.any() else None,
                      "max_mass_error": float(mass_err[ok].max()) if ok.any() else None,
                      "rejected": int(rejected.sum()), "replicas": int(len(finals)),
                      "eps_K3": eps * nz["K"] ** 3})
    with open(out / "paths.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "replica", "l1_deviation", "mass_error", "rejected"])
        for eps, r, dv, me, rej in rows:
            w.writerow([repr(float(eps)), r, "" if dv is None else repr(float(dv)),
                        "" if me is None else repr(float(me)), int(rej)])
    devs = [s["mean_l1_deviation"] for s in stats]
    write_json(out / "results.json", {"ensembles": stats, "replica0_digest": first.digest,
                                      "replica0": _trajectory_summary(first.trajectory),
                                      "deviation_decreasing_in_eps": _decreasing_with(eps_list, devs)})
    return ["diagnostics_replica0.csv", "paths.csv", "results.json"]


def _decreasing_with(eps_list, values):
    pairs = sorted(zip(eps_list, values), reverse=True)
    vals = [v for _, v in pairs]
    if any(v is None for v in vals):
        return False
    return all(b < a for a, b in zip(vals, vals[1:]))


def run_evaluate_rate(sc, out, workers=1):
    spec, grid = sc.nonlinearity(), sc.grid()
    cfg = sc.solver_config()
    cfg = type(cfg)(**{**cfg.__dict__, "snapshot_stride": 1})
    g = sc.build_control()
    traj = solve_skeleton(spec, grid, sc.initial(), g, sc["T"], cfg)
    ev = recover_minimal_control(spec, traj)
    io.write_diagnostics_csv(out / "diagnostics.csv", traj)
    vals = ev.control.values
    per = np.sum(vals ** 2, axis=tuple(range(1, vals.ndim))) * grid.cell_volume
    io.write_xy_csv(out / "recovered_energy_density.csv", traj.times[:-1], 0.5 * per, ("t", "half_norm_sq"))
    res = ev.to_dict()
    res["generating_energy"] = g.energy() if g is not None else 0.0
    write_json(out / "rate.json", res)
    return ["diagnostics.csv", "recovered_energy_density.csv", "rate.json"]


def _target(sc, spec, grid, rho0, cfg):
    t = sc["target"]
    T = sc["T"]
    if t["kind"] in ("deterministic", "perturbed"):
        target = solve_skeleton(spec, grid, rho0, None, T, cfg).final
        if t["kind"] == "perturbed":
            bump = np.prod([np.sin(2 * np.pi * t["mode"] * x) for x in grid.centers], axis=0)
            target = target + t["amplitude"] * bump
        return target
    if t["kind"] == "profile":
        return sc.target_profile()
    if t["path"] is None:
        raise ConfigError("target.path", "file target needs a path")
    return io.read_field_csv(sc._resolve(t["path"]), grid)[0]


def run_minimize_action(sc, out, workers=1):
    spec, grid, cfg = sc.nonlinearity(), sc.grid(), sc.solver_config()
    rho0 = sc.initial()
    target = _target(sc, spec, grid, rho0, cfg)
    if np.any(target < -1e-12):
        raise InfeasibleProblem("target density has negative cells")
    o = sc["optimizer"]
    ev = minimize_action(spec, grid, rho0, target, _optimizer(sc), K=o["K"], eta=o["eta"], T=sc["T"],
                         n_steps=o["n_steps"], config=cfg)
    files = ["rate.json", "objective_history.csv"]
    write_json(out / "rate.json", ev.to_dict())
    with open(out / "objective_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "iteration", "objective"])
        for s, hist in enumerate(ev.history):
            for i, f in enumerate(hist):
                w.writerow([s, i, repr(float(f))])
    if ev.control.is_spectral:
        io.write_spectral_control_csv(out / "control_spectral.csv", ev.control)
        files.append("control_spectral.csv")
    return files


def run_gamma_sweep(sc, out, workers=1):
    spec, grid, cfg = sc.nonlinearity(), sc.grid(), sc.solver_config()
    g = sc.build_control()
    if g is None:
        g = G.ControlField.zero(grid, sc["T"])
    rows = gamma_sweep(spec, grid, sc.initial(), g, sc["sweep"]["K_list"], cfg)
    write_gamma_csv(rows, out / "gamma_sweep.csv")
    dists = [r.l1_dist for r in rows]
    write_json(out / "results.json", {
        "monotone_J": gamma_monotone(rows),
        "distance_decreasing": all(b < a for a, b in zip(dists, dists[1:])),
        "final_relative_gap": abs(rows[-1].J_etaK - rows[-1].J_ref) / max(rows[-1].J_ref, 1e-300),
    })
    return ["gamma_sweep.csv", "results.json"]


def run_check_assumptions(sc, out, workers=1):
    a = sc["assumptions"]
    rep = check_assumptions(sc.nonlinearity(), M=a["M"], delta_grid=tuple(a["delta_grid"]),
                            sample_count=a["sample_count"])
    with open(out / "assumptions.json", "w", newline="\n") as fh:
        fh.write(rep.to_json())
        fh.write("\n")
    return ["assumptions.json"]


def run_ldp_mc(sc, out, workers=1):
    spec, grid, cfg = sc.nonlinearity(), sc.grid(), sc.solver_config()
    nz, ld, o = sc["noise"], sc["ldp"], sc["optimizer"]
    rho0, g, T = sc.initial(), sc.build_control(), sc["T"]
    ref = deterministic_endpoint(spec, grid, rho0, nz["K"], nz["eta"], g, T, cfg).final
    event = L1DeviationEvent(ref, ld["delta"])
    est = estimate_event_probability(event, ld["epsilons"], ld["replicas"], ld["common_random_numbers"],
                                     spec=spec, grid=grid, rho0=rho0, K=nz["K"], eta=nz["eta"], seed=sc["seed"],
                                     T=T, g=g, config=cfg, workers=workers)
    est.write_csv(out / "ensemble.csv")
    n_steps = max(1, int(round(T / cfg.dt)))
    action = minimize_event_action(spec, grid, rho0, ref, ld["delta"], T,
                                   OptimizerConfig(mu=(1e3, 1e4, 1e5), max_iter=o["max_iter"], gtol=o["gtol"],
                                                   ftol=o["ftol"], memory=o["memory"]),
                                   K=nz["K"], eta=nz["eta"], n_steps=n_steps, config=cfg, starts=o["starts"],
                                   seed=sc["seed"])
    summary = est.summary()
    summary["action"] = action.to_dict()
    rates = [r.rate for r in sorted(est.rows, key=lambda r: r.epsilon)]
    summary["stabilized"] = (len(rates) >= 2 and None not in rates[:2]
                             and abs(rates[0] - rates[1]) <= 0.5 * max(rates[0], rates[1]))
    best = rates[0] if rates and rates[0] is not None else None
    summary["within_factor_2"] = best is not None and 0.5 <= best / action.value <= 2.0
    write_json(out / "ldp_summary.json", summary)
    return ["ensemble.csv", "ldp_summary.json"]


def _crit_job(args):
    m, d, p, q, r, etas, n = args
    E, slope, ratios = G.criticality_fit(m, d, p, q, r, etas, n)
    return m, d, p, q, r, E, slope, ratios


def run_criticality_scan(sc, out, workers=1):
    c = sc["criticality"]
    jobs = [(float(m), int(d), float(p), float(q), float(r), tuple(c["etas"]), c["n"])
            for m in c["m_list"] for d in c["d_list"] for (p, q, r) in c["pqr"]]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_crit_job, jobs))
        else:
            results = [_crit_job(j) for j in jobs]
    except ResolutionError as exc:
        raise ConfigError("criticality.n", f"grid too coarse for the smallest zoom factor: {exc}") from None
    with open(out / "criticality.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "d", "p", "q", "r", "exponent", "fitted_slope"] + [f"ratio_eta_{e}" for e in c["etas"]])
        for m, d, p, q, r, E, slope, ratios in results:
            w.writerow([repr(m), d, repr(p), repr(q), repr(r), repr(E), repr(slope)] + [repr(float(x)) for x in ratios])
    write_json(out / "results.json", {"max_abs_error": max(abs(E - s) for *_, E, s, _ in results)})
    return ["criticality.csv", "results.json"]


DRIVERS = {
    "solve-skeleton": run_solve_skeleton,
    "simulate-spde": run_simulate_spde,
    "evaluate-rate": run_evaluate_rate,
    "minimize-action": run_minimize_action,
    "gamma-sweep": run_gamma_sweep,
    "check-assumptions": run_check_assumptions,
    "ldp-mc": run_ldp_mc,
    "criticality-scan": run_criticality_scan,
}


def run(sc, out, workers=1):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = DRIVERS[sc["experiment"]](sc, out, workers)
    manifest = {"experiment": sc["experiment"], "files": sorted(files), "scenario": sc.to_dict(),
                "format": "skeld-run-v1"}
    write_json(out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def build_report(run_dir):
    """Aggregate a finished run into ``summary.json`` plus two-column plot CSVs."""
    run_dir = Path(run_dir)
    manifest = _load_json(run_dir / "manifest.json")
    missing = [f for f in manifest["files"] if not (run_dir / f).exists()]
    if missing:
        raise FileNotFoundError(f"missing run artifacts: {', '.join(missing)}")
    kind = manifest["experiment"]
    summary = {"experiment": kind}
    plots = []
    if kind == "solve-skeleton":
        res = _load_json(run_dir / "results.json")
        diag = io.read_diagnostics_csv(run_dir / "diagnostics.csv")
        summary.update({"entropy_margin": res["entropy"]["margin"], "entropy_margin_ok": res["entropy_margin_ok"],
                        "mass_drift_relative": res["mass_drift_relative"],
                        "nonnegative": res["min_density"] >= -1e-12})
        io.write_xy_csv(run_dir / "plot_entropy.csv", diag["t"], diag["entropy"], ("t", "entropy"))
        io.write_xy_csv(run_dir / "plot_mass.csv", diag["t"], diag["mass"], ("t", "mass"))
        plots += ["plot_entropy.csv", "plot_mass.csv"]
    elif kind == "simulate-spde":
        res = _load_json(run_dir / "results.json")
        summary.update({"ensembles": res["ensembles"], "deviation_decreasing_in_eps": res["deviation_decreasing_in_eps"],
                        "mass_drift_relative": res["replica0"]["mass_drift_relative"]})
        ens = sorted(res["ensembles"], key=lambda e: e["epsilon"])
        io.write_xy_csv(run_dir / "plot_deviation.csv", [e["epsilon"] for e in ens],
                        [e["mean_l1_deviation"] if e["mean_l1_deviation"] is not None else math.nan for e in ens],
                        ("epsilon", "mean_l1_deviation"))
        plots.append("plot_deviation.csv")
    elif kind in ("evaluate-rate", "minimize-action"):
        res = _load_json(run_dir / "rate.json")
        summary.update({"J": res["J"], "feasible": res["feasible"], "residual": res["residual"]})
        if "generating_energy" in res:
            summary["generating_energy"] = res["generating_energy"]
    elif kind == "gamma-sweep":
        res = _load_json(run_dir / "results.json")
        with open(run_dir / "gamma_sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        summary.update(res)
        io.write_xy_csv(run_dir / "plot_J.csv", [int(r["K"]) for r in rows], [float(r["J_etaK"]) for r in rows],
                        ("K", "J_etaK"))
        io.write_xy_csv(run_dir / "plot_distance.csv", [int(r["K"]) for r in rows],
                        [float(r["l1_dist"]) for r in rows], ("K", "l1_dist"))
        plots += ["plot_J.csv", "plot_distance.csv"]
    elif kind == "check-assumptions":
        res = _load_json(run_dir / "assumptions.json")
        summary.update({"passed": res.get("passed"),
                        "failed_checks": [c["name"] for c in res.get("checks", []) if not c.get("passed")]})
    elif kind == "ldp-mc":
        res = _load_json(run_dir / "ldp_summary.json")
        rows = sorted(res["rows"], key=lambda r: r["epsilon"])
        summary.update({"table": [{k: r[k] for k in ("epsilon", "p_hat", "rate", "stderr")} for r in rows],
                        "action_J": res["action"]["J"], "stabilized": res["stabilized"],
                        "within_factor_2": res["within_factor_2"], "rejected_total": res["rejected_total"]})
        io.write_xy_csv(run_dir / "plot_rate.csv", [r["epsilon"] for r in rows],
                        [r["rate"] if r["rate"] is not None else math.nan for r in rows], ("epsilon", "rate"))
        plots.append("plot_rate.csv")
    elif kind == "criticality-scan":
        res = _load_json(run_dir / "results.json")
        summary.update(res)
    summary["plots"] = plots
    write_json(run_dir / "summary.json", summary)
    return summary
