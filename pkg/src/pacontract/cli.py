"""Command-line entry point: ``pacontract {solve,simulate,verify,bench}``.

Exit codes: 0 ok, 2 configuration or validation error, 3 solver failure,
4 incentive-compatibility verdict failed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .contract import (
    Deviation,
    default_deviations,
    export_xi_csv,
    synthesize_contract,
    verify_incentive_compatibility,
    verify_participation,
)
from .errors import DimensionError, ModelError, PAContractError
from .hjb import export_policy_csv, extract_policy, fbsde_crosscheck, solve
from .sim import ConstantPolicy, estimate_expectation, export_paths_csv, girsanov_density, simulate_paths

__all__ = ["main", "EXIT_OK", "EXIT_CONFIG", "EXIT_SOLVER", "EXIT_VERDICT"]

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERDICT = 0, 2, 3, 4


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.section("output")["directory"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _wants(cfg: RunConfig, fmt: str) -> bool:
    return fmt in cfg.section("output")["formats"]


def _solve(cfg: RunConfig, model, out: Path):
    grid = cfg.space_grid(model)
    tgrid = cfg.time_grid(model)
    surface = solve(
        model, grid, tgrid, cfg.solver_settings(),
        cache_dir=out / "cache",
        require_interior=bool(cfg.section("solver")["require_interior"]),
    )
    return surface


def _header(cfg: RunConfig, command: str, model) -> dict:
    return {"command": command, "config_hash": cfg.hash, "model": model.name, "seed": cfg.seed}


def cmd_solve(cfg: RunConfig) -> int:
    model = cfg.model()
    out = _out_dir(cfg)
    t0 = time.perf_counter()
    surface = _solve(cfg, model, out)
    policy = extract_policy(surface)
    wall = time.perf_counter() - t0
    if _wants(cfg, "csv"):
        surface.to_csv(out / "surface.csv")
        export_policy_csv(policy, out / "policy.csv")
    summary = _header(cfg, "solve", model)
    summary.update(
        v0=surface.v0,
        principal_value=surface.principal_value,
        x0=list(model.x0),
        reservation_ce=model.reservation_ce().tolist(),
        grid={"lo": surface.grid.lo, "hi": surface.grid.hi, "nodes": surface.grid.n,
              "time_steps": surface.n_steps},
        diagnostics=surface.meta,
        policy_quality=policy.quality,
        wall_time=wall,
    )
    _write_json(out / "summary.json", summary)
    print(f"v(0, X0) = {surface.v0:.6g}, V_P = {surface.principal_value:.6g} ({wall:.2f} s)")
    return EXIT_OK


def _sim_policy(cfg: RunConfig, model, out: Path):
    choice = cfg.section("experiment")["policy"]
    if choice == "equilibrium":
        return extract_policy(_solve(cfg, model, out)).actions
    if choice == "zero":
        return ConstantPolicy(model.actions.clip(np.zeros(model.n_actions)))
    if isinstance(choice, list):
        a = np.asarray(choice, dtype=float).reshape(-1)
        if a.size != model.n_actions or not bool(model.actions.contains(a)):
            raise ConfigError(f"experiment.policy: constant action {a.tolist()} is not in the action space")
        return ConstantPolicy(a)
    raise ConfigError("experiment.policy must be 'equilibrium', 'zero' or a list of actions")


def cmd_simulate(cfg: RunConfig) -> int:
    model = cfg.model()
    out = _out_dir(cfg)
    exp = cfg.section("experiment")
    policy = _sim_policy(cfg, model, out)
    grid = cfg.sim_grid(model)
    n, seed = int(exp["n_paths"]), cfg.seed
    bundle = simulate_paths(model, policy, grid, n, seed, workers=cfg.workers)
    if _wants(cfg, "csv"):
        export_paths_csv(bundle, out / "paths.csv")
    est = {"drifted": {}, "reweighted": {}}
    for m in range(model.dim):
        est["drifted"][f"x{m}"] = estimate_expectation(bundle, bundle.X[:, -1, m])
    if exp["reweight"]:
        ref = simulate_paths(model, None, grid, n, seed, workers=cfg.workers)
        dens = girsanov_density(model, ref, policy)
        est["density_mean"] = estimate_expectation(ref, dens[:, -1])
        for m in range(model.dim):
            est["reweighted"][f"x{m}"] = estimate_expectation(ref, ref.X[:, -1, m], reweight=dens)
    summary = _header(cfg, "simulate", model)
    summary.update(n_paths=n, n_steps=grid.n_steps, estimates=est)
    _write_json(out / "estimates.json", summary)
    for key, (mean, se) in est["drifted"].items():
        print(f"E[{key}_T] = {mean:.6g} +- {se:.2g}")
    return EXIT_OK


def _deviations(cfg: RunConfig, model, policy):
    dev = cfg.section("experiment")["deviations"]
    if dev == "default":
        return default_deviations(model, policy)
    if not dev:
        raise ConfigError("experiment.deviations is empty: nothing to verify")
    return [Deviation(int(d.get("agent", 0)), d["action"], d.get("description", "")) for d in dev]


def cmd_verify(cfg: RunConfig) -> int:
    model = cfg.model()
    out = _out_dir(cfg)
    exp = cfg.section("experiment")
    surface = _solve(cfg, model, out)
    policy = extract_policy(surface)
    deviations = _deviations(cfg, model, policy)
    if float(exp["z_scale"]) != 1.0:
        policy = policy.corrupted(float(exp["z_scale"]))
    contract = synthesize_contract(
        model, policy, exp["y0"], n_paths=int(exp["n_paths"]), n_steps=int(exp["n_steps"]),
        seed=cfg.seed, workers=cfg.workers,
    )
    try:
        report = verify_incentive_compatibility(model, contract, deviations, workers=cfg.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    flags, margins = verify_participation(contract)
    if _wants(cfg, "csv"):
        report.to_csv(out / "deviations.csv")
        export_xi_csv(contract, out / "xi.csv")
    summary = _header(cfg, "verify", model)
    summary.update(
        verdict="pass" if report.passed else "fail",
        report=report.to_dict(),
        contract=contract.to_dict(),
        participation={"ok": flags.tolist(), "margin": margins.tolist()},
    )
    _write_json(out / "report.json", summary)
    worst = report.worst()
    print(f"verdict: {'pass' if report.passed else 'fail'}; largest gain {worst.gain:.3g} "
          f"+- {worst.gain_stderr:.2g} ({worst.description})")
    return EXIT_OK if report.passed else EXIT_VERDICT


def cmd_bench(cfg: RunConfig) -> int:
    model = cfg.model()
    out = _out_dir(cfg)
    exp = cfg.section("experiment")
    t0 = time.perf_counter()
    surface = _solve(cfg, model, out)
    solve_time = time.perf_counter() - t0
    probes = exp["probes"] if exp["probes"] is not None else [list(model.x0)]
    rows = []
    for x in probes:
        x = np.asarray(x, dtype=float).reshape(-1)
        t1 = time.perf_counter()
        cc = fbsde_crosscheck(
            model, 0.0, x, n_paths=int(exp["n_paths"]), n_steps=int(exp["n_steps"]), seed=cfg.seed,
            degree=int(cfg.section("solver")["basis_degree"]), settings=surface.settings.hamiltonian,
        )
        v = surface.value_at(0.0, x)
        rows.append({
            "x": x.tolist(), "pide": float(v), "fbsde": cc.value, "stderr": cc.stderr,
            "gap": float(cc.value - v), "iterations": cc.iterations, "seconds": time.perf_counter() - t1,
        })
    summary = _header(cfg, "bench", model)
    summary.update(
        solve_seconds=solve_time, v0=surface.v0, principal_value=surface.principal_value,
        diagnostics=surface.meta, crosscheck=rows,
    )
    _write_json(out / "bench.json", summary)
    print(f"solve {solve_time:.2f} s, V_P = {surface.principal_value:.6g}")
    for r in rows:
        print(f"x = {r['x']}: PIDE {r['pide']:.5g}, FBSDE {r['fbsde']:.5g} +- {r['stderr']:.2g}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacontract", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", help="output directory (overrides output.directory)")
    parser.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    parser.add_argument("--seed", type=int, help="overrides experiment.seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, workers=args.workers, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ModelError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PAContractError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
