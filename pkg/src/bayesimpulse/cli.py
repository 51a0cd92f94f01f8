"""Command-line entry point: ``bayesimpulse <command> --config run.cfg``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 artifact produced under a different model (hash mismatch).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .errors import ImpulseError
from .numerics import interpolate
from .oracle import compare_with_grid, exact_policy, exact_value, reachable_nodes
from .policy import extract_policy
from .sim import evaluate_mc, simulate, write_trajectories_csv
from .solver import backward_induction, certificate_passes, check_certificate, qvi_residuals
from .storage import export_field_csv, read_field, read_policy, write_field, write_policy

OUT_ENV = "BAYESIMPULSE_OUT"
EXIT_CONFIG, EXIT_NUMERIC, EXIT_HASH = 2, 3, 4


class HashMismatch(Exception):
    pass


def _out_dir(args, cfg) -> Path:
    d = args.out or cfg.output.directory or os.environ.get(OUT_ENV) or "out"
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load(args):
    cfg = cfgmod.load_config(args.config)
    spec, grids, z0, m0 = cfgmod.build_all(cfg, args.level)
    return cfg, spec, grids, z0, m0


def _solve(cfg, spec, grids, threads):
    return backward_induction(spec, grids, cfgmod.build_settings(cfg, threads))


def _point(z0, m0) -> dict:
    return {"t": z0.t, "x": list(z0.x), "prior": m0.weights.tolist()}


def cmd_solve(args) -> int:
    cfg, spec, grids, z0, m0 = _load(args)
    out = _out_dir(args, cfg)
    h = cfgmod.model_hash(cfg)
    settings = cfgmod.build_settings(cfg, args.threads)
    rep = backward_induction(spec, grids, settings)
    rep.field.check_finite()
    res = qvi_residuals(rep.field, spec, settings, cfg.solver.boundary_margin)
    value = interpolate(rep.field, spec, z0, m0)
    write_field(out / "value_field.bin", rep.field, h)
    if args.csv:
        export_field_csv(out / "value_field.csv", rep.field)
    _write_json(
        out / "solve_report.json",
        {
            "model_hash": h,
            "start": _point(z0, m0),
            "value_at_start": value,
            "slice_updates": rep.slice_updates,
            "wall_clock_seconds": rep.wall_clock,
            "config": cfg.model_dump(mode="json"),
            "solver": rep.config,
            "qvi_residuals": res.stats(),
        },
    )
    print(f"v_n(t={z0.t}, x={list(z0.x)}, m={m0.weights.tolist()}) = {value!r}")
    print(f"wrote {out / 'value_field.bin'}")
    return 0


def cmd_policy(args) -> int:
    cfg, spec, grids, z0, m0 = _load(args)
    out = _out_dir(args, cfg)
    h = cfgmod.model_hash(cfg)
    rep = _solve(cfg, spec, grids, args.threads)
    pol = extract_policy(rep, spec, grids, cfg.policy.epsilon, h)
    write_policy(out / "policy.bin", pol)
    write_field(out / "value_field.bin", rep.field, h)
    code = pol.codes[(grids.time_index(z0.t),)]
    print(f"wrote {out / 'policy.bin'} (epsilon={pol.epsilon})")
    print(f"impulse nodes: {int((pol.codes >= 0).sum())} of {pol.codes.size}; start-slice impulses: {int((code >= 0).sum())}")
    return 0


def _policy_for(args, cfg, out):
    path = Path(args.policy) if args.policy else out / "policy.bin"
    try:
        pol = read_policy(path)
    except FileNotFoundError:
        raise ConfigError(f"policy file {path} not found (run the 'policy' command first)") from None
    if pol.model_hash != cfgmod.model_hash(cfg):
        raise HashMismatch(f"{path} was built for a different model")
    return pol


def cmd_simulate(args) -> int:
    cfg, spec, grids, z0, m0 = _load(args)
    out = _out_dir(args, cfg)
    pol = _policy_for(args, cfg, out)
    seed = cfg.simulation.seed if args.seed is None else args.seed
    trajs = [
        simulate(spec, pol, z0, m0, seed, cfg.simulation.true_param, path=p, substeps=cfg.quadrature.substeps)
        for p in range(cfg.simulation.trajectories)
    ]
    write_trajectories_csv(out / "trajectories.csv", trajs)
    for tr in trajs:
        print(f"path {tr.path}: {len(tr.events)} impulses, T[phi]={tr.terminal_time!r}, G={tr.gain!r}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, spec, grids, z0, m0 = _load(args)
    out = _out_dir(args, cfg)
    pol = _policy_for(args, cfg, out)
    h = cfgmod.model_hash(cfg)
    seed = cfg.simulation.seed if args.seed is None else args.seed
    field_path = Path(args.field) if args.field else out / "value_field.bin"
    if field_path.exists():
        field, header = read_field(field_path)
        if header.get("model_hash") != h:
            raise HashMismatch(f"{field_path} was built for a different model")
    else:
        field = _solve(cfg, spec, grids, args.threads).field
    v = interpolate(field, spec, z0, m0)
    mc = evaluate_mc(
        spec, pol, z0, m0, cfg.simulation.n_paths, seed, args.threads, cfg.simulation.true_param, cfg.quadrature.substeps
    )
    lower = v - pol.epsilon - 3 * mc.se
    summary = dict(
        mc.summary(),
        v_n=v,
        epsilon=pol.epsilon,
        lower_band=lower,
        within_lower_band=bool(mc.mean >= lower),
        model_hash=h,
        start=_point(z0, m0),
    )
    _write_json(out / "evaluation.json", summary)
    print(f"J_hat = {mc.mean!r}  SE = {mc.se!r}  n_paths = {mc.n_paths}  seed = {mc.seed}")
    print(f"v_n = {v!r}; J_hat >= v_n - eps - 3 SE: {summary['within_lower_band']}")
    return 0


def cmd_check(args) -> int:
    cfg, spec, grids, z0, m0 = _load(args)
    out = _out_dir(args, cfg)
    h = cfgmod.model_hash(cfg)
    settings = cfgmod.build_settings(cfg, args.threads)
    report = {"model_hash": h}
    cert = cfgmod.build_certificate(cfg)
    if args.certificate and cert is None:
        raise ConfigError("no 'certificate' section in the config")
    if cert is not None:
        results = check_certificate(cert, spec, grids, settings)
        report["certificate"] = [r.as_dict() for r in results]
        report["certificate_passes"] = certificate_passes(results)
        for r in results:
            status = "not checked" if not r.checked else ("PASS" if r.passed else "FAIL")
            print(f"condition ({r.name}): {status}  worst margin {r.worst_margin!r}  at {r.location}")
    if args.field or cert is None:
        if args.field:
            field, header = read_field(args.field)
            if header.get("model_hash") != h:
                raise HashMismatch(f"{args.field} was built for a different model")
        else:
            field = _solve(cfg, spec, grids, args.threads).field
        res = qvi_residuals(field, spec, settings, cfg.solver.boundary_margin)
        stats = res.stats()
        report["qvi_residuals"] = stats
        print(f"QVI min(-L v, v - K v): min {stats['combined_min']!r} max {stats['combined_max']!r}")
        print(f"v - K v: min {stats['impulse_gap_min']!r} at node {stats['impulse_gap_min_node']}")
        print(f"worst |residual| at node {stats['worst_node']}")
    _write_json(out / "check_report.json", report)
    return 0


def cmd_oracle_compare(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if cfg.model.family != "tabular_instance":
        raise ConfigError("model.family: oracle-compare needs a tabular_instance config")
    inst = cfgmod.resolve_instance(cfg)
    spec, grids, z0, m0 = cfgmod.build_all(cfg, args.level)
    out = _out_dir(args, cfg)
    zq = (Fraction(z0.t), Fraction(z0.x[0]))
    mq = [Fraction(w).limit_denominator(10**9) for w in m0.weights]
    exact = exact_value(inst, zq, mq)
    root = exact_policy(inst, zq, mq)
    rep = _solve(cfg, spec, grids, args.threads)
    cmp = compare_with_grid(inst, rep.field.values, grids, zq, mq)
    n_reach = len(reachable_nodes(inst, zq, mq))
    summary = {
        "instance": inst.name,
        "exact_value": str(exact),
        "exact_value_float": float(exact),
        "grid_value": interpolate(rep.field, spec, z0, m0),
        "root_action": root.action or "Wait",
        "reachable_nodes": n_reach,
        **cmp,
    }
    _write_json(out / "oracle_compare.json", summary)
    print(f"{inst.name}: exact {exact} ({float(exact)!r}), grid {summary['grid_value']!r}")
    print(f"max |grid - exact| over {cmp['shared_nodes']}/{n_reach} reachable nodes: {cmp['max_abs_error']!r}")
    return 0 if cmp["max_abs_error"] <= args.tol else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bayesimpulse", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--out", help=f"output directory (default: config, then ${OUT_ENV}, then ./out)")
        p.add_argument("--seed", type=int, help="override simulation.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("--level", type=int, help="override the dyadic time level n")
        p.set_defaults(fn=fn)
        return p

    add("solve", cmd_solve, "backward induction; writes value_field.bin and solve_report.json").add_argument(
        "--csv", action="store_true", help="also export value_field.csv"
    )
    add("policy", cmd_policy, "solve and extract the feedback policy (policy.bin)")
    add("simulate", cmd_simulate, "simulate trajectories under a policy (trajectories.csv)").add_argument(
        "--policy", help="policy file (default: <out>/policy.bin)"
    )
    p = add("evaluate", cmd_evaluate, "Monte Carlo value of a policy (evaluation.json)")
    p.add_argument("--policy", help="policy file (default: <out>/policy.bin)")
    p.add_argument("--field", help="value field used for the band check (default: <out>/value_field.bin)")
    p = add("check", cmd_check, "QVI residuals of a field and/or the certificate conditions")
    p.add_argument("--field", help="value field file to check")
    p.add_argument("--certificate", action="store_true", help="require and check the config's certificate")
    add("oracle-compare", cmd_oracle_compare, "exact expectimax against the grid solver").add_argument(
        "--tol", type=float, default=1e-9, help="failure threshold on the max abs error"
    )
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatch as exc:
        print(f"model hash mismatch: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (ImpulseError, ArithmeticError) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
