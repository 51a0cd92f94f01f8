"""Acceptance criteria 1-9, one test each, with a PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from bayesimpulse import config as C
from bayesimpulse.bayes import Prior, bayes_update, normalize, predictive_density
from bayesimpulse.cli import main
from bayesimpulse.model import State, impulse_outcome_kernel, make_censored_execution_model, make_gaussian_impact_model
from bayesimpulse.numerics import build_grids, interpolate
from bayesimpulse.oracle import bundled_instances, compare_with_grid, reachable_nodes, to_grids, to_model
from bayesimpulse.policy import extract_policy
from bayesimpulse.sim import evaluate_mc
from bayesimpulse.solver import (
    SolverSettings,
    backward_induction,
    certificate_passes,
    check_certificate,
    qvi_residuals,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
DEMO = CONFIGS / "demo.cfg"
ROUNDOFF_FLOOR = 5e-14


def demo(level=None, **grid):
    cfg = C.load_config(DEMO)
    spec, grids, z0, m0 = C.build_all(cfg, level)
    if grid:
        g = cfg.grid
        args = dict(x_min=g.x_min, x_max=g.x_max, x_count=g.x_count, simplex_resolution=g.simplex_resolution)
        args.update(grid)
        grids = build_grids(spec, grids.level, **args)
    return cfg, spec, grids, z0, m0


def value_at_start(spec, grids, z0, m0, settings=None):
    return interpolate(backward_induction(spec, grids, settings).field, spec, z0, m0)


# ---------------------------------------------------------------------------


def _bundled_kernels():
    """(name, kernel) over the built-in families at a few states and every instance table."""
    specs = {
        "censored": make_censored_execution_model(rates=(0.5, 2.0), order_cost=0.3),
        "censored3": make_censored_execution_model(rates=(0.2, 1.0, 4.0), order_cost=0.1),
        "gaussian": make_gaussian_impact_model(impacts=(-1.0, 1.0), impact_noise=0.5),
        "gaussian_sharp": make_gaussian_impact_model(impacts=(-1.0, 0.0, 1.0), impact_noise=0.0),
    }
    for name, spec in specs.items():
        for act in spec.actions:
            for t in (0.0, 0.6, 0.9):
                yield name, impulse_outcome_kernel(spec, State(t, (0.3,)), act, spec.impulse.default_resolution)
    for name, inst in bundled_instances().items():
        spec = to_model(inst)
        for act in spec.actions:
            for x in inst.states:
                yield name, impulse_outcome_kernel(spec, State(0.0, (float(x),)), act, 1)


def test_criterion_1_bayes_suite(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    norm_err = 0.0
    dirac_ok = True
    flat_err = 0.0
    for _ in range(500):
        K = int(rng.integers(1, 6))
        m = normalize(rng.uniform(0, 1, K) + 1e-3)
        q = rng.uniform(1e-6, 50.0, K)
        norm_err = max(norm_err, abs(bayes_update(m, q).weights.sum() - 1.0))
        k = int(rng.integers(K))
        dirac_ok &= bayes_update(Prior.dirac(k, K), q) == Prior.dirac(k, K)
        flat_err = max(flat_err, float(np.abs(bayes_update(m, np.full(K, q[0])).weights - m.weights).max()))
    mart_err = 0.0
    n_kernels = 0
    for _, kern in _bundled_kernels():
        n_kernels += 1
        K = kern.likelihood.shape[1]
        for raw in rng.dirichlet(np.ones(K), size=5):
            m = normalize(raw)
            total = np.zeros(K)
            for o in kern.outcomes:
                dens = predictive_density(m, o.likelihood)
                if dens > 0:
                    total += o.base_weight * dens * bayes_update(m, o.likelihood).weights
            mart_err = max(mart_err, float(np.abs(total - m.weights).max()))
    elapsed = time.perf_counter() - start
    ok = norm_err <= 1e-12 and dirac_ok and flat_err <= 1e-12 and mart_err <= 1e-10
    criterion(
        1,
        ok,
        f"normalization {norm_err:.1e} <= 1e-12, Dirac fixed point {dirac_ok}, flat likelihood {flat_err:.1e}, "
        f"martingale {mart_err:.1e} <= 1e-10 over {n_kernels} kernels ({elapsed:.2f}s)",
    )
    assert ok


# ---------------------------------------------------------------------------


def _mass_error(spec, res):
    err = 0.0
    for act in spec.actions:
        for t in (0.0, 0.6, 0.9):
            for x in (-1.0, 0.3):
                kern = impulse_outcome_kernel(spec, State(t, (x,)), act, res)
                err = max(err, float(np.abs(kern.masses() - 1.0).max()))
    return err


def test_criterion_2_kernel_stochasticity(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    sweep = []
    for _ in range(10):
        rates = tuple(sorted(rng.uniform(0.1, 5.0, 2)))
        sweep.append(make_censored_execution_model(rates=rates, order_cost=float(rng.uniform(0, 1))))
    for _ in range(10):
        impacts = tuple(sorted(rng.uniform(-2.0, 2.0, 2)))
        sweep.append(make_gaussian_impact_model(impacts=impacts, impact_noise=float(rng.uniform(0.05, 2.0))))
    worst_default = 0.0
    monotone = True
    for spec in sweep:
        r = spec.impulse.default_resolution
        errs = [_mass_error(spec, r * f) for f in (1, 2, 4)]
        worst_default = max(worst_default, errs[0])
        monotone &= all(b <= max(a, ROUNDOFF_FLOOR) for a, b in zip(errs, errs[1:]))
    elapsed = time.perf_counter() - start
    ok = worst_default <= 1e-8 and monotone
    criterion(
        2,
        ok,
        f"max |mass - 1| at default quadrature {worst_default:.1e} <= 1e-8 over {len(sweep)} models; "
        f"non-increasing under doubling (roundoff floor {ROUNDOFF_FLOOR:g}): {monotone} ({elapsed:.2f}s)",
    )
    assert ok


# ---------------------------------------------------------------------------


def test_criterion_3_oracle_equivalence(criterion):
    start = time.perf_counter()
    insts = bundled_instances()
    worst = 0.0
    lines = []
    for name, inst in insts.items():
        spec = to_model(inst)
        grids = to_grids(inst, spec)
        cmp = compare_with_grid(inst, backward_induction(spec, grids).field.values, grids)
        assert cmp["shared_nodes"] == len(reachable_nodes(inst))
        worst = max(worst, cmp["max_abs_error"])
        lines.append(f"{name}:{cmp['shared_nodes']}")
    elapsed = time.perf_counter() - start
    ok = len(insts) >= 5 and "value_of_information" in insts and worst <= 1e-9
    criterion(3, ok, f"{len(insts)} instances, max |grid - exact| {worst:.1e} <= 1e-9 (nodes {', '.join(lines)}) ({elapsed:.2f}s)")
    assert ok


# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def levels():
    out = {}
    for n in (1, 2, 3):
        _, spec, grids, z0, m0 = demo(n)
        out[n] = backward_induction(spec, grids)
    return out


def test_criterion_4_monotone_refinement(criterion, levels):
    start = time.perf_counter()
    low = []
    sup = []
    for n in (1, 2):
        d = levels[n + 1].field.values[::2] - levels[n].field.values  # shared time nodes
        low.append(float(d.min()))
        sup.append(float(np.abs(d).max()))
    elapsed = time.perf_counter() - start + sum(r.wall_clock for r in levels.values())
    shape = levels[3].field.values.shape
    ok = min(low) >= -1e-6 and sup[1] < sup[0]
    criterion(
        4,
        ok,
        f"min(v_(n+1) - v_n) over shared nodes {min(low):.1e} >= -1e-6; sup differences {sup[0]:.4g} > {sup[1]:.4g} "
        f"(space x simplex {shape[1]}x{shape[2]}, {elapsed:.1f}s)",
    )
    assert ok


# ---------------------------------------------------------------------------


def test_criterion_5_policy_performance(criterion, levels):
    start = time.perf_counter()
    cfg, spec, grids, z0, m0 = demo()
    rep = levels[3]
    v = interpolate(rep.field, spec, z0, m0)
    eps = cfg.policy.epsilon
    # bias: how much v moves when the kernel quadrature or the simplex grid is doubled
    dk = abs(value_at_start(spec, grids, z0, m0, SolverSettings(kernel_resolution=2 * spec.impulse.default_resolution)) - v)
    _, _, fine, _, _ = demo(simplex_resolution=2 * grids.simplex.resolution - 1)
    ds = abs(value_at_start(spec, fine, z0, m0) - v)
    bias = dk + ds
    pol = extract_policy(rep, spec, grids, eps)
    mc = evaluate_mc(spec, pol, z0, m0, 100_000, cfg.simulation.seed, threads=4)
    elapsed = time.perf_counter() - start
    lower = mc.mean >= v - eps - 3 * mc.se
    upper = mc.mean <= v + bias + 3 * mc.se
    ok = lower and upper
    criterion(
        5,
        ok,
        f"J_hat {mc.mean:.5f} (SE {mc.se:.5f}, 1e5 paths) vs v_n {v:.5f}: lower band {lower}, "
        f"upper band {upper} with bias {bias:.1e} ({elapsed:.1f}s)",
    )
    assert ok


# ---------------------------------------------------------------------------


def test_criterion_6_qvi_residuals(criterion):
    start = time.perf_counter()
    rows = []
    for n, nx in ((1, 16), (2, 32), (3, 64)):
        _, spec, grids, _, _ = demo(n, x_count=nx)
        rep = backward_induction(spec, grids)
        st = qvi_residuals(rep.field, spec).stats()
        dx = float(np.diff(grids.x_nodes[0]).max())
        tol = grids.dt + dx**2
        rows.append((n, st["combined_abs_max"], tol, st["impulse_gap_min"]))
    elapsed = time.perf_counter() - start
    within = all(r <= tol for _, r, tol, _ in rows)
    shrink = all(b[1] <= a[1] for a, b in zip(rows, rows[1:]))
    supersol = all(g >= -1e-8 for *_, g in rows)
    ok = within and shrink and supersol
    detail = "; ".join(f"n={n} |res| {r:.1e} <= tol {tol:.3g}, min(v-Kv) {g:.1e}" for n, r, tol, g in rows)
    criterion(6, ok, f"{detail}; non-increasing {shrink} ({elapsed:.1f}s)")
    assert ok


# ---------------------------------------------------------------------------


def test_criterion_7_certificate_checker(criterion):
    start = time.perf_counter()
    failing = C.load_config(CONFIGS / "constant_certificate.cfg")
    spec, grids, _, _ = C.build_all(failing)
    cert = C.build_certificate(failing)
    res_bad = {r.name: r for r in check_certificate(cert, spec, grids)}
    passing = C.load_config(CONFIGS / "certificate.cfg")
    spec, grids, _, _ = C.build_all(passing)
    res_good = check_certificate(C.build_certificate(passing), spec, grids)
    good = {r.name: r for r in res_good}
    elapsed = time.perf_counter() - start
    bad_ok = res_bad["iii"].passed is False and abs(res_bad["iii"].worst_margin + cert.delta) <= 1e-12
    good_ok = certificate_passes(res_good) and all(good[c].worst_margin > 0 for c in ("ii", "iii", "iv", "v"))
    ok = bad_ok and good_ok
    margins = ", ".join(f"({c}) {good[c].worst_margin:.3g}" for c in ("ii", "iii", "iv", "v"))
    criterion(
        7,
        ok,
        f"constant Psi fails (iii) with margin {res_bad['iii'].worst_margin!r} (delta {cert.delta}); "
        f"bundled certificate margins {margins} ({elapsed:.1f}s)",
    )
    assert ok


# ---------------------------------------------------------------------------


def test_criterion_8_determinism(criterion, tmp_path, capsys):
    start = time.perf_counter()
    runs = [("a", 1), ("b", 1), ("c", 4), ("d", 8)]
    for name, threads in runs:
        out = tmp_path / name
        for cmd in ("solve", "policy", "evaluate"):
            assert main([cmd, "--config", str(DEMO), "--out", str(out), "--threads", str(threads)]) == 0
    capsys.readouterr()

    def stable_report(p):
        rep = json.loads(p.read_text())
        rep.pop("wall_clock_seconds")
        return rep

    ref = tmp_path / "a"
    same = True
    for name, _ in runs[1:]:
        d = tmp_path / name
        for f in ("value_field.bin", "policy.bin", "evaluation.json"):
            same &= (ref / f).read_bytes() == (d / f).read_bytes()
        same &= stable_report(ref / "solve_report.json") == stable_report(d / "solve_report.json")
    elapsed = time.perf_counter() - start
    criterion(
        8,
        same,
        f"value_field.bin, policy.bin, evaluation.json and solve_report.json (minus wall clock) identical over "
        f"two runs and --threads 1/4/8: {same} ({elapsed:.1f}s)",
    )
    assert same


# ---------------------------------------------------------------------------


def test_criterion_9_domain_truncation(criterion, levels):
    start = time.perf_counter()
    cfg, spec, grids, z0, m0 = demo()
    lo, hi = float(grids.lo[0]), float(grids.hi[0])
    n = grids.x_shape[0]
    dx = (hi - lo) / (n - 1)
    # twice the width at the same spacing, so every original node is kept
    center = 0.5 * (lo + hi)
    half = (2 * n - 1) * dx / 2
    _, _, wide, _, _ = demo(x_min=center - half, x_max=center + half, x_count=2 * n)
    assert np.all(np.isin(np.round(grids.x_nodes[0], 9), np.round(wide.x_nodes[0], 9)))
    v = interpolate(levels[3].field, spec, z0, m0)
    v_wide = value_at_start(spec, wide, z0, m0)
    change = abs(v_wide - v)
    elapsed = time.perf_counter() - start
    ok = change < 1e-4
    criterion(
        9,
        ok,
        f"|v_n(wide box) - v_n| at z0 = {change:.1e} < 1e-4 (box [{lo:g}, {hi:g}] -> "
        f"[{center - half:g}, {center + half:g}]) ({elapsed:.1f}s)",
    )
    assert ok
