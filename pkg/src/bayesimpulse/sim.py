"""Forward simulation of the controlled system and Monte Carlo policy evaluation.

Random numbers come from numpy's Philox counter-based generator.  Every
path owns three independent streams, keyed ``[seed, 16 * path + role]``:

* role 0 draws the true parameter and the uniforms driving impulse outcomes,
* role 1 draws the Brownian increments,
* role 2 draws the impulse jump noise and the terminal noise.

Each stream is consumed in a fixed block layout, so a path's draws do not
depend on how many paths run alongside it or on the thread count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bayes import Prior
from .errors import InadmissibleEvent
from .model import ModelSpec, State, realized_gain
from .numerics import DEFAULT_SUBSTEPS
from .policy import Policy, lookup_codes
from .solver import WAIT_CODE

ROLE_OUTCOME, ROLE_BROWNIAN, ROLE_JUMP = 0, 1, 2
CHUNK = 2048


def path_streams(seed: int, path: int):
    """The three generators of one path, in role order."""
    return [
        np.random.Generator(np.random.Philox(key=[int(seed), 16 * int(path) + role]))
        for role in (ROLE_OUTCOME, ROLE_BROWNIAN, ROLE_JUMP)
    ]


@dataclass
class Event:
    tau: float
    action: int
    theta: float
    landing: tuple
    posterior: tuple
    likelihood: tuple


@dataclass
class Trajectory:
    seed: int
    path: int
    true_param: int
    noise: dict
    events: list = field(default_factory=list)
    samples: list = field(default_factory=list)  # (t, x tuple, prior tuple)
    terminal_time: float = 0.0
    gain: float = 0.0

    def check_admissible(self):
        for a, b in zip(self.events, self.events[1:]):
            if not (a.tau < b.tau and a.theta <= b.tau + 1e-12):
                raise InadmissibleEvent(f"impulse at {b.tau} inside the window [{a.tau}, {a.theta})")


def _draws(seed, paths, n_nodes, d, substeps):
    """Pre-drawn random blocks for a batch of paths."""
    P = len(paths)
    u0 = np.empty(P)
    unif = np.empty((P, n_nodes))
    wait_z = np.empty((P, n_nodes, substeps, d))
    gap_z = np.empty((P, n_nodes, substeps, d))
    jump_z = np.empty((P, n_nodes, d))
    term_e = np.empty((P, d))
    for i, p in enumerate(paths):
        g0, g1, g2 = path_streams(seed, p)
        u0[i] = g0.random()
        unif[i] = g0.random(n_nodes)
        wait_z[i] = g1.standard_normal((n_nodes, substeps, d))
        gap_z[i] = g1.standard_normal((n_nodes, substeps, d))
        jump_z[i] = g2.standard_normal((n_nodes, d))
        term_e[i] = g2.standard_normal(d)
    return u0, unif, wait_z, gap_z, jump_z, term_e


def _euler(spec, t0, X, gap, Z, substeps):
    """Euler-Maruyama over ``gap`` (per path) with given standard normals Z (P, S, d)."""
    if X.shape[0] == 0:
        return X
    h = gap / substeps
    sq = np.sqrt(h)
    for k in range(substeps):
        t = t0 + k * h
        mu = spec.drift(t, X)
        sig = spec.diffusion(t, X)
        X = X + mu * h[:, None] + np.einsum("pij,pj->pi", sig, Z[:, k, :]) * sq[:, None]
    return X


def _run(spec, policy, z0, m0, seed, paths, true_param, substeps, record):
    grids = policy.grids
    J = grids.n_intervals
    T = grids.T
    d = spec.dim
    P = len(paths)
    j0 = grids.time_index(z0.t)
    if j0 is None:
        raise ValueError("the initial time must be a grid node")
    n_nodes = J + 1
    u0, unif, wait_z, gap_z, jump_z, term_e = _draws(seed, paths, n_nodes, d, substeps)

    u = spec.u
    if true_param is None:
        cdf = np.cumsum(m0.weights)
        cdf[-1] = 1.0
        k_true = np.minimum(np.searchsorted(cdf, u0, side="right"), spec.K - 1)
    else:
        k_true = np.full(P, int(true_param))

    X = np.repeat(z0.xa[None, :], P, axis=0)
    W = np.repeat(m0.weights[None, :], P, axis=0)
    now = np.full(P, float(z0.t))  # time the path is next free to act
    node = np.full(P, j0)  # grid node the path is waiting at
    done = np.zeros(P, dtype=bool)
    t_end = np.full(P, T)
    trajs = None
    if record:
        trajs = [
            Trajectory(
                seed,
                p,
                int(k_true[i]),
                {
                    "u0": float(u0[i]),
                    "outcome_uniforms": unif[i].tolist(),
                    "wait_normals": wait_z[i].tolist(),
                    "gap_normals": gap_z[i].tolist(),
                    "jump_normals": jump_z[i].tolist(),
                    "terminal_noise": term_e[i].tolist(),
                },
            )
            for i, p in enumerate(paths)
        ]
        for i in range(P):
            trajs[i].samples.append((float(z0.t), tuple(X[i].tolist()), tuple(W[i].tolist())))

    for j in range(j0, J + 1):
        tj = grids.time(j)
        act = ~done & (node == j)
        idx = np.flatnonzero(act)
        if idx.size == 0:
            continue
        if np.any(np.abs(now[idx] - tj) > 1e-9 * max(1.0, T)):
            raise InadmissibleEvent("policy queried inside a latency window")
        codes = lookup_codes(policy, np.full(idx.size, tj), X[idx], W[idx])
        for a in np.unique(codes):
            sel = idx[codes == a]
            if a == WAIT_CODE:
                if j == J:
                    done[sel] = True
                    continue
                h = np.full(sel.size, grids.time(j + 1) - tj)
                X[sel] = _euler(spec, np.full(sel.size, tj), X[sel], h, wait_z[sel, j], substeps)
                now[sel] = grids.time(j + 1)
                node[sel] = j + 1
                if record:
                    for i in sel:
                        trajs[i].samples.append((now[i], tuple(X[i].tolist()), tuple(W[i].tolist())))
                continue
            action = spec.actions[a]
            theta, xs, info = spec.impulse.sample(tj, X[sel], action, u, k_true[sel], unif[sel, j], jump_z[sel, j])
            lik = spec.impulse.observed_likelihood(tj, X[sel], action, u, theta, xs, info)
            joint = W[sel] * lik
            z = joint.sum(axis=1)
            if np.any(z <= 0):
                raise InadmissibleEvent("sampled an outcome with zero predictive density")
            W[sel] = joint / z[:, None]
            X[sel] = xs
            now[sel] = theta
            if record:
                for r, i in enumerate(sel):
                    trajs[i].events.append(
                        Event(tj, int(a), float(theta[r]), tuple(xs[r].tolist()), tuple(W[i].tolist()), tuple(lik[r].tolist()))
                    )
            # landing at T from an earlier node reads the time-T decision; past T the run ends
            beyond = (theta > T + 1e-12 * max(1.0, T)) | (j == J)
            fin = sel[beyond]
            done[fin] = True
            t_end[fin] = np.maximum(theta[beyond], T)
            cont = sel[~beyond]
            if cont.size:
                th = theta[~beyond]
                nxt = np.ceil(th * 2**grids.level / T - 1e-9).astype(np.int64)
                nxt = np.maximum(nxt, j + 1)
                t_next = nxt * T / 2**grids.level
                gap = np.maximum(t_next - th, 0.0)
                X[cont] = _euler(spec, th, X[cont], gap, gap_z[cont, j], substeps)
                now[cont] = t_next
                node[cont] = nxt
                if record:
                    for i in cont:
                        trajs[i].samples.append((float(now[i]), tuple(X[i].tolist()), tuple(W[i].tolist())))

    G = realized_gain(spec, t_end, X, W, k_true, term_e)
    if record:
        for i in range(P):
            trajs[i].terminal_time = float(t_end[i])
            trajs[i].gain = float(G[i])
            trajs[i].check_admissible()
    return G, trajs, k_true, W


def simulate(
    spec: ModelSpec,
    policy: Policy,
    z0: State,
    m0: Prior,
    seed: int,
    true_param: int | None = None,
    path: int = 0,
    substeps: int = DEFAULT_SUBSTEPS,
) -> Trajectory:
    """One controlled run with its full event and noise record."""
    _, trajs, _, _ = _run(spec, policy, z0, m0, seed, [path], true_param, substeps, record=True)
    return trajs[0]


@dataclass
class MCResult:
    mean: float
    se: float
    n_paths: int
    seed: int
    gains: np.ndarray
    true_params: np.ndarray
    final_priors: np.ndarray

    def summary(self) -> dict:
        return {"J_hat": self.mean, "se": self.se, "n_paths": self.n_paths, "seed": self.seed}


def evaluate_mc(
    spec: ModelSpec,
    policy: Policy,
    z0: State,
    m0: Prior,
    n_paths: int,
    seed: int,
    threads: int = 1,
    true_param: int | None = None,
    substeps: int = DEFAULT_SUBSTEPS,
) -> MCResult:
    """Sample mean of the realized gain and its standard error (std / sqrt(n))."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    batches = [list(range(s, min(s + CHUNK, n_paths))) for s in range(0, n_paths, CHUNK)]

    def work(b):
        G, _, k, W = _run(spec, policy, z0, m0, seed, b, true_param, substeps, record=False)
        return G, k, W

    if threads > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, batches))
    else:
        parts = [work(b) for b in batches]
    G = np.concatenate([p[0] for p in parts])
    ks = np.concatenate([p[1] for p in parts])
    Ws = np.concatenate([p[2] for p in parts])
    mean = float(np.sum(G) / n_paths)
    se = float(np.std(G, ddof=1) / math.sqrt(n_paths))
    return MCResult(mean, se, n_paths, int(seed), G, ks, Ws)


TRAJECTORY_COLUMNS = ["path", "row", "t", "action", "theta", "x", "prior", "gain"]


def write_trajectories_csv(path, trajectories) -> None:
    """One ``sample`` row per recorded state, one ``event`` row per impulse, one ``end`` row.

    Vector columns are ``;``-joined reprs of floats.
    """

    def vec(v):
        return ";".join(repr(float(a)) for a in v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for tr in trajectories:
            for t, x, m in tr.samples:
                w.writerow([tr.path, "sample", repr(float(t)), "", "", vec(x), vec(m), ""])
            for ev in tr.events:
                w.writerow([tr.path, "event", repr(ev.tau), ev.action, repr(ev.theta), vec(ev.landing), vec(ev.posterior), ""])
            w.writerow([tr.path, "end", repr(tr.terminal_time), "", "", "", "", repr(tr.gain)])
