"""Backward induction for the grid-time value function and its diagnostics."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bayes import Prior, bayes_update, bayes_update_batch, predictive_density
from .errors import DegeneratePosterior, NonFiniteValue
from .model import (
    Impulse,
    ModelSpec,
    State,
    gain_bound,
    impulse_outcome_kernel,
    kernel_batch,
    terminal_gain_batch,
)
from .numerics import (
    DEFAULT_HERMITE,
    DEFAULT_SUBSTEPS,
    GridSpec,
    ValueField,
    simplex_corners,
    transition_weights,
)

WAIT_CODE = -1


@dataclass(frozen=True)
class SolverSettings:
    kernel_resolution: int | None = None
    hermite: int = DEFAULT_HERMITE
    substeps: int = DEFAULT_SUBSTEPS
    threads: int = 1
    chunk: int = 8  # space nodes per work item; fixed so results never depend on threads
    tie_tol: float = 1e-12

    def resolution(self, spec: ModelSpec) -> int:
        return self.kernel_resolution or spec.impulse.default_resolution

    def describe(self) -> dict:
        return {
            "kernel_resolution": self.kernel_resolution,
            "hermite": self.hermite,
            "substeps": self.substeps,
            "chunk": self.chunk,
            "tie_tol": self.tie_tol,
        }


@dataclass
class SolveReport:
    field: ValueField
    decisions: np.ndarray  # same shape as the field; -1 = Wait, else action index
    slice_updates: list
    wall_clock: float
    config: dict = field(default_factory=dict)

    @property
    def grids(self) -> GridSpec:
        return self.field.grids

    def value_at(self, j: int, x_index, prior_index: int) -> float:
        return float(self.field.values[(j,) + tuple(np.atleast_1d(x_index)) + (prior_index,)])


@dataclass(frozen=True)
class ComparisonCertificate:
    """Psi(t, x) = exp(rate * (2T - t)) * (constant + <linear, x> + <quadratic, x**2>)."""

    rho: float
    delta: float
    constant: float = 0.0
    linear: tuple = ()
    quadratic: tuple = ()
    time_rate: float = 0.0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("certificate rate rho must be > 0")
        if not self.delta > 0:
            raise ValueError("certificate gap delta must be > 0")

    def psi(self, T, t, X):
        X = np.asarray(X, dtype=float)
        base = np.full(X.shape[0], float(self.constant))
        if self.linear:
            base = base + X @ np.asarray(self.linear, dtype=float)
        if self.quadratic:
            base = base + (X**2) @ np.asarray(self.quadratic, dtype=float)
        return np.exp(self.time_rate * (2 * T - np.asarray(t, dtype=float))) * base

    def infimum(self, T, d) -> float:
        """inf of Psi over [0, 2T] x R^d; -inf when the negative part is unbounded."""
        lin = np.asarray(self.linear or [0.0] * d, dtype=float)
        quad = np.asarray(self.quadratic or [0.0] * d, dtype=float)
        low = float(self.constant)
        for a, b in zip(lin, quad):
            if b < 0 or (b == 0 and a != 0):
                return -math.inf
            if b > 0:
                low -= a * a / (4 * b)
        factors = [1.0, math.exp(self.time_rate * 2 * T)]
        return min(low * f for f in factors)


# ---------------------------------------------------------------------------
# impulse operator
# ---------------------------------------------------------------------------


def apply_impulse_operator(
    continuation,
    spec: ModelSpec,
    state: State,
    prior: Prior,
    action: Impulse,
    resolution: int | None = None,
) -> float:
    """sum over outcomes of base_weight * predictive * continuation(landing, posterior).

    ``continuation`` is any callable ``(State, Prior) -> float``.
    """
    res = resolution or spec.impulse.default_resolution
    kern = impulse_outcome_kernel(spec, state, action, res)
    total = 0.0
    for out in kern.outcomes:
        dens = predictive_density(prior, out.likelihood)
        weight = out.base_weight * dens
        if dens <= 0.0:
            if weight > 0.0:
                raise DegeneratePosterior("outcome with positive weight but zero density")
            continue
        total += weight * continuation(out.landing, bayes_update(prior, out.likelihood))
    return total


def impulse_operator_batch(cont, spec, t, X, W, action, resolution):
    """Vectorised impulse operator: X (P, d), W (P, K) -> (P,).

    ``cont(times, xs, posts)`` evaluates the continuation on flattened
    outcome arrays.
    """
    times, xs, Q, q = kernel_batch(spec, t, X, action, resolution)
    P, O = Q.shape
    post, pred = bayes_update_batch(W[:, None, :], q)
    ok = pred > 0
    vals = np.zeros((P, O))
    if np.any(ok):
        vals[ok] = cont(times[ok], xs[ok], post[ok])
    return (Q * pred * vals).sum(axis=1)


# ---------------------------------------------------------------------------
# one backward step
# ---------------------------------------------------------------------------


def _terminal_slice_values(field_values, spec, grids, X, settings):
    """Branch values at t = T: rows are [Wait, action_0, ...]; shape (1+A, P, Np)."""
    sg = grids.simplex
    P = X.shape[0]
    Np = sg.size
    T = grids.T
    Xr = np.repeat(X, Np, axis=0)
    Wr = np.tile(sg.weights, (P, 1))
    out = np.empty((1 + len(spec.actions), P, Np))
    out[0] = terminal_gain_batch(spec, np.full(P * Np, T), Xr, Wr).reshape(P, Np)
    res = settings.resolution(spec)

    def cont(times, xs, posts):
        if grids.clamp:
            xs = np.clip(xs, grids.lo, grids.hi)
        return terminal_gain_batch(spec, times, xs, posts)

    for a, act in enumerate(spec.actions):
        out[1 + a] = impulse_operator_batch(cont, spec, T, Xr, Wr, act, res).reshape(P, Np)
    return out


def _continuation_targets(grids: GridSpec, t_j: float, theta: np.ndarray) -> np.ndarray:
    """Index of the next decision node after landing at theta (-1 past the horizon).

    The node must be >= theta and > t_j; landing exactly on T reads the
    time-T layer, landing after T uses the terminal rule.
    """
    J = grids.n_intervals
    jt = grids.time_index(t_j)
    scaled = theta * (2**grids.level) / grids.T
    cand = np.ceil(scaled - 1e-9).astype(np.int64)
    cand = np.maximum(cand, jt + 1)
    # guard against float noise: the chosen node must not precede theta
    times = cand * grids.T / 2**grids.level
    cand = np.where(times < theta - 1e-12 * max(1.0, grids.T), cand + 1, cand)
    return np.where(cand > J, -1, cand)


def _interior_branch_values(values, spec, grids, j, X, settings):
    """Branch values at t_j < T for the space points X: (1+A, P, Np)."""
    sg = grids.simplex
    P, d = X.shape
    Np = sg.size
    t_j = grids.time(j)
    h = grids.dt
    flat = values.reshape(values.shape[0], grids.n_x, Np)
    out = np.empty((1 + len(spec.actions), P, Np))
    Tw = transition_weights(grids, spec, t_j, X, h, settings.substeps, settings.hermite)
    out[0] = (Tw[:, :, None] * flat[j + 1][None, :, :]).sum(axis=1)
    res = settings.resolution(spec)
    for a, act in enumerate(spec.actions):
        times, xs, Q, q = kernel_batch(spec, t_j, X, act, res)
        O = Q.shape[1]
        post, pred = bayes_update_batch(sg.weights[None, None, :, :], q[:, :, None, :])
        # post (P, O, Np, K), pred (P, O, Np)
        cont = np.zeros((P, O, Np))
        target = _continuation_targets(grids, t_j, times)
        for jt in np.unique(target):
            sel = target == jt
            pp, oo = np.nonzero(sel)
            th = times[pp, oo]
            xl = xs[pp, oo]
            posts = post[pp, oo]
            live = pred[pp, oo] > 0
            safe = np.where(live[..., None], posts, sg.weights[None, :, :])
            if jt < 0:
                xc = np.clip(xl, grids.lo, grids.hi) if grids.clamp else xl
                n = xc.shape[0]
                v = terminal_gain_batch(
                    spec,
                    np.repeat(th, Np),
                    np.repeat(xc, Np, axis=0),
                    safe.reshape(n * Np, -1),
                ).reshape(n, Np)
            else:
                gap = np.maximum(grids.time(int(jt)) - th, 0.0)
                Tw = transition_weights(grids, spec, th, xl, gap, settings.substeps, settings.hermite)
                pidx, pw = simplex_corners(sg, safe)  # (n, Np, K)
                Fj = flat[int(jt)]  # (n_x, Np)
                G = (Fj[:, pidx] * pw[None]).sum(axis=-1)  # (n_x, n, Np)
                v = (Tw.T[:, :, None] * G).sum(axis=0)
            cont[pp, oo] = np.where(live, v, 0.0)
        out[1 + a] = (Q[:, :, None] * pred * cont).sum(axis=1)
    return out


def branch_values(values: np.ndarray, spec: ModelSpec, grids: GridSpec, j: int, settings, X=None):
    """All branch values at time node j, read from the stored later slices.

    Returns an array (1 + A, n_x, Np): row 0 is Wait, row 1 + a is action a.
    """
    if X is None:
        X = grids.x_points()
    chunks = [X[i : i + settings.chunk] for i in range(0, X.shape[0], settings.chunk)]
    if j == grids.n_intervals:
        work = lambda c: _terminal_slice_values(values, spec, grids, c, settings)
    else:
        work = lambda c: _interior_branch_values(values, spec, grids, j, c, settings)
    if settings.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=settings.threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return np.concatenate(parts, axis=1)


def select(branches: np.ndarray, tie_tol: float):
    """Max over branches with ties resolved to Wait first, then lowest action index."""
    best = branches.max(axis=0)
    tol = tie_tol * np.maximum(1.0, np.abs(best))
    first = np.argmax(branches >= best[None] - tol[None], axis=0)
    return best, first - 1


def terminal_layer(spec: ModelSpec, grids: GridSpec, settings: SolverSettings | None = None):
    """Values and decisions at t = T with shapes x_shape + (Np,)."""
    settings = settings or SolverSettings()
    br = branch_values(None, spec, grids, grids.n_intervals, settings)
    best, dec = select(br, settings.tie_tol)
    shape = grids.x_shape + (grids.simplex.size,)
    return best.reshape(shape), dec.reshape(shape)


def backward_induction(
    spec: ModelSpec, grids: GridSpec, settings: SolverSettings | None = None
) -> SolveReport:
    settings = settings or SolverSettings()
    start = time.perf_counter()
    J = grids.n_intervals
    values = np.full(grids.field_shape, np.nan)
    decisions = np.full(grids.field_shape, WAIT_CODE, dtype=np.int32)
    shape = grids.x_shape + (grids.simplex.size,)
    updates = []
    for j in range(J, -1, -1):
        br = branch_values(values, spec, grids, j, settings)
        best, dec = select(br, settings.tie_tol)
        if not np.all(np.isfinite(best)):
            raise NonFiniteValue(f"non-finite value in time slice {j}")
        values[j] = best.reshape(shape)
        decisions[j] = dec.reshape(shape)
        if j < J:
            updates.append(float(np.max(np.abs(values[j] - values[j + 1]))))
    updates.reverse()
    field_ = ValueField(values, grids)
    return SolveReport(
        field=field_,
        decisions=decisions,
        slice_updates=updates,
        wall_clock=time.perf_counter() - start,
        config={"settings": settings.describe(), "grids": grids.describe()},
    )


# ---------------------------------------------------------------------------
# QVI residuals
# ---------------------------------------------------------------------------


def _space_derivatives(grids: GridSpec, F: np.ndarray):
    """First and second differences of F (x_shape + (Np,)) along each space axis.

    Central inside the box, one-sided at its faces.
    """
    d = grids.d
    grad = []
    hess = [[None] * d for _ in range(d)]
    for i in range(d):
        x = grids.x_nodes[i]
        if x.size < 3:
            grad.append(np.zeros_like(F))
            hess[i][i] = np.zeros_like(F)
            continue
        grad.append(np.gradient(F, x, axis=i, edge_order=2))
    for i in range(d):
        if hess[i][i] is None:
            hess[i][i] = np.gradient(grad[i], grids.x_nodes[i], axis=i, edge_order=2)
            x = grids.x_nodes[i]
            # standard three-point second difference in the interior
            sl = [slice(None)] * F.ndim
            inner = np.empty_like(F)
            a = np.moveaxis(F, i, 0)
            hl = x[1:-1] - x[:-2]
            hr = x[2:] - x[1:-1]
            shp = (-1,) + (1,) * (F.ndim - 1)
            inner_core = 2 * (
                a[2:] / (hr * (hl + hr)).reshape(shp)
                - a[1:-1] / (hl * hr).reshape(shp)
                + a[:-2] / (hl * (hl + hr)).reshape(shp)
            )
            h2 = np.moveaxis(hess[i][i], i, 0).copy()
            h2[1:-1] = inner_core
            hess[i][i] = np.moveaxis(h2, 0, i)
        for k in range(i + 1, d):
            hess[i][k] = hess[k][i] = np.gradient(grad[i], grids.x_nodes[k], axis=k, edge_order=2)
    return grad, hess


def dynkin_fd(spec: ModelSpec, grids: GridSpec, now: np.ndarray, later: np.ndarray, t: float, h: float):
    """Forward-in-time, central-in-space approximation of the Dynkin operator.

    Space derivatives are taken on the later slice.
    """
    X = grids.x_points()
    d = grids.d
    mu = spec.drift(np.full(X.shape[0], t), X).reshape(grids.x_shape + (d,))
    sig = spec.diffusion(np.full(X.shape[0], t), X).reshape(grids.x_shape + (d, d))
    a = np.einsum("...ij,...kj->...ik", sig, sig)
    grad, hess = _space_derivatives(grids, later)
    L = (later - now) / h
    for i in range(d):
        L = L + mu[..., i, None] * grad[i]
        for k in range(d):
            L = L + 0.5 * a[..., i, k, None] * hess[i][k]
    return L


@dataclass
class ResidualReport:
    dynkin: np.ndarray  # -L_h v on slices 0..J-1
    impulse_gap: np.ndarray  # v - K v on slices 0..J
    terminal_gap: np.ndarray  # v - K_T g at T
    combined: np.ndarray  # min of the two branches, slices 0..J
    interior_mask: np.ndarray

    def stats(self) -> dict:
        comb = self.combined[self.interior_mask]
        worst = np.unravel_index(
            np.argmax(np.where(self.interior_mask, np.abs(self.combined), -np.inf)),
            self.combined.shape,
        )
        return {
            "combined_min": float(comb.min()),
            "combined_max": float(comb.max()),
            "combined_abs_max": float(np.abs(comb).max()),
            "worst_node": [int(i) for i in worst],
            "impulse_gap_min": float(self.impulse_gap.min()),
            "impulse_gap_min_node": [int(i) for i in np.unravel_index(np.argmin(self.impulse_gap), self.impulse_gap.shape)],
            "terminal_gap_min": float(self.terminal_gap.min()),
        }


def qvi_residuals(
    field_: ValueField,
    spec: ModelSpec,
    settings: SolverSettings | None = None,
    boundary_margin: int = 1,
) -> ResidualReport:
    """Residuals of min(-L v, v - K v) on the grid (and its time-T analogue).

    ``K v`` at a node is the best impulse branch read from the stored
    field, exactly as in the backward recursion.  ``interior_mask`` drops
    ``boundary_margin`` space nodes next to every face of the box.
    """
    settings = settings or SolverSettings()
    grids = field_.grids
    v = field_.values
    J = grids.n_intervals
    h = grids.dt
    shape = grids.x_shape + (grids.simplex.size,)
    gap = np.empty_like(v)
    for j in range(J + 1):
        br = branch_values(v, spec, grids, j, settings)
        best_imp = br[1:].max(axis=0).reshape(shape)
        gap[j] = v[j] - best_imp
        if j == J:
            term = v[j] - br[0].reshape(shape)
    dyn = np.empty((J,) + shape)
    for j in range(J):
        dyn[j] = -dynkin_fd(spec, grids, v[j], v[j + 1], grids.time(j), h)
    comb = np.empty_like(v)
    comb[:J] = np.minimum(dyn, gap[:J])
    comb[J] = np.minimum(term, gap[J])
    mask = np.ones(v.shape, dtype=bool)
    for i, n in enumerate(grids.x_shape):
        if n > 2 * boundary_margin:
            idx = [slice(None)] * v.ndim
            idx[1 + i] = np.r_[0:boundary_margin, n - boundary_margin : n].astype(int)
            mask[tuple(idx)] = False
    return ResidualReport(dyn, gap, term, comb, mask)


# ---------------------------------------------------------------------------
# comparison certificate
# ---------------------------------------------------------------------------


@dataclass
class ConditionResult:
    name: str
    checked: bool
    passed: bool | None
    worst_margin: float | None
    location: list | None = None
    note: str = ""

    def as_dict(self) -> dict:
        return {
            "condition": self.name,
            "checked": self.checked,
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "location": self.location,
            "note": self.note,
        }


def _worst(margins: np.ndarray, coords):
    k = int(np.argmin(margins))
    return float(margins.reshape(-1)[k]), coords(k)


def check_certificate(
    cert: ComparisonCertificate,
    spec: ModelSpec,
    grids: GridSpec,
    settings: SolverSettings | None = None,
) -> list[ConditionResult]:
    """Evaluate the comparison-certificate conditions node by node.

    Smoothness in (t, x) holds for the exponential-polynomial family and is
    reported as not checked.
    """
    settings = settings or SolverSettings()
    T = grids.T
    h = grids.dt
    X = grids.x_points()
    sg = grids.simplex
    J = grids.n_intervals
    Np = sg.size
    results = [ConditionResult("i", False, None, None, note="smoothness assumed from the family")]

    times = np.array([grids.time(j) for j in range(J + 1)])
    psi = np.stack([cert.psi(T, np.full(X.shape[0], t), X) for t in times])  # (J+1, n_x)
    psi_next = np.stack([cert.psi(T, np.full(X.shape[0], t + h), X) for t in times])
    shape = grids.x_shape + (1,)

    # (ii) rho Psi >= L Psi on [0, T]
    margins = []
    for j, t in enumerate(times):
        now = psi[j].reshape(shape)
        L = dynkin_fd(spec, grids, now, psi_next[j].reshape(shape), t, h)
        margins.append((cert.rho * now - L)[..., 0])
    m2 = np.stack(margins).reshape(J + 1, -1)
    w, k = _worst(m2, lambda k: [int(k // X.shape[0]), X[k % X.shape[0]].tolist()])
    results.append(ConditionResult("ii", True, w >= 0, w, k))

    # (iii) Psi - K Psi >= delta on [0, T]
    res = settings.resolution(spec)

    def cont(tt, xs, posts):
        return cert.psi(T, tt, xs)

    m3 = np.empty((J + 1, X.shape[0], Np))
    Xr = np.repeat(X, Np, axis=0)
    Wr = np.tile(sg.weights, (X.shape[0], 1))
    for j, t in enumerate(times):
        best = np.full(X.shape[0] * Np, -np.inf)
        for act in spec.actions:
            best = np.maximum(best, impulse_operator_batch(cont, spec, t, Xr, Wr, act, res))
        m3[j] = (np.repeat(psi[j], Np) - best - cert.delta).reshape(X.shape[0], Np)
    w, k = _worst(
        m3,
        lambda k: [int(k // (X.shape[0] * Np)), X[(k // Np) % X.shape[0]].tolist(), sg.weights[k % Np].tolist()],
    )
    results.append(ConditionResult("iii", True, w >= 0, w, k))

    # (iv) Psi >= K_T[e^{rho t} g] on [T, 2T]
    late = np.array([T + grids.time(j) for j in range(J + 1)])
    m4 = np.empty((J + 1, X.shape[0], Np))
    for j, t in enumerate(late):
        g = terminal_gain_batch(spec, np.full(X.shape[0] * Np, t), Xr, Wr)
        m4[j] = (np.repeat(cert.psi(T, np.full(X.shape[0], t), X), Np) - math.exp(cert.rho * t) * g).reshape(
            X.shape[0], Np
        )
    w, k = _worst(
        m4,
        lambda k: [float(late[k // (X.shape[0] * Np)]), X[(k // Np) % X.shape[0]].tolist(), sg.weights[k % Np].tolist()],
    )
    results.append(ConditionResult("iv", True, w >= 0, w, k))

    # (v) negative part of Psi bounded
    inf = cert.infimum(T, spec.dim)
    results.append(
        ConditionResult("v", True, math.isfinite(inf), inf, None, note="margin is inf Psi over [0,2T] x R^d")
    )
    return results


def certificate_passes(results) -> bool:
    return all(r.passed for r in results if r.checked)


def value_bound(spec: ModelSpec, grids: GridSpec) -> float:
    return gain_bound(spec, grids.lo, grids.hi)
