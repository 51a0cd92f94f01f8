"""Grids in (time, space, prior), interpolation, and diffusion propagation between impulses.

The prior simplex is gridded in the cumulative coordinates
``c_i = N * (m_{i+1} + ... + m_K)`` where the region ``N >= c_1 >= ... >= 0``
is a union of Kuhn simplices, so piecewise-linear interpolation on that
triangulation reproduces affine functions of the weights exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .bayes import Prior
from .errors import NonFiniteValue, OutOfDomain, UnsupportedSimplexDimension
from .model import ModelSpec, State, terminal_gain_batch

DEFAULT_SUBSTEPS = 4
DEFAULT_HERMITE = 5
MAX_SIMPLEX_K = 3
NODE_SNAP = 1e-9  # relative distance at which a time is read as a grid node


class _BeyondHorizon:
    def __repr__(self):
        return "BeyondHorizon"

    def __reduce__(self):
        return "BeyondHorizon"


BeyondHorizon = _BeyondHorizon()


# ---------------------------------------------------------------------------
# simplex lattice
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimplexGrid:
    K: int
    resolution: int  # nodes per barycentric axis
    lattice: np.ndarray = field(repr=False)  # (Np, K-1) integer cumulative coords
    weights: np.ndarray = field(repr=False)  # (Np, K)
    lookup: np.ndarray = field(repr=False)  # dense table c -> node index, -1 if invalid

    @property
    def divisions(self) -> int:
        return self.resolution - 1

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def node_prior(self, i: int) -> Prior:
        return Prior(self.weights[i])

    def index_of(self, weights, tol=1e-12) -> int | None:
        """Index of the node equal to ``weights``, or None if it is not a node."""
        w = np.asarray(weights, dtype=float)
        if self.K == 1:
            return 0
        c = self.divisions * np.cumsum(w[::-1])[::-1][1:]
        ci = np.rint(c)
        if np.max(np.abs(c - ci)) > tol * max(1, self.divisions):
            return None
        idx = self.lookup[tuple(ci.astype(int))]
        return None if idx < 0 else int(idx)


def build_simplex(K: int, resolution: int) -> SimplexGrid:
    if K > MAX_SIMPLEX_K:
        raise UnsupportedSimplexDimension(
            f"simplex gridding supports K <= {MAX_SIMPLEX_K}, got K={K}"
        )
    if K == 1:
        return SimplexGrid(1, 1, np.zeros((1, 0), dtype=int), np.ones((1, 1)), np.zeros((), dtype=int))
    if resolution < 2:
        raise ValueError("simplex resolution must be >= 2")
    N = resolution - 1
    pts = []

    def rec(prefix, upper):
        if len(prefix) == K - 1:
            pts.append(prefix)
            return
        for c in range(upper + 1):
            rec(prefix + (c,), c)

    rec((), N)
    lat = np.array(pts, dtype=int)
    # order so the first weight increases along the node index
    order = np.lexsort(tuple(lat[:, i] for i in range(K - 2, -1, -1)))[::-1]
    lat = lat[order]
    ext = np.concatenate([np.full((lat.shape[0], 1), N), lat, np.zeros((lat.shape[0], 1), int)], 1)
    W = (ext[:, :-1] - ext[:, 1:]) / N
    lookup = np.full((N + 1,) * (K - 1), -1, dtype=int)
    lookup[tuple(lat.T)] = np.arange(lat.shape[0])
    return SimplexGrid(K, resolution, lat, W, lookup)


def simplex_corners(sg: SimplexGrid, W: np.ndarray):
    """Kuhn-simplex corner indices and barycentric weights for priors ``W`` (..., K)."""
    W = np.asarray(W, dtype=float)
    shape = W.shape[:-1]
    K = sg.K
    if K == 1:
        return np.zeros(shape + (1,), dtype=int), np.ones(shape + (1,))
    N = sg.divisions
    Wf = W.reshape(-1, K)
    c = N * np.cumsum(Wf[:, ::-1], axis=1)[:, ::-1][:, 1:]
    c = np.clip(c, 0.0, N)
    c = np.minimum.accumulate(c, axis=1)
    base = np.minimum(np.floor(c), N - 1).astype(int)
    f = c - base
    # stable descending sort keeps c_i >= c_{i+1} on ties
    perm = np.argsort(-f, axis=1, kind="stable")
    fs = np.take_along_axis(f, perm, axis=1)
    P = Wf.shape[0]
    verts = np.empty((P, K, K - 1), dtype=int)
    lam = np.empty((P, K))
    v = base.copy()
    verts[:, 0] = v
    lam[:, 0] = 1.0 - fs[:, 0]
    rows = np.arange(P)
    for i in range(1, K):
        v = v.copy()
        v[rows, perm[:, i - 1]] += 1
        verts[:, i] = v
        lam[:, i] = fs[:, i - 1] - (fs[:, i] if i < K - 1 else 0.0)
    idx = sg.lookup[tuple(verts[..., j] for j in range(K - 1))]
    if np.any(idx < 0):
        raise OutOfDomain("prior outside the simplex grid")
    return idx.reshape(shape + (K,)), lam.reshape(shape + (K,))


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    T: float
    level: int
    x_nodes: tuple  # per-dimension increasing arrays
    simplex: SimplexGrid
    clamp: bool = True

    @property
    def n_intervals(self) -> int:
        return 2**self.level

    @property
    def times(self) -> np.ndarray:
        return np.array([self.time(j) for j in range(self.n_intervals + 1)])

    def time(self, j: int) -> float:
        return (j * self.T) / 2**self.level

    @property
    def dt(self) -> float:
        return self.T / 2**self.level

    @property
    def d(self) -> int:
        return len(self.x_nodes)

    @property
    def x_shape(self) -> tuple:
        return tuple(len(a) for a in self.x_nodes)

    @property
    def n_x(self) -> int:
        return int(np.prod(self.x_shape))

    @property
    def lo(self) -> np.ndarray:
        return np.array([a[0] for a in self.x_nodes])

    @property
    def hi(self) -> np.ndarray:
        return np.array([a[-1] for a in self.x_nodes])

    def x_points(self) -> np.ndarray:
        """All space nodes, C order over dimensions: (n_x, d)."""
        mesh = np.meshgrid(*self.x_nodes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    @property
    def field_shape(self) -> tuple:
        return (self.n_intervals + 1,) + self.x_shape + (self.simplex.size,)

    def time_index(self, t: float, tol: float = 1e-12) -> int | None:
        j = round(t * 2**self.level / self.T)
        if 0 <= j <= self.n_intervals and abs(self.time(j) - t) <= tol * max(1.0, self.T):
            return int(j)
        return None

    def describe(self) -> dict:
        return {
            "T": self.T,
            "level": self.level,
            "x_nodes": [a.tolist() for a in self.x_nodes],
            "K": self.simplex.K,
            "simplex_resolution": self.simplex.resolution,
            "clamp": self.clamp,
        }

    def same_as(self, other: "GridSpec") -> bool:
        return self.describe() == other.describe()


def uniform_nodes(lo, hi, n) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least 2 nodes per space axis")
    if not hi > lo:
        raise ValueError("space bounds must satisfy x_min < x_max")
    return lo + (hi - lo) * np.arange(n) / (n - 1)


def build_grids(
    spec: ModelSpec,
    level: int,
    x_min=None,
    x_max=None,
    x_count=None,
    simplex_resolution: int = 2,
    x_nodes=None,
    clamp: bool = True,
) -> GridSpec:
    if level < 0:
        raise ValueError("time level must be >= 0")
    if x_nodes is None:
        lo = np.broadcast_to(np.asarray(x_min, dtype=float), (spec.dim,))
        hi = np.broadcast_to(np.asarray(x_max, dtype=float), (spec.dim,))
        cnt = np.broadcast_to(np.asarray(x_count, dtype=int), (spec.dim,))
        x_nodes = tuple(uniform_nodes(lo[i], hi[i], int(cnt[i])) for i in range(spec.dim))
    else:
        x_nodes = tuple(np.asarray(a, dtype=float) for a in x_nodes)
        if len(x_nodes) != spec.dim:
            raise ValueError("x_nodes must have one array per dimension")
        for a in x_nodes:
            if a.size < 1 or np.any(np.diff(a) <= 0):
                raise ValueError("space nodes must be strictly increasing")
    simplex = build_simplex(spec.K, simplex_resolution)
    return GridSpec(spec.T, int(level), x_nodes, simplex, clamp)


def next_grid_time(grids: GridSpec, t: float, strict: bool = False):
    """Smallest node >= t (> t if strict), or BeyondHorizon once nothing below T qualifies.

    A time within a relative 1e-9 of a node counts as that node, so node
    times computed as j*T/2**n never skip ahead through float noise.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    r = t * 2**grids.level / grids.T
    jr = round(r)
    if abs(r - jr) <= NODE_SNAP * max(1.0, abs(r)):
        j = jr + 1 if strict else jr
    else:
        j = math.floor(r) + 1 if strict else math.ceil(r)
    if j > grids.n_intervals:
        return BeyondHorizon
    return grids.time(j)


# ---------------------------------------------------------------------------
# value fields
# ---------------------------------------------------------------------------


@dataclass
class ValueField:
    """v_n on (time node, space node, prior node); past T the terminal rule applies."""

    values: np.ndarray
    grids: GridSpec
    beyond_horizon_terminal: bool = True

    def slice(self, j: int) -> np.ndarray:
        return self.values[j]

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise NonFiniteValue(f"non-finite value at node {tuple(bad)}")


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------


def x_corners(grids: GridSpec, X: np.ndarray):
    """Multilinear corner flat indices and weights: both (P, 2**d)."""
    X = np.asarray(X, dtype=float)
    P, d = X.shape
    if grids.clamp:
        X = np.clip(X, grids.lo, grids.hi)
    elif np.any(X < grids.lo - 1e-12) or np.any(X > grids.hi + 1e-12):
        raise OutOfDomain("state outside the space box and clamping is disabled")
    idx_lo = []
    frac = []
    for i, nodes in enumerate(grids.x_nodes):
        n = nodes.size
        if n == 1:
            idx_lo.append(np.zeros(P, dtype=int))
            frac.append(np.zeros(P))
            continue
        k = np.clip(np.searchsorted(nodes, X[:, i], side="right") - 1, 0, n - 2)
        f = (X[:, i] - nodes[k]) / (nodes[k + 1] - nodes[k])
        idx_lo.append(k)
        frac.append(np.clip(f, 0.0, 1.0))
    shape = grids.x_shape
    strides = np.array([int(np.prod(shape[i + 1 :])) for i in range(d)])
    nc = 2**d
    idx = np.zeros((P, nc), dtype=int)
    wts = np.ones((P, nc))
    for c in range(nc):
        for i in range(d):
            bit = (c >> (d - 1 - i)) & 1
            step = bit if shape[i] > 1 else 0
            idx[:, c] += (idx_lo[i] + step) * strides[i]
            wts[:, c] *= frac[i] if bit else (1.0 - frac[i])
    return idx, wts


def interpolate_slice(grids: GridSpec, slice_values: np.ndarray, X, W) -> np.ndarray:
    """Interpolate one time slice at points X (P, d) with priors W (P, K)."""
    F = slice_values.reshape(grids.n_x, grids.simplex.size)
    xi, xw = x_corners(grids, X)
    pi, pw = simplex_corners(grids.simplex, W)
    vals = F[xi[:, :, None], pi[:, None, :]]
    return (vals * xw[:, :, None] * pw[:, None, :]).sum(axis=(1, 2))


def interpolate(field: ValueField, spec: ModelSpec, state: State, prior: Prior) -> float:
    grids = field.grids
    X = state.xa[None, :]
    W = prior.weights[None, :]
    if state.t > grids.T + 1e-12 * max(1.0, grids.T):
        if grids.clamp:
            X = np.clip(X, grids.lo, grids.hi)
        elif np.any(X < grids.lo) or np.any(X > grids.hi):
            raise OutOfDomain("state outside the space box and clamping is disabled")
        return float(terminal_gain_batch(spec, np.array([state.t]), X, W)[0])
    j = grids.time_index(state.t)
    if j is None:
        raise ValueError(f"t={state.t} is not a node of the time grid")
    return float(interpolate_slice(grids, field.values[j], X, W)[0])


# ---------------------------------------------------------------------------
# diffusion propagation
# ---------------------------------------------------------------------------


def hermite_rule(n: int, d: int):
    """Tensor Gauss-Hermite rule for a standard normal in R^d: nodes (L, d), weights (L,)."""
    z, w = hermgauss(n)
    z = z * math.sqrt(2.0)
    w = w / math.sqrt(math.pi)
    mesh = np.meshgrid(*([z] * d), indexing="ij")
    Z = np.stack([m.reshape(-1) for m in mesh], -1)
    Wt = np.prod(np.meshgrid(*([w] * d), indexing="ij"), axis=0).reshape(-1)
    return Z, Wt


def propagate(spec: ModelSpec, t0, X, gap, substeps=DEFAULT_SUBSTEPS, hermite=DEFAULT_HERMITE):
    """Euler-Hermite tree for the uncontrolled diffusion.

    ``X`` is (P, d); ``t0`` and ``gap`` broadcast to (P,).  Returns leaves
    (P, L, d) and leaf weights (L,), the same for every start point.
    """
    X = np.asarray(X, dtype=float)
    P, d = X.shape
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (P,))
    gap = np.broadcast_to(np.asarray(gap, dtype=float), (P,))
    if np.any(gap < 0):
        raise ValueError("cannot propagate backwards in time")
    leaves = X[:, None, :]
    lw = np.ones(1)
    if not np.any(gap > 0):
        return leaves, lw
    h = gap / substeps
    stochastic = not spec.diffusion.is_zero
    if stochastic:
        Z, Zw = hermite_rule(hermite, d)
    for k in range(substeps):
        t = (t0 + k * h)[:, None]
        L = leaves.shape[1]
        flat = leaves.reshape(-1, d)
        tt = np.repeat(t, L, axis=1).reshape(-1)
        mu = spec.drift(tt, flat).reshape(P, L, d)
        leaves = leaves + mu * h[:, None, None]
        if stochastic:
            sig = spec.diffusion(tt, flat).reshape(P, L, d, d)
            shocks = np.einsum("plij,qj->plqi", sig, Z) * np.sqrt(h)[:, None, None, None]
            leaves = (leaves[:, :, None, :] + shocks).reshape(P, L * Z.shape[0], d)
            lw = np.outer(lw, Zw).reshape(-1)
    return leaves, lw


def transition_weights(grids, spec, t0, X, gap, substeps=DEFAULT_SUBSTEPS, hermite=DEFAULT_HERMITE):
    """Dense map from start points to space-grid weights after diffusing ``gap``.

    Row ``p`` holds E[phi(X_gap)] as a linear form in the nodal values of
    phi under multilinear interpolation: shape (P, n_x).
    """
    leaves, lw = propagate(spec, t0, X, gap, substeps, hermite)
    P, L, d = leaves.shape
    xi, xw = x_corners(grids, leaves.reshape(-1, d))
    nc = xi.shape[1]
    rows = np.repeat(np.arange(P), L * nc)
    flat = rows * grids.n_x + xi.reshape(-1)
    vals = (xw.reshape(P, L, nc) * lw[None, :, None]).reshape(-1)
    return np.bincount(flat, weights=vals, minlength=P * grids.n_x).reshape(P, grids.n_x)


def wait_expectation(
    field: ValueField,
    spec: ModelSpec,
    state: State,
    prior: Prior,
    until: float,
    substeps: int = DEFAULT_SUBSTEPS,
    hermite: int = DEFAULT_HERMITE,
) -> float:
    """E[v(until, X_until, m)] for the uncontrolled diffusion started at ``state``.

    The prior is held fixed while waiting.  ``until`` must be a grid node
    or lie past the horizon, where the terminal rule is used.
    """
    if until < state.t:
        raise ValueError("until must not precede the current time")
    grids = field.grids
    gap = until - state.t
    leaves, lw = propagate(spec, state.t, state.xa[None, :], gap, substeps, hermite)
    pts = leaves[0]
    W = np.broadcast_to(prior.weights, (pts.shape[0], prior.K))
    if until > grids.T + 1e-12 * max(1.0, grids.T):
        if grids.clamp:
            pts = np.clip(pts, grids.lo, grids.hi)
        vals = terminal_gain_batch(spec, np.full(pts.shape[0], until), pts, W)
    else:
        j = grids.time_index(until)
        if j is None:
            raise ValueError(f"until={until} is not a grid node")
        vals = interpolate_slice(grids, field.values[j], pts, W)
    return float(lw @ vals)


def tv_distance(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a) - np.asarray(b)).sum())
