"""Problem data: uncontrolled dynamics, impulse response families, likelihoods and gain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from numpy.polynomial.legendre import leggauss

from .bayes import ParameterSet, Prior
from .errors import InvalidModelParams, StateEscape, UnsupportedAction, UnsupportedStateDomain

# ---------------------------------------------------------------------------
# states and actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class State:
    t: float
    x: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "t", float(self.t))
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if not (math.isfinite(self.t) and np.all(np.isfinite(x))):
            raise ValueError(f"non-finite state ({self.t}, {x})")
        if self.t < 0:
            raise ValueError(f"state time must be >= 0, got {self.t}")
        object.__setattr__(self, "x", tuple(x.tolist()))

    @property
    def xa(self) -> np.ndarray:
        return np.asarray(self.x, dtype=float)


class _Wait:
    kind = "wait"
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "Wait"

    def __reduce__(self):
        return (_Wait, ())


Wait = _Wait()


@dataclass(frozen=True)
class Impulse:
    """An order (duration, parameters); ``label`` names actions of tabular models."""

    duration: float
    size: tuple[float, ...]
    label: str = ""
    kind = "impulse"

    def __post_init__(self):
        object.__setattr__(self, "duration", float(self.duration))
        if not self.duration >= 0:
            raise ValueError(f"impulse duration must be >= 0, got {self.duration}")
        object.__setattr__(
            self, "size", tuple(np.atleast_1d(np.asarray(self.size, dtype=float)).tolist())
        )

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.size, dtype=float)


# ---------------------------------------------------------------------------
# outcome kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    landing: State
    base_weight: float
    likelihood: np.ndarray


@dataclass(frozen=True)
class OutcomeKernel:
    """Finite law of the post-impulse state; rows are outcomes.

    ``likelihood[o, k]`` is the density of outcome ``o`` under parameter
    ``k`` with respect to the base weights, so every column integrates to one.
    """

    times: np.ndarray  # (O,)
    xs: np.ndarray  # (O, d)
    base_weight: np.ndarray  # (O,)
    likelihood: np.ndarray  # (O, K)

    @property
    def outcomes(self) -> list[Outcome]:
        return [
            Outcome(State(t, x), float(w), q.copy())
            for t, x, w, q in zip(self.times, self.xs, self.base_weight, self.likelihood)
        ]

    def masses(self) -> np.ndarray:
        return self.base_weight @ self.likelihood

    def __len__(self):
        return self.times.size


# ---------------------------------------------------------------------------
# coefficient families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineDrift:
    A: np.ndarray
    b: np.ndarray

    def __call__(self, t, X):
        return X @ self.A.T + self.b


@dataclass(frozen=True)
class ConstantDiffusion:
    sigma: np.ndarray

    def __call__(self, t, X):
        return np.broadcast_to(self.sigma, X.shape[:-1] + self.sigma.shape)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.sigma)


@dataclass(frozen=True)
class GainSpec:
    """g(t, x, m, u, e) = c0 + <lin, x> + <quad, x**2> + c_u u + c_e <1, e>
    + c_var Var_m(u) - late_penalty (t - T)^+, plus an optional 1-d table in x.

    ``table`` holds ``(states, values)`` with ``values[i, k]`` the gain at
    ``states[i]`` under parameter ``k`` (piecewise linear in x, constant
    outside the states).
    """

    constant: float = 0.0
    linear: tuple[float, ...] = ()
    quadratic: tuple[float, ...] = ()
    param: float = 0.0
    noise: float = 0.0
    variance_reward: float = 0.0
    late_penalty: float = 0.0
    table: tuple | None = None

    def depends_on_noise(self) -> bool:
        return self.noise != 0.0


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "normal"
    scale: float = 1.0


# ---------------------------------------------------------------------------
# impulse families
# ---------------------------------------------------------------------------


class CensoredExecution:
    """Dark-pool order of size beta held for at most ``duration``.

    Execution delay is exponential with rate u.  A fill at time t + D < t + l
    moves x by beta; otherwise the order expires unfilled at t + l.  Every
    order pays ``order_cost``.  Only the landing time and the fill flag carry
    information on u.
    """

    name = "censored_execution"
    default_resolution = 12

    def __init__(self, order_cost):
        self.order_cost = np.asarray(order_cost, dtype=float)

    def validate(self, params: ParameterSet, actions, d):
        if np.any(params.as_array() <= 0):
            raise InvalidModelParams("parameters", "execution rates must be > 0")
        if self.order_cost.shape != (d,):
            raise InvalidModelParams("order_cost", f"expected length {d}")

    def kernel(self, t, X, action, u, resolution):
        X = np.atleast_2d(X)
        N, d = X.shape
        ell = action.duration
        shift = action.beta - self.order_cost
        if ell <= 0.0:
            times = np.full((N, 1), float(t))
            xs = (X - self.order_cost)[:, None, :]
            Q = np.ones((N, 1))
            q = np.ones((N, 1, u.size))
            return times, xs, Q, q
        nodes, weights = leggauss(resolution)
        s = 0.5 * ell * (nodes + 1.0)
        w = 0.5 * ell * weights
        fill_q = u[None, :] * np.exp(-np.outer(s, u))
        atom_q = np.exp(-u * ell)[None, :]
        O = resolution + 1
        times = np.empty((N, O))
        times[:, :-1] = t + s
        times[:, -1] = t + ell
        xs = np.empty((N, O, d))
        xs[:, :-1, :] = (X + shift)[:, None, :]
        xs[:, -1, :] = X - self.order_cost
        Q = np.broadcast_to(np.append(w, 1.0), (N, O)).copy()
        q = np.broadcast_to(np.vstack([fill_q, atom_q]), (N, O, u.size)).copy()
        return times, xs, Q, q

    def sample(self, t, X, action, u, k_true, unif, normals):
        """Exact draw of (landing time, landing state, fill flag) per path."""
        ell = action.duration
        delay = -np.log1p(-unif) / u[k_true]
        filled = delay < ell
        theta = np.where(filled, t + delay, t + ell)
        xs = X - self.order_cost + np.where(filled[:, None], action.beta, 0.0)
        return theta, xs, filled

    def observed_likelihood(self, t, X, action, u, theta, x_new, filled):
        elapsed = (theta - t)[:, None]
        fill_q = u[None, :] * np.exp(-elapsed * u[None, :])
        cens_q = np.exp(-action.duration * u)[None, :]
        return np.where(filled[:, None], fill_q, cens_q)

    def describe(self):
        return {"order_cost": self.order_cost.tolist()}


class GaussianImpact:
    """Deterministic latency l; the state jumps by beta*u + impact_noise*e."""

    name = "gaussian_impact"
    default_resolution = 64
    max_resolution = 256  # numpy's Hermite weights overflow beyond a few hundred nodes

    def __init__(self, impact_noise):
        self.impact_noise = float(impact_noise)

    def validate(self, params, actions, d):
        if self.impact_noise < 0:
            raise InvalidModelParams("impact_noise", "must be >= 0")

    def kernel(self, t, X, action, u, resolution):
        X = np.atleast_2d(X)
        N, d = X.shape
        beta = action.beta
        K = u.size
        theta = t + action.duration
        if self.impact_noise == 0.0:
            land = beta[None, :] * u[:, None]  # (K, d)
            uniq, inv = _unique_rows(land)
            O = uniq.shape[0]
            q = np.zeros((O, K))
            q[inv, np.arange(K)] = 1.0
            times = np.full((N, O), theta)
            xs = X[:, None, :] + uniq[None, :, :]
            return times, xs, np.ones((N, O)), np.broadcast_to(q, (N, O, K)).copy()
        if resolution > self.max_resolution:
            raise ValueError(f"Hermite resolution is capped at {self.max_resolution}")
        # base measure: equal-weight mixture of the K conditional laws, each
        # discretised by tensor Hermite nodes; q_k is the density ratio to it
        sf = self.impact_noise
        z, w = hermgauss(resolution)
        grids = np.meshgrid(*([z] * d), indexing="ij")
        Z = np.stack([g.reshape(-1) for g in grids], axis=-1)
        Wn = np.prod(np.meshgrid(*([w] * d), indexing="ij"), axis=0).reshape(-1) / np.pi ** (d / 2)
        means = beta[None, :] * u[:, None]  # (K, d)
        offs = (means[:, None, :] + math.sqrt(2.0) * sf * Z[None, :, :]).reshape(-1, d)
        logphi = -0.5 * (((offs[:, None, :] - means[None, :, :]) / sf) ** 2).sum(-1)  # (O, K)
        top = logphi.max(axis=1, keepdims=True)
        phi = np.exp(logphi - top)
        q = phi / phi.mean(axis=1, keepdims=True)
        Qw = np.tile(Wn, K) / K
        O = offs.shape[0]
        times = np.full((N, O), theta)
        xs = X[:, None, :] + offs[None, :, :]
        return times, xs, np.broadcast_to(Qw, (N, O)).copy(), np.broadcast_to(q, (N, O, K)).copy()

    def sample(self, t, X, action, u, k_true, unif, normals):
        theta = np.full(X.shape[0], t + action.duration)
        xs = X + action.beta[None, :] * u[k_true][:, None] + self.impact_noise * normals
        return theta, xs, None

    def observed_likelihood(self, t, X, action, u, theta, x_new, info):
        jump = x_new - X  # (P, d)
        mean = action.beta[None, None, :] * u[None, :, None]  # (1,K,d)
        if self.impact_noise == 0.0:
            hit = np.all(np.isclose(jump[:, None, :], mean, rtol=0, atol=1e-9), axis=-1)
            return hit.astype(float)
        sf = self.impact_noise
        r = (jump[:, None, :] - mean) / sf
        return np.exp(-0.5 * (r**2).sum(-1)) / (sf * math.sqrt(2 * math.pi)) ** X.shape[1]

    def describe(self):
        return {"impact_noise": self.impact_noise}


class TabularImpulse:
    """Finite kernels attached to a finite state set (one dimension, frozen dynamics).

    ``kernels[label][i]`` lists outcomes ``(latency, next_state_index, Q, q)``
    for an impulse labelled ``label`` fired from ``states[i]``.
    """

    name = "tabular"
    default_resolution = 1

    def __init__(self, states, kernels):
        self.states = np.asarray(states, dtype=float)
        self.kernels = kernels

    def validate(self, params, actions, d):
        if d != 1:
            raise InvalidModelParams("dimension", "tabular models are one-dimensional")
        for a in actions:
            if a.label not in self.kernels:
                raise InvalidModelParams("actions", f"no kernel table for action {a.label!r}")

    def _index(self, x):
        hit = np.flatnonzero(np.abs(self.states - x) <= 1e-12 * max(1.0, abs(x)))
        if hit.size == 0:
            raise StateEscape(f"state {x} is not in the tabulated state set")
        return int(hit[0])

    def kernel(self, t, X, action, u, resolution):
        X = np.atleast_2d(X)
        if action.label not in self.kernels:
            raise UnsupportedAction(f"unknown tabular action {action.label!r}")
        table = self.kernels[action.label]
        rows = [table[self._index(x)] for x in X[:, 0]]
        O = max(len(r) for r in rows)
        N, K = X.shape[0], u.size
        times = np.full((N, O), float(t))
        xs = np.repeat(X[:, None, :], O, axis=1).astype(float)
        Q = np.zeros((N, O))
        q = np.zeros((N, O, K))
        for n, row in enumerate(rows):
            for o, (lat, j, w, lk) in enumerate(row):
                times[n, o] = t + lat
                xs[n, o, 0] = self.states[j]
                Q[n, o] = w
                q[n, o] = lk
        return times, xs, Q, q

    def sample(self, t, X, action, u, k_true, unif, normals):
        table = self.kernels[action.label]
        P = X.shape[0]
        theta = np.empty(P)
        xs = np.empty_like(X)
        picked = np.empty(P, dtype=int)
        for p in range(P):
            row = table[self._index(X[p, 0])]
            probs = np.array([w * lk[k_true[p]] for _, _, w, lk in row])
            o = int(np.searchsorted(np.cumsum(probs), unif[p] * probs.sum(), side="right"))
            o = min(o, len(row) - 1)
            lat, j, _, _ = row[o]
            theta[p] = t + lat
            xs[p, 0] = self.states[j]
            picked[p] = o
        return theta, xs, picked

    def observed_likelihood(self, t, X, action, u, theta, x_new, picked):
        table = self.kernels[action.label]
        return np.array(
            [table[self._index(x)][o][3] for x, o in zip(X[:, 0], picked)], dtype=float
        )

    def describe(self):
        return {"states": self.states.tolist()}


def _unique_rows(a, atol=1e-12):
    uniq = []
    inv = np.empty(a.shape[0], dtype=int)
    for i, row in enumerate(a):
        for j, r in enumerate(uniq):
            if np.allclose(row, r, rtol=0, atol=atol):
                inv[i] = j
                break
        else:
            inv[i] = len(uniq)
            uniq.append(row)
    return np.array(uniq), inv


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    horizon: float
    dim: int
    params: ParameterSet
    drift: AffineDrift
    diffusion: ConstantDiffusion
    impulse: object
    gain: GainSpec
    actions: tuple[Impulse, ...]
    terminal_noise: NoiseSpec = field(default_factory=NoiseSpec)
    domain: tuple | None = None
    extrapolate: bool = True

    @property
    def T(self) -> float:
        return self.horizon

    @property
    def K(self) -> int:
        return self.params.K

    @property
    def u(self) -> np.ndarray:
        return self.params.as_array()

    @property
    def frozen(self) -> bool:
        return self.diffusion.is_zero and not np.any(self.drift.A) and not np.any(self.drift.b)


def _check_domain(spec: ModelSpec, X):
    if spec.domain is None or spec.extrapolate:
        return
    lo, hi = (np.asarray(b, dtype=float) for b in spec.domain)
    if np.any(X < lo - 1e-12) or np.any(X > hi + 1e-12):
        raise UnsupportedStateDomain(f"state {X.tolist()} outside the declared domain")


def drift(spec: ModelSpec, state: State) -> np.ndarray:
    X = state.xa[None, :]
    _check_domain(spec, X)
    return spec.drift(state.t, X)[0]


def diffusion(spec: ModelSpec, state: State) -> np.ndarray:
    X = state.xa[None, :]
    _check_domain(spec, X)
    return np.array(spec.diffusion(state.t, X)[0])


def impulse_outcome_kernel(
    spec: ModelSpec, state: State, action: Impulse, resolution: int
) -> OutcomeKernel:
    if not isinstance(action, Impulse):
        raise UnsupportedAction(f"{action!r} is not an impulse")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    times, xs, Q, q = spec.impulse.kernel(state.t, state.xa[None, :], action, spec.u, resolution)
    keep = Q[0] > 0
    return OutcomeKernel(times[0][keep], xs[0][keep], Q[0][keep], q[0][keep])


def kernel_batch(spec: ModelSpec, t: float, X: np.ndarray, action: Impulse, resolution: int):
    """Kernels for many pre-impulse states at once: arrays with a leading state axis."""
    return spec.impulse.kernel(t, X, action, spec.u, resolution)


def _table_gain(table, X, W):
    states, values = table
    states = np.asarray(states, dtype=float)
    values = np.asarray(values, dtype=float)
    per_k = np.stack([np.interp(X[:, 0], states, values[:, k]) for k in range(values.shape[1])], -1)
    return (per_k * W).sum(-1)


def terminal_gain_batch(spec: ModelSpec, t, X, W) -> np.ndarray:
    """E_m E_e g at many points: t (N,), X (N, d), W (N, K) prior weights."""
    g = spec.gain
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), X.shape[:1])
    u = spec.u
    out = np.full(X.shape[0], float(g.constant))
    if g.linear:
        out = out + X @ np.asarray(g.linear, dtype=float)
    if g.quadratic:
        out = out + (X**2) @ np.asarray(g.quadratic, dtype=float)
    if g.param:
        out = out + g.param * (W @ u)
    if g.variance_reward:
        mu = W @ u
        out = out + g.variance_reward * (W @ u**2 - mu**2)
    if g.noise:
        # additive terminal noise; Hermite quadrature kept for noise laws with nonzero mean
        z, w = hermgauss(8)
        e = math.sqrt(2.0) * spec.terminal_noise.scale * z
        out = out + g.noise * float((w / math.sqrt(math.pi)) @ e) * spec.dim
    if g.table is not None:
        out = out + _table_gain(g.table, X, W)
    if g.late_penalty:
        out = out - g.late_penalty * np.maximum(t - spec.horizon, 0.0)
    return out


def terminal_gain(spec: ModelSpec, state: State, prior: Prior) -> float:
    return float(
        terminal_gain_batch(spec, np.array([state.t]), state.xa[None, :], prior.weights[None, :])[0]
    )


def realized_gain(spec: ModelSpec, t, X, W, k_true, e) -> np.ndarray:
    """g itself at the true parameter index and a terminal-noise draw, per path."""
    g = spec.gain
    u = spec.u
    out = np.full(X.shape[0], float(g.constant))
    if g.linear:
        out = out + X @ np.asarray(g.linear, dtype=float)
    if g.quadratic:
        out = out + (X**2) @ np.asarray(g.quadratic, dtype=float)
    out = out + g.param * u[k_true]
    if g.variance_reward:
        mu = W @ u
        out = out + g.variance_reward * (W @ u**2 - mu**2)
    if g.noise:
        out = out + g.noise * spec.terminal_noise.scale * e.sum(-1)
    if g.table is not None:
        states, values = g.table
        values = np.asarray(values, dtype=float)
        per = np.stack([np.interp(X[:, 0], states, values[:, k]) for k in range(values.shape[1])], -1)
        out = out + per[np.arange(X.shape[0]), k_true]
    out = out - g.late_penalty * np.maximum(t - spec.horizon, 0.0)
    return out


def gain_bound(spec: ModelSpec, lo, hi) -> float:
    """Upper bound of |E g| over the box [lo, hi] and t in [0, 2T]."""
    g = spec.gain
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    bound = abs(g.constant)
    lin = np.asarray(g.linear or [0.0] * spec.dim, dtype=float)
    quad = np.asarray(g.quadratic or [0.0] * spec.dim, dtype=float)
    for i in range(spec.dim):
        cand = [lo[i], hi[i]]
        if quad[i] != 0 and lo[i] <= -lin[i] / (2 * quad[i]) <= hi[i]:
            cand.append(-lin[i] / (2 * quad[i]))
        bound += max(abs(lin[i] * c + quad[i] * c * c) for c in cand)
    u = spec.u
    bound += abs(g.param) * float(np.max(np.abs(u)))
    bound += abs(g.variance_reward) * 0.25 * float(u.max() - u.min()) ** 2
    bound += abs(g.late_penalty) * spec.horizon
    if g.table is not None:
        bound += float(np.max(np.abs(np.asarray(g.table[1], dtype=float))))
    return bound


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def _as_matrix(v, d, name):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.eye(d) * float(a)
    if a.shape != (d, d):
        raise InvalidModelParams(name, f"expected a {d}x{d} matrix, got shape {a.shape}")
    return a


def _as_vector(v, d, name):
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full(d, float(a))
    if a.shape != (d,):
        raise InvalidModelParams(name, f"expected length {d}, got shape {a.shape}")
    return a


def _build(
    family,
    *,
    horizon,
    dimension,
    parameters,
    drift_A,
    drift_b,
    sigma,
    gain,
    actions,
    terminal_noise_scale=1.0,
    domain=None,
    extrapolate=True,
):
    if not horizon > 0:
        raise InvalidModelParams("horizon", "must be > 0")
    d = int(dimension)
    if not 1 <= d <= 3:
        raise InvalidModelParams("dimension", "supported dimensions are 1, 2 and 3")
    try:
        params = ParameterSet(tuple(parameters))
    except ValueError as exc:
        raise InvalidModelParams("parameters", str(exc)) from None
    acts = []
    for i, a in enumerate(actions):
        if not isinstance(a, Impulse):
            a = Impulse(**a) if isinstance(a, dict) else Impulse(*a)
        if not 0.0 <= a.duration <= horizon:
            raise InvalidModelParams(f"actions[{i}].duration", f"must lie in [0, {horizon}]")
        if family.name != "tabular" and len(a.size) != d:
            raise InvalidModelParams(f"actions[{i}].size", f"expected length {d}")
        acts.append(a)
    if not acts:
        raise InvalidModelParams("actions", "the action grid must be nonempty")
    if not isinstance(gain, GainSpec):
        gain = GainSpec(**gain)
    for name in ("linear", "quadratic"):
        v = getattr(gain, name)
        if v and len(v) != d:
            raise InvalidModelParams(f"gain.{name}", f"expected length {d}")
    family.validate(params, acts, d)
    spec = ModelSpec(
        horizon=float(horizon),
        dim=d,
        params=params,
        drift=AffineDrift(_as_matrix(drift_A, d, "drift.A"), _as_vector(drift_b, d, "drift.b")),
        diffusion=ConstantDiffusion(_as_matrix(sigma, d, "diffusion.sigma")),
        impulse=family,
        gain=gain,
        actions=tuple(acts),
        terminal_noise=NoiseSpec("normal", float(terminal_noise_scale)),
        domain=domain,
        extrapolate=extrapolate,
    )
    return spec


def make_censored_execution_model(
    *,
    horizon: float = 1.0,
    dimension: int = 1,
    rates: Sequence[float] = (0.5, 2.0),
    order_cost=0.0,
    drift_A=0.0,
    drift_b=0.0,
    sigma=0.0,
    gain=None,
    actions=None,
    **kw,
) -> ModelSpec:
    """Dark-pool execution with exponentially distributed, right-censored fill times."""
    if gain is None:
        gain = GainSpec(linear=(1.0,) * dimension, late_penalty=1.0)
    if actions is None:
        actions = [Impulse(horizon / 4, (1.0,) * dimension), Impulse(horizon / 2, (1.0,) * dimension)]
    return _build(
        CensoredExecution(_as_vector(order_cost, dimension, "order_cost")),
        horizon=horizon,
        dimension=dimension,
        parameters=rates,
        drift_A=drift_A,
        drift_b=drift_b,
        sigma=sigma,
        gain=gain,
        actions=actions,
        **kw,
    )


def make_gaussian_impact_model(
    *,
    horizon: float = 1.0,
    dimension: int = 1,
    impacts: Sequence[float] = (-1.0, 1.0),
    impact_noise: float = 0.5,
    drift_A=0.0,
    drift_b=0.0,
    sigma=0.0,
    gain=None,
    actions=None,
    **kw,
) -> ModelSpec:
    """Impulses with deterministic latency and a Gaussian, parameter-scaled jump."""
    if gain is None:
        gain = GainSpec(linear=(1.0,) * dimension)
    if actions is None:
        actions = [Impulse(horizon / 4, (1.0,) * dimension)]
    return _build(
        GaussianImpact(impact_noise),
        horizon=horizon,
        dimension=dimension,
        parameters=impacts,
        drift_A=drift_A,
        drift_b=drift_b,
        sigma=sigma,
        gain=gain,
        actions=actions,
        **kw,
    )


def make_tabular_model(*, horizon, parameters, states, kernels, actions, gain) -> ModelSpec:
    return _build(
        TabularImpulse(states, kernels),
        horizon=horizon,
        dimension=1,
        parameters=parameters,
        drift_A=0.0,
        drift_b=0.0,
        sigma=0.0,
        gain=gain,
        actions=actions,
    )
