"""Exact expectimax on small, fully discrete instances.

Everything here runs in :class:`fractions.Fraction` arithmetic and never
interpolates, so it serves as ground truth for the grid solver and the
simulator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from importlib import resources

from .errors import InvalidModelParams, StateEscape
from .model import GainSpec, Impulse, make_tabular_model


def _frac(v) -> Fraction:
    return v if isinstance(v, Fraction) else Fraction(str(v))


@dataclass(frozen=True)
class Outcome:
    latency: Fraction
    next_state: Fraction
    base_weight: Fraction
    likelihood: tuple


@dataclass(frozen=True)
class DiscreteInstance:
    name: str
    horizon: Fraction
    level: int
    parameters: tuple
    prior: tuple
    states: tuple
    gain: tuple  # gain[i][k] at states[i] under parameter k
    late_penalty: Fraction
    actions: tuple  # labels
    kernels: dict  # label -> tuple over states of tuple[Outcome]
    start: tuple  # (t, x)
    simplex_resolution: int = 2
    description: str = ""

    def __post_init__(self):
        K = len(self.parameters)
        if sum(self.prior) != 1 or any(w < 0 for w in self.prior) or len(self.prior) != K:
            raise InvalidModelParams("prior", "must be K nonnegative weights summing to 1")
        if len(self.gain) != len(self.states) or any(len(r) != K for r in self.gain):
            raise InvalidModelParams("gain", "need one row of K values per state")
        for label in self.actions:
            table = self.kernels.get(label)
            if table is None or len(table) != len(self.states):
                raise InvalidModelParams(f"kernels.{label}", "need one outcome list per state")
            for i, outs in enumerate(table):
                for k in range(K):
                    mass = sum(o.base_weight * o.likelihood[k] for o in outs)
                    if mass != 1:
                        raise InvalidModelParams(
                            f"kernels.{label}[{i}]", f"mass {mass} under parameter {k}, expected 1"
                        )
                if any(o.latency < 0 or o.base_weight <= 0 for o in outs):
                    raise InvalidModelParams(f"kernels.{label}[{i}]", "bad latency or base weight")

    @property
    def K(self) -> int:
        return len(self.parameters)

    @property
    def n_intervals(self) -> int:
        return 2**self.level

    def time(self, j: int) -> Fraction:
        return self.horizon * j / 2**self.level

    def state_index(self, x) -> int:
        try:
            return self.states.index(_frac(x))
        except ValueError:
            raise StateEscape(f"landing state {x} is not in the state set") from None

    def terminal(self, t: Fraction, i: int, m: tuple) -> Fraction:
        late = max(t - self.horizon, Fraction(0))
        return sum(w * g for w, g in zip(m, self.gain[i])) - self.late_penalty * late


def load_instance(data) -> DiscreteInstance:
    """Build an instance from its JSON form (numbers may be strings like ``"1/3"``)."""
    if isinstance(data, str):
        data = json.loads(data)
    states = tuple(_frac(s) for s in data["states"])
    K = len(data["parameters"])
    kernels = {}
    for label, table in data["kernels"].items():
        kernels[label] = tuple(
            tuple(
                Outcome(_frac(o["latency"]), _frac(o["next"]), _frac(o["Q"]), tuple(_frac(v) for v in o["q"]))
                for o in outs
            )
            for outs in table
        )
    gain = data["gain"]
    if isinstance(gain, dict):  # affine shortcut: g = a * x + b_k
        a = _frac(gain.get("x", 0))
        b = [_frac(v) for v in gain.get("param", [0] * K)]
        gain = [[a * s + b[k] for k in range(K)] for s in states]
    inst = DiscreteInstance(
        name=data.get("name", ""),
        horizon=_frac(data["horizon"]),
        level=int(data["level"]),
        parameters=tuple(_frac(u) for u in data["parameters"]),
        prior=tuple(_frac(w) for w in data["prior"]),
        states=states,
        gain=tuple(tuple(_frac(v) for v in row) for row in gain),
        late_penalty=_frac(data.get("late_penalty", 0)),
        actions=tuple(data["actions"]),
        kernels=kernels,
        start=(_frac(data["start"]["t"]), _frac(data["start"]["x"])),
        simplex_resolution=int(data.get("simplex_resolution", 2)),
        description=data.get("description", ""),
    )
    for label in inst.actions:
        for outs in inst.kernels[label]:
            for o in outs:
                inst.state_index(o.next_state)
    return inst


def bundled_instances() -> dict:
    pkg = resources.files("bayesimpulse") / "instances"
    out = {}
    for entry in sorted(pkg.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".json"):
            inst = load_instance(entry.read_text())
            out[inst.name] = inst
    return out


def _update(m, q):
    joint = [w * l for w, l in zip(m, q)]
    z = sum(joint)
    return tuple(v / z for v in joint), z


@dataclass
class PolicyNode:
    t: Fraction
    x: Fraction
    prior: tuple
    action: str | None  # None means Wait
    value: Fraction
    children: list = field(default_factory=list)  # (probability, PolicyNode)


class _Solver:
    def __init__(self, inst: DiscreteInstance, learn: bool):
        self.inst = inst
        self.learn = learn
        self._cache = {}

    def next_node(self, j: int, theta: Fraction):
        """Index of the first node >= theta and > t_j, or None past the horizon."""
        inst = self.inst
        if theta > inst.horizon:
            return None
        r = theta * 2**inst.level / inst.horizon
        s = -((-r.numerator) // r.denominator)  # ceil
        return max(s, j + 1) if j < inst.n_intervals else None

    def branches(self, j: int, i: int, m: tuple):
        """[(label or None, value, children)] in tie-break order."""
        inst = self.inst
        t = inst.time(j)
        out = []
        if j == inst.n_intervals:
            out.append((None, inst.terminal(t, i, m), []))
        else:
            out.append((None, self.value(j + 1, i, m), [(Fraction(1), ("node", j + 1, i, m))]))
        for label in inst.actions:
            total = Fraction(0)
            kids = []
            for o in inst.kernels[label][i]:
                pred = sum(w * l for w, l in zip(m, o.likelihood))
                weight = o.base_weight * pred
                if weight == 0:
                    continue
                post = _update(m, o.likelihood)[0] if self.learn else m
                theta = t + o.latency
                ni = inst.state_index(o.next_state)
                s = None if j == inst.n_intervals else self.next_node(j, theta)
                if s is None:
                    cont = inst.terminal(theta, ni, post)
                    kids.append((weight, ("leaf", theta, ni, post)))
                else:
                    cont = self.value(s, ni, post)
                    kids.append((weight, ("node", s, ni, post)))
                total += weight * cont
            out.append((label, total, kids))
        return out

    def value(self, j: int, i: int, m: tuple) -> Fraction:
        key = (j, i, m)
        if key not in self._cache:
            br = self.branches(j, i, m)
            self._cache[key] = max(v for _, v, _ in br)
        return self._cache[key]

    def choice(self, j, i, m):
        br = self.branches(j, i, m)
        best = max(v for _, v, _ in br)
        for label, v, kids in br:  # first maximiser: Wait, then action order
            if v == best:
                return label, v, kids


def _start(inst, z0, m0):
    t0, x0 = z0 if z0 is not None else inst.start
    t0 = _frac(t0)
    r = t0 * 2**inst.level / inst.horizon
    if r.denominator != 1 or not 0 <= r <= inst.n_intervals:
        raise ValueError(f"start time {t0} is not a grid node")
    m = tuple(_frac(w) for w in (m0 if m0 is not None else inst.prior))
    return int(r), inst.state_index(x0), m


def exact_value(inst: DiscreteInstance, z0=None, m0=None, learn: bool = True) -> Fraction:
    """Expectimax value; ``learn=False`` pins the posterior to the prior."""
    j, i, m = _start(inst, z0, m0)
    return _Solver(inst, learn).value(j, i, m)


def exact_policy(inst: DiscreteInstance, z0=None, m0=None) -> PolicyNode:
    """Optimal action at every reachable node (Wait first on ties, then action order)."""
    j, i, m = _start(inst, z0, m0)
    solver = _Solver(inst, True)

    def build(j, i, m):
        label, v, kids = solver.choice(j, i, m)
        node = PolicyNode(inst.time(j), inst.states[i], m, label, v)
        for w, kid in kids:
            if kid[0] == "node":
                node.children.append((w, build(*kid[1:])))
        return node

    return build(j, i, m)


def reachable_nodes(inst: DiscreteInstance, z0=None, m0=None):
    """All (time index, state index, prior) nodes reachable under any action sequence."""
    j, i, m = _start(inst, z0, m0)
    solver = _Solver(inst, True)
    seen = set()
    stack = [(j, i, m)]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        for _, _, kids in solver.branches(*node):
            for _, kid in kids:
                if kid[0] == "node":
                    stack.append(kid[1:])
    return sorted(seen)


def node_values(inst: DiscreteInstance, z0=None, m0=None) -> dict:
    solver = _Solver(inst, True)
    return {n: solver.value(*n) for n in reachable_nodes(inst, z0, m0)}


# ---------------------------------------------------------------------------
# bridge to the grid solver
# ---------------------------------------------------------------------------


def to_model(inst: DiscreteInstance):
    """Tabular model whose grid solution can be compared with the expectimax."""
    if not inst.actions:
        raise InvalidModelParams("actions", "the grid solver needs at least one action")
    T = float(inst.horizon)
    kernels = {}
    actions = []
    for label in inst.actions:
        table = inst.kernels[label]
        kernels[label] = [
            [(float(o.latency), inst.state_index(o.next_state), float(o.base_weight), [float(v) for v in o.likelihood]) for o in outs]
            for outs in table
        ]
        lat = max((o.latency for outs in table for o in outs), default=Fraction(0))
        actions.append(Impulse(float(min(lat, inst.horizon)), (0.0,), label))
    states = [float(s) for s in inst.states]
    gain = GainSpec(
        table=(tuple(states), tuple(tuple(float(v) for v in row) for row in inst.gain)),
        late_penalty=float(inst.late_penalty),
    )
    return make_tabular_model(
        horizon=T,
        parameters=[float(u) for u in inst.parameters],
        states=states,
        kernels=kernels,
        actions=actions,
        gain=gain,
    )


def to_grids(inst: DiscreteInstance, spec=None, level: int | None = None):
    from .numerics import build_grids

    spec = spec or to_model(inst)
    return build_grids(
        spec,
        inst.level if level is None else level,
        x_nodes=[[float(s) for s in inst.states]],
        simplex_resolution=inst.simplex_resolution,
    )


def compare_with_grid(inst: DiscreteInstance, values, grids, z0=None, m0=None) -> dict:
    """Largest |grid value - exact value| over reachable nodes that the grid contains."""
    worst = 0.0
    where = None
    shared = 0
    for (j, i, m), v in node_values(inst, z0, m0).items():
        p = grids.simplex.index_of([float(w) for w in m])
        if p is None:
            continue
        shared += 1
        err = abs(float(values[j, i, p]) - float(v))
        if err > worst or where is None:
            worst, where = max(worst, err), (j, i, p)
    return {"max_abs_error": worst, "shared_nodes": shared, "worst_node": where}
