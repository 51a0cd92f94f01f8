"""Feedback policies read off a solved value field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bayes import Prior
from .errors import GridMismatch, OutOfDomain
from .model import Impulse, ModelSpec, State, Wait
from .numerics import GridSpec
from .solver import WAIT_CODE, SolveReport

TIE_BREAK_RULE = "wait-first-then-lowest-action-index"


@dataclass(frozen=True)
class Policy:
    """Action codes on (time node, space node, simplex node); -1 means Wait."""

    codes: np.ndarray
    actions: tuple
    grids: GridSpec
    epsilon: float = 0.0
    model_hash: str = ""

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.codes.shape != self.grids.field_shape:
            raise GridMismatch("policy table does not match the grid shape")
        if self.codes.size and (self.codes.min() < WAIT_CODE or self.codes.max() >= len(self.actions)):
            raise ValueError("policy table holds an unknown action code")
        self.codes.setflags(write=False)

    def action(self, code: int):
        return Wait if code == WAIT_CODE else self.actions[code]

    def header(self) -> dict:
        return {
            "grids": self.grids.describe(),
            "epsilon": self.epsilon,
            "tie_break": TIE_BREAK_RULE,
            "model_hash": self.model_hash,
            "actions": [
                {"duration": a.duration, "size": list(a.size), "label": a.label} for a in self.actions
            ],
        }


def extract_policy(
    report: SolveReport,
    spec: ModelSpec,
    grids: GridSpec,
    epsilon: float = 0.0,
    model_hash: str = "",
) -> Policy:
    """Policy storing, at each node, the action chosen during backward induction.

    At nodes the stored branch is optimal up to the solver's tie tolerance,
    so ``epsilon`` only has to cover lookups away from the nodes.
    """
    if not report.grids.same_as(grids):
        raise GridMismatch("the report was solved on a different grid")
    if report.decisions.shape != grids.field_shape:
        raise GridMismatch("decision table shape does not match the grid")
    if report.decisions.size and report.decisions.max() >= len(spec.actions):
        raise GridMismatch("decision table refers to actions the model does not have")
    codes = np.array(report.decisions, dtype=np.int32, copy=True)
    return Policy(codes, tuple(spec.actions), grids, float(epsilon), model_hash)


def _time_nodes(grids: GridSpec, t: np.ndarray) -> np.ndarray:
    """Last time node at or before t (float noise below a node is forgiven)."""
    scaled = np.asarray(t, dtype=float) * 2**grids.level / grids.T
    return np.floor(scaled + 1e-9).astype(np.int64)


def nearest_x(grids: GridSpec, X: np.ndarray) -> np.ndarray:
    """Flat index of the nearest space node; per-axis rounding on the tensor grid.

    On a tensor grid this is the nearest node for the Euclidean distance
    scaled by each axis's spacing.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not grids.clamp and (np.any(X < grids.lo - 1e-12) or np.any(X > grids.hi + 1e-12)):
        raise OutOfDomain("state outside the space box and clamping is disabled")
    flat = np.zeros(X.shape[0], dtype=np.int64)
    for i, nodes in enumerate(grids.x_nodes):
        xi = np.clip(X[:, i], nodes[0], nodes[-1])
        k = np.searchsorted(nodes, xi, side="left")
        k = np.clip(k, 1, nodes.size - 1) if nodes.size > 1 else np.zeros_like(k)
        if nodes.size > 1:
            left = nodes[k - 1]
            right = nodes[k]
            k = np.where(xi - left <= right - xi, k - 1, k)
        flat = flat * nodes.size + k
    return flat


def nearest_prior(grids: GridSpec, W: np.ndarray) -> np.ndarray:
    """Simplex node closest in total variation; ties go to the lowest node index."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    tv = 0.5 * np.abs(W[:, None, :] - grids.simplex.weights[None, :, :]).sum(-1)
    return np.argmin(tv, axis=1)


def lookup_codes(policy: Policy, t, X, W) -> np.ndarray:
    """Vectorised lookup returning action codes; past the horizon it is always Wait."""
    grids = policy.grids
    t = np.atleast_1d(np.asarray(t, dtype=float))
    j = _time_nodes(grids, t)
    if np.any(j < 0):
        raise ValueError("query time precedes the grid")
    late = j > grids.n_intervals
    jc = np.minimum(j, grids.n_intervals)
    xi = nearest_x(grids, X)
    pi = nearest_prior(grids, W)
    flat = policy.codes.reshape(grids.n_intervals + 1, grids.n_x, grids.simplex.size)
    codes = flat[jc, xi, pi]
    return np.where(late, WAIT_CODE, codes).astype(np.int32)


def lookup(policy: Policy, state: State, prior: Prior):
    """Action for a state at or after a time node (nearest node in x and prior)."""
    T = policy.grids.T
    if state.t > T + 1e-12 * max(1.0, T):
        return Wait
    code = int(lookup_codes(policy, [state.t], state.xa[None, :], prior.weights[None, :])[0])
    return policy.action(code)


def is_impulse(action) -> bool:
    return isinstance(action, Impulse)
