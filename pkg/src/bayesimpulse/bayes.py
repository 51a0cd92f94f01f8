"""Finite-support priors over the unknown reaction parameter and their Bayes update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMass, DegeneratePosterior

NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class ParameterSet:
    """Ordered, distinct parameter points u_1..u_K (scalars in the built-in families)."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 1:
            raise ValueError("a parameter set needs at least one point")
        if len(set(vals)) != len(vals):
            raise ValueError(f"parameter points must be distinct, got {vals}")
        object.__setattr__(self, "values", vals)

    @property
    def K(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)


class Prior:
    """Probability weights on a :class:`ParameterSet`.

    Instances are immutable; the weight array is made read-only.
    """

    __slots__ = ("_w",)

    def __init__(self, weights):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.size < 1 or not np.all(np.isfinite(w)):
            raise DegenerateMass(f"invalid prior weights {weights!r}")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > NORMALIZATION_TOL:
            raise DegenerateMass(
                f"prior weights must be nonnegative and sum to 1, got {w.tolist()}"
            )
        w.setflags(write=False)
        self._w = w

    @property
    def weights(self) -> np.ndarray:
        return self._w

    @property
    def K(self) -> int:
        return self._w.size

    @classmethod
    def dirac(cls, k: int, K: int) -> "Prior":
        w = np.zeros(K)
        w[k] = 1.0
        return cls(w)

    @classmethod
    def uniform(cls, K: int) -> "Prior":
        return normalize(np.ones(K))

    def mean(self, values) -> float:
        return float(self._w @ np.asarray(values, dtype=float))

    def variance(self, values) -> float:
        v = np.asarray(values, dtype=float)
        mu = self._w @ v
        return float(self._w @ (v - mu) ** 2)

    def __eq__(self, other):
        return isinstance(other, Prior) and np.array_equal(self._w, other._w)

    def __hash__(self):
        return hash(self._w.tobytes())

    def __repr__(self):
        return f"Prior({self._w.tolist()})"


def normalize(raw_weights) -> Prior:
    w = np.array(raw_weights, dtype=float).reshape(-1)
    if w.size == 0 or np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise DegenerateMass(f"weights must be finite and nonnegative, got {w.tolist()}")
    total = w.sum()
    if total <= 0.0:
        raise DegenerateMass("total mass is zero")
    return Prior(w / total)


def predictive_density(prior: Prior, likelihood) -> float:
    """Mixture density of an observation: sum_k m_k q_k."""
    q = np.asarray(likelihood, dtype=float)
    return float(prior.weights @ q)


def bayes_update(prior: Prior, likelihood, truncate_below: float | None = None) -> Prior:
    """Posterior weights m_k q_k / sum_j m_j q_j.

    Tiny weights are kept unless ``truncate_below`` is given, so the
    martingale identity of the update is preserved exactly.
    """
    q = np.asarray(likelihood, dtype=float)
    if q.shape != prior.weights.shape:
        raise ValueError(f"likelihood has shape {q.shape}, expected {prior.weights.shape}")
    if np.any(q < 0.0):
        raise ValueError("likelihood entries must be nonnegative")
    joint = prior.weights * q
    z = joint.sum()
    if not z > 0.0:
        raise DegeneratePosterior(
            "observation has zero predictive density under every supported parameter"
        )
    post = joint / z
    if truncate_below is not None:
        post = np.where(post < truncate_below, 0.0, post)
        post = post / post.sum()
    return Prior(post)


def bayes_update_batch(weights: np.ndarray, likelihood: np.ndarray):
    """Vectorised update over trailing axis K.

    Returns ``(posterior, predictive)``; rows with zero predictive density
    get a NaN posterior and must be masked by the caller.
    """
    joint = weights * likelihood
    z = joint.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        post = joint / z[..., None]
    return post, z


def total_variation(a, b) -> float:
    return 0.5 * float(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)).sum())
