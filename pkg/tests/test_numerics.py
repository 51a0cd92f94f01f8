import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesimpulse.bayes import Prior
from bayesimpulse.errors import NonFiniteValue, OutOfDomain, UnsupportedSimplexDimension
from bayesimpulse.model import GainSpec, State, make_censored_execution_model, terminal_gain
from bayesimpulse.numerics import (
    BeyondHorizon,
    ValueField,
    build_grids,
    build_simplex,
    interpolate,
    interpolate_slice,
    next_grid_time,
    propagate,
    simplex_corners,
    transition_weights,
    wait_expectation,
)


def spec1(**kw):
    kw.setdefault("gain", GainSpec(linear=(1.0,)))
    return make_censored_execution_model(**kw)


def field_from(grids, fn):
    """Field with values fn(t, x (n_x, d), W (Np, K)) -> (n_x, Np) on every slice."""
    X = grids.x_points()
    W = grids.simplex.weights
    vals = np.stack([fn(grids.time(j), X, W).reshape(grids.x_shape + (W.shape[0],)) for j in range(grids.n_intervals + 1)])
    return ValueField(vals, grids)


def test_time_grids_are_dyadic_and_nested():
    s = spec1()
    assert build_grids(s, 1, -1, 1, 3).times.tolist() == [0.0, 0.5, 1.0]
    g2 = build_grids(s, 2, -1, 1, 3)
    assert g2.times.tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    for n in range(6):
        coarse = set(build_grids(s, n, -1, 1, 3).times.tolist())
        fine = set(build_grids(s, n + 1, -1, 1, 3).times.tolist())
        assert coarse <= fine


def test_nested_for_awkward_horizon():
    s = spec1(horizon=0.7)
    coarse = build_grids(s, 3, -1, 1, 3).times
    fine = build_grids(s, 4, -1, 1, 3).times
    assert np.array_equal(coarse, fine[::2])


def test_simplex_grid_for_two_parameters():
    sg = build_grids(spec1(), 0, -1, 1, 3, simplex_resolution=5).simplex
    assert sg.weights[:, 0].tolist() == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert np.allclose(sg.weights.sum(1), 1.0)


def test_simplex_grid_three_parameters_and_limit():
    sg = build_simplex(3, 4)
    assert sg.size == 10
    assert np.all(sg.weights >= 0) and np.allclose(sg.weights.sum(1), 1.0)
    with pytest.raises(UnsupportedSimplexDimension):
        build_simplex(4, 3)


def test_simplex_index_of_nodes():
    sg = build_simplex(3, 5)
    for i, w in enumerate(sg.weights):
        assert sg.index_of(w) == i
    assert sg.index_of([0.3, 0.3, 0.4]) is None


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 3), st.integers(2, 9), st.data())
def test_simplex_interpolation_is_exact_for_affine_functions(K, res, data):
    sg = build_simplex(K, res)
    coef = np.array(data.draw(st.lists(st.floats(-5, 5), min_size=K, max_size=K)))
    raw = np.array(data.draw(st.lists(st.floats(0.0, 1.0), min_size=K, max_size=K)))
    if raw.sum() < 1e-6:
        raw[0] = 1.0
    w = raw / raw.sum()
    idx, lam = simplex_corners(sg, w[None, :])
    assert np.all(lam >= -1e-15) and abs(lam.sum() - 1) < 1e-14
    approx = float((lam[0] * (sg.weights[idx[0]] @ coef)).sum())
    assert approx == pytest.approx(float(w @ coef), abs=1e-12)


def test_interpolate_examples():
    s = spec1()
    g = build_grids(s, 1, -2.0, 2.0, 5, simplex_resolution=3)
    f = field_from(g, lambda t, X, W: X[:, :1] + 0 * W[:, 0][None, :] + t)
    # at a node
    assert interpolate(f, s, State(0.5, (1.0,)), Prior([0.5, 0.5])) == 1.5
    # midway between nodes
    assert interpolate(f, s, State(0.0, (0.5,)), Prior([0.3, 0.7])) == pytest.approx(0.5, abs=1e-15)
    # beyond the horizon the terminal rule applies
    beyond = interpolate(f, s, State(1.3, (0.7,)), Prior([0.5, 0.5]))
    assert beyond == terminal_gain(s, State(1.3, (0.7,)), Prior([0.5, 0.5]))


def test_interpolate_affine_in_x_and_prior():
    s = spec1(rates=(0.5, 1.0, 2.0), dimension=2, gain=GainSpec())
    g = build_grids(s, 1, [-1.0, 0.0], [1.0, 2.0], [4, 5], simplex_resolution=4)
    coef_x = np.array([0.7, -1.3])
    coef_m = np.array([2.0, -1.0, 0.5])
    f = field_from(g, lambda t, X, W: (X @ coef_x)[:, None] + (W @ coef_m)[None, :])
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.uniform([-1, 0], [1, 2])
        m = rng.dirichlet([1, 1, 1])
        v = interpolate(f, s, State(0.5, tuple(x)), Prior(m / m.sum()))
        assert v == pytest.approx(x @ coef_x + (m / m.sum()) @ coef_m, abs=1e-12)


def test_out_of_box_queries():
    s = spec1()
    g = build_grids(s, 1, -1.0, 1.0, 5, simplex_resolution=3)
    f = field_from(g, lambda t, X, W: X[:, :1] + 0 * W[:, 0][None, :])
    assert interpolate(f, s, State(0.0, (3.0,)), Prior([0.5, 0.5])) == 1.0
    g2 = build_grids(s, 1, -1.0, 1.0, 5, simplex_resolution=3, clamp=False)
    f2 = ValueField(f.values, g2)
    with pytest.raises(OutOfDomain):
        interpolate(f2, s, State(0.0, (3.0,)), Prior([0.5, 0.5]))


def test_interpolate_requires_a_time_node():
    s = spec1()
    g = build_grids(s, 1, -1.0, 1.0, 5, simplex_resolution=3)
    f = field_from(g, lambda t, X, W: X[:, :1] + 0 * W[:, 0][None, :])
    with pytest.raises(ValueError):
        interpolate(f, s, State(0.3, (0.0,)), Prior([0.5, 0.5]))


def test_check_finite():
    s = spec1()
    g = build_grids(s, 0, -1.0, 1.0, 3, simplex_resolution=2)
    vals = np.zeros(g.field_shape)
    vals[1, 2, 0] = np.nan
    with pytest.raises(NonFiniteValue):
        ValueField(vals, g).check_finite()


def test_next_grid_time_examples():
    g = build_grids(spec1(), 1, -1, 1, 3)
    assert next_grid_time(g, 0.3, strict=True) == 0.5
    assert next_grid_time(g, 0.5, strict=True) == 1.0
    assert next_grid_time(g, 0.5, strict=False) == 0.5
    assert next_grid_time(g, 1.2, strict=False) is BeyondHorizon
    assert next_grid_time(g, 1.0, strict=True) is BeyondHorizon
    assert next_grid_time(g, 1.0, strict=False) == 1.0


def test_next_grid_time_has_no_float_drift():
    g = build_grids(spec1(horizon=0.7), 5, -1, 1, 3)
    for j in range(g.n_intervals):
        assert next_grid_time(g, g.time(j), strict=False) == g.time(j)
        assert next_grid_time(g, g.time(j), strict=True) == g.time(j + 1)


def test_wait_expectation_frozen_dynamics():
    s = spec1()
    g = build_grids(s, 2, -2.0, 2.0, 9, simplex_resolution=3)
    f = field_from(g, lambda t, X, W: np.sin(X[:, :1]) + W[:, 0][None, :] * t)
    z = State(0.25, (0.5,))
    m = Prior([0.5, 0.5])
    assert wait_expectation(f, s, z, m, 0.75) == interpolate(f, s, State(0.75, (0.5,)), m)


def test_wait_expectation_linear_flow():
    s = spec1(drift_b=1.0)
    g = build_grids(s, 2, -2.0, 2.0, 9, simplex_resolution=3)
    f = field_from(g, lambda t, X, W: X[:, :1] + 0 * W[:, 0][None, :])
    assert wait_expectation(f, s, State(0.25, (0.3,)), Prior([0.5, 0.5]), 0.5) == pytest.approx(0.55, abs=1e-14)


def test_wait_expectation_second_moment_identity():
    s = spec1(sigma=1.0)
    h = 0.25
    X = np.array([[0.4]])
    for n_herm in (2, 3, 5):
        leaves, lw = propagate(s, 0.0, X, h, substeps=1, hermite=n_herm)
        assert float(lw @ leaves[0, :, 0] ** 2) == pytest.approx(0.4**2 + h, abs=1e-14)


def test_wait_expectation_constant_preservation():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = spec1(drift_A=rng.uniform(-1, 1), drift_b=rng.uniform(-1, 1), sigma=rng.uniform(0, 2))
        g = build_grids(s, 2, -3.0, 3.0, 13, simplex_resolution=3)
        c = rng.uniform(-5, 5)
        f = field_from(g, lambda t, X, W: np.full((X.shape[0], W.shape[0]), c))
        v = wait_expectation(f, s, State(0.0, (rng.uniform(-3, 3),)), Prior([0.4, 0.6]), 0.5)
        assert v == pytest.approx(c, abs=1e-12)


def test_quadrature_convergence_battery():
    # E[cos(X_h)] for dX = -a X dt + s dW: the Euler-Hermite error shrinks as
    # both substeps and Hermite nodes double
    a, sig, x0, h = 0.8, 0.9, 0.3, 1.0
    s = spec1(drift_A=-a, sigma=sig)
    mean = x0 * math.exp(-a * h)
    var = sig**2 * (1 - math.exp(-2 * a * h)) / (2 * a)
    exact = math.exp(-var / 2) * math.cos(mean)
    errs = []
    for substeps, herm in ((1, 2), (2, 4), (4, 8), (8, 16)):
        leaves, lw = propagate(s, 0.0, np.array([[x0]]), h, substeps=substeps, hermite=herm) if substeps < 8 else (None, None)
        if leaves is None:
            break
        errs.append(abs(float(lw @ np.cos(leaves[0, :, 0])) - exact))
    assert all(b < a_ for a_, b in zip(errs, errs[1:])), errs


def test_transition_weights_rows_are_probabilities():
    s = spec1(sigma=0.5, drift_b=0.2)
    g = build_grids(s, 2, -2.0, 2.0, 11, simplex_resolution=3)
    Tw = transition_weights(g, s, 0.0, g.x_points(), 0.25)
    assert np.all(Tw >= 0)
    assert np.allclose(Tw.sum(1), 1.0, atol=1e-14)


def test_interpolate_slice_batch_matches_scalar():
    s = spec1()
    g = build_grids(s, 1, -1.0, 1.0, 7, simplex_resolution=5)
    rng = np.random.default_rng(0)
    vals = rng.normal(size=g.field_shape)
    f = ValueField(vals, g)
    X = rng.uniform(-1, 1, size=(5, 1))
    W = rng.dirichlet([1, 1], size=5)
    batch = interpolate_slice(g, vals[1], X, W)
    for i in range(5):
        assert batch[i] == pytest.approx(interpolate(f, s, State(0.5, tuple(X[i])), Prior(W[i])), abs=1e-14)
