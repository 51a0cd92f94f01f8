import math

import numpy as np
import pytest

from bayesimpulse.bayes import Prior
from bayesimpulse.errors import InvalidModelParams, UnsupportedAction, UnsupportedStateDomain
from bayesimpulse.model import (
    GainSpec,
    Impulse,
    State,
    Wait,
    diffusion,
    drift,
    gain_bound,
    impulse_outcome_kernel,
    make_censored_execution_model,
    make_gaussian_impact_model,
    terminal_gain,
)


def test_affine_drift_and_diffusion_examples():
    zero = make_censored_execution_model()
    assert np.array_equal(drift(zero, State(0.3, (2.0,))), [0.0])
    assert np.array_equal(diffusion(zero, State(0.3, (2.0,))), [[0.0]])
    assert drift(make_censored_execution_model(drift_b=1.0), State(0.0, (3.0,)))[0] == 1.0
    assert drift(make_censored_execution_model(drift_A=2.0), State(0.0, (1.5,)))[0] == 3.0


def test_declared_domain_without_extrapolation():
    spec = make_censored_execution_model(domain=((-1.0,), (1.0,)), extrapolate=False)
    drift(spec, State(0.0, (0.5,)))
    with pytest.raises(UnsupportedStateDomain):
        drift(spec, State(0.0, (1.5,)))
    with pytest.raises(UnsupportedStateDomain):
        diffusion(spec, State(0.0, (-2.0,)))


def test_state_and_action_validation():
    with pytest.raises(ValueError):
        State(-0.1, (0.0,))
    with pytest.raises(ValueError):
        State(0.0, (math.nan,))
    with pytest.raises(ValueError):
        Impulse(-1.0, (1.0,))
    assert repr(Wait) == "Wait"


def test_censored_short_window_is_a_single_atom():
    spec = make_censored_execution_model(rates=(1.0,), actions=[Impulse(0.0, (1.0,))])
    kern = impulse_outcome_kernel(spec, State(0.2, (0.0,)), spec.actions[0], 12)
    assert len(kern) == 1
    out = kern.outcomes[0]
    assert out.landing.t == 0.2
    assert out.likelihood[0] == pytest.approx(1.0)


def test_censored_atom_carries_survival_probability():
    spec = make_censored_execution_model(rates=(1.0,), actions=[Impulse(1.0, (1.0,))])
    kern = impulse_outcome_kernel(spec, State(0.0, (0.0,)), spec.actions[0], 12)
    atom = kern.outcomes[-1]
    assert atom.landing.t == 1.0
    assert atom.base_weight == 1.0
    assert atom.likelihood[0] == pytest.approx(0.367879441171, abs=1e-12)


def test_gaussian_noiseless_gives_two_atoms():
    spec = make_gaussian_impact_model(impacts=(-1.0, 1.0), impact_noise=0.0, actions=[Impulse(0.25, (1.0,))])
    kern = impulse_outcome_kernel(spec, State(0.0, (2.0,)), spec.actions[0], 64)
    assert len(kern) == 2
    landings = sorted((o.landing.x[0], tuple(o.likelihood)) for o in kern.outcomes)
    assert landings == [(1.0, (1.0, 0.0)), (3.0, (0.0, 1.0))]
    assert all(o.landing.t == 0.25 for o in kern.outcomes)


def test_kernel_rejects_wait():
    spec = make_censored_execution_model()
    with pytest.raises(UnsupportedAction):
        impulse_outcome_kernel(spec, State(0.0, (0.0,)), Wait, 12)


@pytest.mark.parametrize(
    "make",
    [
        lambda: make_censored_execution_model(rates=(0.5, 2.0)),
        lambda: make_censored_execution_model(rates=(0.2, 1.0, 4.0), dimension=2, actions=[Impulse(0.5, (1.0, -1.0))]),
        lambda: make_gaussian_impact_model(impacts=(-1.0, 0.0, 1.0), impact_noise=0.5),
        lambda: make_gaussian_impact_model(impacts=(-1.0, 1.0), dimension=2, actions=[Impulse(0.25, (1.0, 0.5))]),
    ],
)
def test_kernel_stochasticity_and_latency_direction(make):
    spec = make()
    for act in spec.actions:
        kern = impulse_outcome_kernel(spec, State(0.3, (0.1,) * spec.dim), act, spec.impulse.default_resolution)
        assert np.max(np.abs(kern.masses() - 1.0)) <= 1e-8
        for o in kern.outcomes:
            assert o.landing.t >= 0.3
            assert o.landing.t <= 0.3 + act.duration + 1e-15
            assert o.base_weight > 0


def test_terminal_gain_examples():
    spec = make_censored_execution_model(gain=GainSpec(linear=(1.0,)))
    assert terminal_gain(spec, State(1.0, (2.5,)), Prior([0.3, 0.7])) == 2.5
    spec = make_gaussian_impact_model(impacts=(0.0, 1.0), gain=GainSpec(param=1.0))
    assert terminal_gain(spec, State(1.0, (0.0,)), Prior([0.5, 0.5])) == 0.5
    spec = make_censored_execution_model(gain=GainSpec(late_penalty=1.0))
    assert terminal_gain(spec, State(1.0, (0.0,)), Prior([0.5, 0.5])) == 0.0
    assert terminal_gain(spec, State(1.5, (0.0,)), Prior([0.5, 0.5])) == -0.5


def test_terminal_gain_noise_and_variance_terms():
    spec = make_gaussian_impact_model(
        impacts=(0.0, 2.0), gain=GainSpec(noise=3.0, variance_reward=1.0), terminal_noise_scale=2.0
    )
    # zero-mean noise integrates out; Var_m(u) = 1 under the uniform prior
    assert terminal_gain(spec, State(1.0, (0.0,)), Prior([0.5, 0.5])) == pytest.approx(1.0, abs=1e-12)


def test_gain_bound_dominates_terminal_gain():
    spec = make_censored_execution_model(
        gain=GainSpec(constant=0.5, linear=(1.0,), quadratic=(-0.25,), late_penalty=2.0)
    )
    bound = gain_bound(spec, [-2.0], [2.0])
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = rng.uniform(0, 2 * spec.T)
        x = rng.uniform(-2, 2)
        m = rng.dirichlet([1, 1])
        assert abs(terminal_gain(spec, State(t, (x,)), Prior(m))) <= bound + 1e-12


@pytest.mark.parametrize(
    "kwargs,field",
    [
        ({"horizon": 0.0}, "horizon"),
        ({"actions": []}, "actions"),
        ({"rates": (0.5, -1.0)}, "parameters"),
        ({"rates": (1.0, 1.0)}, "parameters"),
        ({"actions": [Impulse(2.0, (1.0,))]}, "actions[0].duration"),
        ({"dimension": 4}, "dimension"),
    ],
)
def test_constructor_errors_name_the_field(kwargs, field):
    with pytest.raises(InvalidModelParams) as exc:
        make_censored_execution_model(**kwargs)
    assert exc.value.field == field


def test_gaussian_constructor_errors():
    with pytest.raises(InvalidModelParams) as exc:
        make_gaussian_impact_model(impact_noise=-0.1)
    assert exc.value.field == "impact_noise"


def test_default_censored_model_is_valid():
    spec = make_censored_execution_model(rates=(0.5, 2.0))
    assert spec.K == 2 and spec.T == 1.0
    for act in spec.actions:
        kern = impulse_outcome_kernel(spec, State(0.0, (0.0,)), act, 12)
        assert np.max(np.abs(kern.masses() - 1.0)) <= 1e-8
