import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from eventsde.errors import BracketError, ModelError
from eventsde.events import EventSpec, apply_transition, event_sde_solve, locate_event
from eventsde.rng import ConstantStream
from eventsde.sde_core import VectorFields, sample_driver, solve_segment, zero_driver
from eventsde.ssnn import NetworkParams, build_slif_network, initial_state


def const_fields(rate):
    return VectorFields(lambda y: np.full_like(y, rate), lambda y: np.zeros((len(y), 1)))


def decay_fields():
    return VectorFields(lambda y: -y, lambda y: np.zeros((len(y), 1)), drift_jacobian=lambda y: -np.eye(len(y)))


def test_locate_linear_crossing():
    t, y = locate_event(np.array([-0.3]), 0.0, 1.0, const_fields(1.0), zero_driver(1, 0.0, 1.0), lambda y: y[0])
    assert abs(t - 0.3) < 1e-9
    assert 0.0 <= y[0] <= 1e-10


def test_locate_exponential_decay_crossing():
    # y' = -y from a = 2 reaches psi = 0.5 at ln(a / psi); event fn psi - y
    a, psi = 2.0, 0.5
    # inside one step the root is that of the Heun step map a (1 - h + h^2 / 2)
    t, _ = locate_event(np.array([a]), 0.0, 0.1, decay_fields(), zero_driver(1, 0.0, 2.0), lambda y: 1.9 - y[0],
                        scheme="heun")
    assert abs(t - brentq(lambda h: 1.9 - a * (1 - h + 0.5 * h * h), 0.0, 0.1, xtol=1e-15)) < 1e-9
    # on a fine grid the solver reproduces the exact crossing
    sol = event_sde_solve(np.array([a]), decay_fields(), [EventSpec(lambda y: psi - y[0], lambda y, u: y + 10.0)],
                          zero_driver(1, 0.0, 3.0), 1, 0.0, 1e-3, 3.0)
    assert abs(sol.event_times[0] - math.log(a / psi)) < 1e-6


def test_locate_boundary_root():
    t, _ = locate_event(np.array([-0.5]), 0.0, 0.5, const_fields(1.0), zero_driver(1, 0.0, 1.0), lambda y: y[0])
    assert t == 0.5


def test_locate_without_sign_change():
    with pytest.raises(BracketError):
        locate_event(np.array([-0.5]), 0.0, 0.1, const_fields(1.0), zero_driver(1, 0.0, 1.0), lambda y: y[0])


def test_no_events_reduces_to_segment():
    spec = EventSpec(lambda y: y[0] - 100.0, lambda y, u: y)
    sol = event_sde_solve(np.array([1.0]), decay_fields(), [spec], zero_driver(1, 0.0, 1.0), 5, 0.0, 0.01, 1.0)
    seg = solve_segment(np.array([1.0]), 0.0, 1.0, 0.01, decay_fields(), zero_driver(1, 0.0, 1.0))
    assert sol.n_events == 0
    np.testing.assert_array_equal(sol.final_state, seg.states[-1])


def test_bouncing_clock_event_times():
    spec = EventSpec(lambda y: y[0] - 1.0, lambda y, u: y - 1.0)
    sol = event_sde_solve(np.array([0.25]), const_fields(1.0), [spec], zero_driver(1, 0.0, 5.0), 10, 0.0, 0.1, 5.0)
    np.testing.assert_allclose(sol.event_times, 0.75 + np.arange(5), atol=1e-9)
    assert abs(sol.final_state[0] - 0.25) < 1e-9


def test_n_max_stops_after_transition():
    spec = EventSpec(lambda y: y[0] - 1.0, lambda y, u: y - 1.0)
    sol = event_sde_solve(np.array([0.0]), const_fields(1.0), [spec], zero_driver(1, 0.0, 5.0), 2, 0.0, 0.1, 5.0)
    assert sol.n_events == 2
    assert abs(sol.final_time - 2.0) < 1e-9
    assert abs(sol.final_state[0]) < 1e-9


def test_earliest_event_wins_and_ties_break_low():
    # two clocks in one step; the faster one fires first
    f = VectorFields(lambda y: np.array([1.0, 2.0]), lambda y: np.zeros((2, 1)))
    specs = [EventSpec(lambda y: y[0] - 1.0, lambda y, u: y - np.array([1.0, 0.0]), label=0),
             EventSpec(lambda y: y[1] - 1.0, lambda y, u: y - np.array([0.0, 1.0]), label=1)]
    sol = event_sde_solve(np.array([0.5, 0.1]), f, specs, zero_driver(1, 0.0, 1.0), 2, 0.0, 1.0, 1.0)
    assert list(sol.event_labels) == [1, 0]
    np.testing.assert_allclose(sol.event_times, [0.45, 0.5], atol=1e-9)
    # identical clocks: the lower label is handled first (its transition resets both)
    specs[0] = EventSpec(lambda y: y[0] - 1.0, lambda y, u: y - 1.0, label=0)
    f2 = VectorFields(lambda y: np.array([1.0, 1.0]), lambda y: np.zeros((2, 1)))
    sol = event_sde_solve(np.array([0.5, 0.5]), f2, specs, zero_driver(1, 0.0, 1.0), 1, 0.0, 1.0, 1.0)
    assert list(sol.event_labels) == [0]


def test_transition_into_event_set_is_model_error():
    spec = EventSpec(lambda y: y[0] - 1.0, lambda y, u: y)
    with pytest.raises(ModelError):
        event_sde_solve(np.array([0.0]), const_fields(1.0), [spec], zero_driver(1, 0.0, 2.0), 3, 0.0, 0.1, 2.0)


def test_apply_transition_identity():
    spec = EventSpec(lambda y: y[0] - 1.0, lambda y, u: y)
    y = np.array([0.5, 2.0])
    np.testing.assert_array_equal(apply_transition(spec, y, 0.3), y)


def test_slif_reset_and_synapse():
    p = NetworkParams(K=2, w=[[0, 0.7], [0.2, 0]], v_reset=1.4, alpha=0.03)
    sys = build_slif_network(p)
    y = np.array([1.2, 0.1, 0.5, 0.4, 0.0, -1.0])
    post = sys.specs[0].transition_fn(y, 1.0)
    np.testing.assert_allclose(post, [1.2 - 1.4, 0.1, 0.5, 0.4 + 0.7, -0.03, -1.0])
    post = sys.specs[1].transition_fn(y, 0.5)
    np.testing.assert_allclose(post, [1.2, 0.1 - 1.4, 0.5 + 0.2, 0.4, 0.0, math.log(0.5) - 0.03])


def closed_form_spike_times(c, mu, v_reset, alpha, s0, u, psi, beta, cap, n):
    """Spike times of a noise-free neuron with constant current, by quadrature."""
    lam = lambda v: min(math.exp((v - psi) / beta), cap)
    t0, v0, s = 0.0, 0.0, s0
    out = []
    for _ in range(n):
        v_of = lambda t, t0=t0, v0=v0: c + (v0 - c) * math.exp(-mu * (t - t0))
        F = lambda t: quad(lambda r: lam(v_of(r)), t0, t, epsabs=1e-13, epsrel=1e-13, limit=200)[0] + s
        hi = t0 + 0.01
        while F(hi) < 0:
            hi += 0.01
        t = brentq(F, t0, hi, xtol=1e-13)
        out.append(t)
        t0, v0, s = t, v_of(t) - v_reset, math.log(u) - alpha
    return np.array(out)


def test_slif_spike_times_match_quadrature():
    p = NetworkParams(K=1, w=[[0.0]], mu=(15.0, 0.0))
    sys = build_slif_network(p)
    y0 = initial_state(p, 3, 0.0, 1.5)
    u = 0.4
    sol = event_sde_solve(y0, sys.fields, sys.specs, zero_driver(2, 0.0, 2.0), 4, 0.0, 1e-3, 2.0,
                          u_stream=ConstantStream(u))
    ref = closed_form_spike_times(1.5, 15.0, 1.4, 0.03, y0[2], u, 1.0, 0.2, p.cap, 4)
    np.testing.assert_allclose(sol.event_times, ref, atol=1e-3)


@given(st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_solution_invariants(seed):
    p = NetworkParams(K=2, w=[[0, 1.0], [0.5, 0]], mu=(15.0, 5.0), sigma=(0.25, 0.25), input_drift=[20.0, 20.0])
    sys = build_slif_network(p)
    drv = sample_driver(4, 0.0, 1.0, 0.01, seed)
    sol = event_sde_solve(initial_state(p, seed), sys.fields, sys.specs, drv, 25, 0.0, 0.01, 1.0, scheme="euler")
    assert sol.n_events <= 25
    assert np.all(np.diff(sol.event_times) > 0)
    assert np.all((sol.event_times > 0) & (sol.event_times <= 1.0))
    for k, pre, post, u in zip(sol.event_labels, sol.pre_event_states, sol.post_event_states,
                               sol.event_randomness):
        assert 0.0 <= sys.specs[k].event_fn(pre) <= 1e-10
        np.testing.assert_array_equal(post, sys.specs[k].transition_fn(pre, u))


def test_determinism_and_event_time_consistency():
    p = NetworkParams(K=1, w=[[0.0]], mu=(15.0, 0.0))
    sys = build_slif_network(p)
    y0 = initial_state(p, 1, 0.0, 1.5)
    runs = [event_sde_solve(y0, sys.fields, sys.specs, zero_driver(2, 0.0, 1.0), 3, 0.0, dt, 1.0, scheme="euler",
                            u_stream=ConstantStream(0.5)).event_times for dt in (0.01, 0.005, 0.0025)]
    ref = event_sde_solve(y0, sys.fields, sys.specs, zero_driver(2, 0.0, 1.0), 3, 0.0, 1e-5, 1.0, scheme="euler",
                          u_stream=ConstantStream(0.5)).event_times
    e = [np.max(np.abs(r - ref)) for r in runs]
    assert e[0] / e[1] == pytest.approx(2.0, rel=0.25)
    assert e[1] / e[2] == pytest.approx(2.0, rel=0.25)
    again = event_sde_solve(y0, sys.fields, sys.specs, zero_driver(2, 0.0, 1.0), 3, 0.0, 0.01, 1.0, scheme="euler",
                            u_stream=ConstantStream(0.5)).event_times
    np.testing.assert_array_equal(runs[0], again)
