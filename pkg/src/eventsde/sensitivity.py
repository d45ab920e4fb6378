"""Forward-mode pathwise sensitivities through events.

Derivatives are those of the discrete solver itself.  Away from events each
step contributes its state Jacobian.  At an event the step is cut at
``h*``; differentiating the implicit relation ``E(step(y, h*)) = 0`` gives
the event-time gradient, and the transition Jacobian carries the state
derivative across the jump.  The driver's time-derivative is taken to be
zero throughout, so driver increments are held fixed when a step length
moves.  Parameters enter by augmenting the state with constant coordinates.
"""

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import AssumptionWarning, NonDifferentiableError, TransversalityError
from .events import DEFAULT_TOL, EventSpec, _march, _NullTracker
from .rng import UniformStream
from .sde_core import evaluate_driver, numerical_jacobian, step_derivatives

TRANSVERSALITY_FLOOR = 1e-8


@dataclass
class SensitivityState:
    """Jacobians of the solution with respect to the seeded directions.

    ``jac_state`` is ``d y_final / d seeds`` (e x p); ``event_time_grads[n]``
    is ``d tau_n / d seeds`` (p,).  The pre/post arrays hold total derivatives
    of the states at the (moving) event times.
    """

    jac_state: np.ndarray
    event_time_grads: np.ndarray
    t: float
    pre_event_jacs: np.ndarray = None
    post_event_jacs: np.ndarray = None
    denominators: np.ndarray = None
    report: Optional["AssumptionReport"] = None


@dataclass
class AssumptionRecord:
    event: int
    label: int
    commutation: float
    orthogonality: float
    transversality: float


@dataclass
class AssumptionReport:
    records: List[AssumptionRecord] = field(default_factory=list)
    atol: float = 1e-8

    def _ok(self, r):
        return (r.commutation <= self.atol and r.orthogonality <= self.atol
                and abs(r.transversality) >= TRANSVERSALITY_FLOOR)

    @property
    def passed(self):
        return all(self._ok(r) for r in self.records)

    @property
    def commutation_ok(self):
        return all(r.commutation <= self.atol for r in self.records)

    @property
    def orthogonality_ok(self):
        return all(r.orthogonality <= self.atol for r in self.records)

    @property
    def transversality_ok(self):
        return all(abs(r.transversality) >= TRANSVERSALITY_FLOOR for r in self.records)

    @property
    def failures(self):
        return [r for r in self.records if not self._ok(r)]

    def max_residuals(self):
        if not self.records:
            return {"commutation": 0.0, "orthogonality": 0.0, "min_abs_transversality": float("inf")}
        return {
            "commutation": max(r.commutation for r in self.records),
            "orthogonality": max(r.orthogonality for r in self.records),
            "min_abs_transversality": min(abs(r.transversality) for r in self.records),
        }

    def to_dict(self):
        d = {"passed": self.passed, "n_events": len(self.records),
             "commutation_ok": self.commutation_ok, "orthogonality_ok": self.orthogonality_ok,
             "transversality_ok": self.transversality_ok}
        d.update(self.max_residuals())
        return d


def _as_grad(event_fn, event_grad, y):
    if isinstance(event_fn, EventSpec):
        return event_fn.grad(y)
    if event_grad is not None:
        return np.asarray(event_grad(y), dtype=np.float64)
    return numerical_jacobian(lambda z: np.atleast_1d(event_fn(z)), y)[0]


def variational_segment(segment, J0, fields, driver, scheme="heun"):
    """Propagate ``J0`` along the nodes of ``segment`` with the primal scheme's step Jacobians."""
    J = np.asarray(J0, dtype=np.float64)
    states = segment.states
    if J.ndim != 2 or J.shape[0] != states.shape[1]:
        raise ValueError(f"J0 has shape {J.shape}, expected ({states.shape[1]}, p)")
    times = segment.times
    b_prev = evaluate_driver(driver, times[0])
    for k in range(len(times) - 1):
        b_next = evaluate_driver(driver, times[k + 1])
        _, phi, _ = step_derivatives(states[k], times[k + 1] - times[k], b_next - b_prev, fields, scheme)
        J = phi @ J
        b_prev = b_next
    return J


def event_time_gradient(grad_pre, y_pre, fields, event_fn, event_grad=None, velocity=None):
    """``-(grad E . grad_pre) / (grad E . mu)`` at the pre-event state.

    ``velocity`` replaces ``mu(y_pre)`` in the denominator; the solver passes
    the derivative of its cut step so the result is the exact discrete gradient.
    """
    y_pre = np.asarray(y_pre, dtype=np.float64)
    grad_pre = np.asarray(grad_pre, dtype=np.float64)
    if grad_pre.ndim == 1:
        grad_pre = grad_pre[:, None]
    ge = _as_grad(event_fn, event_grad, y_pre)
    vel = fields.mu(y_pre) if velocity is None else np.asarray(velocity)
    denom = float(ge @ vel)
    if abs(denom) < TRANSVERSALITY_FLOOR:
        raise TransversalityError(f"drift tangent to the event surface: grad E . mu = {denom:.3g}")
    return -(ge @ grad_pre) / denom


def transition_gradient(grad_pre, grad_tau, y_pre, y_post, fields, transition_jac, velocity=None):
    """Post-event Jacobian seed ``JT G - (mu(y_post) - JT mu(y_pre)) dtau``.

    ``transition_jac`` is either the matrix ``grad T(y_pre)`` or a callable
    returning it.  The flow factor after the event is applied by subsequent
    propagation.
    """
    grad_pre = np.asarray(grad_pre, dtype=np.float64)
    if grad_pre.ndim == 1:
        grad_pre = grad_pre[:, None]
    grad_tau = np.atleast_1d(np.asarray(grad_tau, dtype=np.float64))
    JT = transition_jac(y_pre) if callable(transition_jac) else np.asarray(transition_jac, dtype=np.float64)
    e = grad_pre.shape[0]
    if JT.shape != (e, e) or grad_tau.shape[-1] != grad_pre.shape[1]:
        raise ValueError("dimension mismatch between grad_pre, grad_tau and the transition Jacobian")
    vel = fields.mu(y_pre) if velocity is None else np.asarray(velocity)
    jump = fields.mu(y_post) - JT @ vel
    return JT @ grad_pre - np.outer(jump, grad_tau)


class _Tracker:
    def __init__(self, fields, scheme, seeds):
        self.fields = fields
        self.scheme = scheme
        self.D = np.array(seeds, dtype=np.float64)
        self.dt_cur = np.zeros(self.D.shape[1])
        self.taus, self.pre, self.post, self.denoms = [], [], [], []

    def regular(self, y, h, dB):
        _, phi, v = step_derivatives(y, h, dB, self.fields, self.scheme)
        self.D = phi @ self.D - np.outer(v, self.dt_cur)
        self.dt_cur = np.zeros_like(self.dt_cur)

    def event(self, y, h, dB, spec, y_pre, y_post, u):
        _, phi, v = step_derivatives(y, h, dB, self.fields, self.scheme)
        G = phi @ self.D - np.outer(v, self.dt_cur)
        ge = spec.grad(y_pre)
        denom = float(ge @ v)
        if abs(denom) < TRANSVERSALITY_FLOOR:
            raise TransversalityError(f"event {spec.label}: grad E . mu = {denom:.3g}")
        dtau = -(ge @ G) / denom
        total_pre = G + np.outer(v, dtau)
        self.D = spec.jac(y_pre, u) @ total_pre
        self.dt_cur = dtau
        self.taus.append(dtau)
        self.pre.append(total_pre)
        self.post.append(self.D.copy())
        self.denoms.append(denom)


def forward_sensitivity(y0, fields, specs, driver, n_max, t0, dt, T, scheme="heun", u_stream=None,
                        tol=DEFAULT_TOL, seeds=None, check=True, refractory=None):
    """Solve and differentiate in one forward pass.

    ``seeds`` (e x p) selects the directions of differentiation; it defaults
    to the identity, giving ``d/d y0``.  When ``check`` is set, the
    differentiability conditions are evaluated at each event and a warning is
    issued if any fails; the report is attached to the returned state.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if seeds is None:
        seeds = np.eye(len(y0))
    if u_stream is None:
        u_stream = UniformStream(driver.seed, "transitions")
    tr = _Tracker(fields, scheme, seeds)
    sol = _march(y0, fields, specs, driver, n_max, t0, dt, T, scheme, u_stream, tol, tr, refractory)
    p = tr.D.shape[1]
    e = len(y0)
    state = SensitivityState(
        jac_state=tr.D,
        event_time_grads=np.array(tr.taus).reshape(-1, p),
        t=sol.final_time,
        pre_event_jacs=np.array(tr.pre).reshape(-1, e, p),
        post_event_jacs=np.array(tr.post).reshape(-1, e, p),
        denominators=np.array(tr.denoms),
    )
    if check and sol.n_events:
        report = check_assumptions(sol, fields, specs)
        state.report = report
        if not report.passed:
            warnings.warn(
                f"{len(report.failures)} of {len(report.records)} events violate the differentiability "
                "conditions; gradients may be inexact", AssumptionWarning, stacklevel=2)
    return sol, state


def _select(sol, output):
    if callable(output):
        return np.atleast_1d(np.asarray(output(sol), dtype=np.float64))
    kind = output[0]
    if kind == "tau":
        return np.atleast_1d(sol.event_times[output[1]])
    if kind == "final":
        return np.asarray(sol.final_state, dtype=np.float64)
    if kind == "taus":
        return np.asarray(sol.event_times, dtype=np.float64)
    raise ValueError(f"unknown output selector {output!r}")


def finite_difference_oracle(y0, fields, specs, driver, u_stream, output, h=1e-5, n_max=1, t0=0.0, dt=1e-2,
                             T=1.0, scheme="heun", coords=None, tol=DEFAULT_TOL):
    """Central differences of a solution functional with the driver and u-stream frozen.

    ``output`` is ``("tau", n)``, ``("taus",)``, ``("final",)`` or a callable of the
    solution.  Returns an array of shape (len(output), len(coords)).  Raises
    ``NonDifferentiableError`` if a perturbation changes the number of events.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    coords = range(len(y0)) if coords is None else coords
    if u_stream is None:
        u_stream = UniformStream(driver.seed, "transitions")

    def run(y):
        return _march(y, fields, specs, driver, n_max, t0, dt, T, scheme, u_stream, tol, _NullTracker())

    base = run(y0)
    cols = []
    for i in coords:
        yp = y0.copy()
        ym = y0.copy()
        yp[i] += h
        ym[i] -= h
        sp, sm = run(yp), run(ym)
        if sp.n_events != base.n_events or sm.n_events != base.n_events:
            raise NonDifferentiableError(
                f"perturbing coordinate {i} by {h:g} changes the event count "
                f"({sm.n_events}/{base.n_events}/{sp.n_events}); retry with a smaller h")
        if not np.array_equal(sp.event_labels, base.event_labels) or not np.array_equal(sm.event_labels, base.event_labels):
            raise NonDifferentiableError(f"perturbing coordinate {i} reorders events")
        cols.append((_select(sp, output) - _select(sm, output)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_assumptions(solution, fields, specs, atol=1e-8):
    """Evaluate the commutation, orthogonality and transversality conditions at every event."""
    by_label = {s.label: s for s in specs}
    report = AssumptionReport(atol=atol)
    for n, (k, y_pre, y_post) in enumerate(zip(solution.event_labels, solution.pre_event_states,
                                               solution.post_event_states)):
        spec = by_label[int(k)]
        u = float(solution.event_randomness[n]) if len(solution.event_randomness) > n else 1.0
        JT = spec.jac(y_pre, u)
        sig_pre = fields.sigma(y_pre)
        comm = float(np.max(np.abs(fields.sigma(y_post) - JT @ sig_pre), initial=0.0))
        ge = spec.grad(y_pre)
        orth = float(np.max(np.abs(ge @ sig_pre), initial=0.0))
        trans = float(ge @ fields.mu(y_pre))
        report.records.append(AssumptionRecord(n, int(k), comm, orth, trans))
    return report
