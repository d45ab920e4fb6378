"""Event detection, root-finding and transitions for Event SDEs.

The solver marches on the fixed grid ``t0 + k*dt``.  When an event function
changes sign over a step, the crossing time is found on the single-step map
``h -> step(y, h, B(t+h) - B(t))`` and the transition is applied there; the
solver then continues with a partial step up to the next grid node, so the
grid (and hence the driver increments used away from events) never moves.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import BracketError, ConvergenceError, ModelError, StepSizeError
from .rng import UniformStream
from .sde_core import (
    PathSegment,
    _check,
    evaluate_driver,
    next_grid_time,
    numerical_jacobian,
    step,
)

DEFAULT_TOL = 1e-10
MAX_ROOT_ITERS = 64
# Events allowed inside a single grid cell before the step is declared too coarse.
MAX_EVENTS_PER_STEP = 64


@dataclass
class EventSpec:
    """One event type: ``event_fn(y) -> float`` and ``transition_fn(y, u) -> y``.

    ``event_grad(y)`` and ``transition_jac(y, u)`` are optional analytic
    derivatives; finite differences are used otherwise.
    """

    event_fn: Callable
    transition_fn: Callable
    label: int = 0
    event_grad: Optional[Callable] = None
    transition_jac: Optional[Callable] = None

    def grad(self, y):
        if self.event_grad is not None:
            return np.asarray(self.event_grad(y), dtype=np.float64)
        return numerical_jacobian(lambda z: np.atleast_1d(self.event_fn(z)), y)[0]

    def jac(self, y, u):
        if self.transition_jac is not None:
            return np.asarray(self.transition_jac(y, u), dtype=np.float64)
        return numerical_jacobian(lambda z: self.transition_fn(z, u), y)


@dataclass
class EventSolution:
    segments: List[PathSegment]
    event_times: np.ndarray
    event_labels: np.ndarray
    pre_event_states: np.ndarray
    post_event_states: np.ndarray
    final_state: np.ndarray
    final_time: float
    event_randomness: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_events(self):
        return len(self.event_times)

    def trajectory(self):
        """All segment nodes concatenated, with the pre/post pair kept at each event."""
        times = np.concatenate([s.times for s in self.segments])
        states = np.concatenate([s.states for s in self.segments])
        return times, states


def _event_values(specs, y):
    return np.array([float(s.event_fn(y)) for s in specs])


def locate_event(y0, t0, dt, fields, driver, event_fn, tol=DEFAULT_TOL, scheme="heun"):
    """Find the crossing of ``event_fn`` inside the step ``[t0, t0 + dt]``.

    Uses a bracketing secant (Illinois) iteration with bisection safeguards.
    The returned time always satisfies ``0 <= event_fn(y*) <= tol`` unless the
    bracket collapsed first, so the event is never reported early.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    b0 = evaluate_driver(driver, t0)

    def probe(h):
        y = step(y0, h, evaluate_driver(driver, t0 + h) - b0, fields, scheme)
        return float(event_fn(y)), y

    ga = float(event_fn(y0))
    gb, yb = probe(dt)
    if not (ga < 0.0 <= gb):
        raise BracketError(f"no sign change on [{t0}, {t0 + dt}]: g={ga:.3g} -> {gb:.3g}")
    a, b = 0.0, dt
    # the width exit only fires once the bracket is at floating-point resolution
    min_width = 4.0 * np.finfo(np.float64).eps * max(1.0, abs(t0) + dt)
    fa, fb = ga, gb  # Illinois-weighted copies used only for the secant guess
    side = 0
    width = b - a
    for it in range(MAX_ROOT_ITERS):
        if gb <= tol or (b - a) <= min_width:
            return t0 + b, yb
        c = b - fb * (b - a) / (fb - fa)
        # fall back to bisection when the secant guess is useless or progress stalls
        if not (a < c < b) or (it % 3 == 2 and (b - a) > 0.5 * width):
            c = 0.5 * (a + b)
        if it % 3 == 2:
            width = b - a
        gc, yc = probe(c)
        if gc >= 0.0:
            b, gb, yb, fb = c, gc, yc, gc
            if side == 1:
                fa *= 0.5
            side = 1
        else:
            a, fa = c, gc
            if side == -1:
                fb *= 0.5
            side = -1
    raise ConvergenceError(f"event root not resolved within {MAX_ROOT_ITERS} iterations near t={t0}")


def apply_transition(spec, y, u, specs=None):
    """Apply ``spec``'s transition and check it does not land in an event set."""
    y_post = _check(np.asarray(spec.transition_fn(y, u), dtype=np.float64), None, "transition output")
    for other in specs if specs is not None else [spec]:
        val = float(other.event_fn(y_post))
        if val >= 0.0:
            raise ModelError(
                f"transition {spec.label} leaves event function {other.label} at {val:.3g} >= 0"
            )
    return y_post


class _NullTracker:
    def regular(self, y, h, dB):
        pass

    def event(self, y, h, dB, spec, y_pre, y_post, u):
        pass


def _march(y0, fields, specs, driver, n_max, t0, dt, T, scheme, u_stream, tol, tracker, refractory=None):
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not t0 < T:
        raise ValueError(f"need t0 < T, got [{t0}, {T}]")
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    specs = list(specs)
    y = _check(np.array(y0, dtype=np.float64), t0)
    if specs and np.any(_event_values(specs, y) >= 0):
        raise ModelError("initial state must satisfy event_fn(y0) < 0 for every event type")
    if u_stream is None:
        u_stream = UniformStream(driver.seed, "transitions")

    segments = []
    seg_t, seg_y = [t0], [y]
    ev_t, ev_k, pre, post, us = [], [], [], [], []
    t = t0
    cell_events = 0
    cell_end = None
    while t < T and len(ev_t) < n_max:
        t_next = next_grid_time(t, t0, dt, T)
        if t_next != cell_end:
            cell_end, cell_events = t_next, 0
        b_t = evaluate_driver(driver, t)
        dB = evaluate_driver(driver, t_next) - b_t
        h = t_next - t
        y_try = _check(step(y, h, dB, fields, scheme), t_next)
        vals = _event_values(specs, y_try) if specs else np.zeros(0)
        crossing = np.flatnonzero(vals >= 0.0)
        if crossing.size == 0:
            tracker.regular(y, h, dB)
            y, t = y_try, t_next
            seg_t.append(t)
            seg_y.append(y)
            continue

        best = None
        for k in crossing:
            t_star, y_star = locate_event(y, t, h, fields, driver, specs[k].event_fn, tol, scheme)
            if best is None or t_star < best[0]:
                best = (t_star, y_star, k)
        t_star, y_pre, k = best
        spec = specs[k]
        n = len(ev_t)
        if refractory is not None and ev_t and t_star - ev_t[-1] < refractory:
            raise ModelError(f"inter-event gap {t_star - ev_t[-1]:.3g} below the refractory bound {refractory:.3g}")
        u = float(u_stream(n))
        y_post = apply_transition(spec, y_pre, u, specs)
        h_star = t_star - t
        tracker.event(y, h_star, evaluate_driver(driver, t_star) - b_t, spec, y_pre, y_post, u)

        seg_t.append(t_star)
        seg_y.append(y_pre)
        segments.append(PathSegment(np.array(seg_t), np.array(seg_y)))
        seg_t, seg_y = [t_star], [y_post]
        ev_t.append(t_star)
        ev_k.append(spec.label)
        pre.append(y_pre)
        post.append(y_post)
        us.append(u)
        y, t = y_post, t_star
        cell_events += 1
        if cell_events > MAX_EVENTS_PER_STEP:
            raise StepSizeError(f"more than {MAX_EVENTS_PER_STEP} events inside one step near t={t}; reduce dt")

    # after the n_max-th event the run stops at the post-transition state
    if len(seg_t) > 1 or len(ev_t) < n_max:
        segments.append(PathSegment(np.array(seg_t), np.array(seg_y)))
    e = len(y)
    return EventSolution(
        segments=segments,
        event_times=np.array(ev_t),
        event_labels=np.array(ev_k, dtype=int),
        pre_event_states=np.array(pre).reshape(-1, e),
        post_event_states=np.array(post).reshape(-1, e),
        final_state=y,
        final_time=t,
        event_randomness=np.array(us),
    )


def event_sde_solve(y0, fields, specs, driver, n_max, t0, dt, T, scheme="heun", u_stream=None,
                    tol=DEFAULT_TOL, refractory=None):
    """Solve an Event SDE up to time ``T`` or the ``n_max``-th event, whichever comes first.

    When several event types cross inside one step, the earliest crossing is
    handled first (lowest label on exact ties) and the remainder of the step is
    re-integrated from the post-transition state.  ``u_stream(n)`` supplies the
    uniform randomisation of the n-th transition; by default it is keyed by the
    driver's seed.  If ``refractory`` is given, any inter-event gap below it
    raises ``ModelError``.
    """
    return _march(y0, fields, specs, driver, n_max, t0, dt, T, scheme, u_stream, tol, _NullTracker(), refractory)
