"""Neuron-local forward sensitivities and eligibility traces for SLIF networks.

For a fixed weight w_ab, G^k is the derivative of (v^k, i^k) at fixed time.
Between spikes it evolves by the 2x2 flow exp(Gamma t); at spikes it jumps
by terms that only involve the spiking neuron and its children.  Spike-time
derivatives follow from G^k just before the spike: by the threshold crossing
condition in threshold mode, or by the integrated-intensity condition
otherwise (with a trapezoid rule over the stored solver nodes).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import ApproximationWarning, TransversalityError
from .model import intensity, intensity_grad


def gamma_matrix(mu1, mu2):
    return np.array([[-mu1, mu1], [0.0, -mu2]])


def expm_gamma(mu1, mu2, t):
    """Closed-form exp(Gamma t) for Gamma = [[-mu1, mu1], [0, -mu2]]."""
    e1 = np.exp(-mu1 * t)
    e2 = np.exp(-mu2 * t)
    if abs(mu1 - mu2) <= 1e-12 * max(1.0, abs(mu1)):
        off = mu1 * t * e1
    else:
        off = mu1 * (e2 - e1) / (mu1 - mu2)
    return np.array([[e1, off], [0.0, e2]])


@dataclass
class OnlineResult:
    spike_time_grads: np.ndarray  # one entry per event of the solution
    flows: np.ndarray  # (K, 2) gradient flows at the final time
    final_time: float


def _check_denom(d, t):
    if abs(d) < 1e-8:
        raise TransversalityError(f"mu1 (i - v) = {d:.3g} at spike time {t}; spike time not differentiable")


def online_sensitivity(params, solution, target):
    """Spike-time derivatives with respect to ``w[target]`` from neuron-local flows.

    ``solution`` is a generic-solver run of ``build_slif_network(params)``.
    Threshold mode (``params.threshold`` set) uses the crossing condition and
    needs a noise-free model; intensity mode integrates the clock condition.
    """
    a, b = target
    K = params.K
    mu1, mu2 = params.mu
    psi, beta, cap = params.psi, params.beta, params.cap
    thr_mode = params.threshold is not None
    if thr_mode and not params.deterministic:
        warnings.warn("threshold-mode spike-time formula applied to a noisy model", ApproximationWarning, stacklevel=2)
    G = np.zeros((K, 2))
    s_last = np.zeros(K)
    t0 = float(solution.segments[0].times[0]) if solution.segments else 0.0
    s_last[:] = t0
    # intensity-mode bookkeeping since the previous own spike
    lam_prev = intensity(solution.segments[0].states[0][:K], psi, beta, cap) if solution.segments else np.zeros(K)
    dt_prev = np.zeros(K)
    integral = np.zeros(K)

    def flow(k, t):
        return expm_gamma(mu1, mu2, t - s_last[k]) @ G[k]

    def accumulate(seg):
        ts = seg.times
        if len(ts) < 2:
            return
        V = seg.states[:, :K]
        lp = intensity_grad(V, psi, beta, cap)
        for k in range(K):
            gv = np.array([flow(k, t)[0] for t in ts])
            integral[k] += np.trapezoid(lp[:, k] * gv, ts)

    grads = np.zeros(solution.n_events)
    for n in range(solution.n_events):
        if not thr_mode:
            accumulate(solution.segments[n])
        t = float(solution.event_times[n])
        l = int(solution.event_labels[n])
        y_pre = solution.pre_event_states[n]
        y_post = solution.post_event_states[n]
        v, i = y_pre[l], y_pre[K + l]
        Gl = flow(l, t)
        if thr_mode:
            denom = mu1 * (i - v)
            _check_denom(denom, t)
            dt = -Gl[0] / denom
        else:
            lam_now = float(intensity(v, psi, beta, cap))
            dt = (lam_prev[l] * dt_prev[l] - integral[l]) / lam_now
        grads[n] = dt
        G[l] = Gl - np.array([mu1, 0.0]) * params.v_reset * dt
        s_last[l] = t
        for k in np.flatnonzero(params.mask[l]):
            Gk = flow(k, t) - np.array([mu1, -mu2]) * params.w[l, k] * dt
            if l == a and k == b:
                Gk[1] += 1.0
            G[k] = Gk
            s_last[k] = t
        if not thr_mode:
            lam_prev[l] = float(intensity(y_post[l], psi, beta, cap))
            dt_prev[l] = dt
            integral[l] = 0.0

    t_end = float(solution.final_time)
    flows = np.array([flow(k, t_end) for k in range(K)])
    return OnlineResult(grads, flows, t_end)


def eligibility_traces(params, solution, modulator):
    """Weight gradients from per-synapse traces and a global modulator.

    ``modulator(n, k, t)`` returns dL/dtau for event ``n`` (neuron ``k`` at
    time ``t``).  The traces are exact for feed-forward (acyclic) masks in
    threshold mode; otherwise they are returned as approximations with a
    warning.  Returns a K x K gradient matrix, zero outside the mask.
    """
    K = params.K
    mu1, mu2 = params.mu
    if not params.is_dag():
        warnings.warn("weight mask has cycles; eligibility traces are approximations", ApproximationWarning,
                      stacklevel=2)
    if params.threshold is None or not params.deterministic:
        warnings.warn("eligibility traces are exact only for noise-free threshold firing; treating them as "
                      "estimators", ApproximationWarning, stacklevel=2)
    A = np.zeros((K, K))
    Bf = np.zeros((K, K))
    last = np.zeros((K, K))
    grad = np.zeros((K, K))
    mask = params.mask

    def propagate(j, k, t):
        z = expm_gamma(mu1, mu2, t - last[j, k]) @ np.array([A[j, k], Bf[j, k]])
        A[j, k], Bf[j, k] = z
        last[j, k] = t

    for n in range(solution.n_events):
        t = float(solution.event_times[n])
        l = int(solution.event_labels[n])
        y_pre = solution.pre_event_states[n]
        v, i = y_pre[l], y_pre[K + l]
        for j in np.flatnonzero(mask[:, l]):
            propagate(j, l, t)
            denom = mu1 * (v - i)
            _check_denom(denom, t)
            grad[j, l] += modulator(n, l, t) * A[j, l] / denom
            A[j, l] += params.v_reset * A[j, l] / (i - v)
        for k in np.flatnonzero(mask[l]):
            propagate(l, k, t)
            Bf[l, k] += 1.0
    return grad
