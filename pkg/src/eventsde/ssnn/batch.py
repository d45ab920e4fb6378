"""Vectorised Euler simulation of SLIF networks across a batch of seeds.

This is the same discrete scheme as the generic event solver run with
``scheme="euler"`` and a driver sampled at resolution ``dt``: identical
Brownian increments, the same fixed grid, and events resolved inside a step
by cutting it at the crossing.  With Euler the clock ``s`` is linear in the
step length, so the crossing time is available in closed form.  Forward
sensitivities are propagated alongside with the exact discrete Jacobians.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import StepSizeError
from ..events import MAX_EVENTS_PER_STEP
from ..rng import UniformStream, derive_seed
from ..sde_core import sample_driver
from .model import initial_clocks, intensity, intensity_grad

GRAD_MODES = (None, "weights", "i0")


@dataclass
class BatchResult:
    """Spike records of a batch, padded to the longest sample.

    ``times``/``neurons`` have shape (B, L) with NaN / -1 padding.  ``grads``
    (B, L, P) holds spike-time derivatives when a gradient mode was requested.
    ``end_time`` is T, or the time of the last allowed event when ``n_max``
    stopped the run; ``end_grad`` is its derivative.
    """

    times: np.ndarray
    neurons: np.ndarray
    counts: np.ndarray
    grads: Optional[np.ndarray]
    end_time: np.ndarray
    end_grad: Optional[np.ndarray]
    v: np.ndarray
    i: np.ndarray
    s: np.ndarray
    K: int
    T: float

    @property
    def batch(self):
        return len(self.counts)

    def trains(self):
        """Per-sample list of per-neuron spike-time arrays."""
        out = []
        for b in range(self.batch):
            n = self.counts[b]
            t, k = self.times[b, :n], self.neurons[b, :n]
            out.append([t[k == j] for j in range(self.K)])
        return out

    def gaps(self):
        """All same-neuron inter-spike gaps in the batch."""
        gaps = []
        for tr in self.trains():
            for t in tr:
                if len(t) > 1:
                    gaps.append(np.diff(t))
        return np.concatenate(gaps) if gaps else np.zeros(0)


def sample_seeds(seed, batch, purpose="sample"):
    return [derive_seed(seed, purpose, b) for b in range(batch)]


def _uniforms(seed, n):
    return UniformStream(seed, "transitions").take(0, n)


def simulate_batch(params, T, dt, seeds, n_max=None, v0=None, i0=None, grad=None):
    """Simulate one network per seed with the Euler scheme.

    ``grad`` selects what spike times are differentiated against: ``"weights"``
    (the masked entries of w, in mask order) or ``"i0"`` (initial currents).
    """
    if grad not in GRAD_MODES:
        raise ValueError(f"grad must be one of {GRAD_MODES}")
    if not T > 0:
        raise ValueError("T must be positive")
    params.validate()
    K = params.K
    B = len(seeds)
    mu1, mu2 = params.mu
    sig1, sig2 = params.sigma
    psi, beta, cap = params.psi, params.beta, params.cap
    thr = params.threshold
    zero_reset = params.reset_mode == "zero"
    n_max = np.inf if n_max is None else n_max
    w_off = params.w * params.mask
    c_in = params.input_drift

    drivers = [sample_driver(2 * K, 0.0, T, dt, s) for s in seeds]
    grid = drivers[0].times
    incs = np.stack([d.increments for d in drivers])  # (B, cells, 2K)
    u_cap = 32
    us = np.stack([_uniforms(s, u_cap) for s in seeds])

    v = np.zeros((B, K)) if v0 is None else np.broadcast_to(np.asarray(v0, float), (B, K)).copy()
    i = np.zeros((B, K)) if i0 is None else np.broadcast_to(np.asarray(i0, float), (B, K)).copy()
    s = np.stack([initial_clocks(params, sd) for sd in seeds])

    if grad == "weights":
        pairs = params.weight_index()
        P = len(pairs)
        E = np.zeros((K, K, P))
        for n, (a, b) in enumerate(pairs):
            E[a, b, n] = 1.0
    elif grad == "i0":
        P = K
    if grad is not None:
        Jv = np.zeros((B, K, P))
        Ji = np.zeros((B, K, P))
        Js = np.zeros((B, K, P))
        if grad == "i0":
            Ji[:] = np.eye(K)
        dtc = np.zeros((B, P))

    cap_len = 16
    times = np.full((B, cap_len), np.nan)
    neurons = np.full((B, cap_len), -1, dtype=int)
    grads = np.zeros((B, cap_len, P)) if grad is not None else None
    counts = np.zeros(B, dtype=int)
    end_time = np.full(B, float(T))
    end_grad = np.zeros((B, P)) if grad is not None else None
    done = np.zeros(B, dtype=bool) if n_max > 0 else np.ones(B, dtype=bool)
    rows = np.arange(B)

    for c in range(len(grid) - 1):
        if done.all():
            break
        t_lo, t_hi = grid[c], grid[c + 1]
        hcell = t_hi - t_lo
        dBv_cell = incs[:, c, 0::2]
        dBi_cell = incs[:, c, 1::2]
        tcur = np.full(B, t_lo)
        live = ~done
        n_iter = 0
        while live.any():
            n_iter += 1
            if n_iter > MAX_EVENTS_PER_STEP + 1:
                raise StepSizeError(f"more than {MAX_EVENTS_PER_STEP} events in one step near t={t_lo}; reduce dt")
            h = t_hi - tcur
            frac = h / hcell
            lam = intensity(v, psi, beta, cap)
            vel_v = mu1 * (i - v)
            vel_i = -mu2 * i + c_in
            if thr is None:
                with np.errstate(divide="ignore", invalid="ignore"):
                    hit = np.where(s + lam * h[:, None] >= 0.0, -s / lam, np.inf)
            else:
                dv_full = vel_v * h[:, None] + sig1 * dBv_cell * frac[:, None]
                with np.errstate(divide="ignore", invalid="ignore"):
                    slope = dv_full / h[:, None]
                    hit = np.where(v + dv_full >= thr, (thr - v) / slope, np.inf)
            hit[~live] = np.inf
            k_star = np.argmin(hit, axis=1)
            h_star = hit[rows, k_star]
            ev = live & np.isfinite(h_star)
            h_step = np.where(ev, np.clip(h_star, 0.0, h), h)
            h_step[~live] = 0.0
            f = (h_step / hcell)[:, None]
            hs = h_step[:, None]

            if grad is not None:
                lam_p = intensity_grad(v, psi, beta, cap)
                h3 = hs[:, :, None]
                d3 = dtc[:, None, :]
                Jv_n = Jv + h3 * mu1 * (Ji - Jv) - vel_v[:, :, None] * d3
                Ji_n = Ji * (1.0 - h3 * mu2) - vel_i[:, :, None] * d3
                Js_n = Js + h3 * lam_p[:, :, None] * Jv - lam[:, :, None] * d3
                lv = live[:, None, None]
                Jv = np.where(lv, Jv_n, Jv)
                Ji = np.where(lv, Ji_n, Ji)
                Js = np.where(lv, Js_n, Js)

            v = np.where(live[:, None], v + vel_v * hs + sig1 * dBv_cell * f, v)
            i = np.where(live[:, None], i + vel_i * hs + sig2 * dBi_cell * f, i)
            s = np.where(live[:, None], s + lam * hs, s)
            tcur = np.where(live, np.where(ev, tcur + h_step, t_hi), tcur)

            if grad is not None:
                reg = live & ~ev
                dtc[reg] = 0.0

            if not ev.any():
                break
            eb = np.flatnonzero(ev)
            ek = k_star[eb]
            if grad is not None:
                if thr is None:
                    dtau = -Js[eb, ek] / lam[eb, ek][:, None]
                else:
                    dtau = -Jv[eb, ek] / vel_v[eb, ek][:, None]
                Jv[eb] += vel_v[eb][:, :, None] * dtau[:, None, :]
                Ji[eb] += vel_i[eb][:, :, None] * dtau[:, None, :]
                Js[eb] += lam[eb][:, :, None] * dtau[:, None, :]
                if zero_reset:
                    Jv[eb, ek] = 0.0
                Js[eb, ek] = 0.0
                if grad == "weights":
                    Ji[eb] += E[ek]
                dtc[eb] = dtau

            n_ev = counts[eb]
            need = n_ev.max() + 1
            if need > times.shape[1]:
                extra = max(need, 2 * times.shape[1]) - times.shape[1]
                times = np.pad(times, ((0, 0), (0, extra)), constant_values=np.nan)
                neurons = np.pad(neurons, ((0, 0), (0, extra)), constant_values=-1)
                if grads is not None:
                    grads = np.pad(grads, ((0, 0), (0, extra), (0, 0)))
            if need > us.shape[1]:
                u_cap = max(need, 2 * us.shape[1])
                us = np.stack([_uniforms(sd, u_cap) for sd in seeds])
            t_ev = tcur[eb]
            times[eb, n_ev] = t_ev
            neurons[eb, n_ev] = ek
            if grad is not None:
                grads[eb, n_ev] = dtau
            u = us[eb, n_ev]

            v[eb, ek] = 0.0 if zero_reset else v[eb, ek] - params.v_reset
            s[eb, ek] = np.log(u) - params.alpha
            i[eb] += w_off[ek]
            counts[eb] += 1

            fin = eb[counts[eb] >= n_max]
            if fin.size:
                done[fin] = True
                end_time[fin] = tcur[fin]
                if grad is not None:
                    end_grad[fin] = dtc[fin]
            live = ~done & (tcur < t_hi)

    L = max(1, int(counts.max()) if B else 1)
    return BatchResult(
        times=times[:, :L],
        neurons=neurons[:, :L],
        counts=counts,
        grads=grads[:, :L] if grads is not None else None,
        end_time=end_time,
        end_grad=end_grad,
        v=v, i=i, s=s, K=K, T=float(T),
    )
