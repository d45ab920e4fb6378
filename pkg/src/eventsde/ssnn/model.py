"""Stochastic leaky integrate-and-fire networks as Event SDEs.

Neuron k carries (v, i, s): membrane potential, input current and an
integrated-intensity clock.  Between spikes

    dv = mu1 (i - v) dt + sigma1 dB1,   di = (-mu2 i + c_k) dt + sigma2 dB2,   ds = lambda(v) dt

and neuron k fires when s hits zero from below.  At its own spike v drops by
``v_reset`` and s restarts at ``log u - alpha``; every other neuron j gets
``i_j += w[k, j]``.  ``c_k`` is an optional constant input drift.

State layout: ``[v_0..v_{K-1}, i_0.., s_0.., theta..]`` where theta holds the
masked weights when they are differentiated through state augmentation.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..events import EventSpec
from ..rng import UniformStream
from ..sde_core import VectorFields

RESET_MODES = ("shift", "zero")


@dataclass
class NetworkParams:
    K: int
    w: np.ndarray
    mu: tuple = (15.0, 0.0)
    sigma: tuple = (0.0, 0.0)
    v_reset: float = 1.4
    alpha: float = 0.03
    psi: float = 1.0
    beta: float = 0.2
    lambda_cap: Optional[float] = None
    input_drift: Optional[np.ndarray] = None
    threshold: Optional[float] = None
    reset_mode: str = "shift"
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64).reshape(self.K, self.K)
        self.mu = tuple(float(m) for m in self.mu)
        self.sigma = tuple(float(s) for s in self.sigma)
        if self.mask is None:
            self.mask = self.w != 0
        self.mask = np.array(self.mask, dtype=bool).reshape(self.K, self.K)
        np.fill_diagonal(self.mask, False)
        if self.input_drift is None:
            self.input_drift = np.zeros(self.K)
        self.input_drift = np.array(self.input_drift, dtype=np.float64).reshape(self.K)
        self.validate()

    def validate(self):
        if self.K < 1:
            raise ValueError("K must be a positive integer")
        if len(self.mu) != 2 or self.mu[0] <= 0 or self.mu[1] < 0:
            raise ValueError(f"mu must be (mu1 > 0, mu2 >= 0), got {self.mu}")
        if len(self.sigma) != 2 or min(self.sigma) < 0:
            raise ValueError(f"sigma must be two non-negative scales, got {self.sigma}")
        if not self.v_reset > 0:
            raise ValueError("v_reset must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.reset_mode not in RESET_MODES:
            raise ValueError(f"reset_mode must be one of {RESET_MODES}")
        if not self.cap > 0:
            raise ValueError("lambda_cap must be positive")
        if np.any(self.w[~self.mask] != 0):
            raise ValueError("weights outside the architecture mask must be zero")

    @property
    def cap(self):
        if self.lambda_cap is not None:
            return float(self.lambda_cap)
        return math.exp(5.0)

    @property
    def refractory_bound(self):
        """Lower bound alpha / C on inter-spike gaps of a single neuron."""
        return self.alpha / self.cap

    @property
    def deterministic(self):
        return self.sigma[0] == 0 and self.sigma[1] == 0

    @property
    def n_weights(self):
        return int(self.mask.sum())

    def weight_index(self):
        """(pre, post) pairs of the masked weights, in theta order."""
        return [tuple(ij) for ij in np.argwhere(self.mask)]

    def weights_vector(self):
        return self.w[self.mask].copy()

    def with_weights(self, theta):
        w = np.zeros_like(self.w)
        w[self.mask] = theta
        return replace(self, w=w, mask=self.mask.copy())

    def is_dag(self):
        # Kahn's algorithm on the mask adjacency
        indeg = self.mask.sum(axis=0).astype(int)
        queue = [k for k in range(self.K) if indeg[k] == 0]
        seen = 0
        while queue:
            k = queue.pop()
            seen += 1
            for j in np.flatnonzero(self.mask[k]):
                indeg[j] -= 1
                if indeg[j] == 0:
                    queue.append(j)
        return seen == self.K

    def descendants(self, j):
        out, stack = set(), [j]
        while stack:
            k = stack.pop()
            for m in np.flatnonzero(self.mask[k]):
                if m not in out:
                    out.add(int(m))
                    stack.append(int(m))
        return out


def intensity(v, psi, beta, cap):
    """exp((v - psi)/beta) clipped at ``cap``."""
    with np.errstate(over="ignore"):
        lam = np.exp((np.asarray(v) - psi) / beta)
    return np.minimum(lam, cap)


def intensity_grad(v, psi, beta, cap):
    with np.errstate(over="ignore"):
        lam = np.exp((np.asarray(v) - psi) / beta)
    return np.where(lam < cap, lam / beta, 0.0)


def feedforward_mask(layers):
    """Boolean K x K mask connecting each layer to the next."""
    K = sum(layers)
    mask = np.zeros((K, K), dtype=bool)
    start = 0
    for a, b in zip(layers[:-1], layers[1:]):
        mask[start:start + a, start + a:start + a + b] = True
        start += a
    return mask


def layer_slices(layers):
    out, start = [], 0
    for n in layers:
        out.append(slice(start, start + n))
        start += n
    return out


def initial_clocks(params, seed):
    """s0 = log u - alpha per neuron, from the ``clock-init`` stream of ``seed``."""
    u = UniformStream(seed, "clock-init").take(0, params.K)
    return np.log(u) - params.alpha


def initial_state(params, seed, v0=None, i0=None, augment=False):
    K = params.K
    v0 = np.zeros(K) if v0 is None else np.broadcast_to(np.asarray(v0, dtype=np.float64), (K,))
    i0 = np.zeros(K) if i0 is None else np.broadcast_to(np.asarray(i0, dtype=np.float64), (K,))
    parts = [v0, i0, initial_clocks(params, seed)]
    if augment:
        parts.append(params.weights_vector())
    return np.concatenate(parts)


@dataclass
class SLIFSystem:
    """Vector fields and event specs of a network, plus layout helpers."""

    params: NetworkParams
    fields: VectorFields
    specs: list
    augment: bool = False
    theta_index: dict = field(default_factory=dict)

    @property
    def dim(self):
        return 3 * self.params.K + (self.params.n_weights if self.augment else 0)

    def v(self, y):
        return y[: self.params.K]

    def i(self, y):
        K = self.params.K
        return y[K: 2 * K]

    def s(self, y):
        K = self.params.K
        return y[2 * K: 3 * K]


def build_slif_network(params, augment_weights=False):
    """Return an ``SLIFSystem`` for ``params``.

    With ``augment_weights`` the masked weights are appended to the state as
    constant coordinates, so sensitivities with respect to them come out of
    the generic forward pass.
    """
    params.validate()
    K = params.K
    mu1, mu2 = params.mu
    sig1, sig2 = params.sigma
    psi, beta, cap = params.psi, params.beta, params.cap
    pairs = params.weight_index() if augment_weights else []
    theta_index = {pq: 3 * K + n for n, pq in enumerate(pairs)}
    e = 3 * K + len(pairs)
    drift_in = params.input_drift
    v_sl, i_sl, s_sl = slice(0, K), slice(K, 2 * K), slice(2 * K, 3 * K)

    def drift(y):
        out = np.zeros(e)
        v, i = y[v_sl], y[i_sl]
        out[v_sl] = mu1 * (i - v)
        out[i_sl] = -mu2 * i + drift_in
        out[s_sl] = intensity(v, psi, beta, cap)
        return out

    jac = np.zeros((e, e))
    idx = np.arange(K)
    jac[idx, idx] = -mu1
    jac[idx, K + idx] = mu1
    jac[K + idx, K + idx] = -mu2

    def drift_jacobian(y):
        J = jac.copy()
        J[2 * K + idx, idx] = intensity_grad(y[v_sl], psi, beta, cap)
        return J

    sig = np.zeros((e, 2 * K))
    sig[idx, 2 * idx] = sig1
    sig[K + idx, 2 * idx + 1] = sig2

    fields = VectorFields(
        drift=drift,
        diffusion=lambda y: sig,
        drift_jacobian=drift_jacobian,
        diffusion_jacobian=lambda y: np.zeros((e, 2 * K, e)),
        additive=True,
    )

    specs = []
    for k in range(K):
        specs.append(_neuron_spec(params, k, e, theta_index))
    return SLIFSystem(params, fields, specs, augment_weights, theta_index)


def _neuron_spec(params, k, e, theta_index):
    K = params.K
    grad = np.zeros(e)
    if params.threshold is None:
        grad[2 * K + k] = 1.0

        def event_fn(y):
            return y[2 * K + k]
    else:
        grad[k] = 1.0
        thr = params.threshold

        def event_fn(y):
            return y[k] - thr

    targets = [j for j in range(K) if j != k and params.mask[k, j]]
    w = params.w
    v_reset, alpha = params.v_reset, params.alpha
    zero_reset = params.reset_mode == "zero"

    def transition(y, u):
        out = np.array(y, dtype=np.float64)
        out[k] = 0.0 if zero_reset else out[k] - v_reset
        out[2 * K + k] = math.log(u) - alpha
        for j in targets:
            col = theta_index.get((k, j))
            out[K + j] += out[col] if col is not None else w[k, j]
        return out

    base = np.eye(e)
    base[2 * K + k, 2 * K + k] = 0.0
    if zero_reset:
        base[k, k] = 0.0
    for j in targets:
        col = theta_index.get((k, j))
        if col is not None:
            base[K + j, col] = 1.0

    return EventSpec(
        event_fn=event_fn,
        transition_fn=transition,
        label=k,
        event_grad=lambda y: grad,
        transition_jac=lambda y, u: base,
    )
