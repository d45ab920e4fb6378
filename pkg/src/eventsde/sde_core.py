"""Brownian drivers and Stratonovich stepping between events.

The driver is sampled once on a fine grid and linearly interpolated, so the
same path can be evaluated at arbitrary (e.g. root-finding) times.  Two
one-step schemes are provided: the Stratonovich Heun predictor-corrector and
Euler-Maruyama, which coincides with it in law when the diffusion is
state-independent.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .rng import derive_seed, normals

SCHEMES = ("heun", "euler")

# Relative slack used when mapping floating times onto grid indices.
_GRID_EPS = 1e-9


def _n_cells(t0, t1, resolution):
    return max(1, int(math.ceil((t1 - t0) / resolution - _GRID_EPS)))


def grid_node(origin, dt, k):
    """Time of grid node ``k``; every caller uses this one expression so grids align bitwise."""
    return origin + k * dt


def next_grid_time(t, origin, dt, t_end):
    """Smallest grid node strictly after ``t``, capped at ``t_end``."""
    k = int(math.floor((t - origin) / dt)) + 1
    while grid_node(origin, dt, k) <= t:
        k += 1
    while k > 1 and grid_node(origin, dt, k - 1) > t:
        k -= 1
    return min(grid_node(origin, dt, k), t_end)


def brownian_normals(seed, n_cells, dim):
    """Standard normal draws for ``n_cells`` driver cells; cell ``k`` uses words ``k*dim .. k*dim+dim-1``."""
    key = derive_seed(seed, "brownian")
    return normals(key, 0, n_cells * dim).reshape(n_cells, dim)


@dataclass
class BrownianDriver:
    """A d-dimensional Brownian path sampled on a grid and linearly interpolated."""

    dim: int
    t0: float
    t1: float
    resolution: float
    seed: int
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __call__(self, t):
        return evaluate_driver(self, t)

    @property
    def increments(self):
        return np.diff(self.values, axis=0)


def sample_driver(dim, t0, t1, resolution, seed):
    """Sample a Brownian path on ``[t0, t1]`` with grid spacing ``resolution``.

    Increments of cell ``k`` are drawn from the counter-based stream keyed by
    ``(seed, k)``, so any sub-range can be regenerated independently.
    """
    if resolution <= 0 or not math.isfinite(resolution):
        raise ValueError(f"resolution must be positive, got {resolution}")
    if not t0 < t1:
        raise ValueError(f"need t0 < t1, got [{t0}, {t1}]")
    if dim < 1:
        raise ValueError("dim must be a positive integer")
    n = _n_cells(t0, t1, resolution)
    times = grid_node(t0, resolution, np.arange(n + 1, dtype=np.float64))
    times[-1] = t1
    z = brownian_normals(seed, n, dim)
    dt = np.diff(times)
    values = np.zeros((n + 1, dim))
    np.cumsum(z * np.sqrt(dt)[:, None], axis=0, out=values[1:])
    return BrownianDriver(int(dim), float(t0), float(t1), float(resolution), int(seed), times, values)


def zero_driver(dim, t0, t1, resolution=None):
    """A driver that is identically zero (deterministic runs)."""
    resolution = resolution or (t1 - t0)
    n = _n_cells(t0, t1, resolution)
    times = grid_node(t0, resolution, np.arange(n + 1, dtype=np.float64))
    times[-1] = t1
    return BrownianDriver(int(dim), float(t0), float(t1), float(resolution), 0, times, np.zeros((n + 1, dim)))


def evaluate_driver(driver, t):
    """Value of the interpolated driver at time ``t`` (exact at grid nodes)."""
    if not driver.t0 <= t <= driver.t1:
        raise ValueError(f"t={t} outside driver span [{driver.t0}, {driver.t1}]")
    times = driver.times
    k = int(np.searchsorted(times, t, side="right")) - 1
    if k >= len(times) - 1:
        return driver.values[-1].copy()
    tk = times[k]
    if t == tk:
        return driver.values[k].copy()
    w = (t - tk) / (times[k + 1] - tk)
    return driver.values[k] + w * (driver.values[k + 1] - driver.values[k])


def numerical_jacobian(f, y, out_shape=None):
    """Central-difference Jacobian with per-coordinate step ``1e-6 * (1 + |y_i|)``.

    The derivative index is the last axis of the result.
    """
    y = np.asarray(y, dtype=np.float64)
    f0 = np.asarray(f(y))
    jac = np.empty(f0.shape + (y.size,))
    for i in range(y.size):
        h = 1e-6 * (1.0 + abs(y[i]))
        yp = y.copy()
        ym = y.copy()
        yp[i] += h
        ym[i] -= h
        jac[..., i] = (np.asarray(f(yp)) - np.asarray(f(ym))) / (2.0 * h)
    return jac


@dataclass
class VectorFields:
    """Drift and diffusion of ``dy = mu(y) dt + sigma(y) o dB``.

    ``drift_jacobian(y)`` returns an (e, e) array and ``diffusion_jacobian(y)``
    an (e, d, e) array whose last axis is the derivative direction.  Missing
    Jacobians fall back to central differences.  Set ``additive=True`` when
    the diffusion does not depend on the state; its Jacobian is then zero.
    """

    drift: Callable
    diffusion: Callable
    drift_jacobian: Optional[Callable] = None
    diffusion_jacobian: Optional[Callable] = None
    additive: bool = False

    def mu(self, y):
        return np.asarray(self.drift(y), dtype=np.float64)

    def sigma(self, y):
        return np.asarray(self.diffusion(y), dtype=np.float64)

    def jac_mu(self, y):
        if self.drift_jacobian is not None:
            return np.asarray(self.drift_jacobian(y), dtype=np.float64)
        return numerical_jacobian(self.drift, y)

    def jac_sigma(self, y):
        if self.diffusion_jacobian is not None:
            return np.asarray(self.diffusion_jacobian(y), dtype=np.float64)
        if self.additive:
            s = self.sigma(y)
            return np.zeros(s.shape + (len(y),))
        return numerical_jacobian(self.diffusion, y)


@dataclass
class PathSegment:
    """Solver output on one inter-event interval."""

    times: np.ndarray
    states: np.ndarray

    @property
    def t_start(self):
        return float(self.times[0])

    @property
    def t_end(self):
        return float(self.times[-1])

    def __len__(self):
        return len(self.times)


def _check(y, t, what="state"):
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite {what} at t={t}", t=t, y=np.array(y, copy=True))
    return y


def step(y, h, dB, fields, scheme="heun"):
    """One step of size ``h`` with driver increment ``dB``."""
    mu = fields.mu(y)
    sig = fields.sigma(y)
    if scheme == "euler":
        return y + mu * h + sig @ dB
    if scheme != "heun":
        raise ValueError(f"unknown scheme {scheme!r}")
    pred = y + mu * h + sig @ dB
    return y + 0.5 * (mu + fields.mu(pred)) * h + 0.5 * (sig + fields.sigma(pred)) @ dB


def step_derivatives(y, h, dB, fields, scheme="heun"):
    """Step output together with its state Jacobian and its derivative in ``h``.

    The driver increment is held fixed when differentiating in ``h``: the
    time-derivative of the driving path is treated as zero.
    """
    e = len(y)
    eye = np.eye(e)
    mu = fields.mu(y)
    sig = fields.sigma(y)
    jmu = fields.jac_mu(y)
    if fields.additive:
        dsig = None
    else:
        dsig = np.einsum("abc,b->ac", fields.jac_sigma(y), dB)
    if scheme == "euler":
        y_new = y + mu * h + sig @ dB
        phi = eye + h * jmu
        if dsig is not None:
            phi = phi + dsig
        return y_new, phi, mu
    if scheme != "heun":
        raise ValueError(f"unknown scheme {scheme!r}")
    pred = y + mu * h + sig @ dB
    dpred = eye + h * jmu
    if dsig is not None:
        dpred = dpred + dsig
    mu_p = fields.mu(pred)
    sig_p = fields.sigma(pred)
    jmu_p = fields.jac_mu(pred)
    y_new = y + 0.5 * (mu + mu_p) * h + 0.5 * (sig + sig_p) @ dB
    phi = eye + 0.5 * h * (jmu + jmu_p @ dpred)
    vel = 0.5 * (mu + mu_p) + 0.5 * h * (jmu_p @ mu)
    if dsig is not None:
        jsig_p = fields.jac_sigma(pred)
        dsig_p = np.einsum("abc,b->ac", jsig_p, dB)
        phi = phi + 0.5 * (dsig + dsig_p @ dpred)
        vel = vel + 0.5 * (dsig_p @ mu)
    return y_new, phi, vel


def stratonovich_step(y, t, dt, fields, driver, scheme="heun"):
    """Advance ``y`` from ``t`` to ``t + dt`` (Heun by default, Euler-Maruyama on request)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    y = _check(np.asarray(y, dtype=np.float64), t)
    dB = evaluate_driver(driver, t + dt) - evaluate_driver(driver, t)
    return _check(step(y, dt, dB, fields, scheme), t + dt)


def solve_segment(y0, t0, t1, dt, fields, driver, scheme="heun", grid_origin=None):
    """Integrate from ``t0`` to ``t1`` with steps of ``dt``.

    Steps land on the grid ``grid_origin + k*dt`` (``grid_origin`` defaults to
    ``t0``); the first and last steps are shortened as needed so the segment
    starts at ``t0`` and ends exactly on ``t1``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if t1 < t0:
        raise ValueError(f"need t0 <= t1, got [{t0}, {t1}]")
    origin = t0 if grid_origin is None else grid_origin
    y = _check(np.array(y0, dtype=np.float64), t0)
    times = [t0]
    states = [y]
    t = t0
    b_prev = evaluate_driver(driver, t)
    while t < t1:
        t_next = next_grid_time(t, origin, dt, t1)
        b_next = evaluate_driver(driver, t_next)
        y = _check(step(y, t_next - t, b_next - b_prev, fields, scheme), t_next)
        times.append(t_next)
        states.append(y)
        t, b_prev = t_next, b_next
    return PathSegment(np.array(times), np.array(states))
