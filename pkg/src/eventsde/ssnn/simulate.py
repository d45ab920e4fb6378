"""Spike-train simulation front ends."""

import numpy as np

from ..events import event_sde_solve
from ..rng import UniformStream
from ..sde_core import sample_driver
from .batch import sample_seeds, simulate_batch
from .model import build_slif_network, initial_state


def run_network(params, T, dt, seed, n_max=10_000, v0=None, i0=None, scheme="euler", augment_weights=False,
                system=None, tracker_solve=None):
    """Solve one network with the generic event solver.

    Returns ``(system, y0, driver, u_stream, solution)``.  The driver has
    resolution ``dt`` on ``[0, T]`` so the grid matches the batched engine.
    """
    system = system or build_slif_network(params, augment_weights)
    y0 = initial_state(params, seed, v0, i0, augment_weights)
    driver = sample_driver(2 * params.K, 0.0, T, dt, seed)
    u_stream = UniformStream(seed, "transitions")
    sol = event_sde_solve(y0, system.fields, system.specs, driver, n_max, 0.0, dt, T, scheme, u_stream)
    return system, y0, driver, u_stream, sol


def solution_trains(solution, K):
    """Per-neuron spike times of one generic solution."""
    t, k = solution.event_times, solution.event_labels
    return [t[k == j] for j in range(K)]


def simulate_spike_trains(params, T, dt, seed, batch, n_max=None, v0=None, i0=None, engine="batch", scheme="euler"):
    """Simulate ``batch`` independent networks.

    Sample b uses the sub-seed ``derive_seed(seed, "sample", b)`` for its
    driver, clock initialisation and transition randomness.  The default
    batched engine is Euler only; ``engine="generic"`` runs the general event
    solver (and allows ``scheme="heun"``).  Returns one list of per-neuron
    spike-time arrays per sample.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    seeds = sample_seeds(seed, batch)
    if engine == "batch":
        if scheme != "euler":
            raise ValueError("the batched engine implements the Euler scheme only")
        return simulate_batch(params, T, dt, seeds, n_max, v0, i0).trains()
    if engine != "generic":
        raise ValueError(f"unknown engine {engine!r}")
    system = build_slif_network(params)
    out = []
    for sd in seeds:
        *_, sol = run_network(params, T, dt, sd, 10_000 if n_max is None else n_max, v0, i0, scheme, system=system)
        out.append(solution_trains(sol, params.K))
    return out


def min_gap(trains_batch):
    """Smallest same-neuron inter-spike gap over a batch (inf if none)."""
    best = np.inf
    for tr in trains_batch:
        for t in tr:
            if len(t) > 1:
                best = min(best, float(np.min(np.diff(t))))
    return best
