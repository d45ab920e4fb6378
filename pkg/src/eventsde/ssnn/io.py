"""Spike-train CSV files: one row per spike, ``sample_id,neuron_id,spike_time``.

A leading ``# key=value ...`` comment records the batch size, neuron count
and horizon so that samples without spikes survive a round trip.
"""

import csv

import numpy as np

from ..errors import ConfigError

HEADER = ["sample_id", "neuron_id", "spike_time"]


def write_spike_csv(path, trains, T=None):
    n_neurons = max((len(tr) for tr in trains), default=0)
    with open(path, "w", newline="") as fh:
        meta = f"# n_samples={len(trains)} n_neurons={n_neurons}"
        if T is not None:
            meta += f" T={float(T)!r}"
        fh.write(meta + "\n")
        w = csv.writer(fh)
        w.writerow(HEADER)
        for b, tr in enumerate(trains):
            rows = [(t, k) for k, ts in enumerate(tr) for t in ts]
            for t, k in sorted(rows):
                w.writerow([b, k, repr(float(t))])


def read_spike_csv(path):
    """Return ``(trains, meta)``; raises ``ConfigError`` on malformed input."""
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for ln, line in enumerate(lines, 1):
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = float(v) if k == "T" else int(v)
        elif line.strip():
            body.append((ln, line))
    if not body:
        raise ConfigError(f"{path}: empty spike file (missing header)")
    header = [c.strip() for c in body[0][1].split(",")]
    if header != HEADER:
        raise ConfigError(f"{path}:{body[0][0]}: expected header {','.join(HEADER)}, got {body[0][1]!r}")
    for ln, line in body[1:]:
        parts = line.split(",")
        try:
            b, k, t = int(parts[0]), int(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise ConfigError(f"{path}:{ln}: cannot parse row {line!r}") from None
        if b < 0 or k < 0 or not np.isfinite(t):
            raise ConfigError(f"{path}:{ln}: invalid row {line!r}")
        rows.append((b, k, t))
    n_samples = meta.get("n_samples", 1 + max((r[0] for r in rows), default=-1))
    n_neurons = meta.get("n_neurons", 1 + max((r[1] for r in rows), default=-1))
    buckets = [[[] for _ in range(n_neurons)] for _ in range(n_samples)]
    for b, k, t in rows:
        if b >= n_samples or k >= n_neurons:
            raise ConfigError(f"{path}: row ({b}, {k}) outside declared sizes")
        buckets[b][k].append(t)
    trains = [[np.sort(np.array(ts)) for ts in tr] for tr in buckets]
    return trains, meta
