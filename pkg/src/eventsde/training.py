"""Signature-kernel MMD training of SLIF networks.

The loss is the unbiased MMD between a generated batch and a data batch of
spike trains.  Its gradient is assembled by the chain rule: the derivative
of the loss with respect to every generated spike time (through the
signature) times the derivative of that spike time with respect to the
parameters (from the forward sensitivities of the batched simulator).
Data paths are constants.
"""

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Union

import numpy as np

from .errors import EventSDEError, OptimizerError, TrainingError
from .rng import derive_seed
from .signature import (
    KernelConfig,
    gram,
    mmd_from_grams,
    mmd_signature_grad,
    signature_batch,
    spike_segments,
    spike_time_grads,
)
from .ssnn import NetworkParams, feedforward_mask, sample_seeds, simulate_batch


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class LRSchedule:
    """Piecewise-constant learning rate: ``values[k]`` from step ``boundaries[k-1]`` on."""

    values: List[float]
    boundaries: List[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.values) != len(self.boundaries) + 1:
            raise ValueError("need one more value than boundaries")

    def __call__(self, step):
        k = int(np.searchsorted(self.boundaries, step, side="right"))
        return float(self.values[k])

    @classmethod
    def two_phase(cls, lr_start, lr_end, steps, frac=2 / 3):
        return cls([lr_start, lr_end], [int(round(frac * steps))])


@dataclass
class OptimizerState:
    schedule: LRSchedule
    rho: float = 0.7
    momentum: float = 0.3
    eps: float = 1e-8
    sq: Optional[np.ndarray] = None
    buf: Optional[np.ndarray] = None
    step: int = 0


def rmsprop_step(state, params, grad):
    """One RMSProp update with momentum; returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient at step {state.step}")
    sq = np.zeros_like(params) if state.sq is None else state.sq
    buf = np.zeros_like(params) if state.buf is None else state.buf
    lr = state.schedule(state.step)
    sq = state.rho * sq + (1.0 - state.rho) * grad * grad
    buf = state.momentum * buf + lr * grad / np.sqrt(sq + state.eps)
    new_state = OptimizerState(state.schedule, state.rho, state.momentum, state.eps, sq, buf, state.step + 1)
    return new_state, params - buf


# ---------------------------------------------------------------------------
# spike data


@dataclass
class SpikeData:
    """Padded spike records of a batch (see ``BatchResult``)."""

    times: np.ndarray
    neurons: np.ndarray
    counts: np.ndarray
    end_time: np.ndarray
    K: int

    @classmethod
    def from_batch(cls, r):
        return cls(r.times, r.neurons, r.counts, r.end_time, r.K)

    def __len__(self):
        return len(self.counts)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SpikeData(self.times[idx], self.neurons[idx], self.counts[idx], self.end_time[idx], self.K)

    def first_spike_means(self, n=3):
        """Average time of the m-th spike over samples that have it, m = 1..n."""
        out = np.full(n, np.nan)
        for m in range(n):
            has = self.counts > m
            if has.any():
                out[m] = self.times[has, m].mean()
        return out

    def trains(self):
        out = []
        for b in range(len(self)):
            n = self.counts[b]
            t, k = self.times[b, :n], self.neurons[b, :n]
            out.append([t[k == j] for j in range(self.K)])
        return out


def first_spike_mae(a, b, n=3):
    """MAE between per-index average spike times of two batches (indices 1..n)."""
    ma, mb = a.first_spike_means(n), b.first_spike_means(n)
    ok = np.isfinite(ma) & np.isfinite(mb)
    if not ok.any():
        return float("nan")
    return float(np.mean(np.abs(ma[ok] - mb[ok])))


def match_spike_counts(gen, data):
    """Pair samples by total spike count and truncate each pair to common per-neuron counts.

    Generated and data samples are sorted by total count and paired in that
    order.  Returns ``(gen_keep, data_trunc)`` where ``gen_keep`` (B, L) marks
    the generated spikes that survive and ``data_trunc`` is the truncated data.
    """
    B = len(gen)
    if len(data) != B:
        raise ValueError("count matching needs equally sized batches")
    go = np.argsort(gen.counts, kind="stable")
    do = np.argsort(data.counts, kind="stable")
    keep = np.zeros(gen.times.shape, dtype=bool)
    d_times = np.full((B, data.times.shape[1]), np.nan)
    d_neur = np.full((B, data.times.shape[1]), -1, dtype=int)
    d_counts = np.zeros(B, dtype=int)
    d_end = np.empty(B)
    d_end[go] = data.end_time[do]
    for gb, db in zip(go, do):
        gk = gen.neurons[gb, :gen.counts[gb]]
        dk = data.neurons[db, :data.counts[db]]
        cols = []
        for k in range(gen.K):
            gi = np.flatnonzero(gk == k)
            di = np.flatnonzero(dk == k)
            m = min(len(gi), len(di))
            keep[gb, gi[:m]] = True
            cols.extend(di[:m])
        cols = np.sort(np.asarray(cols, dtype=int))
        n = len(cols)
        d_counts[gb] = n
        d_times[gb, :n] = data.times[db, cols]
        d_neur[gb, :n] = data.neurons[db, cols]
    return keep, SpikeData(d_times, d_neur, d_counts, d_end, data.K)


def nearest_count_batch(gen, data):
    """For each generated sample, the data sample with the nearest total spike count.

    Ties go to the lowest data index; data samples may be reused.
    """
    dist = np.abs(gen.counts[:, None] - data.counts[None, :])
    return data.subset(np.argmin(dist, axis=1))


# ---------------------------------------------------------------------------
# models


@dataclass
class InputCurrentModel:
    """Single neuron with constant input current c: theta = (c,)."""

    base: NetworkParams
    T: float
    dt: float
    n_max: int = 3
    v0: float = 0.0

    def simulate(self, theta, seeds, grad=False):
        return simulate_batch(self.base, self.T, self.dt, seeds, self.n_max, self.v0, float(theta[0]),
                              "i0" if grad else None)

    def event_cap_hit(self, r):
        return np.zeros(len(r.counts), dtype=bool)


@dataclass
class WeightModel:
    """Feed-forward network whose masked weights are the parameters."""

    base: NetworkParams
    T: float
    dt: float
    event_cap: int = 400

    def params(self, theta):
        return self.base.with_weights(theta)

    def simulate(self, theta, seeds, grad=False):
        return simulate_batch(self.params(theta), self.T, self.dt, seeds, self.event_cap, None, None,
                              "weights" if grad else None)

    def event_cap_hit(self, r):
        return r.counts >= self.event_cap


def _simulate_checked(model, theta, seeds, grad):
    try:
        r = model.simulate(theta, seeds, grad)
    except EventSDEError as exc:
        raise TrainingError(f"simulation failed: {exc}", seed=seeds[0]) from exc
    hit = model.event_cap_hit(r)
    if hit.any():
        b = int(np.flatnonzero(hit)[0])
        raise TrainingError(f"sample {b} exceeded the event cap", seed=seeds[b])
    return r


def data_signatures(data, cfg):
    seg = spike_segments(data.times, data.neurons, data.counts, data.K, data.end_time, cfg.time_scale)
    return signature_batch(seg.incs, cfg.depth)


COUNT_MATCHING = (None, "nearest", "truncate")


def loss_and_gradient(model, theta, data, batch_size, seed, cfg=None, count_matching=None):
    """MMD between a generated batch at ``theta`` and ``data``, and its gradient in ``theta``."""
    cfg = cfg or KernelConfig()
    if cfg.normalization is not None or not cfg.time_augment:
        raise ValueError("training gradients support the plain time-augmented kernel only")
    seeds = sample_seeds(seed, batch_size)
    r = _simulate_checked(model, theta, seeds, grad=True)
    gen = SpikeData.from_batch(r)
    grads_t = r.grads
    if count_matching not in COUNT_MATCHING:
        raise ValueError(f"count_matching must be one of {COUNT_MATCHING}")
    if count_matching == "nearest":
        data = nearest_count_batch(gen, data)
    elif count_matching == "truncate":
        keep, data = match_spike_counts(gen, data)
        times = np.where(keep, gen.times, np.inf)
        order = np.argsort(times, axis=1, kind="stable")
        counts = keep.sum(axis=1)
        times = np.take_along_axis(gen.times, order, 1)
        neurons = np.take_along_axis(gen.neurons, order, 1)
        grads_t = np.take_along_axis(grads_t, order[:, :, None], 1)
        gen = SpikeData(times, neurons, counts, gen.end_time, gen.K)
    seg = spike_segments(gen.times, gen.neurons, gen.counts, gen.K, gen.end_time, cfg.time_scale)
    SX = signature_batch(seg.incs, cfg.depth)
    SY = data_signatures(data, cfg)
    loss = mmd_from_grams(gram(SX, SX), gram(SX, SY), gram(SY, SY))
    g = mmd_signature_grad(SX, SY)
    d_sp, d_end = spike_time_grads(seg, g)
    L = d_sp.shape[1]
    valid = np.arange(L)[None, :] < gen.counts[:, None]
    d_sp = np.where(valid, d_sp, 0.0)
    gt = np.nan_to_num(grads_t[:, :L])
    grad = np.einsum("bl,blp->p", d_sp, gt) + np.einsum("b,bp->p", d_end, r.end_grad)
    return loss, grad, gen


# ---------------------------------------------------------------------------
# runs


@dataclass
class TrainRun:
    name: str
    steps: int
    losses: List[float] = field(default_factory=list)
    test_metrics: List[float] = field(default_factory=list)
    params: List[np.ndarray] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def final_params(self):
        return self.params[-1]

    def summary(self):
        return {
            "name": self.name,
            "steps": self.steps,
            "final_params": [float(x) for x in self.final_params],
            "initial_params": [float(x) for x in self.params[0]],
            "final_loss": self.losses[-1] if self.losses else None,
            "final_test_metric": self.test_metrics[-1] if self.test_metrics else None,
            "seeds": self.seeds,
            "config": self.config,
            **self.extra,
        }

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "test_metric", "snapshot"])
            n = len(self.params)
            for s in range(n):
                loss = self.losses[s - 1] if s >= 1 else ""
                metric = self.test_metrics[s] if s < len(self.test_metrics) else ""
                w.writerow([s, _fmt(loss), _fmt(metric), f"params.csv#{s}"])
        with open(os.path.join(out_dir, "params.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            P = len(self.params[0])
            w.writerow(["step"] + [f"theta_{p}" for p in range(P)])
            for s, th in enumerate(self.params):
                w.writerow([s] + [repr(float(x)) for x in th])
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(_jsonable(self.summary()), fh, indent=2, sort_keys=True)


def _fmt(x):
    if x == "" or x is None:
        return ""
    return repr(float(x))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _train(model, theta0, steps, schedule, data, batch_size, seed, cfg, metric, data_batches=None,
           count_matching=None, rho=0.7, momentum=0.3, project=None):
    theta = np.array(theta0, dtype=np.float64)
    opt = OptimizerState(schedule, rho, momentum)
    run_params = [theta.copy()]
    losses, metrics = [], [metric(theta, 0)]
    for step in range(steps):
        batch = data if data_batches is None else data_batches(step)
        loss, grad, _ = loss_and_gradient(model, theta, batch, batch_size, derive_seed(seed, "generate", step), cfg,
                                          count_matching)
        opt, theta = rmsprop_step(opt, theta, grad)
        if project is not None:
            theta = project(theta)
        losses.append(loss)
        run_params.append(theta.copy())
        metrics.append(metric(theta, step + 1))
    return run_params, losses, metrics


# ---------------------------------------------------------------------------
# experiments


@dataclass
class InputCurrentConfig:
    sample: int = 64
    sigma: float = 0.1
    steps: int = 400
    lr: float = 0.003
    lr_final: float = 0.001
    lr_switch: float = 2 / 3
    seed: int = 0
    c_true: float = 1.5
    c_low: float = 0.5
    c_high: float = 2.5
    c_init: Optional[float] = None
    mu: float = 15.0
    v_reset: float = 1.4
    alpha: float = 0.03
    psi: float = 1.0
    beta: float = 0.2
    dt: float = 0.01
    n_spikes: int = 3
    t_max: float = 5.0
    depth: int = 3
    time_scale: float = 1.0


def input_current_params(cfg):
    return NetworkParams(K=1, w=[[0.0]], mu=(cfg.mu, 0.0), sigma=(cfg.sigma, 0.0), v_reset=cfg.v_reset,
                         alpha=cfg.alpha, psi=cfg.psi, beta=cfg.beta)


def experiment_input_current(cfg=None):
    """Recover the constant input current of a single neuron from spike trains."""
    cfg = cfg or InputCurrentConfig()
    t_start = time.time()
    model = InputCurrentModel(input_current_params(cfg), cfg.t_max, cfg.dt, cfg.n_spikes)
    kcfg = KernelConfig(depth=cfg.depth, time_scale=cfg.time_scale)
    true = np.array([cfg.c_true])
    data = SpikeData.from_batch(model.simulate(true, sample_seeds(cfg.seed, cfg.sample, "data")))
    test = SpikeData.from_batch(model.simulate(true, sample_seeds(cfg.seed, cfg.sample, "test")))
    if cfg.c_init is None:
        rng = np.random.default_rng(derive_seed(cfg.seed, "init"))
        c0 = rng.uniform(cfg.c_low, cfg.c_high)
    else:
        c0 = cfg.c_init
    test_seeds = sample_seeds(cfg.seed, cfg.sample, "test-generate")

    def metric(theta, step):
        gen = SpikeData.from_batch(model.simulate(theta, test_seeds))
        return first_spike_mae(gen, test, cfg.n_spikes)

    schedule = LRSchedule.two_phase(cfg.lr, cfg.lr_final, cfg.steps, cfg.lr_switch)
    params, losses, metrics = _train(model, [c0], cfg.steps, schedule, data, cfg.sample, cfg.seed, kcfg, metric)
    run = TrainRun("input_current", cfg.steps, losses, metrics, params,
                   seeds={"seed": cfg.seed}, config=asdict(cfg))
    run.extra = {"c_true": cfg.c_true, "c_init": float(c0), "c_final": float(params[-1][0]),
                 "abs_error": float(abs(params[-1][0] - cfg.c_true))}
    run.runtime = time.time() - t_start
    return run


@dataclass
class WeightConfig:
    layers: tuple = (2, 4, 2)
    sample: int = 256
    batch: int = 128
    steps: int = 600
    lr: float = 0.003
    lr_final: float = 0.001
    lr_switch: float = 2 / 3
    seed: int = 0
    T: float = 1.0
    dt: float = 0.01
    mu: tuple = (6.0, 5.0)
    sigma: tuple = (0.25, 0.25)
    v_reset: float = 1.2
    alpha: float = 0.03
    psi: float = 1.0
    beta: float = 0.2
    input_current: Union[float, tuple] = 2.0
    depth: int = 3
    time_scale: float = 1.0
    count_matching: Optional[str] = "truncate"
    eval_every: int = 10
    event_cap: int = 400


def sample_feedforward_weights(layers, rng, low=0.5, high=1.5):
    """Entries from U(low, high) scaled by 3 / (size of the source layer)."""
    mask = feedforward_mask(layers)
    w = np.zeros(mask.shape)
    start = 0
    for a, b in zip(layers[:-1], layers[1:]):
        w[start:start + a, start + a:start + a + b] = rng.uniform(low, high, (a, b)) * 3.0 / a
        start += a
    return w, mask


def weight_params(cfg, w, mask):
    K = sum(cfg.layers)
    drift = np.zeros(K)
    # input-layer neurons are driven by a constant current so the network fires at all
    drift[: cfg.layers[0]] = cfg.mu[1] * np.asarray(cfg.input_current, dtype=np.float64)
    return NetworkParams(K=K, w=w, mu=cfg.mu, sigma=cfg.sigma, v_reset=cfg.v_reset, alpha=cfg.alpha,
                         psi=cfg.psi, beta=cfg.beta, input_drift=drift, mask=mask)


def experiment_weights(cfg=None):
    """Recover feed-forward weights from spike trains of every neuron."""
    cfg = cfg or WeightConfig()
    t_start = time.time()
    rng_true = np.random.default_rng(derive_seed(cfg.seed, "true-weights"))
    w_true, mask = sample_feedforward_weights(cfg.layers, rng_true)
    base = weight_params(cfg, w_true, mask)
    model = WeightModel(base, cfg.T, cfg.dt, cfg.event_cap)
    true = base.weights_vector()
    data = SpikeData.from_batch(model.simulate(true, sample_seeds(cfg.seed, cfg.sample, "data")))
    test = SpikeData.from_batch(model.simulate(true, sample_seeds(cfg.seed, cfg.batch, "test")))
    rng_init = np.random.default_rng(derive_seed(cfg.seed, "init"))
    w0, _ = sample_feedforward_weights(cfg.layers, rng_init)
    theta0 = w0[mask]
    kcfg = KernelConfig(depth=cfg.depth, time_scale=cfg.time_scale)
    test_sig = data_signatures(test, kcfg)
    test_seeds = sample_seeds(cfg.seed, cfg.batch, "test-generate")
    per_epoch = max(1, cfg.sample // cfg.batch)
    test_mmd = []

    def data_batches(step):
        epoch, pos = divmod(step, per_epoch)
        perm = np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch)).permutation(cfg.sample)
        return data.subset(perm[pos * cfg.batch:(pos + 1) * cfg.batch])

    def metric(theta, step):
        if step % cfg.eval_every == 0 or step == cfg.steps:
            gen = SpikeData.from_batch(model.simulate(theta, test_seeds))
            SX = data_signatures(gen, kcfg)
            test_mmd.append((step, mmd_from_grams(gram(SX, SX), gram(SX, test_sig), gram(test_sig, test_sig))))
        return float(np.mean(np.abs(theta - true)))

    schedule = LRSchedule.two_phase(cfg.lr, cfg.lr_final, cfg.steps, cfg.lr_switch)
    params, losses, metrics = _train(model, theta0, cfg.steps, schedule, None, cfg.batch, cfg.seed, kcfg, metric,
                                     data_batches=data_batches, count_matching=cfg.count_matching)
    run = TrainRun("weights", cfg.steps, losses, metrics, params, seeds={"seed": cfg.seed}, config=asdict(cfg))
    run.extra = {
        "w_true": true.tolist(),
        "weight_mae_initial": metrics[0],
        "weight_mae_final": metrics[-1],
        "test_mmd": test_mmd,
        "mask_pairs": [list(map(int, p)) for p in base.weight_index()],
    }
    run.runtime = time.time() - t_start
    return run
