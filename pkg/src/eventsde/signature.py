"""Truncated signatures of piecewise-linear paths and Marcus signature kernels.

Spike trains are turned into counting paths, each jump is traversed linearly
(Marcus interpolation), a time coordinate running on the original clock is
appended, and the truncated signature is built segment by segment with
Chen's identity.  Tensor level n is stored flattened as an array of length
d**n (a leading batch axis is used by the batched routines); level 0 is the
implicit scalar 1.

The gradient of the kernel MMD with respect to spike times uses the fact
that spike times only enter through the lengths of the flat time segments
between jumps: with prefix products P and suffix products R,
d S / d(length of segment s) = P_{s-1} (x) e_time (x) R_s.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import CapacityError, ConfigError
from .rng import derive_seed

# Default bound on the number of float64 entries in one batched tensor level.
MAX_LEVEL_ENTRIES = 50_000_000


# ---------------------------------------------------------------------------
# paths


@dataclass
class CadlagPath:
    """Nodes of a piecewise-constant/linear cadlag path.

    At a jump both the left limit and the post-jump value are stored at the
    same time, left limit first; ``jumps[n]`` is True on the post-jump node.
    """

    times: np.ndarray
    values: np.ndarray
    jumps: np.ndarray

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class PLPath:
    """Continuous piecewise-linear path.  ``clock`` is the original time of each node."""

    times: np.ndarray
    values: np.ndarray
    clock: Optional[np.ndarray] = None

    @property
    def dim(self):
        return self.values.shape[1]


def _events_of(trains, T):
    """Sorted unique spike times with their jump vectors (simultaneous spikes merge)."""
    K = len(trains)
    pts = []
    for k, ts in enumerate(trains):
        ts = np.asarray(ts, dtype=np.float64)
        if ts.size and (ts.min() < 0 or ts.max() > T):
            raise ValueError(f"spike times of neuron {k} fall outside [0, {T}]")
        pts.extend((float(t), k) for t in ts)
    pts.sort()
    times, jumps = [], []
    for t, k in pts:
        if times and times[-1] == t:
            jumps[-1][k] += 1.0
        else:
            times.append(t)
            j = np.zeros(K)
            j[k] = 1.0
            jumps.append(j)
    return np.array(times), np.array(jumps).reshape(-1, K)


def spikes_to_path(trains, T):
    """Counting path of per-neuron spike times on ``[0, T]``."""
    K = len(trains)
    ev_t, ev_j = _events_of(trains, T)
    times = [0.0]
    values = [np.zeros(K)]
    flags = [False]
    cur = np.zeros(K)
    for t, j in zip(ev_t, ev_j):
        times.append(t)
        values.append(cur.copy())
        flags.append(False)
        cur = cur + j
        times.append(t)
        values.append(cur.copy())
        flags.append(True)
    times.append(float(T))
    values.append(cur.copy())
    flags.append(False)
    return CadlagPath(np.array(times), np.array(values), np.array(flags))


def write_path_csv(path_file, path):
    """Write a cadlag path as rows ``time,v_1..v_d,is_jump``."""
    d = path.dim
    with open(path_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"v_{i + 1}" for i in range(d)] + ["is_jump"])
        for t, v, j in zip(path.times, path.values, path.jumps):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in v] + [int(bool(j))])


def read_path_csv(path_file):
    """Inverse of ``write_path_csv``; raises ``ConfigError`` on malformed rows."""
    with open(path_file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path_file}: empty path file")
    head = [c.strip() for c in rows[0]]
    d = len(head) - 2
    if d < 1 or head[0] != "time" or head[-1] != "is_jump" or head[1:-1] != [f"v_{i + 1}" for i in range(d)]:
        raise ConfigError(f"{path_file}:1: expected header time,v_1..v_d,is_jump")
    times, values, jumps = [], [], []
    for ln, row in enumerate(rows[1:], 2):
        if not row:
            continue
        try:
            if len(row) != d + 2:
                raise ValueError
            times.append(float(row[0]))
            values.append([float(x) for x in row[1:-1]])
            jumps.append(bool(int(row[-1])))
        except ValueError:
            raise ConfigError(f"{path_file}:{ln}: cannot parse row {','.join(row)!r}") from None
    t = np.array(times)
    if len(t) < 2 or np.any(np.diff(t) < 0):
        raise ConfigError(f"{path_file}: need at least two nodes with non-decreasing times")
    return CadlagPath(t, np.array(values).reshape(-1, d), np.array(jumps))


def marcus_interpolate(path, budget=None):
    """Replace every jump by a straight segment run over fictitious time.

    The fictitious budget (default one tenth of the horizon) is shared among
    jumps in proportion to jump size and the parameter is rescaled back onto
    the original horizon.  The original clock is kept in ``clock``.
    """
    if isinstance(path, PLPath):
        return path
    t, x, jf = path.times, path.values, path.jumps
    span = float(t[-1] - t[0])
    if not jf.any():
        return PLPath(t.copy(), x.copy(), t.copy())
    sizes = np.linalg.norm(x[1:] - x[:-1], axis=1)
    is_jump = jf[1:]
    r = span / 10.0 if budget is None else float(budget)
    if r <= 0:
        r = 1.0
    total = sizes[is_jump].sum()
    dur = np.where(is_jump, r * sizes / total if total > 0 else 0.0, np.diff(t))
    u = np.concatenate([[0.0], np.cumsum(dur)])
    if u[-1] > 0 and span > 0:
        u = t[0] + u * (span / u[-1])
    return PLPath(u, x.copy(), t.copy())


def time_augment(path, T=None, scale=1.0):
    """Append the original clock (times ``scale``) as the last coordinate."""
    if isinstance(path, CadlagPath):
        path = marcus_interpolate(path)
    clock = path.clock if path.clock is not None else path.times
    aug = np.column_stack([path.values, scale * np.asarray(clock, dtype=np.float64)])
    return PLPath(path.times.copy(), aug, clock.copy())


# ---------------------------------------------------------------------------
# tensor algebra


@dataclass
class TruncatedSignature:
    depth: int
    dim: int
    levels: List[np.ndarray] = field(default_factory=list)  # level n has shape (d,)*n

    def flat(self):
        return [lv.reshape(-1) for lv in self.levels]

    def norm(self):
        return math.sqrt(1.0 + sum(float(np.sum(lv * lv)) for lv in self.levels))

    def inner(self, other):
        return 1.0 + sum(float(np.sum(a * b)) for a, b in zip(self.levels, other.levels))

    @classmethod
    def from_flat(cls, flat, dim):
        return cls(len(flat), dim, [f.reshape((dim,) * (n + 1)) for n, f in enumerate(flat)])


def _check_capacity(batch, dim, depth, limit=MAX_LEVEL_ENTRIES):
    need = batch * dim ** depth
    if need > limit:
        raise CapacityError(
            f"depth-{depth} signatures of {dim}-dimensional paths need {need:.3g} entries per level "
            f"(limit {limit:.3g}); lower the depth or split the batch")


def _outer(a, b):
    """Batched tensor product of flattened levels: (B, p), (B, q) -> (B, p*q)."""
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def mult_exp(S, a):
    """In place ``S <- S (x) exp(a)`` for batched flattened levels ``S`` and increments ``a`` (B, d)."""
    M = len(S)
    for n in range(M, 0, -1):
        res = a / n
        for i in range(1, n):
            res = _outer(S[i - 1] + res, a) / (n - i)
        S[n - 1] = S[n - 1] + res
    return S


def tensor_exp(a, depth):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    S = [np.zeros((a.shape[0], a.shape[1] ** n)) for n in range(1, depth + 1)]
    return mult_exp(S, a)


def tensor_product(S, T):
    """Truncated product of two batched flattened graded tensors (level 0 = 1)."""
    M = len(S)
    out = []
    for n in range(1, M + 1):
        acc = S[n - 1] + T[n - 1]
        for k in range(1, n):
            acc = acc + _outer(S[k - 1], T[n - k - 1])
        out.append(acc)
    return out


def signature_batch(incs, depth, limit=MAX_LEVEL_ENTRIES):
    """Signatures of a batch of piecewise-linear paths given by increments (B, S, d)."""
    incs = np.asarray(incs, dtype=np.float64)
    if depth < 1:
        raise ValueError("depth must be at least 1")
    B, n_seg, d = incs.shape
    _check_capacity(B, d, depth, limit)
    S = [np.zeros((B, d ** n)) for n in range(1, depth + 1)]
    for s in range(n_seg):
        mult_exp(S, incs[:, s])
    return S


def _as_values(path):
    if isinstance(path, (PLPath, CadlagPath)):
        return np.asarray(path.values, dtype=np.float64)
    v = np.asarray(path, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


def truncated_signature(path, depth):
    """Depth-``depth`` signature of a piecewise-linear path (PLPath or (n, d) node array)."""
    x = _as_values(path)
    incs = np.diff(x, axis=0)[None]
    flat = signature_batch(incs, depth)
    return TruncatedSignature.from_flat([f[0] for f in flat], x.shape[1])


def chen_product(s1, s2):
    """Truncated tensor product of two signatures (signature of the concatenation)."""
    flat = tensor_product([f[None] for f in s1.flat()], [f[None] for f in s2.flat()])
    return TruncatedSignature.from_flat([f[0] for f in flat], s1.dim)


def _normalize_scale(sq_norms, R, tol=1e-12):
    """lambda in (0, 1] with 1 + sum_n lambda^(2n) |a_n|^2 = R^2 (1 if already inside)."""
    total = 1.0 + float(np.sum(sq_norms))
    if total <= R * R:
        return 1.0
    powers = 2 * np.arange(1, len(sq_norms) + 1)

    def f(lam):
        return 1.0 + float(np.sum(lam ** powers * sq_norms)) - R * R

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= tol:
            return mid
        if fm > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-17:
            break
    return lo


def robust_normalize(sig, R):
    """Rescale level n by lambda**n so the signature norm is at most ``R``."""
    if not R > 1:
        raise ValueError("R must exceed 1")
    sq = np.array([float(np.sum(lv * lv)) for lv in sig.levels])
    lam = _normalize_scale(sq, R)
    if lam == 1.0:
        return sig
    return TruncatedSignature(sig.depth, sig.dim, [lam ** (n + 1) * lv for n, lv in enumerate(sig.levels)])


def _normalize_batch(S, R):
    sq = np.stack([np.sum(s * s, axis=1) for s in S], axis=1)
    lam = np.array([_normalize_scale(row, R) for row in sq])
    return [s * (lam ** (n + 1))[:, None] for n, s in enumerate(S)]


# ---------------------------------------------------------------------------
# kernels


@dataclass
class KernelConfig:
    depth: int = 3
    normalization: Optional[str] = None  # None or "robust"
    R: Optional[float] = None
    time_augment: bool = True
    time_scale: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.normalization not in (None, "none", "robust"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.normalization == "none":
            self.normalization = None
        if self.normalization == "robust" and not (self.R is not None and self.R > 1):
            raise ValueError("robust normalization needs R > 1")


def kernel_path(x, cfg):
    """Path actually fed to the signature: Marcus interpolation, then optional time coordinate."""
    p = marcus_interpolate(x) if isinstance(x, CadlagPath) else x
    if cfg.time_augment:
        p = time_augment(p, scale=cfg.time_scale)
    return p


def path_signature(x, cfg):
    sig = truncated_signature(kernel_path(x, cfg), cfg.depth)
    if cfg.normalization == "robust":
        sig = robust_normalize(sig, cfg.R)
    return sig


def signature_kernel(x, y, cfg=None):
    cfg = cfg or KernelConfig()
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    return path_signature(x, cfg).inner(path_signature(y, cfg))


def gram(SX, SY):
    """Kernel matrix between two batches of flattened signatures."""
    G = np.ones((SX[0].shape[0], SY[0].shape[0]))
    for a, b in zip(SX, SY):
        G += a @ b.T
    return G


def batch_signatures(paths, cfg):
    """Flattened signatures of a list of cadlag or piecewise-linear paths."""
    kp = [kernel_path(p, cfg) for p in paths]
    d = kp[0].values.shape[1]
    n_seg = max(len(p.values) - 1 for p in kp)
    incs = np.zeros((len(kp), max(n_seg, 1), d))
    for b, p in enumerate(kp):
        inc = np.diff(p.values, axis=0)
        incs[b, : len(inc)] = inc
    S = signature_batch(incs, cfg.depth)
    if cfg.normalization == "robust":
        S = _normalize_batch(S, cfg.R)
    return S


def mmd_from_grams(Kxx, Kxy, Kyy):
    m, n = Kxx.shape[0], Kyy.shape[0]
    if m < 2 or n < 2:
        raise ValueError("both batches need at least two paths")
    # centering on a common constant cancels exactly when all paths agree
    c = Kxy.flat[0]
    sxx = ((Kxx - c).sum() - np.trace(Kxx - c)) / (m * (m - 1))
    syy = ((Kyy - c).sum() - np.trace(Kyy - c)) / (n * (n - 1))
    return float(sxx - 2.0 * (Kxy - c).mean() + syy)


def mmd_unbiased(X, Y, cfg=None):
    """Unbiased MMD^2 estimate between two batches of paths."""
    cfg = cfg or KernelConfig()
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("both batches need at least two paths")
    SX = batch_signatures(X, cfg)
    SY = batch_signatures(Y, cfg)
    return mmd_from_grams(gram(SX, SX), gram(SX, SY), gram(SY, SY))


def mmd_permutation_test(X, Y, cfg=None, n_perm=199, seed=0):
    """Permutation p-value of the unbiased MMD; returns ``(mmd, p_value, null_stats)``."""
    cfg = cfg or KernelConfig()
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("both batches need at least two paths")
    S = batch_signatures(list(X) + list(Y), cfg)
    Kall = gram(S, S)
    m = len(X)
    N = Kall.shape[0]

    def stat(idx):
        a, b = idx[:m], idx[m:]
        return mmd_from_grams(Kall[np.ix_(a, a)], Kall[np.ix_(a, b)], Kall[np.ix_(b, b)])

    obs = stat(np.arange(N))
    rng = np.random.default_rng(derive_seed(seed, "permutation"))
    null = np.array([stat(rng.permutation(N)) for _ in range(n_perm)])
    p = (1 + np.sum(null >= obs)) / (n_perm + 1)
    return obs, float(p), null


# ---------------------------------------------------------------------------
# spike-train batches and gradients with respect to spike times


@dataclass
class SpikeSegments:
    """Increments of time-augmented Marcus spike paths, padded across the batch.

    Segments alternate: time, jump, time, ..., jump, time.  ``node_of[b, e]``
    maps spike e of sample b (in the caller's order) to its jump node q, whose
    flanking time segments are 2q and 2q + 2.
    """

    incs: np.ndarray  # (B, S, K + 1)
    n_nodes: np.ndarray  # (B,)
    node_of: np.ndarray  # (B, L) jump-node index per spike, -1 padding
    end_time: np.ndarray  # (B,)
    time_scale: float


def spike_segments(times, neurons, counts, K, end_time, time_scale=1.0):
    """Build ``SpikeSegments`` from padded spike records (B, L)."""
    times = np.asarray(times, dtype=np.float64)
    neurons = np.asarray(neurons)
    B = len(counts)
    end_time = np.broadcast_to(np.asarray(end_time, dtype=np.float64), (B,)).copy()
    L = times.shape[1] if times.ndim == 2 else 0
    node_of = np.full((B, max(L, 1)), -1, dtype=int)
    per = []
    for b in range(B):
        n = int(counts[b])
        order = np.lexsort((neurons[b, :n], times[b, :n]))
        uniq, jumps = [], []
        for e in order:
            t = times[b, e]
            if uniq and uniq[-1] == t:
                jumps[-1][neurons[b, e]] += 1.0
            else:
                uniq.append(t)
                j = np.zeros(K)
                j[neurons[b, e]] = 1.0
                jumps.append(j)
            node_of[b, e] = len(uniq) - 1
        per.append((np.array(uniq), jumps))
    n_nodes = np.array([len(u) for u, _ in per], dtype=int)
    n_seg = 2 * int(n_nodes.max(initial=0)) + 1
    incs = np.zeros((B, n_seg, K + 1))
    for b, (u, jumps) in enumerate(per):
        prev = 0.0
        for q, (t, j) in enumerate(zip(u, jumps)):
            incs[b, 2 * q, K] = time_scale * (t - prev)
            incs[b, 2 * q + 1, :K] = j
            prev = t
        incs[b, 2 * len(u), K] = time_scale * (end_time[b] - prev)
    return SpikeSegments(incs, n_nodes, node_of, end_time, time_scale)


def trains_to_records(trains_batch):
    """Per-sample per-neuron trains -> padded (times, neurons, counts)."""
    B = len(trains_batch)
    flat = []
    for tr in trains_batch:
        pts = [(float(t), k) for k, ts in enumerate(tr) for t in ts]
        pts.sort()
        flat.append(pts)
    L = max(1, max((len(p) for p in flat), default=0))
    times = np.full((B, L), np.nan)
    neurons = np.full((B, L), -1, dtype=int)
    counts = np.zeros(B, dtype=int)
    for b, pts in enumerate(flat):
        counts[b] = len(pts)
        for e, (t, k) in enumerate(pts):
            times[b, e] = t
            neurons[b, e] = k
    return times, neurons, counts


def _contract_right(g, a):
    """``g <- g contracted on the right by exp(a)``, batched; level 0 of the result is returned too.

    For a graded linear functional g (levels 1..M, flattened), the result r
    satisfies <r, X> = <g, X (x) exp(a)> for every graded tensor X.
    """
    B, d = a.shape
    M = len(g)
    # powers a^{(x)k}/k! for k = 1..M
    pw = [a]
    for k in range(2, M + 1):
        pw.append(_outer(pw[-1], a) / k)
    r0 = np.zeros(B)
    out = [np.zeros_like(x) for x in g]
    for n in range(1, M + 1):
        gn = g[n - 1]
        r0 += np.einsum("bi,bi->b", gn, pw[n - 1])
        out[n - 1] += gn
        for m in range(1, n):
            k = n - m
            gm = gn.reshape(B, d ** m, d ** k)
            out[m - 1] += np.einsum("bij,bj->bi", gm, pw[k - 1])
    return r0, out


def segment_length_grads(incs, g, time_index):
    """d <g, S> / d(length of each segment along coordinate ``time_index``).

    ``incs`` (B, S, d) are segment increments and ``g`` the batched graded
    functional (levels 1..M, flattened).  Only the component of each segment
    along the time axis is differentiated; returns (B, S).
    """
    B, n_seg, d = incs.shape
    M = len(g)
    prefix = []
    S = [np.zeros((B, d ** n)) for n in range(1, M + 1)]
    for s in range(n_seg):
        prefix.append([x.copy() for x in S])  # product of segments < s
        mult_exp(S, incs[:, s])
    out = np.zeros((B, n_seg))
    r = [x.copy() for x in g]
    for s in range(n_seg - 1, -1, -1):
        _, r = _contract_right(r, incs[:, s])
        # r now represents g contracted by R_s = exp(inc_s) ... exp(inc_last)
        # select last index = time: level m of sel is r_{m+1}[..., t]
        P = prefix[s]
        val = r[0][:, time_index].copy()  # level-0 part of P is 1
        for m in range(1, M):
            sel = r[m].reshape(B, d ** m, d)[:, :, time_index]
            val += np.einsum("bi,bi->b", sel, P[m - 1])
        out[:, s] = val
    return out


def spike_time_grads(seg, g):
    """Gradients of <g, S(path_b)> with respect to each spike time and the end time.

    Returns ``(d_spikes (B, L), d_end (B,))`` in the caller's spike order.
    """
    K = seg.incs.shape[2] - 1
    G = segment_length_grads(seg.incs, g, K) * seg.time_scale
    B, L = seg.node_of.shape
    d_sp = np.zeros((B, L))
    d_end = np.zeros(B)
    for b in range(B):
        q = seg.node_of[b]
        ok = q >= 0
        d_sp[b, ok] = G[b, 2 * q[ok]] - G[b, 2 * q[ok] + 2]
        d_end[b] = G[b, 2 * seg.n_nodes[b]]
    return d_sp, d_end


def mmd_signature_grad(SX, SY):
    """d MMD / d S(x_j) for generated signatures SX against fixed data SY (flattened, batched)."""
    n, m = SX[0].shape[0], SY[0].shape[0]
    out = []
    for a, b in zip(SX, SY):
        tot = a.sum(axis=0, keepdims=True)
        out.append(2.0 / (n * (n - 1)) * (tot - a) - 2.0 / (n * m) * b.sum(axis=0, keepdims=True))
    return out
