"""Command-line front end: ``eventsde {simulate,gradcheck,kernel,train}``.

Exit codes: 0 success, 1 numerical or training failure (or a failed
acceptance check), 2 usage or configuration error.
"""

import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import fields as dc_fields

import numpy as np

from .config import dump_config, load_config, resolve
from .errors import ConfigError, EventSDEError, NonDifferentiableError
from .rng import UniformStream
from .sde_core import sample_driver
from .sensitivity import check_assumptions, finite_difference_oracle, forward_sensitivity
from .signature import KernelConfig, batch_signatures, gram, mmd_permutation_test, spikes_to_path
from .ssnn import (
    NetworkParams,
    build_slif_network,
    feedforward_mask,
    initial_state,
    min_gap,
    read_spike_csv,
    run_network,
    sample_seeds,
    simulate_spike_trains,
    write_spike_csv,
)
from .training import InputCurrentConfig, WeightConfig, experiment_input_current, experiment_weights

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class RunFailure(Exception):
    """A numerical failure with the seed that triggered it."""

    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


def _vector(v, K, name):
    if v is None:
        return None
    v = np.asarray(v, dtype=np.float64)
    if v.size == 1:
        return np.full(K, float(v[0]))
    if v.size != K:
        raise ConfigError(f"[model] {name} needs 1 or K={K} entries, got {v.size}")
    return v


def build_params(m):
    """NetworkParams from a resolved [model] section."""
    K = m["K"]
    mask = m["mask"]
    if m["layers"] is not None:
        K = sum(m["layers"])
        mask = feedforward_mask(m["layers"]) if mask is None else mask
    w = np.zeros((K, K)) if m["w"] is None else m["w"]
    if w.shape != (K, K):
        raise ConfigError(f"[model] w must be {K}x{K}, got {w.shape[0]}x{w.shape[1]}")
    if mask is not None:
        mask = np.asarray(mask) != 0
        if mask.shape != (K, K):
            raise ConfigError(f"[model] mask must be {K}x{K}")
    try:
        return NetworkParams(
            K=K, w=w, mu=m["mu"], sigma=m["sigma"], v_reset=m["v_reset"], alpha=m["alpha"],
            psi=m["psi"] if m["intensity"] else math.inf, beta=m["beta"], lambda_cap=m["lambda_cap"],
            input_drift=_vector(m["input_drift"], K, "input_drift"), threshold=m["threshold"],
            reset_mode=m["reset_mode"], mask=mask,
        )
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from None


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def _prepare(cfg, sections, args, command):
    res = resolve(cfg, sections)
    if args.seed is not None:
        res["run"]["seed"] = args.seed
    out = args.out or res["run"]["out"] or f"eventsde-{command}"
    res["run"]["out"] = out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(res))
    return res, out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    res, out = _prepare(cfg, ["run", "model", "solver"], args, "simulate")
    params = build_params(res["model"])
    s, seed = res["solver"], res["run"]["seed"]
    K = params.K
    v0 = _vector(res["model"]["v0"], K, "v0")
    i0 = _vector(res["model"]["i0"], K, "i0")
    try:
        trains = simulate_spike_trains(params, s["T"], s["dt"], seed, s["batch"], s["n_max"], v0, i0,
                                       s["engine"], s["scheme"])
        first = sample_seeds(seed, 1)[0]
        system, _, _, _, sol = run_network(params, s["T"], s["dt"], first, s["n_max"] or 10_000, v0, i0,
                                           s["scheme"])
        report = check_assumptions(sol, system.fields, system.specs)
    except EventSDEError as exc:
        raise RunFailure(str(exc), seed) from exc
    write_spike_csv(os.path.join(out, "spikes.csv"), trains, s["T"])
    counts = np.array([[len(t) for t in tr] for tr in trains]).reshape(len(trains), K)
    gap = min_gap(trains)
    summary = {
        "seed": seed,
        "n_samples": len(trains),
        "n_neurons": K,
        "T": s["T"],
        "dt": s["dt"],
        "events_per_sample": counts.sum(axis=1),
        "events_per_neuron": counts.sum(axis=0),
        "total_events": int(counts.sum()),
        "min_gap": gap,
        "refractory_bound": params.refractory_bound,
        "gaps_respect_bound": bool(gap >= params.refractory_bound),
        "assumptions": report.to_dict(),
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"{summary['total_events']} events in {len(trains)} samples; min gap {gap:.4g} "
          f"(bound {params.refractory_bound:.4g}); output in {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    res, out = _prepare(cfg, ["run", "model", "solver", "gradcheck"], args, "gradcheck")
    params = build_params(res["model"])
    s, g, seed = res["solver"], res["gradcheck"], res["run"]["seed"]
    K = params.K
    v0 = _vector(res["model"]["v0"], K, "v0")
    i0 = _vector(res["model"]["i0"], K, "i0")
    augment = g["wrt"] == "weights"
    system = build_slif_network(params, augment)
    if g["wrt"] == "v0":
        coords, names = list(range(K)), [f"v0[{k}]" for k in range(K)]
    elif g["wrt"] == "i0":
        coords, names = list(range(K, 2 * K)), [f"i0[{k}]" for k in range(K)]
    else:
        coords = list(range(3 * K, 3 * K + params.n_weights))
        names = [f"w[{a},{b}]" for a, b in params.weight_index()]
    if not coords:
        raise ConfigError("[gradcheck] no parameters to check (empty weight mask)")
    entries, flagged, reports = [], [], []
    for sd in sample_seeds(seed, g["n_seeds"]):
        y0 = initial_state(params, sd, v0, i0, augment)
        driver = sample_driver(2 * K, 0.0, s["T"], s["dt"], sd)
        u = UniformStream(sd, "transitions")
        seeds_mat = np.eye(len(y0))[:, coords]
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sol, st = forward_sensitivity(y0, system.fields, system.specs, driver, g["n_events"], 0.0,
                                              s["dt"], s["T"], s["scheme"], u, seeds=seeds_mat)
            reports.append(check_assumptions(sol, system.fields, system.specs))
            if sol.n_events == 0:
                continue
            fd = finite_difference_oracle(y0, system.fields, system.specs, driver, u, ("taus",), g["h"],
                                          g["n_events"], 0.0, s["dt"], s["T"], s["scheme"], coords)
        except NonDifferentiableError as exc:
            flagged.append({"seed": sd, "reason": str(exc)})
            continue
        except EventSDEError as exc:
            raise RunFailure(str(exc), sd) from exc
        for n in range(sol.n_events):
            for p, name in enumerate(names):
                a, b = float(st.event_time_grads[n, p]), float(fd[n, p])
                err = abs(a - b)
                entries.append({
                    "seed": sd, "event": n, "param": name, "gradient": a, "finite_difference": b,
                    "rel_error": err / abs(b) if b != 0 else (0.0 if err == 0 else math.inf),
                    "pass": bool(err <= g["atol"] + g["rtol"] * abs(b)),
                })
    n_fail = sum(not e["pass"] for e in entries)
    per_param = {}
    for name in names:
        errs = [e["rel_error"] for e in entries if e["param"] == name]
        per_param[name] = {"max_rel_error": max(errs, default=0.0), "n": len(errs),
                           "n_fail": sum(not e["pass"] for e in entries if e["param"] == name)}
    records = [r for rep in reports for r in rep.records]
    assumptions = {
        "passed": all(rep.passed for rep in reports),
        "commutation_ok": all(rep.commutation_ok for rep in reports),
        "orthogonality_ok": all(rep.orthogonality_ok for rep in reports),
        "transversality_ok": all(rep.transversality_ok for rep in reports),
        "max_commutation_residual": max((r.commutation for r in records), default=0.0),
        "max_orthogonality_residual": max((r.orthogonality for r in records), default=0.0),
    }
    frac = n_fail / len(entries) if entries else 0.0
    ok = frac <= g["max_fail_fraction"]
    report = {
        "seed": seed, "wrt": g["wrt"], "rtol": g["rtol"], "atol": g["atol"], "h": g["h"],
        "n_entries": len(entries), "n_fail": n_fail, "fail_fraction": frac, "passed": ok,
        "flagged": flagged, "per_parameter": per_param, "entries": entries, "assumptions": assumptions,
    }
    _write_json(os.path.join(out, "gradcheck.json"), report)
    print(f"{len(entries) - n_fail}/{len(entries)} gradient entries pass at rtol {g['rtol']:g}; "
          f"{len(flagged)} seeds flagged; assumptions {'ok' if assumptions['passed'] else 'VIOLATED'}")
    if not assumptions["commutation_ok"]:
        print("reset map does not commute with the diffusion: pathwise gradients are not exact for this model")
    return EXIT_OK if ok else EXIT_FAIL


def _horizon(trains, meta):
    if "T" in meta:
        return float(meta["T"])
    last = [float(np.max(t)) for tr in trains for t in tr if len(t)]
    return max(last, default=1.0)


def cmd_kernel(cfg, args):
    res, out = _prepare(cfg, ["run", "kernel"], args, "kernel")
    k = res["kernel"]
    paths = list(args.paths or [])
    if not paths:
        paths = [p for p in (k["x"], k["y"]) if p]
    if len(paths) != 2:
        raise ConfigError("kernel needs two spike CSV files (positional arguments or [kernel] x/y)")
    (X, mx), (Y, my) = read_spike_csv(paths[0]), read_spike_csv(paths[1])
    if len(X) < 2 or len(Y) < 2:
        raise ConfigError(f"each path set needs at least 2 samples, got {len(X)} and {len(Y)}")
    K = max(len(X[0]), len(Y[0]))
    X = [tr + [np.zeros(0)] * (K - len(tr)) for tr in X]
    Y = [tr + [np.zeros(0)] * (K - len(tr)) for tr in Y]
    T = max(_horizon(X, mx), _horizon(Y, my))
    try:
        kcfg = KernelConfig(depth=k["depth"], normalization=k["normalization"], R=k["R"],
                            time_augment=k["time_augment"], time_scale=k["time_scale"])
    except ValueError as exc:
        raise ConfigError(f"[kernel] {exc}") from None
    PX = [spikes_to_path(tr, T) for tr in X]
    PY = [spikes_to_path(tr, T) for tr in Y]
    obs, p, null = mmd_permutation_test(PX, PY, kcfg, k["n_perm"], res["run"]["seed"])
    S = batch_signatures(PX + PY, kcfg)
    G = gram(S, S)
    result = {
        "mmd": obs, "p_value": p, "n_perm": k["n_perm"], "n_x": len(X), "n_y": len(Y), "T": T,
        "depth": k["depth"], "gram_min_eigenvalue": float(np.linalg.eigvalsh(G).min()),
        "gram_max_eigenvalue": float(np.linalg.eigvalsh(G).max()),
        "null_mean": float(null.mean()), "null_std": float(null.std()),
    }
    _write_json(os.path.join(out, "kernel.json"), result)
    print(f"MMD {obs:.6g}, permutation p-value {p:.4g}")
    return EXIT_OK


_TRAIN_ONLY = {"input_current": {"c_true", "c_init"},
               "weights": {"layers", "batch", "count_matching", "eval_every"}}


def cmd_train(cfg, args):
    res, out = _prepare(cfg, ["run", "train"], args, "train")
    t = res["train"]
    exp = t["experiment"]
    wrong = [k for k, v in t.items() if v is not None and any(k in keys for e, keys in _TRAIN_ONLY.items() if e != exp)]
    if wrong:
        raise ConfigError(f"[train] keys {wrong} do not apply to experiment {exp!r}")
    cls = InputCurrentConfig if exp == "input_current" else WeightConfig
    names = {f.name for f in dc_fields(cls)}
    kw = {k: v for k, v in t.items() if k in names and v is not None}
    kw["seed"] = res["run"]["seed"]
    if "layers" in kw:
        kw["layers"] = tuple(kw["layers"])
    if kw.get("count_matching") == "off":
        kw["count_matching"] = None
    try:
        ecfg = cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train] {exc}") from None
    # echo the settings actually used
    for k in t:
        if k in names:
            v = getattr(ecfg, k)
            t[k] = "off" if k == "count_matching" and v is None else v
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(res))
    try:
        run = experiment_input_current(ecfg) if exp == "input_current" else experiment_weights(ecfg)
    except EventSDEError as exc:
        raise RunFailure(str(exc), getattr(exc, "seed", None) or kw["seed"]) from exc
    if exp == "input_current":
        accepted = run.extra["abs_error"] <= t["c_tolerance"]
        msg = f"c: {run.extra['c_init']:.4f} -> {run.extra['c_final']:.4f} (true {ecfg.c_true})"
    else:
        m0, m1 = run.extra["weight_mae_initial"], run.extra["weight_mae_final"]
        accepted = m0 > 0 and (1.0 - m1 / m0) >= t["mae_reduction"]
        msg = f"weight MAE: {m0:.4f} -> {m1:.4f}"
    run.extra["accepted"] = bool(accepted)
    run.save(out)
    print(f"{msg}; {'accepted' if accepted else 'NOT accepted'}; output in {out}")
    return EXIT_OK if accepted else EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "gradcheck": cmd_gradcheck, "kernel": cmd_kernel, "train": cmd_train}


def build_parser():
    parser = argparse.ArgumentParser(prog="eventsde", description="Event SDE simulation, gradients and training")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="top-level seed (overrides [run] seed)")
        if name == "kernel":
            p.add_argument("paths", nargs="*", help="two spike CSV files")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config) if args.config else {}
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"eventsde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        where = f" (seed {exc.seed})" if exc.seed is not None else ""
        print(f"eventsde: failed{where}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except EventSDEError as exc:
        print(f"eventsde: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
