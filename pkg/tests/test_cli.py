import json

import numpy as np
import pytest

from eventsde.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from eventsde.ssnn import read_spike_csv, write_spike_csv

SIM = """
[model]
K = 2
w = 0 1.2; 0 0
mu = 15 5
sigma = 0.25 0.25
input_drift = 30 0
[solver]
T = 1.0
dt = 0.01
batch = 4
"""


def run(tmp_path, command, text, *extra, name="cfg.ini"):
    cfg = tmp_path / name
    cfg.write_text(text)
    out = tmp_path / f"out-{command}"
    return main([command, "--config", str(cfg), "--out", str(out), *extra]), out


def test_simulate_writes_outputs_and_is_reproducible(tmp_path, capsys):
    code, out = run(tmp_path, "simulate", SIM)
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["n_samples"] == 4 and summary["gaps_respect_bound"]
    assert summary["assumptions"]["passed"]
    trains, meta = read_spike_csv(out / "spikes.csv")
    assert len(trains) == 4 and meta["T"] == 1.0
    assert summary["total_events"] == sum(len(t) for tr in trains for t in tr)
    first = (out / "spikes.csv").read_bytes()
    assert main(["simulate", "--config", str(tmp_path / "cfg.ini"), "--out", str(out)]) == EXIT_OK
    assert (out / "spikes.csv").read_bytes() == first
    assert (out / "config.ini").read_text().startswith("[run]")
    # a different seed gives different spikes
    main(["simulate", "--config", str(tmp_path / "cfg.ini"), "--out", str(tmp_path / "o2"), "--seed", "9"])
    assert (tmp_path / "o2" / "spikes.csv").read_bytes() != first


def test_usage_errors_exit_2(tmp_path, capsys):
    code, _ = run(tmp_path, "simulate", "[model]\nK = 2\nbogus = 1\n")
    assert code == EXIT_USAGE
    assert "cfg.ini:3:" in capsys.readouterr().err
    code, _ = run(tmp_path, "simulate", "[kernel]\ndepth = 2\n")
    assert code == EXIT_USAGE
    code, _ = run(tmp_path, "simulate", "[model]\nK = 2\nw = 0 1; 0 0; 1 1\n")
    assert code == EXIT_USAGE
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == EXIT_USAGE
    assert main(["simulate", "--seed", "-3", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 2


def test_gradcheck_noise_free_passes(tmp_path):
    text = """
[model]
K = 2
w = 0 1.2; 0 0
mu = 15 5
input_drift = 30 0
[solver]
dt = 0.001
[gradcheck]
wrt = weights
n_events = 2
n_seeds = 3
h = 1e-6
rtol = 1e-3
"""
    code, out = run(tmp_path, "gradcheck", text)
    rep = json.loads((out / "gradcheck.json").read_text())
    assert code == EXIT_OK and rep["passed"] and rep["n_entries"] > 0
    assert rep["assumptions"]["commutation_ok"] and rep["assumptions"]["passed"]
    assert set(rep["per_parameter"]) == {"w[0,1]"}


def test_gradcheck_reports_broken_reset(tmp_path, capsys):
    text = """
[model]
K = 1
mu = 15 5
sigma = 0.3 0.3
input_drift = 30
reset_mode = zero
[solver]
dt = 0.001
[gradcheck]
wrt = i0
n_events = 2
n_seeds = 2
max_fail_fraction = 1.0
"""
    code, out = run(tmp_path, "gradcheck", text)
    rep = json.loads((out / "gradcheck.json").read_text())
    assert code == EXIT_OK
    assert not rep["assumptions"]["commutation_ok"] and rep["assumptions"]["max_commutation_residual"] > 0
    assert "does not commute" in capsys.readouterr().out


def test_gradcheck_failures_exit_1(tmp_path):
    # a tolerance no gradient can meet
    text = """
[model]
K = 1
mu = 15 5
sigma = 0.3 0.3
input_drift = 30
[solver]
dt = 0.01
[gradcheck]
n_events = 2
n_seeds = 3
rtol = 1e-14
atol = 0
"""
    code, out = run(tmp_path, "gradcheck", text)
    rep = json.loads((out / "gradcheck.json").read_text())
    assert code == EXIT_FAIL and rep["n_fail"] > 0


def _write_trains(path, rate, seed, n=12, K=2, T=1.0):
    rng = np.random.default_rng(seed)
    trains = [[np.sort(rng.uniform(0, T, rng.poisson(rate * T))) for _ in range(K)] for _ in range(n)]
    write_spike_csv(path, trains, T)


def test_kernel_command(tmp_path):
    _write_trains(tmp_path / "x.csv", 1.0, 0)
    _write_trains(tmp_path / "y.csv", 6.0, 1)
    code, out = run(tmp_path, "kernel", "[kernel]\nn_perm = 99\n", str(tmp_path / "x.csv"), str(tmp_path / "y.csv"))
    assert code == EXIT_OK
    res = json.loads((out / "kernel.json").read_text())
    assert res["p_value"] <= 0.05 and res["mmd"] > 0
    assert res["gram_min_eigenvalue"] > -1e-8 * res["gram_max_eigenvalue"]
    first = (out / "kernel.json").read_bytes()
    main(["kernel", "--config", str(tmp_path / "cfg.ini"), "--out", str(out), str(tmp_path / "x.csv"),
          str(tmp_path / "y.csv")])
    assert (out / "kernel.json").read_bytes() == first


def test_kernel_bad_inputs(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    _write_trains(tmp_path / "x.csv", 1.0, 0)
    code, _ = run(tmp_path, "kernel", "", str(tmp_path / "empty.csv"), str(tmp_path / "x.csv"))
    assert code == EXIT_USAGE
    code, _ = run(tmp_path, "kernel", "", str(tmp_path / "x.csv"))
    assert code == EXIT_USAGE
    code, _ = run(tmp_path, "kernel", "[kernel]\nnormalization = robust\n", str(tmp_path / "x.csv"),
                  str(tmp_path / "x.csv"))
    assert code == EXIT_USAGE


def test_train_small_input_current(tmp_path):
    text = "[train]\nexperiment = input_current\nsteps = 3\nsample = 8\nc_tolerance = 10\n"
    code, out = run(tmp_path, "train", text)
    assert code == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["accepted"] is True
    assert (out / "train.csv").exists() and (out / "params.csv").exists()
    cfg = (out / "config.ini").read_text()
    assert "steps = 3" in cfg and "lr = 0.003" in cfg
    first = (out / "summary.json").read_bytes()
    main(["train", "--config", str(tmp_path / "cfg.ini"), "--out", str(out)])
    assert (out / "summary.json").read_bytes() == first


def test_train_threshold_not_met_exits_1(tmp_path):
    text = "[train]\nexperiment = input_current\nsteps = 1\nsample = 4\nc_init = 2.4\nc_tolerance = 1e-9\n"
    code, _ = run(tmp_path, "train", text)
    assert code == EXIT_FAIL


def test_train_rejects_keys_of_other_experiment(tmp_path):
    code, _ = run(tmp_path, "train", "[train]\nexperiment = input_current\nlayers = 2 2\n")
    assert code == EXIT_USAGE
