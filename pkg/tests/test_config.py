import numpy as np
import pytest

from eventsde.config import SCHEMA, dump_config, parse_config, resolve
from eventsde.errors import ConfigError


def test_parse_typed_values():
    cfg = parse_config("""
[run]
seed = 7
[model]
K = 2
mu = 15, 5
w = 0 1.5; 0 0   # inline comment
intensity = no
input_drift = 30 0
[solver]
n_max = none
scheme = Heun
""")
    assert cfg["run"]["seed"] == 7
    assert cfg["model"]["mu"] == (15.0, 5.0)
    np.testing.assert_array_equal(cfg["model"]["w"], [[0.0, 1.5], [0.0, 0.0]])
    assert cfg["model"]["intensity"] is False
    assert cfg["model"]["input_drift"] == [30.0, 0.0]
    assert cfg["solver"]["n_max"] is None and cfg["solver"]["scheme"] == "heun"


@pytest.mark.parametrize("text,line,fragment", [
    ("[run]\nseed = 1\n\n[model]\nK = 2\nbogus = 3\n", 6, "unknown key 'bogus'"),
    ("[run]\nseed = 1\n[modle]\nK = 2\n", 3, "unknown section"),
    ("[solver]\ndt = -0.1\n", 2, "bad value for 'dt'"),
    ("[model]\nmu = 1 2 3\n", 2, "expected two numbers"),
    ("[solver]\nengine = gpu\n", 2, "expected one of"),
    ("[run]\nseed = -1\n", 2, "unsigned"),
    ("[model]\nw = 1 2; 3\n", 2, "equal length"),
    ("seed = 1\n", 1, "outside"),
    ("[run]\nseed = 1\nseed = 2\n", 3, "duplicate key"),
])
def test_errors_point_at_line(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="f.ini")
    msg = str(info.value)
    assert msg.startswith(f"f.ini:{line}:") and fragment in msg


def test_resolve_fills_defaults_and_rejects_unused_sections():
    res = resolve(parse_config("[solver]\ndt = 0.001\n"), ["run", "solver"])
    assert res["solver"]["dt"] == 0.001
    assert res["solver"]["T"] == SCHEMA["solver"]["T"][1]
    assert res["run"]["seed"] == 0
    with pytest.raises(ConfigError):
        resolve(parse_config("[kernel]\ndepth = 2\n"), ["run", "solver"])


def test_dump_round_trip():
    text = """
[run]
seed = 3
out = somewhere
[model]
K = 2
w = 0 0.123456789012345; 0 0
mu = 15 5
lambda_cap = 148.4131591025766
threshold = 1
[solver]
n_max = 4
"""
    res = resolve(parse_config(text), ["run", "model", "solver"])
    back = parse_config(dump_config(res))
    assert set(back) == set(res)
    for section in res:
        for k, v in res[section].items():
            if isinstance(v, np.ndarray):
                np.testing.assert_array_equal(back[section][k], v)
            else:
                assert back[section][k] == v, (section, k)
    assert dump_config(resolve(back, list(res))) == dump_config(res)
