"""Flat INI run configurations with typed keys and strict validation.

Every section has a fixed key set; unknown sections or keys are errors that
point at the offending line.  ``resolve`` fills defaults so the complete
configuration can be written back next to a run's outputs.
"""

import configparser
import math
import re

import numpy as np

from .errors import ConfigError

_NONE = ("", "none", "null")


def _opt(parse):
    def inner(text):
        return None if text.strip().lower() in _NONE else parse(text)

    inner.__name__ = f"optional {parse.__name__}"
    return inner


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    parts = [p for p in re.split(r"[,\s]+", text.strip()) if p]
    return [float(p) for p in parts]


def _ints(text):
    return [int(p) for p in re.split(r"[,\s]+", text.strip()) if p]


def _pair(text):
    v = _floats(text)
    if len(v) != 2:
        raise ValueError(f"expected two numbers, got {len(v)}")
    return tuple(v)


def _matrix(text):
    """Rows separated by ';', entries by commas or whitespace."""
    rows = [_floats(r) for r in text.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows must be non-empty and of equal length")
    return np.array(rows)


def _choice(*options):
    def inner(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t

    inner.__name__ = "choice"
    return inner


def _positive(parse):
    def inner(text):
        v = parse(text)
        if not v > 0:
            raise ValueError("must be positive")
        return v

    inner.__name__ = f"positive {parse.__name__}"
    return inner


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "seed": (_seed, 0),
        "out": (_opt(str), None),
    },
    "model": {
        "K": (_positive(int), 1),
        "w": (_opt(_matrix), None),
        "mask": (_opt(_matrix), None),
        "layers": (_opt(_ints), None),
        "mu": (_pair, (15.0, 0.0)),
        "sigma": (_pair, (0.0, 0.0)),
        "v_reset": (float, 1.4),
        "alpha": (float, 0.03),
        "psi": (float, 1.0),
        "beta": (float, 0.2),
        "lambda_cap": (_opt(float), None),
        "intensity": (_bool, True),
        "input_drift": (_opt(_floats), None),
        "threshold": (_opt(float), None),
        "reset_mode": (_choice("shift", "zero"), "shift"),
        "v0": (_opt(_floats), None),
        "i0": (_opt(_floats), None),
    },
    "solver": {
        "T": (_positive(float), 1.0),
        "dt": (_positive(float), 0.01),
        "batch": (_positive(int), 10),
        "n_max": (_opt(int), None),
        "engine": (_choice("batch", "generic"), "batch"),
        "scheme": (_choice("euler", "heun"), "euler"),
    },
    "gradcheck": {
        "wrt": (_choice("i0", "v0", "weights"), "i0"),
        "n_events": (_positive(int), 3),
        "n_seeds": (_positive(int), 10),
        "h": (_positive(float), 1e-6),
        "rtol": (_positive(float), 1e-3),
        "atol": (float, 1e-8),
        "max_fail_fraction": (float, 0.0),
    },
    "kernel": {
        "x": (_opt(str), None),
        "y": (_opt(str), None),
        "depth": (_positive(int), 3),
        "normalization": (_choice("none", "robust"), "none"),
        "R": (_opt(float), None),
        "time_augment": (_bool, True),
        "time_scale": (_positive(float), 1.0),
        "n_perm": (_positive(int), 199),
    },
    "train": {
        # experiment settings default to none: the chosen experiment's own defaults apply
        "experiment": (_choice("input_current", "weights"), "input_current"),
        "steps": (_opt(int), None),
        "sample": (_opt(_positive(int)), None),
        "batch": (_opt(_positive(int)), None),
        "sigma": (_opt(float), None),
        "lr": (_opt(float), None),
        "lr_final": (_opt(float), None),
        "lr_switch": (_opt(float), None),
        "dt": (_opt(_positive(float)), None),
        "depth": (_opt(_positive(int)), None),
        "time_scale": (_opt(_positive(float)), None),
        "c_true": (_opt(float), None),
        "c_init": (_opt(float), None),
        "layers": (_opt(_ints), None),
        "count_matching": (_opt(_choice("off", "nearest", "truncate")), None),
        "eval_every": (_opt(_positive(int)), None),
        "c_tolerance": (_positive(float), 0.15),
        "mae_reduction": (float, 0.5),
    },
}


def _key_lines(text):
    """Map (section, key) -> line number of its definition."""
    lines = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = n
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = n
    return lines


def parse_config(text, source="<config>"):
    """Parse and type-check a configuration string; returns ``{section: {key: value}}``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: key outside of any [section]") from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
    except configparser.ParsingError as exc:
        ln, line = exc.errors[0]
        raise ConfigError(f"{source}:{ln}: cannot parse {line!r}") from None
    where = _key_lines(text)
    out = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{where.get((section, None), '?')}: unknown section [{section}]")
        vals = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                known = ", ".join(SCHEMA[section])
                raise ConfigError(f"{source}:{where.get((section, key), '?')}: unknown key {key!r} in [{section}] "
                                  f"(known: {known})")
            parse = SCHEMA[section][key][0]
            try:
                vals[key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}:{where.get((section, key), '?')}: bad value for {key!r}: {exc}") from None
        out[section] = vals
    return out


def load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def resolve(cfg, sections):
    """Fill defaults for ``sections``; other sections present in ``cfg`` are rejected."""
    extra = set(cfg) - set(sections)
    if extra:
        raise ConfigError(f"sections {sorted(extra)} are not used by this command")
    return {s: {k: cfg.get(s, {}).get(k, d) for k, (_, d) in SCHEMA[s].items()} for s in sections}


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    if isinstance(v, np.ndarray):
        return "; ".join(" ".join(_format(float(x)) for x in row) for row in v)
    if isinstance(v, (list, tuple)):
        return " ".join(_format(x) for x in v)
    return str(v)


def dump_config(resolved):
    """Render a resolved configuration; ``parse_config`` of the result gives it back."""
    lines = []
    for section, vals in resolved.items():
        lines.append(f"[{section}]")
        for k, v in vals.items():
            lines.append(f"{k} = {_format(v)}")
        lines.append("")
    return "\n".join(lines)
