"""INI run configuration: parsing, validation and the documented schema.

A configuration file has the sections ``[run]``, ``[prior]``,
``[observations]``, ``[simulation]``, ``[iakde]``, ``[cde]``, ``[bo]``,
``[mcmc]`` and ``[refine]``.  Every key is optional except ``[run] model``
(or ``[run] benchmark``, which supplies a complete built-in configuration
that the remaining keys then override).  Unknown sections and keys are
errors.  Example::

    [run]
    model = ou
    master_seed = 3

    [prior]
    lambda = uniform 0.05 5

    [observations]
    truth = 1
    x0 = 3
    dt = 0.001
    n_steps = 10000
    n_obs = 100
    mask = 2 3.5

Value syntax: lists are whitespace- or comma-separated numbers; intervals
are ``lo hi`` pairs separated by ``;``; booleans are ``true``/``false``.
Prior entries are ``uniform LO HI`` or ``gaussian MEAN SD [LO HI]``, one per
model parameter, keyed by the parameter name (or ``theta0``, ``theta1``, ...).
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from pathlib import Path

from .errors import ConfigError
from .models import Gaussian, Prior, Uniform, get_model
from .pipeline import ObservationSpec, PipelineConfig, benchmark_config

__all__ = ["load_config", "parse_config", "SCHEMA"]


def _floats(text):
    parts = [p for p in re.split(r"[\s,]+", text.strip()) if p]
    if not parts:
        raise ValueError("expected at least one number")
    return tuple(float(p) for p in parts)


def _ints(text):
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise ValueError("expected integers")
    return tuple(int(v) for v in vals)


def _int(text):
    v = float(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _intervals(text):
    out = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        vals = _floats(chunk)
        if len(vals) != 2 or vals[0] > vals[1]:
            raise ValueError(f"interval {chunk.strip()!r} must be 'lo hi' with lo <= hi")
        out.append(vals)
    if not out:
        raise ValueError("expected at least one interval")
    return tuple(out)


def _bandwidth(text):
    t = text.strip().lower()
    if t in ("silverman", "scott"):
        return t
    return float(t)


def _choice(*options):
    def parse(text):
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t
    return parse


def _optional(parse):
    def wrapped(text):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return wrapped


def _str(text):
    return text.strip()


# section -> key -> (target object, target field, parser)
SCHEMA = {
    "run": {
        "model": ("pipeline", "model", _str),
        "benchmark": ("pipeline", "benchmark", _choice("ou", "doublewell")),
        "master_seed": ("pipeline", "master_seed", _int),
        "output_dir": ("pipeline", "output_dir", _str),
        "threads": ("pipeline", "threads", _int),
    },
    "observations": {
        "path": ("observations", "path", _str),
        "truth": ("observations", "truth", _floats),
        "x0": ("observations", "x0", _floats),
        "dt": ("observations", "dt", float),
        "n_steps": ("observations", "n_steps", _int),
        "n_obs": ("observations", "n_obs", _optional(_int)),
        "stride": ("observations", "stride", _optional(_int)),
        "mask": ("observations", "mask_intervals", _optional(_intervals)),
        "seed": ("observations", "seed", _optional(_int)),
    },
    "simulation": {
        "pairs_m": ("pipeline", "pairs_M", _int),
        "inner_dt": ("pipeline", "inner_dt", float),
        "pair_policy": ("pipeline", "pair_policy", _choice("both", "start")),
        "condition_on_mask": ("pipeline", "condition_on_mask", _bool),
    },
    "iakde": {
        "window_epsilon": ("iakde", "window_epsilon", _optional(_floats)),
        "bandwidth_rule": ("iakde", "bandwidth_rule", _bandwidth),
        "min_window_samples": ("iakde", "min_window_samples", _int),
    },
    "cde": {
        "n_components": ("cde", "n_components", _int),
        "hidden_widths": ("cde", "hidden_widths", _ints),
        "max_epochs": ("cde", "max_epochs", _int),
        "learning_rate": ("cde", "learning_rate", float),
        "batch_size": ("cde", "batch_size", _int),
        "early_stop_patience": ("cde", "early_stop_patience", _int),
        "validation_fraction": ("cde", "validation_fraction", float),
    },
    "bo": {
        "n_initial": ("bo", "n_initial", _int),
        "n_max": ("bo", "n_max", _int),
        "stop_epsilon": ("bo", "stop_epsilon", float),
        "acquisition_restarts": ("bo", "acquisition_restarts", _int),
        "search_box": ("bo", "search_box", _optional(_intervals)),
        "initial_design": ("bo", "initial_design", _choice("lhs", "prior")),
        "min_iterations": ("bo", "min_iterations", _int),
        "failure_value": ("bo", "failure_value", float),
        "gp_restarts": ("bo", "gp_restarts", _int),
        "ard": ("bo", "ard", _bool),
    },
    "mcmc": {
        "n_steps": ("mcmc", "n_steps", _int),
        "burn_in": ("mcmc", "burn_in", _int),
        "proposal_scales": ("mcmc", "proposal_scales", _optional(_floats)),
        "thin": ("mcmc", "thin", _int),
        "adapt": ("mcmc", "adapt", _bool),
    },
    "refine": {
        "n_refine": ("pipeline", "n_refine", _int),
        "design": ("pipeline", "design", _choice("lhs", "random")),
        "include_coarse": ("pipeline", "include_coarse", _bool),
        "restrict_to_design_region": ("pipeline", "restrict_to_design_region", _bool),
    },
}

_SECTIONS = tuple(SCHEMA) + ("prior",)


def _line_index(text):
    """``(section, key) -> line number`` and ``section -> line number`` for diagnostics."""
    lines = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault(section, no)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _parse_prior_entry(text):
    parts = text.split()
    kind = parts[0].lower() if parts else ""
    nums = _floats(" ".join(parts[1:])) if len(parts) > 1 else ()
    if kind == "uniform" and len(nums) == 2:
        return Uniform(*nums), (None, None)
    if kind == "gaussian" and len(nums) in (2, 4):
        bounds = (nums[2], nums[3]) if len(nums) == 4 else (None, None)
        return Gaussian(nums[0], nums[1]), bounds
    raise ValueError("expected 'uniform LO HI' or 'gaussian MEAN SD [LO HI]'")


def parse_config(text, source="<config>", seed=None):
    """Build a :class:`PipelineConfig` from INI ``text``.

    ``seed`` overrides ``[run] master_seed``.  Raises :class:`ConfigError`
    with ``source:line`` and the offending ``[section] key`` on any problem.
    """
    lines = _line_index(text)

    def fail(section, key, msg):
        line = lines.get((section, key)) or lines.get(section)
        where = f"{source}:{line}" if line else source
        field = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigError(f"{where}: {field}: {msg}")

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    updates = {t: {} for t in ("pipeline", "observations", "iakde", "cde", "bo", "mcmc")}
    for section in parser.sections():
        name = section.lower()
        if name not in _SECTIONS:
            fail(name, None, f"unknown section (expected one of {', '.join(_SECTIONS)})")
        if name == "prior":
            continue
        for key, value in parser.items(section):
            spec = SCHEMA[name].get(key)
            if spec is None:
                fail(name, key, f"unknown key (expected one of {', '.join(SCHEMA[name])})")
            target, attr, parse = spec
            try:
                updates[target][attr] = parse(value)
            except (TypeError, ValueError) as exc:
                fail(name, key, str(exc))

    run = updates["pipeline"]
    if seed is not None:
        run["master_seed"] = int(seed)
    bench = run.get("benchmark")
    if bench is not None:
        base = benchmark_config(bench)
    elif "model" in run:
        base = None
    else:
        fail("run", "model", "missing required field 'model' (or 'benchmark')")

    model_name = run.get("model", base.model if base else None)
    try:
        model = get_model(model_name)
    except (ConfigError, ValueError, KeyError, ImportError, AttributeError) as exc:
        fail("run", "model", str(exc))

    if parser.has_section("prior"):
        names = list(model.param_names)
        factors, bounds = [None] * model.param_dim, [None] * model.param_dim
        for key, value in parser.items("prior"):
            if key in names:
                i = names.index(key)
            elif re.fullmatch(r"theta\d+", key) and int(key[5:]) < model.param_dim:
                i = int(key[5:])
            else:
                fail("prior", key, f"unknown parameter (model '{model.name}' has {', '.join(names)})")
            try:
                factors[i], bounds[i] = _parse_prior_entry(value)
            except ValueError as exc:
                fail("prior", key, str(exc))
        missing = [n for n, f in zip(names, factors) if f is None]
        if missing:
            fail("prior", None, f"missing prior for parameter(s) {', '.join(missing)}")
        prior = Prior(tuple(factors), tuple(bounds))
    elif base is not None and base.model == model_name:
        prior = base.prior
    else:
        fail("prior", None, "missing section [prior]")

    def build(kind, default):
        try:
            return dataclasses.replace(default, **updates[kind])
        except (TypeError, ValueError) as exc:
            key = next(iter(updates[kind]), None)
            fail(kind, key, str(exc))

    obs_default = base.observations if base else ObservationSpec()
    observations = build("observations", obs_default)
    if observations.path is None and any(
        getattr(observations, f) is None for f in ("truth", "x0", "dt", "n_steps")
    ):
        fail("observations", None, "give either 'path' or all of 'truth', 'x0', 'dt', 'n_steps'")
    if observations.path is not None and not Path(observations.path).exists():
        fail("observations", "path", f"file not found: {observations.path}")
    if observations.truth is not None and len(observations.truth) != model.param_dim:
        fail("observations", "truth", f"expected {model.param_dim} value(s)")
    if observations.x0 is not None and len(observations.x0) != model.state_dim:
        fail("observations", "x0", f"expected {model.state_dim} value(s)")

    if base is None:
        base = PipelineConfig(model=model_name, prior=prior, observations=observations)
    stage = {
        "iakde": build("iakde", base.iakde),
        "cde": build("cde", base.cde),
        "bo": build("bo", base.bo),
        "mcmc": build("mcmc", base.mcmc),
    }
    try:
        cfg = dataclasses.replace(base, prior=prior, observations=observations, **stage, **run)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if cfg.pairs_M < 1 or cfg.inner_dt <= 0 or cfg.threads < 1:
        fail("simulation", None, "pairs_M and threads must be positive and inner_dt > 0")
    if cfg.n_refine < 1:
        fail("refine", "n_refine", "must be positive")
    if cfg.condition_on_mask and cfg.pair_policy != "both":
        fail("simulation", "condition_on_mask", "requires pair_policy = both")
    return cfg


def load_config(path, seed=None):
    """Read and parse an INI configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path), seed=seed)
