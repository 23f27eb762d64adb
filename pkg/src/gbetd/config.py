"""Experiment configuration files.

Configs are INI files read with :mod:`configparser`::

    [experiment]
    environment = toy            ; toy | two_state | file:<path.mdp> | mountain_car
    steps = 800000
    seeds = 0 1 2
    checkpoint_every = 2000
    workers = 1

    [scheme:bounded]
    scheme = scaling             ; constant | scaling | retrace | truncated_retrace | composite
    C = 50
    beta = 1

    [scheme:mixed]
    scheme = composite
    blocks = bounded td0         ; child scheme sections, one per block
    partition = 0 0 1 1 ...      ; block index of every state

Any other section (``[trace-stats]``, ``[toy-lstd-sweep]`` ...) holds
recipe parameters and is passed through as strings.
"""
import configparser
from dataclasses import dataclass, field
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .schemes import (CompositeScheme, constant_lambda, retrace_scheme, scaling_scheme,
                      truncated_retrace_scheme)

ENVIRONMENTS = ("toy", "two_state", "mountain_car")
# keys that do not change results
NON_SEMANTIC = {("experiment", "workers"), ("experiment", "out")}


@dataclass
class ExperimentConfig:
    environment: str = "toy"
    steps: int = 800_000
    seeds: list = field(default_factory=lambda: [0])
    checkpoint_every: int = 2000
    workers: int = 1
    out: str = ""
    schemes: dict = field(default_factory=dict)
    scheme_specs: dict = field(default_factory=dict)
    recipes: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def recipe(self, name):
        return self.recipes.get(name, {})

    def semantic_dict(self):
        """Parsed, canonical form of every field that can change results."""
        return {
            "environment": self.environment,
            "steps": self.steps,
            "seeds": list(self.seeds),
            "checkpoint_every": self.checkpoint_every,
            "schemes": {k: self.scheme_specs[k] for k in sorted(self.scheme_specs)},
            "recipes": {k: dict(sorted(v.items())) for k, v in sorted(self.recipes.items())},
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    def config_hash(self):
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed_offset(self, k):
        out = ExperimentConfig(**{**self.__dict__})
        out.seeds = [s + k for s in self.seeds]
        return out


def parse_floats(text):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"expected numbers, got {text!r}") from exc


def parse_ints(text):
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"expected integers, got {text!r}") from exc


def _num(section, key, default=None):
    if key not in section:
        if default is None:
            raise ConfigError(f"[{section.name}] needs '{key}'")
        return default
    try:
        return float(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key} is not a number") from exc


def _scheme_spec(sec):
    kind = sec.get("scheme", "").strip()
    spec = {"scheme": kind}
    if kind == "constant":
        spec["lambda"] = _num(sec, "lambda")
    elif kind == "scaling":
        spec["C"] = _num(sec, "C")
        spec["beta"] = _num(sec, "beta", 1.0)
    elif kind == "retrace":
        spec["beta"] = _num(sec, "beta", 1.0)
    elif kind == "truncated_retrace":
        spec["K"] = _num(sec, "K")
        spec["C"] = _num(sec, "C")
        spec["beta"] = _num(sec, "beta", 1.0)
    elif kind == "composite":
        spec["blocks"] = sec.get("blocks", "").split()
        spec["partition"] = parse_ints(sec.get("partition", ""))
        if not spec["blocks"]:
            raise ConfigError(f"[{sec.name}] composite scheme needs 'blocks'")
    else:
        raise ConfigError(f"[{sec.name}] unknown scheme {kind!r}")
    return spec


def build_scheme(spec, specs=None):
    """LambdaScheme (or CompositeScheme) from a parsed scheme block."""
    kind = spec["scheme"]
    if kind == "constant":
        return constant_lambda(spec["lambda"])
    if kind == "scaling":
        return scaling_scheme(spec["C"], spec["beta"])
    if kind == "retrace":
        return retrace_scheme(spec["beta"])
    if kind == "truncated_retrace":
        return truncated_retrace_scheme(spec["K"], spec["C"], spec["beta"])
    children = []
    for name in spec["blocks"]:
        if specs is None or name not in specs:
            raise ConfigError(f"composite scheme refers to unknown block scheme {name!r}")
        if specs[name]["scheme"] == "composite":
            raise ConfigError("composite schemes cannot be nested")
        children.append(build_scheme(specs[name]))
    return CompositeScheme(children, np.array(spec["partition"], dtype=np.int64))


def parse_config(source):
    """Parse a config file path or INI text into :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    text = source
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and "[" not in source):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        text = path.read_text()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        ex = cp["experiment"]
        cfg.environment = ex.get("environment", cfg.environment).strip()
        try:
            cfg.steps = int(float(ex.get("steps", cfg.steps)))
            cfg.checkpoint_every = int(ex.get("checkpoint_every", cfg.checkpoint_every))
            cfg.workers = int(ex.get("workers", cfg.workers))
        except ValueError as exc:
            raise ConfigError(f"[experiment] {exc}") from exc
        if "seeds" in ex:
            cfg.seeds = parse_ints(ex["seeds"])
        cfg.out = ex.get("out", "")
    if not cfg.seeds:
        raise ConfigError("seeds list is empty")
    if cfg.steps < 1:
        raise ConfigError("steps must be positive")
    if cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every must be positive")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.environment not in ENVIRONMENTS and not cfg.environment.startswith("file:"):
        raise ConfigError(f"unknown environment {cfg.environment!r}")
    for name in cp.sections():
        if name.startswith("scheme:"):
            cfg.scheme_specs[name.split(":", 1)[1].strip()] = _scheme_spec(cp[name])
        elif name == "diagnostics":
            cfg.diagnostics = dict(cp[name])
        elif name != "experiment":
            cfg.recipes[name] = dict(cp[name])
    for name, spec in cfg.scheme_specs.items():
        cfg.schemes[name] = build_scheme(spec, cfg.scheme_specs)
    return cfg


def load_environment(cfg):
    """``(mdp, features)`` for tabular environments."""
    from .environments import build_toy, build_two_state
    from .mdp import FeatureMap, load_mdp
    env = cfg.environment
    if env == "toy":
        return build_toy()
    if env == "two_state":
        return build_two_state(), FeatureMap(np.array([[3.0, 1.0], [1.0, 1.0]]))
    if env.startswith("file:"):
        mdp, feats = load_mdp(env[5:])
        if feats is None:
            raise ConfigError("MDP file has no feature block")
        return mdp, feats
    raise ConfigError(f"environment {env!r} is not tabular")
