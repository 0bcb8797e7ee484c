"""Structured-text configuration with per-subcommand schemas.

Config files are plain ``key = value`` lines; ``#`` starts a comment.
Every key is validated against the schema of the target subcommand
(type plus domain), unknown keys are rejected, and absent keys fall
back to the documented defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import MalformedFileError, SchemaError, UnknownKeyError

DEFAULT_DELTA_GRID = tuple(float(d) for d in np.geomspace(1e-2, 1e-6, 9))


@dataclass(frozen=True)
class Key:
    """One schema entry: parser plus optional domain validator."""

    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], str | None] = lambda v: None


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    return int(text)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _float_or_path(text: str):
    try:
        return float(text)
    except ValueError:
        return text


def _positive(v) -> str | None:
    return None if isinstance(v, str) or v > 0 else "must be > 0"


def _open_unit(v) -> str | None:
    return None if 0.0 < v < 1.0 else "must lie in (0, 1)"


def _half_open_s(v) -> str | None:
    return None if 0.0 < v <= 0.5 else "must lie in (0, 1/2]"


def _tau(v) -> str | None:
    return None if v > 1.0 else "must be > 1"


def _decreasing(v) -> str | None:
    if len(v) == 0 or not all(b < a for a, b in zip(v, v[1:])):
        return "must be a non-empty strictly decreasing list"
    return None


def _rho_rule(v) -> str | None:
    return None if v in ("discrepancy", "fixed") else "must be 'discrepancy' or 'fixed'"


PROBLEM_KEYS: dict[str, Key] = {
    "r_inner": Key(_float, 0.5, _positive),
    "r_outer": Key(_float, 1.0, _positive),
    "h": Key(_float, 0.1, _positive),
    "alpha": Key(_float_or_path, 1.0, _positive),
    "k": Key(_float_or_path, 1.0, _positive),
    "f": Key(_float_or_path, 0.0),
    "u_a": Key(_float_or_path, 0.0),
    "kappa": Key(_float, 0.9, _open_unit),
    "s": Key(_float, 0.5, _half_open_s),
    "eps": Key(_float, 0.01, _positive),
    "tau_d": Key(_float, 1.5, _tau),
    "m0": Key(_float, 10.0, _positive),
}

RATES_KEYS: dict[str, Key] = {
    **PROBLEM_KEYS,
    "refine_level": Key(_int, 1, lambda v: None if v >= 1 else "must be >= 1"),
    "delta_grid": Key(_float_list, DEFAULT_DELTA_GRID, _decreasing),
    "seeds_per_delta": Key(_int, 5, _positive),
    "base_seed": Key(_int, 0),
    "flux_seed": Key(_int, 42),
    "rho_rule": Key(str, "discrepancy", _rho_rule),
    "fixed_rho_schedule": Key(_float_list, ()),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "forward": PROBLEM_KEYS,
    "invert": PROBLEM_KEYS,
    "vsc-check": PROBLEM_KEYS,
    "stability-probe": PROBLEM_KEYS,
    "rates": RATES_KEYS,
}


def parse_config(path: str | None, schema: dict[str, Key]) -> dict[str, Any]:
    """Parse and validate one config file against a schema.

    A missing path or empty file yields all defaults.  Raises
    SchemaError (bad value), UnknownKeyError, or MalformedFileError.
    """
    values: dict[str, Any] = {name: key.default for name, key in schema.items()}
    if path is None:
        return values
    if not os.path.exists(path):
        raise MalformedFileError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()

    for ln, line in enumerate(raw, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise MalformedFileError(f"expected 'key = value', got {line!r}", ln)
        name, _, text = stripped.partition("=")
        name, text = name.strip(), text.strip()
        if name not in schema:
            raise UnknownKeyError(name)
        key = schema[name]
        try:
            value = key.parse(text)
        except ValueError:
            raise SchemaError(name, f"cannot parse {text!r} as {key.parse.__name__.lstrip('_')}") from None
        problem = key.check(value)
        if problem is not None:
            raise SchemaError(name, problem)
        values[name] = value
    return values


def resolve_field(value, n_expected: int, key: str) -> np.ndarray:
    """Turn a config constant or one-column file into an array of length n."""
    if isinstance(value, str):
        try:
            arr = np.loadtxt(value, dtype=float, ndmin=1)
        except OSError as exc:
            raise MalformedFileError(f"cannot read field file for {key}: {exc}") from exc
        except ValueError as exc:
            raise MalformedFileError(f"bad numeric data in field file for {key}: {exc}") from exc
        if arr.shape != (n_expected,):
            raise SchemaError(key, f"field file has {arr.shape[0]} values, expected {n_expected}")
        return arr
    return np.full(n_expected, float(value))
