"""Option schema and config-file resolution for the command-line tool.

Options resolve in priority order: command-line flag, then the config file's
[<command>] section, then [common] (seed and jobs only), then the
RESID_RL_SEED environment variable (seed only), then the built-in default.
Unknown keys anywhere in the config file are rejected rather than ignored.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass

from .errors import ConfigError

_REQUIRED = object()


@dataclass(frozen=True)
class Opt:
    """One resolvable option: flag name, type tag, default, bounds."""

    name: str                   # flag spelling, e.g. "n-trajectories"
    kind: str                   # int | float | str | bool | ints | path
    default: object = _REQUIRED
    help: str = ""
    choices: tuple | None = None
    lo: float | None = None     # numeric lower bound (inclusive)
    hi: float | None = None     # numeric upper bound
    hi_open: bool = False       # upper bound exclusive when True

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")

    def required(self) -> bool:
        return self.default is _REQUIRED


def _parse_value(opt: Opt, raw: str):
    try:
        if opt.kind == "int":
            return int(raw)
        if opt.kind == "float":
            return float(raw)
        if opt.kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if opt.kind == "ints":
            return tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
        return raw
    except ValueError as exc:
        raise ConfigError(f"option {opt.name}: cannot parse {raw!r} as {opt.kind}") from exc


def _check_bounds(opt: Opt, value):
    if value is None:
        return value
    if opt.choices is not None and value not in opt.choices:
        raise ConfigError(
            f"option {opt.name}: {value!r} not one of {', '.join(map(str, opt.choices))}")
    vals = value if opt.kind == "ints" else (value,)
    if opt.kind in ("int", "float", "ints"):
        for v in vals:
            if opt.lo is not None and v < opt.lo:
                raise ConfigError(f"option {opt.name}: {v} below minimum {opt.lo}")
            if opt.hi is not None and (v >= opt.hi if opt.hi_open else v > opt.hi):
                cmp = "must be <" if opt.hi_open else "must be <="
                raise ConfigError(f"option {opt.name}: {v} out of range ({cmp} {opt.hi})")
    # empty int lists are legal (e.g. no baseline counts, no hidden layers);
    # commands that need entries validate downstream
    return value


def load_config_file(path: str, known_commands) -> dict:
    """Parse the INI config; returns {section: {key: raw string}}."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    sections = {}
    for section in parser.sections():
        if section != "common" and section not in known_commands:
            raise ConfigError(f"config file {path}: unknown section [{section}]")
        sections[section] = dict(parser.items(section))
    return sections


_COMMON_KEYS = ("seed", "jobs")


def resolve_options(command: str, opts, cli_values: dict,
                    file_sections: dict | None) -> dict:
    """Merge flag, file, environment, and default values; validate everything."""
    by_key = {o.name: o for o in opts}
    file_vals = {}
    if file_sections:
        section = file_sections.get(command, {})
        for key, raw in section.items():
            if key not in by_key:
                raise ConfigError(f"config section [{command}]: unknown key {key!r}")
            file_vals[key] = _parse_value(by_key[key], raw)
        common = file_sections.get("common", {})
        for key, raw in common.items():
            if key not in _COMMON_KEYS:
                raise ConfigError(f"config section [common]: unknown key {key!r} "
                                  f"(only {', '.join(_COMMON_KEYS)})")
            if key in by_key and key not in file_vals:
                file_vals[key] = _parse_value(by_key[key], raw)

    resolved = {}
    for opt in opts:
        value = cli_values.get(opt.dest)
        if opt.kind == "bool" and value is False:
            value = None        # store_true flags cannot express "explicitly off"
        if value is None:
            value = file_vals.get(opt.name)
        if value is None and opt.name == "seed":
            env = os.environ.get("RESID_RL_SEED")
            if env is not None:
                value = _parse_value(opt, env)
        if value is None:
            if opt.required():
                raise ConfigError(f"option {opt.name} is required "
                                  f"(flag --{opt.name} or config key)")
            value = opt.default
        if isinstance(value, str) and opt.kind != "str" and opt.kind != "path":
            value = _parse_value(opt, value)
        resolved[opt.dest] = _check_bounds(opt, value)
    return resolved
