"""INI configuration: circuit presets, cell, electrode and experiment settings.

Circuit keys follow the usual symbols (t0, gm, r0, rout, cfi, ion, icm,
vdd, fclk, ip, in, cl, vth_buff, cal_p, cal_n, v_rail).  Extra supply
presets live in ``[circuit.<label>]`` sections holding only the keys that
differ from ``[circuit]``.
"""
from __future__ import annotations

import configparser
import io
from importlib import resources
from pathlib import Path

from .electrochem import ElectrodeGeometry, RandlesCell
from .fidigota import CircuitParams

CIRCUIT_KEYS = {
    "vdd": "Vdd", "fclk": "fclk", "t0": "T0", "gm": "gm", "r0": "r0", "cfi": "Cfi",
    "icm": "Icm", "ion": "Ion", "ip": "ip", "in": "in_", "rout": "rout", "cl": "CL",
    "vth_buff": "Vth_buff", "cal_p": "cal_p", "cal_n": "cal_n", "v_rail": "v_rail",
}
INT_KEYS = {"cal_p", "cal_n"}
CELL_KEYS = {"rp": "Rp", "cp": "Cp", "rs": "Rs"}
ELECTRODE_KEYS = {"a": "a", "n": "n", "d": "D"}


class ConfigError(ValueError):
    """Bad or missing configuration; the message names the key."""


def preset_names():
    return sorted(p.name[:-4] for p in resources.files("dbpot.presets").iterdir() if p.name.endswith(".ini"))


def _new_parser():
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    return cp


def load_config(source) -> configparser.ConfigParser:
    """Read a config file, or a bundled preset when given a bare preset name."""
    cp = _new_parser()
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif str(source) in preset_names():
        text = resources.files("dbpot.presets").joinpath(f"{source}.ini").read_text()
    else:
        raise ConfigError(f"config file not found: {source}")
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    if not cp.has_section("circuit"):
        raise ConfigError(f"{source}: missing [circuit] section")
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides):
    """Apply ``section.key=value`` overrides; bare keys go to the section that has them."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        if "." in key:
            section, opt = key.rsplit(".", 1)
        else:
            opt = key
            hits = [s for s in ("circuit", "cell", "electrode", "experiment") if cp.has_option(s, opt)]
            if not hits:
                raise ConfigError(f"unknown key {key!r}; use section.key")
            section = hits[0]
        if section == "circuit" or section.startswith("circuit."):
            if opt not in CIRCUIT_KEYS:
                raise ConfigError(f"unknown circuit key {opt!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, opt, value)
    return cp


def snapshot(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _num(section, key, text):
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {text!r} is not a number") from None


def supply_labels(cp):
    """Labels of all supply presets: ``base`` plus every [circuit.<label>]."""
    return ["base"] + [s.split(".", 1)[1] for s in cp.sections() if s.startswith("circuit.")]


def circuit_params(cp: configparser.ConfigParser, label: str | None = None) -> CircuitParams:
    """CircuitParams from [circuit], overlaid with [circuit.<label>] if given."""
    sections = ["circuit"]
    if label not in (None, "", "base"):
        sec = f"circuit.{label}"
        if not cp.has_section(sec):
            raise ConfigError(f"unknown supply preset {label!r} (no [{sec}] section)")
        sections.append(sec)
    kw = {}
    for sec in sections:
        for key, text in cp.items(sec):
            if key not in CIRCUIT_KEYS:
                raise ConfigError(f"[{sec}] unknown key {key!r}")
            if key in INT_KEYS:
                try:
                    kw[CIRCUIT_KEYS[key]] = int(text)
                except ValueError:
                    raise ConfigError(f"[{sec}] {key} = {text!r} is not an integer") from None
            else:
                kw[CIRCUIT_KEYS[key]] = _num(sec, key, text)
    params = CircuitParams(**kw)
    problems = params.validate()
    if problems:
        raise ConfigError(f"[{sections[-1]}] " + "; ".join(problems))
    return params


def _typed_section(cp, section, keys, cls):
    kw = {}
    if cp.has_section(section):
        for key, text in cp.items(section):
            if key not in keys:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            val = _num(section, key, text)
            kw[keys[key]] = int(val) if key == "n" else val
    try:
        return cls(**kw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def randles_cell(cp) -> RandlesCell:
    return _typed_section(cp, "cell", CELL_KEYS, RandlesCell)


def electrode(cp) -> ElectrodeGeometry:
    return _typed_section(cp, "electrode", ELECTRODE_KEYS, ElectrodeGeometry)


class Experiment:
    """Typed access to the [experiment] section."""

    def __init__(self, cp):
        self.cp = cp
        if not cp.has_section("experiment"):
            cp.add_section("experiment")
        self.sec = cp["experiment"]

    def _get(self, key, default):
        if key in self.sec:
            return self.sec[key]
        if default is _REQUIRED:
            raise ConfigError(f"[experiment] missing key {key!r}")
        return default

    def str(self, key, default=None):
        v = self._get(key, default)
        return v if v is None else str(v)

    def float(self, key, default=None):
        v = self._get(key, default)
        return v if v is None or isinstance(v, float) else _num("experiment", key, v)

    def int(self, key, default=None):
        v = self._get(key, default)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"[experiment] {key} = {v!r} is not an integer") from None

    def bool(self, key, default=False):
        v = self._get(key, default)
        if isinstance(v, bool):
            return v
        if str(v).lower() in ("1", "true", "yes", "on"):
            return True
        if str(v).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[experiment] {key} = {v!r} is not a boolean")

    def floats(self, key, default=None):
        v = self._get(key, default)
        if v is None or isinstance(v, (list, tuple)):
            return v
        parts = [s for s in v.replace(",", " ").split()]
        return [_num("experiment", key, s) for s in parts]

    def strs(self, key, default=None):
        v = self._get(key, default)
        if v is None or isinstance(v, (list, tuple)):
            return v
        return [s for s in v.replace(",", " ").split()]

    def ranges(self, key="ranges"):
        """``label:i_max`` pairs, e.g. ``vdd0p3:3e-9 vdd0p4:60e-9``."""
        out = []
        for item in self.strs(key, _REQUIRED):
            if ":" not in item:
                raise ConfigError(f"[experiment] {key}: {item!r} is not label:i_max")
            label, imax = item.split(":", 1)
            out.append((label, _num("experiment", key, imax)))
        if not out:
            raise ConfigError(f"[experiment] {key} is empty")
        return out


_REQUIRED = object()
REQUIRED = _REQUIRED
