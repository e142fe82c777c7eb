"""Scenario configuration files.

A configuration is an INI file with four sections::

    [design]        fixed design parameters (mu_P, delta_ER, alloc, ...)
    [policy]        method, n1, m, zeta
    [grid]          comma-separated lists; their cartesian product is run
    [run]           kind, reps, seed

Any key of ``[grid]`` overrides the same key of ``[design]``/``[policy]``/
``[run]`` for each grid point. An empty list in ``[grid]`` yields no
scenarios. ``zeta = auto`` requests the inflation factor of the Xing-Ganju
procedure, taken from the range of sigma where it is constant unless
``zeta_sigma`` fixes the reference standard deviation.
"""

from __future__ import annotations

import configparser
import itertools
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .design import AllocationRatio, DesignSpec
from .errors import DomainError
from .estimators import Method
from .reestimate import ReestimationPolicy, inflation_factor, reference_zeta
from .simulate import DEFAULT_POWER_REPS, DEFAULT_T1E_REPS, ScenarioConfig, null_boundary


class ConfigError(ValueError):
    """Malformed configuration; the message names the file, line and key."""


KINDS = ("power", "t1e_ER", "t1e_EP", "t1e_RP")

_DESIGN_KEYS = {
    "mu_P": float, "mu_E": float, "mu_R": float, "delta_ER": float, "delta_EP": float,
    "delta_RP": float, "sigma": float, "alpha": float, "target_power": float,
    "alloc": AllocationRatio.parse,
}


def _method(text: str) -> Method:
    try:
        return Method(text.strip().upper())
    except ValueError:
        raise ValueError(f"unknown method {text!r}; expected one of {[m.value for m in Method]}") from None


def _zeta(text: str):
    text = text.strip().lower()
    return "auto" if text == "auto" else float(text)


def _m(text: str):
    text = text.strip().lower()
    return None if text in ("", "auto") else int(text)


def _kind(text: str) -> str:
    text = text.strip()
    if text not in KINDS:
        raise ValueError(f"kind must be one of {', '.join(KINDS)}")
    return text


_POLICY_KEYS = {"method": _method, "n1": int, "m": _m, "zeta": _zeta, "zeta_sigma": float}
_RUN_KEYS = {"kind": _kind, "reps": int, "seed": int}
SECTIONS = {"design": _DESIGN_KEYS, "policy": _POLICY_KEYS, "run": _RUN_KEYS}
_GRIDDABLE = {**_DESIGN_KEYS, **_POLICY_KEYS, "kind": _kind}
# order in which grid axes are nested (first varies slowest)
_GRID_ORDER = ("kind", "mu_P", "alloc", "delta_ER", "method", "n1", "zeta")

_DEFAULTS = {"method": Method.XG, "n1": 30, "m": None, "zeta": 1.0, "zeta_sigma": None, "kind": "power"}


@dataclass
class RunConfig:
    """Parsed configuration: base values plus grid axes."""

    base: Dict[str, object] = field(default_factory=dict)
    grid: Dict[str, list] = field(default_factory=dict)
    reps: Optional[int] = None
    seed: int = 1
    source: str = "<preset>"

    def points(self) -> List[Dict[str, object]]:
        """Every grid point as a full set of values."""
        axes = [k for k in _GRID_ORDER if k in self.grid] + [k for k in self.grid if k not in _GRID_ORDER]
        out = []
        for combo in itertools.product(*(self.grid[k] for k in axes)):
            point = {**_DEFAULTS, **self.base}
            point.update(zip(axes, combo))
            out.append(point)
        return out


def _line_index(text: str) -> Dict[Tuple[str, str], int]:
    """Map (section, key) to the line where the key is set."""
    where = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        head = re.match(r"\s*\[([^\]]+)\]", line)
        if head:
            section = head.group(1).strip()
            where.setdefault((section, ""), lineno)
            continue
        kv = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
        if kv and section is not None:
            where[(section, kv.group(1))] = lineno
    return where


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse configuration text; errors read ``source:line: [section] key: problem``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"{source}:{lineno}: {msg}" if lineno else f"{source}: {msg}") from None
    lines = _line_index(text)
    cfg = RunConfig(source=source)

    def fail(section, key, problem):
        lineno = lines.get((section, key), "?")
        raise ConfigError(f"{source}:{lineno}: [{section}] {key}: {problem}")

    for section in parser.sections():
        if section not in SECTIONS and section != "grid":
            raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if section == "grid":
                conv = _GRIDDABLE.get(key)
                if conv is None:
                    fail(section, key, f"cannot vary this key; choose from {', '.join(sorted(_GRIDDABLE))}")
                items = [v.strip() for v in raw.split(",") if v.strip()]
                try:
                    cfg.grid[key] = [conv(v) for v in items]
                except (ValueError, DomainError) as exc:
                    fail(section, key, str(exc))
                continue
            conv = SECTIONS[section].get(key)
            if conv is None:
                fail(section, key, f"unknown key; expected one of {', '.join(SECTIONS[section])}")
            try:
                value = conv(raw)
            except (ValueError, DomainError) as exc:
                fail(section, key, str(exc))
            if key == "reps":
                if value < 1:
                    fail(section, key, "must be positive")
                cfg.reps = value
            elif key == "seed":
                if not 0 <= value < 2**64:
                    fail(section, key, "must be an unsigned 64-bit integer")
                cfg.seed = value
            else:
                cfg.base[key] = value
    if "mu_P" not in cfg.base and "mu_P" not in cfg.grid:
        raise ConfigError(f"{source}: [design] mu_P: required key is missing")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def point_spec(point: Dict[str, object]) -> DesignSpec:
    return DesignSpec(**{k: point[k] for k in _DESIGN_KEYS if k in point})


def point_policy(point: Dict[str, object], spec: DesignSpec, zeta: float = 1.0) -> ReestimationPolicy:
    method = point["method"]
    m = point.get("m")
    if method is Method.XG and m is None:
        m = spec.alloc.block_size
    return ReestimationPolicy(method, int(point["n1"]), m if method is Method.XG else None, zeta)


def resolve_zeta(point: Dict[str, object], spec: DesignSpec) -> float:
    """Numeric inflation factor for a grid point (solving for it when ``zeta = auto``)."""
    zeta = point.get("zeta", 1.0)
    if zeta != "auto":
        return float(zeta)
    policy = point_policy(point, spec)
    if policy.method is not Method.XG:
        raise DomainError("zeta = auto is only available for the XG method")
    if point.get("zeta_sigma") is not None:
        return inflation_factor(spec, policy, sigma=point["zeta_sigma"])
    return reference_zeta(spec, policy)[0]


def build_scenarios(cfg: RunConfig, reps: Optional[int] = None, seed: Optional[int] = None) -> List[ScenarioConfig]:
    """Expand the grid into simulation scenarios, resolving ``zeta = auto``."""
    out = []
    seen = set()
    for point in cfg.points():
        kind = point["kind"]
        spec = point_spec(point)
        target = kind[4:] if kind.startswith("t1e_") else None
        truth = spec.means if target is None else null_boundary(spec, target)
        n_reps = reps if reps is not None else cfg.reps
        if n_reps is None:
            n_reps = DEFAULT_T1E_REPS if target else DEFAULT_POWER_REPS
        policy = point_policy(point, spec, resolve_zeta(point, spec))
        sc = ScenarioConfig(spec, policy, truth, n_reps, cfg.seed if seed is None else seed, target)
        if sc.scenario_id in seen:
            raise ConfigError(f"{cfg.source}: grid produces duplicate scenario {sc.scenario_id}")
        seen.add(sc.scenario_id)
        out.append(sc)
    return out
