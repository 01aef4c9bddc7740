"""``section.key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Every key must be known;
a typo is an error rather than a silently ignored setting.
"""

from __future__ import annotations

from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from typing import Callable

from .dram import Geometry, TimingParams
from .engine import EccConfig, MitigationConfig, SimConfig
from .faults import get_profile


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text.replace("_", ""), 0)


def _fraction(text: str) -> Fraction:
    return Fraction(text.replace("_", ""))


def _optional_int(text: str):
    return None if text.lower() in ("", "none") else _int(text)


def _ms_to_ns(text: str) -> int:
    ns = _fraction(text) * 1_000_000
    if ns.denominator != 1:
        raise ValueError(f"{text} ms is not a whole number of ns")
    return int(ns)


# key -> (parser, target object, attribute)
_KEYS: dict[str, tuple[Callable, str, str]] = {
    "geometry.banks": (_int, "geometry", "banks"),
    "geometry.rows_per_bank": (_int, "geometry", "rows_per_bank"),
    "geometry.words_per_row": (_int, "geometry", "words_per_row"),
    "timing.t_rc_ns": (_int, "timing", "t_rc_ns"),
    "timing.retention_window_ns": (_int, "timing", "retention_window_ns"),
    "timing.retention_window_ms": (_ms_to_ns, "timing", "retention_window_ns"),
    "timing.ref_commands_per_window": (_int, "timing", "ref_commands_per_window"),
    "timing.refresh_scale": (_fraction, "timing", "refresh_scale"),
    "timing.auto_refresh": (_bool, "sim", "auto_refresh"),
    "fault.enabled": (_bool, "sim", "fault_enabled"),
    "fault.profile": (str, "fault", "profile"),
    "fault.scale": (_int, "fault", "scale"),
    "fault.threshold_min": (_int, "fault", "threshold_min"),
    "fault.threshold_max": (_int, "fault", "threshold_max"),
    "fault.threshold_distribution": (str, "fault", "threshold_distribution"),
    "fault.victim_map": (str, "sim", "victim_map_path"),
    "fault.adjacency_map": (str, "sim", "adjacency_path"),
    "fault.fill": (_int, "sim", "fill"),
    "mitigation.kind": (str, "mitigation", "kind"),
    "mitigation.p": (float, "mitigation", "p"),
    "mitigation.both_sides": (_bool, "mitigation", "both_sides"),
    "mitigation.scale": (_fraction, "mitigation", "scale"),
    "mitigation.threshold": (_optional_int, "mitigation", "threshold"),
    "mitigation.capacity": (_optional_int, "mitigation", "capacity"),
    "mitigation.reserve_rows": (_int, "mitigation", "reserve_rows"),
    "ecc.enabled": (_bool, "ecc", "enabled"),
    "ecc.scrub_on_refresh": (_bool, "ecc", "scrub_on_refresh"),
    "seed.master": (_int, "sim", "seed"),
}

KNOWN_KEYS = tuple(_KEYS)


def parse_config(text: str, base_dir: str | Path | None = None) -> SimConfig:
    """Parse config text.  Relative file paths resolve against ``base_dir``."""
    groups: dict[str, dict] = {g: {} for g in ("geometry", "timing", "fault", "mitigation", "ecc", "sim")}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: {key} already set on line {seen[key]}")
        seen[key] = lineno
        parse, group, attr = _KEYS[key]
        try:
            groups[group][attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None

    sim = groups["sim"]
    for attr in ("victim_map_path", "adjacency_path"):
        if attr in sim and base_dir is not None and not Path(sim[attr]).is_absolute():
            sim[attr] = str(Path(base_dir) / sim[attr])
    try:
        fault = groups["fault"]
        profile = get_profile(fault.pop("profile", "NULL"))
        profile = profile.scaled(fault.pop("scale", 1))
        if fault:
            profile = replace(profile, **fault)
        return SimConfig(
            geometry=Geometry(**groups["geometry"]),
            timing=TimingParams(**groups["timing"]),
            profile=profile,
            mitigation=MitigationConfig(**groups["mitigation"]),
            ecc=EccConfig(**groups["ecc"]),
            **sim,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)
