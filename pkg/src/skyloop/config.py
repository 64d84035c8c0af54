"""Flat dotted-key configuration with strict validation.

A config file is a single JSON object whose keys are "section.field", e.g.

    {"odometry.max_features": 800, "sim.dt": 0.01, "provider.url": "..."}

Precedence: dataclass defaults, then file values, then environment
overrides. SKYLOOP_CONFIG points at the default file; SKYLOOP_PROVIDER_URL
overrides provider.url. Unknown sections or fields are rejected up front so
typos fail loudly instead of silently running with defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from .errors import InputError
from .odometry import OdometryConfig
from .simworld import SimConfig
from .trajectory import ControllerGains

ENV_CONFIG_PATH = "SKYLOOP_CONFIG"
ENV_PROVIDER_URL = "SKYLOOP_PROVIDER_URL"


@dataclasses.dataclass
class MissionSettings:
    waypoint_spacing: float = 0.5
    waypoint_timeout_s: float = 20.0
    generation_timeout_s: float = 90.0
    arrival_tolerance_m: float = 0.25
    battery_floor: float = 0.05
    land_speed: float = 0.3
    max_subtask_time_s: float = 120.0


@dataclasses.dataclass
class ProviderSettings:
    url: str = ""
    poll_interval_s: float = 0.5
    request_timeout_s: float = 30.0


_SECTIONS = {
    "odometry": OdometryConfig,
    "sim": SimConfig,
    "gains": ControllerGains,
    "mission": MissionSettings,
    "provider": ProviderSettings,
}

# fields that cannot be expressed as a JSON scalar (set programmatically)
_UNSETTABLE = {("sim", "mounting")}


def _coerce(section: str, field: dataclasses.Field, value):
    name = f"{section}.{field.name}"
    default = field.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InputError(f"{name} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"{name} expects a number, got {value!r}")
        if float(value) != int(value):
            raise InputError(f"{name} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InputError(f"{name} expects a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if (not isinstance(value, list)
                or len(value) != len(default)
                or not all(isinstance(v, (int, float)) for v in value)):
            raise InputError(
                f"{name} expects a list of {len(default)} numbers")
        return tuple(type(d)(v) for d, v in zip(default, value))
    raise InputError(f"{name} is not settable from a config file")


class Config:
    """Validated flat key-value configuration."""

    def __init__(self, values: dict = None):
        self.values = {}
        for key, value in (values or {}).items():
            section, field = self._split(key)
            cls = _SECTIONS[section]
            spec = {f.name: f for f in dataclasses.fields(cls)}
            if field not in spec or (section, field) in _UNSETTABLE:
                raise InputError(f"unknown config key {key!r}")
            self.values[key] = _coerce(section, spec[field], value)

    @staticmethod
    def _split(key: str):
        if not isinstance(key, str) or key.count(".") != 1:
            raise InputError(f"config keys look like 'section.field', "
                             f"got {key!r}")
        section, field = key.split(".")
        if section not in _SECTIONS:
            raise InputError(f"unknown config section {section!r}")
        return section, field

    @staticmethod
    def load(path=None, env=None) -> "Config":
        """Read config from a JSON file plus environment overrides.

        path falls back to $SKYLOOP_CONFIG; no path and no variable gives
        pure defaults. $SKYLOOP_PROVIDER_URL overrides provider.url last.
        """
        if env is None:
            env = os.environ
        if path is None:
            path = env.get(ENV_CONFIG_PATH) or None
        raw = {}
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise InputError(f"config file not found: {p}")
            try:
                raw = json.loads(p.read_text())
            except json.JSONDecodeError as e:
                raise InputError(f"config file {p} is not valid JSON: {e}")
            if not isinstance(raw, dict):
                raise InputError("config file must hold one JSON object")
        url = env.get(ENV_PROVIDER_URL)
        if url:
            raw = dict(raw)
            raw["provider.url"] = url
        return Config(raw)

    def _build(self, section: str):
        cls = _SECTIONS[section]
        overrides = {}
        for key, value in self.values.items():
            sec, field = key.split(".")
            if sec == section:
                overrides[field] = value
        return cls(**overrides)

    def odometry(self) -> OdometryConfig:
        return self._build("odometry")

    def sim(self) -> SimConfig:
        return self._build("sim")

    def gains(self) -> ControllerGains:
        return self._build("gains")

    def mission(self) -> MissionSettings:
        return self._build("mission")

    def provider(self) -> ProviderSettings:
        return self._build("provider")
