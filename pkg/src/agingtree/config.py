"""Layered run configuration: defaults < config file < AMK_* env < CLI flags.

The config file is a flat ``key = value`` text format (comments start
with '#'); values are parsed as bool, int, float, or bare string.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

DEFAULTS = {
    "backend": "toy",
    "seed": 0,
    "steps": 30,
    "preset": "full",
    "key_gain": 1.0,
    "refiner": "template",
}

ENV_PREFIX = "AMK_"
_ENV_KEYS = {key: ENV_PREFIX + key.upper() for key in DEFAULTS}


def _parse_value(raw: str):
    raw = raw.strip().strip('"').strip("'")
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def parse_config_file(path) -> dict:
    values: dict = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


@dataclass(frozen=True)
class RunConfig:
    backend: str
    seed: int
    steps: int
    preset: str
    key_gain: float
    refiner: str


def load_config(flags: dict | None = None, config_path=None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    merged = dict(DEFAULTS)
    if config_path is not None:
        for key, value in parse_config_file(config_path).items():
            if key in merged:
                merged[key] = value
    for key, env_key in _ENV_KEYS.items():
        if env_key in env:
            merged[key] = _parse_value(env[env_key])
    for key, value in (flags or {}).items():
        if value is not None and key in merged:
            merged[key] = value
    return RunConfig(
        backend=str(merged["backend"]),
        seed=int(merged["seed"]),
        steps=int(merged["steps"]),
        preset=str(merged["preset"]),
        key_gain=float(merged["key_gain"]),
        refiner=str(merged["refiner"]),
    )
