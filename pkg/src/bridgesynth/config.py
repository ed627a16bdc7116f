"""
Run configuration: an INI file with one section per module, overridden by
``section.key=value`` pairs. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Callable, Dict, Iterable, Optional, Tuple


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _tuple(kind: Callable) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        s = s.strip().strip("()[]")
        return tuple(kind(p) for p in s.replace("x", ",").split(",") if p.strip()) if s else ()
    return parse


def _optional(kind: Callable) -> Callable[[str], object]:
    def parse(s: str):
        return None if s.strip().lower() in ("", "none", "null") else kind(s)
    return parse


ints, floats = _tuple(int), _tuple(float)

# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, Tuple[Callable, object]]] = {
    "phantom": {
        "cases": (int, 20),
        "shape": (ints, (16, 64, 64)),
        "seed": (int, 0),
        "noise_sigma": (float, 0.01),
        "radius_min": (float, 3.0),
        "radius_max": (float, 5.0),
        "dilation_radius": (float, 3.0),
    },
    "prep": {
        "cases": (str, ""),
        "variant": (str, "AV"),
        "seed": (int, 0),
        "ratios": (floats, (0.8, 0.1, 0.1)),
        "exclusions": (str, ""),
        "radius": (_optional(float), None),
        "target_shape": (_optional(ints), None),
        "target_spacing": (_optional(floats), None),
    },
    "schedule": {
        "T": (int, 1000),
        "s": (float, 1.0),
        "variance_mode": (str, "posterior"),
    },
    "model": {
        "image_size": (int, 64),
        "base_channels": (int, 32),
        "channel_multipliers": (ints, (1, 2, 4)),
        "res_blocks_per_level": (int, 2),
        "attention_resolutions": (ints, (16, 8)),
        "attention_heads": (int, 4),
        "N": (int, 1),
    },
    "train": {
        "manifest": (str, ""),
        "epochs": (int, 100),
        "batch_size": (int, 8),
        "lr": (float, 1e-4),
        "seed": (int, 0),
        "val_every": (int, 1),
        "val_steps": (int, 10),
        "crop": (_optional(int), None),
        "max_steps": (_optional(int), None),
        "time_limit_s": (_optional(float), None),
        "validate": (_bool, True),
    },
    "sampler": {
        "steps": (int, 50),
        "M": (int, 1),
        "lam": (float, 0.1),
        "d": (_optional(float), None),
        "eta": (float, 0.0),
        "seed": (int, 0),
        "aggregate": (_bool, True),
        "correction_delta": (str, "strided"),
    },
    "eval": {
        "nz_mode": (str, "union"),
        "data_range": (float, 1.0),
    },
}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


class RunConfig:
    """Effective configuration: defaults <- file <- overrides."""

    def __init__(self, values: Dict[str, Dict[str, object]] | None = None):
        self.values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, kv in (values or {}).items():
            for k, v in kv.items():
                self.values[sec][k] = v

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None

    def put(self, section: str, key: str, value) -> None:
        """Set an already-typed value (from a CLI flag); ``None`` leaves the current value."""
        if value is None:
            return
        if key not in SCHEMA.get(section, {}):
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = value

    def __getitem__(self, section: str) -> Dict[str, object]:
        return self.values[section]

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            lhs, raw = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            self.set(section, key, raw.strip())

    def load_file(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep key case (T, M, N)
        try:
            cp.read_string(Path(path).read_text())
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for section in cp.sections():
            for key, raw in cp[section].items():
                self.set(section, key, raw)

    def dumps(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for sec in SCHEMA:
            cp[sec] = {k: _format(v) for k, v in self.values[sec].items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def build_config(config_file: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = RunConfig()
    if config_file:
        cfg.load_file(config_file)
    cfg.apply_overrides(overrides)
    return cfg
