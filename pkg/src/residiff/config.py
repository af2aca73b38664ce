"""Key-value run configuration with typed fields and line-precise errors.

Files use INI syntax::

    [plant]
    mass = 1.4
    drag_coeffs = 0.3, 0.3, 0.2

    [train]
    steps = 4000

Unknown sections or keys are errors. ``section.key=value`` overrides from
the command line are applied on top of the file.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)

    def to_dict(self) -> dict:
        return {"error": "config", "message": str(self), "path": self.path, "line": self.line}


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


SCHEMA: dict[str, dict[str, callable]] = {
    "run": {"seed": int, "output_dir": str, "preset": str},
    "plant": {"mass": float, "gravity": float, "drag_coeffs": _floats, "payload_mass": float,
              "actuator_lag_tau": float},
    "disturbance": {"kind": str, "bias": _floats, "rate": float, "volatility": float, "std": float,
                    "scale": float},
    "gains": {"Phi": _floats, "Lambda": _floats, "m_bar": float, "nu": float, "varpi": float,
              "sigma_hat0": float, "sigma_m": float, "u_limit": _opt_float},
    "pid": {"kp": _floats, "kd": _floats, "ki": _floats, "i_clamp": float},
    "trajectory": {"kind": str, "plane": str, "mean_velocity": float, "duration": float, "amplitude": float,
                   "center": _floats, "variant": str, "rate": float},
    "data": {"horizon": int, "stride": int, "payloads": _floats, "velocities": _floats, "kinds": str,
             "cutoff_hz": _opt_float},
    "train": {"lr": float, "batch_size": int, "steps": int, "seed": int, "clip_norm": _opt_float,
              "dtype": str, "K": int, "widths": _ints, "kernel_size": int, "log_every": int,
              "ema_decay": _opt_float, "lr_floor": _opt_float},
    "episode": {"physics_rate": float, "control_rate": float, "reuse_n": int, "estimator": str,
                "controller": str, "crash_threshold": float, "duration": _opt_float, "seed": int,
                "latency_steps": int, "latency_mode": str},
    "experiment": {"n_trials": int, "train_steps": int, "mlp_steps": int, "batch_size": int, "lr": float,
                   "diffusion_lr": float, "ema_decay": _opt_float, "lr_floor": _opt_float,
                   "base_mass": float, "wind_volatility": float, "wind_rate": float, "horizon": int,
                   "latency_steps": int, "reuse": _ints},
    "toy": {"disturbance": str, "scale": float, "x0": float, "train_steps": int, "n_seeds": int, "draws": int,
            "a": float, "k_gain": float, "dt": float, "duration": float},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    path: str | None = None

    def section(self, name: str) -> dict:
        return dict(self.values.get(name, {}))

    def get(self, section: str, key: str, default=None):
        return self.values.get(section, {}).get(key, default)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    cur = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"^\[(.+)\]$", line)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return i
            continue
        if cur == section and key is not None and re.match(rf"^{re.escape(key)}\s*[=:]", line, re.IGNORECASE):
            return i
    return None


def parse_config(text: str, path: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep Phi / Lambda capitalized
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], path, line) from None
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", path, _line_of(text, sec, None))
        values[sec] = {}
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]", path, _line_of(text, sec, key))
            try:
                values[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}", path, _line_of(text, sec, key)) from None
    return RunConfig(values, path)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError("config file not found", str(path))
    return parse_config(p.read_text(), str(path))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings."""
    for item in overrides or ():
        m = re.match(r"^([A-Za-z_]+)\.([A-Za-z_]+)=(.*)$", item)
        if not m:
            raise ConfigError(f"override {item!r} is not section.key=value")
        sec, key, raw = m.groups()
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown override target {sec}.{key}")
        try:
            cfg.values.setdefault(sec, {})[key] = SCHEMA[sec][key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad override {item!r}: {exc}") from None
    return cfg
