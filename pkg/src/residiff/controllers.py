"""Position-loop control laws producing world-frame force commands.

Tracking errors are ``e = p - p_d`` for the sliding-variable laws. The PID
used to collect training data works with ``p_d - p`` so its gains read as
the usual positive feedback gains.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import GRAVITY, PlantState
from .trajectory import Waypoint


def _diag(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        if np.any(a != np.diag(np.diag(a))):
            raise ValueError(f"{name} must be diagonal")
        a = np.diag(a)
    a = np.broadcast_to(a, (3,)).astype(float)
    if np.any(a <= 0):
        raise ValueError(f"{name} must be positive definite, got {a}")
    return a


@dataclass(frozen=True)
class GainSet:
    Phi: tuple = (1.5, 1.5, 1.2)
    Lambda: tuple = (2.0, 2.0, 4.0)
    m_bar: float = 1.0
    nu: float = 2.0
    varpi: float = 0.1
    sigma_hat0: float = 0.1
    sigma_m: float = 0.0
    u_limit: float | None = None  # per-axis clamp; None -> 2 * m_bar * g

    def __post_init__(self):
        object.__setattr__(self, "Phi", tuple(_diag(self.Phi, "Phi")))
        object.__setattr__(self, "Lambda", tuple(_diag(self.Lambda, "Lambda")))
        if self.m_bar <= 0 or self.nu <= 0 or self.varpi <= 0 or self.sigma_hat0 <= 0:
            raise ValueError("m_bar, nu, varpi and sigma_hat0 must be positive")
        if self.sigma_m < 0:
            raise ValueError("sigma_m must be non-negative")

    @property
    def limit(self) -> float:
        return 2.0 * self.m_bar * GRAVITY if self.u_limit is None else float(self.u_limit)

    def check_rate(self, dt: float) -> None:
        """The Euler update of the adaptive gain stays positive only if nu * dt < 1."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        if self.nu * dt >= 1.0:
            raise ValueError(f"nu * dt = {self.nu * dt:.3f} >= 1 would break adaptive-gain positivity")


@dataclass(frozen=True)
class PIDGains:
    kp: tuple = (4.0, 4.0, 6.0)
    kd: tuple = (3.0, 3.0, 4.0)
    ki: tuple = (0.5, 0.5, 0.5)
    i_clamp: float = 10.0
    m_bar: float = 1.0
    u_limit: float | None = None

    def __post_init__(self):
        for name in ("kp", "kd", "ki"):
            object.__setattr__(self, name, tuple(_diag(getattr(self, name), name)))
        if self.i_clamp <= 0 or self.m_bar <= 0:
            raise ValueError("i_clamp and m_bar must be positive")

    @property
    def limit(self) -> float:
        return 2.0 * self.m_bar * GRAVITY if self.u_limit is None else float(self.u_limit)


@dataclass(frozen=True)
class ControllerState:
    sigma_hat: float = 0.1
    last_u: np.ndarray = field(default_factory=lambda: np.zeros(3))
    integral: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class ControlCommand:
    u: np.ndarray
    diagnostics: dict
    saturated: bool = False


def sliding_variable(e_p, e_p_dot, Phi) -> np.ndarray:
    return np.asarray(e_p_dot, float) + _diag(Phi, "Phi") * np.asarray(e_p, float)


def smooth_switch(s: np.ndarray, varpi: float) -> np.ndarray:
    """``s / sqrt(|s|^2 + varpi)``; its norm is below one for every ``s``."""
    return s / np.sqrt(float(s @ s) + varpi)


def saturate(u: np.ndarray, limit: float) -> tuple[np.ndarray, bool]:
    clipped = np.clip(u, -limit, limit)
    return clipped, bool(np.any(clipped != u))


def _sliding_law(wp: Waypoint, state: PlantState, h_hat, gains: GainSet, switch_gain: float):
    Phi = np.asarray(gains.Phi)
    e = state.p - wp.p_d
    e_dot = state.v - wp.pd_dot
    s = e_dot + Phi * e
    sw = switch_gain * smooth_switch(s, gains.varpi)
    u = -np.asarray(gains.Lambda) * s + gains.m_bar * (wp.pd_ddot - Phi * e_dot) + np.asarray(h_hat, float) - sw
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite control command")
    u_sat, sat = saturate(u, gains.limit)
    diag = {"s": s, "e_p": e, "e_p_dot": e_dot, "sigma_hat": switch_gain, "switch": sw, "u_raw": u}
    return ControlCommand(u_sat, diag, sat)


def dm_ac_control(wp: Waypoint, state: PlantState, h_hat, gains: GainSet,
                  ctl: ControllerState, dt: float) -> tuple[ControlCommand, ControllerState]:
    """Adaptive law; the gain is advanced by one explicit Euler step after use."""
    gains.check_rate(dt)
    cmd = _sliding_law(wp, state, h_hat, gains, ctl.sigma_hat)
    s = cmd.diagnostics["s"]
    sigma = ctl.sigma_hat + dt * (float(np.linalg.norm(s)) - gains.nu * ctl.sigma_hat)
    return cmd, replace(ctl, sigma_hat=sigma, last_u=cmd.u)


def dm_smc_control(wp: Waypoint, state: PlantState, h_hat, gains: GainSet) -> ControlCommand:
    return _sliding_law(wp, state, h_hat, gains, 0.0)


def dm_rc_control(wp: Waypoint, state: PlantState, h_hat, gains: GainSet) -> ControlCommand:
    return _sliding_law(wp, state, h_hat, gains, gains.sigma_m)


def pid_control(wp: Waypoint, state: PlantState, gains: PIDGains, ctl: ControllerState,
                dt: float) -> tuple[ControlCommand, ControllerState]:
    """PID with gravity feedforward and a clamped error integral."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = wp.p_d - state.p
    e_dot = wp.pd_dot - state.v
    integral = np.clip(ctl.integral + e * dt, -gains.i_clamp, gains.i_clamp)
    acc = wp.pd_ddot + np.asarray(gains.kp) * e + np.asarray(gains.kd) * e_dot + np.asarray(gains.ki) * integral
    u = gains.m_bar * acc + np.array([0.0, 0.0, gains.m_bar * GRAVITY])
    u_sat, sat = saturate(u, gains.limit)
    diag = {"e_p": -e, "e_p_dot": -e_dot, "integral": integral, "u_raw": u}
    return ControlCommand(u_sat, diag, sat), replace(ctl, integral=integral, last_u=u_sat)


CONTROLLERS = ("dm_ac", "dm_smc", "dm_rc", "pid")
