"""Ground-truth plants: a 3-D point-mass quadrotor and a scalar toy system.

The quadrotor consumes a world-frame force command directly (the attitude
loop is abstracted away), optionally through a first-order actuator lag.
Aerodynamic forces are linear drag plus an external disturbance process.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

GRAVITY = 9.81

DISTURBANCE_KINDS = ("none", "constant_bias", "ou_wind", "gaussian", "cauchy")
CAUCHY_CLIP = 50.0


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 1.4
    gravity: float = GRAVITY
    drag_coeffs: tuple = (0.0, 0.0, 0.0)
    payload_mass: float = 0.0
    actuator_lag_tau: float = 0.0

    def __post_init__(self):
        drag = tuple(float(c) for c in np.broadcast_to(self.drag_coeffs, (3,)))
        object.__setattr__(self, "drag_coeffs", drag)
        if self.mass <= 0 or self.gravity <= 0:
            raise ValueError("mass and gravity must be positive")
        if min(drag) < 0 or self.payload_mass < 0 or self.actuator_lag_tau < 0:
            raise ValueError("drag, payload and actuator lag must be non-negative")

    @property
    def total_mass(self) -> float:
        return self.mass + self.payload_mass

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass(frozen=True)
class PlantState:
    p: np.ndarray
    v: np.ndarray
    a_last: np.ndarray = field(default_factory=lambda: np.zeros(3))
    lagged_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # total aerodynamic/disturbance force of the last step, lag discrepancy included
    f_a_last: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def at(cls, p, v=(0.0, 0.0, 0.0), force=(0.0, 0.0, 0.0)) -> "PlantState":
        return cls(np.array(p, dtype=float), np.array(v, dtype=float),
                   lagged_force=np.array(force, dtype=float))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.v)))


@dataclass(frozen=True)
class DisturbanceSpec:
    """Configuration of an external disturbance.

    ``params`` by kind: constant_bias ``bias``; ou_wind ``rate``,
    ``volatility`` and optional ``mean``; gaussian ``std``; cauchy ``scale``.
    ``dim`` is 3 for the quadrotor and 1 for the toy system.
    """

    kind: str = "none"
    params: dict = field(default_factory=dict)
    seed: int = 0
    dim: int = 3

    def __post_init__(self):
        if self.kind not in DISTURBANCE_KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        p = self.params
        if self.kind == "ou_wind":
            if p.get("rate", 0.0) <= 0:
                raise ValueError("ou_wind requires rate > 0")
            if p.get("volatility", 0.0) < 0:
                raise ValueError("ou_wind volatility must be >= 0")
        if self.kind == "gaussian" and p.get("std", 0.0) < 0:
            raise ValueError("gaussian std must be >= 0")
        if self.kind == "cauchy" and p.get("scale", 0.0) < 0:
            raise ValueError("cauchy scale must be >= 0")

    def with_seed(self, seed: int) -> "DisturbanceSpec":
        return replace(self, seed=seed)


class DisturbanceProcess:
    """Stateful sampler realizing a :class:`DisturbanceSpec`.

    Draws are deterministic given the seed and the call sequence. The OU
    kind advances its internal state with the exact discretization for the
    supplied ``dt``.
    """

    def __init__(self, spec: DisturbanceSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.n_clipped = 0
        self.last = np.zeros(spec.dim)
        self._ou = None
        if spec.kind == "ou_wind":
            mean = np.broadcast_to(np.asarray(spec.params.get("mean", 0.0), float), (spec.dim,))
            self._mean = mean.copy()
            sd = spec.params["volatility"] / np.sqrt(2.0 * spec.params["rate"])
            # start from the stationary distribution
            self._ou = self._mean + sd * self.rng.standard_normal(spec.dim)

    def sample(self, t: float, dt: float) -> np.ndarray:
        spec, p = self.spec, self.spec.params
        kind = spec.kind
        if kind == "none":
            d = np.zeros(spec.dim)
        elif kind == "constant_bias":
            d = np.broadcast_to(np.asarray(p.get("bias", 0.0), float), (spec.dim,)).copy()
        elif kind == "gaussian":
            d = p.get("std", 0.0) * self.rng.standard_normal(spec.dim)
        elif kind == "cauchy":
            scale = p.get("scale", 0.0)
            d = scale * self.rng.standard_cauchy(spec.dim)
            lim = CAUCHY_CLIP * scale
            hit = np.abs(d) > lim
            if hit.any():
                self.n_clipped += int(hit.sum())
                log.debug("cauchy draw clipped at t=%.3f (%d total)", t, self.n_clipped)
                d = np.clip(d, -lim, lim)
        else:
            rate, vol = p["rate"], p["volatility"]
            decay = np.exp(-rate * dt)
            sd = vol * np.sqrt((1.0 - decay ** 2) / (2.0 * rate))
            self._ou = self._mean + (self._ou - self._mean) * decay + sd * self.rng.standard_normal(spec.dim)
            d = self._ou.copy()
        self.last = d
        return d


def sample_disturbance(process: DisturbanceProcess, t: float, dt: float) -> np.ndarray:
    return process.sample(t, dt)


def aero_force(state: PlantState, params: QuadrotorParams, wind: np.ndarray) -> np.ndarray:
    """External force ``-drag * v + wind`` (lag discrepancy excluded)."""
    return -np.asarray(params.drag_coeffs) * state.v + wind


def step_quadrotor(state: PlantState, force_cmd, params: QuadrotorParams,
                   dist: DisturbanceProcess | None, dt: float, t: float = 0.0) -> PlantState:
    """Advance the quadrotor one physics step with semi-implicit Euler."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u = np.asarray(force_cmd, dtype=float)
    if u.shape != (3,) or not np.all(np.isfinite(u)):
        raise ValueError(f"force command must be a finite 3-vector, got {force_cmd!r}")
    if not state.is_finite():
        raise ValueError("plant state is not finite")
    if params.actuator_lag_tau > 0:
        gain = 1.0 - np.exp(-dt / params.actuator_lag_tau)
        f_eff = state.lagged_force + gain * (u - state.lagged_force)
    else:
        f_eff = u
    wind = dist.sample(t, dt) if dist is not None else np.zeros(3)
    f_ext = aero_force(state, params, wind)
    m = params.total_mass
    a = params.gravity_vector + (f_eff + f_ext) / m
    v = state.v + a * dt
    p = state.p + v * dt
    return PlantState(p, v, a, f_eff, f_ext + (f_eff - u))


def true_residual(u, p_ddot, f_a, params: QuadrotorParams, m_bar: float) -> np.ndarray:
    """Residual from its definition ``(m - m_bar) p_ddot - m g_v - f_a``."""
    m = params.total_mass
    return (m - m_bar) * np.asarray(p_ddot) - m * params.gravity_vector - np.asarray(f_a)


def mechanical_energy(state: PlantState, params: QuadrotorParams) -> float:
    m = params.total_mass
    return m * (0.5 * float(state.v @ state.v) + params.gravity * float(state.p[2]))


@dataclass(frozen=True)
class ToyParams:
    """Scalar plant ``x' = a x + u + d`` under feedback ``u = -K x - d_hat``."""

    a: float = 1.0
    k_gain: float = 2.0
    dt: float = 0.01
    duration: float = 8.0

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= 0:
            raise ValueError("dt and duration must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


def step_toy(x: float, u: float, params: ToyParams, dist: DisturbanceProcess | float,
             t: float = 0.0) -> float:
    """Explicit Euler step of the toy plant; ``dist`` is a process or a fixed value."""
    if isinstance(dist, DisturbanceProcess):
        d = float(dist.sample(t, params.dt)[0])
    else:
        d = float(dist)
    if not np.isfinite(x) or not np.isfinite(u) or not np.isfinite(d):
        raise ValueError("non-finite toy input")
    return x + params.dt * (params.a * x + u + d)
