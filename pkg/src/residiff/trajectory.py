"""Reference trajectories sampled with analytic first and second derivatives.

Smooth closed curves (circle, sinusoid, spiral, lemniscates, composites)
are parameterized directly in time. Polygonal paths (line, square, kite)
are flown rest-to-rest along each edge with a C3 speed profile, so
acceleration and jerk stay continuous at the corners.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

KINDS = ("line", "square", "circle", "sinusoid", "spiral", "kite", "figure8",
         "double_infinity", "composite", "hover")
PRIMITIVES = ("line", "square", "circle", "sinusoid", "spiral", "kite")
PLANES = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}
COMPOSITE_VARIANTS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class Waypoint:
    t: float
    p_d: np.ndarray
    pd_dot: np.ndarray
    pd_ddot: np.ndarray


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "circle"
    plane: str = "xy"
    mean_velocity: float = 0.4
    duration: float = 20.0
    amplitude: float = 1.0
    center: tuple = (0.0, 0.0, 1.0)
    smoothing: float = 0.0
    variant: str = "A"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}")
        if self.kind in ("composite", "double_infinity") and self.plane != "xy":
            # these span all three axes (or a fixed plane) and take no plane choice
            raise ValueError(f"{self.kind} trajectories have no {self.plane!r} variant; use plane 'xy'")
        if self.kind == "composite" and self.variant not in COMPOSITE_VARIANTS:
            raise ValueError(f"unknown composite variant {self.variant!r}")
        if self.mean_velocity <= 0 or self.duration <= 0 or self.amplitude <= 0:
            raise ValueError("mean_velocity, duration and amplitude must be positive")

    @property
    def name(self) -> str:
        if self.kind == "composite":
            return f"composite_{self.variant}"
        if self.kind in PRIMITIVES or self.kind == "figure8":
            return f"{self.kind}_{self.plane}"
        return self.kind


@dataclass
class Trajectory:
    """Uniformly sampled reference: arrays of shape (N,) and (N, 3)."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    name: str = ""

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Waypoint:
        return Waypoint(float(self.t[i]), self.p[i], self.v[i], self.a[i])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def at(self, t: float) -> Waypoint:
        """Waypoint at an arbitrary time by linear interpolation of the samples."""
        i = np.clip((t - self.t[0]) / self.dt, 0, len(self) - 1)
        lo = int(np.floor(i))
        hi = min(lo + 1, len(self) - 1)
        w = i - lo
        mix = lambda arr: (1 - w) * arr[lo] + w * arr[hi]  # noqa: E731
        return Waypoint(float(t), mix(self.p), mix(self.v), mix(self.a))

    def arc_length(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.p, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])


# -- timing laws ---------------------------------------------------------------

def _septic(tau):
    """C3 rest-to-rest profile s(tau) and its first two derivatives on [0, 1]."""
    tau = np.clip(tau, 0.0, 1.0)
    s = tau ** 4 * (35 - 84 * tau + 70 * tau ** 2 - 20 * tau ** 3)
    ds = 140 * tau ** 3 * (1 - tau) ** 3
    dds = 420 * tau ** 2 * (1 - tau) ** 2 * (1 - 2 * tau)
    return s, ds, dds


def _polygon(t, vertices, mean_velocity):
    """Rest-to-rest traversal of the closed polygon ``vertices`` (repeating)."""
    verts = np.asarray(vertices, float)
    starts = verts
    ends = np.roll(verts, -1, axis=0)
    lengths = np.linalg.norm(ends - starts, axis=1)
    durs = lengths / mean_velocity
    period = durs.sum()
    tb = np.concatenate([[0.0], np.cumsum(durs)])
    tl = np.mod(t, period)
    idx = np.clip(np.searchsorted(tb, tl, side="right") - 1, 0, len(durs) - 1)
    T = durs[idx]
    s, ds, dds = _septic((tl - tb[idx]) / T)
    d = ends[idx] - starts[idx]
    p = starts[idx] + s[:, None] * d
    v = (ds / T)[:, None] * d
    a = (dds / T ** 2)[:, None] * d
    return p, v, a


def _rate_for_mean_speed(curve_speed, spec):
    """Parameter rate w so that the path covered in ``duration`` has the requested mean speed.

    ``curve_speed(th)`` is the speed at unit parameter rate; the arc length
    swept by ``th in [0, w T]`` grows monotonically in ``w``.
    """
    target = spec.mean_velocity * spec.duration
    length = lambda w: quad(curve_speed, 0.0, w * spec.duration, limit=800)[0]  # noqa: E731
    hi = 1.0
    while length(hi) < target:
        hi *= 2.0
    return brentq(lambda w: length(w) - target, 0.0, hi, xtol=1e-13, rtol=1e-12)


def _embed(spec, xy, dxy, ddxy):
    n = xy.shape[0]
    i, j = PLANES[spec.plane]
    p = np.tile(np.asarray(spec.center, float), (n, 1))
    v = np.zeros((n, 3))
    a = np.zeros((n, 3))
    p[:, i] += xy[:, 0]
    p[:, j] += xy[:, 1]
    v[:, i], v[:, j] = dxy[:, 0], dxy[:, 1]
    a[:, i], a[:, j] = ddxy[:, 0], ddxy[:, 1]
    return p, v, a


def _gerono(theta, w, amp, swap=False):
    """Lemniscate of Gerono (x = A sin th, y = A sin th cos th) and derivatives."""
    s, c = np.sin(theta), np.cos(theta)
    s2, c2 = np.sin(2 * theta), np.cos(2 * theta)
    xy = np.stack([amp * s, 0.5 * amp * s2], axis=1)
    d = np.stack([amp * c * w, amp * c2 * w], axis=1)
    dd = np.stack([-amp * s * w * w, -2 * amp * s2 * w * w], axis=1)
    if swap:
        xy, d, dd = xy[:, ::-1], d[:, ::-1], dd[:, ::-1]
    return xy, d, dd


def _gerono_rate(spec):
    return _rate_for_mean_speed(lambda th: spec.amplitude * np.hypot(np.cos(th), np.cos(2 * th)), spec)


# composite variants: 3-D sums of harmonics (loops, turns, vertical motion)
_COMPOSITES = {
    # (x harmonics, y harmonics, z harmonics) as (amplitude, frequency, phase)
    "A": ([(1.0, 1, 0.0)], [(0.6, 2, 0.0)], [(0.3, 3, 0.0)]),
    "B": ([(1.0, 1, 0.0), (0.25, 3, 0.0)], [(1.0, 1, np.pi / 2)], [(0.25, 2, 0.0)]),
    "C": ([(0.8, 2, 0.0)], [(0.8, 1, np.pi / 2), (0.2, 4, 0.0)], [(0.35, 1, 0.0)]),
    "D": ([(1.0, 1, 0.0)], [(0.5, 3, np.pi / 4)], [(0.3, 2, np.pi / 3), (0.1, 5, 0.0)]),
}


def _composite(t, spec):
    terms = _COMPOSITES[spec.variant]

    def speed(th):
        vel = [sum(A * f * np.cos(f * th + ph) for A, f, ph in axis) for axis in terms]
        return spec.amplitude * np.sqrt(sum(x * x for x in vel))

    w = _rate_for_mean_speed(speed, spec)
    th = w * t
    p = np.zeros((len(t), 3))
    v = np.zeros((len(t), 3))
    a = np.zeros((len(t), 3))
    for ax, axis in enumerate(terms):
        for A, f, ph in axis:
            A = A * spec.amplitude
            # subtract the value at t = 0 so every composite starts at center
            p[:, ax] += A * (np.sin(f * th + ph) - np.sin(ph))
            v[:, ax] += A * f * w * np.cos(f * th + ph)
            a[:, ax] += -A * (f * w) ** 2 * np.sin(f * th + ph)
    return p + np.asarray(spec.center, float), v, a


def sample_trajectory(spec: TrajectorySpec, rate: float = 100.0) -> Trajectory:
    """Sample ``spec`` at ``rate`` Hz, returning ``duration * rate`` waypoints."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    n = int(round(spec.duration * rate))
    t = np.arange(n) / rate
    A, V = spec.amplitude, spec.mean_velocity
    kind = spec.kind

    if kind == "hover":
        p = np.tile(np.asarray(spec.center, float), (n, 1))
        return Trajectory(t, p, np.zeros((n, 3)), np.zeros((n, 3)), spec.name)
    if kind == "composite":
        p, v, a = _composite(t, spec)
        return Trajectory(t, p, v, a, spec.name)
    if kind == "double_infinity":
        w = _gerono_rate(spec)
        th = np.mod(w * t, 4 * np.pi)
        first = th < 2 * np.pi
        xy1, d1, dd1 = _gerono(th, w, A)
        xy2, d2, dd2 = _gerono(th - 2 * np.pi, w, A, swap=True)
        xy = np.where(first[:, None], xy1, xy2)
        d = np.where(first[:, None], d1, d2)
        dd = np.where(first[:, None], dd1, dd2)
        p, v, a = _embed(TrajectorySpec(plane="xy", center=spec.center), xy, d, dd)
        return Trajectory(t, p, v, a, spec.name)

    if kind == "line":
        xy, d, dd = _polygon(t, [[0.0, 0.0], [A, 0.0]], V)
    elif kind == "square":
        xy, d, dd = _polygon(t, np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float) * A - A / 2, V)
    elif kind == "kite":
        xy, d, dd = _polygon(t, np.array([[0, -1], [0.6, 0], [0, 1.2], [-0.6, 0]], float) * A / 1.2, V)
    elif kind == "circle":
        w = V / A
        th = w * t
        xy = A * np.stack([np.cos(th) - 1.0, np.sin(th)], axis=1)
        d = A * w * np.stack([-np.sin(th), np.cos(th)], axis=1)
        dd = -A * w * w * np.stack([np.cos(th), np.sin(th)], axis=1)
    elif kind == "sinusoid":
        # x oscillates as a slow sweep back and forth, y as a faster sine
        speed = lambda th: A * np.hypot(np.cos(th), 0.5 * 3 * np.cos(3 * th))  # noqa: E731
        w = _rate_for_mean_speed(speed, spec)
        th = w * t
        xy = A * np.stack([np.sin(th), 0.5 * np.sin(3 * th)], axis=1)
        d = A * w * np.stack([np.cos(th), 1.5 * np.cos(3 * th)], axis=1)
        dd = -A * w * w * np.stack([np.sin(th), 4.5 * np.sin(3 * th)], axis=1)
    elif kind == "spiral":
        # radius breathes between 0.4A and A so the path stays bounded
        def parts(th):
            r = A * (0.7 + 0.3 * np.sin(0.25 * th))
            dr = A * 0.3 * 0.25 * np.cos(0.25 * th)
            ddr = -A * 0.3 * 0.0625 * np.sin(0.25 * th)
            return r, dr, ddr

        def speed(th):
            r, dr, _ = parts(th)
            return np.hypot(dr, r)

        w = _rate_for_mean_speed(speed, spec)
        th = w * t
        r, dr, ddr = parts(th)
        c, s = np.cos(th), np.sin(th)
        r0 = parts(0.0)[0]
        xy = np.stack([r * c - r0, r * s], axis=1)
        d = w * np.stack([dr * c - r * s, dr * s + r * c], axis=1)
        dd = w * w * np.stack([ddr * c - 2 * dr * s - r * c, ddr * s + 2 * dr * c - r * s], axis=1)
    elif kind == "figure8":
        w = _gerono_rate(spec)
        xy, d, dd = _gerono(w * t, w, A)
    else:  # pragma: no cover - guarded by TrajectorySpec
        raise ValueError(kind)
    p, v, a = _embed(spec, xy, d, dd)
    return Trajectory(t, p, v, a, spec.name)


def primitive_specs(mean_velocity: float = 0.4, duration: float = 20.0, amplitude: float = 1.0,
                    center=(0.0, 0.0, 1.5)) -> list[TrajectorySpec]:
    """Every primitive kind in all three planes."""
    return [TrajectorySpec(kind, plane, mean_velocity, duration, amplitude, center)
            for kind in PRIMITIVES for plane in PLANES]


def composite_specs(mean_velocity: float = 0.4, duration: float = 20.0, amplitude: float = 1.0,
                    center=(0.0, 0.0, 1.5)) -> list[TrajectorySpec]:
    return [TrajectorySpec("composite", "xy", mean_velocity, duration, amplitude, center, variant=v)
            for v in COMPOSITE_VARIANTS]


def check_derivative_consistency(traj: Trajectory) -> dict:
    """Max deviation of central differences from the analytic derivatives."""
    if len(traj) < 3:
        raise ValueError("need at least 3 waypoints")
    dts = np.diff(traj.t)
    if not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
        raise ValueError("non-uniform sampling")
    h = dts[0]
    fd_v = (traj.p[2:] - traj.p[:-2]) / (2 * h)
    fd_a = (traj.v[2:] - traj.v[:-2]) / (2 * h)
    return {
        "velocity": float(np.max(np.abs(fd_v - traj.v[1:-1]))),
        "acceleration": float(np.max(np.abs(fd_a - traj.a[1:-1]))),
    }


_CSV_COLS = ["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az"]


def save_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_COLS)
        for i in range(len(traj)):
            w.writerow([repr(float(traj.t[i]))] + [repr(float(x)) for x in
                                                   np.concatenate([traj.p[i], traj.v[i], traj.a[i]])])


def load_csv(path, name: str = "") -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(_CSV_COLS) - set(rows[0] if rows else ())
    if missing:
        raise ValueError(f"trajectory CSV missing columns: {sorted(missing)}")
    arr = np.array([[float(r[c]) for c in _CSV_COLS] for r in rows])
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:7], arr[:, 7:10], name)
