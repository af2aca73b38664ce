"""Closed-loop episodes: estimator, controller and plant at fixed rates.

Each control step measures the state, picks a residual estimate from the
current prediction window (querying the estimator when the window is
used up), computes the force and holds it over the physics substeps.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import controllers as ctl
from .controllers import ControllerState, GainSet, PIDGains
from .data import FlightLog, sensory_tuples
from .dynamics import DisturbanceProcess, DisturbanceSpec, PlantState, QuadrotorParams, step_quadrotor
from .trajectory import Trajectory, Waypoint

log = logging.getLogger(__name__)

ESTIMATORS = ("diffusion", "mlp", "oracle", "zero")


@dataclass(frozen=True)
class EpisodeConfig:
    physics_rate: float = 100.0
    control_rate: float = 30.0
    reuse_n: int = 1
    estimator: str = "diffusion"
    controller: str = "dm_ac"
    crash_threshold: float = 2.0
    duration: float | None = None
    seed: int = 0
    # control steps between issuing a query and its result being usable
    latency_steps: int = 0
    latency_mode: str = "fixed"  # or "measured": ceil(sampling wall time / control period)

    def __post_init__(self):
        if self.physics_rate < self.control_rate or self.control_rate <= 0:
            raise ValueError("need physics_rate >= control_rate > 0")
        if self.reuse_n < 1:
            raise ValueError("reuse_n must be >= 1")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.controller not in ctl.CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.latency_steps < 0 or self.latency_mode not in ("fixed", "measured"):
            raise ValueError("bad latency settings")
        if self.crash_threshold <= 0:
            raise ValueError("crash_threshold must be positive")

    @property
    def substeps(self) -> int:
        """Physics steps per control step; rounds up so control spacing stays uniform."""
        return int(math.ceil(self.physics_rate / self.control_rate - 1e-9))

    @property
    def dt_control(self) -> float:
        return 1.0 / self.control_rate


# -- estimators ------------------------------------------------------------------

class Estimator:
    """Maps the latest (zeta, u_prev) to a window of residual predictions."""

    horizon = 1

    def reset(self, seed: int) -> None:
        pass

    def query(self, zeta: np.ndarray, u_prev: np.ndarray, plant: "PlantView") -> np.ndarray:
        raise NotImplementedError


class ZeroEstimator(Estimator):
    horizon = 10 ** 6

    def query(self, zeta, u_prev, plant):
        return np.zeros((1, 3))


class MLPEstimator(Estimator):
    def __init__(self, model):
        self.model = model

    def query(self, zeta, u_prev, plant):
        return self.model.predict(zeta, u_prev)


class DiffusionEstimator(Estimator):
    """One conditional sample per query, or the per-entry median of ``draws`` samples."""

    def __init__(self, model, clip: float | None | str = "default", draws: int = 1):
        if draws < 1:
            raise ValueError("draws must be >= 1")
        self.model = model
        self.clip = clip
        self.draws = draws
        self.horizon = model.horizon
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng([seed, 7331])

    def query(self, zeta, u_prev, plant):
        seqs = self.model.sample(zeta, u_prev, self.rng, n=self.draws, clip=self.clip)
        return seqs[0] if self.draws == 1 else np.median(seqs, axis=0)


class OracleEstimator(Estimator):
    """Residual the plant will actually produce, from simulator internals.

    The residual depends on the command, which depends on the estimate. For
    a law ``u = u0 + H_hat`` the fixed point is
    ``H = ((m - m_bar) / m_bar) u0 - m g_v - f_a`` with ``f_a`` taken at the
    start of the interval.
    """

    horizon = 1
    needs_u0 = True

    def __init__(self, params: QuadrotorParams, m_bar: float):
        self.params = params
        self.m_bar = m_bar

    def solve(self, u0: np.ndarray, plant: "PlantView") -> np.ndarray:
        m = self.params.total_mass
        return (m - self.m_bar) / self.m_bar * u0 - m * self.params.gravity_vector - plant.f_a()

    def query(self, zeta, u_prev, plant):  # pragma: no cover - harness calls solve()
        raise RuntimeError("oracle estimates are solved inside the control step")


@dataclass
class PlantView:
    """Read access to simulator truth for the oracle."""

    state: PlantState
    params: QuadrotorParams
    dist: DisturbanceProcess | None

    def f_a(self) -> np.ndarray:
        wind = self.dist.last if self.dist is not None else np.zeros(3)
        return -np.asarray(self.params.drag_coeffs) * self.state.v + wind


# -- logs and metrics ------------------------------------------------------------

LOG_FIELDS = ("t", "p", "v", "acc", "u", "h_hat", "h_true", "p_d", "v_d", "a_d", "s", "sigma_hat",
              "d", "sample_time", "queried", "saturated")


@dataclass
class EpisodeLog:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    acc: np.ndarray
    u: np.ndarray
    h_hat: np.ndarray
    h_true: np.ndarray
    p_d: np.ndarray
    v_d: np.ndarray
    a_d: np.ndarray
    s: np.ndarray
    sigma_hat: np.ndarray
    d: np.ndarray
    sample_time: np.ndarray
    queried: np.ndarray
    saturated: np.ndarray
    crash: bool = False
    crash_time: float | None = None
    wall_time: float = 0.0
    V: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def to_flight_log(self, name: str = "") -> FlightLog:
        return FlightLog(self.t, self.p, self.v, self.acc, self.u, self.h_true, name, dict(self.meta))

    def to_csv(self, path) -> None:
        cols, blocks = [], []
        for key in LOG_FIELDS + (("V",) if self.V is not None else ()):
            arr = np.asarray(getattr(self, key), dtype=float)
            arr = arr.reshape(len(self), -1)
            names = [key] if arr.shape[1] == 1 else [f"{key}_{'xyz'[i]}" for i in range(arr.shape[1])]
            cols += names
            blocks.append(arr)
        table = np.concatenate(blocks, axis=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerows(table.tolist())


@dataclass(frozen=True)
class Metrics:
    rmse_position: float
    rmse_prediction: float
    ete: float
    crash: bool
    settle_time: float

    def to_dict(self) -> dict:
        return {"rmse_position": self.rmse_position, "rmse_prediction": self.rmse_prediction,
                "ete": self.ete, "crash": self.crash, "settle_time": self.settle_time}


def compute_metrics(elog: EpisodeLog, dt_control: float | None = None, settle_tol: float = 0.1) -> Metrics:
    """Tracking and prediction RMS errors, ETE and settling time of one episode."""
    if len(elog) == 0:
        raise ValueError("empty episode log")
    err = np.linalg.norm(elog.p - elog.p_d, axis=1)
    rmse_p = float(np.sqrt(np.mean(err ** 2)))
    rmse_h = float(np.sqrt(np.mean(np.sum((elog.h_hat - elog.h_true) ** 2, axis=1))))
    q_idx = np.flatnonzero(elog.queried)
    step = dt_control or (float(elog.t[1] - elog.t[0]) if len(elog) > 1 else 1.0)
    if len(q_idx) >= 2:
        gap = float(np.mean(np.diff(elog.t[q_idx])))
    else:
        gap = step * len(elog)
    ete = float(np.mean(elog.sample_time[q_idx]) / gap) if len(q_idx) else 0.0
    outside = np.flatnonzero(err > settle_tol)
    if len(outside) == 0:
        settle = float(elog.t[0])
    elif outside[-1] == len(err) - 1:
        settle = math.inf
    else:
        settle = float(elog.t[outside[-1] + 1])
    return Metrics(rmse_p, rmse_h, ete, bool(elog.crash), settle)


@dataclass(frozen=True)
class StabilityTrace:
    V: np.ndarray
    bound: float
    rho: float
    kappa: float
    delta: float
    sigma_m_est: float
    verdict: bool
    transient: float
    v_max_after: float

    def to_dict(self) -> dict:
        return {"bound": self.bound, "rho": self.rho, "kappa": self.kappa, "delta": self.delta,
                "sigma_m_est": self.sigma_m_est, "verdict": self.verdict, "transient": self.transient,
                "v0": float(self.V[0]), "v_max_after": self.v_max_after}


def monitor_stability(elog: EpisodeLog, gains: GainSet, transient: float = 2.0, tol: float = 0.2) -> StabilityTrace:
    """Empirical ultimate-boundedness check of the adaptive closed loop.

    The estimation-error bound is taken as the largest observed
    ``|H - H_hat|``; ``kappa`` is fixed at half of ``rho``.
    """
    sigma_m = float(np.max(np.linalg.norm(elog.h_true - elog.h_hat, axis=1))) if len(elog) else 0.0
    V = 0.5 * gains.m_bar * np.sum(elog.s ** 2, axis=1) + 0.5 * (elog.sigma_hat - sigma_m) ** 2
    rho = min(min(gains.Lambda), gains.nu / 2.0) / max(gains.m_bar / 2.0, 0.5)
    kappa = rho / 2.0
    delta = 0.5 * gains.nu * sigma_m ** 2
    bound = delta / (rho - kappa)
    after = elog.t - elog.t[0] >= transient
    v_after = float(np.max(V[after])) if np.any(after) else float("nan")
    ok = bool(np.all(V[after] <= max(float(V[0]), bound) * (1.0 + tol)))
    return StabilityTrace(V, bound, rho, kappa, delta, sigma_m, ok, transient, v_after)


# -- episode -----------------------------------------------------------------------

@dataclass
class _Window:
    seq: np.ndarray
    issued: int
    ready: int


def run_episode(traj: Trajectory, params: QuadrotorParams, dist: DisturbanceSpec | None,
                estimator: Estimator, cfg: EpisodeConfig, gains: GainSet | None = None,
                pid: PIDGains | None = None, start: PlantState | None = None) -> tuple[EpisodeLog, Metrics]:
    gains = gains or GainSet()
    pid = pid or PIDGains(m_bar=gains.m_bar)
    dtc = cfg.dt_control
    n_sub = cfg.substeps
    dtp = dtc / n_sub
    if cfg.controller == "dm_ac":
        gains.check_rate(dtc)
    if cfg.reuse_n > estimator.horizon:
        raise ValueError(f"reuse_n {cfg.reuse_n} exceeds estimator horizon {estimator.horizon}")
    duration = cfg.duration if cfg.duration is not None else float(traj.t[-1] - traj.t[0])
    n_steps = int(round(duration * cfg.control_rate))
    if n_steps < 1:
        raise ValueError("episode shorter than one control step")

    proc = DisturbanceProcess(dist.with_seed(cfg.seed)) if dist is not None and dist.kind != "none" else None
    estimator.reset(cfg.seed)
    wp0 = traj.at(traj.t[0])
    state = start or PlantState.at(wp0.p_d, wp0.pd_dot)
    cstate = ControllerState(sigma_hat=gains.sigma_hat0)
    acc_prev = np.zeros(3)
    u_prev = np.zeros(3)
    oracle = isinstance(estimator, OracleEstimator)

    rec = {k: [] for k in LOG_FIELDS}
    windows: list[_Window] = []
    last_query = None
    crash, crash_time = False, None
    wall0 = time.perf_counter()

    for j in range(n_steps):
        t = traj.t[0] + j * dtc
        wp = traj.at(t)
        zeta, up = sensory_tuples(state.p, state.v, acc_prev, u_prev)
        view = PlantView(state, params, proc)

        # estimation
        queried, stime = False, 0.0
        if not oracle and (last_query is None or j - last_query >= cfg.reuse_n):
            t0 = time.perf_counter()
            seq = np.asarray(estimator.query(zeta, up, view), dtype=float).reshape(-1, 3)
            stime = time.perf_counter() - t0
            if not np.all(np.isfinite(seq)):
                raise FloatingPointError(f"estimator returned non-finite values at step {j}")
            if j == 0:
                lag = 0  # first window is prepared before the run starts
            elif cfg.latency_mode == "measured":
                lag = int(math.ceil(stime / dtc))
            else:
                lag = cfg.latency_steps
            windows.append(_Window(seq, j, j + lag))
            queried, last_query = True, j
        if oracle:
            u0 = _law(cfg.controller, wp, state, np.zeros(3), gains, pid, cstate, dtc)[0].diagnostics["u_raw"]
            h_hat = estimator.solve(u0, view)
        else:
            live = [w for w in windows if w.ready <= j]
            w = live[-1]
            h_hat = w.seq[min(j - w.issued, len(w.seq) - 1)]
            windows = [x for x in windows if x is w or x.ready > j]

        cmd, cstate = _law(cfg.controller, wp, state, h_hat, gains, pid, cstate, dtc)
        u = cmd.u
        v_start = state.v
        for i in range(n_sub):
            state = step_quadrotor(state, u, params, proc, dtp, t + i * dtp)
        acc = (state.v - v_start) / dtc
        h_true = u - gains.m_bar * acc

        rec["t"].append(t)
        rec["p"].append(view.state.p)
        rec["v"].append(v_start)
        rec["acc"].append(acc)
        rec["u"].append(u)
        rec["h_hat"].append(np.asarray(h_hat, float))
        rec["h_true"].append(h_true)
        rec["p_d"].append(wp.p_d)
        rec["v_d"].append(wp.pd_dot)
        rec["a_d"].append(wp.pd_ddot)
        rec["s"].append(cmd.diagnostics.get("s", np.zeros(3)))
        rec["sigma_hat"].append(cmd.diagnostics.get("sigma_hat", 0.0))
        rec["d"].append(proc.last.copy() if proc is not None else np.zeros(3))
        rec["sample_time"].append(stime)
        rec["queried"].append(queried)
        rec["saturated"].append(cmd.saturated)

        acc_prev, u_prev = acc, u
        nxt = traj.at(t + dtc)
        if np.linalg.norm(state.p - nxt.p_d) > cfg.crash_threshold or state.p[2] < 0 or not state.is_finite():
            crash, crash_time = True, t + dtc
            log.info("crash at t=%.2f s (estimator %s, controller %s)", crash_time, cfg.estimator, cfg.controller)
            break

    arrays = {k: np.array(v) for k, v in rec.items()}
    elog = EpisodeLog(**arrays, crash=crash, crash_time=crash_time, wall_time=time.perf_counter() - wall0,
                      meta={"trajectory": traj.name, "seed": cfg.seed, "estimator": cfg.estimator,
                            "controller": cfg.controller, "reuse_n": cfg.reuse_n})
    if cfg.controller != "pid":
        elog.V = monitor_stability(elog, gains).V
    return elog, compute_metrics(elog, dtc)


def _law(name, wp: Waypoint, state, h_hat, gains, pid, cstate, dt):
    if name == "dm_ac":
        return ctl.dm_ac_control(wp, state, h_hat, gains, cstate, dt)
    if name == "dm_smc":
        return ctl.dm_smc_control(wp, state, h_hat, gains), cstate
    if name == "dm_rc":
        return ctl.dm_rc_control(wp, state, h_hat, gains), cstate
    return ctl.pid_control(wp, state, pid, cstate, dt)
