"""Named experiment presets built from the library pieces.

Every preset takes an :class:`ExperimentConfig` (budgets, seeds, sizes) and
returns a JSON-ready dict. The defaults are desk-scale; the acceptance
suite pins its own budgets.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .controllers import GainSet, PIDGains
from .data import FlightLog, Normalizer, SequenceDataset, build_sequences
from .diffusion import BaselineModel, DiffusionModel, TrainConfig, train_baseline_mlp, train_diffusion
from .dynamics import (DisturbanceProcess, DisturbanceSpec, QuadrotorParams, ToyParams, step_toy)
from .harness import (DiffusionEstimator, EpisodeConfig, MLPEstimator, OracleEstimator, ZeroEstimator,
                      monitor_stability, run_episode)
from .networks import MLPConfig, NoisePredictorConfig
from .trajectory import TrajectorySpec, composite_specs, primitive_specs, sample_trajectory

log = logging.getLogger(__name__)

PRESETS = ("toy-fig2", "table1-analog", "payload-sweep", "wind-hover", "horizon-sweep")


@dataclass
class ExperimentConfig:
    seed: int = 0
    control_rate: float = 30.0
    physics_rate: float = 100.0
    horizon: int = 16
    mean_velocity: float = 0.4
    duration: float = 20.0
    n_trials: int = 10
    train_steps: int = 4000
    batch_size: int = 64
    lr: float = 1e-3  # MLP baseline
    diffusion_lr: float = 3e-3
    ema_decay: float | None = 0.999
    lr_floor: float | None = 0.05
    mlp_steps: int = 4000
    base_mass: float = 1.4
    drag: tuple = (0.3, 0.3, 0.2)
    actuator_lag: float = 0.05
    wind_rate: float = 0.5
    wind_volatility: float = 0.3
    m_bar: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def plant(self, payload: float = 0.0) -> QuadrotorParams:
        return QuadrotorParams(mass=self.base_mass, drag_coeffs=self.drag, payload_mass=payload,
                               actuator_lag_tau=self.actuator_lag)

    def wind(self, volatility: float | None = None) -> DisturbanceSpec:
        vol = self.wind_volatility if volatility is None else volatility
        if vol == 0:
            return DisturbanceSpec("none")
        return DisturbanceSpec("ou_wind", {"rate": self.wind_rate, "volatility": vol})

    def train_config(self, steps: int | None = None, seed_offset: int = 0) -> TrainConfig:
        """Diffusion training: averaged weights and a cosine decay of the step size."""
        return TrainConfig(lr=self.diffusion_lr, batch_size=self.batch_size,
                           steps=self.train_steps if steps is None else steps,
                           seed=self.seed + seed_offset, log_every=500, ema_decay=self.ema_decay,
                           lr_floor=self.lr_floor)

    def mlp_train_config(self, seed_offset: int = 1) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, steps=self.mlp_steps,
                           seed=self.seed + seed_offset, log_every=500)

    def episode(self, **kw) -> EpisodeConfig:
        base = dict(control_rate=self.control_rate, physics_rate=self.physics_rate, seed=self.seed)
        base.update(kw)
        return EpisodeConfig(**base)


# -- data collection ---------------------------------------------------------------

def fly_pid(spec: TrajectorySpec, params: QuadrotorParams, dist: DisturbanceSpec, cfg: ExperimentConfig,
            seed: int, pid: PIDGains | None = None) -> FlightLog:
    """One demonstration flight under the data-collection PID."""
    traj = sample_trajectory(spec, cfg.control_rate)
    elog, metrics = run_episode(traj, params, dist, ZeroEstimator(),
                                cfg.episode(estimator="zero", controller="pid", seed=seed),
                                GainSet(m_bar=cfg.m_bar), pid or PIDGains(m_bar=cfg.m_bar))
    if metrics.crash:
        log.warning("demonstration %s crashed at t=%.2f", spec.name, elog.crash_time)
    fl = elog.to_flight_log(spec.name)
    fl.meta.update(payload=params.payload_mass, seed=seed, velocity=spec.mean_velocity)
    return fl


def collect(specs: list[TrajectorySpec], params: QuadrotorParams, dist: DisturbanceSpec,
            cfg: ExperimentConfig, seed0: int = 0) -> list[FlightLog]:
    if not specs:
        raise ValueError("empty trajectory list")
    return [fly_pid(s, params, dist, cfg, seed0 + i) for i, s in enumerate(specs)]


def dataset_from_logs(logs: list[FlightLog], horizon: int, m_bar: float) -> SequenceDataset:
    return SequenceDataset.concat([build_sequences(fl, horizon, 1, m_bar) for fl in logs])


def primitive_dataset(cfg: ExperimentConfig, payloads=(0.0,), velocities=None) -> tuple[SequenceDataset, list]:
    velocities = velocities or (cfg.mean_velocity,)
    logs = []
    for pi, payload in enumerate(payloads):
        for vi, vel in enumerate(velocities):
            specs = primitive_specs(vel, cfg.duration)
            logs += collect(specs, cfg.plant(payload), cfg.wind(), cfg,
                            seed0=cfg.seed * 1000 + 100 * pi + 10 * vi * len(specs))
    return dataset_from_logs(logs, cfg.horizon, cfg.m_bar), logs


def train_both(ds: SequenceDataset, cfg: ExperimentConfig) -> tuple[DiffusionModel, BaselineModel]:
    norm = Normalizer.fit(ds)
    diff = train_diffusion(ds, norm, cfg.train_config(), NoisePredictorConfig(horizon=ds.horizon))
    mlp = train_baseline_mlp(ds, norm, cfg.mlp_train_config(), MLPConfig())
    return diff, mlp


def make_estimator(kind: str, models: dict, params: QuadrotorParams, m_bar: float):
    if kind == "diffusion":
        return DiffusionEstimator(models["diffusion"])
    if kind == "mlp":
        return MLPEstimator(models["mlp"])
    if kind == "oracle":
        return OracleEstimator(params, m_bar)
    return ZeroEstimator()


def evaluate(models: dict, specs: list[TrajectorySpec], params: QuadrotorParams, dist: DisturbanceSpec,
             cfg: ExperimentConfig, estimators=("diffusion", "mlp"), controller: str = "dm_ac",
             seeds=None, episode_kw: dict | None = None) -> list[dict]:
    """Run every (trajectory, estimator, seed) episode; rows are sorted by run key."""
    seeds = list(range(cfg.n_trials)) if seeds is None else list(seeds)
    gains = GainSet(m_bar=cfg.m_bar)
    rows = []
    for spec in specs:
        traj = sample_trajectory(spec, cfg.control_rate)
        for est in estimators:
            for seed in seeds:
                ecfg = cfg.episode(estimator=est, controller=controller, seed=1000 * cfg.seed + seed,
                                   **(episode_kw or {}))
                elog, m = run_episode(traj, params, dist, make_estimator(est, models, params, cfg.m_bar),
                                      ecfg, gains)
                row = {"trajectory": spec.name, "estimator": est, "controller": controller,
                       "seed": seed, **m.to_dict()}
                if controller != "pid" and len(elog):
                    row["uub_pass"] = monitor_stability(elog, gains).verdict
                    row["sigma_hat_min"] = float(np.min(elog.sigma_hat))
                rows.append(row)
    return sorted(rows, key=lambda r: (r["trajectory"], r["estimator"], r["seed"]))


def medians(rows: list[dict], keys=("trajectory", "estimator"), value: str = "rmse_position") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[value])
    return {"/".join(map(str, k)): float(np.median(v)) for k, v in sorted(groups.items())}


# -- presets -----------------------------------------------------------------------

def table1_analog(cfg: ExperimentConfig, models: dict | None = None) -> dict:
    """Train on primitives, compare estimators on held-out composites."""
    if models is None:
        ds, _ = primitive_dataset(cfg)
        models = dict(zip(("diffusion", "mlp"), train_both(ds, cfg)))
    specs = composite_specs(cfg.mean_velocity, cfg.duration)
    rows = evaluate(models, specs, cfg.plant(), cfg.wind(), cfg)
    return {"preset": "table1-analog", "config": cfg.to_dict(), "runs": rows,
            "median_rmse_position": medians(rows),
            "median_rmse_prediction": medians(rows, value="rmse_prediction")}


def payload_sweep(cfg: ExperimentConfig, models: dict | None = None, train_payloads=(0.2, 0.6),
                  eval_payloads=(0.4, 0.8), train_velocities=(0.2, 0.4)) -> dict:
    """Train at two payloads, fly DM-AC at unseen payloads and under wind."""
    if models is None:
        ds, _ = primitive_dataset(cfg, train_payloads, train_velocities)
        models = dict(zip(("diffusion", "mlp"), train_both(ds, cfg)))
    spec = [TrajectorySpec("circle", "xy", cfg.mean_velocity, cfg.duration, center=(0, 0, 1.5))]
    rows = []
    for payload in eval_payloads:
        for cond, dist in (("calm", cfg.wind(0.0)), ("wind", cfg.wind(2 * cfg.wind_volatility))):
            for r in evaluate(models, spec, cfg.plant(payload), dist, cfg):
                rows.append({**r, "payload": payload, "condition": cond})
    return {"preset": "payload-sweep", "config": cfg.to_dict(), "runs": rows,
            "median_rmse_position": medians(rows, ("payload", "condition", "estimator"))}


def wind_hover(cfg: ExperimentConfig, models: dict | None = None, volatilities=(0.3, 0.6, 1.0)) -> dict:
    if models is None:
        ds, _ = primitive_dataset(cfg)
        models = dict(zip(("diffusion", "mlp"), train_both(ds, cfg)))
    spec = [TrajectorySpec("hover", duration=cfg.duration, center=(0, 0, 1.5))]
    rows = []
    for vol in volatilities:
        for r in evaluate(models, spec, cfg.plant(), cfg.wind(vol), cfg):
            rows.append({**r, "volatility": vol})
    return {"preset": "wind-hover", "config": cfg.to_dict(), "runs": rows,
            "median_rmse_position": medians(rows, ("volatility", "estimator"))}


def horizon_sweep(cfg: ExperimentConfig, model: DiffusionModel | None = None, reuse=(1, 8, 32, 64),
                  latency_steps: int = 2, volatility: float | None = None) -> dict:
    """Hover with DM-AC while consuming ``reuse_n`` predictions per sample."""
    if model is None:
        hcfg = replace(cfg, horizon=max(reuse))
        ds, _ = primitive_dataset(hcfg)
        model = train_diffusion(ds, Normalizer.fit(ds), hcfg.train_config(),
                                NoisePredictorConfig(horizon=hcfg.horizon))
    if model.horizon < max(reuse):
        raise ValueError(f"model horizon {model.horizon} shorter than reuse {max(reuse)}")
    spec = [TrajectorySpec("hover", duration=cfg.duration, center=(0, 0, 1.5))]
    dist = cfg.wind(volatility)
    rows = []
    for n in reuse:
        for r in evaluate({"diffusion": model}, spec, cfg.plant(), dist, cfg, ("diffusion",),
                          episode_kw={"reuse_n": n, "latency_steps": latency_steps}):
            rows.append({**r, "reuse_n": n})
    med = {n: float(np.median([r["rmse_position"] for r in rows if r["reuse_n"] == n])) for n in reuse}
    ete = {n: float(np.median([r["ete"] for r in rows if r["reuse_n"] == n])) for n in reuse}
    crash = {n: float(np.mean([r["crash"] for r in rows if r["reuse_n"] == n])) for n in reuse}
    return {"preset": "horizon-sweep", "config": cfg.to_dict(), "latency_steps": latency_steps,
            "runs": rows, "median_rmse_position": med, "median_ete": ete, "crash_rate": crash}


# -- toy system ----------------------------------------------------------------------

@dataclass
class ToyConfig:
    disturbance: str = "cauchy"
    scale: float = 0.1  # Gaussian std or Cauchy scale
    x0: float = 1.0
    train_duration: float = 8.0
    horizon: int = 16
    train_steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    n_seeds: int = 20
    seed: int = 0
    steady_from: float = 4.0
    draws: int = 1  # diffusion estimate is the median of this many samples
    params: ToyParams = field(default_factory=ToyParams)

    def dist(self, seed: int) -> DisturbanceSpec:
        key = "scale" if self.disturbance == "cauchy" else "std"
        return DisturbanceSpec(self.disturbance, {key: self.scale}, seed=seed, dim=1)


def toy_rollout(cfg: ToyConfig, seed: int, estimate=None) -> dict:
    """Closed loop ``u = -K x - d_hat`` from ``x0``; ``estimate(x, u_prev)`` gives d_hat."""
    batch = None if estimate is None else (lambda x, u: [estimate(x[0], u[0])])
    run = toy_rollouts(cfg, [seed], batch)
    return {k: (v if k == "t" else v[0]) for k, v in run.items()}


def toy_rollouts(cfg: ToyConfig, seeds, estimate=None) -> dict:
    """Several seeds in lockstep; ``estimate(xs, u_prevs)`` returns one d_hat per seed.

    Arrays come back as (n_seeds, n_steps).
    """
    p = cfg.params
    procs = [DisturbanceProcess(cfg.dist(s)) for s in seeds]
    S, T = len(procs), p.n_steps
    x, u_prev = np.full(S, float(cfg.x0)), np.zeros(S)
    out = {k: np.empty((S, T)) for k in ("x", "u", "d", "d_hat")}
    for n in range(T):
        d_hat = np.zeros(S) if estimate is None else np.asarray(estimate(x, u_prev), dtype=float).reshape(S)
        u = -p.k_gain * x - d_hat
        d = np.array([float(pr.sample(n * p.dt, p.dt)[0]) for pr in procs])
        out["x"][:, n], out["u"][:, n], out["d"][:, n], out["d_hat"][:, n] = x, u, d, d_hat
        x = np.array([step_toy(x[i], u[i], p, d[i]) for i in range(S)])
        u_prev = u
    out["t"] = np.arange(T) * p.dt
    return out


def toy_dataset(cfg: ToyConfig) -> tuple[SequenceDataset, Normalizer]:
    """Windows of the disturbance sequence conditioned on ``(x, u_prev)``.

    Training data is one ``train_duration`` flight of the nominal loop
    (no compensation), the disturbance recovered from the state increments.
    """
    p = replace(cfg.params, duration=cfg.train_duration)
    run = toy_rollout(replace(cfg, params=p), seed=cfg.seed + 10_000)
    x_next = np.append(run["x"][1:], step_toy(run["x"][-1], run["u"][-1], p, run["d"][-1]))
    d_meas = (x_next - run["x"]) / p.dt - p.a * run["x"] - run["u"]
    u_prev = np.concatenate([[0.0], run["u"][:-1]])
    T, H = len(d_meas), cfg.horizon
    win = np.arange(T - H + 1)[:, None] + np.arange(H)[None, :]
    ds = SequenceDataset(run["x"][win][..., None], u_prev[win][..., None], d_meas[win][..., None],
                         {"toy": cfg.disturbance})
    return ds, Normalizer.fit(ds)


def toy_fig2(cfg: ToyConfig) -> dict:
    """Train both estimators on one nominal flight, then close the loop per seed."""
    if cfg.steady_from >= cfg.params.duration:
        raise ValueError(f"steady_from {cfg.steady_from} s leaves no steady window in a {cfg.params.duration} s run")
    ds, norm = toy_dataset(cfg)
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, steps=cfg.train_steps, seed=cfg.seed, log_every=500)
    diff = train_diffusion(ds, norm, tcfg, NoisePredictorConfig(horizon=cfg.horizon, h_dim=1, cond_dim=2))
    mlp = train_baseline_mlp(ds, norm, tcfg, MLPConfig(in_dim=2, out_dim=1))
    steady = int(round(cfg.steady_from / cfg.params.dt))
    seeds = list(range(cfg.n_seeds))
    rng = np.random.default_rng([cfg.seed, 11])

    def diffusion_batch(x, u):
        # one conditional draw set per seed, the estimate is their median
        s = diff.sample(x[:, None], u[:, None], rng, n=cfg.draws)[:, 0, 0]
        return np.median(s.reshape(len(x), cfg.draws), axis=1)

    ests = {"diffusion": diffusion_batch, "mlp": lambda x, u: mlp.predict(x[:, None], u[:, None])[:, 0],
            "none": None}
    out = {"disturbance": cfg.disturbance, "scale": cfg.scale, "runs": []}
    for name, est in ests.items():
        run = toy_rollouts(cfg, seeds, est)
        for i, seed in enumerate(seeds):
            ax = np.abs(run["x"][i])
            out["runs"].append({"seed": seed, "estimator": name,
                                "steady_median_abs_x": float(np.median(ax[steady:])),
                                "settle_time": _toy_settle(run["t"], ax, 0.1),
                                "x": run["x"][i].tolist()})
    out["runs"].sort(key=lambda r: (r["seed"], list(ests).index(r["estimator"])))
    for name in ("diffusion", "mlp", "none"):
        vals = [r["steady_median_abs_x"] for r in out["runs"] if r["estimator"] == name]
        out[f"median_{name}"] = float(np.median(vals))
    return out


def _toy_settle(t, ax, tol):
    outside = np.flatnonzero(ax >= tol)
    if len(outside) == 0:
        return float(t[0])
    if outside[-1] == len(ax) - 1:
        return float("inf")
    return float(t[outside[-1] + 1])
