"""Conditional DDPM over residual sequences, plus the single-step baseline.

Everything the networks see lives in normalized units; the models carry a
:class:`~residiff.data.Normalizer` and convert at the boundary.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape
from .data import Normalizer, SequenceDataset
from .networks import MLP, MLPConfig, NoisePredictorConfig, TemporalUNet

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "residiff.checkpoint/1"


class TrainingError(RuntimeError):
    pass


# -- schedule ------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed by ``k - 1`` for steps ``k = 1..K``."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    offset: float = 0.008

    @property
    def K(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, k) -> np.ndarray:
        """``alpha_bar`` with the ``k = 0`` convention of 1."""
        k = np.asarray(k)
        return np.where(k == 0, 1.0, self.alpha_bar[np.maximum(k, 1) - 1])

    def to_dict(self) -> dict:
        return {"K": self.K, "offset": self.offset, "kind": "cosine"}


def cosine_schedule(K: int = 20, s: float = 0.008) -> NoiseSchedule:
    if K < 1:
        raise ValueError("K must be >= 1")
    f = np.cos((np.arange(K + 1) / K + s) / (1 + s) * np.pi / 2) ** 2
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], 0.999)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha), s)


def _check_k(k, sched):
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > sched.K):
        raise ValueError(f"diffusion step out of range 1..{sched.K}: {k}")
    return k


def forward_diffuse(h0, k, eps, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal sample at step ``k`` (scalar or one per batch row)."""
    k = _check_k(k, sched)
    h0 = np.asarray(h0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != h0.shape:
        raise ValueError("eps must match h0 in shape")
    ab = sched.alpha_bar[k - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (h0.ndim - 1))
    return np.sqrt(ab) * h0 + np.sqrt(1.0 - ab) * eps


def forward_step(h_prev, k: int, eps, sched: NoiseSchedule) -> np.ndarray:
    """One forward kernel ``q(h^k | h^{k-1})``."""
    k = int(_check_k(k, sched))
    return np.sqrt(sched.alpha[k - 1]) * np.asarray(h_prev) + np.sqrt(sched.beta[k - 1]) * np.asarray(eps)


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 256
    steps: int = 10_000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None
    dtype: str = "float32"
    log_every: int = 100
    # exponential moving average of the weights; the average is what gets saved
    ema_decay: float | None = None
    # cosine decay of the learning rate down to lr * lr_floor over the run
    lr_floor: float | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0 or self.eps <= 0:
            raise ValueError("learning rate, batch size and eps must be positive, steps >= 0")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.lr_floor is not None and not 0.0 <= self.lr_floor <= 1.0:
            raise ValueError(f"lr_floor must lie in [0, 1], got {self.lr_floor}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)


def predict_noise(net: TemporalUNet, theta: np.ndarray, cond: np.ndarray, h_k: np.ndarray, k) -> np.ndarray:
    """Inference-only evaluation of the noise predictor."""
    k = np.broadcast_to(np.asarray(k), (h_k.shape[0],))
    return net.forward(theta, cond, h_k, k).value


def diffusion_loss(net, theta, cond, h0, k, eps, sched, grad=None):
    """Noise-prediction loss; fills ``grad`` (flat, zeroed here) when given."""
    h_k = forward_diffuse(h0, k, eps, sched).astype(theta.dtype)
    tape = Tape() if grad is not None else None
    if grad is not None:
        grad[:] = 0.0
    out = net.forward(theta, cond, h_k, k, tape, grad)
    loss = ad.sum_squared_error(tape, out, eps.astype(theta.dtype))
    if tape is not None:
        tape.backward(loss)
    return float(loss.value)


def train_step(net: TemporalUNet, theta, grad, opt: Adam, cond, h0, sched: NoiseSchedule,
               rng: np.random.Generator) -> float:
    """Draw steps and noise for a normalized batch, then apply one Adam update."""
    bsz = h0.shape[0]
    k = rng.integers(1, sched.K + 1, size=bsz)
    eps = rng.standard_normal(h0.shape)
    loss = diffusion_loss(net, theta, cond, h0, k, eps, sched, grad)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite loss {loss}")
    opt.step(theta, grad)
    return loss


@dataclass
class TrainResult:
    theta: np.ndarray
    losses: list
    optimizer: Adam
    step: int
    rng_state: dict | None = None
    ema: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        return self.theta if self.ema is None else self.ema


def _fit_loop(n_params, init_theta, loss_and_grad, n_rows, cfg: TrainConfig,
              resume: dict | None = None) -> TrainResult:
    dtype = np.dtype(cfg.dtype)
    theta = np.array(init_theta, dtype=dtype)
    grad = np.zeros_like(theta)
    opt = Adam(n_params, cfg.lr, cfg.betas, cfg.eps, cfg.clip_norm, dtype)
    losses, start = [], 0
    rng = np.random.default_rng(cfg.seed)
    if resume:
        opt.load_state_dict(resume["optimizer"])
        losses = list(resume.get("losses", []))
        start = int(resume["step"])
        rng.bit_generator.state = resume["rng_state"]
    ema = None
    if cfg.ema_decay is not None:
        ema = theta.copy() if not resume or resume.get("ema") is None else np.array(resume["ema"], dtype=dtype)
    for step in range(start, cfg.steps):
        if cfg.lr_floor is not None:
            frac = step / max(cfg.steps - 1, 1)
            opt.lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))
        idx = rng.integers(0, n_rows, size=min(cfg.batch_size, n_rows)) if n_rows > cfg.batch_size \
            else rng.permutation(n_rows)
        loss = loss_and_grad(theta, grad, idx, rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite loss {loss} at step {step} (batch rows {idx[:8].tolist()}...)")
        opt.step(theta, grad)
        if ema is not None:
            ema *= cfg.ema_decay
            ema += (1.0 - cfg.ema_decay) * theta
        losses.append(loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.5f", step + 1, float(np.mean(losses[-cfg.log_every:])))
    return TrainResult(theta, losses, opt, cfg.steps, rng.bit_generator.state, ema)


@dataclass
class DiffusionModel:
    """Trained noise predictor together with everything needed to sample."""

    cfg: NoisePredictorConfig
    theta: np.ndarray
    sched: NoiseSchedule
    normalizer: Normalizer
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    losses: list = field(default_factory=list)
    # normalized targets live in [-1, 1]; clamp the implied clean estimate there
    clip: float | None = 1.0

    def __post_init__(self):
        self.net = TemporalUNet(self.cfg, dtype=self.theta.dtype)

    @property
    def horizon(self) -> int:
        return self.cfg.horizon

    def sample(self, zeta, u_prev, rng: np.random.Generator, n: int = 1, stochastic: bool = True,
               h_init: np.ndarray | None = None, clip: float | None | str = "default") -> np.ndarray:
        """Residual sequences in physical units, shape (n, horizon, 3) per condition row.

        ``zeta``/``u_prev`` may be single vectors or (B, .) rows; the result
        is (B * n, horizon, 3) ordered condition-major. ``clip`` overrides
        the model's clamp; pass None for the plain update.
        """
        clip = self.clip if clip == "default" else clip
        cond = np.repeat(self.normalizer.condition(zeta, u_prev), n, axis=0)
        h = sample_normalized(self.net, self.theta, self.sched, cond, rng, stochastic, h_init, clip)
        return self.normalizer.invert("h", h)


def sample_normalized(net: TemporalUNet, theta, sched: NoiseSchedule, cond: np.ndarray,
                      rng: np.random.Generator, stochastic: bool = True,
                      h_init: np.ndarray | None = None, clip: float | None = None) -> np.ndarray:
    """Reverse process from ``h^K ~ N(0, I)`` down to ``h^0``; no noise at k = 1.

    With ``clip`` set, the implied clean estimate is clamped to
    ``[-clip, clip]`` before forming the step mean. Unclamped, that mean is
    algebraically the usual epsilon update; clamping only matters when the
    predictor is off, where the ``1/sqrt(alpha)`` factor of the first
    steps (about 30 at K = 20) would otherwise amplify its error.
    """
    cfg = net.cfg
    bsz = cond.shape[0]
    shape = (bsz, cfg.horizon, cfg.h_dim)
    h = rng.standard_normal(shape) if h_init is None else np.array(h_init, dtype=float).reshape(shape)
    cond = cond.astype(theta.dtype)
    for k in range(sched.K, 0, -1):
        a, ab, b = sched.alpha[k - 1], sched.alpha_bar[k - 1], sched.beta[k - 1]
        eps = predict_noise(net, theta, cond, h.astype(theta.dtype), np.full(bsz, k))
        if clip is None:
            h = (h - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
        else:
            ab_prev = sched.alpha_bar_at(k - 1)
            h0 = np.clip((h - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -clip, clip)
            h = (np.sqrt(ab_prev) * b * h0 + np.sqrt(a) * (1.0 - ab_prev) * h) / (1.0 - ab)
        if k > 1 and stochastic:
            h = h + np.sqrt(b) * rng.standard_normal(shape)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite sample at diffusion step {k}")
    return h


def train_diffusion(ds: SequenceDataset, normalizer: Normalizer, cfg: TrainConfig,
                    net_cfg: NoisePredictorConfig | None = None, K: int = 20,
                    resume: "DiffusionModel | None" = None) -> DiffusionModel:
    net_cfg = net_cfg or NoisePredictorConfig(horizon=ds.horizon)
    if net_cfg.horizon != ds.horizon:
        raise ValueError(f"network horizon {net_cfg.horizon} != dataset horizon {ds.horizon}")
    sched = cosine_schedule(K)
    net = TemporalUNet(net_cfg, dtype=np.dtype(cfg.dtype))
    dtype = np.dtype(cfg.dtype)
    cond = normalizer.condition(ds.zeta[:, 0], ds.u[:, 0]).astype(dtype)
    target = normalizer.apply("h", ds.h)

    def loss_and_grad(theta, grad, idx, rng):
        k = rng.integers(1, sched.K + 1, size=len(idx))
        eps = rng.standard_normal(target[idx].shape)
        return diffusion_loss(net, theta, cond[idx], target[idx], k, eps, sched, grad)

    state = getattr(resume, "resume_state", None) if resume is not None else None
    init = (state or {}).get("theta", resume.theta) if resume is not None else net.init(cfg.seed)
    res = _fit_loop(net.n_params, init, loss_and_grad, len(ds), cfg, state)
    model = DiffusionModel(net_cfg, res.weights, sched, normalizer, cfg, res.losses)
    model.resume_state = _resume_state(res)
    return model


def _resume_state(res: TrainResult) -> dict:
    return {"optimizer": res.optimizer.state_dict(), "losses": res.losses, "step": res.step,
            "rng_state": res.rng_state, "theta": res.theta, "ema": res.ema}


# -- single-step baseline --------------------------------------------------------

@dataclass
class BaselineModel:
    cfg: MLPConfig
    theta: np.ndarray
    normalizer: Normalizer
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    losses: list = field(default_factory=list)

    def __post_init__(self):
        self.net = MLP(self.cfg, dtype=self.theta.dtype)

    def predict(self, zeta, u_prev) -> np.ndarray:
        """Residual estimate(s) in physical units, shape (B, 3)."""
        x = self.normalizer.condition(zeta, u_prev)
        return self.normalizer.invert("h", self.net.forward(self.theta, x).value)


def train_baseline_mlp(ds: SequenceDataset, normalizer: Normalizer, cfg: TrainConfig,
                       mlp_cfg: MLPConfig | None = None) -> BaselineModel:
    """Regress the first residual of each window on its condition."""
    mlp_cfg = mlp_cfg or MLPConfig()
    dtype = np.dtype(cfg.dtype)
    net = MLP(mlp_cfg, dtype=dtype)
    x = normalizer.condition(ds.zeta[:, 0], ds.u[:, 0]).astype(dtype)
    y = normalizer.apply("h", ds.h[:, 0]).astype(dtype)

    def loss_and_grad(theta, grad, idx, rng):
        grad[:] = 0.0
        tape = Tape()
        out = net.forward(theta, x[idx], tape, grad)
        loss = ad.sum_squared_error(tape, out, y[idx])
        tape.backward(loss)
        return float(loss.value)

    res = _fit_loop(net.space.size, net.init(cfg.seed), loss_and_grad, len(ds), cfg)
    return BaselineModel(mlp_cfg, res.weights, normalizer, cfg, res.losses)


# -- persistence -----------------------------------------------------------------

def save_checkpoint(path, model) -> None:
    if isinstance(model, DiffusionModel):
        header = {"kind": "diffusion", "arch": model.cfg.to_dict(), "schedule": model.sched.to_dict()}
    elif isinstance(model, BaselineModel):
        header = {"kind": "mlp", "arch": model.cfg.to_dict()}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    header.update(schema=CHECKPOINT_SCHEMA, normalizer=model.normalizer.to_dict(),
                  train=model.train_cfg.to_dict(), dtype=str(model.theta.dtype))
    arrays = {"theta": model.theta, "losses": np.asarray(model.losses, dtype=float)}
    state = getattr(model, "resume_state", None)
    if state:
        header["step"] = state["step"]
        header["rng_state"] = state["rng_state"]
        opt = state["optimizer"]
        arrays.update(opt_m=opt["m"], opt_v=opt["v"], opt_t=np.array(opt["t"]))
        if state.get("ema") is not None:
            # theta holds the averaged weights; keep the raw iterate for resuming
            arrays["raw_theta"] = state["theta"]
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("schema") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: unsupported checkpoint schema {header.get('schema')!r}")
        theta = z["theta"].copy()
        losses = z["losses"].tolist()
        opt = {"m": z["opt_m"], "v": z["opt_v"], "t": int(z["opt_t"])} if "opt_m" in z else None
        raw = z["raw_theta"].copy() if "raw_theta" in z else None
    norm = Normalizer.from_dict(header["normalizer"])
    tcfg = TrainConfig(**header["train"])
    if header["kind"] == "diffusion":
        sch = header["schedule"]
        model = DiffusionModel(NoisePredictorConfig(**header["arch"]), theta,
                               cosine_schedule(sch["K"], sch["offset"]), norm, tcfg, losses)
        if opt is not None:
            model.resume_state = {"optimizer": opt, "losses": losses, "step": header["step"],
                                  "rng_state": header["rng_state"],
                                  "theta": theta if raw is None else raw,
                                  "ema": None if raw is None else theta}
        return model
    return BaselineModel(MLPConfig(**header["arch"]), theta, norm, tcfg, losses)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(float(loss))])
