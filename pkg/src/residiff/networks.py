"""Noise predictor and baseline regressor built on :mod:`residiff.autodiff`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSpace, Tape, Var


@dataclass
class NoisePredictorConfig:
    """Architecture of the temporal U-Net noise predictor.

    One residual block per entry of ``widths`` on the way down (with
    2x average pooling between levels) and a mirrored path back up with
    skip connections.
    """

    horizon: int = 16
    h_dim: int = 3
    cond_dim: int = 12
    widths: tuple = (16, 32, 64)
    kernel_size: int = 5
    emb_dim: int = 16
    emb_hidden: int = 64
    groups: int = 8

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        levels = len(self.widths) - 1
        if self.horizon % (2 ** levels):
            raise ValueError(f"horizon {self.horizon} must be divisible by {2 ** levels}")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} groups")

    @property
    def residual_blocks(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_features(k: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal featurization of integer diffusion steps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(k, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class TemporalUNet:
    """epsilon_theta(zeta, u, h_k, k) over a (horizon, 3) residual sequence."""

    def __init__(self, cfg: NoisePredictorConfig, dtype=np.float64):
        self.cfg = cfg
        self.space = ParamSpace(dtype=dtype)
        c = cfg
        self._mlp("temb", c.emb_dim, c.emb_hidden, c.emb_dim)
        self._mlp("cemb", c.cond_dim, c.emb_hidden, c.emb_dim)
        cin = c.h_dim
        for i, w in enumerate(c.widths):
            self._resblock(f"down{i}", cin, w)
            cin = w
        for i in reversed(range(len(c.widths) - 1)):
            self._resblock(f"up{i}", cin + c.widths[i], c.widths[i])
            cin = c.widths[i]
        self._conv("final0", cin, cin, c.kernel_size)
        self._norm("final0_gn", cin)
        # zero-initialized output layer
        self.space.add("out.w", (c.h_dim, cin, 1))
        self.space.add("out.b", (c.h_dim,))

    # -- declaration helpers -------------------------------------------------
    def _lin(self, name, fin, fout):
        self.space.add(f"{name}.w", (fout, fin), "uniform", fin)
        self.space.add(f"{name}.b", (fout,), "uniform", fin)

    def _mlp(self, name, fin, hidden, fout):
        self._lin(f"{name}.l0", fin, hidden)
        self._lin(f"{name}.l1", hidden, fout)

    def _conv(self, name, cin, cout, k):
        self.space.add(f"{name}.w", (cout, cin, k), "uniform", cin * k)
        self.space.add(f"{name}.b", (cout,), "uniform", cin * k)

    def _norm(self, name, ch):
        self.space.add(f"{name}.g", (ch,), "ones")
        self.space.add(f"{name}.b", (ch,))

    def _resblock(self, name, cin, cout):
        k = self.cfg.kernel_size
        self._conv(f"{name}.c0", cin, cout, k)
        self._norm(f"{name}.n0", cout)
        self._lin(f"{name}.film", self.cfg.emb_dim, 2 * cout)
        self._conv(f"{name}.c1", cout, cout, k)
        self._norm(f"{name}.n1", cout)
        if cin != cout:
            self._conv(f"{name}.skip", cin, cout, 1)

    def init(self, seed: int) -> np.ndarray:
        return self.space.build(np.random.default_rng(seed))

    @property
    def n_params(self) -> int:
        return self.space.size

    # -- forward -------------------------------------------------------------
    def forward(self, theta: np.ndarray, cond: np.ndarray, h_k: np.ndarray, k: np.ndarray,
                tape: Tape | None = None, grad: np.ndarray | None = None) -> Var:
        """Predict noise for a batch.

        ``cond`` is (B, cond_dim), ``h_k`` is (B, horizon, h_dim), ``k`` is (B,)
        integer steps. Returns a Var of shape (B, horizon, h_dim).
        """
        c = self.cfg
        if h_k.ndim != 3 or h_k.shape[1:] != (c.horizon, c.h_dim):
            raise ValueError(f"h_k shape {h_k.shape} != (B, {c.horizon}, {c.h_dim})")
        if cond.shape != (h_k.shape[0], c.cond_dim):
            raise ValueError(f"cond shape {cond.shape} != ({h_k.shape[0]}, {c.cond_dim})")
        dt = self.space.dtype
        P = self.space.bind(theta, grad)

        def lin(name, x):
            return ad.linear(tape, x, P[f"{name}.w"], P[f"{name}.b"])

        def mlp(name, x):
            return lin(f"{name}.l1", ad.mish(tape, lin(f"{name}.l0", x)))

        def conv(name, x):
            return ad.conv1d(tape, x, P[f"{name}.w"], P[f"{name}.b"])

        def conv_block(name, norm, x):
            y = conv(name, x)
            y = ad.group_norm(tape, y, P[f"{norm}.g"], P[f"{norm}.b"], c.groups)
            return ad.mish(tape, y)

        tfeat = Var(timestep_features(k, c.emb_dim).astype(dt))
        emb = ad.add(tape, mlp("temb", tfeat), mlp("cemb", Var(cond.astype(dt))))
        emb = ad.mish(tape, emb)

        def resblock(name, x):
            y = conv_block(f"{name}.c0", f"{name}.n0", x)
            y = ad.film(tape, y, lin(f"{name}.film", emb))
            y = conv_block(f"{name}.c1", f"{name}.n1", y)
            res = conv(f"{name}.skip", x) if f"{name}.skip.w" in P else x
            return ad.add(tape, y, res)

        x = Var(np.ascontiguousarray(h_k, dtype=dt))
        skips = []
        n_levels = len(c.widths)
        for i in range(n_levels):
            x = resblock(f"down{i}", x)
            if i < n_levels - 1:
                skips.append(x)
                x = ad.avg_pool2(tape, x)
        for i in reversed(range(n_levels - 1)):
            x = ad.upsample2(tape, x)
            x = ad.concat_channels(tape, x, skips[i])
            x = resblock(f"up{i}", x)
        x = conv_block("final0", "final0_gn", x)
        return conv("out", x)


@dataclass
class MLPConfig:
    in_dim: int = 12
    out_dim: int = 3
    hidden: int = 128
    layers: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


class MLP:
    """Plain Mish perceptron used as the single-step baseline."""

    def __init__(self, cfg: MLPConfig, dtype=np.float64):
        self.cfg = cfg
        self.space = ParamSpace(dtype=dtype)
        dims = [cfg.in_dim] + [cfg.hidden] * (cfg.layers - 1) + [cfg.out_dim]
        self._dims = dims
        for i in range(len(dims) - 1):
            self.space.add(f"l{i}.w", (dims[i + 1], dims[i]), "uniform", dims[i])
            self.space.add(f"l{i}.b", (dims[i + 1],), "uniform", dims[i])

    def init(self, seed: int) -> np.ndarray:
        return self.space.build(np.random.default_rng(seed))

    def forward(self, theta, x, tape=None, grad=None) -> Var:
        P = self.space.bind(theta, grad)
        h = Var(np.asarray(x, dtype=self.space.dtype))
        n = len(self._dims) - 1
        for i in range(n):
            h = ad.linear(tape, h, P[f"l{i}.w"], P[f"l{i}.b"])
            if i < n - 1:
                h = ad.mish(tape, h)
        return h
