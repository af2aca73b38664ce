"""Tape-based reverse-mode differentiation for small, fixed networks.

Only the handful of operations the noise predictor and the baseline
regressor need are provided. Every op takes an optional :class:`Tape`;
passing ``None`` runs inference without recording anything.

Parameters live in one flat vector (:class:`ParamSpace`) so that the
optimizer, checkpoints and finite-difference checks all see the same
layout. Gradients are accumulated into a flat vector of identical layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Var:
    """A value on the tape together with its (lazily created) gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray, grad: np.ndarray | None = None):
        self.value = value
        # parameter grads are views into the flat gradient, updated in place
        self.grad = grad

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self._ops = []

    def record(self, fn) -> None:
        self._ops.append(fn)

    def backward(self, out: Var, dout: np.ndarray | None = None) -> None:
        out.accumulate(np.ones_like(out.value) if dout is None else dout)
        for fn in reversed(self._ops):
            fn()
        self._ops.clear()


@dataclass
class ParamSpace:
    """Flat parameter vector with named, shaped views.

    Parameters are declared with :meth:`add` and materialized with
    :meth:`build`; afterwards ``theta`` holds every weight and
    ``view(name)`` returns a reshaped window into it.
    """

    dtype: type = np.float64
    _layout: dict = field(default_factory=dict)
    _inits: dict = field(default_factory=dict)
    size: int = 0
    theta: np.ndarray | None = None

    def add(self, name: str, shape: tuple, init: str = "zeros", fan_in: int = 1) -> None:
        if name in self._layout:
            raise ValueError(f"duplicate parameter {name!r}")
        n = int(np.prod(shape))
        self._layout[name] = (self.size, shape)
        self._inits[name] = (init, fan_in)
        self.size += n

    def build(self, rng: np.random.Generator) -> np.ndarray:
        theta = np.zeros(self.size, dtype=self.dtype)
        for name, (off, shape) in self._layout.items():
            init, fan_in = self._inits[name]
            n = int(np.prod(shape))
            if init == "uniform":
                bound = 1.0 / np.sqrt(fan_in)
                theta[off:off + n] = rng.uniform(-bound, bound, n)
            elif init == "ones":
                theta[off:off + n] = 1.0
            elif init != "zeros":
                raise ValueError(f"unknown init {init!r}")
        self.theta = theta
        return theta

    @property
    def names(self) -> list[str]:
        return list(self._layout)

    def slice(self, name: str) -> slice:
        off, shape = self._layout[name]
        return slice(off, off + int(np.prod(shape)))

    def view(self, name: str, vec: np.ndarray | None = None) -> np.ndarray:
        vec = self.theta if vec is None else vec
        off, shape = self._layout[name]
        return vec[off:off + int(np.prod(shape))].reshape(shape)

    def bind(self, theta: np.ndarray, grad: np.ndarray | None = None) -> dict[str, Var]:
        """Wrap every parameter as a :class:`Var`, optionally wired to ``grad``.

        The last binding is cached; repeated calls with the same arrays
        (inference loops, or training with a reused gradient buffer) skip
        rebuilding the views.
        """
        cached = self.__dict__.get("_bound")
        if cached is not None and cached[0] is theta and cached[1] is grad:
            return cached[2]
        out = {}
        for name in self._layout:
            g = None if grad is None else self.view(name, grad)
            out[name] = Var(self.view(name, theta), g)
        self.__dict__["_bound"] = (theta, grad, out)
        return out


def _record(tape, fn):
    if tape is not None:
        tape.record(fn)


def linear(tape: Tape | None, x: Var, w: Var, b: Var) -> Var:
    """``x @ w.T + b`` over the last axis."""
    out = Var(x.value @ w.value.T + b.value)

    def back():
        g = out.grad
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.value.reshape(-1, x.value.shape[-1])
        w.accumulate(g2.T @ x2)
        b.accumulate(g2.sum(axis=0))
        x.accumulate(g @ w.value)

    _record(tape, back)
    return out


def conv1d(tape: Tape | None, x: Var, w: Var, b: Var) -> Var:
    """Same-padded stride-1 convolution.

    ``x`` is channels-last (batch, length, channels); ``w`` is
    (out_channels, in_channels, kernel).
    """
    bsz, length, cin = x.value.shape
    cout, _, ksize = w.value.shape
    pad = ksize // 2
    if ksize == 1:
        cols = x.value.reshape(bsz * length, cin)
        xp = None
    else:
        xp = np.zeros((bsz, length + ksize - 1, cin), dtype=x.value.dtype)
        xp[:, pad:pad + length] = x.value
        s0, s1, s2 = xp.strides
        cols = as_strided(xp, (bsz, length, cin, ksize), (s0, s1, s2, s1)).reshape(bsz * length, cin * ksize)
    wm = w.value.reshape(cout, cin * ksize)
    out = Var((cols @ wm.T + b.value).reshape(bsz, length, cout))

    def back():
        g = out.grad.reshape(bsz * length, cout)
        w.accumulate((g.T @ cols).reshape(w.value.shape))
        b.accumulate(g.sum(axis=0))
        dcols = g @ wm
        if xp is None:
            x.accumulate(dcols.reshape(bsz, length, cin))
            return
        dcols = dcols.reshape(bsz, length, cin, ksize)
        dxp = np.zeros_like(xp)
        for k in range(ksize):
            dxp[:, k:k + length, :] += dcols[:, :, :, k]
        x.accumulate(dxp[:, pad:pad + length, :])

    _record(tape, back)
    return out


def group_norm(tape: Tape | None, x: Var, gamma: Var, beta: Var, groups: int, eps: float = 1e-5) -> Var:
    """Group normalization over (length, channels-in-group) of a (B, L, C) input."""
    bsz, length, ch = x.value.shape
    cg = ch // groups
    n = length * cg

    def group_mean(a):
        # (B, L, C) -> per-group mean broadcast back to (B, 1, C)
        m = a.sum(axis=1).reshape(bsz, groups, cg).sum(axis=2) / n
        return np.repeat(m, cg, axis=1)[:, None, :]

    xc = x.value - group_mean(x.value)
    inv = 1.0 / np.sqrt(group_mean(xc * xc) + eps)
    xhat = xc * inv
    out = Var(xhat * gamma.value + beta.value)

    def back():
        g = out.grad
        gamma.accumulate((g * xhat).sum(axis=(0, 1)))
        beta.accumulate(g.sum(axis=(0, 1)))
        dxhat = g * gamma.value
        x.accumulate(inv * (dxhat - group_mean(dxhat) - xhat * group_mean(dxhat * xhat)))

    _record(tape, back)
    return out


def mish(tape: Tape | None, x: Var) -> Var:
    """``x * tanh(softplus(x))`` computed from a single exponential."""
    xv = x.value
    e = np.exp(np.minimum(xv, 20.0))
    n = e * (e + 2.0)
    th = n / (n + 2.0)
    out = Var(xv * th)

    def back():
        sig = e / (1.0 + e)
        x.accumulate(out.grad * (th + xv * (1.0 - th * th) * sig))

    _record(tape, back)
    return out


def add(tape: Tape | None, a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)

    def back():
        a.accumulate(_unbroadcast(out.grad, a.value.shape))
        b.accumulate(_unbroadcast(out.grad, b.value.shape))

    _record(tape, back)
    return out


def film(tape: Tape | None, x: Var, params: Var) -> Var:
    """Feature-wise affine modulation ``x * (1 + scale) + shift``.

    ``x`` is (B, L, C); ``params`` is (B, 2C) holding scales then shifts.
    """
    ch = x.value.shape[2]
    scale = params.value[:, None, :ch]
    shift = params.value[:, None, ch:]
    out = Var(x.value * (1.0 + scale) + shift)

    def back():
        g = out.grad
        params.accumulate(np.concatenate([(g * x.value).sum(axis=1), g.sum(axis=1)], axis=1))
        x.accumulate(g * (1.0 + scale))

    _record(tape, back)
    return out


def avg_pool2(tape: Tape | None, x: Var) -> Var:
    bsz, length, ch = x.value.shape
    out = Var(x.value.reshape(bsz, length // 2, 2, ch).mean(axis=2))

    def back():
        x.accumulate(np.repeat(out.grad, 2, axis=1) * 0.5)

    _record(tape, back)
    return out


def upsample2(tape: Tape | None, x: Var) -> Var:
    out = Var(np.repeat(x.value, 2, axis=1))

    def back():
        g = out.grad
        x.accumulate(g.reshape(g.shape[0], -1, 2, g.shape[2]).sum(axis=2))

    _record(tape, back)
    return out


def concat_channels(tape: Tape | None, a: Var, b: Var) -> Var:
    ca = a.value.shape[2]
    out = Var(np.concatenate([a.value, b.value], axis=2))

    def back():
        a.accumulate(out.grad[:, :, :ca])
        b.accumulate(out.grad[:, :, ca:])

    _record(tape, back)
    return out


def sum_squared_error(tape: Tape | None, pred: Var, target: np.ndarray) -> Var:
    """Batch mean of the per-sample squared error norm."""
    diff = pred.value - target
    bsz = diff.shape[0]
    out = Var(np.asarray((diff * diff).sum() / bsz, dtype=pred.value.dtype))

    def back():
        pred.accumulate(out.grad * 2.0 * diff / bsz)

    _record(tape, back)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Adam:
    """Adam on a flat parameter vector, updating it in place."""

    def __init__(self, size: int, lr: float = 2e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None, dtype=np.float64):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        if self.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > self.clip_norm:
                grad = grad * (self.clip_norm / norm)
        self.t += 1
        self.m *= self.b1
        self.m += (1.0 - self.b1) * grad
        self.v *= self.b2
        self.v += (1.0 - self.b2) * grad * grad
        mhat = self.m / (1.0 - self.b1 ** self.t)
        vhat = self.v / (1.0 - self.b2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m, "v": self.v, "t": self.t}

    def load_state_dict(self, state: dict) -> None:
        self.m[:] = state["m"]
        self.v[:] = state["v"]
        self.t = int(state["t"])
