"""Residual extraction, sequence windows, normalization and dataset files.

A :class:`FlightLog` holds one flight sampled at the control rate. Index
``t`` refers to the control interval starting at time ``t``: ``p[t]`` and
``v[t]`` are measured at its start, ``u[t]`` is the force held over it and
``acc[t]`` is the acceleration measured over it. The residual of interval
``t`` is therefore ``u[t] - m_bar * acc[t]``.

What the estimator may condition on at time ``t`` is only what has been
measured by then: position and velocity now, the acceleration of the
previous interval and the previous command. :func:`sensory_tuples` builds
exactly that, and both training data and the closed loop go through it.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, filtfilt

log = logging.getLogger(__name__)

SCHEMA = "residiff.dataset/1"
ZETA_DIM = 9
U_DIM = 3
H_DIM = 3


def compute_residual(u, p_ddot, m_bar: float) -> np.ndarray:
    """``u - m_bar * p_ddot`` for single vectors or stacked rows."""
    if m_bar <= 0:
        raise ValueError("nominal mass must be positive")
    u = np.asarray(u, dtype=float)
    p_ddot = np.asarray(p_ddot, dtype=float)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(p_ddot))):
        raise ValueError("non-finite input to compute_residual")
    return u - m_bar * p_ddot


@dataclass
class FlightLog:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    acc: np.ndarray
    u: np.ndarray
    # simulator ground truth, when known
    h_true: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for key in ("p", "v", "acc", "u"):
            arr = np.asarray(getattr(self, key), dtype=float)
            if arr.shape != (n, 3):
                raise ValueError(f"{key} has shape {arr.shape}, expected ({n}, 3)")
            setattr(self, key, arr)

    def __len__(self) -> int:
        return len(self.t)


def sensory_tuples(p, v, acc_prev, u_prev) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(p, v, acc_prev)`` into zeta rows and pass ``u_prev`` through."""
    zeta = np.concatenate([np.atleast_2d(p), np.atleast_2d(v), np.atleast_2d(acc_prev)], axis=-1)
    return zeta, np.atleast_2d(np.asarray(u_prev, dtype=float))


def shift_one(x: np.ndarray) -> np.ndarray:
    """Delay rows by one step, filling the first with zeros."""
    out = np.zeros_like(x)
    out[1:] = x[:-1]
    return out


@dataclass
class SequenceDataset:
    """Windows of (zeta, u_prev, residual), each of shape (N, H_seq, dim)."""

    zeta: np.ndarray
    u: np.ndarray
    h: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.h.shape[0]

    @property
    def horizon(self) -> int:
        return self.h.shape[1]

    def condition(self) -> np.ndarray:
        """First-step condition ``zeta_0 ++ u_0`` per record, shape (N, 12)."""
        return np.concatenate([self.zeta[:, 0], self.u[:, 0]], axis=1)

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.zeta[idx], self.u[idx], self.h[idx], dict(self.meta))

    @staticmethod
    def concat(parts: list["SequenceDataset"]) -> "SequenceDataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        return SequenceDataset(np.concatenate([d.zeta for d in parts]),
                               np.concatenate([d.u for d in parts]),
                               np.concatenate([d.h for d in parts]),
                               {"sources": [d.meta for d in parts]})


def build_sequences(flight: FlightLog, horizon: int = 16, stride: int = 1,
                    m_bar: float = 1.0) -> SequenceDataset:
    """Overlapping windows of length ``horizon`` starting every ``stride`` steps."""
    T = len(flight)
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be >= 1")
    if T < horizon:
        raise ValueError(f"log {flight.name!r} has {T} steps, fewer than horizon {horizon}")
    zeta, u_prev = sensory_tuples(flight.p, flight.v, shift_one(flight.acc), shift_one(flight.u))
    h = compute_residual(flight.u, flight.acc, m_bar)
    starts = np.arange(0, T - horizon + 1, stride)
    win = starts[:, None] + np.arange(horizon)[None, :]
    return SequenceDataset(zeta[win], u_prev[win], h[win],
                           {"log": flight.name, "horizon": horizon, "stride": stride,
                            "m_bar": m_bar, **flight.meta})


@dataclass
class Normalizer:
    """Per-dimension min-max map to [-1, 1] for zeta, u and the residual.

    Dimensions whose training range is empty pass through unscaled and are
    listed in ``constant``.
    """

    lo: dict
    hi: dict
    constant: dict = field(default_factory=dict)
    scheme: str = "minmax"

    @classmethod
    def fit(cls, ds: SequenceDataset) -> "Normalizer":
        if len(ds) == 0:
            raise ValueError("cannot fit a normalizer on an empty dataset")
        lo, hi, const = {}, {}, {}
        for key in ("zeta", "u", "h"):
            arr = getattr(ds, key).reshape(-1, getattr(ds, key).shape[-1])
            lo[key] = arr.min(axis=0)
            hi[key] = arr.max(axis=0)
            flat = np.flatnonzero(hi[key] <= lo[key])
            const[key] = flat.tolist()
            if len(flat):
                log.info("normalizer: %s dims %s are constant, passed through", key, flat.tolist())
        return cls(lo, hi, const)

    def _affine(self, key):
        lo, hi = self.lo[key], self.hi[key]
        span = hi - lo
        flat = span <= 0
        scale = np.where(flat, 1.0, 2.0 / np.where(flat, 1.0, span))
        offset = np.where(flat, 0.0, lo)
        shift = np.where(flat, 0.0, -1.0)
        return scale, offset, shift

    def apply(self, key: str, x) -> np.ndarray:
        scale, offset, shift = self._affine(key)
        return (np.asarray(x, dtype=float) - offset) * scale + shift

    def invert(self, key: str, y) -> np.ndarray:
        scale, offset, shift = self._affine(key)
        return (np.asarray(y, dtype=float) - shift) / scale + offset

    def condition(self, zeta, u_prev) -> np.ndarray:
        """Normalized 12-dim condition rows from raw zeta and u_prev."""
        return np.concatenate([self.apply("zeta", np.atleast_2d(zeta)),
                               self.apply("u", np.atleast_2d(u_prev))], axis=1)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme,
                "lo": {k: v.tolist() for k, v in self.lo.items()},
                "hi": {k: v.tolist() for k, v in self.hi.items()},
                "constant": self.constant}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls({k: np.array(v) for k, v in d["lo"].items()},
                   {k: np.array(v) for k, v in d["hi"].items()},
                   d.get("constant", {}), d.get("scheme", "minmax"))


def save_dataset(path, ds: SequenceDataset, normalizer: Normalizer | None = None,
                 config: dict | None = None) -> None:
    header = {"schema": SCHEMA, "config": config or {}, "meta": ds.meta,
              "normalizer": normalizer.to_dict() if normalizer else None}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, default=str)),
                 zeta=ds.zeta, u=ds.u, h=ds.h)


def load_dataset(path) -> tuple[SequenceDataset, Normalizer | None, dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported dataset schema {header.get('schema')!r}")
        ds = SequenceDataset(z["zeta"], z["u"], z["h"], header.get("meta", {}))
    norm = Normalizer.from_dict(header["normalizer"]) if header.get("normalizer") else None
    return ds, norm, header


# -- external logs -------------------------------------------------------------

LOG_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "ux", "uy", "uz"]
ACC_COLUMNS = ["ax", "ay", "az"]


def estimate_acceleration(t: np.ndarray, v: np.ndarray, cutoff_hz: float | None = 10.0) -> np.ndarray:
    """Central differences of velocity, optionally low-passed (zero phase)."""
    dt = np.diff(t)
    if np.any(dt <= 0):
        raise ValueError("time stamps must be strictly increasing")
    acc = np.gradient(v, t, axis=0)
    if cutoff_hz:
        rate = 1.0 / float(np.median(dt))
        if cutoff_hz >= 0.5 * rate:
            log.warning("cutoff %.1f Hz at or above Nyquist for %.1f Hz data, not filtering", cutoff_hz, rate)
        elif len(t) > 15:
            b, a = butter(2, cutoff_hz / (0.5 * rate))
            acc = filtfilt(b, a, acc, axis=0)
    return acc


def import_flight_csv(path, cutoff_hz: float | None = 10.0, name: str = "") -> FlightLog:
    """Read an external flight log.

    Required columns: ``t, px, py, pz, vx, vy, vz, ux, uy, uz`` (SI units,
    world frame, ``u`` the commanded force). If ``ax, ay, az`` are absent the
    acceleration is estimated from velocity.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in LOG_COLUMNS if c not in cols]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = list(reader)
    if len(rows) < 3:
        raise ValueError(f"{path}: need at least 3 rows, got {len(rows)}")
    num = lambda names: np.array([[float(r[c]) for c in names] for r in rows])  # noqa: E731
    t = num(["t"])[:, 0]
    p = num(LOG_COLUMNS[1:4])
    v = num(LOG_COLUMNS[4:7])
    u = num(LOG_COLUMNS[7:10])
    if all(c in cols for c in ACC_COLUMNS):
        acc = num(ACC_COLUMNS)
    else:
        acc = estimate_acceleration(t, v, cutoff_hz)
    return FlightLog(t, p, v, acc, u, name=name or str(path))
