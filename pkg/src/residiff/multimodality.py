"""Unimodality testing of residual samples.

The dip statistic follows Hartigan & Hartigan's greatest-convex-minorant /
least-concave-majorant cycling (algorithm AS 217), with the later
corrections to the distance formula and loop termination. p-values come
from a bootstrap against the uniform distribution.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

P_FLOOR = 1e-300
METHODS = ("fisher", "stouffer", "tippett")


@numba.njit(cache=True)
def _dip_sorted(xs):
    n = xs.shape[0]
    # 1-based work arrays, index 0 unused
    x = np.empty(n + 1)
    x[1:] = xs
    mn = np.zeros(n + 1, np.int64)
    mj = np.zeros(n + 1, np.int64)
    gcm = np.zeros(n + 1, np.int64)
    lcm = np.zeros(n + 1, np.int64)
    dip = 1.0
    if n < 2 or x[n] == x[1]:
        return dip / (2 * n)

    mn[1] = 1
    for j in range(2, n + 1):
        mn[j] = j - 1
        while True:
            mnj = mn[j]
            mnmnj = mn[mnj]
            if mnj == 1 or (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj):
                break
            mn[j] = mnmnj

    mj[n] = n
    for k in range(n - 1, 0, -1):
        mj[k] = k + 1
        while True:
            mjk = mj[k]
            mjmjk = mj[mjk]
            if mjk == n or (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk):
                break
            mj[k] = mjmjk

    low, high = 1, n
    while True:
        gcm[1] = high
        i = 1
        while gcm[i] > low:
            gcm[i + 1] = mn[gcm[i]]
            i += 1
        l_gcm = i
        ig = l_gcm
        ix = ig - 1

        lcm[1] = low
        i = 1
        while lcm[i] < high:
            lcm[i + 1] = mj[lcm[i]]
            i += 1
        l_lcm = i
        ih = l_lcm
        iv = 2

        d = 0.0
        if l_gcm != 2 or l_lcm != 2:
            while True:
                gcmix = gcm[ix]
                lcmiv = lcm[iv]
                if gcmix > lcmiv:
                    gcmi1 = gcm[ix + 1]
                    dx = (lcmiv - gcmi1 + 1) - (x[lcmiv] - x[gcmi1]) * (gcmix - gcmi1) / (x[gcmix] - x[gcmi1])
                    iv += 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv - 1
                else:
                    lcmiv1 = lcm[iv - 1]
                    dx = (x[gcmix] - x[lcmiv1]) * (lcmiv - lcmiv1) / (x[lcmiv] - x[lcmiv1]) - (gcmix - lcmiv1 - 1)
                    ix -= 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv
                if ix < 1:
                    ix = 1
                if iv > l_lcm:
                    iv = l_lcm
                if gcm[ix] == lcm[iv]:
                    break
        else:
            d = 1.0

        if d < dip:
            break

        dip_l = 0.0
        for j in range(ig, l_gcm):
            max_t = 1.0
            jb = gcm[j + 1]
            je = gcm[j]
            if je - jb > 1 and x[je] != x[jb]:
                c = (je - jb) / (x[je] - x[jb])
                for jj in range(jb, je + 1):
                    t = (jj - jb + 1) - (x[jj] - x[jb]) * c
                    if max_t < t:
                        max_t = t
            if dip_l < max_t:
                dip_l = max_t

        dip_u = 0.0
        for j in range(ih, l_lcm):
            max_t = 1.0
            jb = lcm[j]
            je = lcm[j + 1]
            if je - jb > 1 and x[je] != x[jb]:
                c = (je - jb) / (x[je] - x[jb])
                for jj in range(jb, je + 1):
                    t = (x[jj] - x[jb]) * c - (jj - jb - 1)
                    if max_t < t:
                        max_t = t
            if dip_u < max_t:
                dip_u = max_t

        dipnew = dip_u if dip_u > dip_l else dip_l
        if dip < dipnew:
            dip = dipnew
        # without this exit the cycle can repeat forever
        if low == gcm[ig] and high == lcm[ih]:
            break
        low = gcm[ig]
        high = lcm[ih]
    return dip / (2 * n)


@numba.njit(cache=True)
def _uniform_dips(n, count, seed):
    np.random.seed(seed)
    out = np.empty(count)
    for b in range(count):
        out[b] = _dip_sorted(np.sort(np.random.random(n)))
    return out


def dip_statistic(samples) -> float:
    """Dip of a scalar sample (sorted internally)."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size < 4:
        raise ValueError(f"dip test needs at least 4 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite samples")
    return float(_dip_sorted(x))


@lru_cache(maxsize=512)
def uniform_null(n: int, count: int = 2000, seed: int = 0) -> np.ndarray:
    """Sorted bootstrap dips of uniform samples of size ``n`` (cached)."""
    return np.sort(_uniform_dips(n, count, seed))


@dataclass(frozen=True)
class DipResult:
    dip: float
    p_value: float
    n: int
    bootstrap_count: int

    def to_dict(self) -> dict:
        return {"dip": self.dip, "p_value": self.p_value, "n": self.n, "bootstrap_count": self.bootstrap_count}


def dip_pvalue(samples, bootstrap_count: int = 2000, seed: int = 0) -> DipResult:
    """Fraction of uniform bootstrap dips at least as large as the observed one."""
    dip = dip_statistic(samples)
    n = int(np.asarray(samples).size)
    null = uniform_null(n, bootstrap_count, seed)
    # relative slack so ties with the floor value count as exceedances
    exceed = bootstrap_count - np.searchsorted(null, dip * (1 - 1e-12), side="left")
    return DipResult(dip, float(exceed / bootstrap_count), n, bootstrap_count)


@dataclass(frozen=True)
class CombinedP:
    method: str
    value: float
    n_inputs: int
    floored: bool = False

    def to_dict(self) -> dict:
        return {"method": self.method, "value": self.value, "n_inputs": self.n_inputs, "floored": self.floored}


def combine_pvalues(ps, method: str = "fisher") -> CombinedP:
    """Fisher, Stouffer or Tippett combination of independent p-values."""
    p = np.asarray(ps, dtype=float).ravel()
    if p.size == 0:
        raise ValueError("no p-values to combine")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("p-values must lie in [0, 1]")
    floored = bool(np.any(p < P_FLOOR))
    if floored:
        log.warning("p-values below %g floored", P_FLOOR)
    p = np.maximum(p, P_FLOOR)
    n = p.size
    if method == "fisher":
        val = stats.chi2.sf(-2.0 * np.sum(np.log(p)), 2 * n)
    elif method == "stouffer":
        z = stats.norm.isf(p)
        val = stats.norm.sf(np.sum(z) / np.sqrt(n))
    elif method == "tippett":
        # 1 - (1 - p_min)^n without cancellation for tiny p_min
        val = -np.expm1(n * np.log1p(-p.min())) if p.min() < 1 else 1.0
    else:
        raise ValueError(f"unknown method {method!r}")
    return CombinedP(method, float(np.clip(val, 0.0, 1.0)), n, floored)


# -- segmentation --------------------------------------------------------------------

def arc_fraction(p_d: np.ndarray) -> np.ndarray:
    """Cumulative arc length of a reference path scaled to [0, 1]."""
    seg = np.linalg.norm(np.diff(p_d, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return s / s[-1] if s[-1] > 0 else np.linspace(0.0, 1.0, len(s))


def segment_and_test(runs, n_segments: int = 100, bootstrap_count: int = 2000, seed: int = 0,
                     min_samples: int = 4) -> dict:
    """Dip tests of residual samples pooled per arc-length segment.

    ``runs`` is a sequence of ``(p_d, h)`` pairs (reference positions and
    residuals, both (T, 3)) from repeated flights of one reference.
    """
    if not runs:
        raise ValueError("no runs to analyze")
    pooled = [[] for _ in range(n_segments)]
    for p_d, h in runs:
        idx = np.minimum((arc_fraction(np.asarray(p_d)) * n_segments).astype(int), n_segments - 1)
        h = np.asarray(h)
        for b in range(n_segments):
            sel = h[idx == b]
            if len(sel):
                pooled[b].append(sel)
    dims = np.asarray(runs[0][1]).shape[1]
    segments, skipped = [], []
    per_dim = [[] for _ in range(dims)]
    for b, parts in enumerate(pooled):
        data = np.concatenate(parts) if parts else np.empty((0, dims))
        if len(data) < min_samples:
            skipped.append(b)
            continue
        row = {"segment": b, "n": len(data)}
        for d in range(dims):
            res = dip_pvalue(data[:, d], bootstrap_count, seed)
            row[f"dip_{d}"] = res.dip
            row[f"p_{d}"] = res.p_value
            per_dim[d].append(res.p_value)
        segments.append(row)
    if skipped:
        log.info("%d of %d segments skipped (fewer than %d samples)", len(skipped), n_segments, min_samples)
    combined = {m: [combine_pvalues(per_dim[d], m).value if per_dim[d] else float("nan") for d in range(dims)]
                for m in METHODS}
    sizes = [r["n"] for r in segments]
    return {"segments": segments, "skipped": skipped, "combined": combined,
            "low_n": bool(not sizes or np.median(sizes) < 20),
            "median_segment_size": float(np.median(sizes)) if sizes else 0.0}


def write_report(report: dict, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2)
    dims = len(next(iter(report["combined"].values())))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"dim_{d}" for d in range(dims)])
        for m in METHODS:
            w.writerow([m] + [repr(v) for v in report["combined"][m]])


def histogram2d_csv(path, a, b, bins: int = 50, density: bool = True) -> np.ndarray:
    """Write a 2-D histogram grid with its bin centres for external plotting."""
    hist, xe, ye = np.histogram2d(np.asarray(a), np.asarray(b), bins=bins, density=density)
    xc, yc = 0.5 * (xe[1:] + xe[:-1]), 0.5 * (ye[1:] + ye[:-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x\\y"] + [repr(float(v)) for v in yc])
        for i, x in enumerate(xc):
            w.writerow([repr(float(x))] + [repr(float(v)) for v in hist[i]])
    return hist
