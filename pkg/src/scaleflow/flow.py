"""Discrete dense correspondence by coarse-to-fine min-sum message passing.

The objective over integer flows ``w(p) = (u(p), v(p))`` is::

    E(w) = sum_p min(|fa(p) - fb(p + w(p))|_1, k)
         + sum_p nu * (|u(p)| + |v(p)|)
         + sum_{p~q} min(alpha |u(p) - u(q)|, d) + min(alpha |v(p) - v(q)|, d)

on a 4-connected grid. Every pixel carries a joint label ``(du, dv)`` in a
``(2r+1)^2`` window around a per-pixel centre (the upsampled coarser flow).
Because the smoothness term is a sum of truncated L1 terms in u and v, a
message is computed exactly with two 1-D distance transforms, so the cost is
linear in the number of labels. Messages are passed sequentially in raster
order and back, which makes a single sweep exact on chains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numba
import numpy as np
from scipy import ndimage

from .descriptor import DenseDescriptorField

# float64 messages below this many (pixel, label) entries, float32 above
_F64_LIMIT = 4_000_000


@dataclass(frozen=True)
class FlowParams:
    k: float = 2.0
    nu: float = 0.005
    alpha: Optional[float] = None  # default 2 * nu
    d: Optional[float] = None  # default 40 * alpha
    levels: int = 4
    radius: int = 5
    top_radius: Optional[int] = None  # search half-width on the coarsest level
    iterations: int = 60

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.nu)
        if self.d is None:
            object.__setattr__(self, "d", 40.0 * self.alpha)
        if self.top_radius is None:
            object.__setattr__(self, "top_radius", self.radius)
        for name in ("k", "nu", "alpha", "d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.radius < 1 or self.top_radius < 1:
            raise ValueError("search radius must be at least 1")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be at least 1")


@dataclass
class FlowField:
    u: np.ndarray  # (H, W) int
    v: np.ndarray
    energy: float = 0.0
    energy_trace: List[List[float]] = field(default_factory=list)

    @property
    def shape(self):
        return self.u.shape

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def as_array(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1).astype(np.float64)


def _as_array(f) -> np.ndarray:
    arr = f.descriptors if isinstance(f, DenseDescriptorField) else f
    return np.ascontiguousarray(arr, dtype=np.float32)


def data_cost(fa, fb, p, w, k: float) -> float:
    """Truncated L1 between ``fa`` at ``p=(x, y)`` and ``fb`` at ``p + w``."""
    a, b = _as_array(fa), _as_array(fb)
    x, y = p
    tx, ty = x + w[0], y + w[1]
    if not (0 <= ty < b.shape[0] and 0 <= tx < b.shape[1]):
        return float(k)
    dist = np.abs(a[y, x].astype(np.float64) - b[ty, tx].astype(np.float64)).sum()
    return float(min(dist, k))


def flow_energy(fa, fb, u: np.ndarray, v: np.ndarray, params: FlowParams) -> float:
    """Objective value of an integer flow, evaluated directly in float64."""
    a = _as_array(fa).astype(np.float64)
    b = _as_array(fb).astype(np.float64)
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ty, tx = ys + v, xs + u
    inside = (ty >= 0) & (ty < b.shape[0]) & (tx >= 0) & (tx < b.shape[1])
    data = np.full((h, w), float(params.k))
    l1 = np.abs(a[ys[inside], xs[inside]] - b[ty[inside], tx[inside]]).sum(axis=1)
    data[inside] = np.minimum(l1, params.k)
    total = data.sum() + params.nu * (np.abs(u).sum() + np.abs(v).sum())
    for comp in (u, v):
        comp = comp.astype(np.float64)
        total += np.minimum(params.alpha * np.abs(np.diff(comp, axis=1)), params.d).sum()
        total += np.minimum(params.alpha * np.abs(np.diff(comp, axis=0)), params.d).sum()
    return float(total)


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _data_costs(fa, fb, cu, cv, r, k, nu, out):
    h, w, c = fa.shape
    hb, wb = fb.shape[0], fb.shape[1]
    n = 2 * r + 1
    for y in range(h):
        for x in range(w):
            for j in range(n):
                dv = cv[y, x] + j - r
                ty = y + dv
                for i in range(n):
                    du = cu[y, x] + i - r
                    tx = x + du
                    cost = k
                    if 0 <= ty < hb and 0 <= tx < wb:
                        s = 0.0
                        for ch in range(c):
                            s += abs(fa[y, x, ch] - fb[ty, tx, ch])
                            if s >= k:
                                break
                        if s < k:
                            cost = s
                    out[y, x, j * n + i] = cost + nu * (abs(du) + abs(dv))


@numba.njit(cache=True)
def _dt_line(f, n, alpha):
    for i in range(1, n):
        if f[i - 1] + alpha < f[i]:
            f[i] = f[i - 1] + alpha
    for i in range(n - 2, -1, -1):
        if f[i + 1] + alpha < f[i]:
            f[i] = f[i + 1] + alpha


@numba.njit(cache=True)
def _shifted(f, n, t, alpha):
    if t < 0:
        return f[0] - alpha * t
    if t >= n:
        return f[n - 1] + alpha * (t - n + 1)
    return f[t]


@numba.njit(cache=True)
def _send(h, n, su, sv, alpha, d, out, buf, f):
    """out(lq) = min_lp h(lp) + V(lp, lq), normalised to min 0; returns max change."""
    for j in range(n):
        base = j * n
        hmin = np.inf
        for i in range(n):
            f[i] = h[base + i]
            if f[i] < hmin:
                hmin = f[i]
        _dt_line(f, n, alpha)
        cap = hmin + d
        for iq in range(n):
            val = _shifted(f, n, iq - su, alpha)
            buf[base + iq] = val if val < cap else cap
    omin = np.inf
    for iq in range(n):
        gmin = np.inf
        for j in range(n):
            f[j] = buf[j * n + iq]
            if f[j] < gmin:
                gmin = f[j]
        _dt_line(f, n, alpha)
        cap = gmin + d
        for jq in range(n):
            val = _shifted(f, n, jq - sv, alpha)
            if val > cap:
                val = cap
            f[n + jq] = val
        for jq in range(n):
            out_val = f[n + jq]
            buf[n * n + jq * n + iq] = out_val
            if out_val < omin:
                omin = out_val
    change = 0.0
    L = n * n
    for l in range(L):
        val = buf[L + l] - omin
        diff = abs(val - out[l])
        if diff > change:
            change = diff
        out[l] = val
    return change


@numba.njit(cache=True)
def _pair_cost(cu_p, cv_p, lp, cu_q, cv_q, lq, n, r, alpha, d):
    up = cu_p + lp % n - r
    vp = cv_p + lp // n - r
    uq = cu_q + lq % n - r
    vq = cv_q + lq // n - r
    a = alpha * abs(up - uq)
    b = alpha * abs(vp - vq)
    return (a if a < d else d) + (b if b < d else d)


@numba.njit(cache=True)
def _decode(D, mL, mR, mU, mD, cu, cv, r, alpha, d, labels):
    """Raster-order decoding conditioned on already-labelled neighbours."""
    h, w, L = D.shape
    n = 2 * r + 1
    energy = 0.0
    for y in range(h):
        for x in range(w):
            best = np.inf
            best_l = 0
            for l in range(L):
                c = D[y, x, l] + mR[y, x, l] + mD[y, x, l]
                if x > 0:
                    c += _pair_cost(cu[y, x], cv[y, x], l, cu[y, x - 1], cv[y, x - 1],
                                    labels[y, x - 1], n, r, alpha, d)
                if y > 0:
                    c += _pair_cost(cu[y, x], cv[y, x], l, cu[y - 1, x], cv[y - 1, x],
                                    labels[y - 1, x], n, r, alpha, d)
                if c < best:
                    best = c
                    best_l = l
            labels[y, x] = best_l
    for y in range(h):
        for x in range(w):
            l = labels[y, x]
            energy += D[y, x, l]
            if x > 0:
                energy += _pair_cost(cu[y, x], cv[y, x], l, cu[y, x - 1], cv[y, x - 1],
                                     labels[y, x - 1], n, r, alpha, d)
            if y > 0:
                energy += _pair_cost(cu[y, x], cv[y, x], l, cu[y - 1, x], cv[y - 1, x],
                                     labels[y - 1, x], n, r, alpha, d)
    return energy


@numba.njit(cache=True)
def _message_passing(D, cu, cv, r, alpha, d, iterations, best_labels, trace):
    h, w, L = D.shape
    n = 2 * r + 1
    mL = np.zeros_like(D)
    mR = np.zeros_like(D)
    mU = np.zeros_like(D)
    mD = np.zeros_like(D)
    hbuf = np.empty(L, dtype=D.dtype)
    hm = np.empty(L, dtype=D.dtype)
    buf = np.empty(2 * L, dtype=D.dtype)
    f = np.empty(2 * n, dtype=D.dtype)
    labels = np.zeros((h, w), dtype=np.int64)
    best = np.inf
    done = 0
    for it in range(iterations):
        change = 0.0
        for y in range(h):
            for x in range(w):
                for l in range(L):
                    hbuf[l] = D[y, x, l] + mL[y, x, l] + mR[y, x, l] + mU[y, x, l] + mD[y, x, l]
                if x + 1 < w:
                    for l in range(L):
                        hm[l] = hbuf[l] - mR[y, x, l]
                    c = _send(hm, n, cu[y, x] - cu[y, x + 1], cv[y, x] - cv[y, x + 1],
                              alpha, d, mL[y, x + 1], buf, f)
                    change = max(change, c)
                if y + 1 < h:
                    for l in range(L):
                        hm[l] = hbuf[l] - mD[y, x, l]
                    c = _send(hm, n, cu[y, x] - cu[y + 1, x], cv[y, x] - cv[y + 1, x],
                              alpha, d, mU[y + 1, x], buf, f)
                    change = max(change, c)
        for y in range(h - 1, -1, -1):
            for x in range(w - 1, -1, -1):
                for l in range(L):
                    hbuf[l] = D[y, x, l] + mL[y, x, l] + mR[y, x, l] + mU[y, x, l] + mD[y, x, l]
                if x > 0:
                    for l in range(L):
                        hm[l] = hbuf[l] - mL[y, x, l]
                    c = _send(hm, n, cu[y, x] - cu[y, x - 1], cv[y, x] - cv[y, x - 1],
                              alpha, d, mR[y, x - 1], buf, f)
                    change = max(change, c)
                if y > 0:
                    for l in range(L):
                        hm[l] = hbuf[l] - mU[y, x, l]
                    c = _send(hm, n, cu[y, x] - cu[y - 1, x], cv[y, x] - cv[y - 1, x],
                              alpha, d, mD[y - 1, x], buf, f)
                    change = max(change, c)
        e = _decode(D, mL, mR, mU, mD, cu, cv, r, alpha, d, labels)
        if e < best:
            best = e
            best_labels[:, :] = labels
        trace[it] = best
        done = it + 1
        if change <= 1e-9:
            break
    return done


# --------------------------------------------------------------------------


FieldLike = Union[DenseDescriptorField, np.ndarray]


def pool_pyramid(f: FieldLike, levels: int) -> List[np.ndarray]:
    """Coarser descriptor fields by Gaussian smoothing and 2x decimation."""
    pyr = [_as_array(f)]
    for _ in range(levels - 1):
        prev = pyr[-1]
        smooth = ndimage.gaussian_filter(prev, sigma=(1.0, 1.0, 0.0), mode="nearest")
        pyr.append(np.ascontiguousarray(smooth[::2, ::2], dtype=np.float32))
    return pyr


def _pyramid(f, levels: int) -> List[np.ndarray]:
    if isinstance(f, (list, tuple)):
        if len(f) != levels:
            raise ValueError(f"descriptor pyramid has {len(f)} levels, params ask for {levels}")
        return [_as_array(x) for x in f]
    return pool_pyramid(f, levels)


def _solve_level(fa, fb, cu, cv, r, params: FlowParams, iterations: int):
    h, w = fa.shape[:2]
    n = 2 * r + 1
    L = n * n
    dtype = np.float64 if h * w * L <= _F64_LIMIT else np.float32
    D = np.empty((h, w, L), dtype=dtype)
    _data_costs(fa, fb, cu, cv, r, float(params.k), float(params.nu), D)
    labels = np.zeros((h, w), dtype=np.int64)
    trace = np.zeros(iterations)
    done = _message_passing(D, cu, cv, r, float(params.alpha), float(params.d), iterations,
                            labels, trace)
    u = cu + labels % n - r
    v = cv + labels // n - r
    return u.astype(np.int64), v.astype(np.int64), [float(t) for t in trace[:done]]


def estimate_flow(fa, fb, params: FlowParams = FlowParams()) -> FlowField:
    """Integer flow from ``fa`` to ``fb`` minimising the truncated-L1 objective.

    ``fa``/``fb`` are descriptor fields (pooled into a pyramid when
    ``params.levels > 1``) or explicit pyramids given finest first.
    """
    pa = _pyramid(fa, params.levels)
    pb = _pyramid(fb, params.levels)
    for a, b in zip(pa, pb):
        if a.shape != b.shape:
            raise ValueError(f"descriptor fields differ in shape: {a.shape} vs {b.shape}")
    traces = []
    u = v = None
    for lvl in range(params.levels - 1, -1, -1):
        a, b = pa[lvl], pb[lvl]
        h, w = a.shape[:2]
        if u is None:
            cu = np.zeros((h, w), dtype=np.int64)
            cv = np.zeros((h, w), dtype=np.int64)
            r = params.top_radius
        else:
            ys = np.minimum(np.arange(h) // 2, u.shape[0] - 1)
            xs = np.minimum(np.arange(w) // 2, u.shape[1] - 1)
            cu = np.ascontiguousarray(2 * u[np.ix_(ys, xs)])
            cv = np.ascontiguousarray(2 * v[np.ix_(ys, xs)])
            r = params.radius
        iters = params.iterations
        u, v, trace = _solve_level(a, b, cu, cv, r, params, iters)
        traces.append(trace)
    energy = flow_energy(pa[0], pb[0], u, v, params)
    return FlowField(u, v, energy, traces)


def zero_flow(shape) -> FlowField:
    return FlowField(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64))
