"""Constrained sparse least-squares for per-pixel label propagation.

Stencils are ``(H, W, 3, 3)`` arrays: ``stencils[y, x, 1 + dy, 1 + dx]`` is the
affinity of pixel ``(y, x)`` to its neighbour ``(y + dy, x + dx)``; the
centre entry is zero and each stencil sums to one.

Each free pixel ``p`` contributes the equation
``value(p) - sum_q w_pq value(q) = 0``; seeded pixels are fixed and moved to
the right-hand side. Rows are scaled by the neighbour count, which turns the
uniform-affinity system into a symmetric graph Laplacian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


class SolverError(RuntimeError):
    pass


@dataclass
class SparseSystem:
    shape: Tuple[int, int]
    matrix: sp.csr_matrix
    rhs: np.ndarray
    free_index: np.ndarray  # flat pixel index of each unknown
    fixed_values: np.ndarray  # flat; nan where free
    symmetric: bool

    @property
    def n(self) -> int:
        return self.free_index.size


@dataclass
class SolveResult:
    values: np.ndarray  # (H, W)
    residual: float
    iterations: int
    method: str
    info: Dict[str, object] = field(default_factory=dict)


def _seed_array(shape, seeds: Iterable) -> np.ndarray:
    h, w = shape
    fixed = np.full(h * w, np.nan)
    count = 0
    for (x, y), value in seeds:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"seed ({x}, {y}) outside {w}x{h} image")
        fixed[y * w + x] = value
        count += 1
    if count == 0:
        raise ValueError("at least one seed is required")
    return fixed


def assemble(shape: Tuple[int, int], stencils: np.ndarray, seeds: Iterable) -> SparseSystem:
    """Build the reduced system for the free pixels.

    ``seeds`` is an iterable of ``((x, y), value)``.
    """
    h, w = shape
    stencils = np.asarray(stencils, dtype=np.float64)
    if stencils.shape != (h, w, 3, 3):
        raise ValueError(f"stencils must have shape {(h, w, 3, 3)}, got {stencils.shape}")
    sums = stencils.sum(axis=(2, 3))
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ValueError("every stencil must sum to one")
    fixed = _seed_array(shape, seeds)
    is_free = np.isnan(fixed)
    free_index = np.flatnonzero(is_free)
    n = free_index.size
    unknown = np.full(h * w, -1, dtype=np.int64)
    unknown[free_index] = np.arange(n)

    ys, xs = np.divmod(free_index, w)
    nnz_neighbours = np.zeros(n)
    for dy, dx in _OFFSETS:
        wts = stencils[ys, xs, 1 + dy, 1 + dx]
        nnz_neighbours += wts != 0
    scale = np.maximum(nnz_neighbours, 1.0)

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [scale]
    rhs = np.zeros(n)
    for dy, dx in _OFFSETS:
        wts = stencils[ys, xs, 1 + dy, 1 + dx]
        qy, qx = ys + dy, xs + dx
        ok = (wts != 0) & (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        if np.any((wts != 0) & ~ok):
            raise ValueError("stencil weight points outside the image")
        q = qy[ok] * w + qx[ok]
        a = -wts[ok] * scale[ok]
        to_free = unknown[q] >= 0
        sel = np.flatnonzero(ok)
        rows.append(sel[to_free])
        cols.append(unknown[q[to_free]])
        vals.append(a[to_free])
        np.add.at(rhs, sel[~to_free], -a[~to_free] * fixed[q[~to_free]])
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    matrix.sum_duplicates()
    symmetric = n == 0 or abs(matrix - matrix.T).max() <= 1e-10
    return SparseSystem((h, w), matrix, rhs, free_index, fixed, bool(symmetric))


def _fill(sys: SparseSystem, x: np.ndarray) -> np.ndarray:
    out = sys.fixed_values.copy()
    out[sys.free_index] = x
    return out.reshape(sys.shape)


def _pcg(A, b, x0, tol, max_iter):
    """Jacobi-preconditioned CG. Returns (x, rel_residual, iters, indefinite)."""
    inv_diag = 1.0 / A.diagonal()
    x = x0.copy()
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        bnorm = 1.0
    rel = np.linalg.norm(r) / bnorm
    if rel < tol:
        return x, rel, 0, False
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        curv = p @ Ap
        if not curv > 0:
            return x, rel, it, True
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        if not math.isfinite(rel):
            raise SolverError("conjugate gradient diverged (non-finite residual)")
        if rel < tol:
            return x, rel, it, False
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, rel, max_iter, False


def _direct(sys: SparseSystem):
    try:
        x = splu(sys.matrix.tocsc()).solve(sys.rhs)
    except RuntimeError as exc:
        raise SolverError(f"singular propagation system: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("direct solve produced non-finite values")
    bnorm = np.linalg.norm(sys.rhs) or 1.0
    return x, float(np.linalg.norm(sys.rhs - sys.matrix @ x) / bnorm)


def default_max_iter(n: int) -> int:
    return max(1000, int(10 * math.sqrt(max(n, 1))))


def solve(sys: SparseSystem, tol: float = 1e-6, max_iter: Optional[int] = None,
          method: str = "auto") -> SolveResult:
    """Solve the reduced system and scatter back to a full (H, W) array.

    ``method`` is ``"cg"``, ``"direct"`` or ``"auto"``: CG for symmetric
    systems, sparse LU otherwise or when CG meets non-positive curvature.
    Forcing ``"cg"`` on a non-symmetric system runs CG on the normal
    equations. Seeded pixels carry their constraint values exactly.
    """
    if sys.n == 0:
        return SolveResult(_fill(sys, np.empty(0)), 0.0, 0, "none")
    if method not in ("auto", "cg", "direct"):
        raise ValueError(f"unknown method {method!r}")
    if max_iter is None:
        max_iter = default_max_iter(sys.n)
    info: Dict[str, object] = {"symmetric": sys.symmetric}
    use_cg = method == "cg" or (method == "auto" and sys.symmetric)
    if use_cg:
        seeds = sys.fixed_values[~np.isnan(sys.fixed_values)]
        x0 = np.full(sys.n, seeds.mean())
        A, b = sys.matrix, sys.rhs
        if not sys.symmetric:
            A, b = (A.T @ A).tocsr(), A.T @ b
            info["normal_equations"] = True
        x, rel, iters, indefinite = _pcg(A, b, x0, tol, max_iter)
        if not sys.symmetric:
            rel = float(np.linalg.norm(sys.rhs - sys.matrix @ x) / (np.linalg.norm(sys.rhs) or 1.0))
        if not indefinite:
            info["converged"] = bool(rel < tol)
            return SolveResult(_fill(sys, x), float(rel), iters, "cg", info)
        info["indefinite"] = True
    x, rel = _direct(sys)
    return SolveResult(_fill(sys, x), rel, 1, "direct", info)


def quadratic_cost(values: np.ndarray, stencils: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Sum over pixels of ``(value(p) - sum_q w_pq value(q))^2``.

    ``mask`` restricts the sum (e.g. to free pixels).
    """
    h, w = values.shape
    padded = np.pad(values, 1)
    avg = np.zeros_like(values)
    for dy, dx in _OFFSETS:
        avg += stencils[:, :, 1 + dy, 1 + dx] * padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    res = values - avg
    if mask is not None:
        res = res[mask]
    return float(np.sum(res ** 2))
