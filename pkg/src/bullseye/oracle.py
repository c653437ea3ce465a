"""Brute-force geometry used to check the optimizers.

Nothing here imports ``bullseye.simplex`` or ``bullseye.attacks``: hull
membership is decided by a small dense Phase-I simplex method, and the
simplex minimum by enumerating a lattice of coefficient vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from bullseye.errors import InputError, OracleScopeError

MAX_GRID_K = 4


@dataclass(frozen=True)
class HullQuery:
    target: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64).ravel()
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim == 1:
            v = v[None, :]
        if v.shape[0] < 1:
            raise InputError("a hull query needs at least one vertex")
        if v.shape[1] != t.size:
            raise InputError(f"dimension mismatch: target {t.size}, vertices {v.shape[1]}")
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "vertices", v)


def _phase_one(A, b, tol=1e-12, max_pivots=10_000):
    """Minimize the total artificial slack for A x = b, x >= 0 (Bland's rule).

    Returns (infeasibility, x).
    """
    m, n = A.shape
    flip = np.where(b < 0, -1.0, 1.0)
    A = A * flip[:, None]
    b = b * flip
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -A.sum(axis=0)
    T[m, -1] = -b.sum()
    basis = list(range(n, n + m))
    for _ in range(max_pivots):
        entering = np.nonzero(T[m, :n + m] < -tol)[0]
        if entering.size == 0:
            break
        j = int(entering[0])
        col = T[:m, j]
        rows = np.nonzero(col > tol)[0]
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        tied = rows[ratios <= best + tol]
        r = int(min(tied, key=lambda i: basis[i]))
        T[r] /= T[r, j]
        for i in range(m + 1):
            if i != r and T[i, j] != 0.0:
                T[i] -= T[i, j] * T[r]
        basis[r] = j
    x = np.zeros(n + m)
    x[basis] = T[:m, -1]
    return -T[m, -1], x[:n]


def in_convex_hull(q: HullQuery, tol=1e-8):
    """Is ``q.target`` a convex combination of ``q.vertices``?

    Returns ``(inside, witness)``; the witness is a probability vector with
    ``witness @ vertices == target`` (to ``tol``) when inside, else None.
    """
    V, t = q.vertices, q.target
    A = np.vstack([V.T, np.ones((1, V.shape[0]))])
    b = np.concatenate([t, [1.0]])
    scale = max(1.0, float(np.abs(A).max()), float(np.abs(b).max()))
    infeas, c = _phase_one(A / scale, b / scale)
    if infeas * scale > tol:
        return False, None
    c = np.clip(c, 0.0, None)
    c = c / c.sum()
    if np.abs(c @ V - t).max() > tol * scale * 10:
        return False, None
    return True, c


def simplex_grid(k: int, resolution: int) -> np.ndarray:
    """All vectors with entries in {0, 1/r, ..., 1} summing to 1 (stars and bars)."""
    rows = np.empty((comb(resolution + k - 1, k - 1), k))
    for n, bars in enumerate(itertools.combinations(range(resolution + k - 1), k - 1)):
        edges = (-1,) + bars + (resolution + k - 1,)
        rows[n] = [edges[i + 1] - edges[i] - 1 for i in range(k)]
    return rows / resolution


def exhaustive_simplex_min(target, vertices, grid_resolution=100):
    """Smallest ||target - c @ vertices||^2 over the resolution-r simplex lattice."""
    q = HullQuery(target, vertices)
    k = q.vertices.shape[0]
    if k > MAX_GRID_K:
        raise OracleScopeError(f"grid enumeration is limited to k <= {MAX_GRID_K}, got k={k}")
    if grid_resolution < 1:
        raise InputError("grid_resolution must be >= 1")
    grid = simplex_grid(k, int(grid_resolution))
    resid = q.target[None, :] - grid @ q.vertices
    values = np.einsum("ij,ij->i", resid, resid)
    best = int(np.argmin(values))
    return float(values[best]), grid[best]


def facet_heights(vertices) -> np.ndarray:
    """Distance from each vertex of a d-simplex to the hyperplane of its opposite facet."""
    V = np.asarray(vertices, dtype=np.float64)
    k, d = V.shape
    if k != d + 1:
        raise OracleScopeError(f"need a full-dimensional simplex (d+1 vertices), got {k} in {d}-D")
    heights = np.empty(k)
    for j in range(k):
        others = np.delete(V, j, axis=0)
        basis = (others[1:] - others[0]).T
        # project vertex j onto the facet's affine hull by least squares
        coef, *_ = np.linalg.lstsq(basis, V[j] - others[0], rcond=None)
        heights[j] = np.linalg.norm(V[j] - others[0] - basis @ coef)
    return heights


def boundary_distance(coefficients, vertices) -> float:
    """Distance from the point ``c @ V`` (c barycentric, inside) to the simplex boundary."""
    c = np.asarray(coefficients, dtype=np.float64)
    return float(np.min(c * facet_heights(vertices)))
