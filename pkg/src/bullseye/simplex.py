"""Probability-simplex tools: Euclidean projection, the convex-combination
coefficient solver used by Convex Polytope, and coefficient entropy."""

from __future__ import annotations

import numpy as np

from bullseye.errors import InputError

SUM_TOL = 1e-9


def check_simplex(c, tol=SUM_TOL) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise InputError("simplex coefficients must be a non-empty vector")
    if np.any(c < 0) or abs(c.sum() - 1.0) > tol:
        raise InputError(f"not a probability vector (min {c.min():.3g}, sum {c.sum():.12g})")
    return c


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto {c : c >= 0, sum(c) = 1} by sort-and-threshold."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InputError("project_to_simplex needs a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise InputError("project_to_simplex got non-finite entries")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ranks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ranks > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    c = np.maximum(v - theta, 0.0)
    # renormalize away rounding so the sum invariant holds to machine precision
    return c / c.sum()


def combination_objective(target, poisons, c) -> float:
    """||target - sum_j c_j poisons[j]||^2."""
    r = np.asarray(target, dtype=np.float64) - np.asarray(c, dtype=np.float64) @ np.asarray(poisons, dtype=np.float64)
    return float(r @ r)


def optimize_coefficients(target_feat, poison_feats, max_steps=200, tolerance=1e-10, init=None) -> np.ndarray:
    """Minimize ||target - sum_j c_j p_j||^2 over the simplex.

    Projected gradient (forward-backward splitting) with step 1/L, L the top
    eigenvalue of the poison Gram matrix.  Starts from ``init`` (warm start)
    or uniform weights, whichever scores lower, so the result never does
    worse than uniform.  Stops when the objective changes by less than
    ``tolerance`` or after ``max_steps`` steps.
    """
    t = np.asarray(target_feat, dtype=np.float64).ravel()
    P = np.asarray(poison_feats, dtype=np.float64)
    if P.ndim == 1:
        P = P[None, :]
    P = P.reshape(P.shape[0], -1)
    k = P.shape[0]
    if k < 1:
        raise InputError("need at least one poison feature vector")
    if P.shape[1] != t.size:
        raise InputError(f"dimension mismatch: target has {t.size} features, poisons have {P.shape[1]}")
    if k == 1:
        return np.ones(1)

    uniform = np.full(k, 1.0 / k)
    gram = P @ P.T
    pt = P @ t
    tt = t @ t

    def half_obj(c):
        return 0.5 * (c @ gram @ c) - c @ pt + 0.5 * tt

    c = uniform
    f = half_obj(c)
    if init is not None:
        c0 = check_simplex(init, tol=1e-6)
        if c0.size != k:
            raise InputError(f"init has {c0.size} coefficients, expected {k}")
        f0 = half_obj(c0)
        if f0 < f:
            c, f = c0, f0

    lip = float(np.linalg.eigvalsh(gram)[-1])
    if lip <= 0.0:
        return c
    step = 1.0 / lip
    for _ in range(int(max_steps)):
        c_new = project_to_simplex(c - step * (gram @ c - pt))
        f_new = half_obj(c_new)
        done = abs(f - f_new) < tolerance
        if f_new <= f:
            c, f = c_new, f_new
        if done:
            break
    return c


def coefficient_entropy(c) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    c = check_simplex(c, tol=1e-6)
    nz = c[c > 0]
    return float(-(nz * np.log2(nz)).sum())
