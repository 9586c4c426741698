"""Simplex geometry on measurement vectors: barycentric coordinates, hull tests,
facet crossing, and a Caratheodory reduction used to rebuild degenerate sets.

Point sets are passed as arrays of shape (k, d), one vertex per row.
"""
from __future__ import annotations

import enum
from typing import NamedTuple, Optional

import numpy as np

DEFAULT_TOL = 1e-9
MAX_CONDITION = 1e12


class GeometryError(RuntimeError):
    """A geometric precondition failed or a computation became numerically unreliable."""


class AffinelyDependentError(GeometryError):
    pass


class HullKind(enum.Enum):
    OUTSIDE_AFFINE = "outside_affine"
    IN_CONVEX = "in_convex"
    IN_AFFINE_OUTSIDE_CONVEX = "in_affine_outside_convex"


class HullStatus(NamedTuple):
    kind: HullKind
    alpha: Optional[np.ndarray] = None


def _scale(points: np.ndarray, x: Optional[np.ndarray] = None) -> float:
    norms = np.linalg.norm(points, axis=1)
    top = float(norms.max()) if norms.size else 0.0
    if x is not None:
        top = max(top, float(np.linalg.norm(x)))
    return max(1.0, top)


def _augmented(points: np.ndarray) -> np.ndarray:
    return np.vstack([points.T, np.ones(points.shape[0])])


def affine_rank(points, tol: float = DEFAULT_TOL) -> int:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        return 0
    sv = np.linalg.svd(_augmented(points), compute_uv=False)
    return int(np.sum(sv > tol * _scale(points)))


def is_affinely_independent(points, tol: float = DEFAULT_TOL) -> bool:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return affine_rank(points, tol) == points.shape[0]


def simplex_condition(points) -> float:
    """Condition number of the vertex matrix augmented with a row of ones."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    sv = np.linalg.svd(_augmented(points), compute_uv=False)
    return float(np.inf) if sv[-1] == 0 else float(sv[0] / sv[-1])


def barycentric_coordinates(points, x, tol: float = DEFAULT_TOL) -> Optional[np.ndarray]:
    """Weights ``alpha`` with ``sum(alpha) == 1`` and ``points.T @ alpha == x``.

    Returns ``None`` when ``x`` is not in the affine hull of ``points`` (residual
    above ``tol`` relative to the point scale).  Coordinates can be negative.

    Raises
    ------
    AffinelyDependentError
        If ``points`` are affinely dependent.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x = np.asarray(x, dtype=float)
    if points.shape[0] == 0:
        raise GeometryError("empty vertex set")
    if points.shape[1] != x.shape[0]:
        raise GeometryError("point dimension mismatch")
    M = _augmented(points)
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    scale = _scale(points, x)
    if np.sum(sv > tol * _scale(points)) < points.shape[0]:
        raise AffinelyDependentError(f"{points.shape[0]} vertices are affinely dependent")
    rhs = np.r_[x, 1.0]
    alpha = Vt.T @ ((U.T @ rhs) / sv)
    if np.linalg.norm(M @ alpha - rhs) > tol * scale:
        return None
    return alpha


def hull_status(points, x, tol: float = DEFAULT_TOL) -> HullStatus:
    """Classify ``x`` against the simplex spanned by ``points``.

    ``IN_CONVEX`` carries coordinates clamped to be nonnegative and renormalized.
    """
    alpha = barycentric_coordinates(points, x, tol)
    if alpha is None:
        return HullStatus(HullKind.OUTSIDE_AFFINE)
    if np.all(alpha >= -tol):
        clamped = np.maximum(alpha, 0.0)
        return HullStatus(HullKind.IN_CONVEX, clamped / clamped.sum())
    return HullStatus(HullKind.IN_AFFINE_OUTSIDE_CONVEX, alpha)


class FacetCrossing(NamedTuple):
    keep: np.ndarray  # boolean mask over the input vertices
    point: np.ndarray  # new x_prev, on the facet spanned by the kept vertices
    theta: float
    alpha: np.ndarray  # coordinates of ``point`` w.r.t. the kept vertices


def remove_one_vertex(points, x_prev, x_t, tol: float = DEFAULT_TOL) -> FacetCrossing:
    """Walk from ``x_prev`` (inside the simplex) toward ``x_t`` until a facet is hit.

    ``theta`` is the smallest ``alpha_prev[i] / (alpha_prev[i] - alpha_t[i])``
    over coordinates with ``alpha_t[i] <= 0``, ties to the lowest index.  The
    crossing point ``theta * x_t + (1 - theta) * x_prev`` replaces ``x_prev`` and
    every vertex whose coordinate there is ``<= tol`` is dropped.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    x_prev = np.asarray(x_prev, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    a_prev = barycentric_coordinates(points, x_prev, tol)
    a_t = barycentric_coordinates(points, x_t, tol)
    if a_prev is None or a_t is None:
        raise GeometryError("remove_one_vertex needs both points in the affine hull")
    if np.any(a_prev < -tol):
        raise GeometryError("x_prev lies outside the convex hull")
    a_prev = np.maximum(a_prev, 0.0)
    candidates = np.flatnonzero(a_t <= tol)
    if candidates.size == 0:
        raise GeometryError("x_t lies strictly inside the convex hull; no facet is crossed")
    denom = a_prev[candidates] - a_t[candidates]
    ratios = np.where(denom > 0, a_prev[candidates] / np.where(denom > 0, denom, 1.0), 0.0)
    j = int(np.argmin(ratios))
    theta = float(ratios[j])
    if not -tol <= theta <= 1.0 + tol:
        raise GeometryError(f"facet crossing parameter {theta} outside [0, 1]")
    theta = min(max(theta, 0.0), 1.0)
    alpha = theta * a_t + (1.0 - theta) * a_prev
    alpha[candidates[j]] = 0.0
    keep = alpha > tol
    point = theta * x_t + (1.0 - theta) * x_prev
    kept = alpha[keep]
    return FacetCrossing(keep, point, theta, kept / kept.sum())


def caratheodory_reduce(points, weights, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Shrink a convex combination to an affinely independent support.

    Given ``weights >= 0`` summing to 1, repeatedly moves along a null vector of
    the augmented vertex matrix until one weight hits zero.  Returns the kept
    indices and their weights; the represented point is unchanged.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.maximum(np.asarray(weights, dtype=float), 0.0)
    idx = np.flatnonzero(w > tol)
    w = w[idx] / w[idx].sum()
    while idx.size > 1 and not is_affinely_independent(points[idx], tol):
        _, _, Vt = np.linalg.svd(_augmented(points[idx]))
        v = Vt[-1]
        if not np.any(v > 0):
            v = -v
        pos = v > 0
        step = np.min(w[pos] / v[pos])
        w = w - step * v
        w[np.argmin(np.where(pos, w, np.inf))] = 0.0
        live = w > tol
        idx, w = idx[live], w[live]
        w = w / w.sum()
    return idx, w
