"""Mixed policies over deterministic policies and the managers that maintain them.

An :class:`AimPolicy` keeps a small set of active policies whose measurement
vectors are affinely independent, together with convex weights reproducing a
target measurement vector.  The update rules only ever touch measurement
vectors; the policy references they carry are opaque.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .cmdp import ConstraintSpec, constraint_distance, feasibility_objective, is_feasible
from .geometry import (
    DEFAULT_TOL,
    MAX_CONDITION,
    GeometryError,
    HullKind,
    barycentric_coordinates,
    caratheodory_reduce,
    hull_status,
    is_affinely_independent,
    remove_one_vertex,
    simplex_condition,
)

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9


@dataclass
class AimPolicy:
    """Distribution over ``policies`` with probabilities ``weights``.

    ``points[i]`` is the measurement vector of ``policies[i]`` and ``target``
    the measurement of the mixture.  Policies may be any objects; when they
    have a ``policy_id`` attribute it is used as their identifier.
    """

    policies: list = field(default_factory=list)
    points: np.ndarray = None
    weights: np.ndarray = None
    target: Optional[np.ndarray] = None

    def __post_init__(self):
        self.policies = list(self.policies)
        k = len(self.policies)
        if self.points is None:
            self.points = np.zeros((k, 0))
        points = np.asarray(self.points, dtype=float)
        if k:
            self.points = points.reshape(k, -1)
        else:
            self.points = np.zeros((0, points.shape[-1] if points.ndim == 2 else 0))
        self.weights = np.ones(0) if self.weights is None else np.asarray(self.weights, dtype=float)
        if self.target is not None:
            self.target = np.asarray(self.target, dtype=float)
        if self.weights.shape != (k,):
            raise ValueError("one weight per active policy is required")

    def __len__(self) -> int:
        return len(self.policies)

    @property
    def empty(self) -> bool:
        return len(self.policies) == 0

    @property
    def policy_ids(self) -> list[str]:
        return [getattr(p, "policy_id", p) for p in self.policies]

    def represented(self) -> np.ndarray:
        """``sum_i weights[i] * points[i]``."""
        return self.weights @ self.points

    def check(self, tol: float = WEIGHT_TOL, aim: bool = True) -> None:
        """Raise ``ValueError`` unless the mixed-policy (and, if ``aim``, AIM) invariants hold."""
        if self.empty:
            return
        if np.any(self.weights < -tol) or abs(self.weights.sum() - 1.0) > tol:
            raise ValueError("weights must be nonnegative and sum to 1")
        scale = max(1.0, float(np.abs(self.points).max()))
        if self.target is None or np.max(np.abs(self.represented() - self.target)) > tol * scale:
            raise ValueError("target is not the weighted sum of the active measurements")
        if aim:
            if len(self) > self.points.shape[1] + 1:
                raise ValueError(f"{len(self)} active policies exceed m + 2")
            if not is_affinely_independent(self.points):
                raise ValueError("active measurement vectors are affinely dependent")

    @property
    def n_parameters(self) -> int:
        return sum(int(getattr(p, "n_parameters", 1)) for p in self.policies)


def _single(ref, x) -> AimPolicy:
    x = np.asarray(x, dtype=float)
    return AimPolicy([ref], x[None, :], np.ones(1), x.copy())


def _segment_fraction(x_prev, x_new, x_t) -> float:
    d = x_new - x_prev
    dd = float(d @ d)
    if dd == 0.0:
        return 0.0
    return float(np.clip((x_t - x_prev) @ d / dd, 0.0, 1.0))


def _incremental_support(points, x_prev, x_new, x_t, tol):
    """Active vertex mask (over ``points`` plus ``x_new`` appended) for the three cases."""
    k = points.shape[0]
    keep = np.ones(k, dtype=bool)
    status = hull_status(points, x_t, tol)
    if status.kind is HullKind.OUTSIDE_AFFINE:
        return np.r_[keep, True]
    if status.kind is HullKind.IN_CONVEX:
        return np.r_[keep, False]
    while True:
        crossing = remove_one_vertex(points[keep], x_prev, x_t, tol)
        idx = np.flatnonzero(keep)
        keep[idx[~crossing.keep]] = False
        x_prev = crossing.point
        status = hull_status(points[keep], x_t, tol)
        if status.kind is HullKind.OUTSIDE_AFFINE:
            return np.r_[keep, True]
        if status.kind is HullKind.IN_CONVEX:
            return np.r_[keep, False]


def _final_weights(points, x_t, tol):
    """Barycentric weights of ``x_t``, dropping vertices that carry no weight."""
    alpha = barycentric_coordinates(points, x_t, tol)
    if alpha is None or np.any(alpha < -tol):
        raise GeometryError("target fell outside the rebuilt simplex")
    keep = alpha > tol
    if not keep.all():
        sub = barycentric_coordinates(points[keep], x_t, tol)
        if sub is None:
            raise GeometryError("pruned simplex lost the target")
        alpha = np.zeros_like(alpha)
        alpha[keep] = sub
    alpha = np.maximum(alpha, 0.0)
    keep = alpha > 0
    return keep, alpha[keep] / alpha[keep].sum()


def _absorb(mu_prev: AimPolicy, ref, x_new, x_t, tol: float = DEFAULT_TOL) -> AimPolicy:
    """Represent ``x_t`` (on the segment from ``mu_prev.target`` to ``x_new``) as an AIM policy."""
    x_new = np.asarray(x_new, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if mu_prev.empty:
        return _single(ref, x_new) if np.array_equal(x_t, x_new) else AimPolicy([ref], x_new[None, :], np.ones(1), x_t)
    refs = list(mu_prev.policies) + [ref]
    points = np.vstack([mu_prev.points, x_new])
    try:
        mask = _incremental_support(mu_prev.points, mu_prev.target, x_new, x_t, tol)
        cand = points[mask]
        if len(cand) > 1 and simplex_condition(cand) > MAX_CONDITION:
            raise GeometryError("near-degenerate simplex")
        keep, alpha = _final_weights(cand, x_t, tol)
        chosen = np.flatnonzero(mask)[keep]
    except GeometryError as exc:
        log.debug("incremental AIM update failed (%s); rebuilding support", exc)
        s = _segment_fraction(mu_prev.target, x_new, x_t)
        w = np.r_[(1.0 - s) * mu_prev.weights, s]
        idx, w = caratheodory_reduce(points, w, tol)
        keep, alpha = _final_weights(points[idx], x_t, tol)
        chosen = idx[keep]
    return AimPolicy([refs[i] for i in chosen], points[chosen], alpha, x_t.copy())


def mean_target(x_prev: Optional[np.ndarray], x_new, t: int) -> np.ndarray:
    """Running mean update ``x_prev * (t-1)/t + x_new/t``."""
    x_new = np.asarray(x_new, dtype=float)
    if t < 1:
        raise ValueError("round index starts at 1")
    if x_prev is None or t == 1:
        return x_new.copy()
    return x_prev * ((t - 1) / t) + x_new / t


def aim_mean_update(mu_prev: AimPolicy, pi_t, x_pi, t: int, tol: float = DEFAULT_TOL) -> AimPolicy:
    """Add ``pi_t`` so that the mixture measures the mean of all ``t`` inputs."""
    if t == 1 and not mu_prev.empty:
        raise ValueError("round 1 must start from an empty policy")
    if t > 1 and mu_prev.empty:
        raise ValueError(f"round {t} needs the previous mixed policy")
    x_t = mean_target(mu_prev.target, x_pi, t)
    return _absorb(mu_prev, pi_t, x_pi, x_t, tol)


def aim_greedy_target(x_prev, x_new, tau) -> np.ndarray:
    """Best point of the segment ``[x_prev, x_new]`` for ``min_lambda L``.

    Both feasible: the endpoint with more reward (ties keep ``x_prev``).
    Neither: the endpoint closer to the feasible set (ties: more reward, then ``x_prev``).
    One feasible: if the infeasible end earns more, the point where the
    segment leaves the feasible set, otherwise the feasible end.
    """
    x_prev = np.asarray(x_prev, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    tau_v = tau.tau if isinstance(tau, ConstraintSpec) else np.atleast_1d(np.asarray(tau, dtype=float))
    ok_prev, ok_new = is_feasible(x_prev, tau_v), is_feasible(x_new, tau_v)
    if ok_prev and ok_new:
        return (x_new if x_new[0] > x_prev[0] else x_prev).copy()
    if not ok_prev and not ok_new:
        d_prev, d_new = constraint_distance(x_prev, tau_v), constraint_distance(x_new, tau_v)
        if d_new < d_prev or (d_new == d_prev and x_new[0] > x_prev[0]):
            return x_new.copy()
        return x_prev.copy()
    good, bad = (x_prev, x_new) if ok_prev else (x_new, x_prev)
    if bad[0] <= good[0]:
        return good.copy()
    c_good, c_bad = good[1:], bad[1:]
    over = (c_bad > tau_v) & (c_bad > c_good)
    # largest step from the feasible end keeping every violated coordinate within tau
    theta = float(np.min((tau_v[over] - c_good[over]) / (c_bad[over] - c_good[over])))
    theta = min(max(theta, 0.0), 1.0)
    point = good + theta * (bad - good)
    point[1:][over] = np.minimum(point[1:][over], tau_v[over])
    return point


def aim_greedy_update(mu_prev: AimPolicy, pi_t, x_pi, tau, tol: float = DEFAULT_TOL) -> AimPolicy:
    x_pi = np.asarray(x_pi, dtype=float)
    if mu_prev.empty:
        return _single(pi_t, x_pi)
    x_t = aim_greedy_target(mu_prev.target, x_pi, tau)
    return _absorb(mu_prev, pi_t, x_pi, x_t, tol)


def _better(candidate_x, incumbent_x, tau) -> bool:
    f_c, f_i = feasibility_objective(candidate_x, tau), feasibility_objective(incumbent_x, tau)
    if f_c != f_i:
        return f_c > f_i
    return constraint_distance(candidate_x, tau) < constraint_distance(incumbent_x, tau)


def single_best_update(best: Optional[tuple[Any, np.ndarray]], candidate: tuple[Any, np.ndarray], tau):
    """Keep whichever of ``best`` and ``candidate`` scores higher; ties keep ``best``."""
    if best is None:
        return candidate
    return candidate if _better(candidate[1], best[1], tau) else best


def sample_policy(mu: AimPolicy, seed=None, size: Optional[int] = None):
    """Draw active policies with probabilities ``mu.weights``.

    ``seed`` may be an int or a ``numpy.random.Generator``.  With ``size`` a
    list of draws is returned.
    """
    if mu.empty:
        raise ValueError("cannot sample from an empty mixed policy")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = np.maximum(mu.weights, 0.0)
    p = p / p.sum()
    if size is None:
        return mu.policies[int(rng.choice(len(p), p=p))]
    return [mu.policies[i] for i in rng.choice(len(p), size=size, p=p)]


# Managers used by the training loop.  Each consumes (policy, measurement)
# pairs one at a time and exposes the current mixed policy.

class StoreAllMixer:
    """Uniform mixture over every policy received, duplicates included."""

    name = "store_all"

    def __init__(self, tau=None):
        self._refs: list = []
        self._points: list = []
        self._target: Optional[np.ndarray] = None

    def update(self, ref, x) -> None:
        x = np.asarray(x, dtype=float)
        self._refs.append(ref)
        self._points.append(x)
        self._target = mean_target(self._target, x, len(self._refs))

    @property
    def policy(self) -> AimPolicy:
        k = len(self._refs)
        if k == 0:
            return AimPolicy()
        return AimPolicy(list(self._refs), np.array(self._points), np.full(k, 1.0 / k), self._target.copy())

    @property
    def target(self):
        return self._target

    @property
    def active_size(self) -> int:
        return len(self._refs)

    @property
    def stored_parameters(self) -> int:
        return sum(int(getattr(r, "n_parameters", 1)) for r in self._refs)


class _ManagedMixer:
    name = ""

    def __init__(self, tau=None):
        self.tau = tau
        self.mu = AimPolicy()
        self.t = 0

    def update(self, ref, x) -> None:
        self.t += 1
        self.mu = self._step(ref, np.asarray(x, dtype=float))

    def _step(self, ref, x) -> AimPolicy:
        raise NotImplementedError

    @property
    def policy(self) -> AimPolicy:
        return self.mu

    @property
    def target(self):
        return self.mu.target

    @property
    def active_size(self) -> int:
        return len(self.mu)

    @property
    def stored_parameters(self) -> int:
        return self.mu.n_parameters


class AimMeanMixer(_ManagedMixer):
    name = "aim_mean"

    def _step(self, ref, x):
        return aim_mean_update(self.mu, ref, x, self.t)


class AimGreedyMixer(_ManagedMixer):
    name = "aim_greedy"

    def _step(self, ref, x):
        return aim_greedy_update(self.mu, ref, x, self.tau)


class SingleBestMixer(_ManagedMixer):
    name = "single_best"

    def _step(self, ref, x):
        best = None if self.mu.empty else (self.mu.policies[0], self.mu.points[0])
        ref, x = single_best_update(best, (ref, x), self.tau)
        return _single(ref, x)


MIXERS = {cls.name: cls for cls in (StoreAllMixer, AimMeanMixer, AimGreedyMixer, SingleBestMixer)}


def make_mixer(name: str, tau=None):
    try:
        return MIXERS[name](tau)
    except KeyError:
        raise ValueError(f"unknown mixer {name!r}; choose from {sorted(MIXERS)}") from None


def mixture_measurement(mu: AimPolicy, evaluate) -> np.ndarray:
    """Measurement of ``mu`` given a per-policy evaluator (linear in the weights)."""
    return sum(w * np.asarray(evaluate(p), dtype=float) for p, w in zip(mu.policies, mu.weights))


def policies_by_id(policies: Sequence) -> dict:
    return {getattr(p, "policy_id", p): p for p in policies}
