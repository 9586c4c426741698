"""Finite constrained MDPs, exact policy evaluation and Lagrangian arithmetic.

A measurement vector is a plain 1-D ``numpy`` array ``[J_r, J_c1, ..., J_cm]``
with the discounted reward first.  Multipliers and thresholds are 1-D arrays of
length ``m``.
"""
from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

FEASIBILITY_TOL = 1e-9
ROW_SUM_TOL = 1e-12

# Dense solve below this size, sparse LU up to DIRECT_SOLVE_MAX, iterative above.
_DENSE_MAX = 2000
DIRECT_SOLVE_MAX = 10_000


class DimensionError(ValueError):
    """Array shapes disagree with the CMDP or constraint dimension."""


@dataclass
class Cmdp:
    """A finite constrained MDP with expected per-step reward and cost.

    ``transition[s, a, s2]`` is P(s2 | s, a).  ``reward`` has shape (S, A) and
    ``cost`` has shape (S, A, m).  Terminal states are absorbing with zero
    reward and cost.

    ``outcome_reward`` / ``outcome_cost`` optionally give the realized reward
    and cost of each transition (shape (S, A, S) and (S, A, S, m)); when set,
    ``reward`` and ``cost`` must be their expectations under ``transition``.
    Simulation uses the realized values, evaluation uses the expectations.
    """

    transition: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray = None
    outcome_reward: Optional[np.ndarray] = None
    outcome_cost: Optional[np.ndarray] = None
    name: str = "cmdp"

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        if self.cost.ndim == 2:
            self.cost = self.cost[:, :, None]
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        if self.terminal is None:
            self.terminal = np.zeros(self.transition.shape[0], dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.discount = float(self.discount)
        if self.outcome_reward is not None:
            self.outcome_reward = np.asarray(self.outcome_reward, dtype=float)
        if self.outcome_cost is not None:
            self.outcome_cost = np.asarray(self.outcome_cost, dtype=float)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def m(self) -> int:
        return self.cost.shape[2]

    def validate(self) -> None:
        S, A = self.transition.shape[:2]
        if S < 1 or A < 1:
            raise ValueError("a CMDP needs at least one state and one action")
        if self.transition.shape != (S, A, S):
            raise DimensionError(f"transition must be (S, A, S), got {self.transition.shape}")
        if self.reward.shape != (S, A):
            raise DimensionError(f"reward must be {(S, A)}, got {self.reward.shape}")
        if self.cost.shape[:2] != (S, A) or self.cost.shape[2] < 1:
            raise DimensionError(f"cost must be (S, A, m) with m >= 1, got {self.cost.shape}")
        if self.initial_dist.shape != (S,) or self.terminal.shape != (S,):
            raise DimensionError("initial_dist and terminal must have length n_states")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(axis=2) - 1.0) > ROW_SUM_TOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError("initial_dist must be a probability vector")
        for arr in (self.reward, self.cost, self.transition):
            if not np.all(np.isfinite(arr)):
                raise ValueError("CMDP arrays must be finite")
        for s in np.flatnonzero(self.terminal):
            if not np.all(self.transition[s, :, s] == 1.0):
                raise ValueError(f"terminal state {s} must be absorbing")
            if np.any(self.reward[s] != 0) or np.any(self.cost[s] != 0):
                raise ValueError(f"terminal state {s} must have zero reward and cost")
        if self.outcome_reward is not None and self.outcome_reward.shape != (S, A, S):
            raise DimensionError("outcome_reward must be (S, A, S)")
        if self.outcome_cost is not None and self.outcome_cost.shape != (S, A, S, self.m):
            raise DimensionError("outcome_cost must be (S, A, S, m)")

    def step_outcome(self, s, a, s_next):
        """Realized (reward, cost) of transitions; vectorized over index arrays."""
        if self.outcome_reward is not None:
            r = self.outcome_reward[s, a, s_next]
        else:
            r = self.reward[s, a]
        if self.outcome_cost is not None:
            c = self.outcome_cost[s, a, s_next]
        else:
            c = self.cost[s, a]
        return r, c

    def reward_range(self) -> float:
        """Spread of attainable discounted returns, (max r - min r) / (1 - gamma)."""
        spread = float(self.reward.max() - self.reward.min())
        return spread / (1.0 - self.discount)


@dataclass(frozen=True)
class ConstraintSpec:
    """Thresholds ``tau`` for the ``m`` discounted cost constraints J_c <= tau."""

    tau: np.ndarray

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float)).copy()
        if tau.ndim != 1 or tau.size < 1:
            raise ValueError("tau must be a non-empty vector")
        if not np.all(np.isfinite(tau)):
            raise ValueError("tau must be finite")
        tau.setflags(write=False)
        object.__setattr__(self, "tau", tau)

    @property
    def m(self) -> int:
        return self.tau.size

    def __eq__(self, other):
        return isinstance(other, ConstraintSpec) and np.array_equal(self.tau, other.tau)

    def __hash__(self):
        return hash(self.tau.tobytes())


def measurement(j_r: float, j_c) -> np.ndarray:
    """Pack a reward and cost vector into one measurement vector."""
    return np.concatenate([[float(j_r)], np.atleast_1d(np.asarray(j_c, dtype=float))])


@dataclass
class DeterministicPolicy:
    """A state -> action table, optionally backed by the Q-function it was read from."""

    actions: np.ndarray
    policy_id: str = ""
    q: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 1:
            raise DimensionError("actions must be a 1-D state -> action table")
        if not self.policy_id:
            self.policy_id = policy_digest(self.actions)

    def __call__(self, state):
        return self.actions[state]

    @property
    def n_parameters(self) -> int:
        if self.q is not None:
            return int(self.q.n_parameters)
        return int(self.actions.size)

    def check(self, n_states: int, n_actions: int) -> None:
        if self.actions.shape != (n_states,):
            raise DimensionError(f"policy covers {self.actions.size} states, CMDP has {n_states}")
        if np.any(self.actions < 0) or np.any(self.actions >= n_actions):
            raise ValueError("policy selects an action outside [0, n_actions)")


def policy_digest(actions) -> str:
    raw = np.ascontiguousarray(np.asarray(actions, dtype=np.int64)).tobytes()
    return "pi-" + hashlib.sha1(raw).hexdigest()[:12]


def constant_policy(n_states: int, action: int) -> DeterministicPolicy:
    return DeterministicPolicy(np.full(n_states, action, dtype=np.int64))


@functools.total_ordering
@dataclass(frozen=True)
class Objective:
    """Value of ``min_lambda L(x, lambda)``: J_r when feasible, else a tagged -inf.

    The infeasible sentinel never takes part in arithmetic; it only compares
    below every finite value.
    """

    value: Optional[float] = None

    @property
    def feasible(self) -> bool:
        return self.value is not None

    def __lt__(self, other):
        if not isinstance(other, Objective):
            return NotImplemented
        if self.value is None:
            return other.value is not None
        if other.value is None:
            return False
        return self.value < other.value

    def __eq__(self, other):
        if not isinstance(other, Objective):
            return NotImplemented
        return self.value == other.value

    def __hash__(self):
        return hash(self.value)

    def for_display(self) -> float:
        return float("-inf") if self.value is None else self.value

    def __repr__(self):
        return "Objective(-inf)" if self.value is None else f"Objective({self.value!r})"


INFEASIBLE = Objective(None)


def _split(x, tau) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    tau = tau.tau if isinstance(tau, ConstraintSpec) else np.atleast_1d(np.asarray(tau, dtype=float))
    if x.ndim != 1 or x.size != tau.size + 1:
        raise DimensionError(f"measurement of length {x.size} does not match m={tau.size}")
    return x, tau


def lagrangian(x, lam, tau) -> float:
    """``J_r - lam . (J_c - tau)``."""
    x, tau = _split(x, tau)
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if lam.shape != tau.shape:
        raise DimensionError("lambda and tau differ in length")
    return float(x[0] - lam @ (x[1:] - tau))


def is_feasible(x, tau, tol: float = FEASIBILITY_TOL) -> bool:
    x, tau = _split(x, tau)
    return bool(np.all(x[1:] <= tau + tol))


def feasibility_objective(x, tau, tol: float = FEASIBILITY_TOL) -> Objective:
    """``min over lambda >= 0`` of the Lagrangian: J_r if feasible else INFEASIBLE."""
    x, tau = _split(x, tau)
    if np.all(x[1:] <= tau + tol):
        return Objective(float(x[0]))
    return INFEASIBLE


def constraint_distance(x, tau) -> float:
    """Euclidean norm of the positive part of ``J_c - tau``."""
    x, tau = _split(x, tau)
    return float(np.linalg.norm(np.maximum(0.0, x[1:] - tau)))


def penalized_reward(r, c, lam, tau):
    """Per-step reward ``r - lam . (c - tau)`` handed to unconstrained solvers.

    Vectorized: ``r`` may have any shape ``(...)`` with ``c`` of shape ``(..., m)``.
    """
    tau = tau.tau if isinstance(tau, ConstraintSpec) else np.atleast_1d(np.asarray(tau, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    c = np.asarray(c, dtype=float)
    if c.shape[-1:] != tau.shape or lam.shape != tau.shape:
        raise DimensionError("cost, lambda and tau dimensions disagree")
    out = np.asarray(r, dtype=float) - (c - tau) @ lam
    return float(out) if out.ndim == 0 else out


def _policy_matrices(cmdp: Cmdp, actions: np.ndarray):
    idx = np.arange(cmdp.n_states)
    P = cmdp.transition[idx, actions]  # (S, S)
    R = np.column_stack([cmdp.reward[idx, actions], cmdp.cost[idx, actions]])  # (S, m+1)
    return P, R


def solve_values(P: np.ndarray, R: np.ndarray, discount: float, tol: float = 1e-10) -> np.ndarray:
    """Solve ``V = R + discount * P V`` for every column of ``R``."""
    n = P.shape[0]
    if n <= _DENSE_MAX:
        V = np.linalg.solve(np.eye(n) - discount * P, R)
    elif n <= DIRECT_SOLVE_MAX:
        A = scipy.sparse.identity(n, format="csc") - discount * scipy.sparse.csc_matrix(P)
        V = scipy.sparse.linalg.splu(A).solve(np.ascontiguousarray(R))
    else:
        Ps = scipy.sparse.csr_matrix(P)
        V = np.zeros_like(R)
        while True:
            V_new = R + discount * (Ps @ V)
            done = np.max(np.abs(V_new - V)) < tol
            V = V_new
            if done:
                break
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("policy evaluation produced non-finite values")
    return V


def evaluate_policy_exact(cmdp: Cmdp, policy) -> np.ndarray:
    """Exact measurement vector ``[J_r, J_c]`` of a deterministic policy."""
    if not isinstance(policy, DeterministicPolicy):
        policy = DeterministicPolicy(policy)
    policy.check(cmdp.n_states, cmdp.n_actions)
    P, R = _policy_matrices(cmdp, policy.actions)
    V = solve_values(P, R, cmdp.discount)
    return cmdp.initial_dist @ V
