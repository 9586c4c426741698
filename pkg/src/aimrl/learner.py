"""Primal-dual training: OGD on the multipliers against best-response policies.

The lambda-player runs projected online gradient descent on the Lagrangian.
The policy-player answers each multiplier with a deterministic best response,
either exactly (value iteration on the known CMDP) or offline (fitted
Q-iteration on a logged dataset).  Every best response is offered to a
mixed-policy manager from :mod:`aimrl.aim`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy import sparse

from .aim import make_mixer
from .cmdp import (
    FEASIBILITY_TOL,
    Cmdp,
    ConstraintSpec,
    DeterministicPolicy,
    evaluate_policy_exact,
    is_feasible,
    lagrangian,
    penalized_reward,
    solve_values,
)
from .envs import TransitionDataset
from .geometry import GeometryError
from .ope import is_estimate

log = logging.getLogger(__name__)

VI_TOL = 1e-10
TIE_TOL = 1e-9


def learning_rate(k: int, rule: str = "inv_sqrt", scale: float = 1.0) -> float:
    if k < 1:
        raise ValueError("OGD step index starts at 1")
    if rule == "inv_sqrt":
        return scale / math.sqrt(k)
    if rule == "constant":
        return scale
    raise ValueError(f"unknown learning-rate rule {rule!r}")


def ogd_step(lam, x_pi, tau, t: int, lr: Optional[float] = None) -> np.ndarray:
    """Projected gradient step ``max(0, lam + eta_t * (J_c - tau))``, ``eta_t = 1/sqrt(t)`` by default."""
    tau_v = tau.tau if isinstance(tau, ConstraintSpec) else np.atleast_1d(np.asarray(tau, dtype=float))
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    x_pi = np.asarray(x_pi, dtype=float)
    eta = learning_rate(t) if lr is None else lr
    return np.maximum(0.0, lam + eta * (x_pi[1:] - tau_v))


def greedy_actions(q: np.ndarray, tie_tol: float = TIE_TOL) -> np.ndarray:
    """Row-wise argmax; values within ``tie_tol`` (relative) of the max tie to the lowest index."""
    q = np.asarray(q, dtype=float)
    top = q.max(axis=1, keepdims=True)
    tol = tie_tol * max(1.0, float(np.abs(q).max()) if q.size else 1.0)
    return np.argmax(q >= top - tol, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# exact best response

def _penalized_table(cmdp: Cmdp, lam, tau) -> np.ndarray:
    return penalized_reward(cmdp.reward, cmdp.cost, lam, tau)


def optimal_q(cmdp: Cmdp, reward: np.ndarray, tol: float = VI_TOL) -> np.ndarray:
    """Optimal Q-table for a per-step reward table, by value iteration then policy polishing."""
    gamma = cmdp.discount
    idx = np.arange(cmdp.n_states)
    # start from the value of the myopic greedy policy; a lower bound on V*
    start = greedy_actions(reward)
    V = solve_values(cmdp.transition[idx, start], reward[idx, start][:, None], gamma)[:, 0]
    while True:
        Q = reward + gamma * cmdp.transition @ V
        V_new = Q.max(axis=1)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta < tol:
            break
    # policy iteration from the VI greedy policy makes Q exact up to solve precision
    actions = greedy_actions(Q)
    for _ in range(100):
        V = solve_values(cmdp.transition[idx, actions], reward[idx, actions][:, None], gamma)[:, 0]
        Q = reward + gamma * cmdp.transition @ V
        new = greedy_actions(Q)
        improved = Q[idx, new] > Q[idx, actions] + TIE_TOL * max(1.0, float(np.abs(Q).max()))
        if not improved.any():
            break
        actions = np.where(improved, new, actions)
    return Q


def best_response_exact(cmdp: Cmdp, lam, tau) -> tuple[DeterministicPolicy, np.ndarray]:
    """Deterministic maximizer of ``L(., lam)`` and its exact measurement.

    Solves the unconstrained MDP with reward ``r - lam . (c - tau)`` at every
    state (terminal states included, which only shifts all values by a
    constant).  Ties go to the lowest action index.
    """
    Q = optimal_q(cmdp, _penalized_table(cmdp, lam, tau))
    policy = DeterministicPolicy(greedy_actions(Q))
    return policy, evaluate_policy_exact(cmdp, policy)


# ---------------------------------------------------------------------------
# Q-functions for fitted iteration

class OneHotFeatures:
    """phi(s, a) = indicator of the pair; linear Q over it equals a Q-table."""

    name = "one_hot"

    def __init__(self, n_states: int, n_actions: int):
        self.n_states, self.n_actions = int(n_states), int(n_actions)

    @property
    def dim(self) -> int:
        return self.n_states * self.n_actions

    def __call__(self, states, actions) -> np.ndarray:
        phi = np.zeros((len(states), self.dim))
        phi[np.arange(len(states)), np.asarray(states) * self.n_actions + np.asarray(actions)] = 1.0
        return phi

    def spec(self) -> dict:
        return {"name": self.name, "n_states": self.n_states, "n_actions": self.n_actions}


class StateActionFeatures:
    """One-hot state features crossed with one-hot actions, plus a per-action bias."""

    name = "state_action"

    def __init__(self, state_features: np.ndarray, n_actions: int):
        self.state_features = np.asarray(state_features, dtype=float)
        self.n_states = self.state_features.shape[0]
        self.n_actions = int(n_actions)

    @property
    def dim(self) -> int:
        return (self.state_features.shape[1] + 1) * self.n_actions

    def __call__(self, states, actions) -> np.ndarray:
        f = np.column_stack([self.state_features[np.asarray(states)], np.ones(len(states))])
        d = f.shape[1]
        phi = np.zeros((len(states), self.dim))
        for a in range(self.n_actions):
            rows = np.asarray(actions) == a
            phi[rows, a * d:(a + 1) * d] = f[rows]
        return phi

    def spec(self) -> dict:
        return {"name": self.name, "n_actions": self.n_actions,
                "state_features": self.state_features.tolist()}


def feature_map_from_spec(spec: dict):
    if spec["name"] == OneHotFeatures.name:
        return OneHotFeatures(spec["n_states"], spec["n_actions"])
    if spec["name"] == StateActionFeatures.name:
        return StateActionFeatures(np.asarray(spec["state_features"], dtype=float), spec["n_actions"])
    raise ValueError(f"unknown feature map {spec['name']!r}")


class TabularQ:
    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, table: Optional[np.ndarray] = None):
        self.table = np.zeros((n_states, n_actions)) if table is None else np.asarray(table, dtype=float).copy()
        self.observed = np.zeros_like(self.table, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    @property
    def n_parameters(self) -> int:
        return int(self.table.size)

    def values(self, states=None) -> np.ndarray:
        return self.table if states is None else self.table[states]

    def fit(self, states, actions, targets, step: float = 1.0) -> None:
        S, A = self.table.shape
        flat = states * A + actions
        counts = np.bincount(flat, minlength=S * A).reshape(S, A)
        sums = np.bincount(flat, weights=targets, minlength=S * A).reshape(S, A)
        seen = counts > 0
        fitted = np.where(seen, sums / np.maximum(counts, 1), self.table)
        self.table = np.where(seen, (1 - step) * self.table + step * fitted, self.table)
        self.observed |= seen

    def copy(self) -> "TabularQ":
        q = TabularQ(*self.table.shape, table=self.table)
        q.observed = self.observed.copy()
        return q


class LinearQ:
    kind = "linear"

    def __init__(self, features, weights: Optional[np.ndarray] = None, ridge: float = 1e-6):
        self.features = features
        self.weights = np.zeros(features.dim) if weights is None else np.asarray(weights, dtype=float).copy()
        self.ridge = ridge

    @property
    def n_states(self) -> int:
        return self.features.n_states

    @property
    def n_parameters(self) -> int:
        return int(self.weights.size)

    def values(self, states=None) -> np.ndarray:
        states = np.arange(self.features.n_states) if states is None else np.asarray(states)
        A = self.features.n_actions
        cols = [self.features(states, np.full(len(states), a)) @ self.weights for a in range(A)]
        return np.column_stack(cols)

    def fit(self, states, actions, targets, step: float = 1.0) -> None:
        phi = self.features(states, actions)
        gram = phi.T @ phi + self.ridge * np.eye(phi.shape[1])
        w = np.linalg.solve(gram, phi.T @ targets)
        self.weights = (1 - step) * self.weights + step * w

    def copy(self) -> "LinearQ":
        return LinearQ(self.features, self.weights, self.ridge)


def policy_from_q(q) -> DeterministicPolicy:
    return DeterministicPolicy(greedy_actions(q.values()), q=q)


# ---------------------------------------------------------------------------
# configuration and trace

@dataclass
class TrainConfig:
    """Knobs of the primal-dual loop.

    ``T`` counts best-response steps.  The multipliers move every
    ``lambda_update_every`` steps using the mean measurement of the steps since
    the previous move; the current best response is offered to the mixer every
    ``export_every`` steps.  ``gamma=None`` inherits the problem's discount.
    """

    T: int = 1000
    lambda_update_every: int = 10
    export_every: int = 100
    gamma: Optional[float] = None
    lr_rule: str = "inv_sqrt"
    lr_scale: float = 1.0
    lambda_init: Optional[list] = None
    lambda_max: Optional[float] = None
    best_response: str = "exact"
    fitted_sweeps: int = 50
    sweeps_per_step: int = 1
    fitted_step_size: float = 1.0
    batch_size: Optional[int] = None
    q_kind: str = "tabular"
    ridge: float = 1e-6
    measurement: str = "ope"
    clip: float = 20.0
    ope_mode: str = "plain"
    mixer: str = "aim_mean"
    seed: int = 0

    def validate(self) -> None:
        for name in ("T", "lambda_update_every", "export_every", "fitted_sweeps", "sweeps_per_step"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.best_response not in ("exact", "fitted"):
            raise ValueError("best_response must be 'exact' or 'fitted'")
        if self.measurement not in ("ope", "exact"):
            raise ValueError("measurement must be 'ope' or 'exact'")
        if self.q_kind not in ("tabular", "linear"):
            raise ValueError("q_kind must be 'tabular' or 'linear'")
        if not 0 < self.fitted_step_size <= 1:
            raise ValueError("fitted_step_size must lie in (0, 1]")
        if self.gamma is not None and not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        make_mixer(self.mixer)
        learning_rate(1, self.lr_rule, self.lr_scale)

    def digest(self) -> str:
        raw = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


@dataclass
class RoundRecord:
    t: int
    lam: np.ndarray
    x_pi: np.ndarray
    target: Optional[np.ndarray]
    lagrangian: float
    active_size: int
    stored_parameters: int
    policy_id: str
    exported: bool
    lambda_updated: bool
    error: str = ""


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    regret: float = 0.0
    lambda_hat: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def T(self) -> int:
        return len(self.records)

    @property
    def peak_parameters(self) -> int:
        return max((r.stored_parameters for r in self.records), default=0)

    def lambdas(self) -> np.ndarray:
        return np.array([r.lam for r in self.records])

    def measurements(self) -> np.ndarray:
        return np.array([r.x_pi for r in self.records])

    def targets(self) -> np.ndarray:
        return np.array([r.target for r in self.records if r.target is not None])


def default_lambda_max(reward_range: float, tau: np.ndarray) -> float:
    """Box radius for the hindsight comparator: 10 * reward range / smallest threshold scale."""
    scale = float(np.min(np.maximum(np.abs(tau), 1e-3)))
    return 10.0 * max(reward_range, 1e-12) / scale


def box_min_lagrangian(x, tau, lambda_max: float) -> float:
    """``min over lam in [0, lambda_max]^m`` of ``L(x, lam)``."""
    x = np.asarray(x, dtype=float)
    tau_v = tau.tau if isinstance(tau, ConstraintSpec) else np.asarray(tau, dtype=float)
    return float(x[0] - lambda_max * np.sum(np.maximum(0.0, x[1:] - tau_v)))


def realized_regret(lams: np.ndarray, xs: np.ndarray, tau, lambda_max: float) -> float:
    """Regret of the multiplier sequence against the best fixed lambda in the box."""
    tau_v = tau.tau if isinstance(tau, ConstraintSpec) else np.asarray(tau, dtype=float)
    slack = xs[:, 1:] - tau_v
    played = np.sum(xs[:, 0] - np.sum(lams * slack, axis=1))
    best_fixed = np.sum(xs[:, 0]) - lambda_max * np.sum(np.maximum(0.0, slack.sum(axis=0)))
    return float(played - best_fixed)


# ---------------------------------------------------------------------------
# fitted best response

class _FittedProblem:
    """Dataset arrays prepared once for repeated fitted Q sweeps."""

    def __init__(self, data: TransitionDataset, config: TrainConfig):
        if len(data) == 0:
            raise ValueError("fitted best response needs a nonempty dataset")
        self.data = data
        self.gamma = data.discount if config.gamma is None else float(config.gamma)
        self.n_states = int(data.metadata.get("n_states", max(data.states.max(), data.next_states.max()) + 1))
        self.n_actions = int(data.metadata.get("n_actions", data.actions.max() + 1))
        self.config = config
        self.rng = np.random.default_rng([config.seed, 0xF17])

    def new_q(self):
        if self.config.q_kind == "tabular":
            return TabularQ(self.n_states, self.n_actions)
        return LinearQ(OneHotFeatures(self.n_states, self.n_actions), ridge=self.config.ridge)

    def _tabular_model(self):
        """Per-pair sample means, enough for an exact full-batch tabular sweep."""
        if getattr(self, "_model", None) is None:
            d = self.data
            S, A = self.n_states, self.n_actions
            flat = d.states * A + d.actions
            counts = np.bincount(flat, minlength=S * A).astype(float)
            inv = 1.0 / np.maximum(counts, 1.0)
            mean_r = np.bincount(flat, weights=d.rewards, minlength=S * A) * inv
            mean_c = np.column_stack([
                np.bincount(flat, weights=d.costs[:, j], minlength=S * A) for j in range(d.m)
            ]) * inv[:, None]
            live = ~d.dones
            next_freq = sparse.csr_matrix(
                (live.astype(float), (flat, d.next_states)), shape=(S * A, S)
            ).multiply(inv[:, None]).tocsr()
            done_freq = np.bincount(flat, weights=d.dones.astype(float), minlength=S * A) * inv
            self._model = (counts.reshape(S, A) > 0, mean_r, mean_c, next_freq, done_freq)
        return self._model

    def sweep(self, q, lam, tau) -> None:
        d = self.data
        tau_v = tau.tau if isinstance(tau, ConstraintSpec) else np.asarray(tau, dtype=float)
        # absorbing terminal keeps paying lam . tau per step under the penalized reward
        v_terminal = float(np.asarray(lam) @ tau_v) / (1.0 - self.gamma)
        if isinstance(q, TabularQ) and self.config.batch_size is None:
            seen, mean_r, mean_c, next_freq, done_freq = self._tabular_model()
            v = q.table.max(axis=1)
            target = penalized_reward(mean_r, mean_c, lam, tau_v) + self.gamma * (next_freq @ v + done_freq * v_terminal)
            step = self.config.fitted_step_size
            q.table = np.where(seen, (1 - step) * q.table + step * target.reshape(q.table.shape), q.table)
            q.observed |= seen
            return
        if self.config.batch_size is not None and self.config.batch_size < len(d):
            idx = self.rng.choice(len(d), size=self.config.batch_size, replace=False)
        else:
            idx = slice(None)
        r_pen = penalized_reward(d.rewards[idx], d.costs[idx], lam, tau_v)
        v_next = q.values().max(axis=1)[d.next_states[idx]]
        v_next = np.where(d.dones[idx], v_terminal, v_next)
        q.fit(d.states[idx], d.actions[idx], r_pen + self.gamma * v_next, self.config.fitted_step_size)


class BestResponse(NamedTuple):
    policy: DeterministicPolicy
    x: np.ndarray


def best_response_fitted(data: TransitionDataset, lam, tau, config: Optional[TrainConfig] = None,
                         cmdp: Optional[Cmdp] = None) -> BestResponse:
    """Greedy policy of fitted Q-iteration on the penalized reward.

    Runs ``config.fitted_sweeps`` sweeps from a zero Q-function.  The returned
    measurement is the clipped IS estimate, or the exact value when ``cmdp`` is
    given and ``config.measurement == 'exact'``.  State-action pairs never
    logged keep Q = 0; ``policy.q.observed`` marks the ones that were.
    """
    config = config or TrainConfig(best_response="fitted")
    problem = _FittedProblem(data, config)
    q = problem.new_q()
    for _ in range(config.fitted_sweeps):
        problem.sweep(q, lam, tau)
    policy = policy_from_q(q)
    return BestResponse(policy, _measure(policy, config, data, cmdp))


def _measure(policy, config: TrainConfig, data, cmdp) -> np.ndarray:
    if config.best_response == "exact" or config.measurement == "exact":
        if cmdp is None:
            raise ValueError("exact measurement needs the generating CMDP")
        return evaluate_policy_exact(cmdp, policy)
    return is_estimate(data, policy, config.clip, config.ope_mode).x_hat


# ---------------------------------------------------------------------------
# training loop

class TrainingError(RuntimeError):
    """Training stopped early; ``traces`` holds the rounds completed so far, per mixer."""

    def __init__(self, message: str, traces: dict):
        super().__init__(message)
        self.traces = traces


class TrainResult(NamedTuple):
    policy: object  # AimPolicy
    lambda_hat: np.ndarray
    trace: TrainTrace


def train(problem: Union[Cmdp, TransitionDataset], tau, config: TrainConfig,
          cmdp: Optional[Cmdp] = None) -> TrainResult:
    """Run the primal-dual loop and return the mixed policy, the averaged multiplier and the trace.

    ``problem`` is a :class:`Cmdp` for exact best responses or a
    :class:`TransitionDataset` for fitted ones.  In fitted mode ``cmdp`` is only
    consulted when ``config.measurement == 'exact'``.
    """
    return train_mixers(problem, tau, config, [config.mixer], cmdp)[config.mixer]


def train_mixers(problem: Union[Cmdp, TransitionDataset], tau, config: TrainConfig,
                 mixers, cmdp: Optional[Cmdp] = None) -> dict:
    """One primal-dual run feeding several mixers at once.

    The multiplier and best-response sequence never depends on the mixer, so
    the result for each name equals ``train`` with ``config.mixer`` set to it.
    """
    mixers = list(dict.fromkeys(mixers))
    configs = {name: replace(config, mixer=name) for name in mixers}
    for cfg in configs.values():
        cfg.validate()
    tau = tau if isinstance(tau, ConstraintSpec) else ConstraintSpec(tau)
    exact = config.best_response == "exact"
    if exact:
        if not isinstance(problem, Cmdp):
            raise TypeError("exact best responses need a Cmdp")
        cmdp = problem
        reward_range = cmdp.reward_range()
    else:
        if not isinstance(problem, TransitionDataset):
            raise TypeError("fitted best responses need a TransitionDataset")
        fitted = _FittedProblem(problem, config)
        q = fitted.new_q()
        reward_range = float(np.ptp(problem.rewards)) / (1.0 - fitted.gamma) if len(problem) else 0.0
    if cmdp is not None and cmdp.m != tau.m:
        raise ValueError("CMDP cost dimension differs from the constraint count")

    lambda_max = config.lambda_max or default_lambda_max(reward_range, tau.tau)
    lam = np.zeros(tau.m) if config.lambda_init is None else np.asarray(config.lambda_init, dtype=float)
    if lam.shape != (tau.m,) or np.any(lam < 0):
        raise ValueError("lambda_init must be a nonnegative vector of length m")

    runs = {}
    for name, cfg in configs.items():
        runs[name] = (make_mixer(name, tau), TrainTrace(metadata={
            "mixer": name,
            "best_response": config.best_response,
            "measurement": "exact" if exact else config.measurement,
            "lambda_max": lambda_max,
            "config_digest": cfg.digest(),
            "seed": config.seed,
            "m": tau.m,
            "tau": tau.tau.tolist(),
        }))
    measured: dict[str, np.ndarray] = {}
    cached_br: Optional[tuple[bytes, DeterministicPolicy, np.ndarray]] = None
    pending: list[np.ndarray] = []
    n_updates = 0
    try:
        for t in range(1, config.T + 1):
            lam_t = lam.copy()
            if exact:
                if cached_br is None or cached_br[0] != lam_t.tobytes():
                    policy, x = best_response_exact(cmdp, lam_t, tau)
                    cached_br = (lam_t.tobytes(), policy, x)
                _, policy, x = cached_br
            else:
                for _ in range(config.sweeps_per_step):
                    fitted.sweep(q, lam_t, tau)
                policy = policy_from_q(q.copy())
                if policy.policy_id not in measured:
                    measured[policy.policy_id] = _measure(policy, config, problem, cmdp)
                x = measured[policy.policy_id]

            exported = t % config.export_every == 0
            pending.append(x)
            updated = t % config.lambda_update_every == 0
            if updated:
                n_updates += 1
                eta = learning_rate(n_updates, config.lr_rule, config.lr_scale)
                lam = ogd_step(lam, np.mean(pending, axis=0), tau, n_updates, lr=eta)
                pending = []
            x_rec = np.asarray(x, dtype=float).copy()
            value = lagrangian(x, lam_t, tau)
            for mixer, trace in runs.values():
                error = ""
                if exported:
                    try:
                        mixer.update(policy, x)
                    except GeometryError as exc:
                        error = f"mixer update failed: {exc}"
                        log.warning("round %d: %s", t, error)
                target = mixer.target
                trace.records.append(RoundRecord(
                    t=t, lam=lam_t, x_pi=x_rec,
                    target=None if target is None else np.asarray(target).copy(),
                    lagrangian=value, active_size=mixer.active_size,
                    stored_parameters=mixer.stored_parameters, policy_id=policy.policy_id,
                    exported=exported, lambda_updated=updated, error=error,
                ))
    except Exception as exc:
        raise TrainingError(f"training failed at round {len(next(iter(runs.values()))[1].records) + 1}: {exc}",
                            {name: trace for name, (_, trace) in runs.items()}) from exc

    results = {}
    for name, (mixer, trace) in runs.items():
        lams = trace.lambdas()
        trace.lambda_hat = lams.mean(axis=0)
        trace.regret = realized_regret(lams, trace.measurements(), tau, lambda_max)
        results[name] = TrainResult(mixer.policy, trace.lambda_hat.copy(), trace)
    return results


def immediate_tables(cmdp: Optional[Cmdp] = None, data: Optional[TransitionDataset] = None):
    """Expected one-step reward and cost per state-action pair.

    Taken from ``cmdp`` or, when ``data`` is given, estimated by per-pair sample
    means (pairs never logged get zeros).
    """
    if data is None:
        return cmdp.reward, cmdp.cost
    S = int(data.metadata.get("n_states", cmdp.n_states if cmdp is not None else data.states.max() + 1))
    A = int(data.metadata.get("n_actions", cmdp.n_actions if cmdp is not None else data.actions.max() + 1))
    flat = data.states * A + data.actions
    inv = 1.0 / np.maximum(np.bincount(flat, minlength=S * A), 1)
    r = (np.bincount(flat, weights=data.rewards, minlength=S * A) * inv).reshape(S, A)
    c = np.stack([(np.bincount(flat, weights=data.costs[:, j], minlength=S * A) * inv).reshape(S, A)
                  for j in range(data.m)], axis=-1)
    return r, c


def myopic_baseline(cmdp: Cmdp, tau, data: Optional[TransitionDataset] = None
                    ) -> tuple[DeterministicPolicy, float, np.ndarray]:
    """Best feasible greedy policy on the immediate penalized reward ``r - s * sum_j c_j``.

    The greedy action only changes where two actions tie, so every scale
    ``s >= 0`` is covered by the breakpoints and the midpoints between them.
    Among the feasible policies on that path the one with the largest exact
    J_r wins (smallest ``s`` on ties); the one-step tables come from ``data``
    when given.  Returns the policy, ``s`` and its exact measurement.  If none
    is feasible, the policy with the smallest constraint violation is returned.
    """
    tau = tau if isinstance(tau, ConstraintSpec) else ConstraintSpec(tau)
    r, c = immediate_tables(cmdp, data)
    total_c = c.sum(axis=-1)
    dr = r[:, :, None] - r[:, None, :]
    dc = total_c[:, :, None] - total_c[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cuts = np.where(np.abs(dc) > 1e-15, dr / dc, -1.0)
    cuts = np.unique(cuts[cuts > 0])
    scales = np.r_[0.0, 0.5 * (cuts[:-1] + cuts[1:]), cuts[-1:] + 1.0] if cuts.size else np.zeros(1)
    best, fallback = None, None
    for scale in scales:
        policy = DeterministicPolicy(greedy_actions(r - scale * total_c))
        x = evaluate_policy_exact(cmdp, policy)
        if is_feasible(x, tau):
            if best is None or x[0] > best[2][0]:
                best = (policy, float(scale), x)
        else:
            dist = float(np.linalg.norm(np.maximum(0.0, x[1:] - tau.tau)))
            if fallback is None or dist < fallback[0]:
                fallback = (dist, (policy, float(scale), x))
    return best if best is not None else fallback[1]


def duality_gap(cmdp: Cmdp, mu_target, lambda_hat, tau, trace: Optional[TrainTrace] = None,
                lambda_max: Optional[float] = None) -> tuple[float, float]:
    """``max_pi L(pi, lambda_hat) - min_lam L(mu, lam)`` and the bound ``Regret_T / T``.

    The inner minimum is taken over the same box ``[0, lambda_max]^m`` as the
    regret comparator; for feasible ``mu`` it is J_r.  The bound is NaN
    without a trace.
    """
    tau = tau if isinstance(tau, ConstraintSpec) else ConstraintSpec(tau)
    if lambda_max is None:
        lambda_max = trace.metadata["lambda_max"] if trace is not None else default_lambda_max(cmdp.reward_range(), tau.tau)
    _, x_best = best_response_exact(cmdp, lambda_hat, tau)
    upper = lagrangian(x_best, lambda_hat, tau)
    mu_target = np.asarray(mu_target, dtype=float)
    if np.all(mu_target[1:] <= tau.tau + FEASIBILITY_TOL):
        lower = float(mu_target[0])
    else:
        lower = box_min_lagrangian(mu_target, tau, lambda_max)
    bound = trace.regret / trace.T if trace is not None and trace.T else float("nan")
    return upper - lower, bound
