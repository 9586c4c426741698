"""Synthetic CMDPs and offline dataset collection under a logged behavior policy."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .cmdp import Cmdp, ConstraintSpec, DimensionError


def _one_step_cmdp(rewards, costs, discount: float, name: str) -> Cmdp:
    """Single decision state (0) whose every action leads to an absorbing terminal (1)."""
    rewards = np.asarray(rewards, dtype=float)
    costs = np.asarray(costs, dtype=float)
    n_actions, m = costs.shape
    P = np.zeros((2, n_actions, 2))
    P[:, :, 1] = 1.0
    R = np.zeros((2, n_actions))
    R[0] = rewards
    C = np.zeros((2, n_actions, m))
    C[0] = costs
    return Cmdp(P, R, C, discount, np.array([1.0, 0.0]), terminal=np.array([False, True]), name=name)


def example1_cmdp(tau: float, discount: float = 0.8) -> tuple[Cmdp, ConstraintSpec]:
    """Two actions in one state: action 0 has r=0, c=0; action 1 has r=1, c=1.

    The constrained optimum plays action 1 with probability ``tau`` and is worth ``tau``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    cmdp = _one_step_cmdp([0.0, 1.0], [[0.0], [1.0]], discount, f"example1(tau={tau!r})")
    return cmdp, ConstraintSpec([tau])


def simplex_cmdp(m: int, discount: float = 0.8) -> tuple[Cmdp, ConstraintSpec]:
    """One state, ``m + 1`` actions; action i >= 1 earns 1 and costs the unit vector e_i.

    With ``tau = 1/(m+1)`` on every coordinate, the optimum mixes all ``m + 1``
    actions uniformly and is worth ``m / (m + 1)``.
    """
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    m = int(m)
    rewards = np.r_[0.0, np.ones(m)]
    costs = np.vstack([np.zeros(m), np.eye(m)])
    cmdp = _one_step_cmdp(rewards, costs, discount, f"simplex(m={m})")
    return cmdp, ConstraintSpec(np.full(m, 1.0 / (m + 1)))


@dataclass
class MarketingConfig:
    """Parameters of the coupon-allocation simulator.

    A user is described by an activeness level in ``0..n_levels-1`` and whether
    they participated (redeemed a coupon) the previous day.  Offering coupon
    ``v`` at level ``l`` with yesterday-flag ``f`` makes the user participate
    with probability::

        clip(base_participation + level_gain * l + habit_bonus * f + coupon_gain * v, 0, 1)

    Participation earns reward 1 (the user is active that day) and costs ``v``.
    A participating user moves up one level with probability
    ``promote_prob[l]``, which is largest for inactive users; a
    non-participating user drops one level with probability ``demote_prob``.
    The episode lasts ``horizon`` days.  The spend threshold is
    ``budget_per_day * sum_{h < horizon} discount**h``.
    """

    n_levels: int = 4
    coupons: Sequence[float] = (1.0, 2.0, 3.0)
    horizon: int = 7
    discount: float = 0.8
    base_participation: float = 0.05
    level_gain: float = 0.2
    habit_bonus: float = 0.05
    coupon_gain: float = 0.08
    promote_prob: Sequence[float] = (0.6, 0.4, 0.2, 0.0)
    demote_prob: float = 0.3
    initial_levels: Sequence[float] = (0.4, 0.3, 0.2, 0.1)
    budget_per_day: float = 1.0

    def validate(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be a positive number of days")
        if len(self.coupons) == 0:
            raise ValueError("coupon set is empty")
        if self.n_levels < 1:
            raise ValueError("n_levels must be positive")
        if len(self.promote_prob) != self.n_levels or len(self.initial_levels) != self.n_levels:
            raise ValueError("promote_prob and initial_levels need one entry per level")
        if not np.isclose(sum(self.initial_levels), 1.0, atol=1e-12, rtol=0):
            raise ValueError("initial_levels must sum to 1")
        probs = list(self.promote_prob) + [self.demote_prob]
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError("drift probabilities must lie in [0, 1]")
        if any(v < 0 for v in self.coupons):
            raise ValueError("coupon values must be nonnegative")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")

    def participation(self, level: int, flag: int, coupon: float) -> float:
        q = self.base_participation + self.level_gain * level + self.habit_bonus * flag + self.coupon_gain * coupon
        return float(np.clip(q, 0.0, 1.0))

    @property
    def tau(self) -> float:
        return self.budget_per_day * sum(self.discount**h for h in range(self.horizon))

    def state_index(self, day: int, level: int, flag: int) -> int:
        return (day * self.n_levels + level) * 2 + flag

    @property
    def n_states(self) -> int:
        return self.n_levels * 2 * self.horizon + 1


def marketing_cmdp(config: MarketingConfig | None = None, **overrides) -> tuple[Cmdp, ConstraintSpec]:
    """Day-indexed coupon allocation CMDP with ``n_levels * 2 * horizon + 1`` states.

    State ``(day, level, flag)``; action = index into ``config.coupons``.  The
    last state is the absorbing end-of-campaign terminal.  On the final day the
    realized reward and cost are their expectations because the terminal state
    does not record participation.
    """
    cfg = config if config is not None else MarketingConfig()
    if overrides:
        cfg = MarketingConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    L, H, A = cfg.n_levels, cfg.horizon, len(cfg.coupons)
    S = cfg.n_states
    end = S - 1
    P = np.zeros((S, A, S))
    out_r = np.zeros((S, A, S))
    out_c = np.zeros((S, A, S, 1))
    P[end, :, end] = 1.0
    for day in range(H):
        for level in range(L):
            for flag in (0, 1):
                s = cfg.state_index(day, level, flag)
                for a, v in enumerate(cfg.coupons):
                    q = cfg.participation(level, flag, v)
                    if day == H - 1:
                        P[s, a, end] = 1.0
                        out_r[s, a, end] = q
                        out_c[s, a, end, 0] = q * v
                        continue
                    up = min(level + 1, L - 1)
                    down = max(level - 1, 0)
                    promote = cfg.promote_prob[level]
                    moves = [
                        (cfg.state_index(day + 1, up, 1), q * promote, 1),
                        (cfg.state_index(day + 1, level, 1), q * (1 - promote), 1),
                        (cfg.state_index(day + 1, down, 0), (1 - q) * cfg.demote_prob, 0),
                        (cfg.state_index(day + 1, level, 0), (1 - q) * (1 - cfg.demote_prob), 0),
                    ]
                    for s2, p, joined in moves:
                        P[s, a, s2] += p
                        out_r[s, a, s2] = float(joined)
                        out_c[s, a, s2, 0] = v * joined
    R = np.einsum("ijk,ijk->ij", P, out_r)
    C = np.einsum("ijk,ijkl->ijl", P, out_c)
    init = np.zeros(S)
    for level, p in enumerate(cfg.initial_levels):
        init[cfg.state_index(0, level, 0)] = p
    terminal = np.zeros(S, dtype=bool)
    terminal[end] = True
    cmdp = Cmdp(P, R, C, cfg.discount, init, terminal=terminal,
                outcome_reward=out_r, outcome_cost=out_c, name="marketing")
    return cmdp, ConstraintSpec([cfg.tau])


class TransitionSample(NamedTuple):
    state: int
    action: int
    next_state: int
    reward: float
    cost: np.ndarray
    behavior_propensity: float
    episode_id: int
    step_index: int
    done: bool


@dataclass
class TransitionDataset:
    """Logged transitions stored column-wise.

    ``done`` marks transitions whose next state is terminal.  ``metadata`` keeps
    the source CMDP name, behavior policy id, collection seed, ``m``, the
    discount and the number of episodes simulated.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    propensities: np.ndarray
    episode_ids: np.ndarray
    step_indices: np.ndarray
    dones: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.next_states = np.asarray(self.next_states, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        m = self.metadata.get("m")
        self.costs = np.asarray(self.costs, dtype=float).reshape(len(self.rewards), -1 if m is None else int(m))
        self.propensities = np.asarray(self.propensities, dtype=float)
        self.episode_ids = np.asarray(self.episode_ids, dtype=np.int64)
        self.step_indices = np.asarray(self.step_indices, dtype=np.int64)
        self.dones = np.asarray(self.dones, dtype=bool)
        n = len(self.rewards)
        for col in (self.states, self.actions, self.next_states, self.propensities,
                    self.episode_ids, self.step_indices, self.dones):
            if col.shape != (n,):
                raise DimensionError("dataset columns have different lengths")
        if np.any(self.propensities <= 0) or np.any(self.propensities > 1):
            raise ValueError("behavior propensities must lie in (0, 1]")
        self.metadata.setdefault("m", int(self.costs.shape[1]))
        if n:
            self._check_contiguous()

    def _check_contiguous(self):
        starts = np.r_[True, self.episode_ids[1:] != self.episode_ids[:-1]]
        ids = self.episode_ids[starts]
        if len(np.unique(ids)) != len(ids):
            raise ValueError("episode transitions must be contiguous")
        expected = np.arange(len(self.episode_ids)) - np.maximum.accumulate(np.where(starts, np.arange(len(starts)), 0))
        if not np.array_equal(self.step_indices, expected):
            raise ValueError("step indices must count 0, 1, 2, ... within each episode")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def m(self) -> int:
        return int(self.metadata["m"])

    @property
    def discount(self) -> float:
        return float(self.metadata["discount"])

    @property
    def n_episodes(self) -> int:
        if "n_episodes" in self.metadata:
            return int(self.metadata["n_episodes"])
        return len(np.unique(self.episode_ids))

    def samples(self) -> Iterator[TransitionSample]:
        for i in range(len(self)):
            yield TransitionSample(int(self.states[i]), int(self.actions[i]), int(self.next_states[i]),
                                   float(self.rewards[i]), self.costs[i].copy(), float(self.propensities[i]),
                                   int(self.episode_ids[i]), int(self.step_indices[i]), bool(self.dones[i]))

    @classmethod
    def from_samples(cls, samples: Sequence[TransitionSample], metadata: dict) -> "TransitionDataset":
        cols = list(zip(*samples)) if samples else [[]] * 9
        m = int(metadata["m"])
        costs = np.asarray(cols[4], dtype=float).reshape(len(samples), m)
        return cls(cols[0], cols[1], cols[2], cols[3], costs, cols[5], cols[6], cols[7], cols[8], dict(metadata))


def uniform_behavior(cmdp: Cmdp) -> np.ndarray:
    return np.full((cmdp.n_states, cmdp.n_actions), 1.0 / cmdp.n_actions)


def _check_behavior(cmdp: Cmdp, behavior: np.ndarray) -> np.ndarray:
    behavior = np.asarray(behavior, dtype=float)
    if behavior.shape != (cmdp.n_states, cmdp.n_actions):
        raise DimensionError(f"behavior must be {(cmdp.n_states, cmdp.n_actions)}")
    live = ~cmdp.terminal
    if np.any(np.abs(behavior[live].sum(axis=1) - 1.0) > 1e-12) or np.any(behavior < 0):
        raise ValueError("behavior rows must be probability vectors")
    if np.any(behavior[live] <= 0):
        raise ValueError("behavior must give every action positive probability in every state")
    return behavior


def _draw(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling, one row of ``cum`` per draw."""
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def collect_dataset(cmdp: Cmdp, behavior, n_episodes: int, seed: int,
                    max_steps: int = 1000, behavior_id: str = "custom") -> TransitionDataset:
    """Simulate ``n_episodes`` under ``behavior`` (an (S, A) table) and log every step.

    Episodes run in lockstep.  Step ``k`` of episode ``i`` consumes entry ``i``
    of two streams seeded by ``(seed, k, 0)`` and ``(seed, k, 1)``, so each
    episode's randomness depends only on ``(seed, episode_id)``.
    """
    if n_episodes < 0:
        raise ValueError("n_episodes must be nonnegative")
    behavior = _check_behavior(cmdp, behavior)
    init_rng = np.random.default_rng([seed, 0xE9])
    state = _draw(np.cumsum(np.broadcast_to(cmdp.initial_dist, (n_episodes, cmdp.n_states)), axis=1),
                  init_rng.random(n_episodes))
    episode = np.arange(n_episodes)
    alive = ~cmdp.terminal[state]
    beh_cum = np.cumsum(behavior, axis=1)
    trans_cum = np.cumsum(cmdp.transition, axis=2)
    chunks = []
    for k in range(max_steps):
        if not alive.any():
            break
        u_act = np.random.default_rng([seed, k, 0]).random(n_episodes)[alive]
        u_next = np.random.default_rng([seed, k, 1]).random(n_episodes)[alive]
        s = state[alive]
        a = _draw(beh_cum[s], u_act)
        s2 = _draw(trans_cum[s, a], u_next)
        r, c = cmdp.step_outcome(s, a, s2)
        done = cmdp.terminal[s2]
        chunks.append((episode[alive], k, s, a, s2, r, c, behavior[s, a], done))
        state[alive] = s2
        alive[alive] = ~done
    if chunks:
        ep = np.concatenate([ch[0] for ch in chunks])
        step = np.concatenate([np.full(len(ch[0]), ch[1]) for ch in chunks])
        cols = [np.concatenate([ch[i] for ch in chunks]) for i in range(2, 9)]
        order = np.lexsort((step, ep))
        ep, step = ep[order], step[order]
        cols = [col[order] for col in cols]
    else:
        ep = step = np.zeros(0, dtype=np.int64)
        cols = [np.zeros(0, dtype=np.int64)] * 3 + [np.zeros(0), np.zeros((0, cmdp.m)), np.zeros(0), np.zeros(0, dtype=bool)]
    s, a, s2, r, c, prop, done = cols
    metadata = {
        "source": cmdp.name,
        "behavior": behavior_id,
        "seed": int(seed),
        "m": cmdp.m,
        "discount": cmdp.discount,
        "n_episodes": int(n_episodes),
        "n_states": cmdp.n_states,
        "n_actions": cmdp.n_actions,
    }
    return TransitionDataset(s, a, s2, r, c, prop, ep, step, done, metadata)
