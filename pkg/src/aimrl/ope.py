"""Clipped importance-sampling evaluation of deterministic and mixed policies."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aim import AimPolicy
from .envs import TransitionDataset

DEFAULT_CLIP = 20.0
MODES = ("plain", "self_normalized")


@dataclass
class OpeEstimate:
    """Estimated measurement vector plus the diagnostics of the weights behind it."""

    x_hat: np.ndarray
    n_episodes: int
    effective_sample_size: float
    clip: float
    mode: str
    n_matched: int = 0
    max_weight: float = 0.0
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "x_hat": [float(v) for v in self.x_hat],
            "n_episodes": int(self.n_episodes),
            "effective_sample_size": float(self.effective_sample_size),
            "clip": float(self.clip),
            "mode": self.mode,
            "n_matched": int(self.n_matched),
            "max_weight": float(self.max_weight),
            "flagged": bool(self.flagged),
        }


class _Episodes:
    """Per-episode reductions of a dataset, computed once and reused."""

    def __init__(self, data: TransitionDataset):
        _, self.inverse = np.unique(data.episode_ids, return_inverse=True)
        self.n_present = int(self.inverse.max()) + 1 if len(data) else 0
        disc = data.discount ** data.step_indices
        values = np.column_stack([data.rewards, data.costs]) * disc[:, None]
        self.returns = np.column_stack([
            np.bincount(self.inverse, weights=values[:, j], minlength=self.n_present)
            for j in range(values.shape[1])
        ]) if len(data) else np.zeros((0, data.m + 1))
        self.log_inv_prop = np.bincount(self.inverse, weights=-np.log(data.propensities), minlength=self.n_present)


def _episodes(data: TransitionDataset) -> _Episodes:
    cache = data.__dict__.get("_episode_cache")
    if cache is None or cache[0] != len(data):
        cache = (len(data), _Episodes(data))
        data.__dict__["_episode_cache"] = cache
    return cache[1]


def episode_weights(data: TransitionDataset, policy, clip: float = DEFAULT_CLIP) -> np.ndarray:
    """Clipped importance weight of every episode present in ``data``."""
    if clip <= 0:
        raise ValueError("clip must be positive")
    actions = np.asarray(getattr(policy, "actions", policy), dtype=np.int64)
    ep = _episodes(data)
    mismatch = actions[data.states] != data.actions
    missed = np.bincount(ep.inverse, weights=mismatch.astype(float), minlength=ep.n_present)
    with np.errstate(over="ignore"):
        raw = np.where(missed == 0, np.exp(ep.log_inv_prop), 0.0)
    return np.minimum(raw, clip)


def is_estimate(data: TransitionDataset, policy, clip: float = DEFAULT_CLIP, mode: str = "plain") -> OpeEstimate:
    """Per-episode importance sampling with weights clipped at ``clip``.

    Plain mode averages ``w * G`` over all episodes; self-normalized mode divides
    by the weight total instead.  Episodes without any logged transition count
    with weight 1 and zero return.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not hasattr(data, "propensities") or data.propensities is None:
        raise ValueError("dataset lacks behavior propensities")
    n = max(data.n_episodes, _episodes(data).n_present)
    w = episode_weights(data, policy, clip)
    G = _episodes(data).returns
    n_empty = n - len(w)
    total_w = float(w.sum()) + n_empty
    sq_w = float(w @ w) + n_empty
    weighted = w @ G if len(w) else np.zeros(data.m + 1)
    n_matched = int(np.count_nonzero(w))
    if total_w == 0.0:
        return OpeEstimate(np.zeros(data.m + 1), n, 0.0, clip, mode, 0, 0.0, True)
    x_hat = weighted / (n if mode == "plain" else total_w)
    ess = total_w**2 / sq_w
    return OpeEstimate(x_hat, n, ess, clip, mode, n_matched, float(w.max()) if len(w) else 1.0, False)


def evaluate_mixed(data: TransitionDataset, mu: AimPolicy, clip: float = DEFAULT_CLIP, mode: str = "plain") -> OpeEstimate:
    """Weighted sum of per-policy estimates, using linearity of the measurement in the mixture."""
    if mu.empty:
        raise ValueError("cannot evaluate an empty mixed policy")
    parts = [is_estimate(data, p, clip, mode) for p in mu.policies]
    x_hat = sum(w * e.x_hat for w, e in zip(mu.weights, parts))
    ess = float(sum(w * e.effective_sample_size for w, e in zip(mu.weights, parts)))
    return OpeEstimate(
        np.asarray(x_hat, dtype=float), parts[0].n_episodes, ess, clip, mode,
        n_matched=max(e.n_matched for e in parts),
        max_weight=max(e.max_weight for e in parts),
        flagged=any(e.flagged for e in parts),
    )
