"""Independent reference computations used only by the test suite."""
import itertools

import numpy as np
from scipy.optimize import linprog


def occupancy_lp_optimum(cmdp, tau):
    """Optimal constrained value via the discounted occupancy-measure LP."""
    S, A = cmdp.n_states, cmdp.n_actions
    gamma = cmdp.discount
    n = S * A
    # flow: sum_a d(s', a) - gamma * sum_{s,a} P(s'|s,a) d(s,a) = rho(s')
    A_eq = np.zeros((S, n))
    for s in range(S):
        for a in range(A):
            col = s * A + a
            A_eq[s, col] += 1.0
            A_eq[:, col] -= gamma * cmdp.transition[s, a]
    A_ub = cmdp.cost.reshape(n, -1).T
    res = linprog(-cmdp.reward.reshape(n), A_ub=A_ub, b_ub=np.asarray(tau.tau),
                  A_eq=A_eq, b_eq=cmdp.initial_dist, bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return -res.fun


def mixture_lp_optimum(points, tau):
    """max sum w_i x_i[0] s.t. sum w_i x_i[1:] <= tau, w in the simplex."""
    points = np.asarray(points, dtype=float)
    k = len(points)
    res = linprog(-points[:, 0], A_ub=points[:, 1:].T, b_ub=np.asarray(tau, dtype=float),
                  A_eq=np.ones((1, k)), b_eq=[1.0], bounds=(0, None), method="highs")
    if res.status != 0:
        return None
    return -res.fun


def all_deterministic_policies(n_states, n_actions, states=None):
    states = range(n_states) if states is None else states
    states = list(states)
    for choice in itertools.product(range(n_actions), repeat=len(states)):
        actions = np.zeros(n_states, dtype=np.int64)
        actions[states] = choice
        yield actions


def in_convex_hull_lp(points, x, tol=1e-9):
    """Brute-force: is there w >= 0, sum w = 1, points.T w = x?"""
    points = np.asarray(points, dtype=float)
    k, d = points.shape
    A_eq = np.vstack([points.T, np.ones(k)])
    b_eq = np.r_[x, 1.0]
    # minimize total slack of |A w - b|
    n_slack = d + 1
    c = np.r_[np.zeros(k), np.ones(2 * n_slack)]
    A = np.hstack([A_eq, np.eye(n_slack), -np.eye(n_slack)])
    res = linprog(c, A_eq=A, b_eq=b_eq, bounds=(0, None), method="highs")
    return res.status == 0 and res.fun <= tol * max(1.0, np.abs(points).max())


def in_affine_hull_lstsq(points, x, tol=1e-9):
    points = np.asarray(points, dtype=float)
    A = np.vstack([points.T, np.ones(len(points))])
    b = np.r_[x, 1.0]
    w, *_ = np.linalg.lstsq(A, b, rcond=None)
    return np.linalg.norm(A @ w - b) <= tol * max(1.0, np.abs(points).max(), np.abs(x).max())


def monte_carlo_measurement(cmdp, actions, n_episodes, seed, max_steps=200):
    """Rollout average of discounted (reward, cost) returns, with standard errors."""
    rng = np.random.default_rng(seed)
    S = cmdp.n_states
    state = rng.choice(S, size=n_episodes, p=cmdp.initial_dist)
    ret = np.zeros((n_episodes, cmdp.m + 1))
    disc = 1.0
    cum = np.cumsum(cmdp.transition, axis=2)
    for _ in range(max_steps):
        a = actions[state]
        u = rng.random(n_episodes)
        nxt = np.minimum((cum[state, a] < u[:, None]).sum(axis=1), S - 1)
        r, c = cmdp.step_outcome(state, a, nxt)
        ret[:, 0] += disc * r
        ret[:, 1:] += disc * np.asarray(c).reshape(n_episodes, -1)
        disc *= cmdp.discount
        state = nxt
        if disc < 1e-14:
            break
    return ret.mean(axis=0), ret.std(axis=0, ddof=1) / np.sqrt(n_episodes)
