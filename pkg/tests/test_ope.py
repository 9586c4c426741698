import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimrl.aim import AimPolicy
from aimrl.cmdp import constant_policy, evaluate_policy_exact
from aimrl.envs import TransitionDataset, collect_dataset, example1_cmdp, marketing_cmdp, uniform_behavior
from aimrl.ope import episode_weights, evaluate_mixed, is_estimate


def one_step_data(actions, rewards, costs, propensity=0.5):
    n = len(actions)
    return TransitionDataset(
        states=np.zeros(n, dtype=int), actions=actions, next_states=np.ones(n, dtype=int), rewards=rewards,
        costs=np.asarray(costs, dtype=float).reshape(n, 1), propensities=np.full(n, propensity),
        episode_ids=np.arange(n), step_indices=np.zeros(n, dtype=int), dones=np.ones(n, dtype=bool),
        metadata={"discount": 0.8, "m": 1},
    )


class TestIsEstimate:
    def test_hand_computed(self):
        data = one_step_data([1] * 5 + [0] * 5, [1.0] * 5 + [0.0] * 5, [1.0] * 5 + [0.0] * 5)
        est = is_estimate(data, constant_policy(2, 1), clip=20, mode="plain")
        np.testing.assert_allclose(est.x_hat, [1.0, 1.0])
        assert est.n_episodes == 10 and est.n_matched == 5
        assert est.effective_sample_size <= est.n_episodes

    def test_clip(self):
        data = one_step_data([1], [1.0], [1.0], propensity=0.01)
        est = is_estimate(data, constant_policy(2, 1), clip=20)
        assert est.max_weight == 20.0
        np.testing.assert_allclose(est.x_hat, [20.0, 20.0])

    def test_self_normalized(self):
        data = one_step_data([1] * 5 + [0] * 5, [1.0] * 5 + [0.0] * 5, [0.5] * 5 + [0.0] * 5)
        est = is_estimate(data, constant_policy(2, 1), clip=20, mode="self_normalized")
        np.testing.assert_allclose(est.x_hat, [1.0, 0.5])

    def test_no_match(self):
        data = one_step_data([0] * 4, [0.0] * 4, [0.0] * 4)
        est = is_estimate(data, constant_policy(2, 1))
        assert est.flagged and est.effective_sample_size == 0
        np.testing.assert_array_equal(est.x_hat, [0.0, 0.0])

    def test_bad_arguments(self):
        data = one_step_data([0], [0.0], [0.0])
        with pytest.raises(ValueError):
            is_estimate(data, constant_policy(2, 0), clip=0)
        with pytest.raises(ValueError):
            is_estimate(data, constant_policy(2, 0), mode="doubly_robust")
        data.propensities = None
        with pytest.raises(ValueError):
            is_estimate(data, constant_policy(2, 0))

    def test_multi_step_discounting(self):
        cmdp, _ = marketing_cmdp()
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 3000, seed=1)
        policy = constant_policy(cmdp.n_states, 0)
        est = is_estimate(data, policy, clip=np.inf, mode="self_normalized")
        exact = evaluate_policy_exact(cmdp, policy)
        # 3^-7 of episodes match; only a loose sanity check is possible here
        assert est.n_matched > 0
        assert np.all(np.abs(est.x_hat - exact) < 1.0)


class TestMixed:
    def test_single_policy_identical(self):
        cmdp, _ = example1_cmdp(0.3)
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 500, seed=0)
        p = constant_policy(2, 1)
        mu = AimPolicy([p], np.array([[1.0, 1.0]]), np.ones(1), np.array([1.0, 1.0]))
        np.testing.assert_array_equal(evaluate_mixed(data, mu).x_hat, is_estimate(data, p).x_hat)

    def test_half_half(self):
        cmdp, _ = example1_cmdp(0.3)
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 20_000, seed=1)
        mu = AimPolicy([constant_policy(2, 0), constant_policy(2, 1)], np.array([[0.0, 0.0], [1.0, 1.0]]),
                       np.array([0.5, 0.5]), np.array([0.5, 0.5]))
        np.testing.assert_allclose(evaluate_mixed(data, mu).x_hat, [0.5, 0.5], atol=0.02)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 1000))
    def test_linear_in_weights(self, w, seed):
        cmdp, _ = example1_cmdp(0.3)
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 200, seed=seed)
        p0, p1 = constant_policy(2, 0), constant_policy(2, 1)
        mu = AimPolicy([p0, p1], np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([w, 1 - w]), np.array([1 - w, 1 - w]))
        expected = w * is_estimate(data, p0).x_hat + (1 - w) * is_estimate(data, p1).x_hat
        np.testing.assert_allclose(evaluate_mixed(data, mu).x_hat, expected, atol=1e-12)

    def test_empty(self):
        cmdp, _ = example1_cmdp(0.3)
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 5, seed=0)
        with pytest.raises(ValueError):
            evaluate_mixed(data, AimPolicy())


class TestProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.5, 50), st.floats(0.5, 50), st.integers(0, 10_000))
    def test_monotone_clipping(self, c1, c2, seed):
        cmdp, _ = marketing_cmdp(horizon=2)
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 100, seed=seed)
        policy = constant_policy(cmdp.n_states, 2)
        lo, hi = sorted([c1, c2])
        assert np.all(episode_weights(data, policy, lo) <= episode_weights(data, policy, hi))

    def test_unbiased_without_clipping(self):
        cmdp, _ = example1_cmdp(0.3)
        policy = constant_policy(2, 1)
        exact = evaluate_policy_exact(cmdp, policy)
        estimates = np.array([is_estimate(collect_dataset(cmdp, uniform_behavior(cmdp), 10_000, seed=s),
                                          policy, clip=np.inf).x_hat for s in range(200)])
        se = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        assert np.all(np.abs(estimates.mean(axis=0) - exact) < 3 * se)
