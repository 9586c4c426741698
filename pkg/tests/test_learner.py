import numpy as np
import pytest

from aimrl import learner
from aimrl.cmdp import ConstraintSpec, DeterministicPolicy, evaluate_policy_exact, is_feasible, lagrangian
from aimrl.envs import collect_dataset, example1_cmdp, marketing_cmdp, simplex_cmdp, uniform_behavior
from aimrl.geometry import GeometryError
from aimrl.learner import (
    TabularQ,
    TrainConfig,
    TrainingError,
    best_response_exact,
    best_response_fitted,
    duality_gap,
    greedy_actions,
    learning_rate,
    myopic_baseline,
    ogd_step,
    train,
    train_mixers,
)

from oracles import all_deterministic_policies, occupancy_lp_optimum
from test_cmdp import three_state

EXACT_FAST = dict(lambda_update_every=1, export_every=1)


class TestOgd:
    def test_examples(self):
        np.testing.assert_allclose(ogd_step([0.5], [0.0, 0.8], [0.3], 4), [0.75])
        np.testing.assert_allclose(ogd_step([0.1], [0.0, 0.0], [1.0], 1), [0.0])
        np.testing.assert_allclose(ogd_step([0.2, 0.0], [0.0, 0.5, 0.1], [0.3, 0.3], 1), [0.4, 0.0])

    def test_learning_rates(self):
        assert learning_rate(4) == 0.5
        assert learning_rate(9, "constant", 0.1) == 0.1
        with pytest.raises(ValueError):
            learning_rate(0)
        with pytest.raises(ValueError):
            learning_rate(1, "cosine")


class TestExactBestResponse:
    def test_example1(self):
        cmdp, tau = example1_cmdp(0.3)
        assert best_response_exact(cmdp, [0.5], tau)[0].actions[0] == 1
        assert best_response_exact(cmdp, [2.0], tau)[0].actions[0] == 0

    def test_ties_to_lowest_index(self):
        cmdp, tau = simplex_cmdp(2)
        policy, x = best_response_exact(cmdp, [0.0, 0.0], tau)
        assert policy.actions[0] == 1
        np.testing.assert_allclose(x, [1.0, 1.0, 0.0])

    @pytest.mark.parametrize("lam", [[0.0, 0.0], [0.3, 1.2], [2.0, 0.1], [5.0, 5.0]])
    def test_maximizes_lagrangian(self, lam):
        cmdp = three_state()
        tau = ConstraintSpec([1.5, 2.0])
        _, x = best_response_exact(cmdp, lam, tau)
        best = max(lagrangian(evaluate_policy_exact(cmdp, DeterministicPolicy(a)), lam, tau)
                   for a in all_deterministic_policies(3, 2))
        assert lagrangian(x, lam, tau) >= best - 1e-9

    def test_greedy_tie_tolerance(self):
        np.testing.assert_array_equal(greedy_actions(np.array([[1.0, 1.0 + 1e-12, 0.0], [0.0, 2.0, 1.0]])), [0, 1])


def example1_data(seed, n=10_000, tau=0.3):
    cmdp, spec = example1_cmdp(tau)
    return cmdp, spec, collect_dataset(cmdp, uniform_behavior(cmdp), n, seed)


class TestFittedBestResponse:
    def test_agrees_with_exact(self):
        hits = {0.5: 0, 2.0: 0}
        for seed in range(100):
            _, tau, data = example1_data(seed)
            for lam in hits:
                hits[lam] += int(best_response_fitted(data, [lam], tau).policy.actions[0] == (1 if lam == 0.5 else 0))
        assert hits[0.5] >= 99 and hits[2.0] >= 99

    def test_empty_dataset(self):
        cmdp, tau = example1_cmdp(0.3)
        empty = collect_dataset(cmdp, uniform_behavior(cmdp), 0, seed=0)
        with pytest.raises(ValueError):
            best_response_fitted(empty, [0.5], tau)

    def test_unobserved_pairs_flagged(self):
        cmdp, tau, data = example1_data(0, n=50)
        q = best_response_fitted(data, [0.5], tau).policy.q
        assert q.observed[0].all() and not q.observed[1].any()

    def test_linear_one_hot_matches_tabular(self):
        cmdp, tau = marketing_cmdp()
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 2000, seed=4)
        tab = best_response_fitted(data, [0.2], tau, TrainConfig(best_response="fitted", fitted_sweeps=10))
        lin = best_response_fitted(data, [0.2], tau, TrainConfig(best_response="fitted", fitted_sweeps=10,
                                                                 q_kind="linear", ridge=1e-9))
        observed = tab.policy.q.observed.all(axis=1)
        np.testing.assert_array_equal(tab.policy.actions[observed], lin.policy.actions[observed])

    def test_full_batch_shortcut_matches_per_sample_fit(self):
        cmdp, tau = marketing_cmdp()
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 500, seed=8)
        problem = learner._FittedProblem(data, TrainConfig(best_response="fitted"))
        fast, slow = TabularQ(cmdp.n_states, 3), TabularQ(cmdp.n_states, 3)
        for _ in range(5):
            problem.sweep(fast, [0.3], tau)
            r = data.rewards - 0.3 * (data.costs[:, 0] - tau.tau[0])
            v = np.where(data.dones, 0.3 * tau.tau[0] / 0.2, slow.table.max(axis=1)[data.next_states])
            slow.fit(data.states, data.actions, r + 0.8 * v)
        np.testing.assert_allclose(fast.table, slow.table, atol=1e-12)

    def test_minibatch_sweeps_are_seeded(self):
        cmdp, tau, data = example1_data(1, n=2000)
        cfg = TrainConfig(best_response="fitted", batch_size=500, fitted_sweeps=5, seed=3)
        a = best_response_fitted(data, [0.5], tau, cfg).policy.q.table
        b = best_response_fitted(data, [0.5], tau, cfg).policy.q.table
        np.testing.assert_array_equal(a, b)

    def test_exact_measurement_needs_cmdp(self):
        _, tau, data = example1_data(0, n=100)
        with pytest.raises(ValueError):
            best_response_fitted(data, [0.5], tau, TrainConfig(best_response="fitted", measurement="exact"))


class TestTrain:
    def test_example1(self):
        cmdp, tau = example1_cmdp(0.3)
        res = train(cmdp, tau, TrainConfig(T=2000, mixer="aim_mean", **EXACT_FAST))
        assert abs(res.policy.target[0] - 0.3) <= 0.02
        assert res.policy.target[1] <= 0.32

    def test_trace_shape_and_lambda_average(self):
        cmdp, tau = example1_cmdp(0.3)
        res = train(cmdp, tau, TrainConfig(T=300))
        lams = res.trace.lambdas()
        assert res.trace.T == 300 and len(lams) == 300
        assert np.all(lams >= 0)
        np.testing.assert_allclose(res.lambda_hat, lams.mean(axis=0), atol=1e-12)
        assert sum(r.exported for r in res.trace.records) == 3
        assert sum(r.lambda_updated for r in res.trace.records) == 30

    def test_best_response_every_round(self):
        cmdp, tau = simplex_cmdp(2)
        res = train(cmdp, tau, TrainConfig(T=200, **EXACT_FAST))
        points = [evaluate_policy_exact(cmdp, DeterministicPolicy([a, 0])) for a in range(3)]
        for rec in res.trace.records:
            assert rec.lagrangian >= max(lagrangian(p, rec.lam, tau) for p in points) - 1e-9

    def test_store_all_matches_aim_mean(self):
        cmdp, tau = simplex_cmdp(2)
        runs = {name: train(cmdp, tau, TrainConfig(T=400, mixer=name, **EXACT_FAST)) for name in ("store_all", "aim_mean")}
        a, b = runs["store_all"].trace, runs["aim_mean"].trace
        np.testing.assert_array_equal(a.lambdas(), b.lambdas())
        assert [r.policy_id for r in a.records] == [r.policy_id for r in b.records]
        np.testing.assert_allclose(a.targets(), b.targets(), atol=1e-8)

    def test_parameter_counts(self):
        cmdp, tau = simplex_cmdp(2)
        runs = train_mixers(cmdp, tau, TrainConfig(T=500, **EXACT_FAST), ["store_all", "aim_mean", "single_best"])
        size = cmdp.n_states
        assert runs["store_all"].trace.peak_parameters == 500 * size
        assert runs["aim_mean"].trace.peak_parameters <= (tau.m + 2) * size
        assert runs["single_best"].trace.peak_parameters == size

    def test_train_mixers_matches_separate_runs(self):
        cmdp, tau, data = example1_data(2, n=3000)
        cfg = TrainConfig(T=300, best_response="fitted", export_every=10)
        joint = train_mixers(data, tau, cfg, ["aim_greedy", "aim_mean"])
        for name, res in joint.items():
            alone = train(data, tau, TrainConfig(**{**cfg.__dict__, "mixer": name}))
            np.testing.assert_array_equal(alone.trace.targets(), res.trace.targets())
            assert alone.trace.metadata == res.trace.metadata

    def test_deterministic(self):
        cmdp, tau, data = example1_data(3, n=2000)
        cfg = TrainConfig(T=200, best_response="fitted", export_every=10, mixer="aim_greedy")
        a, b = train(data, tau, cfg), train(data, tau, cfg)
        np.testing.assert_array_equal(a.trace.lambdas(), b.trace.lambdas())
        np.testing.assert_array_equal(a.trace.targets(), b.trace.targets())
        assert a.trace.regret == b.trace.regret

    def test_problem_type_checks(self):
        cmdp, tau, data = example1_data(0, n=10)
        with pytest.raises(TypeError):
            train(data, tau, TrainConfig(T=5))
        with pytest.raises(TypeError):
            train(cmdp, tau, TrainConfig(T=5, best_response="fitted"))
        with pytest.raises(ValueError):
            train(cmdp, tau, TrainConfig(T=5, lambda_init=[-1.0]))

    @pytest.mark.parametrize("bad", [{"T": 0}, {"mixer": "nope"}, {"best_response": "sgd"}, {"gamma": 1.0},
                                     {"fitted_step_size": 0.0}, {"lr_rule": "cosine"}])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()

    def test_failed_mixer_round_is_recorded(self, monkeypatch):
        cmdp, tau = example1_cmdp(0.3)
        from aimrl import aim

        calls = {"n": 0}
        original = aim.AimMeanMixer._step

        def flaky(self, ref, x):
            calls["n"] += 1
            if calls["n"] == 3:
                raise GeometryError("synthetic failure")
            return original(self, ref, x)

        monkeypatch.setattr(aim.AimMeanMixer, "_step", flaky)
        res = train(cmdp, tau, TrainConfig(T=6, **EXACT_FAST))
        errors = [r.t for r in res.trace.records if r.error]
        assert errors == [3]
        assert res.trace.records[2].active_size == res.trace.records[1].active_size

    def test_training_error_keeps_partial_trace(self, monkeypatch):
        cmdp, tau = example1_cmdp(0.3)
        calls = {"n": 0}
        original = learner.best_response_exact

        def failing(*args):
            calls["n"] += 1
            if calls["n"] == 4:
                raise RuntimeError("solver crashed")
            return original(*args)

        monkeypatch.setattr(learner, "best_response_exact", failing)
        with pytest.raises(TrainingError) as info:
            train(cmdp, tau, TrainConfig(T=10, **EXACT_FAST))
        assert len(info.value.traces["aim_mean"].records) == 3


class TestDualityGap:
    def test_converged_run(self):
        cmdp, tau = example1_cmdp(0.3)
        res = train(cmdp, tau, TrainConfig(T=2000, **EXACT_FAST))
        gap, bound = duality_gap(cmdp, res.policy.target, res.lambda_hat, tau, res.trace)
        assert gap <= bound + 1e-6

    def test_saddle_point(self):
        cmdp, tau = example1_cmdp(0.3)
        gap, bound = duality_gap(cmdp, [0.3, 0.3], [1.0], tau)
        assert abs(gap) <= 1e-6 and np.isnan(bound)

    def test_bound_shrinks(self):
        cmdp, tau = example1_cmdp(0.3)
        bounds = []
        for T in (500, 2000):
            res = train(cmdp, tau, TrainConfig(T=T, lambda_init=[0.7], **EXACT_FAST))
            bounds.append(duality_gap(cmdp, res.policy.target, res.lambda_hat, tau, res.trace)[1])
        assert bounds[1] < bounds[0]


class TestMyopic:
    def test_example1(self):
        cmdp, tau = example1_cmdp(0.3)
        policy, scale, x = myopic_baseline(cmdp, tau)
        np.testing.assert_array_equal(x, [0.0, 0.0])

    def test_marketing_feasible_and_below_optimum(self):
        cmdp, tau = marketing_cmdp()
        _, _, x = myopic_baseline(cmdp, tau)
        assert is_feasible(x, tau)
        assert x[0] <= occupancy_lp_optimum(cmdp, tau) + 1e-9

    def test_from_data(self):
        cmdp, tau = marketing_cmdp()
        data = collect_dataset(cmdp, uniform_behavior(cmdp), 3000, seed=0)
        _, _, x = myopic_baseline(cmdp, tau, data)
        assert is_feasible(x, tau)
