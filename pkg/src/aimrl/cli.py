"""Command-line experiment harness: collect, train, evaluate, compare.

Every subcommand reads an experiment file in the store's structured format::

    {
      "format_version": 1,
      "kind": "experiment",
      "environment": {"name": "example1", "params": {"tau": 0.3}},
      "dataset": {"behavior": "uniform", "episodes": 10000, "seed": 0},
      "train": {"T": 2000, "mixer": "aim_mean", ...},
      "evaluation": {"clip": 20.0, "mode": "plain"},
      "compare": {"mixers": ["single_best", "aim_mean", "aim_greedy", "store_all"], "seeds": [0, 1, 2, 3, 4]},
      "output_dir": "runs/example1"
    }

Exit status is 0 on success, 2 for an invalid config or input file and 1 when
a run fails part way.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .aim import mixture_measurement
from .cmdp import Cmdp, ConstraintSpec, constraint_distance, evaluate_policy_exact, feasibility_objective
from .envs import MarketingConfig, TransitionDataset, collect_dataset, example1_cmdp, marketing_cmdp, simplex_cmdp, uniform_behavior
from .learner import TrainConfig, TrainingError, duality_gap, myopic_baseline, train_mixers
from .ope import MODES, evaluate_mixed
from .store import (
    FORMAT_VERSION,
    StoreError,
    dumps,
    format_float,
    load_dataset,
    load_document,
    load_policy_set,
    save_cmdp,
    save_dataset,
    save_document,
    save_policy_set,
    save_table,
    save_trace,
    write_atomic,
)

log = logging.getLogger("aimrl")

COMPARE_MIXERS = ("single_best", "aim_mean", "aim_greedy", "store_all")
ENVIRONMENTS = ("example1", "simplex", "marketing")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    environment: dict
    train: TrainConfig
    dataset: Optional[dict] = None
    evaluation: dict = field(default_factory=lambda: {"clip": 20.0, "mode": "plain"})
    compare: dict = field(default_factory=lambda: {"mixers": list(COMPARE_MIXERS), "seeds": [0]})
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {"format_version", "kind", "environment", "train", "dataset", "evaluation", "compare", "output_dir"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        if "environment" not in doc:
            raise ConfigError("config needs an environment section")
        env = doc["environment"]
        if not isinstance(env, dict) or env.get("name") not in ENVIRONMENTS:
            raise ConfigError(f"environment.name must be one of {ENVIRONMENTS}")
        train_doc = dict(doc.get("train", {}))
        names = {f.name for f in fields(TrainConfig)}
        if set(train_doc) - names:
            raise ConfigError(f"unknown train fields {sorted(set(train_doc) - names)}")
        try:
            train = TrainConfig(**train_doc)
            train.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train section: {exc}") from exc
        dataset = doc.get("dataset")
        if dataset is not None:
            if set(dataset) - {"behavior", "episodes", "seed", "max_steps"}:
                raise ConfigError("dataset section takes behavior, episodes, seed and max_steps")
            if dataset.get("behavior", "uniform") != "uniform":
                raise ConfigError("only the uniform behavior policy is available from config files")
            if int(dataset.get("episodes", 0)) < 1 or "seed" not in dataset:
                raise ConfigError("dataset needs a positive episode count and an explicit seed")
        if train.best_response == "fitted" and dataset is None:
            raise ConfigError("fitted best responses need a dataset section")
        evaluation = {"clip": 20.0, "mode": "plain", **doc.get("evaluation", {})}
        if evaluation["mode"] not in MODES or float(evaluation["clip"]) <= 0:
            raise ConfigError("evaluation needs clip > 0 and a known mode")
        compare = {"mixers": list(COMPARE_MIXERS), "seeds": [train.seed], **doc.get("compare", {})}
        for name in compare["mixers"]:
            try:
                TrainConfig(mixer=name).validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(env, train, dataset, evaluation, compare, str(doc.get("output_dir", "runs")))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        dataset = None if self.dataset is None else {**self.dataset, "seed": int(seed)}
        return replace(self, train=replace(self.train, seed=int(seed)), dataset=dataset)


def load_config(path) -> ExperimentConfig:
    if not Path(path).is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = load_document(path, "experiment")
    except StoreError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig.from_dict(doc)


def build_environment(spec: dict) -> tuple[Cmdp, ConstraintSpec]:
    params = dict(spec.get("params", {}))
    try:
        if spec["name"] == "example1":
            return example1_cmdp(**params)
        if spec["name"] == "simplex":
            return simplex_cmdp(**params)
        return marketing_cmdp(MarketingConfig(**params))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid environment parameters: {exc}") from exc


def build_dataset(cmdp: Cmdp, spec: dict) -> TransitionDataset:
    return collect_dataset(cmdp, uniform_behavior(cmdp), int(spec["episodes"]), int(spec["seed"]),
                           max_steps=int(spec.get("max_steps", 1000)), behavior_id="uniform")


def _out_dir(args, config: ExperimentConfig) -> Path:
    return Path(args.out if args.out else config.output_dir)


def _measurement_summary(x, tau: ConstraintSpec) -> dict:
    obj = feasibility_objective(x, tau)
    return {
        "measurement": np.asarray(x, dtype=float),
        "feasible": obj.feasible,
        "objective": obj.for_display(),
        "constraint_distance": constraint_distance(x, tau),
    }


def _train_summary(config: ExperimentConfig, result, cmdp: Cmdp, tau: ConstraintSpec) -> dict:
    mu, trace = result.policy, result.trace
    summary = {
        "mixer": config.train.mixer,
        "seed": config.train.seed,
        "T": trace.T,
        "tau": tau.tau,
        "lambda_hat": result.lambda_hat,
        "regret": trace.regret,
        "active_size": len(mu),
        "peak_parameters": trace.peak_parameters,
        "policy_parameters": int(mu.policies[0].n_parameters) if len(mu) else 0,
        "target": _measurement_summary(mu.target, tau) if mu.target is not None else None,
        "exact": _measurement_summary(mixture_measurement(mu, lambda p: evaluate_policy_exact(cmdp, p)), tau),
        "mixer_errors": sum(1 for r in trace.records if r.error),
    }
    if config.train.best_response == "exact":
        gap, bound = duality_gap(cmdp, mu.target, result.lambda_hat, tau, trace)
        summary["duality_gap"] = gap
        summary["gap_bound"] = bound
    else:
        # fitted best responses carry no guarantee, so only the measured gap of the exact mixture is reported
        summary["measured_gap"] = duality_gap(cmdp, summary["exact"]["measurement"], result.lambda_hat, tau)[0]
    return summary


def _policy_metadata(config: ExperimentConfig, trace) -> dict:
    return {"config_digest": trace.metadata["config_digest"], "seed": config.train.seed,
            "round": trace.T, "mixer": trace.metadata["mixer"], "environment": config.environment}


# ---------------------------------------------------------------------------
# subcommands

def cmd_collect(args) -> int:
    config = load_config(args.config)
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    if config.dataset is None:
        raise ConfigError("collect needs a dataset section")
    cmdp, _ = build_environment(config.environment)
    data = build_dataset(cmdp, config.dataset)
    out = _out_dir(args, config)
    save_dataset(data, out / "dataset.tsv")
    save_cmdp(cmdp, out / "cmdp.json")
    print(f"wrote {len(data)} transitions from {data.n_episodes} episodes to {out / 'dataset.tsv'}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.seed_override is not None:
        config = config.with_seed(args.seed_override)
    cmdp, tau = build_environment(config.environment)
    problem = cmdp if config.train.best_response == "exact" else build_dataset(cmdp, config.dataset)
    out = _out_dir(args, config)
    try:
        result = train_mixers(problem, tau, config.train, [config.train.mixer], cmdp=cmdp)[config.train.mixer]
    except TrainingError as exc:
        save_trace(exc.traces[config.train.mixer], out / "trace.tsv")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_trace(result.trace, out / "trace.tsv")
    save_policy_set(result.policy, out / "policy_set.json", tau, _policy_metadata(config, result.trace))
    summary = _train_summary(config, result, cmdp, tau)
    save_document(out / "summary.json", "train_summary", summary)
    exact = summary["exact"]
    print(f"mixer={config.train.mixer} T={config.train.T} J={np.round(exact['measurement'], 6).tolist()} "
          f"feasible={exact['feasible']} active={summary['active_size']} peak_parameters={summary['peak_parameters']}")
    if "duality_gap" in summary:
        print(f"duality gap {summary['duality_gap']:.6g} <= bound {summary['gap_bound']:.6g}")
    else:
        print(f"measured duality gap {summary['measured_gap']:.6g} (no bound for fitted best responses)")
    return 0


def cmd_evaluate(args) -> int:
    if not args.policy_set or not args.dataset:
        raise ConfigError("evaluate needs --policy-set and --dataset")
    for path in (args.policy_set, args.dataset):
        if not Path(path).is_file():
            raise ConfigError(f"input file {path} not found")
    config = load_config(args.config) if args.config else None
    try:
        mu, header = load_policy_set(args.policy_set)
        data = load_dataset(args.dataset)
    except StoreError as exc:
        raise ConfigError(str(exc)) from exc
    if header["m"] != data.m:
        raise ConfigError(f"policy set has m={header['m']} but the dataset has m={data.m}")
    clip = float(args.clip if args.clip is not None else (config.evaluation["clip"] if config else 20.0))
    mode = args.mode or (config.evaluation["mode"] if config else "plain")
    if clip <= 0 or mode not in MODES:
        raise ConfigError("clip must be positive and mode one of " + ", ".join(MODES))
    estimate = evaluate_mixed(data, mu, clip, mode)
    report = {"format_version": FORMAT_VERSION, "kind": "evaluation", "policy_set": str(args.policy_set),
              "dataset": str(args.dataset), "estimate": estimate.to_dict()}
    tau = ConstraintSpec(header["tau"])
    if config is not None:
        cmdp, _ = build_environment(config.environment)
        if cmdp.m != data.m:
            raise ConfigError("environment cost dimension differs from the dataset")
        exact = mixture_measurement(mu, lambda p: evaluate_policy_exact(cmdp, p))
        report["exact"] = _measurement_summary(exact, tau)
        report["abs_error"] = np.abs(estimate.x_hat - exact)
    text = dumps(report)
    if args.out:
        write_atomic(Path(args.out) / "evaluation.json", text)
    sys.stdout.write(text)
    return 0


def compare_rows(config: ExperimentConfig) -> list[dict]:
    """Final exact measurements of every mixer and the myopic baseline, per seed."""
    cmdp, tau = build_environment(config.environment)
    mixers = [m for m in config.compare["mixers"]]
    rows = []
    for seed in config.compare["seeds"]:
        run = config.with_seed(seed)
        data = build_dataset(cmdp, run.dataset) if run.dataset is not None else None
        problem = cmdp if run.train.best_response == "exact" else data
        results = train_mixers(problem, tau, run.train, mixers, cmdp=cmdp)
        for name in mixers:
            res = results[name]
            x = mixture_measurement(res.policy, lambda p: evaluate_policy_exact(cmdp, p))
            rows.append({"seed": int(seed), "method": name, "x": x, "active_size": len(res.policy),
                         "peak_parameters": res.trace.peak_parameters, "result": res})
        policy, scale, x = myopic_baseline(cmdp, tau, data)
        rows.append({"seed": int(seed), "method": "myopic", "x": x, "active_size": 1,
                     "peak_parameters": policy.n_parameters, "scale": scale})
    return rows


def cmd_compare(args) -> int:
    config = load_config(args.config)
    if args.seed_override is not None:
        config = replace(config, compare={**config.compare, "seeds": [int(args.seed_override)]})
    cmdp, tau = build_environment(config.environment)
    out = _out_dir(args, config)
    rows = compare_rows(config)
    m = tau.m
    header = ["seed", "method", "objective", "feasible", "constraint_distance", "j_r"] + \
             [f"j_c_{j}" for j in range(m)] + ["active_size", "peak_parameters"]
    table = []
    for row in rows:
        obj = feasibility_objective(row["x"], tau)
        table.append(
            [str(row["seed"]), row["method"], format_float(obj.for_display()), "1" if obj.feasible else "0",
             format_float(constraint_distance(row["x"], tau))]
            + [format_float(v) for v in row["x"]] + [str(row["active_size"]), str(row["peak_parameters"])])
        if "result" in row:
            res = row["result"]
            seed_cfg = config.with_seed(row["seed"])
            save_policy_set(res.policy, out / f"seed_{row['seed']}" / f"{row['method']}.policy_set.json", tau,
                            _policy_metadata(replace(seed_cfg, train=replace(seed_cfg.train, mixer=row["method"])),
                                             res.trace))
    meta = {"environment": config.environment, "tau": tau.tau, "train": asdict(config.train),
            "dataset": config.dataset}
    save_table(out / "comparison.tsv", "comparison", meta, header, table)
    sys.stdout.write("\n".join("\t".join(r) for r in [header] + table) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aimrl", description="Offline constrained RL with affinely independent mixtures.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log mixer warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed-override", type=int, help="replace the training and dataset seed")

    p = sub.add_parser("collect", help="simulate a logged dataset")
    common(p)
    p.set_defaults(func=cmd_collect)
    p = sub.add_parser("train", help="run primal-dual training and export the mixed policy")
    common(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("evaluate", help="off-policy estimate of a saved policy set")
    common(p, needs_config=False)
    p.add_argument("--policy-set", help="policy set file")
    p.add_argument("--dataset", help="dataset file (.tsv or structured)")
    p.add_argument("--clip", type=float, help="importance weight clip")
    p.add_argument("--mode", choices=MODES, help="normalization mode")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("compare", help="compare mixers and the myopic baseline across seeds")
    common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StoreError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
