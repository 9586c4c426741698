"""Deterministic text persistence for policy sets, CMDPs, datasets and traces.

Structured files are JSON documents with sorted keys, two-space indentation
and every float written with 17 significant digits, so identical inputs give
byte-identical files and every float reads back to the same double.  Each
document carries ``format_version`` and ``kind``; loaders refuse any version
other than :data:`FORMAT_VERSION`.

Columnar files (datasets, traces) are tab-separated: ``#`` header lines hold
the format version and a JSON metadata line, then one column-name line, then
one row per sample or round.  See README for the column lists.

All writes go to a temporary file in the target directory and are renamed
into place.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .aim import WEIGHT_TOL, AimPolicy
from .cmdp import Cmdp, DeterministicPolicy, policy_digest
from .envs import TransitionDataset
from .learner import LinearQ, RoundRecord, TabularQ, TrainTrace, feature_map_from_spec, greedy_actions

FORMAT_VERSION = 1


class StoreError(ValueError):
    """A file could not be written or read back faithfully."""


class UnsupportedVersionError(StoreError):
    pass


class InvariantError(StoreError):
    """The object violates an invariant of its file schema."""


# ---------------------------------------------------------------------------
# canonical text

def format_float(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    s = format(v, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _plain(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _emit(obj: Any, indent: int, out: list) -> None:
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        keys = sorted(obj)
        for i, k in enumerate(keys):
            out.append(f"{pad}  {json.dumps(k)}: ")
            _emit(obj[k], indent + 1, out)
            out.append(",\n" if i < len(keys) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, list):
        if not obj:
            out.append("[]")
        elif all(not isinstance(v, (dict, list)) for v in obj):
            out.append("[" + ", ".join(_scalar(v) for v in obj) + "]")
        else:
            out.append("[\n")
            for i, v in enumerate(obj):
                out.append(pad + "  ")
                _emit(v, indent + 1, out)
                out.append(",\n" if i < len(obj) - 1 else "\n")
            out.append(pad + "]")
    else:
        out.append(_scalar(obj))


def _scalar(v: Any) -> str:
    if v is None or isinstance(v, (bool, str)):
        return json.dumps(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return format_float(v)
    raise StoreError(f"cannot serialize value of type {type(v).__name__}")


def _compact(obj: Any) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_compact(obj[k])}" for k in sorted(obj)) + "}"
    if isinstance(obj, list):
        return "[" + ", ".join(_compact(v) for v in obj) + "]"
    return _scalar(obj)


def dumps_line(obj: Any) -> str:
    """Single-line canonical text, used inside columnar file headers."""
    return _compact(_plain(obj))


def dumps(obj: Any) -> str:
    """Canonical text for a JSON-like object (sorted keys, 17-digit floats)."""
    out: list[str] = []
    _emit(_plain(obj), 0, out)
    return "".join(out) + "\n"


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_document(path, kind: str, payload: dict) -> None:
    write_atomic(path, dumps({"format_version": FORMAT_VERSION, "kind": kind, **payload}))


def _check_version(version) -> None:
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format_version {version!r} (this build reads {FORMAT_VERSION})")


def load_document(path, kind: Optional[str] = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: not a valid structured file ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise StoreError(f"{path}: missing format_version")
    _check_version(doc["format_version"])
    if kind is not None and doc.get("kind") != kind:
        raise StoreError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")
    return doc


# ---------------------------------------------------------------------------
# policies and policy sets

def policy_record(policy: DeterministicPolicy, x) -> dict:
    q = policy.q
    if q is None or isinstance(q, TabularQ):
        kind = "tabular"
        params = {"actions": policy.actions, "table": None if q is None else q.table}
        if q is not None:
            params["observed"] = q.observed
    elif isinstance(q, LinearQ):
        kind = "linear"
        params = {"actions": policy.actions, "features": q.features.spec(), "weights": q.weights, "ridge": q.ridge}
    else:
        raise InvariantError(f"no serializer for Q-function type {type(q).__name__}")
    return {"policy_id": policy.policy_id, "kind": kind, "parameters": params,
            "measurement": np.asarray(x, dtype=float)}


def policy_from_record(rec: dict) -> tuple[DeterministicPolicy, np.ndarray]:
    try:
        params = rec["parameters"]
        actions = np.asarray(params["actions"], dtype=np.int64)
        if rec["kind"] == "tabular":
            q = None
            if params.get("table") is not None:
                table = np.asarray(params["table"], dtype=float)
                q = TabularQ(*table.shape, table=table)
                if "observed" in params:
                    q.observed = np.asarray(params["observed"], dtype=bool)
        elif rec["kind"] == "linear":
            q = LinearQ(feature_map_from_spec(params["features"]), np.asarray(params["weights"], dtype=float),
                        float(params["ridge"]))
        else:
            raise StoreError(f"unknown policy kind {rec['kind']!r}")
        x = np.asarray(rec["measurement"], dtype=float)
        policy_id = rec["policy_id"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(f"corrupted policy record: {exc}") from exc
    if q is not None and not np.array_equal(greedy_actions(q.values()), actions):
        raise StoreError(f"policy {policy_id}: parameters do not reproduce the saved greedy actions")
    if policy_id.startswith("pi-") and policy_digest(actions) != policy_id:
        raise StoreError(f"policy {policy_id}: identifier does not match its action table")
    return DeterministicPolicy(actions, policy_id, q=q), x


def _check_policy_set(weights: np.ndarray, points: np.ndarray, ids: list, target) -> None:
    if len(ids) == 0:
        raise InvariantError("a policy set needs at least one policy")
    if len(set(ids)) != len(ids):
        raise InvariantError("duplicate policy records")
    if weights.shape != (len(ids),) or points.shape[0] != len(ids):
        raise InvariantError("one weight and one measurement per policy are required")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise InvariantError("weights must be finite and nonnegative")
    if abs(float(weights.sum()) - 1.0) > WEIGHT_TOL:
        raise InvariantError(f"weights sum to {float(weights.sum())!r}, not 1")
    if target is not None:
        target = np.asarray(target, dtype=float)
        scale = max(1.0, float(np.abs(points).max()))
        if target.shape != points.shape[1:] or np.max(np.abs(weights @ points - target)) > 1e-6 * scale:
            raise InvariantError("weights do not reproduce the target measurement")


def merge_duplicates(mu: AimPolicy) -> AimPolicy:
    """Collapse repeated policies (as kept by the store-all mixer) into one weighted record."""
    ids = mu.policy_ids
    if len(set(ids)) == len(ids):
        return mu
    first: dict = {}
    for i, pid in enumerate(ids):
        first.setdefault(pid, i)
    keep = sorted(first.values())
    slot = {pid: k for k, pid in enumerate(ids[i] for i in keep)}
    weights = np.zeros(len(keep))
    for pid, w in zip(ids, mu.weights):
        weights[slot[pid]] += w
    return AimPolicy([mu.policies[i] for i in keep], mu.points[keep], weights, mu.target)


def save_policy_set(mu: AimPolicy, path, tau, metadata: Optional[dict] = None) -> None:
    """Write ``mu`` with full parameter payloads; refuses sets that break an invariant.

    Repeated policies are stored once with their weights summed.
    """
    tau = np.atleast_1d(np.asarray(getattr(tau, "tau", tau), dtype=float))
    mu = merge_duplicates(mu)
    for p in mu.policies:
        if not isinstance(p, DeterministicPolicy):
            raise InvariantError("every active policy needs its parameter payload")
    _check_policy_set(mu.weights, mu.points, mu.policy_ids, mu.target)
    if mu.points.shape[1] != tau.size + 1:
        raise InvariantError("measurement dimension differs from m + 1")
    save_document(path, "policy_set", {
        "m": int(tau.size),
        "tau": tau,
        "policies": [policy_record(p, x) for p, x in zip(mu.policies, mu.points)],
        "weights": mu.weights,
        "target": mu.target,
        "metadata": dict(metadata or {}),
    })


def load_policy_set(path) -> tuple[AimPolicy, dict]:
    """Return the mixed policy and a header dict with ``m``, ``tau`` and ``metadata``."""
    doc = load_document(path, "policy_set")
    try:
        records = [policy_from_record(r) for r in doc["policies"]]
        weights = np.asarray(doc["weights"], dtype=float)
        target = None if doc["target"] is None else np.asarray(doc["target"], dtype=float)
        m = int(doc["m"])
        tau = np.asarray(doc["tau"], dtype=float)
    except (KeyError, TypeError) as exc:
        raise StoreError(f"{path}: corrupted policy set ({exc})") from exc
    points = np.array([x for _, x in records]) if records else np.zeros((0, m + 1))
    _check_policy_set(weights, points, [p.policy_id for p, _ in records], target)
    if points.shape[1] != m + 1 or tau.shape != (m,):
        raise InvariantError("measurement or threshold dimension differs from m")
    mu = AimPolicy([p for p, _ in records], points, weights, target)
    return mu, {"m": m, "tau": tau, "metadata": doc.get("metadata", {})}


# ---------------------------------------------------------------------------
# CMDPs

def cmdp_to_dict(cmdp: Cmdp) -> dict:
    return {
        "name": cmdp.name,
        "discount": cmdp.discount,
        "transition": cmdp.transition,
        "reward": cmdp.reward,
        "cost": cmdp.cost,
        "initial_dist": cmdp.initial_dist,
        "terminal": cmdp.terminal,
        "outcome_reward": cmdp.outcome_reward,
        "outcome_cost": cmdp.outcome_cost,
    }


def cmdp_from_dict(d: dict) -> Cmdp:
    def arr(key):
        return None if d.get(key) is None else np.asarray(d[key], dtype=float)

    return Cmdp(
        transition=arr("transition"), reward=arr("reward"), cost=arr("cost"),
        discount=float(d["discount"]), initial_dist=arr("initial_dist"),
        terminal=None if d.get("terminal") is None else np.asarray(d["terminal"], dtype=bool),
        outcome_reward=arr("outcome_reward"),
        outcome_cost=arr("outcome_cost"), name=d.get("name", "cmdp"),
    )


def save_cmdp(cmdp: Cmdp, path) -> None:
    save_document(path, "cmdp", cmdp_to_dict(cmdp))


def load_cmdp(path) -> Cmdp:
    doc = load_document(path, "cmdp")
    try:
        return cmdp_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise StoreError(f"{path}: corrupted CMDP ({exc})") from exc


# ---------------------------------------------------------------------------
# datasets

def _dataset_columns(m: int) -> list[str]:
    return (["episode", "step", "state", "action", "next_state", "reward"]
            + [f"cost_{j}" for j in range(m)] + ["propensity", "done"])


def dataset_to_dict(data: TransitionDataset) -> dict:
    return {
        "metadata": data.metadata,
        "columns": {
            "episode": data.episode_ids, "step": data.step_indices, "state": data.states,
            "action": data.actions, "next_state": data.next_states, "reward": data.rewards,
            "cost": data.costs, "propensity": data.propensities, "done": data.dones,
        },
    }


def dataset_from_dict(d: dict) -> TransitionDataset:
    c = d["columns"]
    meta = dict(d["metadata"])
    costs = np.asarray(c["cost"], dtype=float).reshape(len(c["reward"]), int(meta["m"]))
    return TransitionDataset(
        states=c["state"], actions=c["action"], next_states=c["next_state"], rewards=c["reward"],
        costs=costs, propensities=c["propensity"], episode_ids=c["episode"],
        step_indices=c["step"], dones=c["done"], metadata=meta,
    )


def save_dataset_json(data: TransitionDataset, path) -> None:
    save_document(path, "dataset", dataset_to_dict(data))


def load_dataset_json(path) -> TransitionDataset:
    doc = load_document(path, "dataset")
    try:
        return dataset_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise StoreError(f"{path}: corrupted dataset ({exc})") from exc


def _header(kind: str, metadata: dict) -> list[str]:
    return [f"# format_version {FORMAT_VERSION}", f"# kind {kind}", f"# metadata {dumps_line(metadata)}"]


def _read_header(lines: list[str], kind: str, path) -> tuple[dict, int]:
    meta = None
    i = 0
    version = None
    found_kind = None
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][2:].partition(" ")
        if key == "format_version":
            try:
                version = int(value)
            except ValueError as exc:
                raise StoreError(f"{path}: bad format_version line") from exc
        elif key == "kind":
            found_kind = value
        elif key == "metadata":
            meta = json.loads(value)
        i += 1
    if version is None:
        raise StoreError(f"{path}: missing format_version")
    _check_version(version)
    if found_kind != kind:
        raise StoreError(f"{path}: expected a {kind} file, found {found_kind!r}")
    if meta is None:
        raise StoreError(f"{path}: missing metadata line")
    return meta, i


def save_dataset_tsv(data: TransitionDataset, path) -> None:
    """One logged transition per line; columns as in :func:`_dataset_columns`."""
    lines = _header("dataset", data.metadata)
    lines.append("\t".join(_dataset_columns(data.m)))
    for i in range(len(data)):
        row = [str(int(data.episode_ids[i])), str(int(data.step_indices[i])), str(int(data.states[i])),
               str(int(data.actions[i])), str(int(data.next_states[i])), format_float(data.rewards[i])]
        row += [format_float(v) for v in data.costs[i]]
        row += [format_float(data.propensities[i]), "1" if data.dones[i] else "0"]
        lines.append("\t".join(row))
    write_atomic(path, "\n".join(lines) + "\n")


def load_dataset_tsv(path) -> TransitionDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta, i = _read_header(lines, "dataset", path)
    m = int(meta["m"])
    if i >= len(lines) or lines[i].split("\t") != _dataset_columns(m):
        raise StoreError(f"{path}: unexpected dataset columns")
    rows = [ln.split("\t") for ln in lines[i + 1:] if ln]
    width = 8 + m
    if any(len(r) != width for r in rows):
        raise StoreError(f"{path}: ragged dataset row")
    try:
        table = np.array(rows, dtype=object).reshape(len(rows), width)
        ints = lambda j: np.array(table[:, j], dtype=np.int64)
        floats = lambda j: np.array([float(v) for v in table[:, j]], dtype=float)
        costs = np.column_stack([floats(6 + j) for j in range(m)]) if rows else np.zeros((0, m))
        return TransitionDataset(
            states=ints(2), actions=ints(3), next_states=ints(4), rewards=floats(5), costs=costs,
            propensities=floats(6 + m), episode_ids=ints(0), step_indices=ints(1),
            dones=ints(7 + m).astype(bool), metadata=meta,
        )
    except ValueError as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(f"{path}: corrupted dataset ({exc})") from exc


def save_dataset(data: TransitionDataset, path) -> None:
    """Columnar text for ``.tsv`` paths, structured text otherwise."""
    (save_dataset_tsv if str(path).endswith(".tsv") else save_dataset_json)(data, path)


def load_dataset(path) -> TransitionDataset:
    return (load_dataset_tsv if str(path).endswith(".tsv") else load_dataset_json)(path)


# ---------------------------------------------------------------------------
# generic tables

def save_table(path, kind: str, metadata: dict, columns: list, rows: list) -> None:
    """Tab-separated table with the usual ``#`` header; cells are written as given."""
    lines = _header(kind, metadata)
    lines.append("\t".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise InvariantError("table row width differs from the header")
        lines.append("\t".join(str(v) for v in row))
    write_atomic(path, "\n".join(lines) + "\n")


def load_table(path, kind: str) -> tuple[dict, list[dict]]:
    """Metadata and rows (as column -> string dicts) of a :func:`save_table` file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta, i = _read_header(lines, kind, path)
    if i >= len(lines):
        raise StoreError(f"{path}: missing column header")
    columns = lines[i].split("\t")
    rows = []
    for ln in lines[i + 1:]:
        cells = ln.split("\t")
        if len(cells) != len(columns):
            raise StoreError(f"{path}: ragged table row")
        rows.append(dict(zip(columns, cells)))
    return meta, rows


# ---------------------------------------------------------------------------
# traces

def _trace_columns(m: int) -> list[str]:
    return (["t"] + [f"lambda_{j}" for j in range(m)] + [f"x_{j}" for j in range(m + 1)]
            + [f"target_{j}" for j in range(m + 1)]
            + ["lagrangian", "active_size", "stored_parameters", "policy_id", "exported",
               "lambda_updated", "error"])


def _trace_meta(trace: TrainTrace) -> dict:
    return {
        "metadata": trace.metadata,
        "regret": trace.regret,
        "lambda_hat": trace.lambda_hat,
    }


def trace_to_dict(trace: TrainTrace) -> dict:
    return {
        **_trace_meta(trace),
        "records": [{
            "t": r.t, "lam": r.lam, "x_pi": r.x_pi, "target": r.target,
            "lagrangian": r.lagrangian, "active_size": r.active_size,
            "stored_parameters": r.stored_parameters, "policy_id": r.policy_id,
            "exported": r.exported, "lambda_updated": r.lambda_updated, "error": r.error,
        } for r in trace.records],
    }


def trace_from_dict(d: dict) -> TrainTrace:
    records = [RoundRecord(
        t=int(r["t"]), lam=np.asarray(r["lam"], dtype=float), x_pi=np.asarray(r["x_pi"], dtype=float),
        target=None if r["target"] is None else np.asarray(r["target"], dtype=float),
        lagrangian=float(r["lagrangian"]), active_size=int(r["active_size"]),
        stored_parameters=int(r["stored_parameters"]), policy_id=r["policy_id"],
        exported=bool(r["exported"]), lambda_updated=bool(r["lambda_updated"]), error=r.get("error", ""),
    ) for r in d["records"]]
    lam_hat = d.get("lambda_hat")
    return TrainTrace(records, float(d["regret"]),
                      None if lam_hat is None else np.asarray(lam_hat, dtype=float), dict(d["metadata"]))


def save_trace_json(trace: TrainTrace, path) -> None:
    save_document(path, "trace", trace_to_dict(trace))


def load_trace_json(path) -> TrainTrace:
    doc = load_document(path, "trace")
    try:
        return trace_from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise StoreError(f"{path}: corrupted trace ({exc})") from exc


def save_trace_tsv(trace: TrainTrace, path) -> None:
    """One round per line; an empty target means the mixer held no policy yet."""
    m = int(trace.metadata["m"])
    lines = _header("trace", _trace_meta(trace))
    lines.append("\t".join(_trace_columns(m)))
    for r in trace.records:
        target = [""] * (m + 1) if r.target is None else [format_float(v) for v in r.target]
        if "\t" in r.error or "\n" in r.error:
            raise InvariantError("trace error messages must be single-line")
        row = ([str(r.t)] + [format_float(v) for v in r.lam] + [format_float(v) for v in r.x_pi] + target
               + [format_float(r.lagrangian), str(r.active_size), str(r.stored_parameters), r.policy_id,
                  "1" if r.exported else "0", "1" if r.lambda_updated else "0", r.error])
        lines.append("\t".join(row))
    write_atomic(path, "\n".join(lines) + "\n")


def load_trace_tsv(path) -> TrainTrace:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    meta, i = _read_header(lines, "trace", path)
    m = int(meta["metadata"]["m"])
    cols = _trace_columns(m)
    if i >= len(lines) or lines[i].split("\t") != cols:
        raise StoreError(f"{path}: unexpected trace columns")
    records = []
    try:
        for ln in lines[i + 1:]:
            f = ln.split("\t")
            if len(f) != len(cols):
                raise StoreError(f"{path}: ragged trace row")
            k = 1
            lam = np.array([float(v) for v in f[k:k + m]]); k += m
            x = np.array([float(v) for v in f[k:k + m + 1]]); k += m + 1
            tgt = f[k:k + m + 1]; k += m + 1
            target = None if tgt[0] == "" else np.array([float(v) for v in tgt])
            records.append(RoundRecord(
                t=int(f[0]), lam=lam, x_pi=x, target=target, lagrangian=float(f[k]),
                active_size=int(f[k + 1]), stored_parameters=int(f[k + 2]), policy_id=f[k + 3],
                exported=f[k + 4] == "1", lambda_updated=f[k + 5] == "1", error=f[k + 6],
            ))
    except ValueError as exc:
        if isinstance(exc, StoreError):
            raise
        raise StoreError(f"{path}: corrupted trace ({exc})") from exc
    lam_hat = meta.get("lambda_hat")
    return TrainTrace(records, float(meta["regret"]),
                      None if lam_hat is None else np.asarray(lam_hat, dtype=float), dict(meta["metadata"]))


def save_trace(trace: TrainTrace, path) -> None:
    """Columnar text for ``.tsv`` paths, structured text otherwise."""
    (save_trace_tsv if str(path).endswith(".tsv") else save_trace_json)(trace, path)


def load_trace(path) -> TrainTrace:
    return (load_trace_tsv if str(path).endswith(".tsv") else load_trace_json)(path)
