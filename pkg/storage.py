# storage.py
"""
On-disk formats: UTF-8 CSV tables with JSON sidecars.

Floats are written with 17 significant digits and read back with
round-trip precision, so write-then-read reproduces values exactly.
"""

import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pandas as pd

from errors import SchemaError, StorageError
from utils import to_jsonable

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MARGINAL_COLUMNS = ["time_step", "state", "replica", "count"]
FLOW_COLUMNS = ["time_step", "from_state", "to_state", "mass"]
COST_COLUMNS = ["time_step", "from_state", "to_state", "cost"]
BETA_COLUMNS = ["time_step", "exponent", "beta"]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_json(path, doc: dict):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(to_jsonable(doc), f, sort_keys=True, indent=2)
            f.write("\n")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}", path=str(path))


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}", path=str(path))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path} is not valid JSON: {e}", path=str(path))


def _write_csv(frame: pd.DataFrame, path):
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}", path=str(path))


def _read_csv(path, columns: list) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError as e:
        raise StorageError(f"file not found: {path}", path=str(path)) from e
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}", path=str(path)) from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path} is not a valid CSV table: {e}", path=str(path)) from e

    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path} is missing columns {missing}", path=str(path))
    extra = [c for c in frame.columns if c not in columns]
    if extra:
        raise SchemaError(f"{path} has unknown columns {extra}", path=str(path))
    return frame[columns]


def _check_keys(frame: pd.DataFrame, keys: list, path):
    for key in keys:
        if not pd.api.types.is_integer_dtype(frame[key]):
            raise SchemaError(f"{path}: column {key!r} must hold integers", path=str(path))
        if (frame[key] < 0).any():
            raise SchemaError(f"{path}: column {key!r} has negative entries", path=str(path))
    duplicated = frame.duplicated(subset=keys)
    if duplicated.any():
        row = frame[duplicated].iloc[0].to_dict()
        raise SchemaError(f"{path}: duplicate key {row}", path=str(path))


def _check_values(frame: pd.DataFrame, column: str, path, nonnegative: bool = True):
    values = frame[column].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        raise SchemaError(f"{path}: column {column!r} has non-finite entries", path=str(path))
    if nonnegative and np.any(values < 0):
        raise SchemaError(f"{path}: column {column!r} has negative entries", path=str(path))


# --- MarginalFile ---

def write_marginals(path, steps, kind: str = "observations"):
    """
    steps: per time step, a sequence of count vectors (one per replica).
    Every vector is written densely so empty cells survive the round trip.
    """
    rows = []
    S = None
    for t, step in enumerate(steps):
        for r, counts in enumerate(step):
            counts = np.asarray(counts, dtype=float)
            S = counts.shape[0] if S is None else S
            rows.append(pd.DataFrame({"time_step": t, "state": np.arange(S), "replica": r, "count": counts}))
    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=MARGINAL_COLUMNS)
    _write_csv(frame, path)
    write_json(sidecar_path(path), {
        "format": "popflow.marginals/1",
        "kind": kind,
        "S": S,
        "T": len(steps),
        "replicas": [len(step) for step in steps],
    })


def read_marginals(path) -> tuple:
    """Returns per-step tuples of count vectors; steps without rows are empty tuples."""
    frame = _read_csv(path, MARGINAL_COLUMNS)
    _check_keys(frame, ["time_step", "state", "replica"], path)
    _check_values(frame, "count", path)

    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    S = int(meta.get("S") or (frame["state"].max() + 1 if len(frame) else 0))
    T = int(meta.get("T") or (frame["time_step"].max() + 1 if len(frame) else 0))
    if len(frame) and frame["state"].max() >= S:
        raise SchemaError(f"{path}: state {int(frame['state'].max())} out of range for S={S}", path=str(path))
    if len(frame) and frame["time_step"].max() >= T:
        raise SchemaError(f"{path}: time step {int(frame['time_step'].max())} out of range for T={T}",
                          path=str(path))

    steps = []
    for t in range(T):
        at_t = frame[frame["time_step"] == t]
        vectors = []
        for r in sorted(at_t["replica"].unique()):
            rows = at_t[at_t["replica"] == r]
            counts = np.zeros(S)
            counts[rows["state"].to_numpy()] = rows["count"].to_numpy(dtype=float)
            vectors.append(counts)
        steps.append(tuple(vectors))
    return tuple(steps)


# --- FlowFile ---

def write_flows(path, flows, kind: str = "flows"):
    """Only nonzero entries are written; the sidecar carries S and T."""
    rows = []
    S = 0
    for t, flow in enumerate(flows):
        flow = np.asarray(flow, dtype=float)
        S = flow.shape[0]
        i, j = np.nonzero(flow)
        rows.append(pd.DataFrame({"time_step": t, "from_state": i, "to_state": j, "mass": flow[i, j]}))
    frame = pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=FLOW_COLUMNS)
    _write_csv(frame, path)
    write_json(sidecar_path(path), {"format": "popflow.flows/1", "kind": kind, "S": S, "T": len(flows) + 1})


def read_flows(path) -> list:
    frame = _read_csv(path, FLOW_COLUMNS)
    _check_keys(frame, ["time_step", "from_state", "to_state"], path)
    _check_values(frame, "mass", path)

    meta = read_json(sidecar_path(path)) if sidecar_path(path).exists() else {}
    S = int(meta.get("S") or (max(frame["from_state"].max(), frame["to_state"].max()) + 1 if len(frame) else 0))
    n_steps = int(meta["T"]) - 1 if "T" in meta else (int(frame["time_step"].max()) + 1 if len(frame) else 0)
    if len(frame) and max(frame["from_state"].max(), frame["to_state"].max()) >= S:
        raise SchemaError(f"{path}: state out of range for S={S}", path=str(path))
    if len(frame) and frame["time_step"].max() >= n_steps:
        raise SchemaError(f"{path}: time step out of range for {n_steps} intervals", path=str(path))

    flows = [np.zeros((S, S)) for _ in range(n_steps)]
    for t, group in frame.groupby("time_step"):
        flows[int(t)][group["from_state"].to_numpy(), group["to_state"].to_numpy()] = group["mass"].to_numpy(dtype=float)
    return flows


# --- Costs and basis coefficients ---

def write_costs(path, costs):
    rows = []
    for t, cost in enumerate(costs):
        cost = np.asarray(cost, dtype=float)
        i, j = np.indices(cost.shape)
        rows.append(pd.DataFrame({"time_step": t, "from_state": i.ravel(), "to_state": j.ravel(),
                                  "cost": cost.ravel()}))
    _write_csv(pd.concat(rows, ignore_index=True), path)


def read_costs(path) -> list:
    frame = _read_csv(path, COST_COLUMNS)
    _check_keys(frame, ["time_step", "from_state", "to_state"], path)
    _check_values(frame, "cost", path, nonnegative=False)
    costs = []
    for _, group in frame.groupby("time_step", sort=True):
        S = int(group["from_state"].max()) + 1
        cost = np.zeros((S, S))
        cost[group["from_state"].to_numpy(), group["to_state"].to_numpy()] = group["cost"].to_numpy(dtype=float)
        costs.append(cost)
    return costs


def write_betas(path, betas, exponents):
    rows = [{"time_step": t, "exponent": float(q), "beta": float(b)}
            for t, beta in enumerate(betas) for q, b in zip(exponents, beta)]
    _write_csv(pd.DataFrame(rows, columns=BETA_COLUMNS), path)


def read_betas(path) -> list:
    frame = _read_csv(path, BETA_COLUMNS)
    return [group["beta"].to_numpy(dtype=float) for _, group in frame.groupby("time_step", sort=True)]


def write_table(frame: pd.DataFrame, path):
    _write_csv(frame, path)


# --- Output directories ---

@contextmanager
def output_transaction(out_dir):
    """
    Stage outputs in a temporary sibling directory and move them into out_dir
    only when the block succeeds; on failure nothing is committed.

    Usage:
        with output_transaction(out) as staging:
            write_flows(staging / "flows.csv", flows)
    """
    out_dir = Path(out_dir)
    try:
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    except OSError as e:
        raise StorageError(f"cannot create output directory next to {out_dir}: {e}", path=str(out_dir))

    try:
        yield staging
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            for item in sorted(staging.iterdir()):
                os.replace(item, out_dir / item.name)
        except OSError as e:
            raise StorageError(f"cannot commit outputs to {out_dir}: {e}", path=str(out_dir))
        logger.debug(f"Committed outputs to {out_dir}")
    finally:
        shutil.rmtree(staging, ignore_errors=True)
