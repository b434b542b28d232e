"""Per-round metric records, test-set evaluation and CSV / JSON-lines emission."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import model as M
from .data import Dataset

BASE_COLUMNS = ["round", "algo", "seed", "loss", "accuracy", "tau_k", "eta_tau_L"]
CLIENT_FIELDS = ["tau", "beta", "delta", "A"]


@dataclass
class RoundRecord:
    round: int
    algo: str
    seed: object  # int, or "mean" for the across-seed average row
    loss: float
    accuracy: float
    tau_k: Optional[float] = None
    eta_tau_L: Optional[float] = None
    tau: List[Optional[float]] = field(default_factory=list)
    beta: List[Optional[float]] = field(default_factory=list)
    delta: List[Optional[float]] = field(default_factory=list)
    A: List[Optional[float]] = field(default_factory=list)


def evaluate(w, spec: M.ModelSpec, test_set: Dataset):
    """(mean loss, accuracy) of ``w`` on ``test_set``."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    return (
        M.loss(spec, w, test_set.features, test_set.labels),
        M.accuracy(spec, w, test_set.features, test_set.labels),
    )


def header(n_clients: int) -> List[str]:
    cols = list(BASE_COLUMNS)
    for i in range(n_clients):
        cols += [f"{name}_{i}" for name in CLIENT_FIELDS]
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def _num(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def _padded(values, n):
    values = list(values or [])
    return values + [None] * (n - len(values))


def record_row(rec: RoundRecord, n_clients: int) -> List[str]:
    row = [rec.round, rec.algo, rec.seed, rec.loss, rec.accuracy, rec.tau_k, rec.eta_tau_L]
    per = [_padded(getattr(rec, name), n_clients) for name in CLIENT_FIELDS]
    for i in range(n_clients):
        row += [col[i] for col in per]
    return [_fmt(v) for v in row]


def n_clients_of(records) -> int:
    return max((max(len(r.tau), len(r.beta), len(r.delta), len(r.A)) for r in records), default=0)


def metrics_csv(records: Sequence[RoundRecord], n_clients: Optional[int] = None) -> str:
    if not records:
        raise ValueError("no records to write")
    n = n_clients_of(records) if n_clients is None else n_clients
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header(n))
    for rec in records:
        writer.writerow(record_row(rec, n))
    return buf.getvalue()


def metrics_jsonl(records: Sequence[RoundRecord]) -> str:
    if not records:
        raise ValueError("no records to write")
    lines = []
    for rec in records:
        d = {
            "round": rec.round, "algo": rec.algo, "seed": rec.seed,
            "loss": rec.loss, "accuracy": rec.accuracy, "tau_k": rec.tau_k, "eta_tau_L": rec.eta_tau_L,
            "tau": rec.tau, "beta": rec.beta, "delta": rec.delta, "A": rec.A,
        }
        lines.append(json.dumps(_jsonable(d), allow_nan=False))
    return "\n".join(lines) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if not math.isfinite(float(v)) else float(v)
    return v


def write_metrics(records, path, as_json: bool = False, n_clients: Optional[int] = None) -> Path:
    text = metrics_jsonl(records) if as_json else metrics_csv(records, n_clients)
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def read_metrics(path) -> List[RoundRecord]:
    """Inverse of :func:`write_metrics` for CSV output."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0]
    n = (len(cols) - len(BASE_COLUMNS)) // len(CLIENT_FIELDS)
    out = []
    for row in rows[1:]:
        seed = row[2]
        rec = RoundRecord(
            round=int(row[0]), algo=row[1], seed=int(seed) if seed.lstrip("-").isdigit() else seed,
            loss=_num(row[3]), accuracy=_num(row[4]), tau_k=_num(row[5]), eta_tau_L=_num(row[6]),
        )
        per = {name: [] for name in CLIENT_FIELDS}
        for i in range(n):
            base = len(BASE_COLUMNS) + i * len(CLIENT_FIELDS)
            for j, name in enumerate(CLIENT_FIELDS):
                per[name].append(_num(row[base + j]))
        for name in CLIENT_FIELDS:
            vals = per[name]
            setattr(rec, name, [] if all(v is None for v in vals) else vals)
        out.append(rec)
    return out


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return math.fsum(vals) / len(vals)


def mean_records(records: Sequence[RoundRecord]) -> List[RoundRecord]:
    """One ``seed="mean"`` row per (algo, round), averaging over seeds."""
    groups = {}
    for r in records:
        groups.setdefault((r.algo, r.round), []).append(r)
    out = []
    for (algo, rnd), rs in groups.items():
        rec = RoundRecord(
            round=rnd, algo=algo, seed="mean",
            loss=_mean(r.loss for r in rs), accuracy=_mean(r.accuracy for r in rs),
            tau_k=_mean(r.tau_k for r in rs), eta_tau_L=_mean(r.eta_tau_L for r in rs),
        )
        for name in CLIENT_FIELDS:
            cols = [getattr(r, name) for r in rs if getattr(r, name)]
            if cols:
                width = max(len(c) for c in cols)
                setattr(rec, name, [_mean(c[i] for c in cols if i < len(c)) for i in range(width)])
        out.append(rec)
    return out
