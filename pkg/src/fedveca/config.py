"""Experiment configuration read from TOML.

Example::

    algo = "fedveca"          # fedveca | fedavg | fednova | centralized
    partition = "case3"
    n_clients = 5
    seeds = [0, 1, 2]

    [model]
    kind = "squared_svm"

    [dataset]
    source = "synthetic"
    n = 2000
    d = 20
    classes = 2
    separation = 4.0
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import tomli
import tomli_w

from .data import CASES
from .model import MODEL_KINDS

ALGOS = ("fedveca", "fedavg", "fednova", "centralized")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: str = "squared_svm"
    l2_reg: float = 0.0


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    n: int = 2000
    d: int = 20
    classes: int = 2
    separation: float = 4.0
    n_test: int = 500
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    algo: str = "fedveca"
    partition: str = "case1"
    n_clients: int = 5
    batch_size: int = 32
    eta: float = 0.01
    alpha: float = 0.95
    rounds: int = 100
    tau_initial: int = 5
    max_tau: int = 50
    fixed_tau: Optional[List[int]] = None
    beta_source: str = "minibatch"
    seeds: List[int] = field(default_factory=lambda: [0])
    out: str = "metrics.csv"
    transport: str = "inproc"

    def validate(self) -> "ExperimentConfig":
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.algo not in ALGOS:
            bad("algo", f"must be one of {ALGOS}")
        if self.partition not in CASES:
            bad("partition", f"must be one of {CASES}")
        if self.model.kind not in MODEL_KINDS:
            bad("model.kind", f"must be one of {MODEL_KINDS}")
        if self.model.l2_reg < 0:
            bad("model.l2_reg", "must be >= 0")
        if not self.eta > 0:
            bad("eta", "must be > 0")
        if not 0 < self.alpha < 1:
            bad("alpha", "must lie in (0, 1)")
        if self.rounds < 1:
            bad("rounds", "must be >= 1")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.n_clients < 1:
            bad("n_clients", "must be >= 1")
        if not 2 <= self.tau_initial <= self.max_tau:
            bad("tau_initial", "must satisfy 2 <= tau_initial <= max_tau")
        if self.fixed_tau is not None and (
            len(self.fixed_tau) != self.n_clients or any(t < 1 for t in self.fixed_tau)
        ):
            bad("fixed_tau", "needs one positive entry per client")
        if self.beta_source not in ("minibatch", "full"):
            bad("beta_source", "must be 'minibatch' or 'full'")
        if not self.seeds:
            bad("seeds", "must not be empty")
        if any(s < 0 or s >= 2**64 for s in self.seeds):
            bad("seeds", "must be unsigned 64-bit integers")
        if not (self.transport == "inproc" or self.transport.startswith("socket:")):
            bad("transport", "must be 'inproc' or 'socket:<port>'")
        if self.transport.startswith("socket:"):
            try:
                port = int(self.transport.split(":", 1)[1])
            except ValueError:
                bad("transport", "port must be an integer")
            if not 0 <= port < 65536:
                bad("transport", "port out of range")
        ds = self.dataset
        if ds.source == "synthetic":
            if ds.n < ds.classes or ds.d < 1 or ds.classes < 2 or not ds.separation > 0 or ds.n_test < 1:
                bad("dataset", "synthetic sizes are invalid")
        elif ds.source == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(ds, name):
                    bad(f"dataset.{name}", "required for idx datasets")
        else:
            bad("dataset.source", "must be 'synthetic' or 'idx'")
        if self.model.kind == "squared_svm" and ds.source == "synthetic" and ds.classes != 2:
            # svm maps labels by parity, which is only meaningful for binary blobs or digits
            bad("dataset.classes", "squared_svm on synthetic data needs classes = 2")
        return self

    def to_dict(self) -> dict:
        def strip(d):
            return {k: (strip(v) if isinstance(v, dict) else v) for k, v in d.items() if v is not None}

        return strip(dataclasses.asdict(self))


def _build(cls, raw: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}{unknown[0]}: unknown field")
    return cls(**raw)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    ds = _build(DatasetConfig, raw.pop("dataset", {}), "dataset.")
    mdl = _build(ModelConfig, raw.pop("model", {}), "model.")
    cfg = _build(ExperimentConfig, raw, "")
    cfg.dataset, cfg.model = ds, mdl
    if isinstance(cfg.seeds, int):
        cfg.seeds = [cfg.seeds]
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
