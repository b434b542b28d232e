"""Command-line entry point: ``fedveca run|compare|partition inspect|validate-config``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import List, Optional

from . import baselines as B
from .config import ALGOS, ConfigError, ExperimentConfig, dump_config, from_dict, parse_config
from .data import label_histogram, partition
from .metrics import write_metrics

log = logging.getLogger("fedveca")


def parse_seeds(raw: str) -> List[int]:
    seeds = [int(s) for s in raw.replace(";", ",").split(",") if s.strip()]
    if not seeds:
        raise ConfigError("seeds: no seeds given")
    return seeds


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else from_dict({})
    raw = cfg.to_dict()
    if getattr(args, "algo", None):
        raw["algo"] = args.algo
    if getattr(args, "seed", None):
        raw["seeds"] = parse_seeds(args.seed)
    if getattr(args, "out", None):
        raw["out"] = args.out
    if getattr(args, "transport", None):
        raw["transport"] = args.transport
    return from_dict(raw)


def _emit(records, cfg: ExperimentConfig, as_json: bool, n_clients: int) -> None:
    path = write_metrics(records, cfg.out, as_json=as_json, n_clients=n_clients)
    log.info("wrote %d records to %s", len(records), path)


def cmd_run(args) -> int:
    cfg = _load(args)
    records = []
    for seed in cfg.seeds:
        data = B.load_data(cfg, seed)
        ledger = None
        if cfg.algo == "centralized" or (cfg.algo in ("fedavg", "fednova") and cfg.fixed_tau is None):
            log.info("seed %d: running FedVeca first for the iteration budget", seed)
            ledger = B.run_federated("fedveca", cfg, seed, data=data).ledger
        res = B.run_experiment(cfg.algo, cfg, seed, ledger=ledger, data=data)
        records += res.records
    _emit(B.with_means(records, cfg.seeds), cfg, args.json, cfg.n_clients)
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    records = []
    for seed in cfg.seeds:
        cmp = B.compare(cfg, seed)
        for res in cmp.results():
            records += res.records
        finals = ", ".join(f"{r.algo}={r.records[-1].loss:.6g}" for r in cmp.results())
        log.info("seed %d: tau_all=%d final loss %s", seed, cmp.fedveca.ledger.tau_all, finals)
    _emit(B.with_means(records, cfg.seeds), cfg, args.json, cfg.n_clients)
    return 0


def cmd_partition_inspect(args) -> int:
    cfg = _load(args)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        for seed in cfg.seeds:
            data = B.load_data(cfg, seed)
            plan = partition(data.train, cfg.partition, cfg.n_clients, seed)
            hist = label_histogram(data.train, plan)
            if seed == cfg.seeds[0]:
                writer.writerow(["seed", "client", "size"] + [f"label_{c}" for c in range(hist.shape[1])])
            for i, row in enumerate(hist):
                writer.writerow([seed, i, int(row.sum())] + [int(v) for v in row])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    sys.stdout.write(dump_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedveca", description="Federated learning with adaptive local steps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_flags=True):
        p.add_argument("--config", help="TOML experiment file")
        p.add_argument("--seed", help="seed or comma-separated seed list")
        p.add_argument("--out", help="output path")
        if run_flags:
            p.add_argument("--algo", choices=ALGOS)
            p.add_argument("--transport", help="inproc or socket:<port>")
            p.add_argument("--json", action="store_true", help="write JSON lines instead of CSV")

    p = sub.add_parser("run", help="run one algorithm")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="FedVeca, then budget-matched FedAvg/FedNova and centralized SGD")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("partition", help="partition tools")
    psub = p.add_subparsers(dest="partition_command", required=True)
    pi = psub.add_parser("inspect", help="per-client label histograms as CSV")
    common(pi, run_flags=False)
    pi.set_defaults(func=cmd_partition_inspect)

    p = sub.add_parser("validate-config", help="check a config file and print it with defaults filled in")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    level = os.environ.get("FEDVECA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedveca: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"fedveca: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
