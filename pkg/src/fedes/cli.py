"""``fedes`` command line: run, serve, client, partition-inspect, golden.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import golden
from .data import IngestionError, MODES, partition
from .detrand import PARTITION_BATCH, ConfigurationError, setup_seed
from .escore import ProtocolError
from .exp import TRANSPORTS, ExperimentConfig, load_datasets, run_client, run_experiment
from .fednet import DecodeError, TransportTimeout
from .nn import UsageError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedes")

# flag dest -> config field
OVERRIDES = {
    "algo": "algo",
    "rounds": "rounds",
    "sigma": "sigma",
    "alpha": "alpha",
    "beta": "beta",
    "n_b": "n_b",
    "clients": "clients",
    "mode": "mode",
    "transport": "transport",
    "listen": "listen",
    "connect": "connect",
    "seed": "common_seed",
    "out": "out",
}


class _Usage(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _Usage(f"{self.prog}: {message}")


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, metavar="PATH", help="experiment JSON")
    p.add_argument("--algo", choices=("fedes", "fedgd"))
    p.add_argument("--rounds", type=int, metavar="N")
    p.add_argument("--sigma", type=float, metavar="F")
    p.add_argument("--alpha", type=float, metavar="F")
    p.add_argument("--beta", type=float, metavar="F")
    p.add_argument("--n-b", dest="n_b", type=int, metavar="N")
    p.add_argument("--clients", type=int, metavar="N")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--transport", choices=TRANSPORTS)
    p.add_argument("--listen", metavar="HOST:PORT")
    p.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--seed", metavar="HEX64", help="common seed, 64 hex characters")
    p.add_argument("--out", metavar="DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedes", description="Federated evolution-strategy training.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="in-process end-to-end experiment")
    _add_overrides(run)

    serve = sub.add_parser("serve", help="TCP server; waits for K client processes")
    _add_overrides(serve)

    client = sub.add_parser("client", help="TCP client for shard k")
    _add_overrides(client)
    client.add_argument("--k", type=int, required=True, help="client index")

    inspect = sub.add_parser("partition-inspect", help="per-client label histograms")
    _add_overrides(inspect)

    gold = sub.add_parser("golden", help="emit or check pinned determinism fixtures")
    gold.add_argument("action", choices=("emit", "check"))
    gold.add_argument("--dir", default=str(golden.DEFAULT_DIR))
    return parser


def effective_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise _Usage(f"config file not found: {path}")
    try:
        cfg = ExperimentConfig.load(path)
    except json.JSONDecodeError as exc:
        raise _Usage(f"{path}: invalid JSON: {exc}") from None
    for dest, name in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.command == "serve":
        cfg.transport = "tcp"
    return cfg.validate()


def _echo(cfg: ExperimentConfig) -> None:
    print(json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr, flush=True)


def _summary(result) -> None:
    acc = result.final_accuracy
    print(f"rounds: {len(result.rows)}")
    if result.rows:
        print(f"final train loss: {result.rows[-1].train_loss:.6f}")
    if acc is not None:
        print(f"final test accuracy: {acc:.4f}")
    print(f"uplink scalars per client per round: {max(result.uplink_per_client, default=0)}")
    if result.csv_path:
        print(f"metrics: {result.csv_path}")
        print(f"params: {result.params_path}")


def cmd_run(args) -> int:
    cfg = effective_config(args)
    _echo(cfg)
    _summary(run_experiment(cfg))
    return EXIT_OK


def cmd_serve(args) -> int:
    cfg = effective_config(args)
    _echo(cfg)

    def announce(host, port):
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)

    _summary(run_experiment(cfg, local_clients=False, on_listen=announce))
    return EXIT_OK


def cmd_client(args) -> int:
    cfg = effective_config(args)
    _echo(cfg)
    served = run_client(cfg, args.k)
    print(f"client {args.k}: served {served} rounds")
    return EXIT_OK


def cmd_partition_inspect(args) -> int:
    cfg = effective_config(args)
    _echo(cfg)
    train, _ = load_datasets(cfg, with_test=False)
    part = partition(train, cfg.clients, cfg.mode, setup_seed(cfg.seed(), PARTITION_BATCH))
    hist = part.label_histograms(train.labels)
    classes = hist.shape[1]
    print("client " + " ".join(f"{c:>5d}" for c in range(classes)) + "  total")
    for k, row in enumerate(hist):
        print(f"{k:>6d} " + " ".join(f"{int(v):>5d}" for v in row) + f"  {int(row.sum()):>5d}")
    return EXIT_OK


def cmd_golden(args) -> int:
    if args.action == "emit":
        for path in golden.emit(args.dir):
            print(f"wrote {path}")
        return EXIT_OK
    problems = golden.check(args.dir)
    for p in problems:
        print(p, file=sys.stderr)
    if problems:
        return EXIT_RUNTIME
    print("golden fixtures OK")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "serve": cmd_serve,
    "client": cmd_client,
    "partition-inspect": cmd_partition_inspect,
    "golden": cmd_golden,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _Usage as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (_Usage, ConfigurationError, UsageError) as exc:
        print(f"fedes: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, ProtocolError, DecodeError, TransportTimeout, OSError) as exc:
        print(f"fedes: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
