"""Command-line entry point: prepare, train, evaluate, sweep, aggregator, worker."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError
from .dataio import (ColumnSchema, DataError, build_dataset, check_core, filter_core, read_log,
                     shared_user_set, split_cold_start, split_leave_one_out, stats, write_split)
from .evaluation import EvalConfig, EvalError, append_run, evaluate_cold, evaluate_warm, write_report
from .federation import FederationError, ProtocolError, run_aggregator, run_worker
from .runner import MODES, DivergenceError, load_domains, run_sweep, run_train
from .solver import SolverError, load_model

logger = logging.getLogger("cdimf")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_PROTOCOL = 0, 2, 3, 4, 5

OVERRIDES = {
    "d": ("solver.d", int), "alpha": ("solver.alpha", float), "lam": ("solver.lam", float),
    "nu": ("solver.nu", float), "sigma": ("solver.sigma", float),
    "rho": ("consensus.rho", float), "prox": ("consensus.prox", str),
    "lambda_g": ("consensus.lambda_g", float), "ap": ("consensus.aggregation_period", int),
    "rounds": ("consensus.outer_rounds", int), "seed": ("seed", int),
    "output_dir": ("output_dir", str), "workers": ("workers", int),
    "k": ("eval.k", int), "negatives": ("eval.n_negatives", int),
}


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides (flags win over the config file)")
    for name, (key, typ) in OVERRIDES.items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None,
                       help=key)


def _load_config(args) -> cfgmod.RunConfig:
    overrides = {key: getattr(args, name) for name, (key, _) in OVERRIDES.items()
                 if getattr(args, name, None) is not None}
    return cfgmod.load(args.config, overrides)


def _schema(args) -> ColumnSchema:
    delim = {"auto": None, "comma": ",", "tab": "\t"}[args.delimiter]
    return ColumnSchema(args.user_col, args.item_col, args.timestamp_col, delim)


def cmd_prepare(args) -> int:
    schema = _schema(args)
    names = args.names or [Path(p).stem for p in args.input]
    if len(names) != len(args.input):
        raise ConfigError("--names must match --input")
    logs = [read_log(p, schema, n) for p, n in zip(args.input, names)]
    if not args.no_filter:
        logs = [filter_core(lg, args.min_user, args.min_item) for lg in logs]
        for lg in logs:
            users_ok, items_ok = check_core(lg, args.min_user, args.min_item)
            if not items_ok:
                logger.warning("%s: some items fell below min_item after the user filter",
                               lg.domain_name)
    out = Path(args.out)
    summaries = {}
    if args.scenario == "warm":
        shared = shared_user_set(logs)
        for k, lg in enumerate(logs):
            data = build_dataset(lg.select_users(shared), shared)
            bundle = split_leave_one_out(data, args.seed + k, with_validation=True)
            summaries[lg.domain_name] = write_split(bundle, out / lg.domain_name)
    else:
        if len(logs) != 2:
            raise ConfigError("cold scenario needs exactly two inputs")
        a, b = split_cold_start(logs[0], logs[1], args.test_fraction, args.seed)
        test_a, test_b = a.test.user_set(), b.test.user_set()
        if test_a & test_b:
            raise DataError("cold test user sets overlap")
        for lg, bundle in zip(logs, (a, b)):
            summaries[lg.domain_name] = write_split(bundle, out / lg.domain_name)
        print(f"cold test users: {len(test_a)} ({names[0]}), {len(test_b)} ({names[1]}), disjoint")
    (out / "stats.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    print(f"{'domain':<14}{'users':>9}{'items':>9}{'ratings':>10}{'shared':>9}"
          f"{'test users':>12}{'test ratings':>14}")
    for name, s in summaries.items():
        t = s["train"]
        print(f"{name:<14}{t['n_users']:>9}{t['n_items']:>9}{t['n_ratings']:>10}"
              f"{t['n_shared']:>9}{s['test']['n_users']:>12}{s['test']['n_ratings']:>14}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    mode = args.mode
    if mode == "cdimf-aggregator":
        return _aggregator(cfg, args)
    if mode == "cdimf-worker":
        return _worker(cfg, args)
    summary = run_train(cfg, mode)
    for name, pct in summary["domains"].items():
        print(f"{name}: HR@{cfg.eval.k}={pct['hr']:.2f} NDCG@{cfg.eval.k}={pct['ndcg']:.2f} "
              f"coverage={pct['coverage']:.2f}")
    print(f"artifacts in {cfg.output_dir}")
    return EXIT_OK


def _aggregator(cfg, args) -> int:
    result = run_aggregator(args.address, cfg.consensus, args.timeout)
    print(f"session finished after {result.rounds} rounds")
    return EXIT_OK


def _worker(cfg, args) -> int:
    if args.domain_index is None:
        raise ConfigError("worker mode needs --domain-index")
    doms = load_domains(cfg)
    i = args.domain_index
    out = Path(cfg.output_dir)
    from .solver import save_model

    model = run_worker(args.address, doms.train[i], cfg.solvers[i], cfg.consensus, cfg.seed,
                       domain_id=i, timeout=args.timeout,
                       checkpoint=out / f"checkpoint_{doms.names[i]}.npz", workers=cfg.workers)
    save_model(out / "models" / doms.names[i], model, sorted(doms.shared))
    if doms.test[i] is not None and cfg.scenario == "warm":
        rep = evaluate_warm(model, doms.test[i], cfg.eval, doms.train[i])
        write_report(rep, out / f"report_{doms.names[i]}.json", domain=doms.names[i],
                     mode="cdimf-worker")
        print(f"{doms.names[i]}: HR@{cfg.eval.k}={100 * rep.hr:.2f} "
              f"NDCG@{cfg.eval.k}={100 * rep.ndcg:.2f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ev = EvalConfig(args.k, args.negatives, args.seed)
    for path in [args.model, args.source]:
        if path is not None and not (Path(path) / "users.cdmf").exists():
            print(f"error: no model at {path}", file=sys.stderr)
            return EXIT_DATA
    target = load_model(args.model)
    test = read_log(args.test)
    train = None
    if args.train:
        tlog = read_log(args.train)
        train = build_dataset(tlog, user_ids=None, item_ids=None)
    if args.scenario == "warm":
        rep = evaluate_warm(target, test, ev, train)
    else:
        if args.source is None:
            raise ConfigError("cold evaluation needs --source")
        rep = evaluate_cold(load_model(args.source), target, test, ev, train)
    pct = rep.percent()
    print(f"HR@{ev.k}={pct['hr']:.2f} NDCG@{ev.k}={pct['ndcg']:.2f} coverage={pct['coverage']:.2f} "
          f"cases={rep.n_cases} skipped_users={rep.skipped_users} skipped_items={rep.skipped_items}")
    if args.out:
        write_report(rep, args.out, scenario=args.scenario, model=str(args.model))
    if args.runs_csv:
        append_run(rep, args.runs_csv, model=str(args.model), scenario=args.scenario)
    return EXIT_OK


def _parse_grid(args) -> dict:
    grid = {}
    if args.grid:
        grid.update(json.loads(Path(args.grid).read_text()))
    for item in args.set or []:
        key, _, values = item.partition("=")
        grid[key] = [json.loads(v) for v in values.split(",")]
    if not grid:
        raise ConfigError("empty grid (use --grid FILE or --set key=v1,v2)")
    return grid


def cmd_sweep(args) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    n = run_sweep(raw, path.parent, _parse_grid(args), Path(args.out), args.mode, args.split,
                  args.eval_every, args.jobs)
    print(f"{n} grid points written to {args.out}")
    return EXIT_OK


def cmd_aggregator(args) -> int:
    return _aggregator(_load_config(args), args)


def cmd_worker(args) -> int:
    return _worker(_load_config(args), args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdimf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter raw logs and write train/valid/test splits")
    p.add_argument("--input", action="append", required=True, help="delimited file, one per domain")
    p.add_argument("--names", nargs="+")
    p.add_argument("--user-col", default="user_id")
    p.add_argument("--item-col", default="item_id")
    p.add_argument("--timestamp-col")
    p.add_argument("--delimiter", choices=["auto", "comma", "tab"], default="auto")
    p.add_argument("--min-user", type=int, default=5)
    p.add_argument("--min-item", type=int, default=10)
    p.add_argument("--no-filter", action="store_true")
    p.add_argument("--scenario", choices=["warm", "cold"], default="warm")
    p.add_argument("--test-fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train models from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=MODES, default="cdimf")
    p.add_argument("--address", help="aggregator host:port (default $CDIMF_AGGREGATOR)")
    p.add_argument("--domain-index", type=int)
    p.add_argument("--timeout", type=float, default=300.0)
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="sampled top-K evaluation of saved models")
    p.add_argument("--model", required=True, help="model directory (target domain)")
    p.add_argument("--source", help="source-domain model directory (cold scenario)")
    p.add_argument("--test", required=True)
    p.add_argument("--train", help="target-domain train file; its items are excluded from negatives")
    p.add_argument("--scenario", choices=["warm", "cold"], default="warm")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--negatives", type=int, default=999)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--runs-csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid sweep writing per-epoch metrics to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", help="JSON file {dotted.key: [values]}")
    p.add_argument("--set", action="append", help="dotted.key=v1,v2,... (JSON values)")
    p.add_argument("--mode", choices=MODES[:3], default="cdimf")
    p.add_argument("--split", choices=["valid", "test"], default="valid")
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1, help="grid points run in parallel processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    for name, func in (("aggregator", cmd_aggregator), ("worker", cmd_worker)):
        p = sub.add_parser(name, help=f"federated {name} (same as train --mode cdimf-{name})")
        p.add_argument("--config", required=True)
        p.add_argument("--address", help="host:port (default $CDIMF_AGGREGATOR)")
        p.add_argument("--timeout", type=float, default=300.0)
        if name == "worker":
            p.add_argument("--domain-index", type=int, required=True)
        _add_overrides(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ProtocolError, FederationError) as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (DataError, EvalError, SolverError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
