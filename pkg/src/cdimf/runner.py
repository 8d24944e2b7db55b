"""Training/evaluation pipelines behind the CLI commands."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .config import RunConfig, from_dict, set_dotted
from .consensus import TrainResult, train, write_diagnostics, write_summary
from .dataio import DomainDataset, InteractionLog, build_dataset, concat_domains, read_log
from .evaluation import EvalConfig, EvalReport, evaluate_cold, evaluate_warm, write_report
from .solver import FactorModel, save_model, train_als

logger = logging.getLogger(__name__)

MODES = ("als-separate", "als-joined", "cdimf", "cdimf-worker", "cdimf-aggregator")


class DivergenceError(RuntimeError):
    pass


@dataclass
class Domains:
    train: list[DomainDataset]
    valid: list[InteractionLog | None]
    test: list[InteractionLog | None]
    names: list[str]
    shared: set[str] = field(default_factory=set)


def load_domains(cfg: RunConfig) -> Domains:
    """Read train/valid/test files; the shared set is the intersection of
    the domains' training users."""
    logs = [read_log(d.train, domain_name=d.name) for d in cfg.domains]
    shared = set.intersection(*(lg.user_set() for lg in logs)) if len(logs) > 1 else set()
    train_sets = [build_dataset(lg, shared) for lg in logs]

    def opt(path, name):
        return read_log(path, domain_name=name) if path is not None and Path(path).exists() \
            else None

    return Domains(train_sets, [opt(d.valid, d.name) for d in cfg.domains],
                   [opt(d.test, d.name) for d in cfg.domains],
                   [d.name for d in cfg.domains], shared)


def _split_joined(model: FactorModel, joined: DomainDataset, parts: list[DomainDataset],
                  offsets: list[int]) -> list[FactorModel]:
    out = []
    for part, off in zip(parts, offsets):
        rows = np.array([joined.user_index[u] for u in part.user_ids], dtype=np.int64)
        out.append(FactorModel(model.users[rows].copy(),
                               model.items[off:off + part.n_items].copy(), model.config,
                               list(part.user_ids), list(part.item_ids)))
    return out


EpochCallback = Callable[[int, list[FactorModel], bool], None]


def train_models(cfg: RunConfig, mode: str, doms: Domains,
                 callback: EpochCallback | None = None) -> tuple[list[FactorModel], TrainResult | None]:
    """Train all domains in-process with the given mode."""
    epochs = cfg.consensus.epochs
    if mode == "als-separate":
        models = [None] * len(doms.train)
        for i, (data, scfg) in enumerate(zip(doms.train, cfg.solvers)):
            models[i] = train_als(data, scfg, epochs, cfg.seed + i, cfg.workers)
        if callback is not None:
            callback(epochs, models, False)
        return models, None
    if mode == "als-joined":
        joined, offsets = concat_domains(doms.train)

        def cb(epoch, model):
            if callback is not None:
                callback(epoch, _split_joined(model, joined, doms.train, offsets), False)

        model = train_als(joined, cfg.solvers[0], epochs, cfg.seed, cfg.workers, cb)
        return _split_joined(model, joined, doms.train, offsets), None
    if mode == "cdimf":
        if len(doms.train) < 2:
            raise ValueError("cdimf needs at least 2 domains")
        result = train(list(zip(doms.train, cfg.solvers)), cfg.consensus, cfg.seed,
                       cfg.workers, callback)
        return result.models, result
    raise ValueError(f"mode {mode!r} is not an in-process training mode")


def evaluate_domains(cfg: RunConfig, models: list[FactorModel], doms: Domains,
                     split: str = "test", eval_cfg: EvalConfig | None = None
                     ) -> list[EvalReport | None]:
    """Warm: each domain's own factors. Cold: user factors from the other
    domain (two-domain setups), items from the evaluated domain."""
    eval_cfg = eval_cfg or cfg.eval
    logs = doms.test if split == "test" else doms.valid
    reports = []
    for i, log in enumerate(logs):
        if log is None or len(log) == 0:
            reports.append(None)
            continue
        if cfg.scenario == "warm" or split == "valid":
            reports.append(evaluate_warm(models[i], log, eval_cfg, doms.train[i]))
        else:
            source = models[1 - i] if len(models) == 2 else models[(i + 1) % len(models)]
            reports.append(evaluate_cold(source, models[i], log, eval_cfg, doms.train[i]))
    return reports


def write_manifest(cfg: RunConfig, out: Path, **extra) -> None:
    import pandas
    import scipy

    manifest = {
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "versions": {"cdimf": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pandas.__version__},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def run_train(cfg: RunConfig, mode: str) -> dict:
    """Train, save models/diagnostics under output_dir, evaluate on test."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    doms = load_domains(cfg)
    models, result = train_models(cfg, mode, doms)
    if result is not None:
        write_diagnostics(result.diagnostics, out / "diagnostics.csv", doms.names)
        write_summary(result, out / "summary.json", doms.names)
        if result.diverged:
            raise DivergenceError(f"training diverged; diagnostics in {out}")
    alignment = sorted(doms.shared)
    for name, model in zip(doms.names, models):
        save_model(out / "models" / name, model, alignment)
    summary = {"mode": mode, "domains": {}}
    reports = evaluate_domains(cfg, models, doms, "test")
    for name, rep in zip(doms.names, reports):
        if rep is None:
            continue
        write_report(rep, out / f"report_{name}.json", domain=name, mode=mode,
                     scenario=cfg.scenario)
        summary["domains"][name] = rep.percent()
    write_manifest(cfg, out, mode=mode)
    return summary


def expand_grid(grid: dict[str, list]) -> list[dict[str, Any]]:
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


SWEEP_FIELDS = ["grid_index", "seed", "params", "mode", "epoch", "exchanged", "domain",
                "hr", "ndcg", "coverage", "status", "message"]


def _sweep_point(raw: dict, base_dir: Path, mode: str, index: int, params: dict,
                 split: str, eval_every: int) -> list[dict]:
    raw = json.loads(json.dumps(raw))
    for k, v in params.items():
        set_dotted(raw, k, v)
    raw["seed"] = int(raw.get("seed", 0)) + index
    base = {"grid_index": index, "seed": raw["seed"], "params": json.dumps(params, sort_keys=True),
            "mode": mode}
    rows: list[dict] = []
    try:
        cfg = from_dict(raw, base_dir)
        doms = load_domains(cfg)
        if split == "valid" and all(v is None or len(v) == 0 for v in doms.valid):
            split = "test"

        def cb(epoch, models, exchanged):
            if epoch % eval_every and epoch != cfg.consensus.epochs:
                return
            for name, rep in zip(doms.names, evaluate_domains(cfg, models, doms, split)):
                if rep is not None:
                    rows.append({**base, "epoch": epoch, "exchanged": int(exchanged),
                                 "domain": name, "hr": rep.hr, "ndcg": rep.ndcg,
                                 "coverage": rep.coverage, "status": "ok", "message": ""})

        _, result = train_models(cfg, mode, doms, cb)
        if result is not None and result.diverged:
            rows.append({**base, "epoch": len(result.diagnostics) * cfg.consensus.aggregation_period,
                         "exchanged": 0, "domain": "", "hr": "", "ndcg": "", "coverage": "",
                         "status": "diverged", "message": ""})
    except Exception as e:  # recorded, the sweep continues
        logger.exception("grid point %d failed", index)
        rows.append({**base, "epoch": "", "exchanged": "", "domain": "", "hr": "", "ndcg": "",
                     "coverage": "", "status": "error", "message": f"{type(e).__name__}: {e}"})
    return rows


def run_sweep(raw: dict, base_dir: Path, grid: dict[str, list], out_csv: Path,
              mode: str = "cdimf", split: str = "valid", eval_every: int = 1,
              jobs: int = 1) -> int:
    """Train/evaluate every grid point with seed = base seed + grid index and
    write one CSV row per (epoch, domain, grid point)."""
    points = expand_grid(grid)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    args = [(raw, base_dir, mode, i, p, split, eval_every) for i, p in enumerate(points)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_point_star, args))
    else:
        results = [_sweep_point(*a) for a in args]
    with open(out_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        w.writeheader()
        for rows in results:
            w.writerows(rows)
    return len(points)


def _sweep_point_star(args):
    return _sweep_point(*args)
