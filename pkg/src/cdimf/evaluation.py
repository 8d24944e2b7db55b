"""Sampled top-K ranking evaluation: HR@K, NDCG@K and candidate coverage."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataio import DomainDataset, InteractionLog
from .solver import FactorModel


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    n_negatives: int = 999
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_negatives < self.k:
            raise ValueError("n_negatives must be >= k")


@dataclass
class EvalReport:
    hr: float
    ndcg: float
    coverage: float
    n_cases: int
    k: int
    n_negatives: int
    seed: int
    skipped_users: int = 0
    skipped_items: int = 0

    def as_dict(self) -> dict:
        return asdict(self)

    def percent(self) -> dict:
        return {"hr": 100 * self.hr, "ndcg": 100 * self.ndcg, "coverage": 100 * self.coverage}


def _user_key(user_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(user_id.encode(), digest_size=8).digest(), "little")


def case_rng(seed: int, user_id: str, test_item: int) -> np.random.Generator:
    return np.random.default_rng([seed, _user_key(user_id), int(test_item)])


def sample_negatives(user_train_items, test_item: int, n_items: int, config: EvalConfig,
                     user_id: str = "") -> np.ndarray:
    """Uniform sample without replacement from the catalog minus the user's
    items and the target. Deterministic per (seed, user_id, test_item)."""
    mask = np.ones(n_items, dtype=bool)
    mask[np.asarray(list(user_train_items), dtype=np.int64)] = False
    mask[test_item] = False
    eligible = np.flatnonzero(mask)
    if len(eligible) < config.n_negatives:
        raise EvalError(f"catalog of {n_items} items leaves {len(eligible)} eligible negatives, "
                        f"need {config.n_negatives}")
    rng = case_rng(config.seed, user_id, test_item)
    return rng.choice(eligible, size=config.n_negatives, replace=False)


def candidate_order(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Descending score; the target (position 0) sorts after equal-scored
    negatives, remaining ties by item index."""
    is_target = np.zeros(len(candidates), dtype=np.int8)
    is_target[0] = 1
    return np.lexsort((candidates, is_target, -scores))


def rank_of_target(user_vec: np.ndarray, item_factors: np.ndarray,
                   candidates: np.ndarray) -> int:
    """1-based rank of ``candidates[0]``; ties count against the target."""
    scores = item_factors[candidates] @ user_vec
    return 1 + int(np.count_nonzero(scores[1:] >= scores[0]))


def metrics_from_rank(rank: int, k: int) -> tuple[float, float]:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def _user_items(data: DomainDataset | None, user_id: str, item_ids: list[str],
                item_index: dict[str, int]) -> set[int]:
    if data is None or user_id not in data.user_index:
        return set()
    own = data.user_items(data.user_index[user_id])
    if data.item_ids is item_ids:
        return set(own.tolist())
    return {item_index[data.item_ids[j]] for j in own if data.item_ids[j] in item_index}


def _evaluate(user_model: FactorModel, item_model: FactorModel, test: InteractionLog,
              config: EvalConfig, train: DomainDataset | None) -> EvalReport:
    if len(test) == 0:
        raise EvalError("empty test set")
    uidx = {u: i for i, u in enumerate(user_model.user_ids)}
    iidx = {v: j for j, v in enumerate(item_model.item_ids)}
    n_items = len(item_model.item_ids)
    frame = test.frame.sort_values(["user_id", "item_id"], kind="stable")
    positives: dict[str, set[int]] = {}
    for u, v in zip(frame["user_id"], frame["item_id"]):
        if v in iidx:
            positives.setdefault(u, set()).add(iidx[v])

    hr = ndcg = 0.0
    n_cases = skipped_users = skipped_items = 0
    seen = np.zeros(n_items, dtype=bool)
    excluded_cache: dict[str, set[int]] = {}
    for u, v in zip(frame["user_id"], frame["item_id"]):
        if u not in uidx:
            skipped_users += 1
            continue
        if v not in iidx:
            skipped_items += 1
            continue
        target = iidx[v]
        if u not in excluded_cache:
            excluded_cache[u] = _user_items(train, u, item_model.item_ids, iidx) | positives[u]
        negatives = sample_negatives(excluded_cache[u] - {target}, target, n_items, config, u)
        candidates = np.concatenate([[target], negatives])
        scores = item_model.items[candidates] @ user_model.users[uidx[u]]
        rank = 1 + int(np.count_nonzero(scores[1:] >= scores[0]))
        h, g = metrics_from_rank(rank, config.k)
        hr += h
        ndcg += g
        seen[candidates[candidate_order(scores, candidates)[:config.k]]] = True
        n_cases += 1
    if n_cases == 0:
        raise EvalError(f"no evaluable cases ({skipped_users} unknown users, "
                        f"{skipped_items} unknown items)")
    return EvalReport(hr / n_cases, ndcg / n_cases, float(seen.sum()) / n_items, n_cases,
                      config.k, config.n_negatives, config.seed, skipped_users, skipped_items)


def evaluate_warm(model: FactorModel, test: InteractionLog, config: EvalConfig = EvalConfig(),
                  train: DomainDataset | None = None) -> EvalReport:
    """Rank each test item against sampled negatives using in-domain user factors.

    ``train`` supplies the items excluded from the negative sample.
    """
    return _evaluate(model, model, test, config, train)


def evaluate_cold(source_model: FactorModel, target_model: FactorModel, test: InteractionLog,
                  config: EvalConfig = EvalConfig(),
                  target_train: DomainDataset | None = None) -> EvalReport:
    """Score target-domain candidates with the user's source-domain factors."""
    return _evaluate(source_model, target_model, test, config, target_train)


def write_report(report: EvalReport, path: str | Path, **extra) -> None:
    payload = {k: getattr(report, k) for k in ("hr", "ndcg", "coverage", "n_cases", "k",
                                               "n_negatives", "seed")}
    payload.update(skipped_users=report.skipped_users, skipped_items=report.skipped_items)
    payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def append_run(report: EvalReport, csv_path: str | Path, **fields) -> None:
    path = Path(csv_path)
    row = dict(fields)
    row.update(report.as_dict())
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)
