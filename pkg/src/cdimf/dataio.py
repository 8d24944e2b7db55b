"""Interaction ingestion, indexed per-domain datasets, core filtering and splits."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, TextIO

import numpy as np
import pandas as pd
import scipy.sparse as sp

logger = logging.getLogger(__name__)

COLUMNS = ["user_id", "item_id", "timestamp"]


class DataError(Exception):
    """Malformed input data."""


class SchemaError(DataError):
    """A mapped column is missing from the input header."""


@dataclass(frozen=True)
class ColumnSchema:
    user: str = "user_id"
    item: str = "item_id"
    timestamp: str | None = None
    delimiter: str | None = None  # None: auto-detect comma vs tab


@dataclass
class InteractionLog:
    """De-duplicated (user, item[, timestamp]) records of one domain."""

    frame: pd.DataFrame
    domain_name: str = ""

    def __post_init__(self):
        frame = self.frame
        if "timestamp" not in frame.columns:
            frame = frame.assign(timestamp=pd.array([pd.NA] * len(frame), dtype="Int64"))
        self.frame = frame[COLUMNS].reset_index(drop=True)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple], domain_name: str = "") -> InteractionLog:
        rows = [tuple(p) + (None,) * (3 - len(p)) for p in pairs]
        frame = pd.DataFrame(rows, columns=COLUMNS) if rows else pd.DataFrame(columns=COLUMNS)
        frame["user_id"] = frame["user_id"].astype(str)
        frame["item_id"] = frame["item_id"].astype(str)
        frame["timestamp"] = pd.array(frame["timestamp"], dtype="Int64")
        return cls(_dedup(frame), domain_name)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def users(self) -> np.ndarray:
        return self.frame["user_id"].to_numpy()

    @property
    def items(self) -> np.ndarray:
        return self.frame["item_id"].to_numpy()

    def pairs(self) -> set[tuple[str, str]]:
        return set(zip(self.users, self.items))

    def user_set(self) -> set[str]:
        return set(self.frame["user_id"].unique())

    def select_users(self, users: Iterable[str], keep: bool = True) -> InteractionLog:
        mask = self.frame["user_id"].isin(set(users))
        return InteractionLog(self.frame[mask if keep else ~mask], self.domain_name)


@dataclass
class DomainDataset:
    """Binary user x item matrix with id vocabularies and the shared-user rows.

    Vocabularies are sorted lexicographically, so row/column order depends
    only on the id sets.
    """

    user_ids: list[str]
    item_ids: list[str]
    matrix: sp.csr_matrix
    shared_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = ""

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self.matrix.data[:] = 1.0
        self.shared_rows = np.asarray(self.shared_rows, dtype=np.int64)
        self.columns = self.matrix.tocsc()
        self.columns.sort_indices()
        self.user_index = {u: i for i, u in enumerate(self.user_ids)}
        self.item_index = {v: j for j, v in enumerate(self.item_ids)}
        if self.matrix.shape != (len(self.user_ids), len(self.item_ids)):
            raise DataError("matrix shape does not match vocabularies")
        rows = self.shared_rows
        if len(rows) and (np.any(np.diff(rows) <= 0) or rows[0] < 0 or rows[-1] >= self.n_users):
            raise DataError("shared_rows must be strictly increasing valid row indices")

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def shared_users(self) -> list[str]:
        return [self.user_ids[r] for r in self.shared_rows]

    def user_items(self, row: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[row]:m.indptr[row + 1]]

    def to_log(self) -> InteractionLog:
        coo = self.matrix.tocoo()
        users = np.asarray(self.user_ids, dtype=object)[coo.row]
        items = np.asarray(self.item_ids, dtype=object)[coo.col]
        return InteractionLog.from_pairs(zip(users, items), self.name)


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_items: int
    n_ratings: int
    n_shared: int

    def as_dict(self) -> dict:
        return {"n_users": self.n_users, "n_items": self.n_items,
                "n_ratings": self.n_ratings, "n_shared": self.n_shared}


@dataclass
class SplitBundle:
    train: DomainDataset
    validation: InteractionLog
    test: InteractionLog
    scenario: Literal["warm", "cold"]
    seed: int
    skipped_users: int = 0


def _dedup(frame: pd.DataFrame) -> pd.DataFrame:
    # earliest timestamp wins; missing timestamps sort last
    frame = frame.sort_values("timestamp", kind="stable", na_position="last")
    frame = frame.drop_duplicates(["user_id", "item_id"], keep="first")
    return frame.sort_index(kind="stable").reset_index(drop=True)


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def ingest_interactions(source: TextIO, schema: ColumnSchema = ColumnSchema(),
                        domain_name: str = "") -> InteractionLog:
    """Read a delimited text stream with a header row into a de-duplicated log.

    Extra columns (ratings, etc.) are ignored; feedback is binary.
    """
    header_line = source.readline()
    if not header_line.strip():
        return InteractionLog.from_pairs([], domain_name)
    delimiter = schema.delimiter or _sniff_delimiter(header_line)
    header = next(csv.reader([header_line], delimiter=delimiter))
    header = [h.strip() for h in header]
    wanted = [schema.user, schema.item] + ([schema.timestamp] if schema.timestamp else [])
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {missing}; header has {header}")
    ui, ii = header.index(schema.user), header.index(schema.item)
    ti = header.index(schema.timestamp) if schema.timestamp else None

    rows = []
    for lineno, rec in enumerate(csv.reader(source, delimiter=delimiter), start=2):
        if not rec or (len(rec) == 1 and not rec[0].strip()):
            continue
        if len(rec) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        user, item = rec[ui].strip(), rec[ii].strip()
        if not user or not item:
            raise DataError(f"line {lineno}: empty user or item id")
        ts = None
        if ti is not None and rec[ti].strip():
            try:
                ts = int(float(rec[ti]))
            except ValueError:
                raise DataError(f"line {lineno}: bad timestamp {rec[ti]!r}") from None
        rows.append((user, item, ts))
    return InteractionLog.from_pairs(rows, domain_name)


def read_log(path: str | Path, schema: ColumnSchema = ColumnSchema(),
             domain_name: str | None = None) -> InteractionLog:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        try:
            return ingest_interactions(fh, schema, domain_name or path.stem)
        except DataError as e:
            raise type(e)(f"{path}: {e}") from None


def write_log(log: InteractionLog, path: str | Path) -> None:
    """Write user_id/item_id pairs as TSV, sorted for byte-stable output."""
    frame = log.frame[["user_id", "item_id"]].sort_values(["user_id", "item_id"])
    frame.to_csv(path, sep="\t", index=False, lineterminator="\n")


def filter_core(log: InteractionLog, min_user: int = 5, min_item: int = 10) -> InteractionLog:
    """Drop items below ``min_item`` records, then users below ``min_user``.

    One sequential pass, not iterated to a joint fixed point.
    """
    if min_user < 1 or min_item < 1:
        raise ValueError("min_user and min_item must be >= 1")
    frame = log.frame
    item_counts = frame["item_id"].map(frame["item_id"].value_counts())
    frame = frame[item_counts >= min_item]
    user_counts = frame["user_id"].map(frame["user_id"].value_counts())
    frame = frame[user_counts >= min_user]
    out = InteractionLog(frame, log.domain_name)
    broken = out.frame["item_id"].value_counts()
    if len(broken) and broken.min() < min_item:
        logger.info("%s: user filter left %d items below min_item=%d", log.domain_name,
                    int((broken < min_item).sum()), min_item)
    return out


def check_core(log: InteractionLog, min_user: int, min_item: int) -> tuple[bool, bool]:
    """Post-hoc check: (all users >= min_user, all items >= min_item)."""
    f = log.frame
    users_ok = bool(len(f) == 0 or f["user_id"].value_counts().min() >= min_user)
    items_ok = bool(len(f) == 0 or f["item_id"].value_counts().min() >= min_item)
    return users_ok, items_ok


def build_dataset(log: InteractionLog, shared_users: Iterable[str] | None = None,
                  user_ids: list[str] | None = None,
                  item_ids: list[str] | None = None) -> DomainDataset:
    """Index a log into a DomainDataset.

    ``user_ids``/``item_ids`` may fix the vocabularies (e.g. to keep the
    pre-split catalog); otherwise they are the sorted distinct ids of the log.
    """
    users = log.users
    items = log.items
    if user_ids is None:
        user_ids = sorted(set(users))
    if item_ids is None:
        item_ids = sorted(set(items))
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {v: j for j, v in enumerate(item_ids)}
    rows = np.fromiter((uidx[u] for u in users), dtype=np.int64, count=len(users))
    cols = np.fromiter((iidx[v] for v in items), dtype=np.int64, count=len(items))
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                        shape=(len(user_ids), len(item_ids)))
    shared = set(shared_users) if shared_users is not None else set()
    shared_rows = np.array(sorted(uidx[u] for u in shared if u in uidx), dtype=np.int64)
    return DomainDataset(list(user_ids), list(item_ids), mat, shared_rows, log.domain_name)


def stats(data: DomainDataset) -> DatasetStats:
    return DatasetStats(data.n_users, data.n_items, int(data.matrix.nnz), len(data.shared_rows))


def shared_user_set(logs: Iterable[InteractionLog]) -> set[str]:
    sets = [lg.user_set() for lg in logs]
    return set.intersection(*sets) if sets else set()


def _leave_one_out(log: InteractionLog, rng: np.random.Generator):
    """Pick one record per user with >= 2 records, uniformly.

    Users iterate in sorted order and items in sorted order within a user,
    so the draw depends only on (seed, entry set).
    """
    frame = log.frame.sort_values(["user_id", "item_id"], kind="stable")
    counts = frame.groupby("user_id", sort=True).size()
    eligible = counts[counts >= 2]
    picks = rng.integers(0, eligible.to_numpy()) if len(eligible) else np.zeros(0, dtype=int)
    starts = np.concatenate([[0], np.cumsum(counts.to_numpy())[:-1]])
    start_of = dict(zip(counts.index, starts))
    chosen = np.array([start_of[u] + p for u, p in zip(eligible.index, picks)], dtype=np.int64)
    held = np.zeros(len(frame), dtype=bool)
    held[chosen] = True
    skipped = int((counts < 2).sum())
    return frame[~held], frame[held], skipped


def split_leave_one_out(data: DomainDataset, seed: int,
                        with_validation: bool = False) -> SplitBundle:
    """Move one uniformly chosen interaction per user into test.

    With ``with_validation`` a second draw on the remainder fills the
    validation set. Users with a single interaction stay in train only and
    are counted in ``skipped_users``.
    """
    rng = np.random.default_rng(seed)
    log = data.to_log()
    rest, test, skipped = _leave_one_out(log, rng)
    if skipped:
        logger.warning("%s: %d users with < 2 interactions kept out of test", data.name, skipped)
    valid = rest.iloc[:0]
    if with_validation:
        rest, valid, _ = _leave_one_out(InteractionLog(rest, log.domain_name), rng)
    train_log = InteractionLog(rest, data.name)
    train = build_dataset(train_log, data.shared_users, data.user_ids, data.item_ids)
    return SplitBundle(train, InteractionLog(valid, data.name), InteractionLog(test, data.name),
                       "warm", seed, skipped)


def split_cold_start(log_a: InteractionLog, log_b: InteractionLog, test_fraction: float,
                     seed: int, with_validation: bool = True) -> tuple[SplitBundle, SplitBundle]:
    """Hold out the full history of two disjoint shared-user groups, one per domain.

    Test users of one domain stay in the other domain's train but are not
    part of the consensus shared set.
    """
    if not 0 < test_fraction < 0.5:
        raise ValueError("test_fraction must be in (0, 0.5)")
    shared = sorted(shared_user_set([log_a, log_b]))
    n_test = int(round(test_fraction * len(shared)))
    if n_test < 1 or 2 * n_test > len(shared):
        raise DataError(f"{len(shared)} shared users is too few for test_fraction={test_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(shared))
    test_a = {shared[i] for i in perm[:n_test]}
    test_b = {shared[i] for i in perm[n_test:2 * n_test]}
    consensus = set(shared) - test_a - test_b

    bundles = []
    for log, held in ((log_a, test_a), (log_b, test_b)):
        train_log = log.select_users(held, keep=False)
        test_log = log.select_users(held)
        valid = train_log.frame.iloc[:0]
        if with_validation:
            rest, valid, _ = _leave_one_out(train_log, rng)
            train_log = InteractionLog(rest, log.domain_name)
        train = build_dataset(train_log, consensus)
        bundles.append(SplitBundle(train, InteractionLog(valid, log.domain_name), test_log,
                                   "cold", seed))
    return bundles[0], bundles[1]


def concat_domains(datasets: list[DomainDataset]) -> tuple[DomainDataset, list[int]]:
    """Join domains into one dataset: union of users, disjoint item columns.

    Item ids are prefixed with the domain name to keep them disjoint.
    Returns the joined dataset and each domain's item column offset.
    """
    user_ids = sorted(set().union(*(d.user_ids for d in datasets)))
    uidx = {u: i for i, u in enumerate(user_ids)}
    blocks, item_ids, offsets = [], [], []
    offset = 0
    for k, d in enumerate(datasets):
        prefix = d.name or f"domain{k}"
        remap = np.array([uidx[u] for u in d.user_ids], dtype=np.int64)
        coo = d.matrix.tocoo()
        blocks.append((remap[coo.row], coo.col + offset))
        item_ids.extend(f"{prefix}::{v}" for v in d.item_ids)
        offsets.append(offset)
        offset += d.n_items
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    mat = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(user_ids), offset))
    # joined item ids are unique but not globally sorted; keep domain-block order
    return DomainDataset(user_ids, item_ids, mat, np.zeros(0, dtype=np.int64), "joined"), offsets


def write_split(bundle: SplitBundle, out_dir: str | Path) -> dict:
    """Write train.tsv / valid.tsv / test.tsv and a stats.json summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_log(bundle.train.to_log(), out / "train.tsv")
    write_log(bundle.validation, out / "valid.tsv")
    write_log(bundle.test, out / "test.tsv")
    summary = {
        "scenario": bundle.scenario,
        "seed": bundle.seed,
        "train": stats(bundle.train).as_dict(),
        "test": {"n_users": int(bundle.test.frame["user_id"].nunique()),
                 "n_items": int(bundle.test.frame["item_id"].nunique()),
                 "n_ratings": len(bundle.test)},
        "valid": {"n_ratings": len(bundle.validation)},
        "skipped_users": bundle.skipped_users,
    }
    (out / "stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def read_text(text: str, schema: ColumnSchema = ColumnSchema(), domain_name: str = "") -> InteractionLog:
    return ingest_interactions(io.StringIO(text), schema, domain_name)
