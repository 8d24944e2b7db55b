"""Synthetic cross-domain interaction logs driven by common user factors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import InteractionLog, build_dataset, split_leave_one_out, SplitBundle


@dataclass
class SyntheticPair:
    logs: list[InteractionLog]
    user_factors: np.ndarray
    item_factors: list[np.ndarray]


def make_pair(n_users: int = 500, n_items: int = 200, rank: int = 8,
              interactions: tuple[int, int] = (5, 15), temperature: float = 4.0,
              n_private: int = 0, seed: int = 0, names=("A", "B")) -> SyntheticPair:
    """Two domains whose interactions are drawn from the same user factors.

    Each user samples between ``interactions[0]`` and ``interactions[1]``
    items per domain without replacement, with probability proportional to
    exp(temperature * <w_u, v_i>). ``n_private`` extra users per domain
    appear in that domain only.
    """
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(n_users, rank)) / np.sqrt(rank)
    logs, item_factors = [], []
    for k, name in enumerate(names):
        v = rng.normal(size=(n_items, rank)) / np.sqrt(rank)
        item_factors.append(v)
        private = rng.normal(size=(n_private, rank)) / np.sqrt(rank)
        users = np.vstack([w, private])
        ids = [f"u{u:05d}" for u in range(n_users)] + \
              [f"{name}_p{u:04d}" for u in range(n_private)]
        pairs = []
        logits = temperature * users @ v.T
        for uid, row in zip(ids, logits):
            p = np.exp(row - row.max())
            p /= p.sum()
            m = int(rng.integers(interactions[0], interactions[1] + 1))
            for j in rng.choice(n_items, size=min(m, n_items), replace=False, p=p):
                pairs.append((uid, f"{name}_i{j:05d}"))
        logs.append(InteractionLog.from_pairs(pairs, name))
    return SyntheticPair(logs, w, item_factors)


def warm_suite(pair: SyntheticPair, seed: int = 0,
               with_validation: bool = True) -> list[SplitBundle]:
    """Leave-one-out splits of each domain restricted to the common users."""
    shared = set.intersection(*(lg.user_set() for lg in pair.logs))
    bundles = []
    for k, log in enumerate(pair.logs):
        data = build_dataset(log.select_users(shared), shared)
        bundles.append(split_leave_one_out(data, seed + k, with_validation=with_validation))
    return bundles
