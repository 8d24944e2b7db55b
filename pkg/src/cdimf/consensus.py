"""ADMM consensus over shared-user factors.

Each domain keeps local user/item factors and a dual for its shared rows;
the global variable is a proximal average of the domains' X_i + U_i shares.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from .dataio import DomainDataset
from .solver import (FactorModel, NonFiniteError, SolverConfig, init_model, local_objective,
                     update_items, update_users)

logger = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


@dataclass
class ConsensusConfig:
    rho: float = 1.0
    prox: Literal["identity", "l2"] = "identity"
    lambda_g: float = 0.0
    aggregation_period: int = 1
    outer_rounds: int = 10
    n_domains: int = 2

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.aggregation_period < 1:
            raise ValueError("aggregation_period must be >= 1")
        if self.prox not in ("identity", "l2"):
            raise ValueError(f"unknown prox {self.prox!r}")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be >= 0")

    @property
    def epochs(self) -> int:
        return self.outer_rounds * self.aggregation_period

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RoundDiagnostics:
    round: int
    primal_residuals: list[float]
    objectives: list[float]
    diverged: bool = False
    elapsed_ms: float = 0.0


@dataclass
class TrainResult:
    models: list[FactorModel]
    diagnostics: list[RoundDiagnostics]
    alignment: list[str]
    z: np.ndarray
    duals: list[np.ndarray]
    diverged: bool = False
    objective_trace: list[tuple[int, int, str, float]] = field(default_factory=list)


def prox_identity(m: np.ndarray) -> np.ndarray:
    return np.array(m, dtype=np.float64, copy=True)


def prox_l2(m: np.ndarray, lambda_g: float, mu: float) -> np.ndarray:
    """argmin_x lambda_g/2 |x|^2 + 1/(2 mu) |x - m|^2 = m / (1 + lambda_g mu)."""
    if mu <= 0:
        raise ValueError("mu must be > 0")
    if lambda_g < 0:
        raise ValueError("lambda_g must be >= 0")
    if lambda_g == 0:
        return prox_identity(m)
    return np.asarray(m, dtype=np.float64) / (1.0 + lambda_g * mu)


def aggregate(shares: Sequence[np.ndarray], config: ConsensusConfig) -> np.ndarray:
    """Z = prox(mean of shares) with mu = 1/(rho N)."""
    if len(shares) == 0:
        raise ValueError("no shares to aggregate")
    shape = shares[0].shape
    for s in shares:
        if s.shape != shape:
            raise AlignmentError(f"share shape {s.shape} != {shape}")
    mean = np.mean(np.stack(shares), axis=0)
    if config.prox == "identity":
        return prox_identity(mean)
    if config.rho <= 0:
        raise ValueError("l2 prox needs rho > 0")
    return prox_l2(mean, config.lambda_g, 1.0 / (config.rho * len(shares)))


def dual_update(u: np.ndarray, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    if not (u.shape == x.shape == z.shape):
        raise AlignmentError(f"shape mismatch: u{u.shape} x{x.shape} z{z.shape}")
    return u + (x - z)


def primal_residual(x: np.ndarray, z: np.ndarray) -> float:
    if x.shape != z.shape:
        raise AlignmentError(f"shape mismatch: x{x.shape} z{z.shape}")
    return float(np.linalg.norm(x - z))


def alignment_of(data: DomainDataset) -> list[str]:
    return sorted(data.shared_users)


def common_alignment(datasets: Sequence[DomainDataset]) -> list[str]:
    alignments = [alignment_of(d) for d in datasets]
    for d, a in zip(datasets[1:], alignments[1:]):
        if a != alignments[0]:
            raise AlignmentError(
                f"domain {d.name!r} has {len(a)} shared users, expected the same "
                f"{len(alignments[0])} as {datasets[0].name!r}")
    return alignments[0]


class DomainNode:
    """One domain's side of the protocol: local epochs, share, dual update."""

    def __init__(self, data: DomainDataset, solver: SolverConfig, config: ConsensusConfig,
                 seed, workers: int = 1):
        self.data = data
        self.config = config
        self.workers = workers
        self.model = init_model(data, solver, seed)
        self.alignment = alignment_of(data)
        self.align_rows = np.array([data.user_index[u] for u in self.alignment], dtype=np.int64)
        # alignment position k -> position in data.shared_rows
        self._pos = np.searchsorted(data.shared_rows, self.align_rows)
        s, d = len(self.alignment), solver.d
        self.z = np.zeros((s, d))
        self.dual = np.zeros((s, d))

    def target(self) -> np.ndarray | None:
        if self.config.rho == 0:
            return None
        out = np.empty_like(self.z)
        out[self._pos] = self.z - self.dual
        return out

    def update_users(self) -> None:
        self.model.users = update_users(self.model, self.data, self.target(), self.config.rho,
                                        self.workers)

    def update_items(self) -> None:
        self.model.items = update_items(self.model, self.data, self.config.rho, self.workers)

    def objective(self) -> float:
        return local_objective(self.model, self.data, self.target(), self.config.rho)

    def shared_factors(self) -> np.ndarray:
        return self.model.users[self.align_rows]

    def share(self) -> np.ndarray:
        return self.shared_factors() + self.dual

    def apply_global(self, z: np.ndarray) -> None:
        self.dual = dual_update(self.dual, self.shared_factors(), z)
        self.z = z

    def residual(self) -> float:
        return primal_residual(self.shared_factors(), self.z)


def train(domains: Sequence[tuple[DomainDataset, SolverConfig]], config: ConsensusConfig,
          seed: int, workers: int = 1,
          callback: Callable[[int, list[FactorModel], bool], None] | None = None,
          trace_objective: bool = False) -> TrainResult:
    """In-process CDIMF training over N domains.

    Domain i is initialized from ``seed + i``. Each round runs
    ``aggregation_period`` local epochs (users then items) with Z and U
    frozen, then one aggregate + dual update. With rho == 0 the exchange is
    skipped and each domain is plain iALS. ``callback(epoch, models,
    exchanged)`` fires after every local epoch (after the exchange, if any).
    """
    if not domains:
        raise ValueError("no domains")
    alignment = common_alignment([d for d, _ in domains])
    if not alignment and config.rho > 0:
        logger.warning("empty shared-user set: training degenerates to independent ALS")
    nodes = [DomainNode(data, cfg, config, seed + i, workers)
             for i, (data, cfg) in enumerate(domains)]
    result = TrainResult([n.model for n in nodes], [], alignment, nodes[0].z, [])
    exchange = config.rho > 0 and bool(alignment)
    epoch = 0

    for rnd in range(1, config.outer_rounds + 1):
        t0 = time.perf_counter()
        objectives = [0.0] * len(nodes)
        try:
            for ep in range(config.aggregation_period):
                epoch += 1
                for i, node in enumerate(nodes):
                    node.update_users()
                    if trace_objective:
                        result.objective_trace.append((epoch, i, "users", node.objective()))
                    node.update_items()
                    if trace_objective:
                        result.objective_trace.append((epoch, i, "items", node.objective()))
                last = ep == config.aggregation_period - 1
                if last:
                    objectives = [n.objective() for n in nodes]
                    if exchange:
                        z = aggregate([n.share() for n in nodes], config)
                        for node in nodes:
                            node.apply_global(z)
                if callback is not None:
                    callback(epoch, [n.model for n in nodes], last and exchange)
        except NonFiniteError as e:
            logger.error("round %d: divergence detected (%s)", rnd, e)
            result.diverged = True
        diverged = result.diverged or not all(np.isfinite(objectives))
        diag = RoundDiagnostics(rnd, [n.residual() for n in nodes], objectives, diverged,
                                1000.0 * (time.perf_counter() - t0))
        result.diagnostics.append(diag)
        if diverged:
            result.diverged = True
            break

    result.models = [n.model for n in nodes]
    result.z = nodes[0].z
    result.duals = [n.dual for n in nodes]
    return result


def write_diagnostics(diags: Sequence[RoundDiagnostics], csv_path: str | Path,
                      domain_names: Sequence[str]) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "domain", "primal_residual", "objective", "elapsed_ms"])
        for d in diags:
            for name, res, obj in zip(domain_names, d.primal_residuals, d.objectives):
                w.writerow([d.round, name, repr(res), repr(obj), f"{d.elapsed_ms:.3f}"])


def diagnostics_summary(result: TrainResult, domain_names: Sequence[str]) -> dict:
    last = result.diagnostics[-1] if result.diagnostics else None
    return {
        "rounds": len(result.diagnostics),
        "diverged": result.diverged,
        "n_shared": len(result.alignment),
        "domains": list(domain_names),
        "final_primal_residuals": last.primal_residuals if last else [],
        "final_objectives": last.objectives if last else [],
    }


def write_summary(result: TrainResult, path: str | Path, domain_names: Sequence[str]) -> None:
    Path(path).write_text(json.dumps(diagnostics_summary(result, domain_names), indent=2) + "\n")
