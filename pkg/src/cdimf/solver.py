"""Local iALS engine: initialization, Gramians, per-row SPD solves, half-sweeps.

Per-row system (users; items are symmetric on the column view)::

    (sum_j y_j y_j^T + alpha * Y^T Y + (lambda_u + rho_u) I) x_u = sum_j y_j + rho_u * h_u

which is the stationarity condition of

    1/2 sum_S (x.y - 1)^2 + alpha/2 sum_UxI (x.y)^2 + 1/2 sum lambda_u |x_u|^2
    + 1/2 sum lambda_i |y_i|^2 + rho/2 sum |x_u - h_u|^2 (+ private/item pulls to 0)
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

from .dataio import DomainDataset

logger = logging.getLogger(__name__)

MAGIC = b"CDMF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBQQ")
ROLES = {"user": 0, "item": 1}

# bound on entries * d * d doubles materialized per block of rows
_BLOCK_BUDGET = 4_000_000


class SolverError(Exception):
    pass


class NonFiniteError(SolverError):
    """Non-finite values in factors or solver inputs."""


@dataclass
class SolverConfig:
    d: int = 16
    alpha: float = 0.01
    lam: float = 0.1
    nu: float = 0.0
    sigma: float = 0.1
    rho_on_private_users: bool = True
    rho_on_items: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0.0 <= self.nu <= 1.0:
            raise ValueError("nu must be in [0, 1]")
        if self.alpha < 0 or self.lam < 0 or self.sigma < 0:
            raise ValueError("alpha, lam and sigma must be non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class FactorModel:
    users: np.ndarray
    items: np.ndarray
    config: SolverConfig
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.users.shape[1] != self.items.shape[1]:
            raise ValueError("user and item factors must share width d")

    def copy(self) -> FactorModel:
        return FactorModel(self.users.copy(), self.items.copy(), self.config,
                           list(self.user_ids), list(self.item_ids))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.users).all() and np.isfinite(self.items).all())


def init_factors(n: int, config: SolverConfig, seed) -> np.ndarray:
    """i.i.d. N(0, (sigma/sqrt(d))^2) entries, shape (n, d)."""
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, config.sigma / np.sqrt(config.d), size=(n, config.d))


def init_model(data: DomainDataset, config: SolverConfig, seed) -> FactorModel:
    user_seed, item_seed = np.random.SeedSequence(seed).spawn(2)
    return FactorModel(init_factors(data.n_users, config, user_seed),
                       init_factors(data.n_items, config, item_seed),
                       config, list(data.user_ids), list(data.item_ids))


def reg_weight(own_count, opposite_catalog, config: SolverConfig):
    """lambda * (own_count + alpha * opposite_catalog) ** nu, with 0**0 == 1.

    Works elementwise on arrays of counts.
    """
    base = np.asarray(own_count, dtype=np.float64) + config.alpha * opposite_catalog
    # numpy already gives 0.0**0 == 1.0
    return config.lam * np.power(base, config.nu)


def gramian(f: np.ndarray) -> np.ndarray:
    return f.T @ f


def _spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched Cholesky solve of a[k] x[k] = b[k]."""
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise SolverError("row system is not positive definite; "
                          "use nonzero regularization (lam or rho)") from None
    z = np.linalg.solve(low, b[..., None])
    return np.linalg.solve(np.swapaxes(low, -1, -2), z)[..., 0]


def solve_row(observed: np.ndarray, gram: np.ndarray, alpha: float, lambda_row: float,
              rho_eff: float = 0.0, h: np.ndarray | None = None) -> np.ndarray:
    """Solve one user/item row given the observed opposite factors."""
    observed = np.asarray(observed, dtype=np.float64).reshape(-1, gram.shape[0])
    d = gram.shape[0]
    if not (np.isfinite(observed).all() and np.isfinite(gram).all()
            and np.isfinite([alpha, lambda_row, rho_eff]).all()):
        raise NonFiniteError("non-finite solver input")
    a = alpha * gram + (lambda_row + rho_eff) * np.eye(d)
    b = np.zeros(d)
    if len(observed):
        a = a + observed.T @ observed
        b = observed.sum(axis=0)
    if rho_eff and h is not None:
        b = b + rho_eff * np.asarray(h, dtype=np.float64)
    return _spd_solve(a[None], b[None])[0]


def _row_blocks(indptr: np.ndarray, d: int) -> list[tuple[int, int]]:
    limit = max(1, _BLOCK_BUDGET // (d * d))
    n = len(indptr) - 1
    blocks, start = [], 0
    while start < n:
        stop = int(np.searchsorted(indptr, indptr[start] + limit, side="right")) - 1
        stop = min(max(stop, start + 1), n)
        blocks.append((start, stop))
        start = stop
    return blocks


def _solve_block(start, stop, indptr, indices, other, base, diag, rhs0):
    counts = np.diff(indptr[start:stop + 1])
    a = np.broadcast_to(base, (stop - start,) + base.shape).copy()
    idx = np.arange(base.shape[0])
    a[:, idx, idx] += diag[start:stop, None]
    b = rhs0[start:stop].copy()
    nonempty = counts > 0
    # zero-weight empty rows (lambda_row = 0 via 0**nu, no rho): the objective
    # is flat in that row apart from alpha*G, so take the minimum-norm solution 0
    flat = ~nonempty & (diag[start:stop] == 0) & ~np.any(b, axis=1)
    if flat.any():
        a[flat] = np.eye(base.shape[0])
    if nonempty.any():
        obs = other[indices[indptr[start]:indptr[stop]]]
        offsets = (indptr[start:stop] - indptr[start])[nonempty]
        a[nonempty] += np.add.reduceat(obs[:, :, None] * obs[:, None, :], offsets, axis=0)
        b[nonempty] += np.add.reduceat(obs, offsets, axis=0)
    return _spd_solve(a, b)


def half_sweep(indptr: np.ndarray, indices: np.ndarray, other: np.ndarray, alpha: float,
               lambda_rows: np.ndarray, rho_rows: np.ndarray, targets: np.ndarray,
               workers: int = 1) -> np.ndarray:
    """Solve every row of one side against the fixed opposite factors.

    Each row only reads ``other`` and writes its own output, so the row
    blocks may run on any number of threads with bit-identical results.
    """
    if not np.isfinite(other).all():
        raise NonFiniteError("non-finite opposite factors")
    d = other.shape[1]
    base = alpha * gramian(other)
    diag = np.asarray(lambda_rows, dtype=np.float64) + rho_rows
    rhs0 = rho_rows[:, None] * targets
    n = len(indptr) - 1
    if n == 0:
        return np.zeros((0, d))
    blocks = _row_blocks(indptr, d)
    args = (indptr, indices, other, base, diag, rhs0)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda blk: _solve_block(*blk, *args), blocks))
    else:
        parts = [_solve_block(s, e, *args) for s, e in blocks]
    out = np.concatenate(parts, axis=0)
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite factors after solve")
    return out


def _user_penalty(data: DomainDataset, config: SolverConfig, d: int,
                  target: np.ndarray | None, rho: float) -> tuple[np.ndarray, np.ndarray]:
    rho_rows = np.full(data.n_users, rho if config.rho_on_private_users else 0.0)
    targets = np.zeros((data.n_users, d))
    if len(data.shared_rows):
        rho_rows[data.shared_rows] = rho
        if target is not None:
            targets[data.shared_rows] = target
    return rho_rows, targets


def update_users(model: FactorModel, data: DomainDataset, target: np.ndarray | None = None,
                 rho: float = 0.0, workers: int = 1) -> np.ndarray:
    """New user factors. ``target`` rows align with ``data.shared_rows`` (Z - U)."""
    cfg = model.config
    d = model.items.shape[1]
    if rho > 0 and len(data.shared_rows) and target is None:
        raise ValueError("rho > 0 requires a consensus target for the shared rows")
    if target is not None and target.shape != (len(data.shared_rows), d):
        raise ValueError(f"target shape {target.shape} != ({len(data.shared_rows)}, {d})")
    m = data.matrix
    lam = reg_weight(np.diff(m.indptr), data.n_items, cfg)
    rho_rows, targets = _user_penalty(data, cfg, d, target, rho)
    return half_sweep(m.indptr, m.indices, model.items, cfg.alpha, lam, rho_rows, targets,
                      workers)


def update_items(model: FactorModel, data: DomainDataset, rho: float = 0.0,
                 workers: int = 1) -> np.ndarray:
    cfg = model.config
    d = model.users.shape[1]
    c = data.columns
    lam = reg_weight(np.diff(c.indptr), data.n_users, cfg)
    rho_rows = np.full(data.n_items, rho if cfg.rho_on_items else 0.0)
    return half_sweep(c.indptr, c.indices, model.users, cfg.alpha, lam, rho_rows,
                      np.zeros((data.n_items, d)), workers)


def local_objective(model: FactorModel, data: DomainDataset, target: np.ndarray | None = None,
                    rho: float = 0.0) -> float:
    """Halved iALS loss plus the rho/2 consensus penalties this config applies."""
    cfg = model.config
    x, y = model.users, model.items
    coo = data.matrix.tocoo()
    obs = np.einsum("ij,ij->i", x[coo.row], y[coo.col])
    loss_s = float(np.sum((obs - 1.0) ** 2))
    loss_i = cfg.alpha * float(np.sum(gramian(x) * gramian(y)))
    lam_u = reg_weight(np.diff(data.matrix.indptr), data.n_items, cfg)
    lam_i = reg_weight(np.diff(data.columns.indptr), data.n_users, cfg)
    reg = float(lam_u @ np.sum(x * x, axis=1) + lam_i @ np.sum(y * y, axis=1))
    total = 0.5 * (loss_s + loss_i + reg)
    if rho:
        rho_rows, targets = _user_penalty(data, cfg, x.shape[1], target, rho)
        pen = float(rho_rows @ np.sum((x - targets) ** 2, axis=1))
        if cfg.rho_on_items:
            pen += rho * float(np.sum(y * y))
        total += 0.5 * pen
    return total


def train_als(data: DomainDataset, config: SolverConfig, epochs: int, seed,
              workers: int = 1,
              callback: Callable[[int, FactorModel], None] | None = None) -> FactorModel:
    """Plain single-domain iALS: users then items, ``epochs`` times."""
    model = init_model(data, config, seed)
    for epoch in range(1, epochs + 1):
        model.users = update_users(model, data, workers=workers)
        model.items = update_items(model, data, workers=workers)
        if callback is not None:
            callback(epoch, model)
    return model


def save_factors(path: str | Path, factors: np.ndarray, role: Literal["user", "item"]) -> None:
    """Flat binary: 'CDMF', u32 version, u8 role, u64 n, u64 d, LE doubles row-major."""
    factors = np.ascontiguousarray(factors, dtype="<f8")
    if not np.isfinite(factors).all():
        raise NonFiniteError(f"refusing to write non-finite factors to {path}")
    n, d = factors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ROLES[role], n, d))
        fh.write(factors.tobytes())


def load_factors(path: str | Path) -> tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise SolverError(f"{path}: truncated factor file")
    magic, version, role, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise SolverError(f"{path}: not a factor file (magic={magic!r}, version={version})")
    body = raw[_HEADER.size:]
    if len(body) != 8 * n * d:
        raise SolverError(f"{path}: expected {n}x{d} doubles, got {len(body)} bytes")
    names = {v: k for k, v in ROLES.items()}
    return np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64), names[role]


def _write_ids(path: Path, ids) -> None:
    path.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


def _read_ids(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def save_model(directory: str | Path, model: FactorModel,
               alignment: list[str] | None = None) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_factors(out / "users.cdmf", model.users, "user")
    save_factors(out / "items.cdmf", model.items, "item")
    _write_ids(out / "user_ids.txt", model.user_ids)
    _write_ids(out / "item_ids.txt", model.item_ids)
    if alignment is not None:
        _write_ids(out / "alignment.txt", alignment)
    (out / "solver.json").write_text(
        json.dumps(model.config.as_dict(), indent=2, sort_keys=True) + "\n")


def load_model(directory: str | Path) -> FactorModel:
    src = Path(directory)
    if not (src / "users.cdmf").exists():
        raise FileNotFoundError(f"no model in {src}")
    users, _ = load_factors(src / "users.cdmf")
    items, _ = load_factors(src / "items.cdmf")
    cfg_path = src / "solver.json"
    cfg = SolverConfig(**json.loads(cfg_path.read_text())) if cfg_path.exists() \
        else SolverConfig(d=users.shape[1])
    return FactorModel(users, items, cfg, _read_ids(src / "user_ids.txt"),
                       _read_ids(src / "item_ids.txt"))
