"""JSON run configuration.

Schema::

    {
      "scenario": "warm" | "cold",
      "domains": [{"name": str, "train": path, "valid": path?, "test": path?}, ...],
      "solver": {SolverConfig fields} | [one per domain],
      "consensus": {ConsensusConfig fields},
      "eval": {"k": int, "n_negatives": int, "seed": int},
      "output_dir": path,
      "seed": int,
      "workers": int
    }

Relative paths resolve against the config file's directory. Dotted keys
(``consensus.rho``, ``solver.lam``) address fields for overrides and sweeps.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .consensus import ConsensusConfig
from .evaluation import EvalConfig
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass
class DomainSpec:
    name: str
    train: Path
    valid: Path | None = None
    test: Path | None = None


@dataclass
class RunConfig:
    scenario: str
    domains: list[DomainSpec]
    solvers: list[SolverConfig]
    consensus: ConsensusConfig
    eval: EvalConfig
    output_dir: Path
    seed: int = 0
    workers: int = 1
    raw: dict = field(default_factory=dict)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def set_dotted(raw: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = raw
    for i, p in enumerate(parts[:-1]):
        nxt = node.get(p)
        if isinstance(nxt, list):
            # per-domain lists take the override on every entry
            for entry in nxt:
                set_dotted(entry, ".".join(parts[i + 1:]), value)
            return
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = copy.deepcopy(raw)
    base = base_dir or Path(".")

    def resolve(p):
        if p in (None, ""):
            return None
        path = Path(p)
        return path if path.is_absolute() else base / path

    try:
        scenario = raw.get("scenario", "warm")
        if scenario not in ("warm", "cold"):
            raise ConfigError(f"scenario must be warm or cold, got {scenario!r}")
        domains = [DomainSpec(d["name"], resolve(d["train"]), resolve(d.get("valid")),
                              resolve(d.get("test"))) for d in raw.get("domains", [])]
        if not domains:
            raise ConfigError("config lists no domains")
        solver = raw.get("solver", {})
        solvers = [SolverConfig(**s) for s in solver] if isinstance(solver, list) \
            else [SolverConfig(**solver) for _ in domains]
        if len(solvers) != len(domains):
            raise ConfigError("need one solver config per domain")
        cons = dict(raw.get("consensus", {}))
        cons.setdefault("n_domains", len(domains))
        consensus = ConsensusConfig(**cons)
        ev = EvalConfig(**raw.get("eval", {}))
        out = resolve(raw.get("output_dir", "runs/default"))
        return RunConfig(scenario, domains, solvers, consensus, ev, out,
                         int(raw.get("seed", 0)), int(raw.get("workers", 1)), raw)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config: {e}") from None


def load(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    for key, value in (overrides or {}).items():
        set_dotted(raw, key, value)
    return from_dict(raw, path.parent)
