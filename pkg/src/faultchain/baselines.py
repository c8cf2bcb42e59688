"""Tabular Q-learning baselines (power-flow weighted exploration, optional table transfer)."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .agent import Learner, SearchConfig, SearchResult, TransitionTuple, search_loop
from .env import FaultChainEnv
from .grid import GridCase

TABLE_FORMAT = "tabular-q"


def prefix_key(prefix) -> str:
    return "-".join(str(int(a)) for a in prefix)


def parse_prefix_key(key: str) -> tuple[int, ...]:
    return tuple(int(a) for a in key.split("-")) if key else ()


class TabularQ:
    """Q-values keyed by the ordered tuple of branches removed so far; unseen entries read 0."""

    def __init__(self, n_actions: int, values: dict | None = None):
        self.n_actions = n_actions
        self.values: dict[tuple, np.ndarray] = {}
        for k, v in (values or {}).items():
            v = np.asarray(v, dtype=float)
            if v.shape != (n_actions,) or not np.all(np.isfinite(v)):
                raise ValueError(f"bad Q row for prefix {k!r}")
            self.values[tuple(k)] = v.copy()

    def __len__(self):
        return len(self.values)

    def row(self, prefix) -> np.ndarray:
        v = self.values.get(tuple(prefix))
        return v.copy() if v is not None else np.zeros(self.n_actions)

    def get(self, prefix, action: int) -> float:
        return float(self.row(prefix)[action])

    def update(self, prefix, action: int, target: float, lr: float) -> None:
        key = tuple(prefix)
        if key not in self.values:
            self.values[key] = np.zeros(self.n_actions)
        self.values[key][action] += lr * (target - self.values[key][action])

    def copy(self) -> TabularQ:
        return TabularQ(self.n_actions, self.values)

    def to_dict(self) -> dict:
        rows = {prefix_key(k): self.values[k].tolist() for k in sorted(self.values)}
        return {"format": TABLE_FORMAT, "version": 1, "n_actions": self.n_actions, "table": rows}

    @classmethod
    def from_dict(cls, data: dict) -> TabularQ:
        if data.get("format") != TABLE_FORMAT:
            raise ValueError("not a tabular Q checkpoint")
        return cls(int(data["n_actions"]), {parse_prefix_key(k): v for k, v in data["table"].items()})


@dataclass
class PretrainedTable:
    table: TabularQ
    load_factor: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {**self.table.to_dict(), "load_factor": self.load_factor, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, data: dict) -> PretrainedTable:
        return cls(TabularQ.from_dict(data), float(data["load_factor"]), int(data.get("iterations", 0)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> PretrainedTable:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class TabularLearner(Learner):
    """One-step Q-learning: ``Q(s,a) += lr (r + gamma (1-end) max_a' Q(s',a') - Q(s,a))``."""

    def __init__(self, table: TabularQ, config: SearchConfig):
        self.table = table
        self.config = config

    def q_values(self, obs, prefix):
        return self.table.row(prefix)

    def learn(self, transition: TransitionTuple, prefix):
        nxt_prefix = tuple(prefix) + (transition.action,)
        mask = transition.next_obs.mask
        best = 0.0
        if not transition.end and mask.any():
            best = float(self.table.row(nxt_prefix)[mask].max())
        target = transition.reward + self.config.gamma * best
        self.table.update(prefix, transition.action, target, self.config.alpha_tab)
        return []


def _run(case, config: SearchConfig, table: TabularQ | None, progress=None) -> SearchResult:
    env = case if isinstance(case, FaultChainEnv) else FaultChainEnv(case, config.load_factor, config.horizon)
    rng = np.random.default_rng(config.seed)
    learner = TabularLearner(table if table is not None else TabularQ(env.n_actions), config)
    return search_loop(env, learner, config, rng, progress)


def pfw_rl_run(case: GridCase, config: SearchConfig, progress=None) -> SearchResult:
    """Power-flow weighted exploration with a tabular Q-function learned from scratch."""
    return _run(case, config, None, progress)


def te_pretrain(case: GridCase, pretrain_factor: float, iterations: int,
                config: SearchConfig | None = None) -> PretrainedTable:
    """Train a table offline at ``pretrain_factor`` for ``iterations`` chains."""
    config = config or SearchConfig()
    env = FaultChainEnv(case, pretrain_factor, config.horizon)
    if iterations == 0:
        return PretrainedTable(TabularQ(env.n_actions), pretrain_factor, 0)
    cfg = replace(config, iterations=iterations, load_factor=pretrain_factor, budget_seconds=None)
    result = _run(env, cfg, None)
    return PretrainedTable(result.learner.table, pretrain_factor, iterations)


def pfw_rl_te_run(case: GridCase, config: SearchConfig, pretrained: PretrainedTable,
                  progress=None) -> SearchResult:
    """As :func:`pfw_rl_run`, starting from a copy of a table trained at another load."""
    return _run(case, config, pretrained.table.copy(), progress)


# load factors used for table transfer on the bundled cases: (pretrain, evaluate)
TE_DEFAULTS = {"case39": (0.6, 0.55), "case118": (1.0, 0.6)}
TE_PRETRAIN_ITERATIONS = 5000
