"""Exhaustive fault-chain enumeration, exact top-S and regret curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .env import FaultChain
from .grid import GridCase, scale_load
from .powerflow import cascade_step, solve_topology, total_load

LARGE_ENUMERATION = 2_000_000
REPLAY_TOL_MW = 1e-6


class UnreplayableChain(ValueError):
    pass


class EnumerationTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class CatalogEntry:
    actions: tuple[int, ...]
    tll: float
    failed_sets: tuple[frozenset[int], ...]
    losses_mw: tuple[float, ...]

    def to_chain(self, horizon: int | None = None) -> FaultChain:
        chain = FaultChain(horizon or len(self.actions))
        for a, fs, loss in zip(self.actions, self.failed_sets, self.losses_mw):
            chain.append(a, fs, loss)
        return chain

    def to_record(self) -> dict:
        return self.to_chain().to_record()


class ChainCatalog:
    """Every reachable chain, sorted by TLL descending then action sequence ascending."""

    def __init__(self, entries, horizon: int, load_factor: float = 1.0, case_name: str = ""):
        self.entries: list[CatalogEntry] = sorted(entries, key=lambda e: (-e.tll, e.actions))
        self.horizon = horizon
        self.load_factor = load_factor
        self.case_name = case_name
        self._index = {e.actions: e for e in self.entries}
        if len(self._index) != len(self.entries):
            raise ValueError("duplicate action sequences in catalog")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def lookup(self, actions) -> CatalogEntry | None:
        return self._index.get(tuple(int(a) for a in actions))

    @property
    def tlls(self) -> np.ndarray:
        return np.array([e.tll for e in self.entries])

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_record()) + "\n")

    @classmethod
    def read_jsonl(cls, path, horizon: int | None = None) -> ChainCatalog:
        entries = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    entries.append(CatalogEntry(
                        tuple(rec["actions"]), float(sum(rec["losses_mw"])),
                        tuple(frozenset(s) for s in rec["failed_sets"]), tuple(rec["losses_mw"]),
                    ))
        if not entries:
            raise ValueError(f"catalog {path} is empty")
        return cls(entries, horizon or max(len(e.actions) for e in entries))


def estimate_leaves(n_branch: int, horizon: int) -> int:
    return math.perm(n_branch, min(horizon, n_branch))


def enumerate_chains(case: GridCase, load_factor: float = 1.0, horizon: int = 3,
                     progress=None, allow_large: bool = False) -> ChainCatalog:
    """Depth-first over the agent's choice at every stage, to depth ``horizon``.

    Cascade outcomes are memoised by (set of branches already out, chosen branch). A chain
    ends early only if no branch is left in service.
    """
    if not allow_large and estimate_leaves(case.n_branch, horizon) > LARGE_ENUMERATION:
        raise EnumerationTooLarge(
            f"about {estimate_leaves(case.n_branch, horizon)} chains; pass allow_large to proceed"
        )
    scaled = scale_load(case, load_factor)
    topo0 = scaled.initial_topology()
    all_ids = topo0.in_service_branches
    loads: dict[frozenset, float] = {frozenset(): total_load(solve_topology(scaled, topo0))}
    steps: dict[tuple[frozenset, int], tuple[frozenset, float]] = {}
    entries: list[CatalogEntry] = []

    def step(out: frozenset, action: int):
        key = (out, action)
        hit = steps.get(key)
        if hit is None:
            res = cascade_step(scaled, topo0.without(out), action, load_before=loads[out])
            new_out = out | res.failed_set
            loads.setdefault(new_out, total_load(res.new_solution))
            hit = steps[key] = (res.failed_set, res.load_loss)
        return hit

    def dfs(out, actions, failed, losses):
        avail = sorted(all_ids - out)
        if len(actions) == horizon or not avail:
            entries.append(CatalogEntry(tuple(actions), float(sum(losses)), tuple(failed), tuple(losses)))
            return
        for a in avail:
            fs, loss = step(out, a)
            dfs(out | fs, actions + [a], failed + [fs], losses + [loss])
            if not actions and progress is not None:
                progress(a, len(entries))

    dfs(frozenset(), [], [], [])
    return ChainCatalog(entries, horizon, load_factor, case.name)


@dataclass(frozen=True)
class TopS:
    tlls: list[float]
    pad: int  # how many of the requested S the catalog could not supply

    @property
    def total(self) -> float:
        return float(sum(self.tlls))


def top_s(catalog: ChainCatalog, s: int) -> TopS:
    if len(catalog) == 0:
        raise ValueError("empty catalog")
    tlls = [e.tll for e in catalog.entries[:s]]
    return TopS(tlls, max(0, s - len(catalog)))


def count_risky(catalog: ChainCatalog, threshold_mw: float) -> int:
    return int(np.count_nonzero(catalog.tlls >= threshold_mw))


@dataclass
class RegretSeries:
    chain_tll: list[float]
    accumulated: list[float]
    regret: list[float]
    best_total: float
    s: int

    @property
    def final(self) -> float:
        return self.regret[-1] if self.regret else self.best_total

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "chain_tll_mw", "accum_tll_mw", "regret_mw"])
            for i, row in enumerate(zip(self.chain_tll, self.accumulated, self.regret), 1):
                w.writerow([i, *(repr(float(v)) for v in row)])

    @staticmethod
    def read_csv(path) -> dict[str, np.ndarray]:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return {k: np.array([float(r[k]) for r in rows]) for k in
                ("iteration", "chain_tll_mw", "accum_tll_mw", "regret_mw")}


def regret_series(catalog: ChainCatalog, discovered, s: int) -> RegretSeries:
    """``Regret(i) = sum of the s best TLLs - sum of TLLs of the first i discovered chains``.

    Each discovered chain must exist in the catalog with a matching TLL. A repeated action
    sequence contributes nothing after its first appearance.
    """
    best = top_s(catalog, s).total
    seen: set[tuple] = set()
    chain_tll, acc, reg = [], [], []
    running = 0.0
    for chain in discovered:
        actions = tuple(int(a) for a in chain.actions)
        entry = catalog.lookup(actions)
        if entry is None:
            raise UnreplayableChain(f"chain {list(actions)} is not in the catalog")
        if abs(entry.tll - chain.tll) > REPLAY_TOL_MW:
            raise UnreplayableChain(f"chain {list(actions)} has TLL {chain.tll} but replays to {entry.tll}")
        tll = 0.0 if actions in seen else float(chain.tll)
        seen.add(actions)
        running += tll
        chain_tll.append(tll)
        acc.append(running)
        reg.append(best - running)
    return RegretSeries(chain_tll, acc, reg, best, s)
