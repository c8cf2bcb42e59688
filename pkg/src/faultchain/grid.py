"""Grid cases: loading, validation, load scaling and adjacency matrices."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class CaseError(ValueError):
    """Malformed or physically invalid grid case."""


class InfeasibleError(ValueError):
    """Requested load cannot be served by the installed generation."""


@dataclass(frozen=True)
class Bus:
    id: int
    load: float
    gen: float = 0.0
    gen_max: float = 0.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    reactance: float
    rating: float
    kind: str = "line"
    in_service: bool = True


@dataclass(frozen=True)
class Topology:
    """Live part of the grid. Buses never leave service; only branches do."""

    in_service_branches: frozenset[int]
    in_service_buses: frozenset[int]
    n_bus: int

    def without(self, branch_ids) -> Topology:
        return replace(self, in_service_branches=self.in_service_branches - frozenset(branch_ids))


@dataclass(frozen=True, eq=False)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus: int
    base_mva: float = 100.0
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def loads(self) -> np.ndarray:
        return np.array([b.load for b in self.buses], dtype=float)

    @cached_property
    def dispatch(self) -> np.ndarray:
        return np.array([b.gen for b in self.buses], dtype=float)

    @cached_property
    def gen_max(self) -> np.ndarray:
        return np.array([b.gen_max for b in self.buses], dtype=float)

    @cached_property
    def from_bus(self) -> np.ndarray:
        return np.array([br.from_bus for br in self.branches], dtype=int)

    @cached_property
    def to_bus(self) -> np.ndarray:
        return np.array([br.to_bus for br in self.branches], dtype=int)

    @cached_property
    def reactance(self) -> np.ndarray:
        return np.array([br.reactance for br in self.branches], dtype=float)

    @cached_property
    def rating(self) -> np.ndarray:
        return np.array([br.rating for br in self.branches], dtype=float)

    @cached_property
    def incidence(self) -> np.ndarray:
        """Branch-bus incidence matrix, +1 at the from end and -1 at the to end."""
        a = np.zeros((self.n_branch, self.n_bus))
        rows = np.arange(self.n_branch)
        a[rows, self.from_bus] = 1.0
        a[rows, self.to_bus] = -1.0
        return a

    @property
    def total_load(self) -> float:
        return float(self.loads.sum())

    def initial_topology(self) -> Topology:
        return Topology(
            in_service_branches=frozenset(br.id for br in self.branches if br.in_service),
            in_service_buses=frozenset(range(self.n_bus)),
            n_bus=self.n_bus,
        )

    @cached_property
    def max_degree(self) -> int:
        """Largest bus degree of the outage-free topology (parallel branches counted once)."""
        return int(_binary_adjacency(self, self.initial_topology()).sum(axis=1).max())

    def __eq__(self, other):
        if not isinstance(other, GridCase):
            return NotImplemented
        return (self.buses, self.branches, self.slack_bus, self.base_mva) == (
            other.buses, other.branches, other.slack_bus, other.base_mva)

    def __hash__(self):
        return hash((self.buses, self.branches, self.slack_bus, self.base_mva))


def _validate(case: GridCase) -> None:
    n = len(case.buses)
    if n == 0:
        raise CaseError("case has no buses")
    if [b.id for b in case.buses] != list(range(n)):
        raise CaseError("bus ids must be unique and contiguous from 0")
    for b in case.buses:
        if not (b.load >= 0 and b.gen >= 0 and b.gen_max >= 0):
            raise CaseError(f"bus {b.id}: load, gen and gen_max must be nonnegative")
        if b.gen > b.gen_max * (1 + 1e-9) + 1e-9:
            raise CaseError(f"bus {b.id}: dispatch {b.gen} exceeds gen_max {b.gen_max}")
    if [br.id for br in case.branches] != list(range(len(case.branches))):
        raise CaseError("branch ids must be 0..|branches|-1")
    for br in case.branches:
        if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
            raise CaseError(f"branch {br.id}: unknown endpoint")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.id}: self loop")
        if not br.reactance > 0:
            raise CaseError(f"branch {br.id}: reactance must be positive, got {br.reactance}")
        if not br.rating > 0:
            raise CaseError(f"branch {br.id}: rating must be positive, got {br.rating}")
        if br.kind not in ("line", "transformer"):
            raise CaseError(f"branch {br.id}: unknown kind {br.kind!r}")
    if not 0 <= case.slack_bus < n:
        raise CaseError(f"slack bus {case.slack_bus} does not exist")
    if not any(b.gen_max > 0 for b in case.buses):
        raise CaseError("case has no generation capacity")
    live = [br for br in case.branches if br.in_service]
    if n > 1:
        g = coo_matrix(
            (np.ones(len(live)), ([br.from_bus for br in live], [br.to_bus for br in live])),
            shape=(n, n),
        )
        if connected_components(g, directed=False)[0] != 1:
            raise CaseError("in-service branches do not connect all buses")


def _scaled_dispatch(dispatch: np.ndarray, gen_max: np.ndarray, target: float) -> np.ndarray:
    """Return ``min(dispatch * s, gen_max)`` with ``s`` chosen so the total equals ``target``."""
    if gen_max.sum() < target * (1 - 1e-12):
        raise InfeasibleError(f"load {target:.6g} MW exceeds generation capacity {gen_max.sum():.6g} MW")
    base = dispatch if dispatch.sum() > 0 else gen_max
    capped = np.zeros(len(base), dtype=bool)
    for _ in range(len(base) + 1):
        free = base[~capped].sum()
        if free <= 0:
            break
        s = (target - gen_max[capped].sum()) / free
        new_capped = capped | (base * s > gen_max)
        if np.array_equal(new_capped, capped):
            break
        capped = new_capped
    out = np.where(capped, gen_max, base * s)
    return np.minimum(out, gen_max)


def _with_arrays(case: GridCase, loads: np.ndarray, dispatch: np.ndarray) -> GridCase:
    buses = tuple(
        Bus(id=b.id, load=float(loads[b.id]), gen=float(dispatch[b.id]), gen_max=b.gen_max)
        for b in case.buses
    )
    return GridCase(buses, case.branches, case.slack_bus, case.base_mva, name=case.name)


def balance(case: GridCase) -> GridCase:
    """Scale dispatch proportionally (respecting caps) so total generation equals total load."""
    return _with_arrays(case, case.loads, _scaled_dispatch(case.dispatch, case.gen_max, case.total_load))


def scale_load(case: GridCase, factor: float) -> GridCase:
    if not factor > 0:
        raise ValueError(f"load factor must be positive, got {factor}")
    loads = case.loads * factor
    dispatch = _scaled_dispatch(case.dispatch, case.gen_max, float(loads.sum()))
    return _with_arrays(case, loads, dispatch)


# -- adjacency ---------------------------------------------------------------------------------


def _binary_adjacency(case: GridCase, topology: Topology) -> np.ndarray:
    a = np.zeros((case.n_bus, case.n_bus))
    ids = np.fromiter(topology.in_service_branches, dtype=int, count=len(topology.in_service_branches))
    if ids.size:
        f, t = case.from_bus[ids], case.to_bus[ids]
        a[f, t] = 1.0
        a[t, f] = 1.0
    return a


def adjacency(case: GridCase, topology: Topology, d_max: float | None = None) -> np.ndarray:
    """Binary bus adjacency of the live topology, scaled by ``1/d_max``.

    ``d_max`` defaults to the maximum degree of the case's outage-free topology, so the same
    scale applies at every stage of a fault chain.
    """
    d = case.max_degree if d_max is None else d_max
    a = _binary_adjacency(case, topology)
    return a / d if d > 0 else a


# -- file formats ------------------------------------------------------------------------------


def case_from_dict(data: dict, name: str = "case") -> GridCase:
    """Build a case from the native JSON layout and balance its dispatch."""
    try:
        buses = tuple(
            Bus(int(b["id"]), float(b["load_mw"]), float(b.get("gen_mw", 0.0)), float(b.get("gen_max_mw", 0.0)))
            for b in sorted(data["buses"], key=lambda b: b["id"])
        )
        branches = tuple(
            Branch(
                id=int(br["id"]),
                from_bus=int(br["from"]),
                to_bus=int(br["to"]),
                reactance=float(br["x_pu"]),
                rating=float(br["rating_mw"]),
                kind=br.get("kind", "line"),
                in_service=bool(br.get("in_service", True)),
            )
            for br in sorted(data["branches"], key=lambda br: br["id"])
        )
        slack = int(data["slack_bus"])
        base = float(data.get("base_mva", 100.0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseError(f"malformed case data: {exc}") from exc
    # dispatch may exceed caps before balancing; validate the balanced case only
    raw = [Bus(b.id, b.load, min(b.gen, b.gen_max), b.gen_max) for b in buses]
    dispatch = np.array([b.gen for b in buses])
    case = GridCase(tuple(raw), branches, slack, base, name=name)
    gen_max = case.gen_max
    return _with_arrays(case, case.loads, _scaled_dispatch(dispatch, gen_max, case.total_load))


def case_to_dict(case: GridCase) -> dict:
    return {
        "base_mva": case.base_mva,
        "slack_bus": case.slack_bus,
        "buses": [
            {"id": b.id, "load_mw": b.load, "gen_mw": b.gen, "gen_max_mw": b.gen_max} for b in case.buses
        ],
        "branches": [
            {
                "id": br.id,
                "from": br.from_bus,
                "to": br.to_bus,
                "x_pu": br.reactance,
                "rating_mw": br.rating,
                "kind": br.kind,
            }
            for br in case.branches
        ],
    }


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")


def _parse_matrix(body: str) -> np.ndarray:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.split("%", 1)[0].strip()
        if chunk:
            rows.append([float(v) for v in chunk.replace(",", " ").split()])
    if not rows or len({len(r) for r in rows}) != 1:
        raise CaseError("ragged or empty MATPOWER matrix")
    return np.array(rows)


def parse_matpower(text: str, name: str = "case", merge_parallel: bool = False) -> GridCase:
    """Read bus, gen, branch and baseMVA from MATPOWER ``.m`` text.

    Only the columns needed for DC analysis are used. A zero ``rateA`` means unlimited.
    With ``merge_parallel`` each set of parallel branches becomes one equivalent branch.
    """
    text = "\n".join(line.split("%", 1)[0] for line in text.splitlines())
    try:
        mats = {k: _parse_matrix(v) for k, v in _MATRIX_RE.findall(text)}
        bus, gen, branch = mats["bus"], mats["gen"], mats["branch"]
    except KeyError as exc:
        raise CaseError(f"MATPOWER file lacks mpc.{exc.args[0]}") from exc
    except ValueError as exc:
        raise CaseError(f"unparsable MATPOWER matrix: {exc}") from exc
    m = _SCALAR_RE.search(text)
    base_mva = float(m.group(1)) if m else 100.0
    if bus.shape[1] < 3 or gen.shape[1] < 9 or branch.shape[1] < 11:
        raise CaseError("MATPOWER matrices have too few columns")

    index = {int(num): i for i, num in enumerate(bus[:, 0])}
    if len(index) != len(bus):
        raise CaseError("duplicate bus numbers")
    n = len(bus)
    load = np.maximum(bus[:, 2], 0.0)
    pg = np.zeros(n)
    pmax = np.zeros(n)
    for row in gen:
        if row[7] <= 0:
            continue
        i = index[int(row[0])]
        pg[i] += max(row[1], 0.0)
        pmax[i] += max(row[8], 0.0)
    slack_rows = np.flatnonzero(bus[:, 1] == 3)
    if slack_rows.size == 0:
        raise CaseError("no slack (type 3) bus")
    try:
        ends = [(index[int(r[0])], index[int(r[1])]) for r in branch]
    except KeyError as exc:
        raise CaseError(f"branch references unknown bus {exc.args[0]}") from exc

    specs = []
    for (f, t), r in zip(ends, branch):
        rating = r[5] if r[5] > 0 else np.inf
        kind = "transformer" if r[8] != 0 else "line"
        specs.append([f, t, r[3], rating, kind, r[10] > 0])
    if merge_parallel:
        merged: dict = {}
        for f, t, x, rating, kind, live in specs:
            if not live:
                continue
            key = (min(f, t), max(f, t))
            if key in merged:
                m_ = merged[key]
                m_[2] = 1.0 / (1.0 / m_[2] + 1.0 / x) if m_[2] > 0 and x > 0 else 0.0
                m_[3] += rating
            else:
                merged[key] = [f, t, x, rating, kind, True]
        specs = list(merged.values())

    branches = tuple(
        Branch(i, f, t, float(x), float(rating), kind, bool(live))
        for i, (f, t, x, rating, kind, live) in enumerate(specs)
    )
    buses = tuple(Bus(i, float(load[i]), float(min(pg[i], pmax[i])), float(pmax[i])) for i in range(n))
    case = GridCase(buses, branches, int(slack_rows[0]), base_mva, name=name)
    return _with_arrays(case, case.loads, _scaled_dispatch(pg, pmax, case.total_load))


BUILTIN_CASES = ("case39", "case118")


def load_case(path, format: str | None = None, merge_parallel: bool = False) -> GridCase:
    """Load a case from ``path`` (``.m`` or ``.json``) or a built-in name such as ``"case39"``.

    The returned case has its dispatch balanced to the total load.
    """
    if isinstance(path, str) and path in BUILTIN_CASES:
        text = resources.files("faultchain.data").joinpath(f"{path}.m").read_text()
        return parse_matpower(text, name=path, merge_parallel=merge_parallel)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"case file not found: {p}")
    fmt = format or ("matpower-m" if p.suffix == ".m" else "native-json")
    text = p.read_text()
    if fmt == "matpower-m":
        return parse_matpower(text, name=p.stem, merge_parallel=merge_parallel)
    if fmt == "native-json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CaseError(f"invalid JSON in {p}: {exc}") from exc
        return case_from_dict(data, name=p.stem)
    raise ValueError(f"unknown case format {fmt!r}")
