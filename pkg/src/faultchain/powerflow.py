"""DC power flow, island re-dispatch and the intra-stage overload cascade."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .grid import GridCase, Topology

BALANCE_TOL_MW = 1e-6


class PowerFlowError(RuntimeError):
    """Unbalanced or singular island; indicates a bug upstream."""


class ComponentOutOfService(ValueError):
    pass


@dataclass(frozen=True)
class PowerFlowSolution:
    angles: np.ndarray  # rad, length N; zero on dead islands
    flows: np.ndarray  # MW, length |branches|; zero for out-of-service branches
    served_load: np.ndarray  # MW, length N
    dispatch: np.ndarray  # MW, length N


@dataclass(frozen=True)
class CascadeOutcome:
    failed_set: frozenset[int]
    new_topology: Topology
    new_solution: PowerFlowSolution
    load_loss: float


def _live_ids(topology: Topology) -> np.ndarray:
    return np.array(sorted(topology.in_service_branches), dtype=int)


def island_labels(case: GridCase, topology: Topology) -> np.ndarray:
    """Connected-component label per bus, numbered in order of lowest member bus."""
    parent = list(range(case.n_bus))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    fb, tb = case.from_bus, case.to_bus
    for i in topology.in_service_branches:
        ru, rv = find(fb[i]), find(tb[i])
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
    roots = [find(u) for u in range(case.n_bus)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def rebalance_islands(case: GridCase, topology: Topology, labels: np.ndarray | None = None):
    """Served load and dispatch per bus after independent balancing of every island.

    Islands that can cover their load dispatch it in proportion to ``gen_max``; islands that
    cannot shed load proportionally down to their capacity. Returns ``(served, dispatch)``.
    """
    if labels is None:
        labels = island_labels(case, topology)
    loads, gmax = case.loads, case.gen_max
    n_isl = labels.max() + 1
    isl_load = np.bincount(labels, weights=loads, minlength=n_isl)
    isl_cap = np.bincount(labels, weights=gmax, minlength=n_isl)
    served_total = np.minimum(isl_load, isl_cap)
    with np.errstate(divide="ignore", invalid="ignore"):
        load_frac = np.where(isl_load > 0, served_total / isl_load, 0.0)
        gen_frac = np.where(isl_cap > 0, served_total / isl_cap, 0.0)
    served = loads * load_frac[labels]
    dispatch = gmax * gen_frac[labels]
    return served, dispatch


def solve_dc(
    case: GridCase,
    topology: Topology,
    served_load: np.ndarray,
    dispatch: np.ndarray,
    labels: np.ndarray | None = None,
) -> PowerFlowSolution:
    """Solve ``B' theta = p`` independently on every island.

    The island slack is its lowest-id bus with ``gen_max > 0``; islands without generation
    must carry zero injection and get all-zero angles.
    """
    if labels is None:
        labels = island_labels(case, topology)
    n = case.n_bus
    ids = _live_ids(topology)
    f, t = case.from_bus[ids], case.to_bus[ids]
    b = 1.0 / case.reactance[ids]
    inc = case.incidence[ids]
    lap = (inc.T * b) @ inc
    p = (np.asarray(dispatch) - np.asarray(served_load)) / case.base_mva
    theta = np.zeros(n)
    for isl in range(labels.max() + 1):
        members = np.flatnonzero(labels == isl)
        mismatch = p[members].sum() * case.base_mva
        if abs(mismatch) > BALANCE_TOL_MW:
            raise PowerFlowError(f"island {isl} unbalanced by {mismatch:.3g} MW")
        gens = members[case.gen_max[members] > 0]
        if members.size == 1:
            continue
        if gens.size == 0:
            if np.any(np.abs(p[members]) * case.base_mva > BALANCE_TOL_MW):
                raise PowerFlowError(f"island {isl} has injections but no generation")
            continue
        rest = members[members != gens[0]]
        sub = lap[np.ix_(rest, rest)]
        try:
            theta[rest] = cho_solve(cho_factor(sub, check_finite=False), p[rest], check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular reduced Laplacian on island {isl}") from exc
    flows = np.zeros(case.n_branch)
    flows[ids] = (theta[f] - theta[t]) * b * case.base_mva
    return PowerFlowSolution(theta, flows, np.asarray(served_load, float), np.asarray(dispatch, float))


def solve_topology(case: GridCase, topology: Topology) -> PowerFlowSolution:
    """Rebalance islands and solve; the full state attached to a topology."""
    labels = island_labels(case, topology)
    served, dispatch = rebalance_islands(case, topology, labels)
    return solve_dc(case, topology, served, dispatch, labels)


def total_load(solution: PowerFlowSolution) -> float:
    return float(solution.served_load.sum())


def overloaded(case: GridCase, topology: Topology, solution: PowerFlowSolution) -> frozenset[int]:
    """Branches with ``|flow| > rating`` (strict)."""
    ids = _live_ids(topology)
    if ids.size == 0:
        return frozenset()
    hot = ids[np.abs(solution.flows[ids]) > case.rating[ids]]
    return frozenset(int(i) for i in hot)


def cascade_step(
    case: GridCase,
    topology: Topology,
    removed: int,
    load_before: float | None = None,
) -> CascadeOutcome:
    """Remove one branch and trip overloaded branches until the flows settle.

    All branches over their rating in one iteration trip together. ``load_before`` is the
    served load of ``topology``; it is recomputed when omitted.
    """
    if removed not in topology.in_service_branches:
        raise ComponentOutOfService(f"branch {removed} is not in service")
    if load_before is None:
        load_before = total_load(solve_topology(case, topology))
    failed = {removed}
    topo = topology.without(failed)
    while True:
        sol = solve_topology(case, topo)
        tripped = overloaded(case, topo, sol)
        if not tripped:
            break
        failed |= tripped
        topo = topo.without(tripped)
    loss = load_before - total_load(sol)
    if loss < -1e-9:
        raise PowerFlowError(f"served load increased by {-loss:.3g} MW")
    return CascadeOutcome(frozenset(failed), topo, sol, max(loss, 0.0))
