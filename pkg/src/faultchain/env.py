"""Fault-chain environment: one agent-chosen outage per stage, horizon ``P``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .grid import GridCase, Topology, adjacency, scale_load
from .powerflow import PowerFlowSolution, cascade_step, solve_topology, total_load


class InvalidActionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Observation:
    """Live topology plus the ``N x 1`` phase-angle matrix (zero on dead islands)."""

    topology: Topology
    node_state: np.ndarray
    links: np.ndarray  # bool N x N, live bus adjacency
    d_max: float
    mask: np.ndarray  # in-service branches

    @property
    def adjacency(self) -> np.ndarray:
        return self.links / self.d_max


@dataclass
class FaultChain:
    horizon: int
    actions: list[int] = field(default_factory=list)
    failed_sets: list[frozenset[int]] = field(default_factory=list)
    losses_mw: list[float] = field(default_factory=list)

    @property
    def tll(self) -> float:
        return chain_tll(self)

    def append(self, action: int, failed_set, loss: float) -> None:
        self.actions.append(int(action))
        self.failed_sets.append(frozenset(int(i) for i in failed_set))
        self.losses_mw.append(float(loss))

    def to_record(self) -> dict:
        return {
            "actions": list(self.actions),
            "failed_sets": [sorted(s) for s in self.failed_sets],
            "losses_mw": list(self.losses_mw),
            "tll_mw": self.tll,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())

    @classmethod
    def from_record(cls, rec: dict, horizon: int | None = None) -> FaultChain:
        chain = cls(horizon or len(rec["actions"]))
        for a, fs, loss in zip(rec["actions"], rec["failed_sets"], rec["losses_mw"]):
            chain.append(a, fs, loss)
        return chain


def chain_tll(chain: FaultChain) -> float:
    return float(sum(chain.losses_mw))


@dataclass(frozen=True)
class StepResult:
    next_observation: Observation
    reward: float  # MW
    failed_set: frozenset[int]
    end: bool


class FaultChainEnv:
    """Deterministic POMDP over a loaded grid.

    Stage transitions are cached by the set of branches already out, so replays and
    revisits of a prefix cost nothing. The cache never changes results.
    """

    def __init__(self, case: GridCase, load_factor: float = 1.0, horizon: int = 3, cache: bool = True):
        self.base_case = case
        self.load_factor = load_factor
        self.horizon = horizon
        self.case = scale_load(case, load_factor)
        self._topo0 = self.case.initial_topology()
        self._sol0 = solve_topology(self.case, self._topo0)
        self.initial_load = total_load(self._sol0)
        self._obs_cache: dict[frozenset, tuple[Observation, PowerFlowSolution]] = {}
        self._step_cache: dict[tuple[frozenset, int], tuple[frozenset, float]] | None = {} if cache else None
        self.n_actions = self.case.n_branch
        self.reset()

    # -- observations --------------------------------------------------------------------------

    def _out_key(self, topology: Topology) -> frozenset:
        return self._topo0.in_service_branches - topology.in_service_branches

    def _observe(self, topology: Topology, solution: PowerFlowSolution | None = None):
        key = self._out_key(topology)
        hit = self._obs_cache.get(key)
        if hit is not None:
            return hit
        if solution is None:
            solution = solve_topology(self.case, topology)
        mask = np.zeros(self.n_actions, dtype=bool)
        mask[list(topology.in_service_branches)] = True
        obs = Observation(
            topology=topology,
            node_state=solution.angles.reshape(-1, 1).copy(),
            links=adjacency(self.case, topology, d_max=1.0).astype(bool),
            d_max=float(self.case.max_degree),
            mask=mask,
        )
        if self._step_cache is not None:
            self._obs_cache[key] = (obs, solution)
        return obs, solution

    # -- episode lifecycle ---------------------------------------------------------------------

    def reset(self) -> Observation:
        self.stage = 0
        self.chain = FaultChain(self.horizon)
        self.done = False
        self.observation, self.solution = self._observe(self._topo0, self._sol0)
        return self.observation

    @property
    def flows(self) -> np.ndarray:
        """Branch flows (MW) of the current observation."""
        return self.solution.flows

    @property
    def prefix(self) -> tuple[int, ...]:
        return tuple(self.chain.actions)

    @property
    def load(self) -> float:
        return total_load(self.solution)

    def action_mask(self, exclude=()) -> np.ndarray:
        """In-service branches, minus any ids in ``exclude`` (pruned by an availability tree)."""
        mask = self.observation.mask.copy()
        if exclude:
            mask[list(exclude)] = False
        return mask

    def step(self, action: int) -> StepResult:
        if self.done:
            raise InvalidActionError("episode has ended; call reset()")
        action = int(action)
        if not (0 <= action < self.n_actions and self.observation.mask[action]):
            raise InvalidActionError(f"branch {action} is not an available action")
        topo = self.observation.topology
        key = (self._out_key(topo), action)
        cached = self._step_cache.get(key) if self._step_cache is not None else None
        if cached is None:
            out = cascade_step(self.case, topo, action, load_before=self.load)
            failed, loss = out.failed_set, out.load_loss
            next_obs, next_sol = self._observe(out.new_topology, out.new_solution)
            if self._step_cache is not None:
                self._step_cache[key] = (failed, loss)
        else:
            failed, loss = cached
            next_obs, next_sol = self._observe(topo.without(failed))
        self.chain.append(action, failed, loss)
        self.stage += 1
        self.observation, self.solution = next_obs, next_sol
        self.done = self.stage >= self.horizon or not next_obs.mask.any()
        return StepResult(next_obs, loss, failed, self.done)

    def replay(self, actions) -> FaultChain:
        """Run ``actions`` from a fresh reset and return the resulting chain."""
        self.reset()
        for a in actions:
            self.step(a)
        return self.chain
