import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faultchain.env import FaultChain, FaultChainEnv, InvalidActionError, chain_tll
from faultchain.grid import InfeasibleError, load_case
from faultchain.powerflow import solve_topology, total_load
from helpers import make_case, random_mesh_case


def test_reset_ieee39():
    env = FaultChainEnv(load_case("case39"), 0.55, horizon=3)
    obs = env.reset()
    assert obs.mask.all() and obs.mask.shape == (46,)
    assert obs.node_state.shape == (39, 1)
    assert env.initial_load == pytest.approx(0.55 * load_case("case39").total_load)


def test_reset_infeasible_load():
    case = make_case([0, 50], [60, 0], [(0, 1, 0.1, 99)])
    with pytest.raises(InfeasibleError):
        FaultChainEnv(case, 1.5)


def test_reset_base_angles(toy):
    env = FaultChainEnv(toy, 1.0)
    np.testing.assert_array_equal(env.reset().node_state[:, 0], solve_topology(toy, toy.initial_topology()).angles)


def test_mask_tracks_failed_sets(toy):
    env = FaultChainEnv(toy, 1.0, horizon=3)
    env.reset()
    res = env.step(0)  # trips 0 and 1 together
    assert res.failed_set == {0, 1}
    mask = env.action_mask()
    assert not mask[0] and not mask[1] and mask[2:].all()
    assert not env.action_mask(exclude={4})[4]
    with pytest.raises(InvalidActionError):
        env.step(1)


def test_islanding_reward_and_horizon():
    # bus 2 carries 12 MW and hangs on a single branch
    case = make_case([0, 30, 12], [60, 0, 0], [(0, 1, 0.1, 99), (0, 1, 0.1, 99), (1, 2, 0.1, 99)])
    env = FaultChainEnv(case, 1.0, horizon=2)
    env.reset()
    r1 = env.step(2)
    assert r1.reward == pytest.approx(12.0) and not r1.end
    r2 = env.step(0)
    assert r2.reward == 0.0 and r2.end
    assert env.chain.tll == pytest.approx(12.0)
    with pytest.raises(InvalidActionError):
        env.step(1)


def test_end_when_no_branch_left():
    case = make_case([0, 30], [60, 0], [(0, 1, 0.1, 99)])
    env = FaultChainEnv(case, 1.0, horizon=3)
    env.reset()
    res = env.step(0)
    assert res.end and res.reward == pytest.approx(30.0)


def test_dead_bus_state_is_zero():
    case = make_case([0, 30, 12], [60, 0, 0], [(0, 1, 0.1, 99), (1, 2, 0.1, 99)])
    env = FaultChainEnv(case, 1.0)
    env.reset()
    obs = env.step(0).next_observation
    assert obs.node_state.shape == (3, 1)
    assert not obs.node_state.any()


def test_chain_tll_examples():
    chain = FaultChain(3)
    for a, loss in zip([1, 2, 3], [5.0, 0.0, 12.0]):
        chain.append(a, {a}, loss)
    assert chain_tll(chain) == 17.0
    assert chain_tll(FaultChain(3, [1, 2, 3], [{1}, {2}, {3}], [0.0, 0.0, 0.0])) == 0.0


def test_chain_record_round_trip():
    chain = FaultChain(2)
    chain.append(4, {4, 1}, 3.5)
    chain.append(0, {0}, 0.0)
    rec = json.loads(chain.to_json())
    assert rec == {"actions": [4, 0], "failed_sets": [[1, 4], [0]], "losses_mw": [3.5, 0.0], "tll_mw": 3.5}
    assert FaultChain.from_record(rec).failed_sets == chain.failed_sets


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.lists(st.integers(0, 10**6), min_size=3, max_size=3))
def test_replay_and_telescoping(seed, picks):
    rng = np.random.default_rng(seed)
    case = random_mesh_case(rng)
    env = FaultChainEnv(case, 1.0, horizon=3)
    env.reset()
    for p in picks:
        if env.done:
            break
        avail = np.flatnonzero(env.action_mask())
        res = env.step(int(avail[p % len(avail)]))
        assert res.reward >= 0
    chain = env.chain
    failed = set().union(*chain.failed_sets)
    assert sum(len(s) for s in chain.failed_sets) == len(failed)  # pairwise disjoint
    assert all(a in s for a, s in zip(chain.actions, chain.failed_sets))
    final = total_load(solve_topology(env.case, env.case.initial_topology().without(failed)))
    assert chain.tll == pytest.approx(env.initial_load - final, abs=1e-9)
    # undiscounted return equals TLL; replay on a cold environment reproduces the chain
    assert sum(chain.losses_mw) == chain.tll
    cold = FaultChainEnv(case, 1.0, horizon=3, cache=False).replay(chain.actions)
    assert cold.failed_sets == chain.failed_sets and cold.losses_mw == chain.losses_mw
