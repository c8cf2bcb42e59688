"""One test per acceptance criterion; each prints a single PASS/FAIL line with its numbers."""

import json
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from faultchain.agent import Batch, SearchConfig, compute_targets, offline_fill, run_search, update_epsilon
from faultchain.baselines import pfw_rl_run
from faultchain.cli import main
from faultchain.env import FaultChainEnv
from faultchain.grid import load_case
from faultchain.grnn import GrqnParams, graph_filter
from faultchain.oracle import RegretSeries, enumerate_chains, regret_series
from faultchain.powerflow import solve_dc, solve_topology, total_load
from helpers import make_case, random_mesh_case, random_tree_case, toy_case
from test_agent import counts_with
from test_powerflow import leaf_stripping_flows

SEEDS = range(5)
S_IEEE39 = 1200
LOAD_IEEE39 = 0.55


def report(label, ok, detail):
    print(f"{label} {'PASS' if ok else 'FAIL'}: {detail}")
    return ok


@pytest.mark.criterion("AC1", "DC power flow matches hand solutions and the tree oracle")
def test_ac1_dc_power_flow():
    t0 = time.perf_counter()
    two = make_case([0, 50], [100, 0], [(0, 1, 0.1, 100)])
    sol2 = solve_dc(two, two.initial_topology(), np.array([0.0, 50.0]), np.array([50.0, 0.0]))
    # 50 MW = 0.5 pu over x = 0.1 gives a 0.05 rad drop
    err_f = abs(sol2.flows[0] - 50.0)
    err_a = np.abs(sol2.angles - [0.0, -0.05]).max()
    three = make_case([0, 60, 90], [300, 0, 0], [(0, 1, 0.1, 999), (0, 2, 0.2, 999), (1, 2, 0.1, 999)])
    sol3 = solve_dc(three, three.initial_topology(), np.array([0.0, 60.0, 90.0]), np.array([150.0, 0.0, 0.0]))
    # B = [[20, -10], [-10, 15]], P = [-0.6, -0.9]: theta = [-0.09, -0.12], flows 90 / 60 / 30
    err_f = max(err_f, np.abs(sol3.flows - [90.0, 60.0, 30.0]).max())
    err_a = max(err_a, np.abs(sol3.angles - [0.0, -0.09, -0.12]).max())
    rng = np.random.default_rng(2024)
    err_tree = 0.0
    for _ in range(10):
        case, _ = random_tree_case(rng, int(rng.integers(2, 21)))
        sol = solve_dc(case, case.initial_topology(), case.loads, case.dispatch)
        err_tree = max(err_tree, np.abs(sol.flows - leaf_stripping_flows(case, case.loads, case.dispatch)).max())
    secs = time.perf_counter() - t0
    ok = err_f <= 1e-9 and err_a <= 1e-12 and err_tree <= 1e-9 and secs < 1.0
    report("AC1", ok, f"flow err {err_f:.2e} MW, angle err {err_a:.2e} rad, tree err {err_tree:.2e} MW, {secs:.3f} s")
    assert ok


@pytest.mark.criterion("AC2", "stage losses telescope to the total load change")
def test_ac2_telescoping():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    case = random_mesh_case(rng, n=10)
    env = FaultChainEnv(case, 1.0, horizon=3)
    worst = 0.0
    for _ in range(100):
        env.reset()
        while not env.done:
            env.step(int(rng.choice(np.flatnonzero(env.action_mask()))))
        chain = env.chain
        out = set().union(*chain.failed_sets)
        final = total_load(solve_topology(case, case.initial_topology().without(out)))
        worst = max(worst, abs(sum(chain.losses_mw) - (env.initial_load - final)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 5.0
    report("AC2", ok, f"max telescoping error {worst:.2e} MW over 100 chains, {secs:.2f} s")
    assert ok


def _ac3_problem():
    rng = np.random.default_rng(3)
    case = random_mesh_case(rng, n=6, extra=3)
    env = FaultChainEnv(case, 1.0, horizon=3)
    cfg = SearchConfig(explore=4, horizon=3)
    episodes = offline_fill(env, cfg).episodes
    batch = Batch.from_episodes(episodes, 3)
    kw = dict(hidden=4, out_features=4, hops=3, head_width=8)
    params = GrqnParams.initialize(rng, case.n_bus, case.n_branch, **kw)
    target = GrqnParams.initialize(rng, case.n_bus, case.n_branch, **kw)
    targets = compute_targets(batch, target, 0.99)
    return batch, params, targets


@pytest.mark.criterion("AC3", "full loss gradient matches central finite differences")
def test_ac3_gradient_fidelity():
    from faultchain.agent import td_loss_and_grads
    t0 = time.perf_counter()
    batch, params, targets = _ac3_problem()
    # three stages, so four observations O_0..O_3, on six buses
    assert batch.adjacency.shape[1:] == (4, 6, 6) and batch.valid.all(axis=1).any()
    _, grads = td_loss_and_grads(batch, params, targets)
    h = 1e-5
    worst = {}
    for name in params.names:
        arr, g = getattr(params, name), getattr(grads, name)
        rel = 0.0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = td_loss_and_grads(batch, params, targets)[0]
            arr[idx] = old - h
            down = td_loss_and_grads(batch, params, targets)[0]
            arr[idx] = old
            num = (up - down) / (2 * h)
            rel = max(rel, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-8))
        worst[name] = rel
    secs = time.perf_counter() - t0
    top = max(worst.values())
    ok = top < 1e-4 and secs < 30.0
    report("AC3", ok, f"max relative error {top:.2e} ({max(worst, key=worst.get)}) over "
                      f"{len(worst)} tensors, {secs:.1f} s")
    assert ok


@pytest.mark.criterion("AC4", "graph filter equals the dense power oracle")
def test_ac4_filter_oracle():
    rng = np.random.default_rng(4)
    worst, exact = 0.0, True
    for _ in range(10):
        n = int(rng.integers(3, 12))
        a = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
        b = (a + a.T) / max((a + a.T).sum(axis=1).max(), 1.0)
        x = rng.normal(size=(n, 3))
        for k in (1, 2, 3):
            c = rng.normal(size=(k, 3, 2))
            dense = sum(np.linalg.matrix_power(b, j) @ x @ c[j] for j in range(k))
            worst = max(worst, np.abs(graph_filter(b, x, c) - dense).max())
            if k == 1:
                other = rng.normal(size=(n, n))
                exact &= np.array_equal(graph_filter(b, x, c), x @ c[0])
                exact &= np.array_equal(graph_filter(other, x, c), graph_filter(b, x, c))
    ok = worst <= 1e-12 and exact
    report("AC4", ok, f"max deviation {worst:.2e}, K=1 topology independent and exact: {exact}")
    assert ok


def recursive_count(env, prefix=()):
    """Leaves of the chain tree, found by stepping a fresh environment along each prefix."""
    env.reset()
    for a in prefix:
        env.step(a)
    if env.done:
        return 1
    return sum(recursive_count(env, prefix + (int(a),)) for a in np.flatnonzero(env.action_mask()))


@pytest.mark.criterion("AC5", "enumeration is complete and every chain replays")
def test_ac5_enumeration_completeness():
    t0 = time.perf_counter()
    case = toy_case()
    assert case.n_branch <= 8
    catalog = enumerate_chains(case, 1.0, 2)
    counted = recursive_count(FaultChainEnv(case, 1.0, horizon=2, cache=False))
    env = FaultChainEnv(case, 1.0, horizon=2, cache=False)
    worst = max(abs(env.replay(e.actions).tll - e.tll) for e in catalog)
    secs = time.perf_counter() - t0
    ok = len(catalog) == counted and worst <= 1e-9 and secs < 5.0
    report("AC5", ok, f"catalog {len(catalog)} chains, recursive count {counted}, "
                      f"replay error {worst:.2e} MW, {secs:.2f} s")
    assert ok


@pytest.mark.criterion("AC6", "searching as many chains as exist leaves zero regret")
def test_ac6_exact_search():
    t0 = time.perf_counter()
    case = toy_case()
    catalog = enumerate_chains(case, 1.0, 2)
    cfg = SearchConfig(iterations=len(catalog), horizon=2, explore=8, batch=4, hidden=4, out_features=4,
                       hops=2, head_width=8)
    res = run_search(case, cfg)
    final = regret_series(catalog, res.chains, len(catalog)).final
    secs = time.perf_counter() - t0
    ok = abs(final) <= 1e-6 and len(res.chains) == len(catalog) and secs < 60.0
    report("AC6", ok, f"S = {len(catalog)}, found {len(res.chains)}, Regret(S) = {final:.2e} MW, {secs:.1f} s")
    assert ok


@pytest.fixture(scope="session")
def ieee39_runs(ieee39_catalog):
    case = load_case("case39")
    runs = {"pfw_rl": [], "grqn_k3": [], "grqn_k1": []}
    t0 = time.perf_counter()
    for seed in SEEDS:
        base = dict(iterations=S_IEEE39, load_factor=LOAD_IEEE39, horizon=3, seed=seed)
        for key, run in [("pfw_rl", lambda: pfw_rl_run(case, SearchConfig(**base))),
                         ("grqn_k3", lambda: run_search(case, SearchConfig(**base, kappa=3))),
                         ("grqn_k1", lambda: run_search(case, SearchConfig(**base, kappa=1)))]:
            res = run()
            rs = regret_series(ieee39_catalog, res.chains, S_IEEE39)
            runs[key].append((seed, res.accumulated_tll, rs.final))
    runs["seconds"] = time.perf_counter() - t0
    return runs


def _seed_table(runs, key):
    return ", ".join(f"s{seed}: {tll:.0f}/{reg:.0f}" for seed, tll, reg in runs[key])


def _median(runs, key, col):
    return statistics.median(r[col] for r in runs[key])


@pytest.mark.slow
@pytest.mark.criterion("AC7", "graph recurrent search beats the tabular baseline on IEEE-39")
def test_ac7_directional_performance(ieee39_runs):
    tll_g, tll_b = _median(ieee39_runs, "grqn_k3", 1), _median(ieee39_runs, "pfw_rl", 1)
    reg_g, reg_b = _median(ieee39_runs, "grqn_k3", 2), _median(ieee39_runs, "pfw_rl", 2)
    for key in ("pfw_rl", "grqn_k3"):
        print(f"  {key} TLL/regret MW: {_seed_table(ieee39_runs, key)}")
    ok = tll_g >= 1.2 * tll_b and reg_g < reg_b
    report("AC7", ok, f"median TLL {tll_g:.0f} vs {tll_b:.0f} MW (ratio {tll_g / tll_b:.2f}, need 1.2), "
                      f"median regret {reg_g:.0f} vs {reg_b:.0f} MW; all runs {ieee39_runs['seconds']:.0f} s")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion("AC8", "three updates per action give no more regret than one")
def test_ac8_kappa_ordering(ieee39_runs):
    reg3, reg1 = _median(ieee39_runs, "grqn_k3", 2), _median(ieee39_runs, "grqn_k1", 2)
    for key in ("grqn_k3", "grqn_k1"):
        print(f"  {key} TLL/regret MW: {_seed_table(ieee39_runs, key)}")
    ok = reg3 <= reg1
    report("AC8", ok, f"median regret kappa=3 {reg3:.0f} MW vs kappa=1 {reg1:.0f} MW")
    assert ok


@pytest.mark.criterion("AC9", "epsilon starts at 1, never grows with counts and is floored")
def test_ac9_epsilon_schedule():
    rng = np.random.default_rng(9)
    starts, monotone, floored = True, True, True
    for _ in range(200):
        n = int(rng.integers(1, 12))
        flows = rng.uniform(-100, 100, n)
        starts &= update_epsilon(flows, counts_with(n, (), [0] * n), 0.01) == 1.0
        counts = [0] * n
        prev = 1.0
        for _ in range(30):
            counts[int(rng.integers(n))] += int(rng.integers(1, 50))
            eps = update_epsilon(flows, counts_with(n, (), counts), 0.01)
            monotone &= eps <= prev + 1e-15
            floored &= eps >= 0.01
            prev = eps
    floored &= update_epsilon(np.ones(3), counts_with(3, (), [10**6] * 3), 0.01) == 0.01
    ok = starts and monotone and floored and SearchConfig().eps0 == 0.01
    report("AC9", ok, f"starts at 1: {starts}, nonincreasing: {monotone}, floored at 0.01: {floored}")
    assert ok


def _artifacts(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.suffix in (".csv", ".jsonl")}


@pytest.mark.criterion("AC10", "repeated runs write byte-identical CSV and JSONL files")
def test_ac10_determinism(tmp_path, toy_case_file, capsys):
    fast = ["--case", str(toy_case_file), "--horizon", "2", "--iterations", "12", "--explore", "4",
            "--batch", "2", "--hidden", "3", "--out-features", "2", "--hops", "2", "--head-width", "4",
            "--seed", "5"]
    commands = {
        "enumerate": ["enumerate", "--case", str(toy_case_file), "--horizon", "2", "--top", "5"],
        "train": ["train", *fast],
        "train_mc": ["train", *fast, "--mc-repeats", "2"],
        "pfw_rl": ["baseline", *fast],
        "pfw_rl_te": ["baseline", "--which", "pfw_rl_te", "--pretrain-load", "0.9",
                      "--pretrain-iterations", "10", *fast],
    }
    same, files = True, 0
    for name, argv in commands.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / rep / name
            assert main([*argv, "--out", str(out)]) == 0
            outs.append(_artifacts(out))
        same &= outs[0] == outs[1]
        files += len(outs[0])
    reports = []
    for rep in ("a", "b"):
        out = tmp_path / rep / "report"
        assert main(["report", str(tmp_path / "a" / "train"), str(tmp_path / "a" / "pfw_rl"), "--out", str(out)]) == 0
        reports.append(_artifacts(out))
    same &= reports[0] == reports[1] and len(reports[0]) == 2
    files += len(reports[0])
    capsys.readouterr()
    ok = same and files > 0
    report("AC10", ok, f"{len(commands) + 1} subcommand runs repeated, {files} CSV/JSONL files compared")
    assert ok


@pytest.mark.slow
@pytest.mark.criterion("AC11", "budget mode stops on time and reports consistent totals")
def test_ac11_budget_mode(tmp_path, ieee39_catalog, capsys):
    budget = 300.0
    cat_path = tmp_path / "catalog.jsonl"
    ieee39_catalog.write_jsonl(cat_path)
    out = tmp_path / "budget"
    code = main(["train", "--case", "case39", "--load-scale", str(LOAD_IEEE39), "--iterations", "1000000",
                 "--budget-seconds", str(budget), "--catalog", str(cat_path), "--out", str(out)])
    capsys.readouterr()
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    timing = json.loads((out / "timing.json").read_text())
    chains = [json.loads(line) for line in (out / "chains.jsonl").read_text().splitlines()]
    series = RegretSeries.read_csv(out / "regret.csv")
    longest = max(timing["episode_ms"]) / 1000.0
    on_time = rep["stopped_by_budget"] and rep["search_seconds"] <= budget + longest
    tll = sum(c["tll_mw"] for c in chains)
    consistent = (rep["discovered"] == len(chains) == len(series["iteration"]) == rep["regret_s"]
                  and abs(rep["accumulated_tll_mw"] - tll) <= 1e-6
                  and abs(series["accum_tll_mw"][-1] - tll) <= 1e-6
                  and abs(rep["regret_mw"] - (rep["top_s_total_mw"] - tll)) <= 1e-6
                  and abs(series["regret_mw"][-1] - rep["regret_mw"]) <= 1e-6
                  and len({tuple(c["actions"]) for c in chains}) == len(chains))
    ok = on_time and consistent
    report("AC11", ok, f"search {rep['search_seconds']:.1f} s (budget {budget:.0f} s + longest episode "
                       f"{longest:.2f} s), S = {rep['discovered']}, TLL {tll:.0f} MW, "
                       f"regret {rep['regret_mw']:.0f} MW, consistent: {consistent}")
    assert ok
