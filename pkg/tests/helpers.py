"""Small hand-built grids shared by the tests."""

import numpy as np

from faultchain.grid import Branch, Bus, GridCase, balance


def make_case(loads, gen_max, edges, gen=None, slack=0, base_mva=100.0, name="toy"):
    """``edges`` are ``(from, to, x_pu, rating_mw)`` tuples; dispatch is balanced on build."""
    gen = gen if gen is not None else gen_max
    buses = tuple(Bus(i, float(l), float(min(g, m)), float(m)) for i, (l, g, m) in enumerate(zip(loads, gen, gen_max)))
    branches = tuple(Branch(i, f, t, float(x), float(r)) for i, (f, t, x, r) in enumerate(edges))
    return balance(GridCase(buses, branches, slack, base_mva, name=name))


def toy_case():
    """Five buses, seven branches; some outages island load, some trigger overload trips."""
    return make_case(
        loads=[0, 40, 50, 20, 30],
        gen_max=[200, 0, 0, 60, 0],
        edges=[
            (0, 1, 0.1, 80), (0, 2, 0.1, 80), (1, 2, 0.2, 40), (1, 3, 0.1, 50),
            (2, 3, 0.1, 50), (3, 4, 0.1, 100), (2, 4, 0.2, 35),
        ],
    )


def random_tree_case(rng, n):
    parent = [int(rng.integers(0, i)) for i in range(1, n)]
    loads = rng.uniform(0, 50, n)
    gen_max = np.where(rng.random(n) < 0.3, rng.uniform(10, 100, n), 0.0)
    gen_max[0] = loads.sum() + 100
    edges = []
    for c, p in zip(range(1, n), parent):
        f, t = (p, c) if rng.random() < 0.5 else (c, p)
        edges.append((f, t, float(rng.uniform(0.05, 0.5)), 1e6))
    return make_case(loads, gen_max, edges), parent


def random_mesh_case(rng, n=10, extra=6, tight=0.9):
    """Random connected grid whose ratings sit near base-case flows, so cascades happen."""
    from faultchain.powerflow import solve_topology

    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    present = {tuple(sorted(e)) for e in edges}
    while len(edges) < n - 1 + extra:
        a, b = (int(v) for v in rng.choice(n, 2, replace=False))
        if tuple(sorted((a, b))) not in present:
            present.add(tuple(sorted((a, b))))
            edges.append((a, b))
    loads = rng.uniform(5, 60, n)
    gen_max = np.where(rng.random(n) < 0.4, rng.uniform(30, 150, n), 0.0)
    gen_max[0] = max(gen_max[0], loads.sum())
    xs = rng.uniform(0.05, 0.3, len(edges))
    loose = make_case(loads, gen_max, [(a, b, x, 1e6) for (a, b), x in zip(edges, xs)])
    flows = np.abs(solve_topology(loose, loose.initial_topology()).flows)
    ratings = np.maximum(flows / tight * rng.uniform(1.0, 1.6, len(edges)), 1.0)
    return make_case(loads, gen_max, [(a, b, x, r) for (a, b), x, r in zip(edges, xs, ratings)], name="mesh")
