import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cualab.circuit import (
    PACKED_WIDE_CIRCUIT,
    SINGLE_LANE_CIRCUIT,
    CouplingMap,
    GateBudget,
    gate_budget_for_block,
    gate_infidelity,
    greedy_max_matching,
    heavy_hex_map,
    infidelity_table,
    packing_schedule,
    read_coupling_map,
    token_circuit_estimate,
    write_coupling_map,
    write_infidelity_csv,
)
from cualab.noise import NoiseModel

# n, block, SX, CZ, lambda_1q, lambda_2q, lambda, eps_ro as printed (approx-1 entries read as 1)
INFIDELITY_ROWS = [
    (2, 4, 20, 4, 0.005, 0.007, 0.012, 0.014),
    (3, 8, 188, 45, 0.045, 0.077, 0.119, 0.020),
    (4, 16, 992, 273, 0.216, 0.385, 0.518, 0.027),
    (5, 32, 4526, 1331, 0.671, 0.907, 0.969, 0.034),
    (6, 64, 18708, 5534, 0.990, 1.0, 1.0, 0.040),
    (7, 128, 75804, 22396, 1.0, 1.0, 1.0, 0.047),
    (8, 256, 306846, 91000, 1.0, 1.0, 1.0, 0.053),
]


def _brute_force_max_matching(cmap):
    best = 0
    edges = list(cmap.edges)
    for r in range(len(edges), 0, -1):
        if r <= best:
            break
        for combo in itertools.combinations(edges, r):
            nodes = [q for e in combo for q in e]
            if len(nodes) == len(set(nodes)):
                return r
    return best


def _random_map(seed, n):
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < 0.35]
    return CouplingMap(n, tuple(edges))


# -- budgets and infidelity ----------------------------------------------


@pytest.mark.parametrize("row", INFIDELITY_ROWS, ids=lambda r: f"{r[0]}q")
def test_infidelity_row(row):
    n, block, sx, cz, l1, l2, lam, ro = row
    budget = gate_budget_for_block(n)
    assert (budget.sx_count, budget.cz_count) == (sx, cz)
    rep = gate_infidelity(budget, NoiseModel(), n)
    assert abs(rep.lambda_1q - l1) <= 1e-3
    assert abs(rep.lambda_2q - l2) <= 1e-3
    assert abs(rep.lambda_total - lam) <= 1e-3
    assert abs(rep.epsilon_readout - ro) <= 1e-3


def test_two_qubit_lambda_frozen():
    rep = gate_infidelity(gate_budget_for_block(2), NoiseModel(), 2)
    assert rep.lambda_total == pytest.approx(0.01195491005332383, rel=1e-12)


def test_compounded_not_additive():
    # additive would give 188 * 2.45e-4 = 0.0461
    rep = gate_infidelity(GateBudget(sx_count=188), NoiseModel(), 3)
    assert round(rep.lambda_1q, 3) == 0.045


def test_empty_budget_zero_lambda():
    assert gate_infidelity(GateBudget(), NoiseModel(), 2).lambda_total == 0.0


def test_zero_error_rates_zero_table():
    rows = infidelity_table(NoiseModel(0.0, 0.0, 0.0))
    assert all(r["lambda"] == 0.0 and r["eps_ro"] == 0.0 for r in rows)


def test_budget_out_of_range():
    with pytest.raises(ValueError):
        gate_budget_for_block(9)


def test_budget_validation():
    with pytest.raises(ValueError):
        GateBudget(sx_count=-1)
    with pytest.raises(ValueError):
        GateBudget(sx_count=1, depth=0)


def test_reported_circuits():
    assert (SINGLE_LANE_CIRCUIT.sx_count, SINGLE_LANE_CIRCUIT.rz_count, SINGLE_LANE_CIRCUIT.cz_count,
            SINGLE_LANE_CIRCUIT.depth) == (12, 9, 3, 19)
    assert PACKED_WIDE_CIRCUIT.cz_count == 3 * 64
    assert PACKED_WIDE_CIRCUIT.reset_count == 128


@settings(max_examples=100, deadline=None)
@given(sx=st.integers(0, 5000), cz=st.integers(0, 2000), dsx=st.integers(1, 50), dcz=st.integers(1, 50))
def test_lambda_increasing_in_counts(sx, cz, dsx, dcz):
    noise = NoiseModel(p_sx=1e-5, p_cz=1e-5)
    base = gate_infidelity(GateBudget(sx_count=sx, cz_count=cz), noise, 2).lambda_total
    assert gate_infidelity(GateBudget(sx_count=sx + dsx, cz_count=cz), noise, 2).lambda_total > base
    assert gate_infidelity(GateBudget(sx_count=sx, cz_count=cz + dcz), noise, 2).lambda_total > base


@settings(max_examples=100, deadline=None)
@given(p=st.floats(1e-6, 1e-3), dp=st.floats(1e-6, 1e-3))
def test_lambda_increasing_in_rates(p, dp):
    b = GateBudget(sx_count=20, cz_count=4)
    assert gate_infidelity(b, NoiseModel(p_sx=p + dp, p_cz=p), 2).lambda_total > \
        gate_infidelity(b, NoiseModel(p_sx=p, p_cz=p), 2).lambda_total


def test_infidelity_csv(tmp_path):
    write_infidelity_csv(infidelity_table(), tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "n_qubits,block,sx,cz,lambda_1q,lambda_2q,lambda,eps_ro"
    assert len(lines) == 8


# -- coupling map ---------------------------------------------------------


def test_heavy_hex_unit_cell():
    cmap = heavy_hex_map(1, 1)
    assert cmap.num_qubits == 12 and len(cmap.edges) == 12
    assert max(cmap.degree()) <= 3
    G = nx.Graph(list(cmap.edges))
    assert nx.is_connected(G) and G.number_of_nodes() == 12


@pytest.mark.parametrize("rows, cols", [(1, 2), (2, 2), (3, 5), (4, 6), (6, 6)])
def test_heavy_hex_degree_and_connectivity(rows, cols):
    cmap = heavy_hex_map(rows, cols)
    assert max(cmap.degree()) <= 3
    G = nx.Graph()
    G.add_nodes_from(range(cmap.num_qubits))
    G.add_edges_from(cmap.edges)
    assert nx.is_connected(G)
    assert nx.is_bipartite(G)


def test_heavy_hex_device_scale():
    cmap = heavy_hex_map(4, 6)
    assert cmap.num_qubits == 159 and cmap.num_qubits >= 156


def test_heavy_hex_deterministic():
    assert heavy_hex_map(3, 3) == heavy_hex_map(3, 3)


def test_coupling_map_validation():
    with pytest.raises(ValueError):
        CouplingMap(3, ((0, 0),))
    with pytest.raises(ValueError):
        CouplingMap(3, ((0, 3),))


def test_coupling_map_normalises_edges():
    assert CouplingMap(3, ((2, 1), (1, 2), (0, 1))).edges == ((0, 1), (1, 2))


def test_coupling_map_file_round_trip(tmp_path):
    cmap = heavy_hex_map(2, 2)
    write_coupling_map(cmap, tmp_path / "m.txt")
    assert read_coupling_map(tmp_path / "m.txt") == cmap


def test_coupling_map_bad_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("# qubits 3\n0 x\n")
    with pytest.raises(ValueError):
        read_coupling_map(p)
    p.write_text("0 1\n")
    with pytest.raises(ValueError):
        read_coupling_map(p)


# -- matching -------------------------------------------------------------


def test_path_graph_five():
    cmap = CouplingMap(5, ((0, 1), (1, 2), (2, 3), (3, 4)))
    assert greedy_max_matching(cmap, 10) == [(0, 1), (2, 3)]
    assert _brute_force_max_matching(cmap) == 2


def test_empty_map():
    assert greedy_max_matching(CouplingMap(0, ()), 64) == []
    assert greedy_max_matching(CouplingMap(4, ()), 64) == []


def test_sixty_four_lanes_on_heavy_hex():
    cmap = heavy_hex_map(4, 6)
    pairs = greedy_max_matching(cmap, 64)
    assert len(pairs) == 64
    used = {q for p in pairs for q in p}
    assert len(used) == 128
    # the lanes live on a 128-qubit subgraph
    sub = cmap.subgraph(used)
    assert sub.num_qubits == 128
    assert len(greedy_max_matching(sub, 64)) <= 64


def test_max_pairs_cap():
    assert len(greedy_max_matching(heavy_hex_map(4, 6), 10)) == 10


@pytest.mark.parametrize("seed", range(30))
def test_matching_vs_brute_force_small(seed):
    n = 4 + seed % 7
    cmap = _random_map(seed, n)
    pairs = greedy_max_matching(cmap, n)
    nodes = [q for p in pairs for q in p]
    assert len(nodes) == len(set(nodes))
    assert set(pairs) <= set(cmap.edges)
    assert 2 * len(pairs) >= _brute_force_max_matching(cmap)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40), cap=st.integers(0, 30))
def test_matching_disjoint_and_half_optimal(seed, n, cap):
    cmap = _random_map(seed, n)
    pairs = greedy_max_matching(cmap, cap)
    nodes = [q for p in pairs for q in p]
    assert len(nodes) == len(set(nodes))
    assert len(pairs) <= cap
    optimum = len(nx.max_weight_matching(nx.Graph(list(cmap.edges)), maxcardinality=True))
    assert 2 * len(pairs) >= min(optimum, cap)


def test_matching_negative_cap():
    with pytest.raises(ValueError):
        greedy_max_matching(CouplingMap(2, ((0, 1),)), -1)


# -- packing --------------------------------------------------------------


@pytest.mark.parametrize("blocks, lanes, circuits", [(1024, 64, 16), (144, 72, 2), (1, 64, 1), (0, 64, 0)])
def test_packing_schedule(blocks, lanes, circuits):
    sched = packing_schedule(blocks, lanes)
    assert sched.num_circuits == circuits
    flat = sorted(b for c in sched.circuits() for b in c)
    assert flat == list(range(blocks))
    assert all(len(c) <= lanes for c in sched.circuits())


def test_packing_invalid_lanes():
    with pytest.raises(ValueError):
        packing_schedule(4, 0)


@pytest.mark.parametrize("tokens, per_token, total", [(129, 3, 387), (0, 16, 0), (83, 16, 1328)])
def test_token_circuit_estimate(tokens, per_token, total):
    assert token_circuit_estimate(tokens, per_token) == total
