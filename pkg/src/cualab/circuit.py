"""Gate budgets, compounded infidelity and coupling-map packing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

from .noise import NoiseModel
from .qemu import readout_error


@dataclass(frozen=True)
class GateBudget:
    sx_count: int = 0
    rz_count: int = 0
    cz_count: int = 0
    reset_count: int = 0
    depth: int | None = None  # None: not reported

    def __post_init__(self):
        counts = (self.sx_count, self.rz_count, self.cz_count, self.reset_count)
        if any(c < 0 for c in counts):
            raise ValueError("gate counts must be nonnegative")
        if self.depth is not None and self.depth < 0:
            raise ValueError("depth must be nonnegative")
        if self.depth == 0 and any(counts):
            raise ValueError("nonempty circuit must have depth >= 1")


# Exact-synthesis SX/CZ counts per block, Heron r2 native gates.
BLOCK_BUDGETS = {
    2: GateBudget(sx_count=20, cz_count=4),
    3: GateBudget(sx_count=188, cz_count=45),
    4: GateBudget(sx_count=992, cz_count=273),
    5: GateBudget(sx_count=4_526, cz_count=1_331),
    6: GateBudget(sx_count=18_708, cz_count=5_534),
    7: GateBudget(sx_count=75_804, cz_count=22_396),
    8: GateBudget(sx_count=306_846, cz_count=91_000),
}

# One 2-qubit encode-unitary-measure circuit, and 64 of them packed on 128 qubits.
SINGLE_LANE_CIRCUIT = GateBudget(sx_count=12, rz_count=9, cz_count=3, depth=19)
PACKED_WIDE_CIRCUIT = GateBudget(sx_count=904, rz_count=916, cz_count=192, reset_count=128, depth=23)


def gate_budget_for_block(n_qubits: int) -> GateBudget:
    if n_qubits not in BLOCK_BUDGETS:
        raise ValueError(f"no gate budget for {n_qubits} qubits (supported: 2..8)")
    return BLOCK_BUDGETS[n_qubits]


@dataclass(frozen=True)
class InfidelityReport:
    lambda_1q: float
    lambda_2q: float
    lambda_total: float
    epsilon_readout: float


def compounded(p: float, count: int) -> float:
    return 1.0 - (1.0 - p) ** count


def gate_infidelity(budget: GateBudget, noise: NoiseModel, n_qubits: int) -> InfidelityReport:
    l1 = compounded(noise.p_sx, budget.sx_count)
    l2 = compounded(noise.p_cz, budget.cz_count)
    return InfidelityReport(
        lambda_1q=l1,
        lambda_2q=l2,
        lambda_total=1.0 - (1.0 - l1) * (1.0 - l2),
        epsilon_readout=readout_error(noise.p_readout, n_qubits),
    )


TABLE_COLUMNS = ["n_qubits", "block", "sx", "cz", "lambda_1q", "lambda_2q", "lambda", "eps_ro"]


def infidelity_table(noise: NoiseModel | None = None, qubits=range(2, 9)) -> list[dict]:
    noise = noise or NoiseModel()
    rows = []
    for n in qubits:
        budget = gate_budget_for_block(n)
        rep = gate_infidelity(budget, noise, n)
        rows.append({
            "n_qubits": n,
            "block": 2 ** n,
            "sx": budget.sx_count,
            "cz": budget.cz_count,
            "lambda_1q": rep.lambda_1q,
            "lambda_2q": rep.lambda_2q,
            "lambda": rep.lambda_total,
            "eps_ro": rep.epsilon_readout,
        })
    return rows


@dataclass(frozen=True)
class CouplingMap:
    num_qubits: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        norm = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-loop on qubit {u}")
            if not (0 <= u < self.num_qubits and 0 <= v < self.num_qubits):
                raise ValueError(f"edge ({u}, {v}) references a qubit outside [0, {self.num_qubits})")
            norm.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", tuple(sorted(norm)))

    def degree(self) -> list[int]:
        deg = [0] * self.num_qubits
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def subgraph(self, qubits) -> CouplingMap:
        """Induced subgraph, relabelled in ascending order of the kept qubits."""
        keep = sorted(set(qubits))
        index = {q: i for i, q in enumerate(keep)}
        edges = [(index[u], index[v]) for u, v in self.edges if u in index and v in index]
        return CouplingMap(len(keep), tuple(edges))


def heavy_hex_map(rows: int, cols: int) -> CouplingMap:
    """Heavy-hexagon lattice of ``rows x cols`` hexagonal unit cells.

    Hexagons are laid out brick-wall style and every lattice edge carries an
    extra qubit, so lattice vertices have degree <= 3 and edge qubits degree 2.
    Qubits are numbered in reading order of their doubled-grid position.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    lattice = set()
    for r in range(rows):
        for j in range(cols):
            c = 2 * j + (r % 2)
            top = [(r, c), (r, c + 1), (r, c + 2)]
            bot = [(r + 1, c), (r + 1, c + 1), (r + 1, c + 2)]
            for a, b in ((top[0], top[1]), (top[1], top[2]), (bot[0], bot[1]),
                         (bot[1], bot[2]), (top[0], bot[0]), (top[2], bot[2])):
                lattice.add((min(a, b), max(a, b)))

    # doubled-grid coordinates: vertex (r, c) -> (2r, 2c); edge qubit at the midpoint
    pos_edges = []
    nodes = set()
    for (r1, c1), (r2, c2) in lattice:
        a, b = (2 * r1, 2 * c1), (2 * r2, 2 * c2)
        mid = (r1 + r2, c1 + c2)
        nodes.update((a, b, mid))
        pos_edges += [(a, mid), (mid, b)]
    index = {p: i for i, p in enumerate(sorted(nodes))}
    return CouplingMap(len(index), tuple((index[a], index[b]) for a, b in pos_edges))


def greedy_max_matching(cmap: CouplingMap, max_pairs: int) -> list[tuple[int, int]]:
    """Scan edges in ascending order, keeping each edge whose endpoints are both free."""
    if max_pairs < 0:
        raise ValueError("max_pairs must be >= 0")
    used = set()
    pairs = []
    for u, v in cmap.edges:
        if len(pairs) >= max_pairs:
            break
        if u in used or v in used:
            continue
        used.update((u, v))
        pairs.append((u, v))
    return pairs


@dataclass(frozen=True)
class PackingSchedule:
    num_circuits: int
    lane_assignment: tuple[tuple[int, int], ...]  # block -> (circuit, lane)

    def circuits(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_circuits)]
        for block, (circ, _lane) in enumerate(self.lane_assignment):
            out[circ].append(block)
        return out


def packing_schedule(num_blocks: int, lanes_per_circuit: int) -> PackingSchedule:
    if lanes_per_circuit < 1:
        raise ValueError("lanes_per_circuit must be >= 1")
    if num_blocks < 0:
        raise ValueError("num_blocks must be >= 0")
    n = math.ceil(num_blocks / lanes_per_circuit)
    assign = tuple(divmod(i, lanes_per_circuit) for i in range(num_blocks))
    return PackingSchedule(n, assign)


def token_circuit_estimate(num_tokens: int, circuits_per_token: int) -> int:
    if num_tokens < 0 or circuits_per_token < 0:
        raise ValueError("inputs must be nonnegative")
    return num_tokens * circuits_per_token


def write_coupling_map(cmap: CouplingMap, path) -> None:
    lines = [f"# qubits {cmap.num_qubits}"] + [f"{u} {v}" for u, v in cmap.edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_coupling_map(path) -> CouplingMap:
    num_qubits = None
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "qubits":
                num_qubits = int(parts[1])
            continue
        try:
            u, v = (int(t) for t in line.split())
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'u v', got {raw!r}") from None
        edges.append((u, v))
    if num_qubits is None:
        raise ValueError(f"{path}: missing '# qubits N' header")
    return CouplingMap(num_qubits, tuple(edges))


def write_infidelity_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
