"""Operator Schmidt analysis of orthogonal operators.

An operator ``U`` on ``C^{d_A} (x) C^{d_B}`` is reshaped as
``U[(iA, iB), (jA, jB)] -> M[(iA, jA), (iB, jB)]``; the singular values of
``M`` normalised to unit 2-norm form the operator Schmidt spectrum.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cayley import BlockDiagonalUnitary, SkewBlockParams, assemble_bdu

RANK_TOL = 1e-10


@dataclass(frozen=True)
class Bipartition:
    d_A: int
    d_B: int

    def __post_init__(self):
        if self.d_A < 1 or self.d_B < 1:
            raise ValueError("bipartition dimensions must be positive")

    @classmethod
    def qubits(cls, n_A: int, n_B: int) -> Bipartition:
        return cls(2 ** n_A, 2 ** n_B)

    @property
    def dim(self) -> int:
        return self.d_A * self.d_B

    @property
    def rank_max(self) -> int:
        return min(self.d_A ** 2, self.d_B ** 2)

    def label(self) -> str:
        a, b = math.log2(self.d_A), math.log2(self.d_B)
        if a.is_integer() and b.is_integer():
            return f"{int(a)}|{int(b)}"
        return f"{self.d_A}x{self.d_B}"


@dataclass(frozen=True)
class OperatorSchmidtSpectrum:
    sigmas: np.ndarray
    rank: int
    entropy_bits: float

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[0])

    @property
    def purity_deficit(self) -> float:
        """``1 - sum sigma^4``."""
        return float(1.0 - np.sum(self.sigmas ** 4))


def _spectrum_from_singular_values(s: np.ndarray, rank_tol: float) -> OperatorSchmidtSpectrum:
    s = np.sort(np.abs(s))[::-1]
    total = math.sqrt(float(np.sum(s ** 2)))
    if total == 0.0:
        raise ValueError("zero operator has no Schmidt spectrum")
    sig = s / total
    rank = int(np.count_nonzero(sig > rank_tol * sig[0]))
    p = sig ** 2
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log2(nz)))
    return OperatorSchmidtSpectrum(sig, rank, max(entropy, 0.0))


def realign(U: np.ndarray, cut: Bipartition) -> np.ndarray:
    U = np.asarray(U)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError("operator must be square")
    if U.shape[0] != cut.dim:
        raise ValueError(f"operator dimension {U.shape[0]} != {cut.d_A}*{cut.d_B}")
    dA, dB = cut.d_A, cut.d_B
    return U.reshape(dA, dB, dA, dB).transpose(0, 2, 1, 3).reshape(dA * dA, dB * dB)


def operator_schmidt(U, cut: Bipartition, rank_tol: float = RANK_TOL) -> OperatorSchmidtSpectrum:
    M = realign(U, cut)
    # all-zero rows/columns carry no singular value; dropping them is exact
    rows = np.flatnonzero(np.any(M != 0, axis=1))
    cols = np.flatnonzero(np.any(M != 0, axis=0))
    if rows.size == 0:
        raise ValueError("zero operator has no Schmidt spectrum")
    if rows.size < M.shape[0] or cols.size < M.shape[1]:
        M = M[np.ix_(rows, cols)]
    s = np.linalg.svd(M, compute_uv=False)
    return _spectrum_from_singular_values(s, rank_tol)


def effective_bond_dim(spec: OperatorSchmidtSpectrum, threshold_fraction: float = 0.01) -> int:
    if spec.sigmas.size == 0:
        raise ValueError("empty spectrum")
    return int(np.count_nonzero(spec.sigmas > threshold_fraction * spec.sigmas[0]))


def entropy_ratio(spec: OperatorSchmidtSpectrum, n_qubits: int) -> float:
    """Operator entropy relative to ``S_max = n/2`` bits.

    The ratio can exceed 1 at near-balanced cuts of strongly entangling
    operators, whose entropy approaches ``2 min(n_A, n_B)`` bits.
    """
    if n_qubits < 2:
        raise ValueError("n_qubits must be >= 2")
    return spec.entropy_bits / (n_qubits / 2)


def cut_profile(U, n_qubits: int | None = None) -> list[tuple[Bipartition, OperatorSchmidtSpectrum]]:
    """Spectra for every qubit cut ``k | n-k``, ``k = 1..n-1``."""
    U = np.asarray(U)
    if n_qubits is None:
        n_qubits = int(U.shape[0]).bit_length() - 1
    if U.shape[0] != 2 ** n_qubits:
        raise ValueError("operator dimension is not 2^n; pad it first")
    return [(c, operator_schmidt(U, c)) for c in
            (Bipartition.qubits(k, n_qubits - k) for k in range(1, n_qubits))]


def entanglement_summary(U, n_qubits: int | None = None, threshold_fraction: float = 0.01) -> dict:
    """Average/max effective bond dimension and mean entropy ratio across cuts."""
    U = np.asarray(U)
    n = n_qubits or int(U.shape[0]).bit_length() - 1
    prof = cut_profile(U, n)
    chis = [effective_bond_dim(s, threshold_fraction) for _, s in prof]
    ratios = [entropy_ratio(s, n) for _, s in prof]
    return {
        "n_qubits": n,
        "avg_bond_dim": float(np.mean(chis)),
        "max_bond_dim": int(max(chis)),
        "entropy_ratio": float(np.mean(ratios)),
    }


# two-qubit gates, qubit 0 most significant
CNOT = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=float)
SWAP = np.array([[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 1]], dtype=float)


def _linear_entropy(psi: np.ndarray) -> np.ndarray:
    A = psi.reshape(-1, 2, 2)
    rho = A @ np.conj(np.swapaxes(A, -1, -2))
    purity = np.real(np.einsum("nij,nji->n", rho, rho))
    return 1.0 - purity


def _random_product_states(n: int, rng) -> np.ndarray:
    a = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    b = rng.standard_normal((n, 2)) + 1j * rng.standard_normal((n, 2))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    return np.einsum("ni,nj->nij", a, b).reshape(n, 4)


def entangling_power_estimate(U, n_samples: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Mean post-gate linear entropy over Haar product inputs, relative to CNOT.

    Both averages use the same input samples.  Returns ``(value, stderr)``.
    """
    U = np.asarray(U)
    if U.shape != (4, 4):
        raise ValueError("entangling power is defined here for 4x4 operators")
    psi = _random_product_states(n_samples, np.random.default_rng(seed))
    e_u = _linear_entropy(psi @ U.T)
    e_c = _linear_entropy(psi @ CNOT.T)
    mean_c = e_c.mean()
    value = e_u.mean() / mean_c
    stderr = float(np.std(e_u - value * e_c, ddof=1) / (math.sqrt(n_samples) * mean_c))
    return float(value), stderr


def entangling_power(U, n_samples: int = 100_000, seed: int = 0) -> float:
    return entangling_power_estimate(U, n_samples, seed)[0]


def haar_orthogonal(d: int, rng, special: bool = True) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    if special and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def haar_so4_bdu(num_blocks: int, seed=None) -> BlockDiagonalUnitary:
    rng = np.random.default_rng(seed)
    return BlockDiagonalUnitary(np.stack([haar_orthogonal(4, rng) for _ in range(num_blocks)]))


def apply_two_qubit_gate(U: np.ndarray, gate: np.ndarray, q: int, n_qubits: int) -> np.ndarray:
    """Left-multiply ``U`` by ``gate`` acting on qubits ``(q, q+1)``."""
    cols = U.shape[1]
    T = U.reshape([2] * n_qubits + [cols])
    G = gate.reshape(2, 2, 2, 2)
    out = np.tensordot(G, T, axes=([2, 3], [q, q + 1]))
    out = np.moveaxis(out, [0, 1], [q, q + 1])
    return np.ascontiguousarray(out).reshape(U.shape)


def brickwork_layers(n_qubits: int, depth: int, seed=None):
    """Yield the operator after each of ``depth`` brickwork layers.

    Layer 1, 3, ... acts on pairs (0,1), (2,3), ...; layers 2, 4, ... on
    (1,2), (3,4), ...; every gate is an independent Haar SO(4) draw.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    rng = np.random.default_rng(seed)
    U = np.eye(2 ** n_qubits)
    for layer in range(1, depth + 1):
        start = 0 if layer % 2 == 1 else 1
        for q in range(start, n_qubits - 1, 2):
            U = apply_two_qubit_gate(U, haar_orthogonal(4, rng), q, n_qubits)
        yield U


def brickwork_unitary(n_qubits: int, depth: int, seed=None) -> np.ndarray:
    U = np.eye(2 ** n_qubits)
    for U in brickwork_layers(n_qubits, depth, seed):
        pass
    return U


def stress_scale(params: SkewBlockParams, s: float) -> BlockDiagonalUnitary:
    if s < 0:
        raise ValueError("scale must be nonnegative")
    return assemble_bdu(params.scaled(s))


def pad_to_pow2(U) -> np.ndarray:
    """Direct sum with an identity block up to the next power-of-two size."""
    U = np.asarray(U)
    m = U.shape[0]
    if U.ndim != 2 or U.shape[1] != m or m < 2:
        raise ValueError("expected a square matrix of size >= 2")
    size = 1 << (m - 1).bit_length()
    if size == m:
        return U
    out = np.eye(size, dtype=U.dtype)
    out[:m, :m] = U
    return out


SUMMARY_COLUMNS = ["object", "cut", "rank_max", "rank_achieved", "sigma_max", "purity_deficit"]


def summary_row(name: str, cut: Bipartition, spec: OperatorSchmidtSpectrum) -> dict:
    return {
        "object": name,
        "cut": cut.label(),
        "rank_max": cut.rank_max,
        "rank_achieved": spec.rank,
        "sigma_max": spec.sigma_max,
        "purity_deficit": spec.purity_deficit,
    }


def write_spectra_csv(path, spectra: list[tuple[Bipartition, OperatorSchmidtSpectrum]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cut", "k", "sigma"])
        for cut, spec in spectra:
            for k, s in enumerate(spec.sigmas):
                writer.writerow([cut.label(), k, repr(float(s))])
