"""Emulated quantum execution of a sign-constrained adapter.

Each length-``b`` slice of the input is amplitude-encoded on ``log2(b)``
qubits, evolved by its orthogonal block, degraded by an aggregated
depolarising channel and per-qubit readout confusion, optionally sampled
with a finite number of shots, and mapped back to a real vector via
``y_k = sqrt(c_k / N) * sgn(x_k) * ||x||``.

All measurements are in the computational basis and the channel acts after
the full unitary, so the diagonal of the density matrix is all that is ever
observed; the emulator works on probability vectors.  ``density_matrix_probabilities``
keeps the full density-matrix path as a cross-check for small blocks.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapter import AdapterMode, CuaLayer
from .cayley import BlockDiagonalUnitary, DenseOrthogonal
from .noise import NoiseModel

ZERO_NORM = 1e-12
PROB_FLOOR = 1e-12


def _num_qubits(b: int) -> int:
    n = int(b).bit_length() - 1
    if b < 2 or (1 << n) != b:
        raise ValueError(f"slice length {b} is not a power of two >= 2")
    return n


@dataclass(frozen=True)
class EncodedSlice:
    amplitudes: np.ndarray
    norm: float
    signs: np.ndarray

    @property
    def is_zero(self) -> bool:
        return self.norm < ZERO_NORM

    @property
    def num_qubits(self) -> int:
        return _num_qubits(self.amplitudes.size)


@dataclass(frozen=True)
class ShotCounts:
    counts: np.ndarray
    total: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(counts < 0) or counts.sum() != self.total:
            raise ValueError("counts must be nonnegative and sum to total")
        object.__setattr__(self, "counts", counts)


def amplitude_encode(x) -> EncodedSlice:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _num_qubits(x.size)
    norm = float(np.linalg.norm(x))
    signs = np.sign(x)
    if norm < ZERO_NORM:
        return EncodedSlice(np.zeros_like(x), norm, signs)
    return EncodedSlice(x / norm, norm, signs)


def ideal_probabilities(Q, slice_: EncodedSlice) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != (slice_.amplitudes.size,) * 2:
        raise ValueError(f"operator shape {Q.shape} does not match slice length {slice_.amplitudes.size}")
    if slice_.is_zero:
        p = np.zeros(slice_.amplitudes.size)
        p[0] = 1.0
        return p
    return (Q @ slice_.amplitudes) ** 2


def apply_depolarizing(p, lam: float) -> np.ndarray:
    """Mix toward the uniform distribution: ``(1 - lam) p + lam / b``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"depolarising parameter {lam} outside [0, 1]")
    p = np.asarray(p, dtype=np.float64)
    return (1.0 - lam) * p + lam / p.shape[-1]


def confusion_matrix(p_ro: float) -> np.ndarray:
    return np.array([[1.0 - p_ro, p_ro], [p_ro, 1.0 - p_ro]])


def apply_readout_confusion(p, p_ro: float, n: int) -> np.ndarray:
    """Apply the symmetric bit-flip confusion ``C`` to each of ``n`` qubits."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2 ** n:
        raise ValueError(f"probability vector length {p.shape[-1]} != 2^{n}")
    if p_ro == 0.0:
        return p.copy()
    C = confusion_matrix(p_ro)
    lead = p.shape[:-1]
    t = p.reshape(*lead, *([2] * n))
    for q in range(n):
        axis = len(lead) + q
        t = np.moveaxis(np.tensordot(t, C, axes=([axis], [1])), -1, axis)
    return t.reshape(p.shape)


def readout_error(p_ro: float, n: int) -> float:
    """Probability that at least one of ``n`` measured bits flips."""
    return 1.0 - (1.0 - p_ro) ** n


def _normalise(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


def sample_shots(p, n_shots: int, rng_seed) -> ShotCounts:
    p = np.asarray(p, dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    rng = np.random.default_rng(rng_seed)
    return ShotCounts(rng.multinomial(n_shots, _normalise(p)), n_shots)


def reconstruct(counts: ShotCounts, slice_: EncodedSlice) -> np.ndarray:
    if counts.total <= 0:
        raise ValueError("no shots recorded")
    if slice_.is_zero:
        return np.zeros(slice_.amplitudes.size)
    freq = np.clip(counts.counts / counts.total, PROB_FLOOR, 1.0)
    return np.sqrt(freq) * slice_.signs * slice_.norm


def density_matrix_probabilities(Q, amplitudes, lambdas=(), p_ro: float = 0.0) -> np.ndarray:
    """Reference path: evolve ``|psi><psi|``, apply each depolarising channel in turn,
    then readout confusion on the diagonal.  Intended for ``b <= 16``."""
    Q = np.asarray(Q, dtype=np.float64)
    psi = np.asarray(amplitudes, dtype=np.float64)
    b = psi.size
    if b > 16:
        raise ValueError("density-matrix reference limited to 4 qubits")
    rho = np.outer(psi, psi)
    rho = Q @ rho @ Q.T
    eye = np.eye(b)
    for lam in lambdas:
        rho = (1.0 - lam) * rho + lam * eye / b
    return apply_readout_confusion(np.real(np.diag(rho)), p_ro, _num_qubits(b))


def _blocks_of(layer: CuaLayer) -> np.ndarray:
    t = layer.transform
    if isinstance(t, BlockDiagonalUnitary):
        return np.asarray(t.blocks)
    if isinstance(t, DenseOrthogonal):
        return np.asarray(t.matrix)[None]
    raise ValueError("quantum path needs an orthogonal (Cayley) transform")


def aggregated_lambda(noise: NoiseModel | None, n_qubits: int) -> float:
    if noise is None:
        return 0.0
    from .circuit import gate_budget_for_block, gate_infidelity

    return gate_infidelity(gate_budget_for_block(n_qubits), noise, n_qubits).lambda_total


def emulate_slices(
    blocks: np.ndarray,
    x: np.ndarray,
    *,
    lam: float = 0.0,
    p_ro: float = 0.0,
    n_shots: int | None = None,
    rng_seed=0,
    token_offset: int = 0,
) -> np.ndarray:
    """Vectorised encode -> evolve -> noise -> (sample) -> reconstruct.

    ``x`` has shape ``(..., k*b)``; every row is one token.  With ``n_shots``
    set, row ``t`` draws its shots from a generator keyed on
    ``(rng_seed, token_offset + t)``, so results do not depend on how rows
    are batched.
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    k, b, _ = blocks.shape
    n = _num_qubits(b)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != k * b:
        raise ValueError(f"input length {x.shape[-1]} != {k}*{b}")
    lead = x.shape[:-1]
    xs = x.reshape(-1, k, b)
    norms = np.linalg.norm(xs, axis=-1, keepdims=True)
    zero = norms < ZERO_NORM
    amps = np.divide(xs, norms, out=np.zeros_like(xs), where=~zero)

    p = np.einsum("kij,tkj->tki", blocks, amps) ** 2
    # zero slices are bypassed; give them a valid distribution for sampling
    p = np.where(zero, np.eye(b)[0], p)
    p = apply_depolarizing(p, lam)
    p = _normalise(apply_readout_confusion(p, p_ro, n))

    if n_shots is None:
        freq = p
    else:
        freq = np.empty_like(p)
        key = [int(v) for v in np.atleast_1d(rng_seed)]
        for t in range(p.shape[0]):
            rng = np.random.default_rng([*key, token_offset + t])
            freq[t] = rng.multinomial(n_shots, p[t]) / n_shots
    y = np.sqrt(np.clip(freq, PROB_FLOOR, 1.0)) * np.sign(xs) * norms
    y = np.where(zero, 0.0, y)
    return y.reshape(*lead, k * b)


def emulated_forward(
    layer: CuaLayer,
    x,
    noise: NoiseModel | None = None,
    mode: str = "exact",
    rng_seed: int = 0,
    *,
    depolarizing: float | None = None,
    token_offset: int = 0,
) -> np.ndarray:
    """Run a sign-constrained layer through the emulated quantum path.

    ``mode`` is ``"exact"`` (infinite shots) or ``"sampled"``.  The aggregated
    depolarising parameter comes from the gate budget of one block under
    ``noise`` unless ``depolarizing`` overrides it; ``noise=None`` is noiseless.
    """
    if layer.mode is not AdapterMode.SIGN_CONSTRAINED:
        raise ValueError("emulated forward requires a sign-constrained layer")
    if mode not in ("exact", "sampled"):
        raise ValueError(f"unknown mode {mode!r}")
    blocks = _blocks_of(layer)
    b = blocks.shape[1]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % b:
        raise ValueError(f"input length {x.shape[-1]} not divisible by block size {b}")
    n = _num_qubits(b)
    lam = aggregated_lambda(noise, n) if depolarizing is None else depolarizing
    p_ro = noise.p_readout if noise is not None else 0.0
    shots = None
    if mode == "sampled":
        shots = noise.n_shots if noise is not None else NoiseModel().n_shots
    z = emulate_slices(
        blocks, x, lam=lam, p_ro=p_ro, n_shots=shots, rng_seed=rng_seed, token_offset=token_offset
    )
    return z @ layer.frozen_weight.T


def shot_rmse(n_shots: int, n_slices: int = 1000, block_dim: int = 4, seed: int = 0) -> float:
    """Mean per-slice RMSE of the sampled reconstruction against the infinite-shot one.

    Slices are Gaussian and each gets its own Haar-random orthogonal block;
    the path is noiseless so only shot noise contributes.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_slices, block_dim, block_dim))
    q, r = np.linalg.qr(g)
    blocks = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    x = rng.standard_normal((1, n_slices * block_dim))
    exact = emulate_slices(blocks, x).reshape(n_slices, block_dim)
    sampled = emulate_slices(blocks, x, n_shots=n_shots, rng_seed=[seed, n_shots]).reshape(n_slices, block_dim)
    return float(np.mean(np.sqrt(np.mean((sampled - exact) ** 2, axis=1))))


def write_shot_trace(path, counts: list[ShotCounts]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice_id", "outcome", "count"])
        for slice_id, c in enumerate(counts):
            for outcome, value in enumerate(c.counts):
                writer.writerow([slice_id, outcome, int(value)])


def read_shot_trace(path) -> list[ShotCounts]:
    rows: dict[int, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["slice_id"]), {})[int(row["outcome"])] = int(row["count"])
    out = []
    for slice_id in sorted(rows):
        d = rows[slice_id]
        counts = np.array([d.get(i, 0) for i in range(max(d) + 1)])
        out.append(ShotCounts(counts, int(counts.sum())))
    return out
