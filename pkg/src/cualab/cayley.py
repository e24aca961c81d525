"""Block-diagonal orthogonal matrices parameterised by the Cayley transform.

Each block ``Q_i`` is built from a skew-symmetric generator ``K_i`` as
``Q = (I - K/2)(I + K/2)^{-1}``.  The free parameters are the strictly
upper-triangular entries of every ``K_i``, stored row-major per block with
blocks concatenated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CUA1"
_HEADER = struct.Struct("<4sII")


class CayleySingularityError(ValueError):
    """Raised when ``I + Q`` is singular (``Q`` has an eigenvalue near -1)."""


def n_params_per_block(block_dim: int) -> int:
    return block_dim * (block_dim - 1) // 2


@dataclass(frozen=True)
class SkewBlockParams:
    block_dim: int
    num_blocks: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.block_dim < 1 or self.num_blocks < 1:
            raise ValueError("block_dim and num_blocks must be positive")
        values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        expected = self.num_blocks * n_params_per_block(self.block_dim)
        if values.size != expected:
            raise ValueError(f"expected {expected} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters contain NaN or inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, dim: int, block_dim: int) -> SkewBlockParams:
        if dim % block_dim:
            raise ValueError(f"dim {dim} not divisible by block size {block_dim}")
        k = dim // block_dim
        return cls(block_dim, k, np.zeros(k * n_params_per_block(block_dim)))

    @classmethod
    def random(cls, dim: int, block_dim: int, scale: float = 1.0, seed=None) -> SkewBlockParams:
        if dim % block_dim:
            raise ValueError(f"dim {dim} not divisible by block size {block_dim}")
        rng = np.random.default_rng(seed)
        k = dim // block_dim
        return cls(block_dim, k, scale * rng.standard_normal(k * n_params_per_block(block_dim)))

    @property
    def dim(self) -> int:
        return self.block_dim * self.num_blocks

    @property
    def n_params(self) -> int:
        return self.values.size

    def block_values(self, block_index: int) -> np.ndarray:
        m = n_params_per_block(self.block_dim)
        return self.values[block_index * m:(block_index + 1) * m]

    def scaled(self, s: float) -> SkewBlockParams:
        return SkewBlockParams(self.block_dim, self.num_blocks, s * self.values)


def _triu_indices(b: int):
    return np.triu_indices(b, k=1)


def skew_stack(params: SkewBlockParams) -> np.ndarray:
    """All generators as a ``(k, b, b)`` array."""
    b, k = params.block_dim, params.num_blocks
    iu = _triu_indices(b)
    K = np.zeros((k, b, b))
    K[:, iu[0], iu[1]] = params.values.reshape(k, -1)
    return K - K.transpose(0, 2, 1)


def skew_from_params(params: SkewBlockParams, block_index: int) -> np.ndarray:
    if not 0 <= block_index < params.num_blocks:
        raise IndexError(f"block index {block_index} out of range [0, {params.num_blocks})")
    b = params.block_dim
    iu = _triu_indices(b)
    K = np.zeros((b, b))
    K[iu] = params.block_values(block_index)
    return K - K.T


def params_from_skew(K: np.ndarray) -> SkewBlockParams:
    """Pack one ``(b, b)`` or a stack ``(k, b, b)`` of skew matrices."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim == 2:
        K = K[None]
    k, b, _ = K.shape
    iu = _triu_indices(b)
    return SkewBlockParams(b, k, K[:, iu[0], iu[1]].reshape(-1))


def _check_skew(K: np.ndarray, tol: float = 1e-12) -> None:
    if K.ndim < 2 or K.shape[-1] != K.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {K.shape}")
    scale = max(1.0, float(np.max(np.abs(K), initial=0.0)))
    if np.max(np.abs(K + np.swapaxes(K, -1, -2)), initial=0.0) > tol * scale:
        raise ValueError("matrix is not skew-symmetric")


def cayley_transform(K: np.ndarray) -> np.ndarray:
    """Map a skew-symmetric matrix (or stack of them) to a rotation matrix."""
    K = np.asarray(K, dtype=np.float64)
    _check_skew(K)
    eye = np.eye(K.shape[-1])
    # Q = A M^{-1}  <=>  M^T Q^T = A^T; M^T = A and A^T = M for skew K
    A = eye - K / 2
    M = eye + K / 2
    return np.swapaxes(np.linalg.solve(A, M), -1, -2)


def cayley_inverse(Q: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Recover ``K`` from ``Q``: ``K = 2 (I - Q)(I + Q)^{-1}``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"expected square matrix, got shape {Q.shape}")
    eye = np.eye(Q.shape[0])
    eig = np.linalg.eigvals(Q)
    if np.any(np.abs(eig + 1.0) < tol):
        raise CayleySingularityError("Q has an eigenvalue at -1; Cayley inverse undefined")
    K = 2.0 * np.linalg.solve(eye + Q, eye - Q)
    return (K - K.T) / 2


@dataclass(frozen=True)
class BlockDiagonalUnitary:
    blocks: np.ndarray  # (k, b, b)

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.float64)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2]:
            raise ValueError(f"blocks must have shape (k, b, b), got {blocks.shape}")
        err = blocks.transpose(0, 2, 1) @ blocks - np.eye(blocks.shape[1])
        if blocks.size and np.max(np.linalg.norm(err, axis=(1, 2))) > 1e-10:
            raise ValueError("blocks are not orthogonal")
        blocks.setflags(write=False)
        object.__setattr__(self, "blocks", blocks)

    @property
    def block_dim(self) -> int:
        return self.blocks.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def input_dim(self) -> int:
        return self.num_blocks * self.block_dim

    def to_dense(self) -> np.ndarray:
        k, b = self.num_blocks, self.block_dim
        out = np.zeros((k, b, k, b))
        idx = np.arange(k)
        out[idx, :, idx, :] = self.blocks
        return out.reshape(k * b, k * b)

    def __matmul__(self, x):
        return bdu_apply(self, x)


@dataclass(frozen=True)
class DenseOrthogonal:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if np.linalg.norm(m.T @ m - np.eye(m.shape[0])) > 1e-10:
            raise ValueError("matrix is not orthogonal")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_params(cls, params: SkewBlockParams) -> DenseOrthogonal:
        if params.num_blocks != 1:
            raise ValueError("dense orthogonal operator needs a single full-size block")
        return cls(cayley_transform(skew_from_params(params, 0)))

    @property
    def input_dim(self) -> int:
        return self.matrix.shape[0]

    def to_dense(self) -> np.ndarray:
        return self.matrix

    def __matmul__(self, x):
        return self.matrix @ x


def assemble_bdu(params: SkewBlockParams) -> BlockDiagonalUnitary:
    return BlockDiagonalUnitary(cayley_transform(skew_stack(params)))


def bdu_apply(U: BlockDiagonalUnitary, x: np.ndarray) -> np.ndarray:
    """Apply ``U`` to a vector or to the last axis of a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != U.input_dim:
        raise ValueError(f"input length {x.shape[-1]} != operator dimension {U.input_dim}")
    xs = x.reshape(*x.shape[:-1], U.num_blocks, U.block_dim)
    return np.einsum("kij,...kj->...ki", U.blocks, xs).reshape(x.shape)


def cayley_gradient(params: SkewBlockParams, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the block entries back to the flat parameters.

    ``upstream`` has shape ``(k, b, b)`` (or ``(b, b)`` when ``k == 1``) and
    holds dL/dQ_i.  With ``M = I + K/2`` one has ``dQ = -1/2 (I + Q) dK M^{-1}``,
    so ``dL/dK = -1/2 (I + Q)^T G M^{-T}``; the parameter gradient is the
    antisymmetric part read off the upper triangle.
    """
    b, k = params.block_dim, params.num_blocks
    G = np.asarray(upstream, dtype=np.float64).reshape(k, b, b)
    K = skew_stack(params)
    eye = np.eye(b)
    Q = cayley_transform(K)
    M = eye + K / 2
    # X = G M^{-T}  <=>  M X^T = G^T
    X = np.swapaxes(np.linalg.solve(M, np.swapaxes(G, -1, -2)), -1, -2)
    dK = -0.5 * np.swapaxes(eye + Q, -1, -2) @ X
    iu = _triu_indices(b)
    return (dK[:, iu[0], iu[1]] - dK[:, iu[1], iu[0]]).reshape(-1)


def save_params(params: SkewBlockParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> SkewBlockParams:
    return params_from_bytes(Path(path).read_bytes())


def params_to_bytes(params: SkewBlockParams) -> bytes:
    header = _HEADER.pack(MAGIC, params.block_dim, params.num_blocks)
    return header + params.values.astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> SkewBlockParams:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated parameter blob")
    magic, b, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    values = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
    return SkewBlockParams(b, k, values.astype(np.float64))
