"""Cayley unitary adapter forward maps and the ablation baselines.

A ``CuaLayer`` wraps a frozen projection ``W`` with a trainable transform
``Q`` acting on the projection input.  Three regimes are supported:

* ``SIGN_CONSTRAINED``: ``y = W(|Qx| * sgn(x))``
* ``ORTHOGONAL``: ``y = W(Qx)`` with ``Q`` orthogonal
* ``UNCONSTRAINED``: ``y = W(Ax)`` with ``A`` an arbitrary square matrix

``sgn(0)`` is 0 throughout, so zero input coordinates stay zero.
"""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .cayley import (
    BlockDiagonalUnitary,
    DenseOrthogonal,
    SkewBlockParams,
    assemble_bdu,
    bdu_apply,
    cayley_gradient,
    load_params,
    save_params,
)

Transform = Union[BlockDiagonalUnitary, DenseOrthogonal, np.ndarray]


class AdapterMode(str, enum.Enum):
    SIGN_CONSTRAINED = "sign_constrained"
    ORTHOGONAL = "orthogonal"
    UNCONSTRAINED = "unconstrained"


class AblationKind(str, enum.Enum):
    IDENTITY = "identity"
    SIGNED_DIAGONAL = "signed_diagonal"
    RANDOM_GAUSSIAN = "random_gaussian"
    RANDOM_UNITARY = "random_unitary"
    RANDOM_PERMUTATION = "random_permutation"


STOCHASTIC_ABLATIONS = (
    AblationKind.RANDOM_GAUSSIAN,
    AblationKind.RANDOM_UNITARY,
    AblationKind.RANDOM_PERMUTATION,
)


def weight_checksum(W) -> str:
    arr = np.ascontiguousarray(np.asarray(W))
    return hashlib.sha256(arr.tobytes() + str(arr.dtype).encode() + str(arr.shape).encode()).hexdigest()


def _transform_dim(transform: Transform) -> int:
    if isinstance(transform, (BlockDiagonalUnitary, DenseOrthogonal)):
        return transform.input_dim
    return np.asarray(transform).shape[1]


def apply_transform(transform: Transform, x: np.ndarray) -> np.ndarray:
    """Apply the adapter transform along the last axis of ``x``."""
    if isinstance(transform, BlockDiagonalUnitary):
        return bdu_apply(transform, x)
    matrix = transform.matrix if isinstance(transform, DenseOrthogonal) else np.asarray(transform)
    return np.asarray(x, dtype=np.float64) @ matrix.T


@dataclass(frozen=True)
class CuaLayer:
    mode: AdapterMode
    transform: Transform
    frozen_weight: np.ndarray
    params: SkewBlockParams | None = None

    def __post_init__(self):
        W = np.array(self.frozen_weight, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("frozen weight must be a matrix")
        W.setflags(write=False)
        object.__setattr__(self, "frozen_weight", W)
        object.__setattr__(self, "mode", AdapterMode(self.mode))
        if isinstance(self.transform, np.ndarray):
            A = np.asarray(self.transform, dtype=np.float64)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("dense transform must be square")
            # sign-constrained layers accept arbitrary matrices (stochastic ablations)
            if self.mode is AdapterMode.ORTHOGONAL and np.linalg.norm(A.T @ A - np.eye(len(A))) > 1e-8:
                raise ValueError("orthogonal mode requires an orthogonal transform")
            object.__setattr__(self, "transform", A)
        if _transform_dim(self.transform) != W.shape[1]:
            raise ValueError(
                f"transform dimension {_transform_dim(self.transform)} != weight input dim {W.shape[1]}"
            )

    @classmethod
    def from_params(cls, mode, params: SkewBlockParams, W) -> CuaLayer:
        mode = AdapterMode(mode)
        if mode is AdapterMode.UNCONSTRAINED:
            raise ValueError("unconstrained adapters hold a dense matrix, not Cayley parameters")
        if params.num_blocks == 1:
            transform = DenseOrthogonal.from_params(params)
        else:
            transform = assemble_bdu(params)
        return cls(mode, transform, W, params)

    @classmethod
    def identity(cls, mode, W, block_dim: int = 4) -> CuaLayer:
        mode = AdapterMode(mode)
        d_in = np.asarray(W).shape[1]
        if mode is AdapterMode.UNCONSTRAINED:
            return cls(mode, np.eye(d_in), W)
        return cls.from_params(mode, SkewBlockParams.zeros(d_in, block_dim), W)

    @property
    def d_in(self) -> int:
        return self.frozen_weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.frozen_weight.shape[0]

    @property
    def n_params(self) -> int:
        if self.params is not None:
            return self.params.n_params
        return int(np.asarray(self.transform).size)

    def checksum(self) -> str:
        return weight_checksum(self.frozen_weight)


def sign_correct(qx: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.abs(qx) * np.sign(x)


def _check_input(layer: CuaLayer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input length {x.shape[-1]} != adapter dimension {layer.d_in}")
    return x


def forward_sign_constrained(layer: CuaLayer, x: np.ndarray) -> np.ndarray:
    if layer.mode is not AdapterMode.SIGN_CONSTRAINED:
        raise ValueError(f"layer mode is {layer.mode.value}, expected sign_constrained")
    x = _check_input(layer, x)
    z = sign_correct(apply_transform(layer.transform, x), x)
    return z @ layer.frozen_weight.T


def forward_plain(layer: CuaLayer, x: np.ndarray) -> np.ndarray:
    if layer.mode is AdapterMode.SIGN_CONSTRAINED:
        raise ValueError("forward_plain does not apply to the sign-constrained regime")
    x = _check_input(layer, x)
    return apply_transform(layer.transform, x) @ layer.frozen_weight.T


def forward(layer: CuaLayer, x: np.ndarray) -> np.ndarray:
    if layer.mode is AdapterMode.SIGN_CONSTRAINED:
        return forward_sign_constrained(layer, x)
    return forward_plain(layer, x)


def adapter_backward(layer: CuaLayer, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``<upstream, forward(layer, x)>`` w.r.t. the transform parameters.

    ``x`` and ``upstream`` may be batched along leading axes; gradients are
    summed over the batch.  For Cayley-parameterised transforms the result is
    the flat parameter gradient; for a dense unconstrained transform it is the
    ``(d, d)`` matrix gradient.  The subgradient of ``|u|`` at 0 is 0.
    """
    x = _check_input(layer, x)
    g = np.asarray(upstream, dtype=np.float64)
    gz = g @ layer.frozen_weight
    if layer.mode is AdapterMode.SIGN_CONSTRAINED:
        u = apply_transform(layer.transform, x)
        gu = gz * np.sign(u) * np.sign(x)
    else:
        gu = gz
    gu2 = gu.reshape(-1, layer.d_in)
    x2 = x.reshape(-1, layer.d_in)

    if layer.params is None:
        if layer.mode is not AdapterMode.UNCONSTRAINED:
            raise ValueError("no trainable parameters attached to this layer")
        return gu2.T @ x2

    b, k = layer.params.block_dim, layer.params.num_blocks
    gq = np.einsum("nki,nkj->kij", gu2.reshape(-1, k, b), x2.reshape(-1, k, b))
    return cayley_gradient(layer.params, gq)


def make_ablation(kind, d: int, seed: int = 0) -> np.ndarray:
    kind = AblationKind(kind)
    if d < 1:
        raise ValueError("d must be positive")
    rng = np.random.default_rng(seed)
    if kind is AblationKind.IDENTITY:
        return np.eye(d)
    if kind is AblationKind.SIGNED_DIAGONAL:
        return np.diag(rng.choice([-1.0, 1.0], size=d))
    if kind is AblationKind.RANDOM_GAUSSIAN:
        return rng.standard_normal((d, d)) / np.sqrt(d)
    if kind is AblationKind.RANDOM_UNITARY:
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        signs = np.sign(np.diag(r))
        signs[signs == 0] = 1.0
        return q * signs
    perm = rng.permutation(d)
    P = np.zeros((d, d))
    P[np.arange(d), perm] = 1.0
    return P


def write_manifest(path, *, mode, block_dim: int, site: str, params_blob: str | None, extra=None) -> None:
    doc = {
        "mode": AdapterMode(mode).value,
        "block_dim": int(block_dim),
        "site": site,
        "params_blob": params_blob,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    missing = {"mode", "block_dim", "site", "params_blob"} - doc.keys()
    if missing:
        raise ValueError(f"manifest missing keys: {sorted(missing)}")
    doc["mode"] = AdapterMode(doc["mode"])
    return doc


def save_layer(layer: CuaLayer, directory, site: str) -> Path:
    """Write a layer's parameter blob and manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = site.replace("/", "_").replace(".", "_")
    blob = None
    if layer.params is not None:
        blob = f"{stem}.cua"
        save_params(layer.params, directory / blob)
    manifest = directory / f"{stem}.json"
    block_dim = layer.params.block_dim if layer.params is not None else layer.d_in
    write_manifest(manifest, mode=layer.mode, block_dim=block_dim, site=site, params_blob=blob)
    return manifest


def load_layer(manifest_path, W) -> CuaLayer:
    doc = read_manifest(manifest_path)
    if doc["params_blob"] is None:
        return CuaLayer.identity(doc["mode"], W, doc["block_dim"])
    params = load_params(Path(manifest_path).parent / doc["params_blob"])
    return CuaLayer.from_params(doc["mode"], params, W)
