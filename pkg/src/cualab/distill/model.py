"""Toy decoder-only language model with seven adaptable projections per block."""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..adapter import AdapterMode
from ..cayley import SkewBlockParams, cayley_gradient, cayley_transform, n_params_per_block, skew_stack
from ..qemu import emulate_slices

PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")


@dataclass(frozen=True)
class ToyLmConfig:
    num_layers: int = 2
    width: int = 32
    num_heads: int = 4
    vocab_size: int = 256
    context_length: int = 64
    mlp_width: int = 64

    def __post_init__(self):
        if self.width % self.num_heads:
            raise ValueError("width must be divisible by num_heads")
        if self.width % 4 or self.mlp_width % 4:
            raise ValueError("width and mlp_width must be divisible by 4")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if min(self.num_layers, self.context_length) < 1:
            raise ValueError("num_layers and context_length must be positive")


@dataclass(frozen=True, order=True)
class AdapterSite:
    layer: int
    projection: str

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ValueError(f"unknown projection {self.projection!r}")

    @property
    def name(self) -> str:
        return f"layers.{self.layer}.{self.projection}"

    @property
    def index(self) -> int:
        return self.layer * len(PROJECTIONS) + PROJECTIONS.index(self.projection)

    @classmethod
    def parse(cls, text: str) -> AdapterSite:
        parts = text.split(".")
        if len(parts) == 3 and parts[0] == "layers":
            return cls(int(parts[1]), parts[2])
        if len(parts) == 2:
            return cls(int(parts[0]), parts[1])
        raise ValueError(f"cannot parse site {text!r}; expected 'layers.<i>.<proj>'")


def all_sites(cfg: ToyLmConfig) -> list[AdapterSite]:
    return [AdapterSite(i, p) for i in range(cfg.num_layers) for p in PROJECTIONS]


class Block(nn.Module):
    def __init__(self, cfg: ToyLmConfig):
        super().__init__()
        d, h = cfg.width, cfg.mlp_width
        self.num_heads = cfg.num_heads
        self.attn_norm = nn.RMSNorm(d)
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.o_proj = nn.Linear(d, d, bias=False)
        self.mlp_norm = nn.RMSNorm(d)
        self.gate_proj = nn.Linear(d, h, bias=False)
        self.up_proj = nn.Linear(d, h, bias=False)
        self.down_proj = nn.Linear(h, d, bias=False)

    def forward(self, x):
        B, T, d = x.shape
        hd = d // self.num_heads
        a = self.attn_norm(x)
        q, k, v = (p(a).view(B, T, self.num_heads, hd).transpose(1, 2)
                   for p in (self.q_proj, self.k_proj, self.v_proj))
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.o_proj(att.transpose(1, 2).reshape(B, T, d))
        m = self.mlp_norm(x)
        return x + self.down_proj(F.silu(self.gate_proj(m)) * self.up_proj(m))


class ToyLM(nn.Module):
    def __init__(self, cfg: ToyLmConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.width)
        self.pos_emb = nn.Embedding(cfg.context_length, cfg.width)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.num_layers))
        self.norm = nn.RMSNorm(cfg.width)
        self.lm_head = nn.Linear(cfg.width, cfg.vocab_size, bias=False)

    def forward(self, idx):
        T = idx.shape[1]
        if T > self.cfg.context_length:
            raise ValueError(f"sequence length {T} exceeds context {self.cfg.context_length}")
        x = self.tok_emb(idx) + self.pos_emb(torch.arange(T, device=idx.device))
        for block in self.layers:
            x = block(x)
        return self.lm_head(self.norm(x))

    def projection(self, site: AdapterSite) -> nn.Module:
        return getattr(self.layers[site.layer], site.projection)

    def set_projection(self, site: AdapterSite, module: nn.Module) -> None:
        setattr(self.layers[site.layer], site.projection, module)

    def adapters(self) -> dict[AdapterSite, "AdaptedLinear"]:
        out = {}
        for site in all_sites(self.cfg):
            mod = self.projection(site)
            if isinstance(mod, AdaptedLinear):
                out[site] = mod
        return out


def build_toy_lm(cfg: ToyLmConfig | None = None, seed: int = 0) -> ToyLM:
    cfg = cfg or ToyLmConfig()
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = ToyLM(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def _backbone_tensors(model: nn.Module):
    for name, t in sorted(model.state_dict().items()):
        if ".adapter." in name:
            continue
        # wrapping a projection must not change the backbone identity
        yield name.replace(".base.", "."), t


def backbone_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in _backbone_tensors(model):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class _CayleyBlocks(torch.autograd.Function):
    """Cayley blocks from flat parameters, with the analytic numpy gradient."""

    @staticmethod
    def forward(ctx, theta, block_dim):
        values = theta.detach().cpu().numpy()
        params = SkewBlockParams(block_dim, values.size // n_params_per_block(block_dim), values)
        ctx.params = params
        return torch.from_numpy(cayley_transform(skew_stack(params)))

    @staticmethod
    def backward(ctx, grad_q):
        grad = cayley_gradient(ctx.params, grad_q.detach().cpu().numpy())
        return torch.from_numpy(grad), None


@dataclass
class Emulation:
    """Routes a sign-constrained adapter through the emulated quantum path."""
    depolarizing: float = 0.0
    p_readout: float = 0.0
    n_shots: int | None = None
    seed: int = 0
    calls: int = 0


class CuaAdapter(nn.Module):
    """Trainable transform on the input of a frozen projection (float64)."""

    def __init__(self, dim: int, mode=AdapterMode.SIGN_CONSTRAINED, block_dim: int = 4):
        super().__init__()
        self.mode = AdapterMode(mode)
        if dim % block_dim:
            raise ValueError(f"dim {dim} not divisible by block size {block_dim}")
        self.dim = dim
        self.block_dim = block_dim
        self.num_blocks = dim // block_dim
        if self.mode is AdapterMode.UNCONSTRAINED:
            eye = torch.eye(block_dim, dtype=torch.float64).expand(self.num_blocks, -1, -1)
            self.blocks = nn.Parameter(eye.clone())
            self.theta = None
        else:
            self.theta = nn.Parameter(torch.zeros(self.num_blocks * n_params_per_block(block_dim),
                                                  dtype=torch.float64))
            self.blocks = None
        self.register_buffer("fixed", None)
        self.emulation: Emulation | None = None

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def block_matrices(self) -> torch.Tensor:
        if self.theta is not None:
            return _CayleyBlocks.apply(self.theta, self.block_dim)
        return self.blocks

    def skew_params(self) -> SkewBlockParams:
        if self.theta is None:
            raise ValueError("unconstrained adapters have no Cayley parameters")
        return SkewBlockParams(self.block_dim, self.num_blocks, self.theta.detach().numpy())

    def load_skew_params(self, params: SkewBlockParams) -> None:
        if (params.block_dim, params.num_blocks) != (self.block_dim, self.num_blocks):
            raise ValueError("parameter shape does not match adapter")
        with torch.no_grad():
            self.theta.copy_(torch.from_numpy(params.values.copy()))

    def set_fixed(self, matrix) -> None:
        """Replace the learned transform by a fixed dense matrix (ablations); None restores it."""
        self.fixed = None if matrix is None else torch.as_tensor(np.asarray(matrix), dtype=torch.float64)

    def forward(self, x):
        x64 = x.to(torch.float64)
        if self.emulation is not None and self.fixed is None:
            return self._emulated(x64).to(x.dtype)
        if self.fixed is not None:
            u = x64 @ self.fixed.T
        else:
            blocks = self.block_matrices()
            xs = x64.reshape(*x64.shape[:-1], self.num_blocks, self.block_dim)
            u = torch.einsum("kij,...kj->...ki", blocks, xs).reshape(x64.shape)
        if self.mode is AdapterMode.SIGN_CONSTRAINED:
            u = u.abs() * torch.sign(x64)
        return u.to(x.dtype)

    @torch.no_grad()
    def _emulated(self, x64):
        if self.mode is not AdapterMode.SIGN_CONSTRAINED:
            raise ValueError("emulated execution needs a sign-constrained adapter")
        em = self.emulation
        blocks = self.block_matrices().detach().numpy()
        seed = [em.seed, em.calls]
        em.calls += 1
        z = emulate_slices(blocks, x64.reshape(-1, self.dim).numpy(), lam=em.depolarizing,
                           p_ro=em.p_readout, n_shots=em.n_shots, rng_seed=seed)
        return torch.from_numpy(z).reshape(x64.shape)


class AdaptedLinear(nn.Module):
    def __init__(self, base: nn.Linear, adapter: CuaAdapter):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.adapter = adapter

    @property
    def weight(self):
        return self.base.weight

    def forward(self, x):
        return self.base(self.adapter(x))


def insert_adapters(model: ToyLM, sites, mode=AdapterMode.SIGN_CONSTRAINED, block_dim: int = 4,
                    copy_model: bool = True) -> ToyLM:
    """Wrap each site's projection with an identity-initialised adapter; freeze the backbone."""
    adapted = copy.deepcopy(model) if copy_model else model
    for p in adapted.parameters():
        p.requires_grad_(False)
    for site in sites:
        if site.layer >= adapted.cfg.num_layers:
            raise ValueError(f"site {site.name} beyond model depth {adapted.cfg.num_layers}")
        base = adapted.projection(site)
        if isinstance(base, AdaptedLinear):
            raise ValueError(f"site {site.name} already adapted")
        adapter = CuaAdapter(base.in_features, mode, block_dim)
        adapted.set_projection(site, AdaptedLinear(base, adapter))
    return adapted


def adapter_parameters(model: ToyLM) -> list[nn.Parameter]:
    return [p for a in model.adapters().values() for p in a.adapter.parameters()]


def compress_svd(model: ToyLM, rank_fraction: float | None = None, *, rank: int | None = None) -> ToyLM:
    """Replace every projection by its best rank-ceil(f * min(dims)) approximation.

    ``rank`` fixes the kept rank directly instead (rank 1 is the sanity floor).
    """
    if (rank_fraction is None) == (rank is None):
        raise ValueError("give exactly one of rank_fraction or rank")
    if rank_fraction is not None and not 0.0 < rank_fraction < 1.0:
        raise ValueError("rank_fraction must lie in (0, 1)")
    if rank is not None and rank < 1:
        raise ValueError("rank must be >= 1")
    out = copy.deepcopy(model)
    with torch.no_grad():
        for site in all_sites(out.cfg):
            lin = out.projection(site)
            if isinstance(lin, AdaptedLinear):
                lin = lin.base
            W = lin.weight.detach().to(torch.float64)
            r = rank if rank is not None else max(1, math.ceil(rank_fraction * min(W.shape)))
            U, S, Vh = torch.linalg.svd(W, full_matrices=False)
            lin.weight.copy_(((U[:, :r] * S[:r]) @ Vh[:r]).to(lin.weight.dtype))
    return out


def set_emulation(model: ToyLM, emulation: Emulation | None) -> None:
    """Attach one emulation spec (fresh call counter per site) to every sign-constrained adapter."""
    for site, mod in model.adapters().items():
        if mod.adapter.mode is not AdapterMode.SIGN_CONSTRAINED:
            continue
        if emulation is None:
            mod.adapter.emulation = None
        else:
            mod.adapter.emulation = Emulation(emulation.depolarizing, emulation.p_readout,
                                              emulation.n_shots, emulation.seed * 1000 + site.index)
