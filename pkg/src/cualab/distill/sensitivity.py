"""Rank projection sites by how promising they are for an adapter."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..adapter import AdapterMode
from .model import AdapterSite, ToyLM, all_sites, insert_adapters


@dataclass(frozen=True)
class SensitivityScore:
    site: AdapterSite
    bdu_compatibility: float
    grad_norm_init: float
    energy_fraction: float
    position_penalty: float
    composite: float


def block_compatibility(W: np.ndarray, act_rms: np.ndarray, block_dim: int) -> float:
    """Share of the activation-weighted Gram energy lying in the diagonal blocks.

    With ``A = W diag(rms(x))`` and ``G = A^T A``, returns
    ``||blockdiag_b(G)||_F^2 / ||G||_F^2`` (0 for a zero operator).
    """
    A = np.asarray(W, dtype=np.float64) * np.asarray(act_rms, dtype=np.float64)[None, :]
    G = A.T @ A
    total = float(np.sum(G * G))
    if total == 0.0:
        return 0.0
    k = G.shape[0] // block_dim
    Gb = G.reshape(k, block_dim, k, block_dim)
    idx = np.arange(k)
    diag = Gb[idx, :, idx, :]
    return float(np.sum(diag * diag) / total)


def position_penalty(layer: int, num_layers: int, weight: float = 0.25) -> float:
    """Quadratic in the distance from the middle layer; ``weight`` at either end."""
    if num_layers <= 1:
        return 0.0
    u = 2.0 * layer / (num_layers - 1) - 1.0
    return weight * u * u


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def composite_scores(rho, grad, energy, penalty) -> np.ndarray:
    comps = np.stack([_minmax(np.asarray(c, dtype=np.float64)) for c in (rho, grad, energy)])
    return comps.mean(axis=0) - np.asarray(penalty, dtype=np.float64)


def sensitivity_rank(model: ToyLM, probe_inputs, probe_targets, block_dim: int = 4,
                     penalty_weight: float = 0.25) -> list[SensitivityScore]:
    """Score every projection site on a probe batch and sort best first.

    Ties on the composite score break by ascending site index.
    """
    sites = all_sites(model.cfg)
    probe = insert_adapters(model, sites, AdapterMode.SIGN_CONSTRAINED, block_dim)
    adapters = probe.adapters()
    acts: dict[AdapterSite, torch.Tensor] = {}
    hooks = []
    for site, mod in adapters.items():
        def hook(_m, inputs, _out, site=site):
            acts[site] = inputs[0].detach().to(torch.float64)
        hooks.append(mod.register_forward_hook(hook))
    for p in probe.parameters():
        p.grad = None
    try:
        logits = probe(probe_inputs)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), probe_targets.reshape(-1))
        loss.backward()
    finally:
        for h in hooks:
            h.remove()

    rho, grad, energy, pen = [], [], [], []
    for site in sites:
        mod = adapters[site]
        x = acts[site].reshape(-1, mod.adapter.dim)
        rms = torch.sqrt((x * x).mean(dim=0)).numpy()
        rho.append(block_compatibility(mod.weight.detach().numpy(), rms, block_dim))
        g = mod.adapter.theta.grad
        grad.append(0.0 if g is None else float(torch.linalg.vector_norm(g)))
        energy.append(float((x * x).sum(dim=1).mean()))
        pen.append(position_penalty(site.layer, model.cfg.num_layers, penalty_weight))
    energy_arr = np.asarray(energy)
    total = energy_arr.sum()
    energy_frac = energy_arr / total if total > 0 else np.zeros_like(energy_arr)
    comp = composite_scores(rho, grad, energy_frac, pen)

    scores = [SensitivityScore(s, rho[i], grad[i], float(energy_frac[i]), pen[i], float(comp[i]))
              for i, s in enumerate(sites)]
    return sorted(scores, key=lambda sc: (-sc.composite, sc.site.index))
