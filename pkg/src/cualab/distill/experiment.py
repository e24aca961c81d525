"""End-to-end desk-scale experiments built from the harness pieces."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..adapter import STOCHASTIC_ABLATIONS, AblationKind, AdapterMode, make_ablation
from ..cayley import SkewBlockParams, assemble_bdu, load_params, save_params
from . import corpus
from .model import (
    AdapterSite,
    Emulation,
    ToyLM,
    ToyLmConfig,
    all_sites,
    build_toy_lm,
    compress_svd,
    insert_adapters,
    set_emulation,
)
from .training import TrainConfig, perplexity, pretrain, train_adapters

log = logging.getLogger(__name__)

# desk-scale adapter schedule; an lr of 1e-4 barely moves a 300-step run
DESK_TRAIN = TrainConfig(learning_rate=1e-2, warmup_steps=10, epochs=1, steps_per_epoch=300, batch_size=16)
PLANTED_TRAIN = replace(DESK_TRAIN, learning_rate=5e-2, steps_per_epoch=600)


@dataclass(frozen=True)
class HarnessConfig:
    model: ToyLmConfig = field(default_factory=ToyLmConfig)
    seed: int = 0
    corpus_path: str | None = None
    corpus_bytes: int = 1 << 20
    heldout_fraction: float = 0.1
    eval_tokens: int = 20_000
    teacher_steps: int = 1500
    teacher_lr: float = 3e-3
    teacher_batch: int = 32
    rank_fraction: float = 0.75
    block_dim: int = 4
    mode: str = AdapterMode.SIGN_CONSTRAINED.value
    sites: tuple[str, ...] = ("all",)
    train: TrainConfig = DESK_TRAIN

    def resolve_sites(self) -> list[AdapterSite]:
        if tuple(self.sites) == ("all",):
            return all_sites(self.model)
        return [AdapterSite.parse(s) for s in self.sites]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = list(self.sites)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> HarnessConfig:
        doc = dict(doc)
        if "model" in doc:
            doc["model"] = ToyLmConfig(**doc["model"])
        if "train" in doc:
            doc["train"] = replace(DESK_TRAIN, **doc["train"])
        if "sites" in doc:
            sites = doc["sites"]
            doc["sites"] = (sites,) if isinstance(sites, str) else tuple(sites)
        return cls(**doc)


@dataclass
class Dataset:
    train: np.ndarray
    heldout: np.ndarray


def load_data(cfg: HarnessConfig) -> Dataset:
    data = corpus.load_corpus(cfg.corpus_path, cfg.corpus_bytes, cfg.seed)
    train, held = corpus.split(corpus.to_tokens(data), cfg.heldout_fraction)
    if cfg.eval_tokens:
        held = held[:cfg.eval_tokens]
    return Dataset(train, held)


def make_teacher(cfg: HarnessConfig, data: Dataset, checkpoint=None) -> ToyLM:
    """Build and pretrain the teacher, or load it from ``checkpoint`` when that file exists."""
    model = build_toy_lm(cfg.model, cfg.seed)
    if checkpoint is not None and Path(checkpoint).exists():
        model.load_state_dict(torch.load(checkpoint, weights_only=True))
        model.eval()
        return model
    pretrain(model, data.train, cfg.teacher_steps, cfg.teacher_lr, cfg.teacher_batch, cfg.seed)
    if checkpoint is not None:
        Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), checkpoint)
    return model


def plant_rotation(model: ToyLM, sites, block_dim: int = 4, scale: float = 1.0, seed: int = 0):
    """Copy ``model`` with each site's weight replaced by ``W R`` for a random block rotation ``R``.

    ``R`` is itself a Cayley image, so ``R^{-1} = R^T`` is reachable by an
    orthogonal adapter.  Returns the student and the rotations per site.
    """
    student = copy.deepcopy(model)
    rotations = {}
    with torch.no_grad():
        for i, site in enumerate(sites):
            lin = student.projection(site)
            params = SkewBlockParams.random(lin.in_features, block_dim, scale, seed=[seed, i])
            R = assemble_bdu(params).to_dense()
            rotations[site] = R
            lin.weight.copy_(lin.weight @ torch.from_numpy(R).to(lin.weight.dtype))
    return student, rotations


def run_planted(teacher: ToyLM, data: Dataset, sites, cfg: TrainConfig = PLANTED_TRAIN,
                block_dim: int = 4, scale: float = 1.0, seed: int = 0) -> dict:
    planted, _ = plant_rotation(teacher, sites, block_dim, scale, seed)
    student = insert_adapters(planted, sites, AdapterMode.ORTHOGONAL, block_dim)
    result = train_adapters(student, teacher, data.train, cfg)
    ppl_teacher = perplexity(teacher, data.heldout)
    ppl_recovered = perplexity(student, data.heldout)
    return {
        "teacher_ppl": ppl_teacher,
        "planted_ppl": perplexity(planted, data.heldout),
        "recovered_ppl": ppl_recovered,
        "relative_gap": ppl_recovered / ppl_teacher - 1.0,
        "history": result.history,
        "student": student,
    }


def ablation_study(compressed: ToyLM, teacher: ToyLM, data: Dataset, sites,
                   cfg: TrainConfig = DESK_TRAIN, block_dim: int = 4, seeds=(0, 1, 2)) -> dict:
    """Learned sign-constrained adapter versus fixed baselines at the same sites."""
    adapted = insert_adapters(compressed, sites, AdapterMode.SIGN_CONSTRAINED, block_dim)
    rows = {"compressed": [perplexity(compressed, data.heldout)]}
    for kind in (AblationKind.IDENTITY, AblationKind.SIGNED_DIAGONAL, *STOCHASTIC_ABLATIONS):
        ppls = []
        for s in seeds if kind is not AblationKind.IDENTITY else seeds[:1]:
            for j, site in enumerate(sites):
                a = adapted.adapters()[site].adapter
                a.set_fixed(make_ablation(kind, a.dim, seed=1000 * s + j))
            ppls.append(perplexity(adapted, data.heldout))
        rows[kind.value] = ppls
    for site in sites:
        adapted.adapters()[site].adapter.set_fixed(None)
    train_adapters(adapted, teacher, data.train, cfg)
    rows["learned_cayley"] = [perplexity(adapted, data.heldout)]
    return rows


def noise_phase_sweep(model: ToyLM, tokens: np.ndarray, noise_grid, *, p_readout: float = 0.0,
                      n_shots: int | None = None, seed: int = 0) -> list[float]:
    """Held-out PPL with every sign-constrained adapter run through the emulated QPU path.

    ``noise_grid`` lists aggregated depolarising parameters; readout error and
    shot count are held fixed across the sweep (infinite shots by default).
    """
    out = []
    try:
        for lam in noise_grid:
            set_emulation(model, Emulation(float(lam), p_readout, n_shots, seed))
            out.append(perplexity(model, tokens))
    finally:
        set_emulation(model, None)
    return out


CHECKPOINT_MANIFEST = "checkpoint.json"


def save_checkpoint(model: ToyLM, directory) -> Path:
    """Backbone state dict, one CUA1 blob per Cayley adapter, and a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v for k, v in model.state_dict().items() if not k.endswith(".adapter.theta")}
    torch.save(state, directory / "backbone.pt")
    sites = []
    for site, mod in sorted(model.adapters().items()):
        a = mod.adapter
        blob = None
        if a.theta is not None:
            blob = f"{site.name.replace('.', '_')}.cua"
            save_params(a.skew_params(), directory / blob)
        sites.append({"site": site.name, "mode": a.mode.value, "block_dim": a.block_dim, "params_blob": blob})
    doc = {"model": asdict(model.cfg), "adapters": sites}
    path = directory / CHECKPOINT_MANIFEST
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_checkpoint(directory) -> ToyLM:
    directory = Path(directory)
    path = directory / CHECKPOINT_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    doc = json.loads(path.read_text())
    model = build_toy_lm(ToyLmConfig(**doc["model"]))
    for entry in doc["adapters"]:
        model = insert_adapters(model, [AdapterSite.parse(entry["site"])], entry["mode"],
                                entry["block_dim"], copy_model=False)
    model.load_state_dict(torch.load(directory / "backbone.pt", weights_only=True), strict=False)
    adapters = model.adapters()
    for entry in doc["adapters"]:
        if entry["params_blob"] is not None:
            adapters[AdapterSite.parse(entry["site"])].adapter.load_skew_params(
                load_params(directory / entry["params_blob"]))
    model.eval()
    return model
