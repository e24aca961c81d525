"""Command-line entry point: ``cualab {train,noise-sweep,entangle,pack,ablate}``."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .cayley import SkewBlockParams, assemble_bdu
from .circuit import (
    greedy_max_matching,
    heavy_hex_map,
    infidelity_table,
    packing_schedule,
    read_coupling_map,
    token_circuit_estimate,
)
from .entanglement import (
    Bipartition,
    SUMMARY_COLUMNS,
    brickwork_unitary,
    effective_bond_dim,
    haar_so4_bdu,
    operator_schmidt,
    stress_scale,
    summary_row,
)
from .noise import NoiseModel
from .qemu import shot_rmse

log = logging.getLogger("cualab")

HARNESS_DEFAULTS = {
    "seed": 0,
    "model": {},
    "corpus_path": None,
    "corpus_bytes": 1 << 20,
    "heldout_fraction": 0.1,
    "eval_tokens": 20_000,
    "teacher_steps": 1500,
    "teacher_lr": 3e-3,
    "teacher_batch": 32,
    "teacher_checkpoint": None,
    "rank_fraction": 0.75,
    "block_dim": 4,
    "mode": "sign_constrained",
    "sites": "all",
    "train": {},
}

DEFAULTS = {
    "train": {**HARNESS_DEFAULTS, "planted": False, "planted_scale": 1.0, "planted_train": {}},
    "noise-sweep": {
        "seed": 0,
        "noise": NoiseModel().to_dict(),
        "qubits": [2, 3, 4, 5, 6, 7, 8],
        "checkpoint": None,
        "corpus_path": None,
        "corpus_bytes": 1 << 20,
        "heldout_fraction": 0.1,
        "eval_tokens": 20_000,
        "lambdas": [0.0, 0.012, 0.05, 0.1, 0.25, 0.5, 1.0],
        "p_readout": 0.0,
        "n_shots": None,
        "shots": [1024, 2048, 4096, 8192, 16384],
        "shot_slices": 1000,
        "block_dim": 4,
    },
    "entangle": {
        "seed": 0,
        "objects": [
            {"kind": "identity", "blocks": 1024, "block_dim": 4},
            {"kind": "haar_bdu", "blocks": 1024, "block_dim": 4},
            {"kind": "stress", "blocks": 1024, "block_dim": 4, "scales": [0.0, 0.1, 1.0, 10.0]},
            {"kind": "brickwork", "n_qubits": 12, "depths": [1, 2, 3, 4, 5, 6], "cut": [10, 2]},
        ],
    },
    "pack": {
        "seed": 0,
        "coupling_map": None,
        "heavy_hex": [4, 6],
        "max_lanes": 64,
        "num_blocks": 1024,
        "num_tokens": 1,
    },
    "ablate": {**HARNESS_DEFAULTS, "sites": ["layers.1.up_proj"], "ablation_seeds": [0, 1, 2]},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _apply_set(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(command: str, args) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        unknown = set(doc) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg = _merge(cfg, doc)
    for a in args.set or []:
        _apply_set(cfg, a)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------- reports


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def write_report(path: Path, rows: list[dict], columns: list[str], cfg: dict, command: str, fmt: str) -> Path:
    prov = {"tool": "cualab", "version": __version__, "command": command,
            "config_sha256": config_hash(cfg), "seed": cfg.get("seed")}
    if fmt == "json":
        path = path.with_suffix(".json")
        doc = {"provenance": prov, "columns": columns, "rows": rows}
        path.write_text(json.dumps(doc, indent=2, default=float) + "\n")
        return path
    path = path.with_suffix(".csv")
    with open(path, "w", newline="") as fh:
        for k, v in prov.items():
            fh.write(f"# {k}: {v}\n")
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k)) for k in columns})
    return path


def read_report(path) -> tuple[dict, list[dict]]:
    """Parse a report written by ``write_report``; returns ``(provenance, rows)``."""
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text())
        return doc["provenance"], doc["rows"]
    prov, body = {}, []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition(": ")
            prov[k] = v
        else:
            body.append(line)
    return prov, list(csv.DictReader(body))


# ---------------------------------------------------------------- commands


def _harness(cfg: dict):
    from .distill.experiment import HarnessConfig

    keys = set(HarnessConfig.__dataclass_fields__)
    doc = {k: v for k, v in cfg.items() if k in keys}
    # one seed drives everything
    doc["train"] = {**doc.get("train", {}), "seed": cfg["seed"]}
    try:
        return HarnessConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid harness config: {exc}") from exc


def _prepare(cfg: dict):
    from .distill.experiment import load_data, make_teacher

    hc = _harness(cfg)
    data = load_data(hc)
    teacher = make_teacher(hc, data, cfg.get("teacher_checkpoint"))
    return hc, data, teacher


def cmd_train(cfg: dict, out: Path, fmt: str) -> list[Path]:
    from .distill.experiment import PLANTED_TRAIN, run_planted, save_checkpoint
    from .distill.model import compress_svd, insert_adapters
    from .distill.training import perplexity, train_adapters, write_history_csv

    hc, data, teacher = _prepare(cfg)
    sites = hc.resolve_sites()
    summary = {"teacher_ppl": perplexity(teacher, data.heldout)}
    written = []
    if cfg["planted"]:
        tc = replace(PLANTED_TRAIN, **{**cfg["planted_train"], "seed": cfg["seed"]})
        res = run_planted(teacher, data, sites, tc, hc.block_dim, cfg["planted_scale"], cfg["seed"])
        summary.update(planted_ppl=res["planted_ppl"], adapted_ppl=res["recovered_ppl"],
                       recovery_gap=res["relative_gap"])
        student, history = res["student"], res["history"]
    else:
        compressed = compress_svd(teacher, hc.rank_fraction)
        student = insert_adapters(compressed, sites, hc.mode, hc.block_dim)
        summary["compressed_ppl"] = perplexity(compressed, data.heldout)
        summary["identity_ppl"] = perplexity(student, data.heldout)
        history = train_adapters(student, teacher, data.train, hc.train).history
        summary["adapted_ppl"] = perplexity(student, data.heldout)
    save_checkpoint(student, out / "checkpoint")
    written.append(out / "checkpoint")
    write_history_csv(history, out / "metrics.csv")
    written.append(out / "metrics.csv")
    rows = [{"metric": k, "value": float(v)} for k, v in summary.items()]
    written.append(write_report(out / "summary", rows, ["metric", "value"], cfg, "train", fmt))
    return written


NOISE_COLUMNS = ["section", "n_qubits", "block", "sx", "cz", "lambda_1q", "lambda_2q", "lambda",
                 "eps_ro", "p_readout", "n_shots", "ppl", "rmse"]


def cmd_noise_sweep(cfg: dict, out: Path, fmt: str) -> list[Path]:
    try:
        noise = NoiseModel.from_dict(cfg["noise"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid noise model: {exc}") from exc
    rows = [{"section": "infidelity", **r} for r in infidelity_table(noise, cfg["qubits"])]

    if cfg["checkpoint"] is not None:
        from .distill.experiment import load_checkpoint, load_data, noise_phase_sweep

        ckpt = Path(cfg["checkpoint"])
        if not (ckpt / "checkpoint.json").exists():
            raise FileNotFoundError(f"missing checkpoint: {ckpt}")
        model = load_checkpoint(ckpt)
        data = load_data(_harness(cfg))
        ppls = noise_phase_sweep(model, data.heldout, cfg["lambdas"], p_readout=cfg["p_readout"],
                                 n_shots=cfg["n_shots"], seed=cfg["seed"])
        rows += [{"section": "ppl", "lambda": float(lam), "p_readout": cfg["p_readout"],
                  "n_shots": cfg["n_shots"], "ppl": p} for lam, p in zip(cfg["lambdas"], ppls)]

    for n in cfg["shots"] or []:
        rows.append({"section": "shots", "n_shots": n, "block": cfg["block_dim"],
                     "rmse": shot_rmse(n, cfg["shot_slices"], cfg["block_dim"], cfg["seed"])})
    return [write_report(out / "noise_sweep", rows, NOISE_COLUMNS, cfg, "noise-sweep", fmt)]


ENTANGLE_COLUMNS = SUMMARY_COLUMNS + ["chi_eff", "entropy_bits"]


def _entangle_rows(name: str, U, cuts) -> list[dict]:
    rows = []
    for cut in cuts:
        spec = operator_schmidt(U, cut)
        rows.append({**summary_row(name, cut, spec), "chi_eff": effective_bond_dim(spec),
                     "entropy_bits": spec.entropy_bits})
    return rows


def _bdu_cuts(blocks: int, block_dim: int) -> list[Bipartition]:
    cuts = [Bipartition(blocks, block_dim)]
    dim = blocks * block_dim
    n = dim.bit_length() - 1
    if 1 << n == dim and n % 2 == 0:
        cuts.append(Bipartition.qubits(n // 2, n // 2))
    return cuts


def _operator_rows(obj: dict, i: int, seed: int) -> list[dict]:
    kind = obj.get("kind")
    if kind == "brickwork":
        n = int(obj.get("n_qubits", 12))
        cut = Bipartition.qubits(*obj.get("cut", [n - 2, 2]))
        return [row for depth in obj.get("depths", [1, 2, 3, 4, 5, 6])
                for row in _entangle_rows(f"brickwork:depth={depth}",
                                          brickwork_unitary(n, int(depth), seed=[seed, i]), [cut])]
    if kind == "checkpoint":
        from .distill.experiment import load_checkpoint
        from .distill.model import AdapterSite

        model = load_checkpoint(obj["path"])
        params = model.adapters()[AdapterSite.parse(obj["site"])].adapter.skew_params()
        cuts = _bdu_cuts(params.num_blocks, params.block_dim)
        return _entangle_rows(f"checkpoint:{obj['site']}", assemble_bdu(params).to_dense(), cuts)

    blocks, b = int(obj.get("blocks", 1024)), int(obj.get("block_dim", 4))
    cuts = _bdu_cuts(blocks, b)
    if kind == "identity":
        return _entangle_rows("identity", np.eye(blocks * b), cuts)
    if kind == "haar_bdu":
        if b != 4:
            raise ConfigError("haar_bdu supports block_dim 4 only")
        return _entangle_rows("haar_so4_bdu", haar_so4_bdu(blocks, seed=[seed, i]).to_dense(), cuts)
    if kind == "stress":
        params = SkewBlockParams.random(blocks * b, b, 1.0, seed=[seed, i])
        return [row for s in obj.get("scales", [0.0, 1.0])
                for row in _entangle_rows(f"stress:s={s}", stress_scale(params, float(s)).to_dense(), cuts[:1])]
    raise ConfigError(f"unknown operator kind {kind!r} in objects[{i}]")


def cmd_entangle(cfg: dict, out: Path, fmt: str) -> list[Path]:
    rows = []
    for i, obj in enumerate(cfg["objects"]):
        if not isinstance(obj, dict):
            raise ConfigError(f"objects[{i}] must be a mapping")
        rows += _operator_rows(obj, i, cfg["seed"])
    return [write_report(out / "entangle", rows, ENTANGLE_COLUMNS, cfg, "entangle", fmt)]


PACK_COLUMNS = ["metric", "value"]


def cmd_pack(cfg: dict, out: Path, fmt: str) -> list[Path]:
    if cfg["coupling_map"] is not None:
        try:
            cmap = read_coupling_map(cfg["coupling_map"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"unreadable coupling map: {exc}") from exc
        source = str(cfg["coupling_map"])
    else:
        rows_, cols_ = cfg["heavy_hex"]
        cmap = heavy_hex_map(int(rows_), int(cols_))
        source = f"heavy_hex({rows_},{cols_})"
    lanes = greedy_max_matching(cmap, int(cfg["max_lanes"]))
    n_blocks = int(cfg["num_blocks"])
    if lanes:
        per_token = packing_schedule(n_blocks, len(lanes)).num_circuits
    else:
        per_token = 0
    summary = [
        {"metric": "map", "value": source},
        {"metric": "num_qubits", "value": cmap.num_qubits},
        {"metric": "num_edges", "value": len(cmap.edges)},
        {"metric": "lanes", "value": len(lanes)},
        {"metric": "num_blocks", "value": n_blocks},
        {"metric": "circuits_per_token", "value": per_token},
        {"metric": "num_tokens", "value": int(cfg["num_tokens"])},
        {"metric": "total_circuits", "value": token_circuit_estimate(int(cfg["num_tokens"]), per_token)},
    ]
    lane_rows = [{"lane": i, "qubit_a": u, "qubit_b": v} for i, (u, v) in enumerate(lanes)]
    return [write_report(out / "pack", summary, PACK_COLUMNS, cfg, "pack", fmt),
            write_report(out / "lanes", lane_rows, ["lane", "qubit_a", "qubit_b"], cfg, "pack", fmt)]


def cmd_ablate(cfg: dict, out: Path, fmt: str) -> list[Path]:
    from .distill.experiment import ablation_study
    from .distill.model import compress_svd

    hc, data, teacher = _prepare(cfg)
    compressed = compress_svd(teacher, hc.rank_fraction)
    table = ablation_study(compressed, teacher, data, hc.resolve_sites(), hc.train, hc.block_dim,
                           tuple(cfg["ablation_seeds"]))
    rows = [{"kind": kind, "ppl_mean": float(np.mean(v)), "ppl_std": float(np.std(v)), "n": len(v)}
            for kind, v in table.items()]
    return [write_report(out / "ablation", rows, ["kind", "ppl_mean", "ppl_std", "n"], cfg, "ablate", fmt)]


COMMANDS = {
    "train": cmd_train,
    "noise-sweep": cmd_noise_sweep,
    "entangle": cmd_entangle,
    "pack": cmd_pack,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cualab", description="Cayley unitary adapter experiments")
    parser.add_argument("--version", action="version", version=f"cualab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path, YAML value)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .distill.training import FrozenWeightViolation, TrainingDiverged

    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
        written = COMMANDS[args.command](cfg, out, args.format)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"cualab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FrozenWeightViolation) as exc:
        print(f"cualab {args.command}: aborted: {exc}", file=sys.stderr)
        return 3
    for p in written:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
