"""Deterministic byte-level training text.

The text is generated from a small seeded grammar (short declarative
sentences plus arithmetic facts), so it is reproducible bit-for-bit and has
enough structure for a tiny model to learn.
"""
from __future__ import annotations

import random
from pathlib import Path

import numpy as np

_ADJ = ["quiet", "bright", "small", "heavy", "green", "old", "quick", "cold", "round", "tall",
        "dark", "soft", "warm", "young", "wide"]
_NOUN = ["river", "stone", "garden", "window", "teacher", "student", "engine", "bridge", "forest",
         "market", "letter", "signal", "circle", "number", "planet", "valley"]
_VERB = ["finds", "moves", "holds", "counts", "follows", "watches", "turns", "carries", "measures",
         "builds", "opens", "crosses"]
_PLACE = ["near the sea", "in the morning", "under the hill", "at the station", "by the door",
          "after the rain", "in the city", "on the table"]


def _sentence(rng: random.Random) -> str:
    kind = rng.random()
    if kind < 0.25:
        a, b = rng.randint(1, 12), rng.randint(1, 12)
        return f"{a} x {b} = {a * b}."
    if kind < 0.4:
        a, b = rng.randint(1, 50), rng.randint(1, 50)
        return f"{a} + {b} = {a + b}."
    s = f"the {rng.choice(_ADJ)} {rng.choice(_NOUN)} {rng.choice(_VERB)} the {rng.choice(_NOUN)}"
    if rng.random() < 0.5:
        s += f" {rng.choice(_PLACE)}"
    return s + "."


def generate_text(n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    rng = random.Random(seed)
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        line = " ".join(_sentence(rng) for _ in range(rng.randint(2, 5))) + "\n"
        parts.append(line)
        size += len(line)
    return "".join(parts).encode("ascii")[:n_bytes]


def to_tokens(data: bytes) -> np.ndarray:
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def split(tokens: np.ndarray, heldout_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * (1.0 - heldout_fraction))
    return tokens[:cut], tokens[cut:]


def load_corpus(path=None, n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    if path is None:
        return generate_text(n_bytes, seed)
    return Path(path).read_bytes()
