"""Hardware noise parameters shared by the emulator and the circuit planner."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import yaml

# ibm_basquecountry (Heron r2) calibration
DEFAULT_P_SX = 2.45e-4
DEFAULT_P_CZ = 1.78e-3
DEFAULT_P_READOUT = 6.8e-3
DEFAULT_SHOTS = 8192


@dataclass(frozen=True)
class NoiseModel:
    p_sx: float = DEFAULT_P_SX
    p_cz: float = DEFAULT_P_CZ
    p_readout: float = DEFAULT_P_READOUT
    n_shots: int = DEFAULT_SHOTS

    def __post_init__(self):
        for name in ("p_sx", "p_cz", "p_readout"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if int(self.n_shots) != self.n_shots or self.n_shots < 1:
            raise ValueError(f"n_shots must be a positive integer, got {self.n_shots}")
        object.__setattr__(self, "n_shots", int(self.n_shots))

    @classmethod
    def noiseless(cls, n_shots: int = DEFAULT_SHOTS) -> NoiseModel:
        return cls(0.0, 0.0, 0.0, n_shots)

    def with_shots(self, n_shots: int) -> NoiseModel:
        return replace(self, n_shots=n_shots)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> NoiseModel:
        unknown = set(doc) - {"p_sx", "p_cz", "p_readout", "n_shots"}
        if unknown:
            raise ValueError(f"unknown noise model keys: {sorted(unknown)}")
        return cls(**doc)


def load_noise_model(path) -> NoiseModel:
    doc = yaml.safe_load(Path(path).read_text()) or {}
    return NoiseModel.from_dict(doc)


def save_noise_model(noise: NoiseModel, path) -> None:
    Path(path).write_text(json.dumps(noise.to_dict(), indent=2) + "\n")
