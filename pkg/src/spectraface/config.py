"""Optical constants for the two-layer skin reflectance model.

Everything that is not one of the two free biophysical parameters lives
here so alternative coefficient sets can be swapped in from a JSON file
without code changes. Defaults follow the widely used approximation
functions for healthy skin (Jacques' skin-optics compilation): a power-law
melanosome absorption, an exponential-plus-floor baseline absorption, a
power-law reduced scattering for the dermis, and whole-blood absorption
derived from tabulated haemoglobin molar extinction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class OpticalConstants:
    # melanosome absorption: scale * lambda_nm^-power, in cm^-1
    melanin_scale: float = 6.6e11
    melanin_power: float = 3.33
    # baseline skin absorption: floor + amp * exp(-(lambda - lambda0)/decay), cm^-1
    baseline_floor: float = 0.0244
    baseline_amp: float = 8.53
    baseline_lambda0: float = 154.0
    baseline_decay: float = 66.2
    # reduced scattering of the dermis: scale * (lambda/ref)^-power, cm^-1
    scattering_scale: float = 46.0
    scattering_ref_nm: float = 500.0
    scattering_power: float = 1.421
    # whole blood: haemoglobin concentration and oxygen saturation
    blood_oxygenation: float = 0.75
    hemoglobin_g_per_l: float = 150.0
    hemoglobin_molar_mass: float = 64500.0
    # epidermal path length (one traversal), cm
    epidermis_thickness_cm: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.blood_oxygenation <= 1.0:
            raise ValueError("blood oxygenation must be in [0, 1]")
        if self.epidermis_thickness_cm <= 0:
            raise ValueError("epidermal thickness must be positive")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path: str | Path) -> "OpticalConstants":
        d = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optical constant keys: {sorted(unknown)}")
        return cls(**d)
