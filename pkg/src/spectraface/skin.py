"""Two-layer biophysical diffuse skin reflectance and its 2D lookup table.

The epidermis transmits light twice through a melanin-absorbing layer
(Lambert-Beer); the dermis reflects it back following semi-infinite
Kubelka-Munk theory with blood-dominated absorption:

    T_epi(f_mel)    = exp(-(f_mel mu_mel + (1 - f_mel) mu_base) d_epi)
    R_derm(f_blood) : q = K/S,  R = 1 + q - sqrt(q^2 + 2 q)
    r(f_mel, f_blood) = T_epi^2 * R_derm

with f_mel in [1.3%, 43%] and f_blood in [2%, 7%]. The model is sampled on
a dense (melanin, blood) grid once, stored as a float32 table and queried
with differentiable bilinear interpolation in normalised [0, 1]^2
coordinates.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import OpticalConstants
from .spectra import WavelengthGrid, read_table, resample

MEL_RANGE = (0.013, 0.43)
BLOOD_RANGE = (0.02, 0.07)

LUT_MAGIC = b"SFSKLUT1"


def mel_fraction(m):
    """Normalised melanin coordinate in [0, 1] -> volume fraction."""
    return MEL_RANGE[0] + np.asarray(m, dtype=float) * (MEL_RANGE[1] - MEL_RANGE[0])


def blood_fraction(h):
    return BLOOD_RANGE[0] + np.asarray(h, dtype=float) * (BLOOD_RANGE[1] - BLOOD_RANGE[0])


def mel_coord(f_mel):
    return (np.asarray(f_mel, dtype=float) - MEL_RANGE[0]) / (MEL_RANGE[1] - MEL_RANGE[0])


def blood_coord(f_blood):
    return (np.asarray(f_blood, dtype=float) - BLOOD_RANGE[0]) / (BLOOD_RANGE[1] - BLOOD_RANGE[0])


class SkinOptics:
    """Wavelength-resolved absorption/scattering coefficients on a grid."""

    def __init__(self, constants: OpticalConstants, grid: WavelengthGrid,
                 extinction_oxy: np.ndarray, extinction_deoxy: np.ndarray):
        self.constants = constants
        self.grid = grid
        lam = grid.wavelengths()
        c = constants
        self.mu_melanin = c.melanin_scale * lam ** -c.melanin_power
        self.mu_baseline = c.baseline_floor + c.baseline_amp * np.exp(
            -(lam - c.baseline_lambda0) / c.baseline_decay
        )
        # whole-blood absorption from molar extinction (ln 10 converts from
        # decadic extinction), oxy/deoxy mixed by the oxygen saturation
        molar = c.hemoglobin_g_per_l / c.hemoglobin_molar_mass
        mix = c.blood_oxygenation * extinction_oxy + (1.0 - c.blood_oxygenation) * extinction_deoxy
        self.mu_blood = np.log(10.0) * molar * mix
        self.mu_scatter = c.scattering_scale * (lam / c.scattering_ref_nm) ** -c.scattering_power
        if np.any(self.mu_scatter <= 0):
            raise ValueError("reduced scattering must be positive on the grid")

    @classmethod
    def from_data_dir(cls, constants: OpticalConstants, grid: WavelengthGrid,
                      data_dir: str | Path) -> "SkinOptics":
        table = read_table(Path(data_dir) / "hemoglobin.csv")
        oxy = resample(table, "oxy", grid).values
        deoxy = resample(table, "deoxy", grid).values
        return cls(constants, grid, oxy, deoxy)

    def epidermis_transmittance(self, f_mel) -> np.ndarray:
        """Single-pass epidermal transmission, Lambert-Beer. f_mel may be an array."""
        f = np.asarray(f_mel, dtype=float)
        if np.any(f < MEL_RANGE[0] - 1e-12) or np.any(f > MEL_RANGE[1] + 1e-12):
            raise ValueError(f"f_mel outside {MEL_RANGE}")
        f = f[..., None]
        mu = f * self.mu_melanin + (1.0 - f) * self.mu_baseline
        return np.exp(-mu * self.constants.epidermis_thickness_cm)

    def dermis_reflectance(self, f_blood) -> np.ndarray:
        """Semi-infinite Kubelka-Munk reflectance of the blood-bearing dermis."""
        f = np.asarray(f_blood, dtype=float)
        if np.any(f < BLOOD_RANGE[0] - 1e-12) or np.any(f > BLOOD_RANGE[1] + 1e-12):
            raise ValueError(f"f_blood outside {BLOOD_RANGE}")
        f = f[..., None]
        k = f * self.mu_blood + (1.0 - f) * self.mu_baseline
        q = k / self.mu_scatter
        return 1.0 + q - np.sqrt(q * q + 2.0 * q)

    def diffuse_reflectance(self, f_mel, f_blood) -> np.ndarray:
        """Total diffuse spectral reflectance: squared transmission times
        dermal reflectance (light crosses the epidermis twice)."""
        t = self.epidermis_transmittance(f_mel)
        return t * t * self.dermis_reflectance(f_blood)


@dataclass
class SkinLut:
    """Dense table of diffuse reflectance over normalised (m, h) in [0, 1]^2."""

    table: np.ndarray  # (G, G, D) float32; axis 0 = melanin, axis 1 = blood
    grid: WavelengthGrid
    mel_range: tuple[float, float] = MEL_RANGE
    blood_range: tuple[float, float] = BLOOD_RANGE

    @property
    def size(self) -> int:
        return self.table.shape[0]

    def sample(self, m, h) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Bilinear reflectance lookup with analytic partials.

        m, h are scalars or equal-shaped arrays in [0, 1]; returns
        (r, dr_dm, dr_dh) with shape (..., D). Partials are the bilinear
        interpolant's own derivatives (piecewise constant per cell per axis).
        """
        m = np.asarray(m, dtype=float)
        h = np.asarray(h, dtype=float)
        if np.any(m < 0) or np.any(m > 1) or np.any(h < 0) or np.any(h > 1):
            raise ValueError("LUT coordinates must lie in [0, 1]")
        g = self.size
        u = m * (g - 1)
        v = h * (g - 1)
        i0 = np.minimum(u.astype(int), g - 2)
        j0 = np.minimum(v.astype(int), g - 2)
        fu = (u - i0)[..., None]
        fv = (v - j0)[..., None]
        t00 = self.table[i0, j0].astype(float)
        t10 = self.table[i0 + 1, j0].astype(float)
        t01 = self.table[i0, j0 + 1].astype(float)
        t11 = self.table[i0 + 1, j0 + 1].astype(float)
        r = (
            (1 - fu) * (1 - fv) * t00
            + fu * (1 - fv) * t10
            + (1 - fu) * fv * t01
            + fu * fv * t11
        )
        dr_dm = ((1 - fv) * (t10 - t00) + fv * (t11 - t01)) * (g - 1)
        dr_dh = ((1 - fu) * (t01 - t00) + fu * (t11 - t10)) * (g - 1)
        return r, dr_dm, dr_dh

    def save(self, path: str | Path):
        """Binary layout: magic, JSON header line, row-major float32 payload."""
        header = {
            "size": self.size,
            "bands": self.table.shape[2],
            "grid": {
                "lambda_min": self.grid.lambda_min,
                "lambda_max": self.grid.lambda_max,
                "step": self.grid.step,
            },
            "mel_range": list(self.mel_range),
            "blood_range": list(self.blood_range),
        }
        blob = json.dumps(header).encode() + b"\n"
        with open(path, "wb") as f:
            f.write(LUT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(np.ascontiguousarray(self.table, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SkinLut":
        with open(path, "rb") as f:
            if f.read(len(LUT_MAGIC)) != LUT_MAGIC:
                raise ValueError(f"{path} is not a skin LUT file")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            g, d = header["size"], header["bands"]
            payload = f.read(g * g * d * 4)
        table = np.frombuffer(payload, dtype="<f4").reshape(g, g, d)
        return cls(
            table=table.copy(),
            grid=WavelengthGrid(**header["grid"]),
            mel_range=tuple(header["mel_range"]),
            blood_range=tuple(header["blood_range"]),
        )

    def node_csv(self, i: int, j: int) -> str:
        lam = self.grid.wavelengths()
        lines = ["wavelength,reflectance"]
        lines += [f"{l:g},{v:.8f}" for l, v in zip(lam, self.table[i, j])]
        return "\n".join(lines) + "\n"


def build_skin_lut(optics: SkinOptics, size: int = 256) -> SkinLut:
    """Evaluate the two-layer model on a size x size grid of (m, h).

    The two layers factor, so the table is an outer product of G epidermal
    transmissions and G dermal reflectances per band.
    """
    if size < 2:
        raise ValueError("LUT needs at least 2 nodes per axis")
    coords = np.linspace(0.0, 1.0, size)
    t2 = optics.epidermis_transmittance(mel_fraction(coords)) ** 2  # (G, D)
    rd = optics.dermis_reflectance(blood_fraction(coords))          # (G, D)
    table = t2[:, None, :] * rd[None, :, :]
    return SkinLut(table=table.astype(np.float32), grid=optics.grid)
