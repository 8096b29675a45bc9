"""Physical illuminant model: CIE A, daylight D(t), fluorescents F1-F12.

The scene illuminant is a convex combination of 14 standard spectra

    e = wA * eA + wD * eD(t) + sum_k wFk * eFk,

with every basis spectrum rescaled to unit sum so the combination has unit
sum too. This pins the intrinsic intensity scale between illuminant and
shading. Daylight eD(t) follows the CIE reconstruction from the S0/S1/S2
components with the two-branch chromaticity polynomial (CIE 15:2004); the
temperature parameter t in [1, 22] maps affinely to 4000-25000 K.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectra import Spectrum, WavelengthGrid, read_table, resample

N_ILLUMINANTS = 14  # A, D, F1..F12
T_MIN, T_MAX = 1.0, 22.0
UNIT_SUM_TOL = 1e-9


def cct_from_t(t: float) -> float:
    """Affine map of the temperature parameter onto 4000-25000 K."""
    return 1000.0 * t + 3000.0


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    """Stable softmax: positive weights summing to one."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("illuminant logits must be finite")
    z = logits - logits.max()
    w = np.exp(z)
    return w / w.sum()


def softmax_jacobian(weights: np.ndarray) -> np.ndarray:
    """d softmax / d logits = diag(w) - w w^T (depends only on the weights)."""
    w = np.asarray(weights, dtype=float)
    return np.diag(w) - np.outer(w, w)


def daylight_chromaticity(cct: float) -> tuple[float, float]:
    """CIE daylight chromaticity polynomial, branches split at 7000 K."""
    if not 4000.0 <= cct <= 25000.0:
        raise ValueError(f"CCT {cct} K outside the 4000-25000 K daylight range")
    s = 1000.0 / cct
    if cct <= 7000.0:
        x = ((-4.6070 * s + 2.9678) * s + 0.09911) * s + 0.244063
    else:
        x = ((-2.0064 * s + 1.9018) * s + 0.24748) * s + 0.237040
    y = (-3.0 * x + 2.870) * x - 0.275
    return x, y


def _daylight_mixing(cct: float) -> tuple[float, float, float, float]:
    """Returns (M1, M2, dM1/dCCT, dM2/dCCT) for the S1/S2 weights."""
    x, y = daylight_chromaticity(cct)
    s = 1000.0 / cct
    if cct <= 7000.0:
        dx_ds = (3.0 * -4.6070 * s + 2.0 * 2.9678) * s + 0.09911
    else:
        dx_ds = (3.0 * -2.0064 * s + 2.0 * 1.9018) * s + 0.24748
    dx = dx_ds * (-1000.0 / cct**2)
    dy_dx = -6.0 * x + 2.870

    m = 0.0241 + 0.2562 * x - 0.7341 * y
    dm_dx = 0.2562 - 0.7341 * dy_dx
    n1 = -1.3515 - 1.7703 * x + 5.9114 * y
    dn1_dx = -1.7703 + 5.9114 * dy_dx
    n2 = 0.0300 - 31.4424 * x + 30.0717 * y
    dn2_dx = -31.4424 + 30.0717 * dy_dx

    m1 = n1 / m
    m2 = n2 / m
    dm1 = (dn1_dx * m - n1 * dm_dx) / m**2 * dx
    dm2 = (dn2_dx * m - n2 * dm_dx) / m**2 * dx
    return m1, m2, dm1, dm2


@dataclass
class IlluminantBank:
    """Basis spectra for the illuminant model, pre-normalised to unit sum
    (daylight components S0/S1/S2 stay raw; eD(t) is normalised on the fly)."""

    grid: WavelengthGrid
    e_a: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    e_f: np.ndarray  # (D, 12)

    def __post_init__(self):
        for name in ("e_a",):
            v = getattr(self, name)
            if abs(v.sum() - 1.0) > UNIT_SUM_TOL:
                raise ValueError(f"{name} is not unit-sum")
        sums = self.e_f.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > UNIT_SUM_TOL):
            raise ValueError("fluorescent spectra are not unit-sum")

    @classmethod
    def from_data_dir(cls, grid: WavelengthGrid, data_dir: str | Path) -> "IlluminantBank":
        data_dir = Path(data_dir)
        a = resample(read_table(data_dir / "cie_a.csv"), 0, grid).values
        d_tab = read_table(data_dir / "cie_d_components.csv")
        s0 = resample(d_tab, "S0", grid).values
        s1 = resample(d_tab, "S1", grid).values
        s2 = resample(d_tab, "S2", grid).values
        f_tab = read_table(data_dir / "cie_f.csv")
        # SPDs are physically nonnegative; clamp resampling artifacts
        f_cols = [
            np.clip(resample(f_tab, f"F{i}", grid).values, 0.0, None)
            for i in range(1, 13)
        ]
        e_f = np.column_stack(f_cols)
        return cls(
            grid=grid,
            e_a=a / a.sum(),
            s0=s0,
            s1=s1,
            s2=s2,
            e_f=e_f / e_f.sum(axis=0, keepdims=True),
        )

    def daylight(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Unit-sum daylight SPD for temperature parameter t, and d(spd)/dt."""
        if not T_MIN <= t <= T_MAX:
            raise ValueError(f"t={t} outside [{T_MIN}, {T_MAX}]")
        cct = cct_from_t(t)
        m1, m2, dm1_dcct, dm2_dcct = _daylight_mixing(cct)
        raw = self.s0 + m1 * self.s1 + m2 * self.s2
        draw = (dm1_dcct * self.s1 + dm2_dcct * self.s2) * 1000.0  # dCCT/dt = 1000
        total = raw.sum()
        spd = raw / total
        dspd = draw / total - raw * (draw.sum() / total**2)
        return spd, dspd

    def basis(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """All 14 basis spectra as columns [A, D(t), F1..F12], plus d(D)/dt."""
        e_d, de_d = self.daylight(t)
        return np.column_stack([self.e_a, e_d, self.e_f]), de_d


def daylight_spd(t: float, bank: IlluminantBank) -> Spectrum:
    """Unit-sum CIE daylight SPD on the bank's grid for t in [1, 22]."""
    spd, _ = bank.daylight(t)
    return Spectrum(spd, bank.grid)


@dataclass
class IlluminantWeights:
    """Convex illuminant mixture weights plus the daylight temperature."""

    w_a: float
    w_d: float
    w_f: np.ndarray  # (12,)
    t: float

    def __post_init__(self):
        self.w_f = np.asarray(self.w_f, dtype=float)
        if self.w_f.shape != (12,):
            raise ValueError("w_f must have 12 entries")
        if self.w_a < 0 or self.w_d < 0 or np.any(self.w_f < 0):
            raise ValueError("illuminant weights must be nonnegative")
        if abs(self.w_a + self.w_d + self.w_f.sum() - 1.0) > UNIT_SUM_TOL:
            raise ValueError("illuminant weights must sum to one")
        if not T_MIN <= self.t <= T_MAX:
            raise ValueError(f"t={self.t} outside [{T_MIN}, {T_MAX}]")

    @classmethod
    def from_logits(cls, logits: np.ndarray, t: float) -> "IlluminantWeights":
        w = softmax_weights(logits)
        return cls(w_a=w[0], w_d=w[1], w_f=w[2:], t=t)

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.w_a, self.w_d], self.w_f])

    def to_json_dict(self) -> dict:
        return {
            "wA": float(self.w_a),
            "wD": float(self.w_d),
            "t": float(self.t),
            "wF": [float(v) for v in self.w_f],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IlluminantWeights":
        return cls(w_a=d["wA"], w_d=d["wD"], w_f=np.asarray(d["wF"], dtype=float), t=d["t"])


@dataclass
class IlluminantMix:
    """Mixed SPD with the partials the fitter needs."""

    spd: np.ndarray        # (D,)
    basis: np.ndarray      # (D, 14) columns [A, D(t), F1..F12] = d spd / d w
    d_t: np.ndarray        # (D,) = w_d * d eD/dt
    d_logits: np.ndarray   # (D, 14) through the softmax jacobian


def mix_illuminant(weights: IlluminantWeights, bank: IlluminantBank) -> IlluminantMix:
    """Convex combination of the unit-sum bank spectra; unit-sum by construction."""
    basis, de_d = bank.basis(weights.t)
    w = weights.vector()
    spd = basis @ w
    d_logits = basis @ softmax_jacobian(w)
    return IlluminantMix(spd=spd, basis=basis, d_t=weights.w_d * de_d, d_logits=d_logits)
