"""Wavelength grids, spectral vectors and ingestion of tabulated spectral data.

All spectra in the toolkit live on a shared uniform wavelength grid; the
default is 400-720 nm at 10 nm (33 samples), the span of the camera
sensitivity dataset. Published data (CIE tables, extinction coefficients,
camera curves) is ingested from plain-text delimited tables and linearly
resampled onto the grid. Out-of-range extrapolation is an error, never a
silent clamp.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

DATA_ENV_VAR = "SPECTRAFACE_DATA"


class SpectralDataError(ValueError):
    """Raised for malformed or insufficient spectral data tables."""


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength sampling in nanometres."""

    lambda_min: float = 400.0
    lambda_max: float = 720.0
    step: float = 10.0

    def __post_init__(self):
        if self.step <= 0 or self.lambda_max <= self.lambda_min:
            raise ValueError("grid must be strictly increasing")
        n = (self.lambda_max - self.lambda_min) / self.step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("grid span must be an integer number of steps")

    @property
    def size(self) -> int:
        return int(round((self.lambda_max - self.lambda_min) / self.step)) + 1

    def wavelengths(self) -> np.ndarray:
        return self.lambda_min + self.step * np.arange(self.size)


@dataclass
class Spectrum:
    """Real-valued samples on a wavelength grid (SPD, reflectance, ...)."""

    values: np.ndarray
    grid: WavelengthGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError(
                f"expected {self.grid.size} samples, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrum contains non-finite values")


@dataclass
class SpectralTable:
    """Tabulated spectral data: strictly increasing wavelengths, named columns."""

    wavelengths: np.ndarray
    values: np.ndarray  # (n_rows, n_columns)
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.wavelengths.ndim != 1 or self.values.shape[0] != self.wavelengths.size:
            raise SpectralDataError("wavelength/value row count mismatch")
        if self.wavelengths.size < 2:
            raise SpectralDataError("need at least 2 rows")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise SpectralDataError("wavelengths must be strictly increasing")
        if not self.columns:
            self.columns = [f"col{i}" for i in range(self.values.shape[1])]
        if len(self.columns) != self.values.shape[1]:
            raise SpectralDataError("column label count mismatch")

    def column_index(self, column: str | int) -> int:
        if isinstance(column, int):
            if not 0 <= column < self.values.shape[1]:
                raise SpectralDataError(f"column index {column} out of range")
            return column
        try:
            return self.columns.index(column)
        except ValueError:
            raise SpectralDataError(
                f"unknown column {column!r}; have {self.columns}"
            ) from None


def read_table(path: str | Path) -> SpectralTable:
    """Parse a delimited table: '#' comments, optional header row of labels,
    first column wavelength in nm."""
    path = Path(path)
    rows: list[list[float]] = []
    columns: list[str] = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise SpectralDataError(f"cannot read {path}: {exc}") from exc
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = [f.strip() for f in line.replace(",", " ").split()]
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            if rows or columns:
                raise SpectralDataError(f"{path}: malformed line {raw!r}") from None
            columns = fields[1:]  # first label names the wavelength column
    if not rows:
        raise SpectralDataError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise SpectralDataError(f"{path}: ragged rows")
    arr = np.asarray(rows, dtype=float)
    return SpectralTable(arr[:, 0], arr[:, 1:], columns)


def resample(table: SpectralTable, column: str | int, grid: WavelengthGrid) -> Spectrum:
    """Linearly interpolate one table column onto the grid.

    Exact where a table row coincides with a grid node; raises if the table
    does not span the grid (no extrapolation).
    """
    idx = table.column_index(column)
    lam = grid.wavelengths()
    eps = 1e-9
    if table.wavelengths[0] > lam[0] + eps or table.wavelengths[-1] < lam[-1] - eps:
        raise SpectralDataError(
            f"table spans [{table.wavelengths[0]}, {table.wavelengths[-1]}] nm, "
            f"grid needs [{lam[0]}, {lam[-1]}] nm"
        )
    vals = np.interp(lam, table.wavelengths, table.values[:, idx])
    return Spectrum(vals, grid)


@dataclass
class ColorMatchingFunctions:
    """CIE 1931 2-degree observer curves on a grid, as a D x 3 matrix."""

    matrix: np.ndarray  # (D, 3): xbar, ybar, zbar
    grid: WavelengthGrid

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape != (self.grid.size, 3):
            raise ValueError(f"expected ({self.grid.size}, 3) matrix")
        if np.any(self.matrix < 0):
            raise SpectralDataError("colour matching functions must be nonnegative")


def load_cmf(path: str | Path, grid: WavelengthGrid) -> ColorMatchingFunctions:
    """Load the colour matching functions and resample onto the grid."""
    table = read_table(path)
    if table.values.shape[1] < 3:
        raise SpectralDataError(f"{path}: expected 3 value columns")
    cols = [resample(table, i, grid).values for i in range(3)]
    return ColorMatchingFunctions(np.column_stack(cols), grid)


def default_data_dir() -> Path:
    """Data directory: $SPECTRAFACE_DATA if set, else the packaged tables."""
    env = os.environ.get(DATA_ENV_VAR)
    if env:
        return Path(env)
    return Path(resources.files("spectraface") / "data")
