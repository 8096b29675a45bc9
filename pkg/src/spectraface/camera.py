"""Statistical camera model: PCA over measured RGB spectral sensitivities.

Any camera is approximated as vec(S(b)) = P diag(sigma) b + vec(S_mean),
a 2-parameter linear family fit to an ensemble of per-channel unit-sum
normalised sensitivity curves. The raw-to-XYZ transform (least squares
against the colour matching functions, rows rescaled to sum 1) is
precomputed on a lookup table over b in [-3, 3]^2 and sampled with
differentiable bilinear interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .spectra import ColorMatchingFunctions, SpectralDataError, WavelengthGrid, read_table

B_MIN, B_MAX = -3.0, 3.0
RANK_RCOND = 1e-10


@dataclass
class SensitivityDataset:
    """Per-camera D x 3 sensitivity matrices on a common grid."""

    names: list[str]
    sensitivities: np.ndarray  # (n_cameras, D, 3)
    grid: WavelengthGrid

    def __post_init__(self):
        self.sensitivities = np.asarray(self.sensitivities, dtype=float)
        n, d, c = self.sensitivities.shape
        if n < 3:
            raise ValueError("need at least 3 cameras")
        if (d, c) != (self.grid.size, 3):
            raise ValueError(f"expected (n, {self.grid.size}, 3) sensitivities")
        if np.any(self.sensitivities < 0):
            raise ValueError("sensitivities must be nonnegative")

    @classmethod
    def from_data_dir(cls, grid: WavelengthGrid, data_dir: str | Path) -> "SensitivityDataset":
        from .spectra import resample

        table = read_table(Path(data_dir) / "camera_sensitivities.csv")
        if table.values.shape[1] % 3:
            raise SpectralDataError("camera table needs one R,G,B column triple per camera")
        n = table.values.shape[1] // 3
        names = []
        mats = []
        for i in range(n):
            cols = [resample(table, 3 * i + c, grid).values for c in range(3)]
            mats.append(np.column_stack(cols))
            label = table.columns[3 * i] if table.columns else f"cam{i:02d}_r"
            names.append(label.rsplit("_", 1)[0])
        return cls(names=names, sensitivities=np.array(mats), grid=grid)


def vec_sensitivity(s: np.ndarray) -> np.ndarray:
    """Column-stack a D x 3 matrix into a 3D vector (R block, G block, B block)."""
    return s.T.ravel()


def unvec_sensitivity(v: np.ndarray, d: int) -> np.ndarray:
    return v.reshape(3, d).T


@dataclass
class CameraPCA:
    """PCA model of the sensitivity ensemble."""

    components: np.ndarray   # (3D, N), orthonormal columns
    sigma: np.ndarray        # (N,) eigen standard deviations, descending
    mean: np.ndarray         # (3D,)
    grid: WavelengthGrid
    explained_variance_ratio: np.ndarray  # (N,)

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def to_json_dict(self) -> dict:
        return {
            "components": self.components.tolist(),
            "sigma": self.sigma.tolist(),
            "mean": self.mean.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            "grid": {
                "lambda_min": self.grid.lambda_min,
                "lambda_max": self.grid.lambda_max,
                "step": self.grid.step,
            },
        }

    def save_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraPCA":
        grid = WavelengthGrid(**d["grid"])
        return cls(
            components=np.asarray(d["components"], dtype=float),
            sigma=np.asarray(d["sigma"], dtype=float),
            mean=np.asarray(d["mean"], dtype=float),
            grid=grid,
            explained_variance_ratio=np.asarray(d["explained_variance_ratio"], dtype=float),
        )


def fit_pca(dataset: SensitivityDataset, n_components: int = 2, normalize: bool = True) -> CameraPCA:
    """Mean-centred PCA of the vectorised sensitivities.

    Each channel is rescaled to unit sum first (gain differences between
    cameras carry no colour information; white balance cancels them anyway).
    """
    n = dataset.sensitivities.shape[0]
    if not 1 <= n_components < n:
        raise ValueError("n_components must be in [1, n_cameras)")
    s = dataset.sensitivities
    if normalize:
        s = s / s.sum(axis=1, keepdims=True)
    x = np.array([vec_sensitivity(si) for si in s])  # (n, 3D)
    mean = x.mean(axis=0)
    xc = x - mean
    _, svals, vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(svals > svals[0] * 1e-12))
    if rank < n_components:
        raise ValueError(f"dataset rank {rank} < requested {n_components} components")
    sigma = svals[:n_components] / np.sqrt(n - 1)
    return CameraPCA(
        components=vt[:n_components].T.copy(),
        sigma=sigma,
        mean=mean,
        grid=dataset.grid,
        explained_variance_ratio=(svals**2 / np.sum(svals**2))[:n_components],
    )


def project_b(pca: CameraPCA, s: np.ndarray) -> np.ndarray:
    """Coefficients b that best reproduce a D x 3 sensitivity matrix."""
    return (pca.components.T @ (vec_sensitivity(s) - pca.mean)) / pca.sigma


def sensitivity_from_b(b: np.ndarray, pca: CameraPCA) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the linear camera model.

    Returns (S, dvecS_db): the D x 3 sensitivity matrix and the constant
    jacobian P diag(sigma) of its vectorisation.
    """
    b = np.asarray(b, dtype=float)
    if b.shape != (pca.n_components,):
        raise ValueError(f"b must have {pca.n_components} entries")
    if np.any(np.abs(b) > B_MAX + 1e-12):
        raise ValueError(f"|b| must be <= {B_MAX}")
    dvec_db = pca.components * pca.sigma  # (3D, N)
    vec = dvec_db @ b + pca.mean
    return unvec_sensitivity(vec, pca.grid.size), dvec_db


def raw2xyz(s: np.ndarray, cmf: ColorMatchingFunctions) -> np.ndarray:
    """Least-squares camera-to-XYZ matrix, rows rescaled to sum 1.

    Solves S T^T ~= C in the least-squares sense (rank threshold 1e-10), so
    T maps raw tristimulus responses to XYZ for spectrally flat stimuli; the
    row normalisation preserves white: T 1 = 1 exactly.
    """
    s = np.asarray(s, dtype=float)
    if np.linalg.matrix_rank(s, tol=RANK_RCOND * np.abs(s).max()) < 3:
        raise ValueError("sensitivity matrix is rank deficient")
    t = np.linalg.lstsq(s, cmf.matrix, rcond=RANK_RCOND)[0].T
    row_sums = t.sum(axis=1, keepdims=True)
    if np.any(np.abs(row_sums) < 1e-12):
        raise ValueError("degenerate raw-to-XYZ transform (zero row sum)")
    return t / row_sums


@dataclass
class Raw2XyzLut:
    """K x K table of raw-to-XYZ matrices over b in [-3, 3]^2."""

    tables: np.ndarray  # (K, K, 3, 3), axis 0 = b1, axis 1 = b2
    size: int
    b_min: float = B_MIN
    b_max: float = B_MAX

    def node_coords(self) -> np.ndarray:
        return np.linspace(self.b_min, self.b_max, self.size)

    def sample(self, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear matrix interpolation: returns (T, dT_db with shape (3,3,2)).

        Queries outside [-3, 3]^2 are an error, not a clamp.
        """
        b = np.asarray(b, dtype=float)
        if np.any(b < self.b_min) or np.any(b > self.b_max):
            raise ValueError(f"b={b} outside [{self.b_min}, {self.b_max}]^2")
        k = self.size
        scale = (k - 1) / (self.b_max - self.b_min)
        u = (b[0] - self.b_min) * scale
        v = (b[1] - self.b_min) * scale
        i0 = min(int(u), k - 2)
        j0 = min(int(v), k - 2)
        fu = u - i0
        fv = v - j0
        t00 = self.tables[i0, j0]
        t10 = self.tables[i0 + 1, j0]
        t01 = self.tables[i0, j0 + 1]
        t11 = self.tables[i0 + 1, j0 + 1]
        t = (
            (1 - fu) * (1 - fv) * t00
            + fu * (1 - fv) * t10
            + (1 - fu) * fv * t01
            + fu * fv * t11
        )
        dt_db = np.empty((3, 3, 2))
        dt_db[:, :, 0] = ((1 - fv) * (t10 - t00) + fv * (t11 - t01)) * scale
        dt_db[:, :, 1] = ((1 - fu) * (t01 - t00) + fu * (t11 - t10)) * scale
        return t, dt_db


def build_raw2xyz_lut(pca: CameraPCA, cmf: ColorMatchingFunctions, size: int = 65) -> Raw2XyzLut:
    """Precompute raw-to-XYZ matrices on a uniform b grid."""
    if size < 2:
        raise ValueError("LUT needs at least 2 nodes per axis")
    coords = np.linspace(B_MIN, B_MAX, size)
    tables = np.empty((size, size, 3, 3))
    for i, b1 in enumerate(coords):
        for j, b2 in enumerate(coords):
            s, _ = sensitivity_from_b(np.array([b1, b2]), pca)
            tables[i, j] = raw2xyz(s, cmf)
    return Raw2XyzLut(tables=tables, size=size)
