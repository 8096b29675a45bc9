"""Assembly of all fitted/precomputed model components."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraPCA, Raw2XyzLut, SensitivityDataset, build_raw2xyz_lut, fit_pca
from .config import OpticalConstants
from .illuminants import IlluminantBank
from .pipeline import DEFAULT_PIPELINE, PipelineConstants
from .skin import SkinLut, SkinOptics, build_skin_lut
from .spectra import ColorMatchingFunctions, WavelengthGrid, default_data_dir, load_cmf

SKIN_LUT_SIZE = 256
RAW2XYZ_LUT_SIZE = 65


@dataclass
class Models:
    """Everything the renderer and fitter need, immutable after build."""

    grid: WavelengthGrid
    cmf: ColorMatchingFunctions
    bank: IlluminantBank
    optics: SkinOptics
    camera_pca: CameraPCA
    raw2xyz_lut: Raw2XyzLut
    skin_lut: SkinLut
    pipeline: PipelineConstants


def build_models(
    data_dir: str | Path | None = None,
    constants: OpticalConstants | None = None,
    grid: WavelengthGrid | None = None,
    skin_lut: SkinLut | None = None,
    skin_lut_size: int = SKIN_LUT_SIZE,
    raw2xyz_lut_size: int = RAW2XYZ_LUT_SIZE,
    pca_components: int = 2,
) -> Models:
    """Load data tables and precompute the PCA and both lookup tables."""
    data_dir = Path(data_dir) if data_dir is not None else default_data_dir()
    grid = grid or WavelengthGrid()
    constants = constants or OpticalConstants()
    cmf = load_cmf(data_dir / "cmf_1931.csv", grid)
    bank = IlluminantBank.from_data_dir(grid, data_dir)
    optics = SkinOptics.from_data_dir(constants, grid, data_dir)
    dataset = SensitivityDataset.from_data_dir(grid, data_dir)
    pca = fit_pca(dataset, pca_components)
    lut = skin_lut if skin_lut is not None else build_skin_lut(optics, skin_lut_size)
    if lut.grid != grid:
        raise ValueError("skin LUT grid does not match the model grid")
    return Models(
        grid=grid,
        cmf=cmf,
        bank=bank,
        optics=optics,
        camera_pca=pca,
        raw2xyz_lut=build_raw2xyz_lut(pca, cmf, raw2xyz_lut_size),
        skin_lut=lut,
        pipeline=DEFAULT_PIPELINE,
    )
