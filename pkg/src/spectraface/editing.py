"""Semantic edits of a fitted decomposition: re-render with modified maps.

Edits operate in the map domain (specular replaced by a constant, melanin
shifted in its normalised coordinate, haemoglobin scaled in volume-fraction
units, clamped to the physical ranges) and re-render through the same
camera/illuminant, re-encoding with the display gamma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import Decomposition
from .models import Models
from .pipeline import encode_for_export
from .render import RenderedImage, render_image
from .skin import BLOOD_RANGE, blood_coord, mel_coord

@dataclass
class EditResult:
    linrgb: np.ndarray
    srgb: np.ndarray
    mask: np.ndarray


def _maps_from_decomposition(d: Decomposition) -> dict[str, np.ndarray]:
    mask = d.mask
    return {
        "m": np.clip(np.where(mask, mel_coord(d.f_mel), 0.5), 0.0, 1.0),
        "h": np.clip(np.where(mask, blood_coord(d.f_blood), 0.5), 0.0, 1.0),
        "i_d": np.where(mask, d.i_d, 0.0),
        "i_s": np.where(mask, d.i_s, 0.0),
    }


def _render_edit(maps: dict, d: Decomposition, models: Models) -> EditResult:
    image: RenderedImage = render_image(maps, d.scene, models, d.mask)
    return EditResult(
        linrgb=image.linrgb,
        srgb=encode_for_export(image.linrgb, models.pipeline),
        mask=d.mask,
    )


def edit_specular_remove(d: Decomposition, models: Models, constant: float = 0.0) -> EditResult:
    """Replace the specular shading by a constant (default 0) and re-render."""
    if constant < 0:
        raise ValueError("specular constant must be nonnegative")
    maps = _maps_from_decomposition(d)
    maps["i_s"] = np.where(d.mask, constant, 0.0)
    return _render_edit(maps, d, models)


def edit_melanin_shift(d: Decomposition, models: Models, delta: float) -> EditResult:
    """Shift the normalised melanin coordinate by delta, clamped to [0, 1]."""
    maps = _maps_from_decomposition(d)
    maps["m"] = np.clip(maps["m"] + delta, 0.0, 1.0)
    return _render_edit(maps, d, models)


def edit_haemoglobin_scale(d: Decomposition, models: Models, factor: float) -> EditResult:
    """Scale the blood volume fraction, clamped to its physical range."""
    if factor < 0:
        raise ValueError("haemoglobin factor must be nonnegative")
    f_blood = np.clip(d.f_blood * factor, BLOOD_RANGE[0], BLOOD_RANGE[1])
    maps = _maps_from_decomposition(d)
    maps["h"] = np.clip(np.where(d.mask, blood_coord(f_blood), 0.5), 0.0, 1.0)
    return _render_edit(maps, d, models)


def radiance_luminance(maps: dict[str, np.ndarray], d: Decomposition, models: Models) -> np.ndarray:
    """Per-pixel CIE Y of the scene radiance diag(e)(i_d r + i_s).

    Luminance of the physical radiance (not the camera rendering), which is
    the quantity melanin absorption provably never increases.
    """
    ybar = models.cmf.matrix[:, 1]
    mask = d.mask
    sel = mask.reshape(-1)
    r, _, _ = models.skin_lut.sample(
        maps["m"].reshape(-1)[sel], maps["h"].reshape(-1)[sel])
    rho = maps["i_d"].reshape(-1)[sel][:, None] * r + maps["i_s"].reshape(-1)[sel][:, None]
    y = np.zeros(sel.size)
    y[sel] = (rho * d.illuminant) @ ybar
    return y.reshape(mask.shape)


def melanin_shift_maps(d: Decomposition, delta: float) -> dict[str, np.ndarray]:
    """Map set of the melanin edit, for luminance comparisons."""
    maps = _maps_from_decomposition(d)
    maps["m"] = np.clip(maps["m"] + delta, 0.0, 1.0)
    return maps


def current_maps(d: Decomposition) -> dict[str, np.ndarray]:
    return _maps_from_decomposition(d)
