"""Camera colour transformation pipeline.

Raw sensor tristimulus values are white balanced (per-channel division by
the sensor's response to the illuminant), mapped to XYZ by the camera's
least-squares transform, then to linear sRGB by the fixed XYZ-to-sRGB
matrix. A plain power-law gamma with offset finishes the pipeline:

    encode(x) = (1 + a) x^(1/gamma) - a,   a = 0.055, gamma = 2.4

Appearance fitting happens entirely in linear space; encoded values are
clamped to [0, 1] only when exporting image files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

XYZ_TO_RGB = np.array(
    [
        [3.2406, -1.537, -0.498],
        [-0.968, 1.8758, 0.0415],
        [0.0557, -0.204, 1.0570],
    ]
)


@dataclass(frozen=True)
class PipelineConstants:
    xyz2rgb: np.ndarray = field(default_factory=lambda: XYZ_TO_RGB.copy())
    gamma_a: float = 0.055
    gamma: float = 2.4


DEFAULT_PIPELINE = PipelineConstants()


def white_balance(s: np.ndarray, e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel balancing gains for sensitivity S (D x 3) under SPD e.

    Returns (wb, v) with wb = 1/v and v = S^T e, the channel responses; v is
    what chain-rule callers differentiate through. Raises if any channel
    response is nonpositive (unphysical camera/light combination).
    """
    v = s.T @ e
    if np.any(v <= 0):
        raise ValueError(f"nonpositive channel response {v}; cannot white balance")
    return 1.0 / v, v


def apply_pipeline(
    i_raw: np.ndarray,
    s: np.ndarray,
    e: np.ndarray,
    t_raw2xyz: np.ndarray,
    constants: PipelineConstants = DEFAULT_PIPELINE,
) -> np.ndarray:
    """Linear colour pipeline: xyz2rgb . raw2xyz . white-balance applied to
    raw triples (any leading shape, last axis 3)."""
    wb, _ = white_balance(s, e)
    m = constants.xyz2rgb @ t_raw2xyz * wb  # fold the diagonal into the matrix
    return np.asarray(i_raw, dtype=float) @ m.T


def gamma_encode(x: np.ndarray, constants: PipelineConstants = DEFAULT_PIPELINE) -> np.ndarray:
    """Power-law encoding; input clamped to [0, 1], output in [-a, 1]."""
    a, g = constants.gamma_a, constants.gamma
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return (1.0 + a) * x ** (1.0 / g) - a


def gamma_decode(y: np.ndarray, constants: PipelineConstants = DEFAULT_PIPELINE) -> np.ndarray:
    """Exact inverse of gamma_encode on [-a, 1]; inputs clamped to that range."""
    a, g = constants.gamma_a, constants.gamma
    y = np.clip(np.asarray(y, dtype=float), -a, 1.0)
    return ((y + a) / (1.0 + a)) ** g


def encode_for_export(x: np.ndarray, constants: PipelineConstants = DEFAULT_PIPELINE) -> np.ndarray:
    """Gamma encoding for image files: output clamped to [0, 1]."""
    return np.clip(gamma_encode(x, constants), 0.0, 1.0)
