"""Forward renderer: dichromatic spectral composition through the sensor
and colour pipeline, with full analytic derivatives.

Per pixel, the scene radiance is diag(e) (i_d r + i_s) with r the skin
reflectance from the LUT; the sensor integrates it to a raw triple
S(b)^T diag(e) (i_d r + i_s) which the colour pipeline maps to linear sRGB.
All camera/illuminant matrices are shared across pixels, so an image render
reduces to a few dense matrix products. Derivatives are assembled by the
chain rule over the closed-form stages plus the bilinear LUT partials; no
autodiff framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import sensitivity_from_b
from .illuminants import (
    IlluminantWeights,
    cct_from_t,
    mix_illuminant,
    softmax_jacobian,
    softmax_weights,
)
from .models import Models
from .pipeline import white_balance


@dataclass
class PixelParams:
    """Normalised bio coordinates plus diffuse/specular shading of one pixel."""

    m: float
    h: float
    i_d: float
    i_s: float

    def __post_init__(self):
        if not (0.0 <= self.m <= 1.0 and 0.0 <= self.h <= 1.0):
            raise ValueError("m, h must lie in [0, 1]")
        if self.i_d < 0 or self.i_s < 0:
            raise ValueError("shading must be nonnegative")


@dataclass
class SceneParams:
    """Per-image camera and illumination parameters."""

    b: np.ndarray  # (2,)
    light: IlluminantWeights

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)

    def to_json_dict(self) -> dict:
        return {"b": [float(v) for v in self.b], "light": self.light.to_json_dict()}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneParams":
        return cls(b=np.asarray(d["b"], dtype=float), light=IlluminantWeights.from_json_dict(d["light"]))


@dataclass
class RenderedImage:
    linrgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray    # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not np.all(np.isfinite(self.linrgb)):
            raise ValueError("rendered image contains non-finite values")
        if not self.mask.any():
            raise ValueError("foreground mask is empty")


@dataclass
class SceneEval:
    """Scene-level matrices shared by every pixel, with their b/light partials."""

    s: np.ndarray            # (D, 3) camera sensitivities
    ds_db: np.ndarray        # (2, D, 3)
    e: np.ndarray            # (D,) illuminant SPD
    e_basis: np.ndarray      # (D, 14) d e / d weights
    de_dt: np.ndarray        # (D,)
    de_dlogits: np.ndarray   # (D, 14)
    weights: np.ndarray      # (14,)
    t_r2x: np.ndarray        # (3, 3)
    dt_r2x_db: np.ndarray    # (3, 3, 2)
    v: np.ndarray            # (3,) channel responses S^T e
    wb: np.ndarray           # (3,) white-balance gains 1/v
    b_mat: np.ndarray        # (3, 3) xyz2rgb @ t_r2x
    a_mat: np.ndarray        # (3, 3) full linear pipeline b_mat @ diag(wb)
    da_db: np.ndarray        # (2, 3, 3)


def evaluate_scene(scene: SceneParams, models: Models) -> SceneEval:
    """Precompute the shared pipeline matrices and their parameter partials."""
    s, dvec_db = sensitivity_from_b(scene.b, models.camera_pca)
    d = models.grid.size
    ds_db = np.stack([dvec_db[:, k].reshape(3, d).T for k in range(dvec_db.shape[1])])
    mix = mix_illuminant(scene.light, models.bank)
    t_r2x, dt_db = models.raw2xyz_lut.sample(scene.b)
    wb, v = white_balance(s, mix.spd)
    b_mat = models.pipeline.xyz2rgb @ t_r2x
    a_mat = b_mat * wb
    da_db = np.empty((2, 3, 3))
    for k in range(2):
        dv_k = ds_db[k].T @ mix.spd
        da_db[k] = (models.pipeline.xyz2rgb @ dt_db[:, :, k]) * wb + b_mat * (-dv_k / v**2)
    return SceneEval(
        s=s,
        ds_db=ds_db,
        e=mix.spd,
        e_basis=mix.basis,
        de_dt=mix.d_t,
        de_dlogits=mix.d_logits,
        weights=scene.light.vector(),
        t_r2x=t_r2x,
        dt_r2x_db=dt_db,
        v=v,
        wb=wb,
        b_mat=b_mat,
        a_mat=a_mat,
        da_db=da_db,
    )


@dataclass
class RenderJacobian:
    """Partials of one pixel's linear RGB w.r.t. every model parameter."""

    d_m: np.ndarray        # (3,)
    d_h: np.ndarray        # (3,)
    d_id: np.ndarray       # (3,)
    d_is: np.ndarray       # (3,)
    d_b: np.ndarray        # (3, 2)
    d_weights: np.ndarray  # (3, 14)
    d_t: np.ndarray        # (3,)
    d_logits: np.ndarray   # (3, 14)


def render_pixel(
    p: PixelParams, scene: SceneParams, models: Models, scene_eval: SceneEval | None = None
) -> tuple[np.ndarray, RenderJacobian]:
    """Render one pixel to linear RGB and return all analytic partials."""
    ev = scene_eval if scene_eval is not None else evaluate_scene(scene, models)
    r, dr_dm, dr_dh = models.skin_lut.sample(p.m, p.h)
    rho = p.i_d * r + p.i_s
    f = ev.e * rho
    i_raw = ev.s.T @ f
    i_lin = ev.a_mat @ i_raw

    d_id = ev.a_mat @ (ev.s.T @ (ev.e * r))
    d_is = ev.a_mat @ ev.v
    d_m = p.i_d * (ev.a_mat @ (ev.s.T @ (ev.e * dr_dm)))
    d_h = p.i_d * (ev.a_mat @ (ev.s.T @ (ev.e * dr_dh)))

    d_b = np.empty((3, 2))
    for k in range(2):
        d_b[:, k] = ev.da_db[k] @ i_raw + ev.a_mat @ (ev.ds_db[k].T @ f)

    def light_partial(de: np.ndarray) -> np.ndarray:
        # through both the white balance (diag 1/v) and the radiance term
        return ev.b_mat @ (
            -(ev.s.T @ de) / ev.v**2 * i_raw + ev.wb * (ev.s.T @ (de * rho))
        )

    d_weights = np.stack([light_partial(ev.e_basis[:, j]) for j in range(14)], axis=1)
    d_t = light_partial(ev.de_dt)
    d_logits = d_weights @ softmax_jacobian(ev.weights)
    return i_lin, RenderJacobian(
        d_m=d_m, d_h=d_h, d_id=d_id, d_is=d_is,
        d_b=d_b, d_weights=d_weights, d_t=d_t, d_logits=d_logits,
    )


def render_maps(
    m: np.ndarray, h: np.ndarray, i_d: np.ndarray, i_s: np.ndarray,
    ev: SceneEval, models: Models,
) -> np.ndarray:
    """Vectorised render of flat parameter arrays to (N, 3) linear RGB."""
    r, _, _ = models.skin_lut.sample(m, h)
    rho = i_d[:, None] * r + i_s[:, None]
    i_raw = (rho * ev.e) @ ev.s
    return i_raw @ ev.a_mat.T


def render_image(
    maps: dict[str, np.ndarray], scene: SceneParams, models: Models, mask: np.ndarray
) -> RenderedImage:
    """Render H x W parameter maps (keys m, h, i_d, i_s) under one scene.

    Background pixels are zero. Deterministic: pixels are processed as one
    vectorised batch, independent of any worker configuration.
    """
    mask = np.asarray(mask, dtype=bool)
    shapes = {k: v.shape for k, v in maps.items()}
    if len(set(shapes.values())) != 1 or mask.shape not in set(shapes.values()):
        raise ValueError(f"map/mask shapes disagree: {shapes}, mask {mask.shape}")
    ev = evaluate_scene(scene, models)
    out = np.zeros(mask.shape + (3,))
    sel = mask.reshape(-1)
    flat = render_maps(
        maps["m"].reshape(-1)[sel],
        maps["h"].reshape(-1)[sel],
        maps["i_d"].reshape(-1)[sel],
        maps["i_s"].reshape(-1)[sel],
        ev,
        models,
    )
    out.reshape(-1, 3)[sel] = flat
    return RenderedImage(linrgb=out, mask=mask)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    n_points: int = 0

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def _rel_err(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-10) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    f = np.asarray(fd, dtype=float).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    err = np.abs(a - f) / denom
    err[np.maximum(np.abs(a), np.abs(f)) < floor] = 0.0
    return float(err.max())


def draw_checkable_point(rng: np.random.Generator, models: Models, fd_step: float = 1e-4):
    """Random in-range (pixel, scene) away from LUT cell boundaries and the
    daylight polynomial's 7000 K branch point, so central differences with
    step fd_step stay within one smooth piece."""
    g = models.skin_lut.size

    def interior_coord(size):
        # keep at least 20% of a cell away from its edges (>> fd_step)
        cell = 1.0 / (size - 1)
        assert 0.2 * cell > 2.0 * fd_step, "grid too fine for this FD step"
        idx = rng.integers(0, size - 1)
        return (idx + rng.uniform(0.2, 0.8)) * cell

    m = interior_coord(g)
    h = interior_coord(g)
    i_d = rng.uniform(0.2, 1.5)
    i_s = rng.uniform(0.05, 0.8)
    k = models.raw2xyz_lut.size
    b = np.array([
        -3.0 + 6.0 * interior_coord(k),
        -3.0 + 6.0 * interior_coord(k),
    ])
    while True:
        t = rng.uniform(1.2, 21.8)
        if abs(cct_from_t(t) - 7000.0) > 100.0:  # chromaticity branch point
            break
    logits = rng.normal(0.0, 1.0, 14)
    light = IlluminantWeights.from_logits(logits, t)
    return PixelParams(m=m, h=h, i_d=i_d, i_s=i_s), SceneParams(b=b, light=light), logits


def check_gradients(
    models: Models,
    n_points: int = 100,
    step: float = 1e-4,
    tol: float = 1e-3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare every analytic partial of render_pixel against central finite
    differences at random in-range points (LUT cell interiors only)."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}

    def record(name, a, f):
        worst[name] = max(worst.get(name, 0.0), _rel_err(a, f))

    for _ in range(n_points):
        p, scene, logits = draw_checkable_point(rng, models, step)
        i_lin, jac = render_pixel(p, scene, models)

        def render_at(p2=None, scene2=None):
            out, _ = render_pixel(p2 or p, scene2 or scene, models)
            return out

        for name, attr, d in (("m", "m", jac.d_m), ("h", "h", jac.d_h),
                              ("i_d", "i_d", jac.d_id), ("i_s", "i_s", jac.d_is)):
            hi = render_at(p2=_perturb_pixel(p, attr, step))
            lo = render_at(p2=_perturb_pixel(p, attr, -step))
            record(name, d, (hi - lo) / (2 * step))

        for k in range(2):
            hi = render_at(scene2=_perturb_b(scene, k, step))
            lo = render_at(scene2=_perturb_b(scene, k, -step))
            record("b", jac.d_b[:, k], (hi - lo) / (2 * step))

        hi = render_at(scene2=_with_light(scene, logits, scene.light.t + step))
        lo = render_at(scene2=_with_light(scene, logits, scene.light.t - step))
        record("t", jac.d_t, (hi - lo) / (2 * step))

        for j in range(14):
            dz = np.zeros(14)
            dz[j] = step
            hi = render_at(scene2=_with_light(scene, logits + dz, scene.light.t))
            lo = render_at(scene2=_with_light(scene, logits - dz, scene.light.t))
            record("light_logits", jac.d_logits[:, j], (hi - lo) / (2 * step))

    return GradCheckReport(
        max_rel_error=max(worst.values()), per_parameter=worst, n_points=n_points
    )


def _perturb_pixel(p: PixelParams, attr: str, delta: float) -> PixelParams:
    kw = {"m": p.m, "h": p.h, "i_d": p.i_d, "i_s": p.i_s}
    kw[attr] += delta
    return PixelParams(**kw)


def _perturb_b(scene: SceneParams, k: int, delta: float) -> SceneParams:
    b = scene.b.copy()
    b[k] += delta
    return SceneParams(b=b, light=scene.light)


def _with_light(scene: SceneParams, logits: np.ndarray, t: float) -> SceneParams:
    w = softmax_weights(logits)
    light = IlluminantWeights(w_a=w[0], w_d=w[1], w_f=w[2:], t=t)
    return SceneParams(b=scene.b, light=light)
