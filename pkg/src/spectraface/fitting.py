"""Per-image inverse fitting of the spectral face model.

Unconstrained latents are mapped to physical parameters (sigmoid for the
bounded bio coordinates, camera coefficients and colour temperature, exp
for the two shading maps, softmax for the illuminant mixture), rendered
through the forward model, and optimised against the observed image with

    L = w1 L_appearance + w2 ||b||^2 + w3 mean|i_s| + w4 L_shading

where L_appearance is the masked mean of squared linear-RGB differences and
L_shading regresses the diffuse map onto a supplied pseudo ground truth
with a free scale. Gradients of L w.r.t. every latent are assembled
analytically; the optimiser is Adam with backtracking halving so accepted
steps never increase the loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .illuminants import IlluminantWeights, softmax_jacobian
from .models import Models
from .pipeline import gamma_decode
from .render import (
    GradCheckReport,
    RenderedImage,
    SceneParams,
    _rel_err,
    draw_checkable_point,
    evaluate_scene,
    render_image,
)
from .skin import blood_fraction, mel_fraction

N_LIGHTS = 14


@dataclass(frozen=True)
class LossWeights:
    appearance: float = 1e-3
    camera_prior: float = 1e-4
    specular_sparsity: float = 1e-5
    shading_supervision: float = 1e-5

    def __post_init__(self):
        if min(self.appearance, self.camera_prior, self.specular_sparsity,
               self.shading_supervision) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class FitOptions:
    max_iterations: int = 2000
    step_size: float = 0.05       # Adam engine only
    tolerance: float = 1e-9        # relative loss decrease over the window
    window: int = 50
    seed: int = 0
    log_every: int = 25
    optimizer: str = "gauss-newton"  # or "adam"
    max_step: float = 1.5          # per-latent cap on one Gauss-Newton update
    scene_max_step: float = 0.25   # tighter cap for the global scene latents
    polish_grid: int = 6           # multi-start grid for the per-pixel refinement
    scene_warmup: int = 30         # pixels-only iterations per scene start
    multi_start_scene: bool = True
    freeze_scene: bool = False
    init: "LatentImage | None" = None
    pgt_shading: np.ndarray | None = None

    def __post_init__(self):
        if self.max_iterations < 1 or self.step_size <= 0:
            raise ValueError("iteration count and step size must be positive")
        if self.optimizer not in ("gauss-newton", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LatentImage:
    """Unconstrained optimisation variables: four maps + scene vector latents."""

    z_m: np.ndarray   # (H, W)
    z_h: np.ndarray
    z_d: np.ndarray
    z_s: np.ndarray
    z_b: np.ndarray   # (2,)
    z_light: np.ndarray  # (14,)
    z_t: float

    MAP_FIELDS = ("z_m", "z_h", "z_d", "z_s")

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "LatentImage":
        return cls(
            z_m=np.zeros(shape), z_h=np.zeros(shape),
            z_d=np.zeros(shape), z_s=np.zeros(shape),
            z_b=np.zeros(2), z_light=np.zeros(N_LIGHTS), z_t=0.0,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.z_m.shape

    def copy(self) -> "LatentImage":
        return LatentImage(
            z_m=self.z_m.copy(), z_h=self.z_h.copy(),
            z_d=self.z_d.copy(), z_s=self.z_s.copy(),
            z_b=self.z_b.copy(), z_light=self.z_light.copy(), z_t=float(self.z_t),
        )

    def pack(self) -> np.ndarray:
        return np.concatenate([
            self.z_m.ravel(), self.z_h.ravel(), self.z_d.ravel(), self.z_s.ravel(),
            self.z_b, self.z_light, [self.z_t],
        ])

    @classmethod
    def unpack(cls, vec: np.ndarray, shape: tuple[int, int]) -> "LatentImage":
        n = shape[0] * shape[1]
        maps = [vec[i * n:(i + 1) * n].reshape(shape) for i in range(4)]
        rest = vec[4 * n:]
        return cls(
            z_m=maps[0], z_h=maps[1], z_d=maps[2], z_s=maps[3],
            z_b=rest[:2].copy(), z_light=rest[2:2 + N_LIGHTS].copy(),
            z_t=float(rest[2 + N_LIGHTS]),
        )


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


@dataclass
class TransformedLatents:
    m: np.ndarray
    h: np.ndarray
    i_d: np.ndarray
    i_s: np.ndarray
    scene: SceneParams


def transform_latents(z: LatentImage) -> TransformedLatents:
    """Map latents to physical-range parameters.

    m, h = sigmoid(z) are normalised LUT coordinates; i_d, i_s = exp(z) are
    positive shadings; b = 3 tanh(z/2) covers [-3, 3]; t = 1 + 21 sigmoid(z)
    covers [1, 22]; the illuminant weights are the softmax of their logits.
    """
    sig_b = _sigmoid(z.z_b)
    b = 3.0 * (2.0 * sig_b - 1.0)
    t = 1.0 + 21.0 * _sigmoid(z.z_t)
    light = IlluminantWeights.from_logits(z.z_light, t)
    return TransformedLatents(
        m=_sigmoid(z.z_m), h=_sigmoid(z.z_h),
        i_d=np.exp(z.z_d), i_s=np.exp(z.z_s),
        scene=SceneParams(b=b, light=light),
    )


# ---------------------------------------------------------------------------
# individual losses (masked means; the count is always foreground pixels)


def appearance_loss(recon: np.ndarray, observed: np.ndarray, mask: np.ndarray) -> float:
    """Masked sum of squared linear-RGB differences over the pixel count."""
    mask = np.asarray(mask, dtype=bool)
    if recon.shape != observed.shape:
        raise ValueError("reconstruction/observation shapes differ")
    if not mask.any():
        raise ValueError("empty mask")
    diff = (recon - observed)[mask]
    return float(np.sum(diff**2) / mask.sum())


def appearance_rmse(recon: np.ndarray, observed: np.ndarray, mask: np.ndarray) -> float:
    """Per-sample RMSE over masked pixels and channels."""
    return float(np.sqrt(appearance_loss(recon, observed, mask) / 3.0))


def camera_prior_loss(b: np.ndarray) -> float:
    b = np.asarray(b, dtype=float)
    return float(b @ b)


def specular_sparsity_loss(i_s: np.ndarray, mask: np.ndarray) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(np.sum(np.abs(i_s[mask])) / mask.sum())


def shading_supervision_loss(
    i_d: np.ndarray, i_d_pgt: np.ndarray, mask: np.ndarray
) -> tuple[float, float]:
    """Scale-free diffuse supervision.

    The optimal scale s = <i_d, pgt> / <i_d, i_d> (least squares without
    intercept) is applied to the estimate before the squared error.
    Returns (loss, s).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    est = i_d[mask]
    ref = i_d_pgt[mask]
    denom = float(est @ est)
    if denom <= 0:
        raise ValueError("diffuse map is zero over the mask; scale is undefined")
    s = float(est @ ref) / denom
    return float(np.sum((s * est - ref) ** 2) / mask.sum()), s


@dataclass
class LossBreakdown:
    total: float
    appearance: float
    camera_prior: float
    specular_sparsity: float
    shading_supervision: float
    shading_scale: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "total": self.total,
            "appearance": self.appearance,
            "camera_prior": self.camera_prior,
            "specular_sparsity": self.specular_sparsity,
            "shading_supervision": self.shading_supervision,
            "shading_scale": self.shading_scale,
        }


def total_loss(
    z: LatentImage,
    observed_lin: np.ndarray,
    mask: np.ndarray,
    weights: LossWeights,
    models: Models,
    pgt_shading: np.ndarray | None = None,
    want_grad: bool = True,
) -> tuple[LossBreakdown, LatentImage | None]:
    """Weighted loss and, optionally, its analytic gradient w.r.t. all latents.

    The appearance term's pixel gradients flow through the skin LUT partials;
    its scene gradients are accumulated in closed form (a handful of D- and
    3-vector reductions), so the cost is a few dense products over masked
    pixels. When no pseudo ground truth shading is supplied the supervision
    term is dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    n_px = int(mask.sum())
    sel = mask.reshape(-1)

    tl = transform_latents(z)
    ev = evaluate_scene(tl.scene, models)
    s_mat, e, v, wb = ev.s, ev.e, ev.v, ev.wb
    a_mat, b_mat = ev.a_mat, ev.b_mat
    xyz2rgb = models.pipeline.xyz2rgb

    m = tl.m.reshape(-1)[sel]
    h = tl.h.reshape(-1)[sel]
    i_d = tl.i_d.reshape(-1)[sel]
    i_s = tl.i_s.reshape(-1)[sel]
    obs = observed_lin.reshape(-1, 3)[sel]

    r, dr_dm, dr_dh = models.skin_lut.sample(m, h)
    rho = i_d[:, None] * r + i_s[:, None]
    f = rho * e
    i_raw = f @ s_mat
    lin = i_raw @ a_mat.T
    diff = lin - obs

    l_app = float(np.sum(diff**2) / n_px)
    l_cam = camera_prior_loss(tl.scene.b)
    l_spec = float(np.sum(i_s) / n_px)
    if pgt_shading is not None:
        pgt = pgt_shading.reshape(-1)[sel]
        denom = float(i_d @ i_d)
        if denom <= 0:
            raise ValueError("diffuse map is zero over the mask; scale is undefined")
        scale = float(i_d @ pgt) / denom
        res = scale * i_d - pgt
        l_shade = float(np.sum(res**2) / n_px)
    else:
        scale = None
        l_shade = 0.0

    w1, w2 = weights.appearance, weights.camera_prior
    w3, w4 = weights.specular_sparsity, weights.shading_supervision
    breakdown = LossBreakdown(
        total=w1 * l_app + w2 * l_cam + w3 * l_spec + w4 * l_shade,
        appearance=l_app, camera_prior=l_cam,
        specular_sparsity=l_spec, shading_supervision=l_shade,
        shading_scale=scale,
    )
    if not want_grad:
        return breakdown, None

    g = (2.0 / n_px) * diff          # dL_app / d lin
    ag = g @ a_mat                   # rows A^T g_p
    sr = (r * e) @ s_mat             # rows S^T diag(e) r_p
    d_id = np.sum(ag * sr, axis=1)
    d_is = ag @ v
    d_m = i_d * np.sum(ag * ((dr_dm * e) @ s_mat), axis=1)
    d_h = i_d * np.sum(ag * ((dr_dh * e) @ s_mat), axis=1)

    # scene gradients via closed-form accumulators
    q = g @ b_mat
    c1 = np.sum(q * i_raw, axis=0)                    # (3,)
    c2 = np.sum(rho * (ag @ s_mat.T), axis=0)         # (D,)
    d_e = -(s_mat @ (c1 / v**2)) + c2
    d_w = ev.e_basis.T @ d_e
    d_t = float(ev.de_dt @ d_e)
    wvec = ev.weights
    d_logits = wvec * (d_w - wvec @ d_w)

    m1acc = (g @ xyz2rgb).T @ (i_raw * wb)            # (3,3)
    w_acc = f.T @ ag                                  # (D,3)
    # d/db splits into the raw2xyz LUT, white-balance and sensitivity parts
    d_b = np.empty(2)
    for k in range(2):
        d_sk = ev.ds_db[k]
        lut_part = float(np.sum(ev.dt_r2x_db[:, :, k] * m1acc))
        wb_part = -float(((d_sk.T @ e) / v**2) @ c1)
        sens_part = float(np.sum(d_sk * w_acc))
        d_b[k] = lut_part + wb_part + sens_part

    # chain rule into the latents
    grads = LatentImage.zeros(z.shape)
    gm = np.zeros(sel.size)
    gm[sel] = w1 * d_m * m * (1.0 - m)
    grads.z_m = gm.reshape(z.shape)
    gh = np.zeros(sel.size)
    gh[sel] = w1 * d_h * h * (1.0 - h)
    grads.z_h = gh.reshape(z.shape)

    gd_pix = w1 * d_id
    if pgt_shading is not None:
        gd_pix = gd_pix + w4 * (2.0 * scale / n_px) * res
    gd = np.zeros(sel.size)
    gd[sel] = gd_pix * i_d
    grads.z_d = gd.reshape(z.shape)

    gs = np.zeros(sel.size)
    gs[sel] = (w1 * d_is + w3 / n_px) * i_s
    grads.z_s = gs.reshape(z.shape)

    sig_b = _sigmoid(z.z_b)
    grads.z_b = (w1 * d_b + w2 * 2.0 * tl.scene.b) * 6.0 * sig_b * (1.0 - sig_b)
    grads.z_light = w1 * d_logits
    sig_t = _sigmoid(z.z_t)
    grads.z_t = w1 * d_t * 21.0 * sig_t * (1.0 - sig_t)
    return breakdown, grads


# ---------------------------------------------------------------------------
# the fitter


@dataclass
class Decomposition:
    """Physical-domain result of a fit."""

    f_mel: np.ndarray
    f_blood: np.ndarray
    i_d: np.ndarray
    i_s: np.ndarray
    sensitivities: np.ndarray   # (D, 3)
    illuminant: np.ndarray      # (D,)
    reconstruction: RenderedImage
    losses: LossBreakdown
    scene: SceneParams
    latents: LatentImage
    mask: np.ndarray
    trace: list[dict] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    wall_time_s: float = 0.0


def decompose_latents(z: LatentImage, mask: np.ndarray, models: Models,
                      losses: LossBreakdown | None = None) -> Decomposition:
    """Materialise the physical maps and reconstruction for given latents."""
    tl = transform_latents(z)
    recon = render_image(
        {"m": tl.m, "h": tl.h, "i_d": tl.i_d, "i_s": tl.i_s}, tl.scene, models, mask
    )
    ev = evaluate_scene(tl.scene, models)
    mask = np.asarray(mask, dtype=bool)
    zero = lambda a: np.where(mask, a, 0.0)
    return Decomposition(
        f_mel=zero(mel_fraction(tl.m)),
        f_blood=zero(blood_fraction(tl.h)),
        i_d=zero(tl.i_d),
        i_s=zero(tl.i_s),
        sensitivities=ev.s,
        illuminant=ev.e,
        reconstruction=recon,
        losses=losses or LossBreakdown(0, 0, 0, 0, 0),
        scene=tl.scene,
        latents=z,
        mask=mask,
    )


def fit(
    observed_srgb: np.ndarray,
    mask: np.ndarray,
    models: Models,
    options: FitOptions | None = None,
    weights: LossWeights | None = None,
) -> Decomposition:
    """Fit the model to a gamma-encoded sRGB image by direct optimisation.

    The image is gamma-decoded on entry; all appearance terms live in linear
    space. Optimisation starts from z = 0 (mid-range parameters, unit
    shading) unless initial latents are supplied, and steps are accepted only
    when they do not increase the loss, so the loss trace is non-increasing.
    Stops when the relative decrease over a 50-iteration window falls below
    the tolerance, or at the iteration cap.

    Two engines share that contract. The default "gauss-newton" is a damped
    Gauss-Newton (Levenberg-Marquardt) step on all latents that exploits the
    problem structure: per-pixel 4x4 blocks are eliminated by a Schur
    complement against the 17 scene latents, so each iteration costs a few
    dense passes over the masked pixels. "adam" is a diagonal first-order
    method with backtracking halving; it satisfies the same interface but
    converges far more slowly in the ill-conditioned appearance valleys
    (pixel jacobian condition numbers are a few hundred), which is why it is
    not the default.
    """
    options = options or FitOptions()
    weights = weights or LossWeights()
    mask = np.asarray(mask, dtype=bool)
    if observed_srgb.ndim != 3 or observed_srgb.shape[-1] != 3:
        raise ValueError("observed image must be H x W x 3")
    if mask.shape != observed_srgb.shape[:2]:
        raise ValueError("mask shape does not match image")
    if not mask.any():
        raise ValueError("empty mask")
    observed_lin = gamma_decode(observed_srgb, models.pipeline)
    shape = mask.shape

    z = options.init.copy() if options.init is not None else LatentImage.zeros(shape)
    if z.shape != shape:
        raise ValueError("initial latents do not match image shape")
    pgt = options.pgt_shading
    if pgt is not None and pgt.shape != shape:
        raise ValueError("pseudo ground truth shading shape mismatch")

    def evaluate(latents, want_grad=True, allow_nonfinite=False):
        bd, gr = total_loss(latents, observed_lin, mask, weights, models,
                            pgt_shading=pgt, want_grad=want_grad)
        if not np.isfinite(bd.total) and not allow_nonfinite:
            raise RuntimeError(f"fit diverged: non-finite loss {bd!r}")
        return bd, gr

    t_start = time.perf_counter()
    warmup_iters = 0
    if options.optimizer == "adam":
        z, breakdown, trace, iterations, converged = _fit_adam(
            z, evaluate, options, shape)
    else:
        if (options.multi_start_scene and not options.freeze_scene
                and options.init is None and options.scene_warmup > 0):
            z, warmup_iters = _best_scene_start(
                z, evaluate, options, shape, observed_lin, mask, weights, models, pgt)
        z, breakdown, trace, iterations, converged = _fit_gauss_newton(
            z, evaluate, options, shape, observed_lin, mask, weights, models, pgt)
        iterations += warmup_iters

    result = decompose_latents(z, mask, models, losses=breakdown)
    result.trace = trace
    result.iterations = iterations
    result.converged = converged
    result.wall_time_s = time.perf_counter() - t_start
    return result


def _window_converged(trace_total: list[float], window: int, tol: float) -> bool:
    if len(trace_total) <= window:
        return False
    past = trace_total[-window - 1]
    return past - trace_total[-1] < tol * max(past, 1e-300)


def _fit_adam(z, evaluate, options: FitOptions, shape):
    """Backtracking Adam: per-parameter adaptive diagonal steps, monotone."""
    breakdown, grads = evaluate(z)
    x = z.pack()
    gvec = grads.pack()
    n_scene = 2 + N_LIGHTS + 1
    scene_slice = slice(x.size - n_scene, x.size) if options.freeze_scene else None

    mom1 = np.zeros_like(x)
    mom2 = np.zeros_like(x)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    trust = 1.0
    trace_total = [breakdown.total]
    trace = [{"iteration": 0, **breakdown.to_json_dict()}]
    converged = False
    it = 0

    for it in range(1, options.max_iterations + 1):
        if scene_slice is not None:
            gvec[scene_slice] = 0.0
        mom1 = beta1 * mom1 + (1 - beta1) * gvec
        mom2 = beta2 * mom2 + (1 - beta2) * gvec**2
        direction = (mom1 / (1 - beta1**it)) / (np.sqrt(mom2 / (1 - beta2**it)) + eps)

        accepted = False
        for _ in range(30):
            x_new = x - trust * options.step_size * direction
            z_new = LatentImage.unpack(x_new, shape)
            bd_new, gr_new = evaluate(z_new, allow_nonfinite=True)
            if np.isfinite(bd_new.total) and bd_new.total <= breakdown.total:
                accepted = True
                break
            trust *= 0.5
        if not accepted:
            converged = True  # no descent at the smallest trust
            break
        x, z, breakdown, gvec = x_new, z_new, bd_new, gr_new.pack()
        trust = min(1.0, trust * 2.0)
        trace_total.append(breakdown.total)
        if it % options.log_every == 0 or it == options.max_iterations:
            trace.append({"iteration": it, **breakdown.to_json_dict()})
        if _window_converged(trace_total, options.window, options.tolerance):
            converged = True
            break

    return z, breakdown, trace, it, converged


def _scene_start_candidates() -> list[tuple[np.ndarray, float]]:
    """Deterministic illuminant-family starting points for the scene latents:
    uniform mixture, daylight at three temperatures, incandescent, and a
    fluorescent-leaning blend."""
    cands = [(np.zeros(N_LIGHTS), 0.0)]
    for z_t in (-2.5, -1.5, 0.0, 1.5):
        logits = np.zeros(N_LIGHTS)
        logits[1] = 3.0
        cands.append((logits, z_t))
    logits_a = np.zeros(N_LIGHTS)
    logits_a[0] = 3.0
    cands.append((logits_a, 0.0))
    logits_f = np.zeros(N_LIGHTS)
    logits_f[2:] = 1.5
    cands.append((logits_f, 0.0))
    return cands


def _best_scene_start(z0, evaluate, options: FitOptions, shape,
                      observed_lin, mask, weights, models, pgt):
    """Pixels-only warmup fit under each candidate scene; returns the best.

    The joint problem has scene-level local minima (a wrong illuminant family
    explaining the global colour cast badly but stably). Keeping the scene
    frozen during warmup makes the candidate comparison discriminative: the
    achievable appearance under each light family is measured before the
    joint refinement is allowed to move the scene.
    """
    warm = replace(options, max_iterations=options.scene_warmup,
                   multi_start_scene=False, freeze_scene=True, log_every=10**9)
    best = None
    total = 0
    for logits, z_t in _scene_start_candidates():
        z_try = z0.copy()
        z_try.z_light = logits.copy()
        z_try.z_t = z_t
        z_w, bd, _, its, _ = _fit_gauss_newton(
            z_try, evaluate, warm, shape, observed_lin, mask, weights, models, pgt)
        total += its
        if best is None or bd.total < best[1].total:
            best = (z_w, bd)
    return best[0], total


def _gauss_newton_system(z: LatentImage, observed_lin, mask, weights: LossWeights,
                         models: Models, pgt_shading):
    """Per-pixel and scene Gauss-Newton blocks in latent space.

    Returns (h_pp (Np,4,4), h_ps (Np,4,17), h_ss (17,17), g_pix (Np,4),
    g_scene (17,)) using the convention H ~ 2 J^T J plus the exact diagonal
    curvature of the exp/prior terms; gradients are the exact analytic ones.
    """
    sel = mask.reshape(-1)
    n_px = int(sel.sum())
    tl = transform_latents(z)
    ev = evaluate_scene(tl.scene, models)
    s_mat, e, v, wb = ev.s, ev.e, ev.v, ev.wb
    a_mat, b_mat = ev.a_mat, ev.b_mat

    m = tl.m.reshape(-1)[sel]
    h = tl.h.reshape(-1)[sel]
    i_d = tl.i_d.reshape(-1)[sel]
    i_s = tl.i_s.reshape(-1)[sel]
    zb = z.z_b
    zt = z.z_t

    r, dr_dm, dr_dh = models.skin_lut.sample(m, h)
    rho = i_d[:, None] * r + i_s[:, None]
    f = rho * e
    i_raw = f @ s_mat

    w1 = weights.appearance
    scale_r = np.sqrt(w1 / n_px)

    # pixel jacobian columns (d lin / d latent), residual-scaled
    j_pix = np.empty((n_px, 3, 4))
    j_pix[:, :, 0] = (((dr_dm * e) @ s_mat) @ a_mat.T) * (i_d * m * (1 - m))[:, None]
    j_pix[:, :, 1] = (((dr_dh * e) @ s_mat) @ a_mat.T) * (i_d * h * (1 - h))[:, None]
    j_pix[:, :, 2] = (((r * e) @ s_mat) @ a_mat.T) * i_d[:, None]
    j_pix[:, :, 3] = (a_mat @ v)[None, :] * i_s[:, None]
    j_pix *= scale_r

    # scene jacobian columns: z_b (2), z_light (14), z_t (1)
    j_sc = np.empty((n_px, 3, 17))
    sig_b = _sigmoid(zb)
    db_dz = 6.0 * sig_b * (1.0 - sig_b)
    for k in range(2):
        col = i_raw @ ev.da_db[k].T + (f @ ev.ds_db[k]) @ a_mat.T
        j_sc[:, :, k] = col * db_dz[k]

    u = (s_mat.T @ ev.e_basis) / v[:, None] ** 2          # (3, 14)
    d_w = np.empty((n_px, 3, 14))
    for j in range(N_LIGHTS):
        term = -i_raw * u[:, j] + wb * ((rho * ev.e_basis[:, j]) @ s_mat)
        d_w[:, :, j] = term @ b_mat.T
    j_sc[:, :, 2:16] = d_w @ softmax_jacobian(ev.weights)

    sig_t = _sigmoid(zt)
    dt_dz = 21.0 * sig_t * (1.0 - sig_t)
    term_t = -i_raw * (s_mat.T @ ev.de_dt) / v**2 + wb * ((rho * ev.de_dt) @ s_mat)
    j_sc[:, :, 16] = (term_t @ b_mat.T) * dt_dz
    j_sc *= scale_r

    h_pp = 2.0 * np.einsum("pci,pcj->pij", j_pix, j_pix)
    h_ps = 2.0 * np.einsum("pci,pcj->pij", j_pix, j_sc)
    h_ss = 2.0 * np.einsum("pci,pcj->ij", j_sc, j_sc)

    # exact curvature of the smooth extras
    h_pp[:, 3, 3] += weights.specular_sparsity / n_px * i_s
    if pgt_shading is not None:
        pgt = pgt_shading.reshape(-1)[sel]
        denom = float(i_d @ i_d)
        scale = float(i_d @ pgt) / denom if denom > 0 else 0.0
        h_pp[:, 2, 2] += 2.0 * weights.shading_supervision / n_px * (scale * i_d) ** 2
    h_ss[:2, :2] += np.diag(2.0 * weights.camera_prior * db_dz**2)

    bd, grads = total_loss(z, observed_lin, mask, weights, models,
                           pgt_shading=pgt_shading, want_grad=True)
    g_pix = np.stack(
        [grads.z_m.reshape(-1)[sel], grads.z_h.reshape(-1)[sel],
         grads.z_d.reshape(-1)[sel], grads.z_s.reshape(-1)[sel]], axis=1
    )
    g_scene = np.concatenate([grads.z_b, grads.z_light, [grads.z_t]])
    return bd, h_pp, h_ps, h_ss, g_pix, g_scene


def _diffuse_forward(m, h, i_d, ev, models):
    """Pure-diffuse linear RGB and its partials for batched pixel refinement."""
    r, dr_dm, dr_dh = models.skin_lut.sample(m, h)
    base = ((r * ev.e) @ ev.s) @ ev.a_mat.T       # lin at unit diffuse shading
    lin = i_d[:, None] * base
    dm = ((dr_dm * ev.e) @ ev.s) @ ev.a_mat.T
    dh = ((dr_dh * ev.e) @ ev.s) @ ev.a_mat.T
    return lin, dm, dh


def _newton_refine(m, h, i_d, y, ev, models, iters: int = 12):
    """Batched damped Newton on (m, h, log i_d) against the appearance
    residual, i_s pinned at zero. Returns refined params and residual norms."""
    m, h, i_d = m.copy(), h.copy(), i_d.copy()
    lam = np.full(m.shape, 1e-3)
    lin, dm, dh = _diffuse_forward(m, h, i_d, ev, models)
    res = lin - y
    cur = np.sum(res**2, axis=1)
    eye = np.eye(3)
    for _ in range(iters):
        jac = np.stack([i_d[:, None] * dm, i_d[:, None] * dh, lin], axis=2)
        g = np.einsum("pc,pcj->pj", res, jac)
        hess = np.einsum("pci,pcj->pij", jac, jac)
        damped = hess + (lam * np.maximum(np.einsum("pii->p", hess) / 3.0, 1e-30))[
            :, None, None] * eye
        try:
            step = -np.linalg.solve(damped, g[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        m2 = np.clip(m + step[:, 0], 0.0, 1.0)
        h2 = np.clip(h + step[:, 1], 0.0, 1.0)
        id2 = i_d * np.exp(np.clip(step[:, 2], -2.0, 2.0))
        lin2, dm2, dh2 = _diffuse_forward(m2, h2, id2, ev, models)
        res2 = lin2 - y
        new = np.sum(res2**2, axis=1)
        ok = new < cur
        m[ok], h[ok], i_d[ok] = m2[ok], h2[ok], id2[ok]
        cur[ok] = new[ok]
        res[ok], lin[ok], dm[ok], dh[ok] = res2[ok], lin2[ok], dm2[ok], dh2[ok]
        lam = np.where(ok, np.maximum(lam * 0.3, 1e-10), lam * 10.0)
    return m, h, i_d, cur


def _polish_pixels(z: LatentImage, observed_lin, mask, weights: LossWeights,
                   models: Models, pgt_shading, n_grid: int = 6,
                   top_k: int | None = None) -> LatentImage:
    """Deterministic multi-start refinement of the per-pixel latents.

    Given the scene, the loss separates over pixels, so each pixel may be
    independently replaced by a better candidate: the top-k entries of a
    coarse (m, h) grid (with closed-form optimal diffuse shading and zero
    specular) are each polished by a batched damped Newton solve, and a pixel
    switches only when the refined candidate strictly lowers its loss share.
    The total loss therefore never increases. This rescues pixels parked in
    shallow spurious minima created by the i_s >= 0 constraint and the
    coordinate bounds.
    """
    sel = mask.reshape(-1)
    n_px = int(sel.sum())
    tl = transform_latents(z)
    ev = evaluate_scene(tl.scene, models)
    y = observed_lin.reshape(-1, 3)[sel]
    w1, w3, w4 = weights.appearance, weights.specular_sparsity, weights.shading_supervision

    m = tl.m.reshape(-1)[sel]
    h = tl.h.reshape(-1)[sel]
    i_d = tl.i_d.reshape(-1)[sel]
    i_s = tl.i_s.reshape(-1)[sel]
    r, _, _ = models.skin_lut.sample(m, h)
    lin = ((i_d[:, None] * r + i_s[:, None]) * ev.e) @ ev.s @ ev.a_mat.T
    cur = w1 * np.sum((lin - y) ** 2, axis=1) + w3 * i_s
    scale = 0.0
    if pgt_shading is not None:
        pgt = pgt_shading.reshape(-1)[sel]
        scale = float(i_d @ pgt) / float(i_d @ i_d)
        cur = cur + w4 * (scale * i_d - pgt) ** 2

    # coarse candidates: projected diffuse shading per grid point
    coords = np.linspace(0.03, 0.97, n_grid)
    mg, hg = [a.ravel() for a in np.meshgrid(coords, coords, indexing="ij")]
    rg, _, _ = models.skin_lut.sample(mg, hg)
    dirs = ((rg * ev.e) @ ev.s) @ ev.a_mat.T            # (n_grid^2, 3)
    dd = np.sum(dirs**2, axis=1)
    yd = y @ dirs.T                                     # (n_px, n_grid^2)
    yy = np.sum(y**2, axis=1)
    id_star = np.clip(yd / dd, 1e-6, None)
    cand = yy[:, None] - 2 * id_star * yd + id_star**2 * dd
    k = top_k if top_k is not None else cand.shape[1]
    order = np.argsort(cand, axis=1)[:, :k]

    rows = np.arange(n_px)
    best = None
    for k in range(order.shape[1]):
        idx = order[:, k]
        mk, hk, idk, resk = _newton_refine(
            mg[idx], hg[idx], id_star[rows, idx], y, ev, models)
        lossk = w1 * resk
        if pgt_shading is not None:
            lossk = lossk + w4 * (scale * idk - pgt) ** 2
        if best is None:
            best = [mk, hk, idk, lossk]
        else:
            win = lossk < best[3]
            for arr, new in zip(best, (mk, hk, idk, lossk)):
                arr[win] = new[win]

    better = best[3] < cur
    if not better.any():
        return z
    z_new = z.copy()
    idx_flat = np.flatnonzero(sel)[better]
    eps = 1e-7
    z_new.z_m.reshape(-1)[idx_flat] = _logit(np.clip(best[0][better], eps, 1 - eps))
    z_new.z_h.reshape(-1)[idx_flat] = _logit(np.clip(best[1][better], eps, 1 - eps))
    z_new.z_d.reshape(-1)[idx_flat] = np.log(best[2][better])
    z_s_flat = z_new.z_s.reshape(-1)
    z_s_flat[idx_flat] = np.minimum(z_s_flat[idx_flat], -18.0)
    return z_new


def _fit_gauss_newton(z, evaluate, options: FitOptions, shape,
                      observed_lin, mask, weights, models, pgt):
    """Levenberg-Marquardt iteration with pixel-block Schur elimination.

    A coarse per-pixel multi-start refinement runs early and again whenever
    the loss plateaus; iteration stops only when it no longer helps.
    """
    sel = mask.reshape(-1)
    lam = 1e-3
    breakdown, _ = evaluate(z, want_grad=False)
    trace_total = [breakdown.total]
    trace = [{"iteration": 0, **breakdown.to_json_dict()}]
    converged = False
    it = 0

    def try_polish(current_z, current_bd):
        z_p = _polish_pixels(current_z, observed_lin, mask, weights, models,
                             pgt, options.polish_grid)
        if z_p is current_z:
            return current_z, current_bd, False
        bd_p, _ = evaluate(z_p, want_grad=False)
        if bd_p.total <= current_bd.total:
            return z_p, bd_p, bd_p.total < current_bd.total * (1 - 1e-12)
        return current_z, current_bd, False

    for it in range(1, options.max_iterations + 1):
        bd, h_pp, h_ps, h_ss, g_pix, g_scene = _gauss_newton_system(
            z, observed_lin, mask, weights, models, pgt)
        diag_pp = np.einsum("pii->pi", h_pp).copy()
        diag_ss = np.diag(h_ss).copy()
        floor = 1e-12 * max(diag_pp.max(initial=0.0), diag_ss.max(initial=0.0), 1e-30)

        accepted = False
        for _ in range(25):
            p_blocks = h_pp + (lam * diag_pp + floor)[:, :, None] * np.eye(4)
            rhs = np.concatenate([-g_pix[:, :, None], -h_ps], axis=2)
            try:
                sol = np.linalg.solve(p_blocks, rhs)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x1 = sol[:, :, 0]          # P^-1 (-g_pix)
            x2 = sol[:, :, 1:]         # P^-1 (-h_ps) = -P^-1 C

            if options.freeze_scene:
                d_scene = np.zeros(17)
            else:
                s_mat = (h_ss + np.diag(lam * diag_ss + floor)
                         + np.einsum("pic,pij->cj", h_ps, x2))
                rhs_s = -g_scene - np.einsum("pic,pi->c", h_ps, x1)
                try:
                    d_scene = np.linalg.solve(s_mat, rhs_s)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
            # cap per-latent motion: keeps sigmoid latents out of saturation
            # and exp latents out of overflow on early aggressive steps; the
            # global scene latents move on a tighter leash
            d_scene = np.clip(d_scene, -options.scene_max_step, options.scene_max_step)
            d_pix = np.clip(x1 + x2 @ d_scene, -options.max_step, options.max_step)

            z_new = z.copy()
            for idx, name in enumerate(LatentImage.MAP_FIELDS):
                upd = np.zeros(sel.size)
                upd[sel] = d_pix[:, idx]
                setattr(z_new, name, getattr(z, name) + upd.reshape(shape))
            z_new.z_b = z.z_b + d_scene[:2]
            z_new.z_light = z.z_light + d_scene[2:16]
            z_new.z_t = z.z_t + d_scene[16]

            bd_new, _ = evaluate(z_new, want_grad=False, allow_nonfinite=True)
            if np.isfinite(bd_new.total) and bd_new.total <= bd.total:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            z, breakdown, improved = try_polish(z, breakdown)
            if improved:
                trace_total.append(breakdown.total)
                continue
            converged = True
            break
        z, breakdown = z_new, bd_new
        lam = max(lam * 0.3, 1e-12)
        if it == 2:
            z, breakdown, _ = try_polish(z, breakdown)
        trace_total.append(breakdown.total)
        if it % options.log_every == 0 or it == options.max_iterations:
            trace.append({"iteration": it, **breakdown.to_json_dict()})
        if _window_converged(trace_total, options.window, options.tolerance):
            z, breakdown, improved = try_polish(z, breakdown)
            if not improved:
                converged = True
                break
            trace_total.append(breakdown.total)

    return z, breakdown, trace, it, converged


# ---------------------------------------------------------------------------
# finite-difference validation of the full loss gradient


def draw_latent_point(rng: np.random.Generator, models: Models,
                      shape: tuple[int, int] = (2, 2)) -> LatentImage:
    """Random in-range latents whose physical values sit inside LUT cells and
    away from the daylight branch point, mirroring the renderer's sampler."""
    z = LatentImage.zeros(shape)
    n = shape[0] * shape[1]
    ms = np.empty(n)
    hs = np.empty(n)
    ids = np.empty(n)
    iss = np.empty(n)
    scene = logits = None
    for i in range(n):
        p, scene, logits = draw_checkable_point(rng, models)
        ms[i], hs[i], ids[i], iss[i] = p.m, p.h, p.i_d, p.i_s
    z.z_m = _logit(ms).reshape(shape)
    z.z_h = _logit(hs).reshape(shape)
    z.z_d = np.log(ids).reshape(shape)
    z.z_s = np.log(iss).reshape(shape)
    z.z_b = 2.0 * np.arctanh(scene.b / 3.0)
    z.z_light = logits - logits.mean()
    z.z_t = _logit(np.array([(scene.light.t - 1.0) / 21.0]))[0]
    return z


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def check_total_loss_gradients(
    models: Models,
    n_points: int = 100,
    step: float = 1e-4,
    seed: int = 0,
    shape: tuple[int, int] = (2, 2),
) -> GradCheckReport:
    """Compare the analytic total_loss gradient with central differences over
    every latent at random in-range points; half the points exercise the
    shading supervision branch."""
    rng = np.random.default_rng(seed)
    weights = LossWeights()
    mask = np.ones(shape, dtype=bool)
    worst: dict[str, float] = {}

    for point in range(n_points):
        z = draw_latent_point(rng, models, shape)
        z_obs = draw_latent_point(rng, models, shape)
        tl = transform_latents(z_obs)
        obs = render_image(
            {"m": tl.m, "h": tl.h, "i_d": tl.i_d, "i_s": tl.i_s}, tl.scene, models, mask
        ).linrgb
        pgt = rng.uniform(0.2, 1.5, shape) if point % 2 else None

        _, grads = total_loss(z, obs, mask, weights, models, pgt_shading=pgt)
        gvec = grads.pack()
        x = z.pack()
        fd = np.empty_like(x)
        for j in range(x.size):
            for sign in (1.0, -1.0):
                xj = x.copy()
                xj[j] += sign * step
                bd, _ = total_loss(
                    LatentImage.unpack(xj, shape), obs, mask, weights, models,
                    pgt_shading=pgt, want_grad=False,
                )
                if sign > 0:
                    hi = bd.total
                else:
                    lo = bd.total
            fd[j] = (hi - lo) / (2 * step)

        n = shape[0] * shape[1]
        groups = {
            "z_m": slice(0, n), "z_h": slice(n, 2 * n),
            "z_d": slice(2 * n, 3 * n), "z_s": slice(3 * n, 4 * n),
            "z_b": slice(4 * n, 4 * n + 2),
            "z_light": slice(4 * n + 2, 4 * n + 2 + N_LIGHTS),
            "z_t": slice(4 * n + 2 + N_LIGHTS, 4 * n + 3 + N_LIGHTS),
        }
        for name, sl in groups.items():
            err = _rel_err(gvec[sl], fd[sl], floor=1e-10)
            worst[name] = max(worst.get(name, 0.0), err)

    return GradCheckReport(
        max_rel_error=max(worst.values()), per_parameter=worst, n_points=n_points
    )
