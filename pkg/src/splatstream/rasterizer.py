"""Differentiable tile-based splat rendering.

Forward: gaussians are projected to 2D splats, binned into 16x16-pixel tiles
by the axis-aligned bounding box of their support ellipse (refined by an
exact circumscribed-circle test), depth-sorted front-to-back (ties by
ascending id) and alpha-composited per pixel:

    C = sum_i c_i * a_i * T_i,   a_i = alpha_i * G_i,
    T_i = prod_{j<i} (1 - a_j)

G_i is the 2D gaussian weight exp(-q/2) with q the Mahalanobis distance
squared, zero outside the support ellipse (q > SUPPORT_Q) so that tile
binning reproduces a full per-pixel compositor exactly, and clamped to
0.999 to keep 1 - a_i away from zero. The support radius is sqrt(50) sigma:
there the truncation jump exp(-25) ~ 1e-11 sits far below both the 1e-6
render tolerance and the finite-difference gradient tolerances (a 3-sigma
cutoff would leave a 1.1e-2 jump, visible to both). Compositing stops once
transmittance would drop below 1e-4; remaining transmittance multiplies the
background.

Backward: exact analytic partials of <upstream, rendered> for every gaussian
parameter, chaining through projection, spherical harmonics and activations.
Tiles are independent work units; per-splat partial sums are merged in a
fixed tile order, so results are bit-deterministic. render_and_backward
fuses both passes for the training loop, reusing the per-tile compositing
state instead of recomputing it.

All math is float64 regardless of the cloud's float32 storage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import CameraIntrinsics, PoseSE3, SplatCloud
from .errors import InvalidParameterError
from .evalkit import ssim_with_grad

TILE = 16
T_EPS = 1e-4            # transmittance early-exit threshold
SUPPORT_Q = 50.0        # support cutoff on the Mahalanobis square (~7 sigma)
G_CLAMP = 0.999
LOSS_SSIM_WEIGHT = 0.2  # photometric loss: (1-w) * L1 + w * (1 - SSIM)


@dataclass
class RenderedImage:
    pixels: np.ndarray           # (H, W, 3) linear RGB
    alpha: np.ndarray            # (H, W) accumulated opacity
    per_tile_counts: np.ndarray  # (tilesY, tilesX) splats touching each tile


@dataclass
class GradientSet:
    """Partials aligned index-for-index with the input cloud, plus the
    densification statistics (image-plane position gradient magnitude in
    NDC units and a 0/1 observation flag per gaussian)."""

    ids: np.ndarray
    d_position: np.ndarray       # (N, 3)
    d_rotation: np.ndarray       # (N, 4) w.r.t. the raw stored quaternion
    d_log_scale: np.ndarray      # (N, 3)
    d_sh: np.ndarray             # (N, K, 3)
    d_opacity_logit: np.ndarray  # (N,)
    grad2d_norm: np.ndarray      # (N,)
    observed: np.ndarray         # (N,) uint8


def _extract_params(cloud: SplatCloud) -> dict:
    return {
        "positions": cloud.positions.astype(np.float64),
        "rotations": cloud.rotations.astype(np.float64),
        "log_scales": cloud.log_scales.astype(np.float64),
        "sh": cloud.sh.astype(np.float64),
        "opacity_logits": cloud.opacity_logits.astype(np.float64),
    }


class _Projected:
    """Everything the compositor needs about the splats visible in one view."""

    def __init__(self, params: dict, pose: PoseSE3, intr: CameraIntrinsics):
        n = params["positions"].shape[0]
        self.n_total = n
        self.pose = pose
        self.intr = intr

        rot = core.quat_to_rotmat(params["rotations"]) if n else np.zeros((0, 3, 3))
        var = np.exp(2.0 * params["log_scales"])
        sigmas = np.einsum("nik,nk,njk->nij", rot, var, rot)
        proj = core.project_batch(params["positions"], sigmas, pose, intr)

        vidx = np.flatnonzero(proj["valid"])
        self.vidx = vidx
        self.rotmats = rot[vidx]
        self.var = var[vidx]
        self.mean2d = proj["mean2d"][vidx]
        self.cov2d = proj["cov2d"][vidx]
        self.depth = proj["depth"][vidx]
        self.p_cam = proj["p_cam"][vidx]
        self.jac = proj["jac"][vidx]
        self.sigma_cam = proj["sigma_cam"][vidx]

        # conic (inverse 2D covariance) packed as (A, B, C)
        a = self.cov2d[:, 0, 0]
        b = self.cov2d[:, 0, 1]
        c = self.cov2d[:, 1, 1]
        det = a * c - b * b
        self.conic = np.stack([c / det, -b / det, a / det], axis=-1)

        # support-ellipse AABB half extents and circumscribed-circle radius^2
        self.half_ext = np.sqrt(SUPPORT_Q) * np.sqrt(np.stack([a, c], axis=-1))
        lam_max = (a + c) / 2.0 + np.sqrt(((a - c) / 2.0) ** 2 + b * b)
        self.support_r2 = SUPPORT_Q * lam_max

        self.alpha = core.sigmoid(params["opacity_logits"][vidx]) \
            if len(vidx) else np.zeros(0)

        # view-dependent color
        cam_center = pose.camera_center()
        rel = params["positions"][vidx] - cam_center
        self.dir_len = np.linalg.norm(rel, axis=-1)
        self.dirs = rel / self.dir_len[:, None] if len(vidx) else rel
        degree = int(round(np.sqrt(params["sh"].shape[1]))) - 1
        self.degree = degree
        self.basis = core.sh_basis(self.dirs, degree) if len(vidx) \
            else np.zeros((0, 1))
        self.sh = params["sh"][vidx]
        self.color_pre = 0.5 + np.einsum("mk,mkc->mc", self.basis, self.sh)
        self.color = np.maximum(self.color_pre, 0.0)

        self.ids = None  # filled by caller for deterministic tie-breaks

    def bin_tiles(self, width: int, height: int):
        """tile -> candidate splat indices (into the projected arrays),
        each candidate list sorted by (depth, id). Candidates are splats
        whose support could reach a pixel center of the tile; the circle
        refinement only drops provably zero contributions."""
        tiles_x = (width + TILE - 1) // TILE
        tiles_y = (height + TILE - 1) // TILE
        buckets = [[] for _ in range(tiles_x * tiles_y)]
        touched = np.zeros(len(self.vidx), dtype=bool)
        lo = self.mean2d - self.half_ext
        hi = self.mean2d + self.half_ext
        tx0 = np.clip(np.floor(lo[:, 0] / TILE).astype(int), 0, tiles_x - 1)
        tx1 = np.clip(np.floor(hi[:, 0] / TILE).astype(int), 0, tiles_x - 1)
        ty0 = np.clip(np.floor(lo[:, 1] / TILE).astype(int), 0, tiles_y - 1)
        ty1 = np.clip(np.floor(hi[:, 1] / TILE).astype(int), 0, tiles_y - 1)
        in_image = (hi[:, 0] >= 0) & (lo[:, 0] < width) & \
                   (hi[:, 1] >= 0) & (lo[:, 1] < height)
        for m in np.flatnonzero(in_image):
            mx, my = self.mean2d[m]
            r2 = self.support_r2[m]
            hit = False
            for ty in range(ty0[m], ty1[m] + 1):
                cy = min(max(my, ty * TILE + 0.5),
                         min(ty * TILE + TILE, height) - 0.5)
                for tx in range(tx0[m], tx1[m] + 1):
                    cx = min(max(mx, tx * TILE + 0.5),
                             min(tx * TILE + TILE, width) - 0.5)
                    if (mx - cx) ** 2 + (my - cy) ** 2 <= r2:
                        buckets[ty * tiles_x + tx].append(m)
                        hit = True
            touched[m] = hit
        self.touched = touched
        order_key_id = self.ids
        sorted_buckets = []
        for cand in buckets:
            if cand:
                cand = np.asarray(cand)
                cand = cand[np.lexsort((order_key_id[cand], self.depth[cand]))]
            else:
                cand = np.zeros(0, dtype=int)
            sorted_buckets.append(cand)
        return tiles_x, tiles_y, sorted_buckets


def _tile_weights(prep: _Projected, cand: np.ndarray, px: np.ndarray):
    """Per-splat, per-pixel compositing quantities for one tile.

    Returns (delta, q, expq, g, a, t_before, t_after, include).
    Shapes are (S, P, ...) with S splats front-to-back and P pixels.
    """
    mean = prep.mean2d[cand]
    conic = prep.conic[cand]
    delta = px[None, :, :] - mean[:, None, :]
    dx, dy = delta[..., 0], delta[..., 1]
    q = (conic[:, 0, None] * dx * dx
         + 2.0 * conic[:, 1, None] * dx * dy
         + conic[:, 2, None] * dy * dy)
    expq = np.exp(-0.5 * q)
    g = np.where(q <= SUPPORT_Q, np.minimum(expq, G_CLAMP), 0.0)
    a = prep.alpha[cand][:, None] * g
    t_after = np.cumprod(1.0 - a, axis=0)
    t_before = np.vstack([np.ones((1, a.shape[1])), t_after[:-1]])
    include = t_after >= T_EPS
    return delta, q, expq, g, a, t_before, t_after, include


def _tile_pixels(tx, ty, width, height):
    x0, y0 = tx * TILE, ty * TILE
    x1, y1 = min(x0 + TILE, width), min(y0 + TILE, height)
    cols, rows = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    return px, (y0, y1, x0, x1)


def _stop_transmittance(t_after, include):
    masked = np.where(include, t_after, 1.0)
    return masked.min(axis=0) if t_after.shape[0] else np.ones(t_after.shape[1])


def _composite(prep: _Projected, tiles_x, tiles_y, buckets, width, height,
               bg, want_cache: bool):
    pixels = np.empty((height, width, 3), dtype=np.float64)
    pixels[:] = bg
    alpha_img = np.zeros((height, width), dtype=np.float64)
    counts = np.zeros((tiles_y, tiles_x), dtype=np.int64)
    cache = [] if want_cache else None

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            cand = buckets[ty * tiles_x + tx]
            counts[ty, tx] = len(cand)
            if len(cand) == 0:
                continue
            px, rect = _tile_pixels(tx, ty, width, height)
            weights = _tile_weights(prep, cand, px)
            _, _, _, _, a, t_before, t_after, include = weights
            w = a * t_before * include
            tile_rgb = np.einsum("sp,sc->pc", w, prep.color[cand])
            t_stop = _stop_transmittance(t_after, include)
            tile_rgb += t_stop[:, None] * bg
            y0, y1, x0, x1 = rect
            pixels[y0:y1, x0:x1] = tile_rgb.reshape(y1 - y0, x1 - x0, 3)
            alpha_img[y0:y1, x0:x1] = (1.0 - t_stop).reshape(y1 - y0, x1 - x0)
            if want_cache:
                cache.append((cand, px, rect, weights))

    image = RenderedImage(pixels=pixels, alpha=alpha_img, per_tile_counts=counts)
    return image, cache


def _tile_entries(prep, tiles_x, tiles_y, buckets, width, height):
    """Recompute per-tile compositing state (for the standalone backward)."""
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            cand = buckets[ty * tiles_x + tx]
            if len(cand) == 0:
                continue
            px, rect = _tile_pixels(tx, ty, width, height)
            yield cand, px, rect, _tile_weights(prep, cand, px)


def _pixel_space_backward(prep: _Projected, entries, upstream, bg):
    """Accumulate per-splat partials in pixel space across tiles."""
    m = len(prep.vidx)
    acc_mean2d = np.zeros((m, 2))
    acc_conic = np.zeros((m, 3))
    acc_alpha = np.zeros(m)
    acc_color = np.zeros((m, 3))

    for cand, px, rect, weights in entries:
        y0, y1, x0, x1 = rect
        u = upstream[y0:y1, x0:x1].reshape(-1, 3)
        delta, q, expq, g, a, t_before, t_after, include = weights
        w = a * t_before * include
        col = prep.color[cand]

        acc_color[cand] += np.einsum("sp,pc->sc", w, u)

        # color composited behind each splat (suffix sums + background)
        cw = w[:, :, None] * col[:, None, :]
        tail = np.cumsum(cw[::-1], axis=0)[::-1]
        t_stop = _stop_transmittance(t_after, include)
        behind = tail - cw + (t_stop[:, None] * bg)[None]

        u_dot_c = np.einsum("pc,sc->sp", u, col)
        u_dot_behind = np.einsum("pc,spc->sp", u, behind)
        da = include * (u_dot_c * t_before - u_dot_behind / (1.0 - a))

        acc_alpha[cand] += np.einsum("sp,sp->s", da, g)
        dg = da * prep.alpha[cand][:, None]
        dq = dg * np.where((q <= SUPPORT_Q) & (expq < G_CLAMP),
                           -0.5 * expq, 0.0)

        dx, dy = delta[..., 0], delta[..., 1]
        acc_conic[cand, 0] += np.einsum("sp,sp->s", dq, dx * dx)
        acc_conic[cand, 1] += np.einsum("sp,sp->s", dq, 2.0 * dx * dy)
        acc_conic[cand, 2] += np.einsum("sp,sp->s", dq, dy * dy)
        conic = prep.conic[cand]
        ddx = 2.0 * conic[:, 0, None] * dx + 2.0 * conic[:, 1, None] * dy
        ddy = 2.0 * conic[:, 1, None] * dx + 2.0 * conic[:, 2, None] * dy
        acc_mean2d[cand, 0] += np.einsum("sp,sp->s", dq, -ddx)
        acc_mean2d[cand, 1] += np.einsum("sp,sp->s", dq, -ddy)

    return acc_mean2d, acc_conic, acc_alpha, acc_color


def _chain_to_params(prep: _Projected, params, pose, intr, ids,
                     acc_mean2d, acc_conic, acc_alpha, acc_color) -> GradientSet:
    """Chain pixel-space partials back to the gaussian parameters."""
    n = params["positions"].shape[0]
    k = params["sh"].shape[1]
    grads = GradientSet(
        ids=np.asarray(ids, dtype=np.uint64).copy(),
        d_position=np.zeros((n, 3)),
        d_rotation=np.zeros((n, 4)),
        d_log_scale=np.zeros((n, 3)),
        d_sh=np.zeros((n, k, 3)),
        d_opacity_logit=np.zeros(n),
        grad2d_norm=np.zeros(n),
        observed=np.zeros(n, dtype=np.uint8),
    )
    m = len(prep.vidx)
    grads.observed[prep.vidx] = prep.touched.astype(np.uint8)
    if m == 0:
        return grads

    width, height = intr.width, intr.height
    grads.grad2d_norm[prep.vidx] = np.hypot(acc_mean2d[:, 0] * width / 2.0,
                                            acc_mean2d[:, 1] * height / 2.0)

    alpha = prep.alpha
    grads.d_opacity_logit[prep.vidx] = acc_alpha * alpha * (1.0 - alpha)

    # conic -> cov2d: dL/dSigma2d = -P Ghat P for symmetric P, Ghat
    p2 = np.empty((m, 2, 2))
    p2[:, 0, 0] = prep.conic[:, 0]
    p2[:, 0, 1] = p2[:, 1, 0] = prep.conic[:, 1]
    p2[:, 1, 1] = prep.conic[:, 2]
    ghat = np.empty((m, 2, 2))
    ghat[:, 0, 0] = acc_conic[:, 0]
    ghat[:, 0, 1] = ghat[:, 1, 0] = acc_conic[:, 1] / 2.0
    ghat[:, 1, 1] = acc_conic[:, 2]
    d_cov2d = -np.einsum("mij,mjk,mkl->mil", p2, ghat, p2)

    # cov2d = J M J^T + b I with M the camera-space covariance
    d_sigma_cam = np.einsum("mji,mjk,mkl->mil", prep.jac, d_cov2d, prep.jac)
    d_jac = 2.0 * np.einsum("mij,mjk,mkl->mil", d_cov2d, prep.jac, prep.sigma_cam)

    fx, fy = intr.fx, intr.fy
    x, y, z = prep.p_cam[:, 0], prep.p_cam[:, 1], prep.p_cam[:, 2]
    d_pcam = np.einsum("mij,mi->mj", prep.jac, acc_mean2d)  # projection of mean
    d_pcam[:, 0] += d_jac[:, 0, 2] * (-fx / z**2)
    d_pcam[:, 1] += d_jac[:, 1, 2] * (-fy / z**2)
    d_pcam[:, 2] += (d_jac[:, 0, 0] * (-fx / z**2)
                     + d_jac[:, 1, 1] * (-fy / z**2)
                     + d_jac[:, 0, 2] * (2.0 * fx * x / z**3)
                     + d_jac[:, 1, 2] * (2.0 * fy * y / z**3))

    d_position = d_pcam @ pose.rotation  # W^T applied to each row
    d_sigma = np.einsum("ji,mjk,kl->mil", pose.rotation, d_sigma_cam,
                        pose.rotation)

    # color path: sh coefficients and the view direction's dependence on mu
    clamp_mask = (prep.color_pre > 0.0).astype(np.float64)
    gc = acc_color * clamp_mask
    grads.d_sh[prep.vidx] = np.einsum("mk,mc->mkc", prep.basis, gc)
    basis_grad = core.sh_basis_grad(prep.dirs, prep.degree)
    d_dir = np.einsum("mc,mkc,mkd->md", gc, prep.sh, basis_grad)
    eye = np.eye(3)[None]
    dir_jac = (eye - prep.dirs[:, :, None] * prep.dirs[:, None, :]) \
        / prep.dir_len[:, None, None]
    d_position += np.einsum("mij,mj->mi", dir_jac, d_dir)

    grads.d_position[prep.vidx] = d_position

    # Sigma = R D R^T with D = diag(exp(2 ls))
    rot = prep.rotmats
    d_rot = 2.0 * np.einsum("mij,mjk,mk->mik", d_sigma, rot, prep.var)
    rtvr = np.einsum("mji,mjk,mkl->mil", rot, d_sigma, rot)
    grads.d_log_scale[prep.vidx] = \
        np.einsum("mkk->mk", rtvr) * 2.0 * prep.var

    # rotation matrix -> unit quaternion -> raw stored quaternion
    q_raw = params["rotations"][prep.vidx]
    q_norm = np.linalg.norm(q_raw, axis=-1)
    qh = q_raw / q_norm[:, None]
    w_, x_, y_, z_ = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    gr = d_rot
    d_qh = np.empty((m, 4))
    d_qh[:, 0] = 2.0 * (-z_ * gr[:, 0, 1] + y_ * gr[:, 0, 2]
                        + z_ * gr[:, 1, 0] - x_ * gr[:, 1, 2]
                        - y_ * gr[:, 2, 0] + x_ * gr[:, 2, 1])
    d_qh[:, 1] = 2.0 * (y_ * gr[:, 0, 1] + z_ * gr[:, 0, 2]
                        + y_ * gr[:, 1, 0] - 2 * x_ * gr[:, 1, 1]
                        - w_ * gr[:, 1, 2] + z_ * gr[:, 2, 0]
                        + w_ * gr[:, 2, 1] - 2 * x_ * gr[:, 2, 2])
    d_qh[:, 2] = 2.0 * (-2 * y_ * gr[:, 0, 0] + x_ * gr[:, 0, 1]
                        + w_ * gr[:, 0, 2] + x_ * gr[:, 1, 0]
                        + z_ * gr[:, 1, 2] - w_ * gr[:, 2, 0]
                        + z_ * gr[:, 2, 1] - 2 * y_ * gr[:, 2, 2])
    d_qh[:, 3] = 2.0 * (-2 * z_ * gr[:, 0, 0] - w_ * gr[:, 0, 1]
                        + x_ * gr[:, 0, 2] + w_ * gr[:, 1, 0]
                        - 2 * z_ * gr[:, 1, 1] + y_ * gr[:, 1, 2]
                        + x_ * gr[:, 2, 0] + y_ * gr[:, 2, 1])
    proj_out = d_qh - qh * np.einsum("mi,mi->m", qh, d_qh)[:, None]
    grads.d_rotation[prep.vidx] = proj_out / q_norm[:, None]

    return grads


def rasterize(cloud: SplatCloud, pose: PoseSE3, intr: CameraIntrinsics,
              background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Render a cloud into an H x W x 3 image (linear RGB)."""
    params = _extract_params(cloud)
    return render_arrays(params, cloud.ids, pose, intr, background)


def render_arrays(params: dict, ids, pose: PoseSE3, intr: CameraIntrinsics,
                  background=(0.0, 0.0, 0.0)) -> RenderedImage:
    height, width = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64)
    prep = _Projected(params, pose, intr)
    prep.ids = np.asarray(ids, dtype=np.uint64)[prep.vidx]
    tiles_x, tiles_y, buckets = prep.bin_tiles(width, height)
    image, _ = _composite(prep, tiles_x, tiles_y, buckets, width, height,
                          bg, want_cache=False)
    return image


def _check_upstream(upstream, height, width):
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (height, width, 3):
        raise InvalidParameterError(
            f"upstream shape {upstream.shape} != {(height, width, 3)}")
    if not np.all(np.isfinite(upstream)):
        raise InvalidParameterError("upstream gradient must be finite")
    return upstream


def rasterize_backward(cloud: SplatCloud, pose: PoseSE3, intr: CameraIntrinsics,
                       background, upstream: np.ndarray) -> GradientSet:
    """Gradients of <upstream, rendered pixels> for every gaussian parameter."""
    params = _extract_params(cloud)
    return backward_arrays(params, cloud.ids, pose, intr, background, upstream)


def backward_arrays(params: dict, ids, pose: PoseSE3, intr: CameraIntrinsics,
                    background, upstream: np.ndarray) -> GradientSet:
    height, width = intr.height, intr.width
    upstream = _check_upstream(upstream, height, width)
    bg = np.asarray(background, dtype=np.float64)

    prep = _Projected(params, pose, intr)
    prep.ids = np.asarray(ids, dtype=np.uint64)[prep.vidx]
    tiles_x, tiles_y, buckets = prep.bin_tiles(width, height)
    entries = _tile_entries(prep, tiles_x, tiles_y, buckets, width, height)
    accs = _pixel_space_backward(prep, entries, upstream, bg)
    return _chain_to_params(prep, params, pose, intr, ids, *accs)


def render_and_backward(cloud: SplatCloud, pose: PoseSE3,
                        intr: CameraIntrinsics, background, target,
                        ssim_weight: float = LOSS_SSIM_WEIGHT):
    """Fused render + photometric loss + backward for the training loop.

    Returns (RenderedImage, {"loss", "grad"}, GradientSet). Equivalent to
    rasterize -> photometric_loss -> rasterize_backward, but computes the
    per-tile compositing state once.
    """
    params = _extract_params(cloud)
    height, width = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64)
    prep = _Projected(params, pose, intr)
    prep.ids = cloud.ids[prep.vidx]
    tiles_x, tiles_y, buckets = prep.bin_tiles(width, height)
    image, cache = _composite(prep, tiles_x, tiles_y, buckets, width, height,
                              bg, want_cache=True)
    loss = photometric_loss(image, target, ssim_weight)
    upstream = _check_upstream(loss["grad"], height, width)
    accs = _pixel_space_backward(prep, cache, upstream, bg)
    grads = _chain_to_params(prep, params, pose, intr, cloud.ids, *accs)
    return image, loss, grads


def photometric_loss(rendered, target, ssim_weight: float = LOSS_SSIM_WEIGHT):
    """(1-w) L1 + w (1 - SSIM) between a render and a target image, with the
    analytic gradient w.r.t. the rendered pixels."""
    pix = rendered.pixels if isinstance(rendered, RenderedImage) else \
        np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pix.shape != target.shape:
        raise InvalidParameterError(
            f"shape mismatch: {pix.shape} vs {target.shape}")
    diff = pix - target
    l1 = float(np.mean(np.abs(diff)))
    d_l1 = np.sign(diff) / diff.size
    if ssim_weight == 0.0:
        return {"loss": l1, "grad": d_l1}
    ssim_val, d_ssim = ssim_with_grad(pix, target)
    loss = (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim_val)
    grad = (1.0 - ssim_weight) * d_l1 - ssim_weight * d_ssim
    return {"loss": loss, "grad": grad}
