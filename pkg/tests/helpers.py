"""Shared test utilities: scene generators, a brute-force compositing oracle,
and finite-difference gradient checking.

The oracle deliberately avoids the tile path: splats are globally sorted and
composited sequentially over the whole image with per-pixel stop flags.
"""

import numpy as np

from splatstream import core
from splatstream.core import CameraIntrinsics, PoseSE3, SplatCloud
from splatstream.rasterizer import (
    G_CLAMP,
    SUPPORT_Q,
    T_EPS,
    render_arrays,
)


def random_unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n_gaussians=20, width=48, height=48, degree=1,
                 fx=None, fy=None):
    """A cloud in front of an identity camera, splats a few pixels wide."""
    fx = fx or 1.1 * width
    fy = fy or 1.1 * width
    intr = CameraIntrinsics(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)
    pose = PoseSE3(np.eye(3), np.zeros(3))
    z = rng.uniform(2.0, 6.0, size=n_gaussians)
    half_x = 0.45 * width * z / fx
    half_y = 0.45 * height * z / fy
    positions = np.stack([rng.uniform(-1, 1, n_gaussians) * half_x,
                          rng.uniform(-1, 1, n_gaussians) * half_y,
                          z], axis=-1)
    # world sigma chosen so footprints span roughly 1-6 pixels
    px_sigma = rng.uniform(1.0, 4.0, size=(n_gaussians, 3))
    log_scales = np.log(px_sigma * z[:, None] / fx)
    k = (degree + 1) ** 2
    sh = rng.normal(scale=0.25, size=(n_gaussians, k, 3))
    sh[:, 0] += rng.normal(scale=0.6, size=(n_gaussians, 3))
    cloud = SplatCloud.from_arrays(
        positions=positions,
        rotations=random_unit_quats(rng, n_gaussians),
        log_scales=log_scales,
        sh=sh,
        opacity_logits=rng.uniform(-2.0, 3.0, size=n_gaussians),
        sh_degree=degree,
    )
    return cloud, pose, intr


def brute_force_render(cloud, pose, intr, background=(0.0, 0.0, 0.0)):
    """Composite every gaussian at every pixel, globally depth-sorted."""
    h, w = intr.height, intr.width
    bg = np.asarray(background, dtype=np.float64)
    positions = cloud.positions.astype(np.float64)
    sigmas = core.covariance_from_params(cloud.rotations.astype(np.float64),
                                         cloud.log_scales.astype(np.float64))
    if len(cloud) == 0:
        img = np.empty((h, w, 3))
        img[:] = bg
        return img, np.zeros((h, w))
    proj = core.project_batch(positions, sigmas, pose, intr)
    valid = proj["valid"]
    order = np.lexsort((cloud.ids, proj["depth"]))
    order = order[valid[order]]

    alphas = core.sigmoid(cloud.opacity_logits.astype(np.float64))
    cam_center = pose.camera_center()
    rel = positions - cam_center
    dirs = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    colors = np.maximum(
        0.5 + np.einsum("nk,nkc->nc",
                        core.sh_basis(dirs, cloud.sh_degree),
                        cloud.sh.astype(np.float64)), 0.0)

    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    px = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    n_px = px.shape[0]
    transmittance = np.ones(n_px)
    out = np.zeros((n_px, 3))
    stopped = np.zeros(n_px, dtype=bool)

    for s in order:
        cov = proj["cov2d"][s]
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        conic = np.array([cov[1, 1], -cov[0, 1], cov[0, 0]]) / det
        d = px - proj["mean2d"][s]
        q = (conic[0] * d[:, 0] ** 2 + 2 * conic[1] * d[:, 0] * d[:, 1]
             + conic[2] * d[:, 1] ** 2)
        g = np.where(q <= SUPPORT_Q, np.minimum(np.exp(-0.5 * q), G_CLAMP), 0.0)
        a = alphas[s] * g
        t_next = transmittance * (1.0 - a)
        crossing = ~stopped & (t_next < T_EPS)
        active = ~stopped & ~crossing
        out[active] += (a * transmittance)[active, None] * colors[s]
        transmittance[active] = t_next[active]
        stopped |= crossing

    out += transmittance[:, None] * bg
    return out.reshape(h, w, 3), (1.0 - transmittance).reshape(h, w)


def look_at_pose(camera_pos, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0),
                 timestamp_ns=0):
    """World-to-camera pose for a camera at camera_pos looking at target
    (+z forward, +x right, +y down)."""
    camera_pos = np.asarray(camera_pos, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - camera_pos
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return PoseSE3(rot, -rot @ camera_pos, timestamp_ns=timestamp_ns)


def ring_poses(n_views, distance=4.0, elevation=0.35, target=(0, 0, 0),
               interval_ns=33_333_333):
    """Cameras on a tilted ring around the origin, all looking inward."""
    poses = []
    for i in range(n_views):
        angle = 2.0 * np.pi * i / n_views
        pos = np.array([distance * np.cos(angle) * np.cos(elevation),
                        distance * np.sin(angle) * np.cos(elevation),
                        distance * np.sin(elevation)])
        poses.append(look_at_pose(pos, target, timestamp_ns=i * interval_ns))
    return poses


def make_synthetic_cloud(rng, n_gaussians=200, degree=1, radius=1.0,
                         px_sigma=(1.5, 5.0), fx=115.0, distance=4.0):
    """Ground-truth cloud in a ball around the origin, splat footprints a
    few pixels wide when viewed from `distance`."""
    positions = rng.normal(size=(n_gaussians, 3))
    positions *= radius * rng.uniform(0.2, 1.0, (n_gaussians, 1)) \
        / np.linalg.norm(positions, axis=1, keepdims=True)
    sigma_world = rng.uniform(*px_sigma, size=(n_gaussians, 3)) * distance / fx
    k = (degree + 1) ** 2
    sh = rng.normal(scale=0.15, size=(n_gaussians, k, 3))
    sh[:, 0] = (rng.uniform(0.1, 0.9, (n_gaussians, 3)) - 0.5) / 0.28209479177387814
    return SplatCloud.from_arrays(
        positions=positions,
        rotations=random_unit_quats(rng, n_gaussians),
        log_scales=np.log(sigma_world),
        sh=sh,
        opacity_logits=rng.uniform(0.5, 2.5, size=n_gaussians),
        sh_degree=degree,
    )


def degrade_cloud(rng, cloud, pos_sigma=0.02, scale_sigma=0.25,
                  color_sigma=0.15):
    """A corrupted copy: jittered positions/scales/colors, opacity pulled
    back to 0.5. Training should recover the original renders."""
    bad = cloud.snapshot()
    bad.positions = (bad.positions.astype(np.float64)
                     + rng.normal(scale=pos_sigma, size=bad.positions.shape)
                     ).astype(np.float32)
    bad.log_scales = (bad.log_scales.astype(np.float64)
                      + rng.normal(scale=scale_sigma, size=bad.log_scales.shape)
                      ).astype(np.float32)
    bad.sh = (bad.sh.astype(np.float64)
              + rng.normal(scale=color_sigma, size=bad.sh.shape)
              ).astype(np.float32)
    bad.opacity_logits = np.zeros_like(bad.opacity_logits)
    bad.touch()
    return bad


def write_toy_dataset(root, rng, n_gaussians=30, n_views=8, size=64,
                      fx=None, bit_depth=8):
    """Render a small ground-truth cloud into a COLMAP-style dataset on disk:
    cameras.txt / images.txt / points3D.txt plus PNG images. Returns
    (colmap_dir, images_dir, gt_cloud, views)."""
    import os

    from splatstream.core import SH_C0, rotmat_to_quat
    from splatstream.imgio import save_png
    from splatstream.rasterizer import rasterize

    fx = fx or 0.9 * size
    colmap_dir = os.path.join(root, "colmap")
    images_dir = os.path.join(root, "images")
    os.makedirs(colmap_dir, exist_ok=True)
    os.makedirs(images_dir, exist_ok=True)

    gt = make_synthetic_cloud(rng, n_gaussians=n_gaussians, degree=1, fx=fx,
                              px_sigma=(1.0, 3.0))
    intr = CameraIntrinsics(fx, fx, size / 2, size / 2, size, size)
    poses = ring_poses(n_views)
    views = []
    image_lines = []
    for i, pose in enumerate(poses):
        name = f"frame_{i:06d}.png"
        image = rasterize(gt, pose, intr).pixels
        save_png(os.path.join(images_dir, name), image, bit_depth=bit_depth)
        views.append((name, pose, intr))
        q = [float(v) for v in rotmat_to_quat(pose.rotation)]
        t = [float(v) for v in pose.translation]
        image_lines.append(
            f"{i + 1} {q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r} "
            f"{t[0]!r} {t[1]!r} {t[2]!r} 1 {name}")
        image_lines.append("0.0 0.0 1")

    with open(os.path.join(colmap_dir, "cameras.txt"), "w") as f:
        f.write(f"1 PINHOLE {size} {size} {float(fx)!r} {float(fx)!r} "
                f"{float(size / 2)!r} {float(size / 2)!r}\n")
    with open(os.path.join(colmap_dir, "images.txt"), "w") as f:
        f.write("\n".join(image_lines) + "\n")
    with open(os.path.join(colmap_dir, "points3D.txt"), "w") as f:
        dc = gt.sh[:, 0, :].astype(np.float64)
        rgb = np.clip(0.5 + SH_C0 * dc, 0.0, 1.0)
        rgb8 = np.round(rgb * 255).astype(int)
        for i in range(len(gt)):
            p = gt.positions[i]
            f.write(f"{i + 1} {float(p[0])!r} {float(p[1])!r} "
                    f"{float(p[2])!r} {rgb8[i, 0]} {rgb8[i, 1]} "
                    f"{rgb8[i, 2]} 0.5 1 0 2 0\n")
    return colmap_dir, images_dir, gt, views


def _fd_probe_ok(cloud, pose, intr):
    """True when no central-difference probe (eps 1e-4) can straddle one of
    the renderer's non-smooth boundaries: the G clamp, the transmittance
    early exit, the color clamp at zero, or a depth-sort tie. Finite
    differences are meaningless across those; analytic gradients are checked
    on scenes that keep a safety margin away from them."""
    positions = cloud.positions.astype(np.float64)
    sigmas = core.covariance_from_params(cloud.rotations.astype(np.float64),
                                         cloud.log_scales.astype(np.float64))
    proj = core.project_batch(positions, sigmas, pose, intr)
    valid = proj["valid"]
    if not valid.any():
        return False
    depth = proj["depth"][valid]
    if len(depth) > 1:
        gaps = np.diff(np.sort(depth))
        if gaps.min() < 5e-4:
            return False

    cam_center = pose.camera_center()
    rel = positions[valid] - cam_center
    dirs = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    color_pre = 0.5 + np.einsum("nk,nkc->nc",
                                core.sh_basis(dirs, cloud.sh_degree),
                                cloud.sh.astype(np.float64)[valid])
    if np.abs(color_pre).min() < 0.005:
        return False

    cols, rows = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    px = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], axis=-1)
    order = np.argsort(depth)
    cov = proj["cov2d"][valid][order]
    mean = proj["mean2d"][valid][order]
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    conic = np.stack([cov[:, 1, 1], -cov[:, 0, 1], cov[:, 0, 0]], axis=-1) \
        / det[:, None]
    d = px[None] - mean[:, None]
    q = (conic[:, 0, None] * d[..., 0] ** 2
         + 2 * conic[:, 1, None] * d[..., 0] * d[..., 1]
         + conic[:, 2, None] * d[..., 1] ** 2)
    qc = -2.0 * np.log(G_CLAMP)
    if np.any(np.abs(q - qc) < 4e-4):
        return False
    alphas = core.sigmoid(cloud.opacity_logits.astype(np.float64))[valid][order]
    g = np.where(q <= SUPPORT_Q, np.minimum(np.exp(-0.5 * q), G_CLAMP), 0.0)
    t_after = np.cumprod(1.0 - alphas[:, None] * g, axis=0)
    if np.any((t_after > T_EPS / 1.6) & (t_after < T_EPS * 1.6)):
        return False
    return True


def fd_safe_scene(rng, n_gaussians=20, width=48, height=48, degree=1,
                  max_tries=200):
    """Random scene suitable for finite-difference gradient checks."""
    for _ in range(max_tries):
        cloud, pose, intr = random_scene(rng, n_gaussians, width, height,
                                         degree)
        # moderate opacities keep early-exit rare
        cloud.opacity_logits = np.clip(cloud.opacity_logits, -2.0, 1.5)
        if _fd_probe_ok(cloud, pose, intr):
            return cloud, pose, intr
    raise RuntimeError("no finite-difference-safe scene found")


PARAM_SHAPES = ("positions", "rotations", "log_scales", "sh", "opacity_logits")


def scene_params(cloud):
    return {
        "positions": cloud.positions.astype(np.float64),
        "rotations": cloud.rotations.astype(np.float64),
        "log_scales": cloud.log_scales.astype(np.float64),
        "sh": cloud.sh.astype(np.float64),
        "opacity_logits": cloud.opacity_logits.astype(np.float64),
    }


def forward_scalar(params, ids, pose, intr, background, upstream):
    img = render_arrays(params, ids, pose, intr, background)
    return float(np.sum(img.pixels * upstream))


def fd_partial(params, key, index, ids, pose, intr, background, upstream,
               eps=1e-4):
    plus = {k: v.copy() for k, v in params.items()}
    minus = {k: v.copy() for k, v in params.items()}
    plus[key][index] += eps
    minus[key][index] -= eps
    fp = forward_scalar(plus, ids, pose, intr, background, upstream)
    fm = forward_scalar(minus, ids, pose, intr, background, upstream)
    return (fp - fm) / (2 * eps)


def grad_matches(analytic, fd, rel=1e-3, abs_tol=1e-6):
    return abs(analytic - fd) <= max(abs_tol, rel * max(abs(analytic), abs(fd)))


GRAD_FIELDS = {
    "positions": "d_position",
    "rotations": "d_rotation",
    "log_scales": "d_log_scale",
    "sh": "d_sh",
    "opacity_logits": "d_opacity_logit",
}


def all_param_coords(params):
    for key in PARAM_SHAPES:
        arr = params[key]
        for index in np.ndindex(arr.shape):
            yield key, index
