"""Gaussian scene representation and per-primitive math.

A scene is a SplatCloud: structure-of-arrays storage for anisotropic 3D
Gaussians (position, unit quaternion, log-scale, spherical-harmonics
coefficients, opacity logit), each with a stable 64-bit id. Parameters are
stored float32 (matching the on-disk format); all math here upcasts to
float64.

Conventions:
  - quaternions are (w, x, y, z), normalized on read, unconstrained in storage
  - covariance is R(q) diag(exp(ls))^2 R(q)^T, always PSD
  - poses are world-to-camera: p_cam = R p_world + t
  - SH color is 0.5 + sum(c_lm * Y_lm(dir)), clamped to [0, inf)
  - projection cov2d = J W Sigma W^T J^T + DILATION * I with the affine
    (EWA) Jacobian J of the pinhole projection at the mean
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

# near-plane cull distance (world units) and the 2D anti-alias dilation (px^2)
NEAR_PLANE = 0.01
DILATION = 0.3

# real SH basis constants through l=3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image dimensions must be >= 1")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")


@dataclass
class PoseSE3:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp_ns: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise InvalidParameterError(f"rotation not orthonormal (err {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise InvalidParameterError("rotation must have determinant +1")

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation,
                       self.timestamp_ns)


@dataclass
class Gaussian3D:
    """A single primitive, mostly used at serialization/protocol boundaries."""

    id: int
    position: np.ndarray      # (3,)
    rotation: np.ndarray      # (4,) quaternion (w, x, y, z)
    log_scale: np.ndarray     # (3,)
    sh: np.ndarray            # ((degree+1)^2, 3)
    opacity_logit: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float32).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float32).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float32).reshape(3)
        self.sh = np.asarray(self.sh, dtype=np.float32).reshape(-1, 3)
        self.opacity_logit = float(self.opacity_logit)


@dataclass
class Splat2D:
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2)
    depth: float          # camera-z


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise InvalidParameterError(f"SH degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


class SplatCloud:
    """Structure-of-arrays Gaussian collection with stable ids.

    Single-writer discipline: only the trainer mutates a cloud; everyone else
    works on snapshot() copies. Every mutating method bumps `revision`.
    """

    def __init__(self, sh_degree: int = 0):
        k = sh_coeff_count(sh_degree)
        self.sh_degree = sh_degree
        self.positions = np.zeros((0, 3), dtype=np.float32)
        self.rotations = np.zeros((0, 4), dtype=np.float32)
        self.log_scales = np.zeros((0, 3), dtype=np.float32)
        self.sh = np.zeros((0, k, 3), dtype=np.float32)
        self.opacity_logits = np.zeros((0,), dtype=np.float32)
        self.ids = np.zeros((0,), dtype=np.uint64)
        self.next_id = 0
        self.revision = 0
        self.tiling: dict[int, np.ndarray] | None = None
        self.grid_cell_size = 0.0

    def __len__(self) -> int:
        return self.positions.shape[0]

    # -- construction ------------------------------------------------------

    @classmethod
    def from_arrays(cls, positions, rotations, log_scales, sh, opacity_logits,
                    ids=None, sh_degree=None, revision=1) -> "SplatCloud":
        positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
        n = positions.shape[0]
        sh = np.asarray(sh, dtype=np.float32)
        if n == 0:
            if sh_degree is None:
                raise InvalidParameterError(
                    "sh_degree is required for an empty cloud")
            sh = sh.reshape(0, sh_coeff_count(sh_degree), 3)
        else:
            sh = sh.reshape(n, -1, 3)
        if sh_degree is None:
            degree = int(round(np.sqrt(sh.shape[1]))) - 1
        else:
            degree = sh_degree
        if sh.shape[1] != sh_coeff_count(degree):
            raise InvalidParameterError(
                f"sh has {sh.shape[1]} coefficients per channel, "
                f"degree {degree} needs {sh_coeff_count(degree)}")
        cloud = cls(degree)
        cloud.positions = positions
        cloud.rotations = np.asarray(rotations, dtype=np.float32).reshape(n, 4)
        cloud.log_scales = np.asarray(log_scales, dtype=np.float32).reshape(n, 3)
        cloud.sh = sh
        cloud.opacity_logits = np.asarray(opacity_logits, dtype=np.float32).reshape(n)
        if ids is None:
            cloud.ids = np.arange(n, dtype=np.uint64)
        else:
            cloud.ids = np.asarray(ids, dtype=np.uint64).reshape(n)
            if len(np.unique(cloud.ids)) != n:
                raise InvalidParameterError("duplicate gaussian ids")
        cloud.next_id = int(cloud.ids.max()) + 1 if n else 0
        cloud.revision = revision
        return cloud

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree=None) -> "SplatCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls(sh_degree or 0)
        return cls.from_arrays(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            ids=np.array([g.id for g in gaussians], dtype=np.uint64),
            sh_degree=sh_degree,
        )

    def gaussian(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            id=int(self.ids[index]),
            position=self.positions[index].copy(),
            rotation=self.rotations[index].copy(),
            log_scale=self.log_scales[index].copy(),
            sh=self.sh[index].copy(),
            opacity_logit=float(self.opacity_logits[index]),
        )

    # -- mutation (single writer) ------------------------------------------

    def touch(self):
        self.revision += 1

    def append(self, positions, rotations, log_scales, sh, opacity_logits) -> np.ndarray:
        """Add gaussians; returns the newly assigned ids."""
        positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
        n = positions.shape[0]
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.uint64)
        self.positions = np.concatenate([self.positions, positions])
        self.rotations = np.concatenate(
            [self.rotations, np.asarray(rotations, dtype=np.float32).reshape(n, 4)])
        self.log_scales = np.concatenate(
            [self.log_scales, np.asarray(log_scales, dtype=np.float32).reshape(n, 3)])
        self.sh = np.concatenate(
            [self.sh, np.asarray(sh, dtype=np.float32).reshape(n, -1, 3)])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits,
             np.asarray(opacity_logits, dtype=np.float32).reshape(n)])
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n
        self.tiling = None
        self.touch()
        return new_ids

    def keep(self, mask: np.ndarray):
        """Drop gaussians where mask is False."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.rotations = self.rotations[mask]
        self.log_scales = self.log_scales[mask]
        self.sh = self.sh[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.ids = self.ids[mask]
        self.tiling = None
        self.touch()

    def promote_sh_degree(self):
        """Grow SH storage by one band (new coefficients start at zero)."""
        if self.sh_degree >= 3:
            return
        self.sh_degree += 1
        k = sh_coeff_count(self.sh_degree)
        grown = np.zeros((len(self), k, 3), dtype=np.float32)
        grown[:, : self.sh.shape[1]] = self.sh
        self.sh = grown
        self.touch()

    # -- snapshots and indexing --------------------------------------------

    def snapshot(self) -> "SplatCloud":
        c = SplatCloud(self.sh_degree)
        c.positions = self.positions.copy()
        c.rotations = self.rotations.copy()
        c.log_scales = self.log_scales.copy()
        c.sh = self.sh.copy()
        c.opacity_logits = self.opacity_logits.copy()
        c.ids = self.ids.copy()
        c.next_id = self.next_id
        c.revision = self.revision
        c.grid_cell_size = self.grid_cell_size
        c.tiling = (None if self.tiling is None
                    else {k: v.copy() for k, v in self.tiling.items()})
        return c

    def grid_shape(self, cell_size: float):
        """(origin, dims) of the spatial grid covering all positions."""
        if len(self) == 0 or cell_size <= 0:
            return np.zeros(3), np.ones(3, dtype=np.int64)
        pos = self.positions.astype(np.float64)
        finite = np.isfinite(pos).all(axis=1)
        if not finite.any():
            return np.zeros(3), np.ones(3, dtype=np.int64)
        origin = pos[finite].min(axis=0)
        extent = pos[finite].max(axis=0) - origin
        dims = np.maximum(1, np.floor(extent / cell_size).astype(np.int64) + 1)
        return origin, dims

    def cell_of_positions(self, cell_size: float) -> np.ndarray:
        """Linearized grid cell index of each gaussian's mean."""
        origin, dims = self.grid_shape(cell_size)
        if len(self) == 0:
            return np.zeros(0, dtype=np.uint32)
        idx = np.floor((self.positions.astype(np.float64) - origin) / cell_size)
        idx = np.where(np.isfinite(idx), idx, 0.0)  # NaN means caught on load
        idx = np.clip(idx, 0, dims - 1).astype(np.int64)
        lin = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
        return lin.astype(np.uint32)

    def rebuild_tiling(self, cell_size: float | None = None):
        """Recompute the cell -> ids index. Default cell: scene extent / 32."""
        if cell_size is None:
            cell_size = self.default_cell_size()
        self.grid_cell_size = float(cell_size)
        tiling: dict[int, list] = {}
        if len(self) and cell_size > 0:
            cells = self.cell_of_positions(cell_size)
            for cell, gid in zip(cells.tolist(), self.ids.tolist()):
                tiling.setdefault(cell, []).append(gid)
        self.tiling = {c: np.array(g, dtype=np.uint64) for c, g in tiling.items()}

    def default_cell_size(self) -> float:
        if len(self) == 0:
            return 0.0
        pos = self.positions.astype(np.float64)
        extent = float(np.linalg.norm(pos.max(axis=0) - pos.min(axis=0)))
        return extent / 32.0 if extent > 0 else 1.0

    def validate(self):
        if len(np.unique(self.ids)) != len(self):
            raise InvalidParameterError("duplicate gaussian ids")
        if len(self) and self.next_id <= int(self.ids.max()):
            raise InvalidParameterError("next_id must exceed every existing id")
        if self.tiling is not None:
            known = set(self.ids.tolist())
            for cell, gids in self.tiling.items():
                for g in gids.tolist():
                    if g not in known:
                        raise InvalidParameterError(
                            f"tiling cell {cell} references unknown id {g}")


# -- quaternions ------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise InvalidParameterError("zero-norm quaternion")
    return q / norm


def quat_to_rotmat(q) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) to rotation matrix, batched on the
    leading axes. Input is normalized first."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rr = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rr[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rr[..., 0, 1] = 2 * (x * y - w * z)
    rr[..., 0, 2] = 2 * (x * z + w * y)
    rr[..., 1, 0] = 2 * (x * y + w * z)
    rr[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rr[..., 1, 2] = 2 * (y * z - w * x)
    rr[..., 2, 0] = 2 * (x * z - w * y)
    rr[..., 2, 1] = 2 * (y * z + w * x)
    rr[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rr


def rotmat_to_quat(rot) -> np.ndarray:
    """Rotation matrix to quaternion (w, x, y, z), w >= 0."""
    rot = np.asarray(rot, dtype=np.float64)
    m = np.array([
        [rot[0, 0] - rot[1, 1] - rot[2, 2], 0, 0, 0],
        [rot[1, 0] + rot[0, 1], rot[1, 1] - rot[0, 0] - rot[2, 2], 0, 0],
        [rot[2, 0] + rot[0, 2], rot[2, 1] + rot[1, 2],
         rot[2, 2] - rot[0, 0] - rot[1, 1], 0],
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0],
         rot[1, 0] - rot[0, 1], rot[0, 0] + rot[1, 1] + rot[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(m)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


# -- covariance and projection -----------------------------------------------

def covariance_from_params(rotation, log_scale) -> np.ndarray:
    """3D covariance R diag(exp(ls))^2 R^T; batched on leading axes."""
    rr = quat_to_rotmat(rotation)
    var = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    return np.einsum("...ik,...k,...jk->...ij", rr, var, rr)


def project_gaussian(g: Gaussian3D, pose: PoseSE3, intr: CameraIntrinsics,
                     dilation: float = DILATION) -> Splat2D | None:
    """EWA projection of one gaussian; None when culled by the near plane."""
    sigma = covariance_from_params(g.rotation, g.log_scale)
    out = project_batch(g.position[None].astype(np.float64), sigma[None],
                        pose, intr, dilation)
    if not out["valid"][0]:
        return None
    return Splat2D(mean2d=out["mean2d"][0], cov2d=out["cov2d"][0],
                   depth=float(out["depth"][0]))


def project_batch(positions, sigmas, pose: PoseSE3, intr: CameraIntrinsics,
                  dilation: float = DILATION) -> dict:
    """Project means and 3D covariances into the image plane.

    Returns arrays over the full input; `valid` marks gaussians in front of
    the near plane (the rest hold unspecified values).
    """
    positions = np.asarray(positions, dtype=np.float64)
    w = pose.rotation
    p_cam = positions @ w.T + pose.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)  # placeholder depth avoids divide warnings

    mean2d = np.stack([intr.fx * x / zs + intr.cx,
                       intr.fy * y / zs + intr.cy], axis=-1)

    n = positions.shape[0]
    jac = np.zeros((n, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = intr.fx / zs
    jac[:, 0, 2] = -intr.fx * x / zs**2
    jac[:, 1, 1] = intr.fy / zs
    jac[:, 1, 2] = -intr.fy * y / zs**2

    sigma_cam = np.einsum("ij,njk,lk->nil", w, np.asarray(sigmas, dtype=np.float64), w)
    cov2d = np.einsum("nij,njk,nlk->nil", jac, sigma_cam, jac)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    return {"mean2d": mean2d, "cov2d": cov2d, "depth": z, "valid": valid,
            "p_cam": p_cam, "jac": jac, "sigma_cam": sigma_cam}


# -- spherical harmonics ------------------------------------------------------

def sh_basis(dirs, degree: int) -> np.ndarray:
    """Real SH basis values Y_lm at unit directions; shape (..., (degree+1)^2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = sh_coeff_count(degree)
    out = np.empty(dirs.shape[:-1] + (k,), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """d Y_lm / d dir at unit directions; shape (..., (degree+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    k = sh_coeff_count(degree)
    g = np.zeros(dirs.shape[:-1] + (k, 3), dtype=np.float64)
    zero = np.zeros_like(x)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2 * x)
        g[..., 6, 1] = SH_C2[2] * (-2 * y)
        g[..., 6, 2] = SH_C2[2] * (4 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2 * x)
        g[..., 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        g[..., 9, 0] = SH_C3[0] * (6 * x * y)
        g[..., 9, 1] = SH_C3[0] * (3 * x * x - 3 * y * y)
        g[..., 9, 2] = zero
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4 * z * z - x * x - 3 * y * y)
        g[..., 11, 2] = SH_C3[2] * (8 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
        g[..., 13, 0] = SH_C3[4] * (4 * z * z - 3 * x * x - y * y)
        g[..., 13, 1] = SH_C3[4] * (-2 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2 * y * z)
        g[..., 14, 2] = SH_C3[5] * (x * x - y * y)
        g[..., 15, 0] = SH_C3[6] * (3 * x * x - 3 * y * y)
        g[..., 15, 1] = SH_C3[6] * (-6 * x * y)
        g[..., 15, 2] = zero
    return g


def eval_sh(sh, view_dir, degree: int) -> np.ndarray:
    """View-dependent RGB from SH coefficients.

    sh: (k, 3) or (n, k, 3); view_dir: matching (3,) or (n, 3) unit vectors.
    Uses the leading (degree+1)^2 coefficients; raises if fewer are stored.
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        view_dir = np.asarray(view_dir, dtype=np.float64)[None]
    else:
        view_dir = np.asarray(view_dir, dtype=np.float64)
    k = sh_coeff_count(degree)
    if sh.shape[1] < k:
        raise InvalidParameterError(
            f"degree {degree} needs {k} coefficients, sh stores {sh.shape[1]}")
    norms = np.linalg.norm(view_dir, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise InvalidParameterError("view_dir must be normalized within 1e-6")
    basis = sh_basis(view_dir, degree)
    rgb = 0.5 + np.einsum("nk,nkc->nc", basis, sh[:, :k])
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def activate(g: Gaussian3D) -> dict:
    """Storage-space parameters to rendering-space opacity and scale."""
    return {
        "opacity": float(sigmoid(g.opacity_logit)),
        "scale": np.exp(np.asarray(g.log_scale, dtype=np.float64)),
    }
