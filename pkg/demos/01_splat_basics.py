"""Build a handful of gaussians by hand and look at the per-primitive math:
covariance construction, projection to a 2D splat, and view-dependent color.

Run:  python3 demos/01_splat_basics.py
"""

import numpy as np

from splatstream import (
    CameraIntrinsics,
    Gaussian3D,
    PoseSE3,
    SplatCloud,
    activate,
    covariance_from_params,
    eval_sh,
    project_gaussian,
)

# One anisotropic gaussian: stretched along x, rotated 45 degrees about z.
angle = np.pi / 4
g = Gaussian3D(
    id=0,
    position=[0.0, 0.0, 3.0],
    rotation=[np.cos(angle / 2), 0.0, 0.0, np.sin(angle / 2)],
    log_scale=np.log([0.30, 0.05, 0.05]),
    sh=[[0.8, -0.5, -0.5]],  # degree 0: a reddish DC term
    opacity_logit=1.0,
)

print("== activations ==")
act = activate(g)
print(f"opacity  {act['opacity']:.4f}")
print(f"scale    {np.array2string(act['scale'], precision=3)}")

print("\n== 3D covariance (R S S^T R^T) ==")
cov = covariance_from_params(g.rotation, g.log_scale)
print(np.array2string(cov, precision=5, suppress_small=True))
print("eigenvalues:", np.round(np.linalg.eigvalsh(cov), 5),
      "= exp(2 * log_scale) as a multiset")

print("\n== projection to the image plane ==")
intr = CameraIntrinsics(fx=400, fy=400, cx=160, cy=120, width=320, height=240)
pose = PoseSE3(np.eye(3), np.zeros(3))  # camera at the origin, looking +z
splat = project_gaussian(g, pose, intr)
print(f"splat center {np.round(splat.mean2d, 2)} px, depth {splat.depth} m")
print("2D covariance (px^2):")
print(np.array2string(splat.cov2d, precision=2))
print("the tilted 3D ellipsoid shows up as a tilted image-plane ellipse")

# Behind the near plane the projection reports a cull instead of an error.
behind = Gaussian3D(id=1, position=[0, 0, -1.0], rotation=[1, 0, 0, 0],
                    log_scale=np.zeros(3), sh=[[0, 0, 0]], opacity_logit=0.0)
print("\nbehind-camera gaussian projects to:", project_gaussian(behind, pose, intr))

print("\n== view-dependent color (degree-1 SH) ==")
sh = np.zeros((4, 3))
sh[0] = [0.5, 0.0, -0.5]    # DC
sh[3] = [-0.9, 0.0, 0.0]    # linear-in-x band (basis is -C1 * x)
for direction in ([0, 0, 1], [1, 0, 0], [-1, 0, 0]):
    d = np.array(direction, dtype=float)
    d /= np.linalg.norm(d)
    rgb = eval_sh(sh, d, degree=1)
    print(f"view dir {direction}: rgb = {np.round(rgb, 3)}")

print("\n== a cloud is just contiguous arrays with stable ids ==")
cloud = SplatCloud.from_gaussians([g])
cloud.append(np.random.default_rng(0).normal(size=(3, 3)),
             [[1, 0, 0, 0]] * 3, np.full((3, 3), -2.0),
             np.zeros((3, 1, 3)), np.zeros(3))
print(f"{len(cloud)} gaussians, ids {cloud.ids.tolist()}, "
      f"revision {cloud.revision}")
