"""Fit a splat cloud to renders of a known scene: degrade a ground-truth
cloud, then watch optimization (with clone/split/prune density control)
recover it. Prints held-out PSNR as training progresses.

Run:  python3 demos/03_train_synthetic.py    (about two minutes on a laptop)
"""

import numpy as np

from splatstream.core import CameraIntrinsics, SplatCloud
from splatstream.evalkit import psnr
from splatstream.rasterizer import rasterize
from splatstream.trainer import TrainConfig, TrainView, init_state, train_loop

rng = np.random.default_rng(42)
size, fx, n = 96, 90.0, 80
intr = CameraIntrinsics(fx, fx, size / 2, size / 2, size, size)

# ground truth: a ball of anisotropic splats around the origin
positions = rng.normal(size=(n, 3))
positions *= rng.uniform(0.2, 1.0, (n, 1)) / np.linalg.norm(positions, axis=1,
                                                            keepdims=True)
quats = rng.normal(size=(n, 4))
gt = SplatCloud.from_arrays(
    positions=positions,
    rotations=quats / np.linalg.norm(quats, axis=1, keepdims=True),
    log_scales=np.log(rng.uniform(1.0, 3.0, (n, 3)) * 4.0 / fx),
    sh=np.concatenate([(rng.uniform(0.2, 0.8, (n, 1, 3)) - 0.5) / 0.2821,
                       rng.normal(scale=0.1, size=(n, 3, 3))], axis=1),
    opacity_logits=rng.uniform(0.5, 2.5, n),
    sh_degree=1,
)

# cameras on a ring, a couple held out for evaluation
views = []
for i in range(10):
    angle = 2 * np.pi * i / 10
    cam = np.array([4 * np.cos(angle), 4 * np.sin(angle), 1.4])
    forward = -cam / np.linalg.norm(cam)
    right = np.cross(forward, [0, 0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    from splatstream.core import PoseSE3
    pose = PoseSE3(rot, -rot @ cam)
    views.append(TrainView(image=rasterize(gt, pose, intr).pixels,
                           pose=pose, intrinsics=intr, view_id=f"v{i}"))
train_views, heldout = views[:8], views[8:]

# degraded starting point: jittered geometry, washed-out opacity
start = gt.snapshot()
start.positions += rng.normal(scale=0.05, size=start.positions.shape).astype("f4")
start.log_scales += rng.normal(scale=0.4, size=start.log_scales.shape).astype("f4")
start.sh += rng.normal(scale=0.3, size=start.sh.shape).astype("f4")
start.opacity_logits[:] = 0.0
start.touch()


def heldout_psnr(cloud):
    return np.mean([psnr(rasterize(cloud, v.pose, v.intrinsics).pixels,
                         v.image) for v in heldout])


config = TrainConfig(iterations=1200, densify_start=300, densify_stop=900,
                     densify_interval=150, densify_grad_threshold=1e-3,
                     opacity_reset_interval=0, sh_degree_promote_interval=400,
                     max_sh_degree=1, seed=1)
state = init_state(start, config)
print(f"start: held-out PSNR {heldout_psnr(start):.2f} dB, {len(start)} gaussians")
for stop in (100, 300, 600, 900, 1200):
    train_loop(state, train_views, stop - state.iteration)
    print(f"iter {state.iteration:4d}: loss MA {state.moving_average():.5f}  "
          f"held-out {heldout_psnr(state.cloud):.2f} dB  "
          f"{len(state.cloud)} gaussians")
