"""Camera pose import (COLMAP text layout), SE(3) sequence utilities, and
trajectory error metrics.

COLMAP text reconstructions hold three files: cameras.txt (intrinsics),
images.txt (two lines per image: pose + 2D point observations), and
points3D.txt (sparse points with RGB and observation tracks). Poses are
stored world-to-camera as quaternion (qw qx qy qz) + translation, which
maps directly onto PoseSE3. Only PINHOLE and SIMPLE_PINHOLE camera models
are supported.

Trajectory metrics follow the usual convention: both sequences are turned
into camera-to-world trajectories, associated by nearest timestamp, then
ATE rigidly aligns (closed-form, no scale) the estimated camera centers to
the reference before computing translational residuals; RPE compares
relative motions over a fixed frame gap, which makes it invariant to any
global rigid offset of either sequence.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, PoseSE3, quat_to_rotmat, rotmat_to_quat
from .errors import (
    ColmapParseError,
    InputError,
    InsufficientOverlapError,
    UnsupportedCameraModelError,
)

DEFAULT_FRAME_INTERVAL_NS = 33_333_333
ASSOCIATION_WINDOW_NS = 20_000_000


@dataclass
class PoseSequence:
    """Time-ordered world-to-camera poses plus per-camera intrinsics."""

    poses: list  # [(timestamp_ns, PoseSE3)]
    intrinsics: dict = field(default_factory=dict)  # camera_id -> CameraIntrinsics
    camera_ids: list = field(default_factory=list)  # per pose
    names: list = field(default_factory=list)       # per pose (image names)
    convention: str = "world_to_camera"

    def __post_init__(self):
        ts = [t for t, _ in self.poses]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InputError("pose timestamps must be strictly increasing")
        for cam in self.camera_ids:
            if cam not in self.intrinsics:
                raise InputError(f"pose references unknown camera id {cam}")

    def __len__(self):
        return len(self.poses)

    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.poses], dtype=np.int64)

    def camera_centers(self) -> np.ndarray:
        return np.stack([p.camera_center() for _, p in self.poses])

    def cam_to_world_matrices(self) -> np.ndarray:
        return np.stack([p.inverse().matrix() for _, p in self.poses])


@dataclass
class SparsePoints:
    xyz: np.ndarray           # (N, 3) float64
    rgb: np.ndarray           # (N, 3) uint8
    track_lengths: np.ndarray  # (N,) int

    def __post_init__(self):
        if len(self.xyz) and self.track_lengths.min() < 2:
            raise InputError("triangulated points need track length >= 2")

    def __len__(self):
        return len(self.xyz)


def _data_lines(path):
    with open(path, "r") as f:
        for no, line in enumerate(f, start=1):
            stripped = line.strip()
            if stripped and not stripped.startswith("#"):
                yield no, stripped


def _parse_camera(path, line_no, parts):
    cam_id = int(parts[0])
    model = parts[1]
    width, height = int(parts[2]), int(parts[3])
    params = [float(p) for p in parts[4:]]
    if model == "PINHOLE":
        if len(params) != 4:
            raise ColmapParseError(path, line_no, "PINHOLE needs 4 params")
        fx, fy, cx, cy = params
    elif model == "SIMPLE_PINHOLE":
        if len(params) != 3:
            raise ColmapParseError(path, line_no, "SIMPLE_PINHOLE needs 3 params")
        fx = fy = params[0]
        cx, cy = params[1], params[2]
    else:
        raise UnsupportedCameraModelError(model)
    return cam_id, CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy,
                                    width=width, height=height)


def import_colmap(directory, frame_interval_ns: int = DEFAULT_FRAME_INTERVAL_NS):
    """Load a COLMAP text reconstruction: (PoseSequence, SparsePoints).

    Image order (and synthesized timestamps) follow lexicographically sorted
    image names at `frame_interval_ns` spacing.
    """
    cam_path = os.path.join(directory, "cameras.txt")
    img_path = os.path.join(directory, "images.txt")
    pts_path = os.path.join(directory, "points3D.txt")
    for p in (cam_path, img_path, pts_path):
        if not os.path.exists(p):
            raise InputError(f"missing COLMAP file: {p}")

    intrinsics = {}
    for no, line in _data_lines(cam_path):
        parts = line.split()
        if len(parts) < 5:
            raise ColmapParseError(cam_path, no, "camera line too short")
        try:
            cam_id, intr = _parse_camera(cam_path, no, parts)
        except ValueError as e:
            raise ColmapParseError(cam_path, no, str(e)) from e
        intrinsics[cam_id] = intr

    images = []
    with open(img_path, "r") as f:
        lines = f.readlines()
    i = 0
    while i < len(lines):
        no, line = i + 1, lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 10:
            raise ColmapParseError(img_path, no, "image line too short")
        try:
            qw, qx, qy, qz = (float(p) for p in parts[1:5])
            tx, ty, tz = (float(p) for p in parts[5:8])
            cam_id = int(parts[8])
        except ValueError as e:
            raise ColmapParseError(img_path, no, str(e)) from e
        name = parts[9]
        if cam_id not in intrinsics:
            raise ColmapParseError(img_path, no, f"unknown camera id {cam_id}")
        rot = quat_to_rotmat(np.array([qw, qx, qy, qz]))
        images.append((name, rot, np.array([tx, ty, tz]), cam_id))
        i += 1  # the paired observations line, possibly empty

    images.sort(key=lambda rec: rec[0])
    poses, camera_ids, names = [], [], []
    for i, (name, rot, t, cam_id) in enumerate(images):
        ts = i * frame_interval_ns
        poses.append((ts, PoseSE3(rot, t, timestamp_ns=ts)))
        camera_ids.append(cam_id)
        names.append(name)
    sequence = PoseSequence(poses=poses, intrinsics=intrinsics,
                            camera_ids=camera_ids, names=names)

    xyz, rgb, tracks = [], [], []
    for no, line in _data_lines(pts_path):
        parts = line.split()
        if len(parts) < 8:
            raise ColmapParseError(pts_path, no, "point line too short")
        try:
            xyz.append([float(p) for p in parts[1:4]])
            rgb.append([int(p) for p in parts[4:7]])
        except ValueError as e:
            raise ColmapParseError(pts_path, no, str(e)) from e
        track = parts[8:]
        if len(track) % 2 != 0:
            raise ColmapParseError(pts_path, no, "odd-length track")
        tracks.append(len(track) // 2)
    points = SparsePoints(
        xyz=np.array(xyz, dtype=np.float64).reshape(-1, 3),
        rgb=np.array(rgb, dtype=np.uint8).reshape(-1, 3),
        track_lengths=np.array(tracks, dtype=np.int64),
    )
    return sequence, points


def export_colmap(directory, sequence: PoseSequence,
                  points: SparsePoints | None = None):
    """Write a COLMAP text reconstruction readable by import_colmap."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "cameras.txt"), "w") as f:
        f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
        for cam_id, intr in sorted(sequence.intrinsics.items()):
            f.write(f"{cam_id} PINHOLE {intr.width} {intr.height} "
                    f"{float(intr.fx)!r} {float(intr.fy)!r} "
                    f"{float(intr.cx)!r} {float(intr.cy)!r}\n")
    with open(os.path.join(directory, "images.txt"), "w") as f:
        f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
        for i, (ts, pose) in enumerate(sequence.poses):
            q = rotmat_to_quat(pose.rotation)
            t = pose.translation
            name = sequence.names[i] if sequence.names else f"frame_{i:06d}.png"
            cam_id = sequence.camera_ids[i] if sequence.camera_ids else 1
            f.write(f"{i + 1} {float(q[0])!r} {float(q[1])!r} "
                    f"{float(q[2])!r} {float(q[3])!r} {float(t[0])!r} "
                    f"{float(t[1])!r} {float(t[2])!r} {cam_id} {name}\n")
            f.write("\n")
    with open(os.path.join(directory, "points3D.txt"), "w") as f:
        f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
        if points is not None:
            for i in range(len(points)):
                track = " ".join(f"{j + 1} 0" for j in
                                 range(points.track_lengths[i]))
                p = points.xyz[i]
                c = points.rgb[i]
                f.write(f"{i + 1} {float(p[0])!r} {float(p[1])!r} "
                        f"{float(p[2])!r} {c[0]} {c[1]} {c[2]} 0.0 {track}\n")


# -- trajectory metrics -------------------------------------------------------

def _associate(est: PoseSequence, ref: PoseSequence,
               window_ns: int = ASSOCIATION_WINDOW_NS):
    """Pair pose indices by nearest timestamp within the window."""
    ref_ts = ref.timestamps()
    pairs = []
    used = set()
    for i, t in enumerate(est.timestamps()):
        j = int(np.argmin(np.abs(ref_ts - t)))
        if abs(int(ref_ts[j]) - int(t)) <= window_ns and j not in used:
            pairs.append((i, j))
            used.add(j)
    if len(pairs) < 3:
        raise InsufficientOverlapError(len(pairs))
    return pairs


def _rigid_align(src: np.ndarray, dst: np.ndarray):
    """Closed-form rotation+translation minimizing ||R src + t - dst||."""
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    h = (src - src_c).T @ (dst - dst_c)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = dst_c - rot @ src_c
    return rot, t


def ate(est: PoseSequence, ref: PoseSequence,
        window_ns: int = ASSOCIATION_WINDOW_NS) -> dict:
    """Absolute trajectory error after rigid alignment: rmse/mean/median
    of camera-center residuals, in world (reference) units."""
    pairs = _associate(est, ref, window_ns)
    est_c = est.camera_centers()[[i for i, _ in pairs]]
    ref_c = ref.camera_centers()[[j for _, j in pairs]]
    rot, t = _rigid_align(est_c, ref_c)
    residuals = np.linalg.norm(est_c @ rot.T + t - ref_c, axis=1)
    return {
        "rmse": float(np.sqrt(np.mean(residuals**2))),
        "mean": float(np.mean(residuals)),
        "median": float(np.median(residuals)),
        "pairs": len(pairs),
    }


def rpe(est: PoseSequence, ref: PoseSequence, delta: int = 1,
        window_ns: int = ASSOCIATION_WINDOW_NS) -> dict:
    """Relative pose error over a frame gap: rmse of translation norms
    (world units) and rotation angles (degrees) of the motion residual
    E = (ref_i^-1 ref_{i+d})^-1 (est_i^-1 est_{i+d})."""
    if delta < 1:
        raise InputError("delta must be >= 1")
    pairs = _associate(est, ref, window_ns)
    est_m = est.cam_to_world_matrices()
    ref_m = ref.cam_to_world_matrices()
    trans, rots = [], []
    for k in range(len(pairs) - delta):
        i0, j0 = pairs[k]
        i1, j1 = pairs[k + delta]
        rel_ref = np.linalg.inv(ref_m[j0]) @ ref_m[j1]
        rel_est = np.linalg.inv(est_m[i0]) @ est_m[i1]
        err = np.linalg.inv(rel_ref) @ rel_est
        trans.append(np.linalg.norm(err[:3, 3]))
        cos = (np.trace(err[:3, :3]) - 1.0) / 2.0
        rots.append(math.degrees(math.acos(min(1.0, max(-1.0, cos)))))
    if not trans:
        raise InsufficientOverlapError(len(pairs), needed=delta + 1)
    trans = np.array(trans)
    rots = np.array(rots)
    return {
        "trans_rmse": float(np.sqrt(np.mean(trans**2))),
        "rot_rmse_deg": float(np.sqrt(np.mean(rots**2))),
        "pairs": len(trans),
    }
