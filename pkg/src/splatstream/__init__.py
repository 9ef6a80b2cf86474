"""splatstream: streaming 3D Gaussian splat reconstruction on the CPU.

Subpackages map to pipeline stages: core (scene representation), rasterizer
(differentiable rendering), trainer (optimization and density control),
ingest (timed stream transport and alignment), posegeom (COLMAP import and
trajectory metrics), modelstore (binary persistence and PLY interop),
delivery (live model updates over WebSocket), evalkit (quality metrics),
cli (the `splatstream` command).
"""

from .core import (
    CameraIntrinsics,
    Gaussian3D,
    PoseSE3,
    Splat2D,
    SplatCloud,
    activate,
    covariance_from_params,
    eval_sh,
    project_gaussian,
)

__all__ = [
    "CameraIntrinsics",
    "Gaussian3D",
    "PoseSE3",
    "Splat2D",
    "SplatCloud",
    "activate",
    "covariance_from_params",
    "eval_sh",
    "project_gaussian",
]

__version__ = "0.1.0"
