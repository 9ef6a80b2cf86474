"""Splat cloud optimization: Adam updates over rendered views, adaptive
density control (clone / split / prune), opacity resets, SH degree
promotion, and frustum-scoped online refinement for live updates.

A TrainState owns the cloud (single writer) plus Adam moments kept exactly
parallel to the cloud arrays. Parameters are stored float32; gradients,
moments and update math run in float64. All randomness (batch sampling,
split sampling) comes from one seeded generator, so identical config +
seed + inputs reproduce the final cloud bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import core, rasterizer
from .core import CameraIntrinsics, PoseSE3, SplatCloud, sh_coeff_count
from .errors import InputError, InvalidParameterError, TrainingDivergedError

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-15
LOSS_WINDOW = 100
CLONE_SCALE_FRACTION = 0.01   # below this fraction of scene extent: clone
SPLIT_SCALE_SHRINK = 1.6
SPLIT_CHILDREN = 2
REPLAY_MIX = 0.25             # share of prior views mixed into online batches

PARAM_GROUPS = ("positions", "rotations", "log_scales", "sh", "opacity_logits")


@dataclass
class TrainConfig:
    iterations: int = 30000
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    position_lr_max_steps: int = 30000
    sh_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    opacity_prune_threshold: float = 0.005
    opacity_reset_interval: int = 3000
    sh_degree_promote_interval: int = 1000
    max_sh_degree: int = 3
    world_size_cull_factor: float = 0.1
    screen_size_cull_px: float = 20.0
    batch_size: int = 1
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.densify_grad_threshold <= 0 or self.opacity_prune_threshold <= 0:
            raise InvalidParameterError("thresholds must be positive")
        if not (self.densify_start < self.densify_stop <= self.iterations):
            raise InvalidParameterError(
                "densify window must satisfy start < stop <= iterations")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        """Flat key = value text; '#' starts a comment. CLI overrides win."""
        values: dict = {}
        with open(path) as f:
            for no, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{no}: expected key = value")
                key, raw = (part.strip() for part in line.split("=", 1))
                values[key] = raw
        if overrides:
            values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in by_name:
                raise InputError(f"unknown training config key: {key}")
            if key == "background":
                if isinstance(raw, str):
                    raw = tuple(float(p) for p in raw.split(","))
                kwargs[key] = tuple(raw)
            elif by_name[key].type == "int":
                kwargs[key] = int(raw)
            elif by_name[key].type == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    def to_file(self, path):
        with open(path, "w") as f:
            for fld in fields(self):
                value = getattr(self, fld.name)
                if fld.name == "background":
                    value = ",".join(repr(float(v)) for v in value)
                f.write(f"{fld.name} = {value}\n")


@dataclass
class TrainView:
    image: np.ndarray
    pose: PoseSE3
    intrinsics: CameraIntrinsics
    view_id: str = ""


@dataclass
class TrainState:
    cloud: SplatCloud
    config: TrainConfig
    scene_extent: float
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    adam_steps: dict = field(default_factory=dict)
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    grad_accum: np.ndarray | None = None
    obs_count: np.ndarray | None = None
    max_radii_px: np.ndarray | None = None
    seen_views: list = field(default_factory=list)
    rng: np.random.Generator | None = None

    def moving_average(self, window: int = LOSS_WINDOW) -> float:
        if not self.loss_history:
            return math.inf
        tail = self.loss_history[-window:]
        return float(np.mean(tail))


def _zero_moments(cloud: SplatCloud) -> dict:
    return {name: np.zeros_like(getattr(cloud, name), dtype=np.float64)
            for name in PARAM_GROUPS}


def init_state(cloud: SplatCloud, config: TrainConfig,
               scene_extent: float | None = None) -> TrainState:
    if scene_extent is None:
        scene_extent = _extent_of(cloud.positions)
    state = TrainState(cloud=cloud, config=config, scene_extent=scene_extent)
    state.moments_m = _zero_moments(cloud)
    state.moments_v = _zero_moments(cloud)
    state.adam_steps = {name: 0 for name in PARAM_GROUPS}
    state.grad_accum = np.zeros(len(cloud))
    state.obs_count = np.zeros(len(cloud))
    state.max_radii_px = np.zeros(len(cloud))
    state.rng = np.random.default_rng(config.seed)
    return state


def _extent_of(positions) -> float:
    if len(positions) == 0:
        return 1.0
    pos = np.asarray(positions, dtype=np.float64)
    centroid = pos.mean(axis=0)
    radius = float(np.linalg.norm(pos - centroid, axis=1).max())
    return radius if radius > 0 else 1.0


def init_from_points(points, config: TrainConfig) -> SplatCloud:
    """Seed one gaussian per point: DC color from rgb, isotropic scale from
    the mean distance to the 3 nearest neighbors, opacity 0.1."""
    points = list(points)
    if not points:
        raise InputError("need at least one seed point")
    xyz = np.array([p["xyz"] for p in points], dtype=np.float64).reshape(-1, 3)
    rgb = np.array([p["rgb"] for p in points], dtype=np.float64).reshape(-1, 3)
    n = len(xyz)

    if n == 1:
        nn_mean = np.array([1.0])
    else:
        k = min(3, n - 1)
        dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
        nn_mean = dist[:, 1:].mean(axis=1)
    nn_mean = np.maximum(nn_mean, 1e-7)

    kc = sh_coeff_count(0)
    sh = np.zeros((n, kc, 3), dtype=np.float64)
    sh[:, 0, :] = (rgb - 0.5) / core.SH_C0

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    cloud = SplatCloud.from_arrays(
        positions=xyz,
        rotations=rotations,
        log_scales=np.log(nn_mean)[:, None].repeat(3, axis=1),
        sh=sh,
        opacity_logits=np.full(n, core.logit(0.1)),
        sh_degree=0,
    )
    cloud.revision = 1
    return cloud


def _position_lr(config: TrainConfig, step: int, scene_extent: float) -> float:
    if config.position_lr_init == 0.0:
        return 0.0
    t = min(max(step, 0), config.position_lr_max_steps) / config.position_lr_max_steps
    lr = config.position_lr_init * (config.position_lr_final
                                    / config.position_lr_init) ** t
    return lr * scene_extent


def _group_lr(state: TrainState, name: str) -> float:
    cfg = state.config
    if name == "positions":
        return _position_lr(cfg, state.iteration, state.scene_extent)
    return {"rotations": cfg.rotation_lr, "log_scales": cfg.scale_lr,
            "sh": cfg.sh_lr, "opacity_logits": cfg.opacity_lr}[name]


_GRAD_FIELD = {"positions": "d_position", "rotations": "d_rotation",
               "log_scales": "d_log_scale", "sh": "d_sh",
               "opacity_logits": "d_opacity_logit"}


def train_step(state: TrainState, batch, frozen: np.ndarray | None = None) -> float:
    """Render each batch view, average gradients, apply one Adam step.

    `frozen` marks gaussians to leave untouched (parameters, moments and
    densification statistics); used by online updates."""
    if not batch:
        raise InvalidParameterError("batch must be non-empty")
    cloud = state.cloud
    n = len(cloud)
    grad_sum = {name: np.zeros_like(getattr(cloud, name), dtype=np.float64)
                for name in PARAM_GROUPS}
    loss_total = 0.0

    for view in batch:
        _, out, grads = rasterizer.render_and_backward(
            cloud, view.pose, view.intrinsics, state.config.background,
            view.image)
        loss_total += out["loss"]
        for name in PARAM_GROUPS:
            grad_sum[name] += getattr(grads, _GRAD_FIELD[name])
        seen = grads.observed.astype(bool)
        if frozen is not None:
            seen &= ~frozen
        state.grad_accum[seen] += grads.grad2d_norm[seen]
        state.obs_count[seen] += 1
        radii = _screen_radii(cloud, view.pose, view.intrinsics)
        state.max_radii_px[seen] = np.maximum(state.max_radii_px[seen],
                                              radii[seen])

    loss = loss_total / len(batch)
    if not math.isfinite(loss):
        raise TrainingDivergedError(state.iteration, loss)

    active = np.ones(n, dtype=bool) if frozen is None else ~frozen
    for name in PARAM_GROUPS:
        grad = grad_sum[name] / len(batch)
        lr = _group_lr(state, name)
        state.adam_steps[name] += 1
        t = state.adam_steps[name]
        m = state.moments_m[name]
        v = state.moments_v[name]
        m[active] = ADAM_B1 * m[active] + (1 - ADAM_B1) * grad[active]
        v[active] = ADAM_B2 * v[active] + (1 - ADAM_B2) * grad[active] ** 2
        if lr == 0.0:
            continue
        m_hat = m[active] / (1 - ADAM_B1**t)
        v_hat = v[active] / (1 - ADAM_B2**t)
        param = getattr(cloud, name)
        updated = param[active].astype(np.float64) \
            - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        param[active] = updated.astype(np.float32)

    state.iteration += 1
    cloud.tiling = None  # positions moved; the spatial grid is stale
    cloud.touch()
    state.loss_history.append(loss)
    return loss


def _screen_radii(cloud, pose, intr) -> np.ndarray:
    """Approximate 3-sigma projected radius in pixels (0 when culled)."""
    if len(cloud) == 0:
        return np.zeros(0)
    sigmas = core.covariance_from_params(cloud.rotations.astype(np.float64),
                                         cloud.log_scales.astype(np.float64))
    proj = core.project_batch(cloud.positions.astype(np.float64), sigmas,
                              pose, intr)
    eig_max = np.linalg.eigvalsh(proj["cov2d"])[:, -1]
    return np.where(proj["valid"], 3.0 * np.sqrt(np.maximum(eig_max, 0.0)), 0.0)


def densify_and_prune(state: TrainState, active: np.ndarray | None = None) -> dict:
    """One adaptive density control pass; returns {cloned, split, pruned}."""
    cloud = state.cloud
    cfg = state.config
    n = len(cloud)
    if active is None:
        active = np.ones(n, dtype=bool)

    counts = np.maximum(state.obs_count, 1.0)
    avg_grad = state.grad_accum / counts
    over = (avg_grad > cfg.densify_grad_threshold) & (state.obs_count > 0) & active

    max_scale = np.exp(cloud.log_scales.astype(np.float64)).max(axis=1)
    clone_bound = CLONE_SCALE_FRACTION * state.scene_extent
    clone_mask = over & (max_scale < clone_bound)
    split_mask = over & (max_scale >= clone_bound)

    new_arrays = {name: [] for name in PARAM_GROUPS}
    if clone_mask.any():
        for name in PARAM_GROUPS:
            new_arrays[name].append(getattr(cloud, name)[clone_mask])
    if split_mask.any():
        idx = np.flatnonzero(split_mask)
        parents = np.repeat(idx, SPLIT_CHILDREN)
        rot = core.quat_to_rotmat(cloud.rotations[parents].astype(np.float64))
        stds = np.exp(cloud.log_scales[parents].astype(np.float64))
        local = state.rng.normal(size=(len(parents), 3)) * stds
        offsets = np.einsum("nij,nj->ni", rot, local)
        new_arrays["positions"].append(
            (cloud.positions[parents].astype(np.float64) + offsets
             ).astype(np.float32))
        new_arrays["rotations"].append(cloud.rotations[parents])
        new_arrays["log_scales"].append(
            cloud.log_scales[parents] - np.float32(np.log(SPLIT_SCALE_SHRINK)))
        new_arrays["sh"].append(cloud.sh[parents])
        new_arrays["opacity_logits"].append(cloud.opacity_logits[parents])

    opacity = core.sigmoid(cloud.opacity_logits.astype(np.float64))
    prune_mask = opacity < cfg.opacity_prune_threshold
    prune_mask |= max_scale > cfg.world_size_cull_factor * state.scene_extent
    if cfg.screen_size_cull_px > 0 and state.iteration > cfg.opacity_reset_interval:
        prune_mask |= state.max_radii_px > cfg.screen_size_cull_px
    prune_mask &= active
    prune_mask |= split_mask  # split parents are replaced by their children

    keep = ~prune_mask
    report = {"cloned": int(clone_mask.sum()), "split": int(split_mask.sum()),
              "pruned": int((prune_mask & ~split_mask).sum())}

    cloud.keep(keep)
    for name in PARAM_GROUPS:
        state.moments_m[name] = state.moments_m[name][keep]
        state.moments_v[name] = state.moments_v[name][keep]

    if any(len(v) for v in new_arrays.values()):
        added = {name: np.concatenate(new_arrays[name])
                 for name in PARAM_GROUPS}
        cloud.append(added["positions"], added["rotations"],
                     added["log_scales"], added["sh"],
                     added["opacity_logits"])
        n_new = len(added["positions"])
        for name in PARAM_GROUPS:
            pad_shape = (n_new,) + state.moments_m[name].shape[1:]
            state.moments_m[name] = np.concatenate(
                [state.moments_m[name], np.zeros(pad_shape)])
            state.moments_v[name] = np.concatenate(
                [state.moments_v[name], np.zeros(pad_shape)])

    size = len(cloud)
    state.grad_accum = np.zeros(size)
    state.obs_count = np.zeros(size)
    state.max_radii_px = np.zeros(size)
    return report


def reset_opacity(state: TrainState, ceiling: float = 0.01):
    """Clamp opacity down to `ceiling` and clear its Adam moments."""
    cloud = state.cloud
    opacity = core.sigmoid(cloud.opacity_logits.astype(np.float64))
    clamped = np.minimum(opacity, ceiling)
    cloud.opacity_logits = core.logit(clamped).astype(np.float32)
    state.moments_m["opacity_logits"][:] = 0.0
    state.moments_v["opacity_logits"][:] = 0.0
    state.adam_steps["opacity_logits"] = 0
    cloud.touch()


def promote_sh(state: TrainState):
    cloud = state.cloud
    if cloud.sh_degree >= state.config.max_sh_degree:
        return
    old_k = cloud.sh.shape[1]
    cloud.promote_sh_degree()
    new_k = cloud.sh.shape[1]
    for store in (state.moments_m, state.moments_v):
        grown = np.zeros((len(cloud), new_k, 3))
        grown[:, :old_k] = store["sh"]
        store["sh"] = grown


def maintenance(state: TrainState, active: np.ndarray | None = None) -> dict | None:
    """Scheduled density control, opacity resets and SH promotion. Returns
    the densify report when one ran."""
    cfg = state.config
    it = state.iteration
    report = None
    if (cfg.sh_degree_promote_interval > 0 and it > 0
            and it % cfg.sh_degree_promote_interval == 0):
        promote_sh(state)
    if (cfg.densify_start <= it < cfg.densify_stop
            and it % cfg.densify_interval == 0):
        report = densify_and_prune(state, active)
    if (cfg.opacity_reset_interval > 0 and it > 0
            and it % cfg.opacity_reset_interval == 0):
        reset_opacity(state)
    return report


def train_loop(state: TrainState, views, iterations: int,
               progress=None) -> TrainState:
    """Offline optimization: sample batches, step, run scheduled maintenance."""
    views = list(views)
    if not views:
        raise InputError("no training views")
    for view in views:
        state.seen_views.append(view)
    for _ in range(iterations):
        picks = state.rng.integers(0, len(views), size=state.config.batch_size)
        batch = [views[int(i)] for i in picks]
        loss = train_step(state, batch)
        maintenance(state)
        if progress is not None:
            progress(state, loss)
    return state


def frustum_affected(cloud: SplatCloud, views) -> np.ndarray:
    """Gaussians whose mean projects inside any view's image bounds."""
    mask = np.zeros(len(cloud), dtype=bool)
    if len(cloud) == 0:
        return mask
    positions = cloud.positions.astype(np.float64)
    for view in views:
        intr = view.intrinsics
        p_cam = positions @ view.pose.rotation.T + view.pose.translation
        z = p_cam[:, 2]
        in_front = z > core.NEAR_PLANE
        zs = np.where(in_front, z, 1.0)
        u = intr.fx * p_cam[:, 0] / zs + intr.cx
        v = intr.fy * p_cam[:, 1] / zs + intr.cy
        mask |= in_front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    return mask


def online_update(state: TrainState, new_views, budget_iters: int) -> TrainState:
    """Refine only the region covered by new views: everything outside their
    frusta is frozen bit-for-bit. Batches draw from the new views with a
    replay mix of previously seen ones."""
    new_views = list(new_views)
    if not new_views:
        raise InputError("new_views must be non-empty")
    if budget_iters == 0:
        return state

    frozen = ~frustum_affected(state.cloud, new_views)
    prior = list(state.seen_views)
    for _ in range(budget_iters):
        batch = []
        for _ in range(state.config.batch_size):
            if prior and state.rng.random() < REPLAY_MIX:
                batch.append(prior[int(state.rng.integers(0, len(prior)))])
            else:
                batch.append(new_views[int(state.rng.integers(0, len(new_views)))])
        train_step(state, batch, frozen=frozen)
        before = len(state.cloud)
        report = maintenance(state, active=~frozen)
        if report is not None and len(state.cloud) != before:
            # cloud membership changed; recompute the freeze set
            frozen = ~frustum_affected(state.cloud, new_views)
    state.seen_views.extend(new_views)
    return state
