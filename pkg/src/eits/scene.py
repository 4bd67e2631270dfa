"""Procedural voxel rooms and the agent that walks them.

A scene is a dense voxel grid: floor slab, perimeter walls, a few interior
wall segments, and axis-aligned box objects.  Objects come in two bands:
ground objects sit on the floor and block navigation; stacked objects sit on
top of a ground object, above the agent's body, so they occlude and appear
in imagery but never block movement.  That split is what lets a flat 2D
label map conflate two distinct objects sharing a floor footprint.

The sensor is a pinhole depth-plus-instance camera traced straight through
the voxel grid.  Each visible object yields one pooled feature vector:
its fixed appearance plus a view-dependent perturbation that is a pure hash
of (view seed, object id, viewing octant), so re-rendering the same pose is
bit-identical and different vantage points genuinely disagree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage


class SceneGenerationError(RuntimeError):
    """Placement could not satisfy the free-space requirements."""


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2


@dataclass(frozen=True)
class AgentConfig:
    """Disc-footprint agent with a fixed-height body."""

    forward_step: float = 0.25
    turn_angle_deg: float = 30.0
    radius: float = 0.35
    body_height: float = 1.0


@dataclass(frozen=True)
class CameraModel:
    width: int = 64
    height: int = 64
    hfov_deg: float = 90.0
    max_range: float = 5.0
    mount_height: float = 1.0


@dataclass(frozen=True)
class SceneGenConfig:
    """Knobs for the procedural generator and the shared appearance model."""

    grid_dims: tuple[int, int, int] = (48, 48, 12)
    resolution: float = 0.25
    num_classes: int = 6
    feature_dim: int = 16
    # appearance geometry: class means live on orthogonal anchors, each
    # anchor carrying a near/confusable pair split along its own axis
    class_sep: float = 8.0
    pair_gap: float = 5.0
    appearance_sigma: float = 0.8
    view_jitter: float = 0.9
    appearance_seed: int = 71
    # layout
    n_objects_min: int = 6
    n_objects_max: int = 10
    n_walls_min: int = 2
    n_walls_max: int = 4
    stack_prob: float = 0.35
    ground_base_h: int = 1
    stack_gap_h: int = 0
    footprint_min: int = 2
    footprint_max: int = 4
    obj_height_min: int = 2
    obj_height_max: int = 3
    min_free_frac: float = 0.25
    max_place_tries: int = 200
    max_scene_tries: int = 8


@dataclass(frozen=True)
class ObjectInstance:
    """Axis-aligned box with a semantic class and a fixed appearance vector.

    `lo` is inclusive, `hi` exclusive, both in voxel indices.
    """

    object_id: int
    class_id: int
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]
    appearance: np.ndarray
    view_jitter_scale: float

    def center_world(self, resolution: float) -> np.ndarray:
        return (np.asarray(self.lo, float) + np.asarray(self.hi, float)) * 0.5 * resolution

    def footprint(self) -> tuple[int, int, int, int]:
        return self.lo[0], self.lo[1], self.hi[0], self.hi[1]


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    theta: float  # radians, 0 = +x ("east"), counterclockwise


@dataclass
class SceneSpec:
    grid_dims: tuple[int, int, int]
    resolution: float
    obstacles: np.ndarray  # structural occupancy (floor + walls), bool (L, W, H)
    objects: list[ObjectInstance]
    num_classes: int
    feature_dim: int
    seed: int
    scene_id: str = ""
    floor_height: int = 0
    _solid: np.ndarray | None = field(default=None, repr=False)
    _cell_object: np.ndarray | None = field(default=None, repr=False)
    _nav_cache: dict = field(default_factory=dict, repr=False)

    @property
    def solid(self) -> np.ndarray:
        """Structural obstacles with object boxes burned in."""
        if self._solid is None:
            self._build_volumes()
        return self._solid

    @property
    def cell_object(self) -> np.ndarray:
        """Per-voxel object id, -1 where none.  Later objects never overwrite
        earlier ones because placement forbids overlap."""
        if self._cell_object is None:
            self._build_volumes()
        return self._cell_object

    def _build_volumes(self) -> None:
        solid = self.obstacles.copy()
        cell_object = np.full(self.grid_dims, -1, dtype=np.int32)
        for obj in self.objects:
            l0, w0, h0 = obj.lo
            l1, w1, h1 = obj.hi
            solid[l0:l1, w0:w1, h0:h1] = True
            cell_object[l0:l1, w0:w1, h0:h1] = obj.object_id
        self._solid = solid
        self._cell_object = cell_object

    def nav_band(self, agent: AgentConfig) -> tuple[int, int]:
        """Inclusive voxel height range the agent's body sweeps through."""
        lo = self.floor_height + 1
        hi = self.floor_height + max(1, round(agent.body_height / self.resolution) - 1)
        return lo, min(hi, self.grid_dims[2] - 1)

    def nav_free(self, agent: AgentConfig) -> np.ndarray:
        """2D mask of columns a point agent could occupy (body band clear)."""
        key = ("nav", agent.body_height)
        if key not in self._nav_cache:
            lo, hi = self.nav_band(agent)
            self._nav_cache[key] = ~self.solid[:, :, lo : hi + 1].any(axis=2)
        return self._nav_cache[key]

    def footprint_free(self, x: float, y: float, agent: AgentConfig) -> bool:
        """True if a disc of the agent's radius centered at (x, y) fits."""
        free = self.nav_free(agent)
        res = self.resolution
        offs = _disc_offsets(agent.radius, res)
        cl = int(math.floor(x / res))
        cw = int(math.floor(y / res))
        L, W = free.shape
        for dl, dw in offs:
            l, w = cl + dl, cw + dw
            if l < 0 or w < 0 or l >= L or w >= W or not free[l, w]:
                return False
        return True


_DISC_CACHE: dict[tuple[float, float], tuple[tuple[int, int], ...]] = {}


def _disc_offsets(radius: float, resolution: float) -> tuple[tuple[int, int], ...]:
    key = (radius, resolution)
    if key not in _DISC_CACHE:
        r_cells = int(math.ceil(radius / resolution))
        offs = []
        for dl in range(-r_cells, r_cells + 1):
            for dw in range(-r_cells, r_cells + 1):
                # worst-case corner of the cell relative to the disc center
                # sitting anywhere in its own cell: conservative by one cell
                if math.hypot(dl, dw) * resolution <= radius + resolution * 0.5:
                    offs.append((dl, dw))
        _DISC_CACHE[key] = tuple(offs)
    return _DISC_CACHE[key]


# ---------------------------------------------------------------------------
# appearance model


def class_feature_means(cfg: SceneGenConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-class appearance means plus the per-pair confusion axes.

    Anchors for class pairs (0,1), (2,3), (4,5) are orthonormal directions
    scaled by class_sep; the two classes of a pair sit at anchor +/- half the
    pair gap along a unit axis orthogonal to all anchors.  Keyed only by
    appearance_seed so every scene in a pool shares one appearance model.

    Returns (means (C, F), axes (C//2, F)).
    """
    C, F = cfg.num_classes, cfg.feature_dim
    if C % 2 != 0:
        raise ValueError("num_classes must be even (classes come in confusable pairs)")
    n_pairs = C // 2
    if F < 2 * n_pairs:
        raise ValueError("feature_dim too small for orthogonal anchor/axis construction")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.appearance_seed, 0xC1A55)))
    raw = rng.normal(size=(2 * n_pairs, F))
    q, _ = np.linalg.qr(raw.T)
    basis = q.T[: 2 * n_pairs]
    anchors = basis[:n_pairs] * cfg.class_sep
    axes = basis[n_pairs:]
    means = np.empty((C, F))
    for k in range(n_pairs):
        means[2 * k] = anchors[k] - 0.5 * cfg.pair_gap * axes[k]
        means[2 * k + 1] = anchors[k] + 0.5 * cfg.pair_gap * axes[k]
    return means, axes


# ---------------------------------------------------------------------------
# generation


def generate_scene(seed: int, cfg: SceneGenConfig | None = None, scene_id: str = "") -> SceneSpec:
    """Procedurally build a scene; raises SceneGenerationError if the free-space
    requirement cannot be met after max_scene_tries rebuilds."""
    cfg = cfg or SceneGenConfig()
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5CE4E)))
    means, _ = class_feature_means(cfg)
    for _ in range(cfg.max_scene_tries):
        scene = _try_build(rng, cfg, means, seed, scene_id)
        if scene is not None:
            return scene
    raise SceneGenerationError(
        f"seed {seed}: no layout with a free region >= {cfg.min_free_frac:.0%} "
        f"of the floor after {cfg.max_scene_tries} attempts"
    )


def _try_build(rng, cfg: SceneGenConfig, means: np.ndarray, seed: int, scene_id: str) -> SceneSpec | None:
    L, W, H = cfg.grid_dims
    obstacles = np.zeros((L, W, H), dtype=bool)
    obstacles[:, :, cfg.ground_base_h - 1] = True  # floor slab
    obstacles[0, :, :] = obstacles[-1, :, :] = True
    obstacles[:, 0, :] = obstacles[:, -1, :] = True

    for _ in range(rng.integers(cfg.n_walls_min, cfg.n_walls_max + 1)):
        _add_interior_wall(rng, obstacles)

    solid = obstacles.copy()
    objects: list[ObjectInstance] = []
    n_objects = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    class_ids = _draw_class_ids(rng, n_objects, cfg.num_classes)

    for obj_id in range(n_objects):
        placed = _place_object(rng, cfg, solid, objects, obj_id, class_ids[obj_id], means)
        if placed is None:
            return None
        objects.append(placed)
        l0, w0, h0 = placed.lo
        l1, w1, h1 = placed.hi
        solid[l0:l1, w0:w1, h0:h1] = True

    scene = SceneSpec(
        grid_dims=cfg.grid_dims,
        resolution=cfg.resolution,
        obstacles=obstacles,
        objects=objects,
        num_classes=cfg.num_classes,
        feature_dim=cfg.feature_dim,
        seed=int(seed),
        scene_id=scene_id,
    )
    if _largest_free_region(scene) < cfg.min_free_frac * L * W:
        return None
    return scene


def _draw_class_ids(rng, n: int, num_classes: int) -> np.ndarray:
    # every class present at least once when n >= C, remainder uniform
    base = rng.permutation(num_classes)
    if n <= num_classes:
        return base[:n]
    extra = rng.integers(0, num_classes, size=n - num_classes)
    return np.concatenate([base, extra])


def _add_interior_wall(rng, obstacles: np.ndarray) -> None:
    L, W, H = obstacles.shape
    along_l = bool(rng.integers(2))
    span = L if along_l else W
    lane = int(rng.integers(4, (W if along_l else L) - 4))
    a = int(rng.integers(1, span // 2))
    b = int(rng.integers(a + span // 4, span - 1))
    gap_lo = int(rng.integers(a, max(a + 1, b - 4)))
    gap_hi = min(b, gap_lo + int(rng.integers(3, 6)))
    if along_l:
        obstacles[a:b, lane, :] = True
        obstacles[gap_lo:gap_hi, lane, :] = False
        obstacles[gap_lo:gap_hi, lane, 0] = True  # keep the floor
    else:
        obstacles[lane, a:b, :] = True
        obstacles[lane, gap_lo:gap_hi, :] = False
        obstacles[lane, gap_lo:gap_hi, 0] = True


def _place_object(rng, cfg, solid, objects, obj_id, class_id, means) -> ObjectInstance | None:
    L, W, H = solid.shape
    appearance = means[class_id] + cfg.appearance_sigma * rng.normal(size=cfg.feature_dim)

    stack_on = None
    if rng.random() < cfg.stack_prob:
        candidates = [
            o for o in objects
            if o.lo[2] == cfg.ground_base_h
            and (o.hi[0] - o.lo[0]) >= 2 and (o.hi[1] - o.lo[1]) >= 2
            and not any(s.lo[2] == o.hi[2] and _xy_overlap(s, o) for s in objects)
        ]
        if candidates:
            stack_on = candidates[rng.integers(len(candidates))]

    for _ in range(cfg.max_place_tries):
        height = int(rng.integers(cfg.obj_height_min, cfg.obj_height_max + 1))
        if stack_on is not None:
            sl0, sw0, sl1, sw1 = stack_on.footprint()
            fl = int(rng.integers(1, sl1 - sl0))
            fw = int(rng.integers(1, sw1 - sw0))
            l0 = int(rng.integers(sl0, sl1 - fl + 1))
            w0 = int(rng.integers(sw0, sw1 - fw + 1))
            h0 = stack_on.hi[2] + cfg.stack_gap_h
        else:
            fl = int(rng.integers(cfg.footprint_min, cfg.footprint_max + 1))
            fw = int(rng.integers(cfg.footprint_min, cfg.footprint_max + 1))
            l0 = int(rng.integers(1, L - 1 - fl))
            w0 = int(rng.integers(1, W - 1 - fw))
            h0 = cfg.ground_base_h
        h1 = h0 + height
        if h1 > H:
            continue
        if solid[l0 : l0 + fl, w0 : w0 + fw, h0:h1].any():
            continue
        return ObjectInstance(
            object_id=obj_id,
            class_id=int(class_id),
            lo=(l0, w0, h0),
            hi=(l0 + fl, w0 + fw, h1),
            appearance=appearance,
            view_jitter_scale=cfg.view_jitter,
        )
    return None


def _xy_overlap(a: ObjectInstance, b: ObjectInstance) -> bool:
    return not (a.hi[0] <= b.lo[0] or b.hi[0] <= a.lo[0] or a.hi[1] <= b.lo[1] or b.hi[1] <= a.lo[1])


def _largest_free_region(scene: SceneSpec, agent: AgentConfig | None = None) -> int:
    free = scene.nav_free(agent or AgentConfig())
    labels, n = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def default_start_pose(scene: SceneSpec, agent: AgentConfig | None = None) -> AgentPose:
    """Footprint-valid cell of the largest free region nearest the room center,
    facing east."""
    agent = agent or AgentConfig()
    free = scene.nav_free(agent)
    labels, n = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        raise SceneGenerationError("scene has no navigable space")
    counts = np.bincount(labels.ravel())[1:]
    region = labels == (int(np.argmax(counts)) + 1)
    L, W = free.shape
    res = scene.resolution
    cells = np.argwhere(region)
    center = np.array([(L - 1) / 2.0, (W - 1) / 2.0])
    order = np.argsort(((cells - center) ** 2).sum(axis=1), kind="stable")
    for idx in order:
        l, w = cells[idx]
        x, y = (l + 0.5) * res, (w + 0.5) * res
        if scene.footprint_free(x, y, agent):
            return AgentPose(x=x, y=y, theta=0.0)
    raise SceneGenerationError("no footprint-valid start cell in the largest free region")


# ---------------------------------------------------------------------------
# kinematics


def step(scene: SceneSpec, pose: AgentPose, action: Action, agent: AgentConfig | None = None) -> tuple[AgentPose, bool]:
    """Apply one discrete action.  Returns (new_pose, collided); a blocked
    forward leaves the pose unchanged and reports the collision."""
    agent = agent or AgentConfig()
    if action == Action.TURN_LEFT:
        return AgentPose(pose.x, pose.y, _wrap_angle(pose.theta + math.radians(agent.turn_angle_deg))), False
    if action == Action.TURN_RIGHT:
        return AgentPose(pose.x, pose.y, _wrap_angle(pose.theta - math.radians(agent.turn_angle_deg))), False
    if action != Action.FORWARD:
        raise ValueError(f"unknown action: {action!r}")
    nx = pose.x + agent.forward_step * math.cos(pose.theta)
    ny = pose.y + agent.forward_step * math.sin(pose.theta)
    if scene.footprint_free(nx, ny, agent):
        return AgentPose(nx, ny, pose.theta), False
    return pose, True


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    out = math.fmod(theta + math.pi, 2.0 * math.pi)
    if out <= 0.0:
        out += 2.0 * math.pi
    return out - math.pi


# ---------------------------------------------------------------------------
# rendering


@dataclass
class Observation:
    """One camera frame: per-pixel depth and object instance ids, plus the
    pooled feature each visible object presented from this vantage point."""

    depth: np.ndarray  # (H, W) float64, +inf where nothing within range
    instance_ids: np.ndarray  # (H, W) int32, -1 for background/structure
    object_features: dict[int, np.ndarray]  # object id -> (F,) view-pooled feature
    object_classes: dict[int, int]  # ground-truth class per visible object
    pose: AgentPose
    view_seed: int
    object_pixel_counts: dict[int, int] | None = None
    _dirs_world: np.ndarray | None = None  # cached by render for reprojection

    @property
    def visible_object_ids(self) -> list[int]:
        return sorted(self.object_features)


_PIXEL_DIR_CACHE: dict[tuple, np.ndarray] = {}
_WORLD_DIR_CACHE: dict[tuple, np.ndarray] = {}


def camera_ray_dirs(camera: CameraModel) -> np.ndarray:
    """Unit ray directions in the camera frame (+x forward, +y left, +z up),
    row-major pixel order, shape (H*W, 3).  Square pixels; vertical FOV
    follows from the aspect ratio."""
    key = (camera.width, camera.height, camera.hfov_deg)
    if key not in _PIXEL_DIR_CACHE:
        w, h = camera.width, camera.height
        half = math.tan(math.radians(camera.hfov_deg) / 2.0)
        us = (np.arange(w) + 0.5) / w * 2.0 - 1.0  # left -> right
        vs = (np.arange(h) + 0.5) / h * 2.0 - 1.0  # top -> bottom
        uu, vv = np.meshgrid(us, vs)
        aspect = h / w
        dirs = np.stack(
            [np.ones_like(uu), -uu * half, -vv * half * aspect], axis=-1
        ).reshape(-1, 3)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        _PIXEL_DIR_CACHE[key] = dirs
    return _PIXEL_DIR_CACHE[key]


def _world_ray_dirs(camera: CameraModel, theta: float) -> np.ndarray:
    """Camera rays rotated into the world frame.

    Headings are multiples of the turn angle in practice, so the rotated
    bundles are cached per 30-degree spoke; anything off-lattice (hand-built
    eval poses) is computed directly.
    """
    spoke = round(theta * 6.0 / math.pi)
    if abs(theta - spoke * math.pi / 6.0) < 1e-9:
        # snap to the exact spoke so cached bundles are order-independent
        key = (camera.width, camera.height, camera.hfov_deg, spoke % 12)
        cached = _WORLD_DIR_CACHE.get(key)
        if cached is not None:
            return cached
        theta = spoke * math.pi / 6.0
    else:
        key = None
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    dirs = np.ascontiguousarray(camera_ray_dirs(camera) @ rot.T)
    if key is not None:
        _WORLD_DIR_CACHE[key] = dirs
    return dirs


@numba.njit(cache=True)
def _splitmix64(x):
    x = (x + numba.uint64(0x9E3779B97F4A7C15)) & numba.uint64(0xFFFFFFFFFFFFFFFF)
    z = x
    z = ((z ^ (z >> numba.uint64(30))) * numba.uint64(0xBF58476D1CE4E5B9)) & numba.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> numba.uint64(27))) * numba.uint64(0x94D049BB133111EB)) & numba.uint64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> numba.uint64(31))


@numba.njit(cache=True)
def _hash_gauss(view_seed, obj_id, sector, n, out):
    """Deterministic standard normals keyed by (view_seed, obj, sector).

    Counter-mode splitmix64 stream fed through Box-Muller.  A full generator
    object per (object, octant) pair is far too slow for the render loop;
    this is a few dozen integer ops per draw and platform-stable.
    """
    base = _splitmix64(
        _splitmix64(numba.uint64(view_seed) * numba.uint64(0x9E3779B97F4A7C15))
        ^ _splitmix64(numba.uint64(obj_id) + numba.uint64(0xD1B54A32D192ED03))
        ^ _splitmix64(numba.uint64(sector) + numba.uint64(0x8BB84B93962EACC9))
    )
    i = 0
    ctr = numba.uint64(0)
    while i < n:
        u1 = (_splitmix64(base + ctr) >> numba.uint64(11)) * 1.1102230246251565e-16
        u2 = (_splitmix64(base + ctr + numba.uint64(1)) >> numba.uint64(11)) * 1.1102230246251565e-16
        ctr += numba.uint64(2)
        if u1 <= 1e-300:
            continue
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        i += 1
        if i < n:
            out[i] = r * math.sin(2.0 * math.pi * u2)
            i += 1


def view_jitter(view_seed: int, obj_id: int, sector: int, dim: int) -> np.ndarray:
    out = np.empty(dim)
    _hash_gauss(
        np.uint64(view_seed & 0xFFFFFFFFFFFFFFFF),
        np.uint64(obj_id),
        np.uint64(sector),
        dim,
        out,
    )
    return out


def viewing_sector(obj_center_xy: np.ndarray, cam_xy: np.ndarray, n_sectors: int = 8) -> int:
    """Octant of the object-to-camera direction; equal-size angular bins."""
    d = cam_xy - obj_center_xy
    ang = math.atan2(d[1], d[0]) % (2.0 * math.pi)
    return min(int(ang / (2.0 * math.pi / n_sectors)), n_sectors - 1)


@numba.njit(cache=True, fastmath=True)
def _raycast(solid, cell_object, ox, oy, oz, dirs, max_range, res, depth, inst, obj_px):
    """Amanatides-Woo traversal through the voxel grid for every ray.

    obj_px (n_objects,) accumulates hit-pixel counts per object so callers
    never have to histogram the instance image."""
    L, W, H = solid.shape
    n = dirs.shape[0]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        l = int(math.floor(ox / res))
        w = int(math.floor(oy / res))
        h = int(math.floor(oz / res))
        depth[i] = np.inf
        inst[i] = -1
        if l < 0 or w < 0 or h < 0 or l >= L or w >= W or h >= H:
            continue

        sl = 1 if dx > 0 else -1
        sw = 1 if dy > 0 else -1
        sh = 1 if dz > 0 else -1
        # distance along the ray to the first boundary crossing on each axis
        if dx != 0.0:
            tdl = abs(res / dx)
            nb = (l + (1 if dx > 0 else 0)) * res
            tml = (nb - ox) / dx
        else:
            tdl = np.inf
            tml = np.inf
        if dy != 0.0:
            tdw = abs(res / dy)
            nb = (w + (1 if dy > 0 else 0)) * res
            tmw = (nb - oy) / dy
        else:
            tdw = np.inf
            tmw = np.inf
        if dz != 0.0:
            tdh = abs(res / dz)
            nb = (h + (1 if dz > 0 else 0)) * res
            tmh = (nb - oz) / dz
        else:
            tdh = np.inf
            tmh = np.inf

        t = 0.0
        while t <= max_range:
            if solid[l, w, h]:
                depth[i] = t
                obj = cell_object[l, w, h]
                inst[i] = obj
                if obj >= 0:
                    obj_px[obj] += 1
                break
            if tml <= tmw and tml <= tmh:
                t = tml
                tml += tdl
                l += sl
                if l < 0 or l >= L:
                    break
            elif tmw <= tmh:
                t = tmw
                tmw += tdw
                w += sw
                if w < 0 or w >= W:
                    break
            else:
                t = tmh
                tmh += tdh
                h += sh
                if h < 0 or h >= H:
                    break


def render(
    scene: SceneSpec,
    pose: AgentPose,
    camera: CameraModel | None = None,
    view_seed: int | None = None,
) -> Observation:
    """Trace the camera through the scene from `pose`.

    The returned per-object feature is the appearance vector plus the view
    jitter for the octant the camera occupies around that object.  Jitter is
    keyed by the scene's own seed (unless overridden), so a given object
    shows the same face from the same side no matter who looks or when;
    view-dependent appearance is a property of the scene, not of the
    observer.  Rays that start inside a solid cell report zero depth on that
    cell, which simply never happens from a footprint-valid pose.
    """
    camera = camera or CameraModel()
    if view_seed is None:
        view_seed = scene.seed
    dirs_world = _world_ray_dirs(camera, pose.theta)

    n = dirs_world.shape[0]
    depth = np.empty(n)
    inst = np.empty(n, dtype=np.int32)
    obj_px = np.zeros(len(scene.objects), dtype=np.int64)
    _raycast(
        scene.solid,
        scene.cell_object,
        pose.x,
        pose.y,
        camera.mount_height,
        dirs_world,
        camera.max_range,
        scene.resolution,
        depth,
        inst,
        obj_px,
    )

    cam_xy = np.array([pose.x, pose.y])
    features: dict[int, np.ndarray] = {}
    classes: dict[int, int] = {}
    counts: dict[int, int] = {}
    for obj_id in np.nonzero(obj_px)[0]:
        obj = scene.objects[obj_id]
        sector = viewing_sector(obj.center_world(scene.resolution)[:2], cam_xy)
        jit = view_jitter(view_seed, int(obj_id), sector, scene.feature_dim)
        features[int(obj_id)] = obj.appearance + obj.view_jitter_scale * jit
        classes[int(obj_id)] = obj.class_id
        counts[int(obj_id)] = int(obj_px[obj_id])

    return Observation(
        depth=depth.reshape(camera.height, camera.width),
        instance_ids=inst.reshape(camera.height, camera.width),
        object_features=features,
        object_classes=classes,
        pose=pose,
        view_seed=view_seed,
        object_pixel_counts=counts,
        _dirs_world=dirs_world,
    )


# ---------------------------------------------------------------------------
# serialization

SCENE_FORMAT = "scene.v1"


def _rle_encode(flat: np.ndarray) -> list[int]:
    """Alternating run lengths, first run counts False values."""
    flat = np.asarray(flat, dtype=bool)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(np.diff(flat.astype(np.int8)))
    bounds = np.concatenate([[-1], changes, [flat.size - 1]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def _rle_decode(runs: list[int], size: int) -> np.ndarray:
    if sum(runs) != size:
        raise ValueError(f"obstacle run lengths sum to {sum(runs)}, expected {size}")
    out = np.zeros(size, dtype=bool)
    pos = 0
    val = False
    for run in runs:
        if run:
            out[pos : pos + run] = val
        pos += run
        val = not val
    return out


def scene_to_dict(scene: SceneSpec) -> dict:
    return {
        "format": SCENE_FORMAT,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "grid_dims": list(scene.grid_dims),
        "resolution": scene.resolution,
        "floor_height": scene.floor_height,
        "num_classes": scene.num_classes,
        "feature_dim": scene.feature_dim,
        "obstacles_rle": _rle_encode(scene.obstacles.ravel(order="C")),
        "objects": [
            {
                "object_id": o.object_id,
                "class_id": o.class_id,
                "lo": list(o.lo),
                "hi": list(o.hi),
                "appearance": [float(v) for v in o.appearance],
                "view_jitter_scale": o.view_jitter_scale,
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(data: dict) -> SceneSpec:
    if data.get("format") != SCENE_FORMAT:
        raise ValueError(f"not a {SCENE_FORMAT} document: format={data.get('format')!r}")
    dims = tuple(int(v) for v in data["grid_dims"])
    obstacles = _rle_decode(data["obstacles_rle"], dims[0] * dims[1] * dims[2]).reshape(dims)
    objects = [
        ObjectInstance(
            object_id=int(o["object_id"]),
            class_id=int(o["class_id"]),
            lo=tuple(int(v) for v in o["lo"]),
            hi=tuple(int(v) for v in o["hi"]),
            appearance=np.asarray(o["appearance"], dtype=float),
            view_jitter_scale=float(o["view_jitter_scale"]),
        )
        for o in data["objects"]
    ]
    return SceneSpec(
        grid_dims=dims,
        resolution=float(data["resolution"]),
        obstacles=obstacles,
        objects=objects,
        num_classes=int(data["num_classes"]),
        feature_dim=int(data["feature_dim"]),
        seed=int(data["seed"]),
        scene_id=str(data.get("scene_id", "")),
        floor_height=int(data.get("floor_height", 0)),
    )


def save_scene(scene: SceneSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_dict(scene), fh, sort_keys=True)
        fh.write("\n")


def load_scene(path: str | Path) -> SceneSpec:
    with open(path) as fh:
        return scene_from_dict(json.load(fh))
