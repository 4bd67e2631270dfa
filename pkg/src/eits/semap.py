"""The 3D semantic distribution map and its update rule.

Channel 0 is obstacle occupancy, channel 1 an explored flag, channels 2..K-1
a per-voxel distribution over classes.  Class channels hold an exponential
moving average of the per-view distributions projected into that voxel: the
first class observation is written through unchanged; each later view blends
in with weight lambda, so the stored value keeps weight (1 - lambda) and a
repeated identical observation closes the gap by a factor 0.7 per fusion at
the default lambda = 0.3.  Obstacle and explored fuse by max, so exploration
never un-explores.

Class channels live in float64; the on-disk format narrows to float32,
matching what downstream consumers need.

The agent starts every episode at the map's center voxel facing east; the
map is laid over the scene by choosing the origin that puts the start pose
there.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .scene import AgentPose, CameraModel, Observation, camera_ray_dirs

MAP_MAGIC = b"SDM1"


@dataclass(frozen=True)
class MapConfig:
    length: int = 96
    width: int = 96
    height: int = 12
    resolution: float = 0.25
    ema_lambda: float = 0.3


@dataclass
class SemanticDistributionMap:
    data: np.ndarray  # (K, L, W, H) float64, K = C + 2
    resolution: float
    origin: np.ndarray  # world position of voxel (0,0,0) corner, (3,)

    OBSTACLE = 0
    EXPLORED = 1
    CLASS0 = 2

    @property
    def num_classes(self) -> int:
        return self.data.shape[0] - 2

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]

    @property
    def obstacle(self) -> np.ndarray:
        return self.data[self.OBSTACLE]

    @property
    def explored(self) -> np.ndarray:
        return self.data[self.EXPLORED]

    @property
    def class_channels(self) -> np.ndarray:
        return self.data[self.CLASS0 :]

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return np.floor((np.atleast_2d(points) - self.origin) / self.resolution).astype(np.int64)

    def voxel_center(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx, float) + 0.5) * self.resolution

    def copy(self) -> "SemanticDistributionMap":
        return SemanticDistributionMap(self.data.copy(), self.resolution, self.origin.copy())


def init_map(num_classes: int, cfg: MapConfig | None = None, origin=None) -> SemanticDistributionMap:
    cfg = cfg or MapConfig()
    if num_classes < 2:
        raise ValueError("need at least two classes")
    data = np.zeros((num_classes + 2, cfg.length, cfg.width, cfg.height))
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    return SemanticDistributionMap(data, cfg.resolution, origin)


def map_centered_on(pose: AgentPose, num_classes: int, cfg: MapConfig | None = None) -> SemanticDistributionMap:
    """Map whose center voxel contains `pose`; vertical origin at z = 0."""
    cfg = cfg or MapConfig()
    origin = np.array(
        [
            pose.x - (cfg.length // 2 + 0.5) * cfg.resolution,
            pose.y - (cfg.width // 2 + 0.5) * cfg.resolution,
            0.0,
        ]
    )
    return init_map(num_classes, cfg, origin)


def center_start_pose(m: SemanticDistributionMap) -> AgentPose:
    """Start convention: the map's center voxel, facing east."""
    L, W, _ = m.dims
    c = m.voxel_center(np.array([L // 2, W // 2, 0]))
    return AgentPose(x=float(c[0]), y=float(c[1]), theta=0.0)


@dataclass
class VoxelObservation:
    """One frame reduced to the voxels it touched.

    `dists` rows are the pixel-count-weighted mean class distribution of the
    object pixels that landed in each voxel; rows with `class_counts` zero
    (structure-only voxels) are all-zero.  `hit` marks voxels containing any
    depth return, object or structure.
    """

    indices: np.ndarray  # (N, 3) int64 voxel indices
    dists: np.ndarray  # (N, C) float64
    class_counts: np.ndarray  # (N,) int64 object pixels per voxel
    hit: np.ndarray  # (N,) bool

    @property
    def n_voxels(self) -> int:
        return self.indices.shape[0]


def project(
    obs: Observation,
    pixel_distributions: np.ndarray,
    m: SemanticDistributionMap,
    camera: CameraModel | None = None,
) -> VoxelObservation:
    """Project a frame's depth returns into map voxels.

    Every in-range, in-bounds return marks its voxel as hit.  Pixels with an
    object instance contribute their row of `pixel_distributions` to the
    voxel's class mixture, weighted equally per pixel.  Out-of-range pixels
    and voxels outside the map are dropped.
    """
    camera = camera or CameraModel()
    H, W = obs.depth.shape
    C = pixel_distributions.shape[-1]
    if pixel_distributions.shape[:2] != (H, W):
        raise ValueError("pixel_distributions does not match the frame size")

    dirs = obs._dirs_world
    if dirs is None:
        import math

        c, s = math.cos(obs.pose.theta), math.sin(obs.pose.theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        dirs = camera_ray_dirs(camera) @ rot.T

    depth = obs.depth.ravel()
    inst = obs.instance_ids.ravel()
    hit_px = np.isfinite(depth)
    if not hit_px.any():
        return VoxelObservation(
            np.empty((0, 3), np.int64), np.empty((0, C)), np.empty(0, np.int64), np.empty(0, bool)
        )

    origin_world = np.array([obs.pose.x, obs.pose.y, camera.mount_height])
    pts = origin_world + dirs[hit_px] * depth[hit_px, None]
    vox = np.floor((pts - m.origin) / m.resolution).astype(np.int64)
    L, Wm, Hm = m.dims
    ok = (
        (vox[:, 0] >= 0) & (vox[:, 0] < L)
        & (vox[:, 1] >= 0) & (vox[:, 1] < Wm)
        & (vox[:, 2] >= 0) & (vox[:, 2] < Hm)
    )
    vox = vox[ok]
    if vox.shape[0] == 0:
        return VoxelObservation(
            np.empty((0, 3), np.int64), np.empty((0, C)), np.empty(0, np.int64), np.empty(0, bool)
        )
    px_inst = inst[hit_px][ok]
    px_dist = pixel_distributions.reshape(-1, C)[hit_px][ok]

    ravel = (vox[:, 0] * Wm + vox[:, 1]) * Hm + vox[:, 2]
    uniq, inverse = np.unique(ravel, return_inverse=True)
    n = uniq.shape[0]

    counts = np.bincount(inverse, weights=(px_inst >= 0).astype(float), minlength=n)
    sums = np.zeros((n, C))
    obj_px = px_inst >= 0
    if obj_px.any():
        inv_obj = inverse[obj_px]
        d_obj = px_dist[obj_px]
        for c in range(C):
            sums[:, c] = np.bincount(inv_obj, weights=d_obj[:, c], minlength=n)
    dists = np.zeros((n, C))
    nz = counts > 0
    dists[nz] = sums[nz] / counts[nz, None]

    idx3 = np.empty((n, 3), dtype=np.int64)
    idx3[:, 2] = uniq % Hm
    rem = uniq // Hm
    idx3[:, 1] = rem % Wm
    idx3[:, 0] = rem // Wm
    return VoxelObservation(
        indices=idx3,
        dists=dists,
        class_counts=counts.astype(np.int64),
        hit=np.ones(n, dtype=bool),
    )


@numba.njit(cache=True)
def _project_kernel(dirs, depth, inst, dist_lut, has_dist, ox, oy, oz,
                    m0, m1, m2, res, L, W, H, slot, flat_out, acc, cnt):
    """Single-pass pixel-to-voxel pooling.

    `slot` is a persistent (L*W*H,) int32 scratch, -1 everywhere between
    calls; touched entries are restored before returning so the buffer can
    be reused without a full clear.  Returns the number of distinct voxels.
    """
    n = 0
    C = dist_lut.shape[1]
    for i in range(depth.shape[0]):
        d = depth[i]
        if not np.isfinite(d):
            continue
        l = int(math.floor((ox + dirs[i, 0] * d - m0) / res))
        w = int(math.floor((oy + dirs[i, 1] * d - m1) / res))
        h = int(math.floor((oz + dirs[i, 2] * d - m2) / res))
        if l < 0 or l >= L or w < 0 or w >= W or h < 0 or h >= H:
            continue
        flat = (l * W + w) * H + h
        s = slot[flat]
        if s < 0:
            s = n
            slot[flat] = s
            flat_out[s] = flat
            cnt[s] = 0
            for c in range(C):
                acc[s, c] = 0.0
            n += 1
        ob = inst[i]
        if ob >= 0 and has_dist[ob]:
            cnt[s] += 1
            for c in range(C):
                acc[s, c] += dist_lut[ob, c]
    for j in range(n):
        slot[flat_out[j]] = -1
    return n


_SLOT_SCRATCH: dict[tuple[int, int, int], np.ndarray] = {}


def project_view(
    obs: Observation,
    predictions: list,
    m: SemanticDistributionMap,
    camera: CameraModel | None = None,
) -> VoxelObservation:
    """`project` without materializing a per-pixel distribution image.

    Equivalent to project(obs, image-of-predictions, ...) because a pixel's
    distribution is constant across its object; verified against that route
    in the test suite.  This is the collection/training hot path.
    """
    camera = camera or CameraModel()
    C = m.num_classes
    dirs = obs._dirs_world
    if dirs is None:
        c0, s0 = math.cos(obs.pose.theta), math.sin(obs.pose.theta)
        rot = np.array([[c0, -s0, 0.0], [s0, c0, 0.0], [0.0, 0.0, 1.0]])
        dirs = np.ascontiguousarray(camera_ray_dirs(camera) @ rot.T)

    n_obj = max((p.object_id for p in predictions), default=-1) + 1
    dist_lut = np.zeros((max(n_obj, 1), C))
    has_dist = np.zeros(max(n_obj, 1), dtype=np.bool_)
    for p in predictions:
        dist_lut[p.object_id] = p.distribution
        has_dist[p.object_id] = True

    L, Wm, Hm = m.dims
    key = (L, Wm, Hm)
    slot = _SLOT_SCRATCH.get(key)
    if slot is None:
        slot = np.full(L * Wm * Hm, -1, dtype=np.int32)
        _SLOT_SCRATCH[key] = slot
    npix = obs.depth.size
    flat_out = np.empty(npix, dtype=np.int64)
    acc = np.empty((npix, C))
    cnt = np.empty(npix, dtype=np.int64)
    n = _project_kernel(
        dirs, obs.depth.ravel(), obs.instance_ids.ravel(), dist_lut, has_dist,
        obs.pose.x, obs.pose.y, camera.mount_height,
        m.origin[0], m.origin[1], m.origin[2], m.resolution, L, Wm, Hm,
        slot, flat_out, acc, cnt,
    )
    order = np.argsort(flat_out[:n], kind="stable")
    flat = flat_out[:n][order]
    counts = cnt[:n][order]
    sums = acc[:n][order]
    dists = np.zeros((n, C))
    nz = counts > 0
    dists[nz] = sums[nz] / counts[nz, None]
    idx3 = np.empty((n, 3), dtype=np.int64)
    idx3[:, 2] = flat % Hm
    rem = flat // Hm
    idx3[:, 1] = rem % Wm
    idx3[:, 0] = rem // Wm
    return VoxelObservation(
        indices=idx3, dists=dists, class_counts=counts, hit=np.ones(n, dtype=bool)
    )


@numba.njit(cache=True)
def _fuse_kernel(data, idx, dists, counts, lam, C):
    """EMA class update, max obstacle/explored update, per touched voxel.

    Direct write on the first class observation of a voxel (no prior class
    mass), EMA afterwards; that keeps every written distribution normalized.
    Returns (max |sum - 1| over updated class rows, newly explored voxels)
    as cheap invariant probes.
    """
    worst = 0.0
    newly = 0
    for i in range(idx.shape[0]):
        l, w, h = idx[i, 0], idx[i, 1], idx[i, 2]
        if data[1, l, w, h] == 0.0:
            newly += 1
        data[1, l, w, h] = max(data[1, l, w, h], 1.0)
        data[0, l, w, h] = max(data[0, l, w, h], 1.0)
        if counts[i] > 0:
            mass = 0.0
            for c in range(C):
                mass += data[2 + c, l, w, h]
            total = 0.0
            if mass > 0.0:
                for c in range(C):
                    v = (1.0 - lam) * data[2 + c, l, w, h] + lam * dists[i, c]
                    data[2 + c, l, w, h] = v
                    total += v
            else:
                for c in range(C):
                    data[2 + c, l, w, h] = dists[i, c]
                    total += dists[i, c]
            dev = abs(total - 1.0)
            if dev > worst:
                worst = dev
    return worst, newly


def fuse(
    m: SemanticDistributionMap,
    vobs: VoxelObservation,
    lam: float = 0.3,
    in_place: bool = False,
) -> tuple[SemanticDistributionMap, float, int]:
    """Blend one projected frame into the map.

    Returns (map, max class-sum deviation over touched voxels, count of
    voxels explored for the first time).  `lam` is the weight given to the
    incoming view; the stored distribution keeps 1 - lam.  0 <= lam <= 1 or
    ValueError.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"ema lambda must be in [0, 1], got {lam}")
    target = m if in_place else m.copy()
    if vobs.n_voxels == 0:
        return target, 0.0, 0
    worst, newly = _fuse_kernel(
        target.data, vobs.indices, vobs.dists, vobs.class_counts, float(lam), target.num_classes
    )
    return target, float(worst), int(newly)


# ---------------------------------------------------------------------------
# invariant checks (cheap enough to leave on during full runs)


def check_map_invariants(m: SemanticDistributionMap, tol: float = 1e-6) -> None:
    """Raises AssertionError on any structural violation."""
    K = m.data.shape[0]
    assert K == m.num_classes + 2, "channel count mismatch"
    assert np.all(np.isfinite(m.data)), "non-finite map values"
    assert m.data.min() >= -tol, "negative channel value"
    assert m.obstacle.max() <= 1.0 + tol and m.explored.max() <= 1.0 + tol
    sums = m.class_channels.sum(axis=0)
    touched = sums > tol
    if touched.any():
        dev = np.abs(sums[touched] - 1.0).max()
        assert dev <= tol, f"class distribution sums off by {dev:.3e}"
        assert np.all(m.explored[touched] > 0), "class mass in unexplored voxel"


# ---------------------------------------------------------------------------
# serialization: small header, zlib-compressed float32 channel-major body


def save_map(m: SemanticDistributionMap, path: str | Path) -> None:
    K, L, W, H = m.data.shape
    header = struct.pack(
        "<4sIIIIIdddd", MAP_MAGIC, 1, K, L, W, H, m.resolution, *(float(v) for v in m.origin)
    )
    body = zlib.compress(m.data.astype(np.float32).tobytes(), level=6)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<Q", len(body)))
        fh.write(body)


def load_map(path: str | Path) -> SemanticDistributionMap:
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sIIIIIdddd"))
        magic, version, K, L, W, H, res, ox, oy, oz = struct.unpack("<4sIIIIIdddd", head)
        if magic != MAP_MAGIC:
            raise ValueError(f"not a semantic map file (magic {magic!r})")
        if version != 1:
            raise ValueError(f"unsupported map version {version}")
        (blen,) = struct.unpack("<Q", fh.read(8))
        body = zlib.decompress(fh.read(blen))
    data = np.frombuffer(body, dtype=np.float32).reshape(K, L, W, H).astype(np.float64)
    return SemanticDistributionMap(data, res, np.array([ox, oy, oz]))
