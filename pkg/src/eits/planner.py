"""Continuous-distance navigation: fast marching field plus a local steerer.

The distance field solves the eikonal equation on the 2D navigation grid
with an 8-neighbor triangulated upwind stencil.  Each quadrant of the
neighborhood is split into two triangles (cell, axis neighbor, diagonal
neighbor); the first-order update on such a triangle is

    t = a + sqrt(1 - (a - b)^2)    valid while 0 <= a - b <= 1/sqrt(2)

with a the axis value and b the diagonal value, falling back to edge
relaxations a + 1 and b + sqrt(2) when the characteristic leaves the
triangle.  A plain 4-stencil marcher overestimates diagonal distances past
the 8-connected graph metric; this one stays between the true Euclidean
distance and 8-connected Dijkstra, which is what the navigation contract
checks.  Diagonal propagation is gated on at least one adjacent orthogonal
cell being free, and the Dijkstra reference oracle applies the same rule.

Steering descends the field by bilinear interpolation of the four
surrounding cell values, turning in 30-degree quanta toward the local
downhill direction.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .scene import Action, AgentConfig, AgentPose
from .semap import SemanticDistributionMap

SQRT2 = math.sqrt(2.0)
INV_SQRT2 = 1.0 / SQRT2


@dataclass(frozen=True)
class PlannerConfig:
    obstacle_threshold: float = 0.5
    dilate_cells: int = 1
    stuck_patience: int = 15  # local steps without field progress
    min_progress: float = 1e-9
    min_component_cells: int = 25  # smaller agent regions retry undilated


@dataclass
class DistanceField:
    dist: np.ndarray  # (L, W) float64, +inf where blocked or unreachable
    goal: tuple[int, int]
    blocked: np.ndarray  # the mask the solve used


# ---------------------------------------------------------------------------
# fast marching


@numba.njit(cache=True)
def _fmm_kernel(blocked, goal_l, goal_w):
    L, W = blocked.shape
    N = L * W
    INF = np.inf
    dist = np.full(N, INF)
    state = np.zeros(N, dtype=np.uint8)  # 0 far, 1 narrow, 2 accepted

    # binary min-heap over (key, cell); lazy deletion via stale-key check.
    # Each cell is pushed at most once per accepted neighbor, so 9N covers it.
    cap = 9 * N
    hk = np.empty(cap)
    hv = np.empty(cap, dtype=np.int64)
    hn = 0

    def push(hk, hv, hn, key, val):
        i = hn
        hk[i] = key
        hv[i] = val
        while i > 0:
            p = (i - 1) >> 1
            if hk[p] <= hk[i]:
                break
            hk[p], hk[i] = hk[i], hk[p]
            hv[p], hv[i] = hv[i], hv[p]
            i = p
        return hn + 1

    g = goal_l * W + goal_w
    dist[g] = 0.0
    state[g] = 1
    hn = push(hk, hv, hn, 0.0, g)

    axis_dl = np.array([1, -1, 0, 0], dtype=np.int64)
    axis_dw = np.array([0, 0, 1, -1], dtype=np.int64)
    diag_dl = np.array([1, 1, -1, -1], dtype=np.int64)
    diag_dw = np.array([1, -1, 1, -1], dtype=np.int64)
    # axis indices adjacent to each diagonal (shared quadrant)
    diag_ax_a = np.array([0, 0, 1, 1], dtype=np.int64)
    diag_ax_b = np.array([2, 3, 2, 3], dtype=np.int64)

    av = np.empty(4)
    dv = np.empty(4)

    while hn > 0:
        key = hk[0]
        cell = hv[0]
        hn -= 1
        hk[0] = hk[hn]
        hv[0] = hv[hn]
        i = 0
        while True:
            lc = 2 * i + 1
            rc = lc + 1
            sm = i
            if lc < hn and hk[lc] < hk[sm]:
                sm = lc
            if rc < hn and hk[rc] < hk[sm]:
                sm = rc
            if sm == i:
                break
            hk[sm], hk[i] = hk[i], hk[sm]
            hv[sm], hv[i] = hv[i], hv[sm]
            i = sm
        if state[cell] == 2 or key > dist[cell] + 1e-12:
            continue
        state[cell] = 2

        cl = cell // W
        cw = cell % W
        # relax every free non-accepted neighbor of the accepted cell
        for nb in range(8):
            if nb < 4:
                nl = cl + axis_dl[nb]
                nw = cw + axis_dw[nb]
            else:
                nl = cl + diag_dl[nb - 4]
                nw = cw + diag_dw[nb - 4]
            if nl < 0 or nw < 0 or nl >= L or nw >= W:
                continue
            if blocked[nl, nw]:
                continue
            ncell = nl * W + nw
            if state[ncell] == 2:
                continue

            # gather accepted neighbor values around (nl, nw)
            for k in range(4):
                al = nl + axis_dl[k]
                aw = nw + axis_dw[k]
                if 0 <= al < L and 0 <= aw < W and not blocked[al, aw] and state[al * W + aw] == 2:
                    av[k] = dist[al * W + aw]
                else:
                    av[k] = INF
            for k in range(4):
                dl = nl + diag_dl[k]
                dw = nw + diag_dw[k]
                if 0 <= dl < L and 0 <= dw < W and not blocked[dl, dw] and state[dl * W + dw] == 2:
                    # corner rule: the diagonal only counts when at least one
                    # of the two orthogonal cells between is free
                    free_a = 0 <= nl + diag_dl[k] < L and not blocked[nl + diag_dl[k], nw]
                    free_b = 0 <= nw + diag_dw[k] < W and not blocked[nl, nw + diag_dw[k]]
                    if free_a or free_b:
                        dv[k] = dist[dl * W + dw]
                    else:
                        dv[k] = INF
                else:
                    dv[k] = INF

            best = INF
            for k in range(4):
                if av[k] + 1.0 < best:
                    best = av[k] + 1.0
            for k in range(4):
                if dv[k] == INF:
                    continue
                if dv[k] + SQRT2 < best:
                    best = dv[k] + SQRT2
                b = dv[k]
                for a in (av[diag_ax_a[k]], av[diag_ax_b[k]]):
                    if a == INF:
                        continue
                    d = a - b
                    if 0.0 <= d <= INV_SQRT2:
                        t = a + math.sqrt(1.0 - d * d)
                        if t < best:
                            best = t

            if best < dist[ncell] - 1e-12:
                dist[ncell] = best
                state[ncell] = 1
                if hn < cap:
                    hn = push(hk, hv, hn, best, ncell)

    return dist.reshape(L, W)


def fmm_field(blocked: np.ndarray, goal: tuple[int, int]) -> DistanceField:
    """Distance-to-goal field in cell units.  Goal inside an obstacle is an
    error; unreachable free cells stay at +inf."""
    blocked = np.ascontiguousarray(blocked, dtype=bool)
    gl, gw = int(goal[0]), int(goal[1])
    L, W = blocked.shape
    if not (0 <= gl < L and 0 <= gw < W):
        raise ValueError(f"goal {goal} outside the {L}x{W} grid")
    if blocked[gl, gw]:
        raise ValueError(f"goal {goal} is inside an obstacle")
    dist = _fmm_kernel(blocked, gl, gw)
    return DistanceField(dist=dist, goal=(gl, gw), blocked=blocked)


def dijkstra8(blocked: np.ndarray, goal: tuple[int, int]) -> np.ndarray:
    """8-connected shortest paths with the same corner rule; the reference
    the marcher is checked against."""
    blocked = np.asarray(blocked, dtype=bool)
    L, W = blocked.shape
    gl, gw = int(goal[0]), int(goal[1])
    if blocked[gl, gw]:
        raise ValueError(f"goal {goal} is inside an obstacle")
    dist = np.full((L, W), np.inf)
    dist[gl, gw] = 0.0
    heap = [(0.0, gl, gw)]
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]
    while heap:
        d, l, w = heapq.heappop(heap)
        if d > dist[l, w] + 1e-12:
            continue
        for dl, dw, cost in moves:
            nl, nw = l + dl, w + dw
            if not (0 <= nl < L and 0 <= nw < W) or blocked[nl, nw]:
                continue
            if dl != 0 and dw != 0:
                if blocked[l + dl, w] and blocked[l, w + dw]:
                    continue
            nd = d + cost
            if nd < dist[nl, nw] - 1e-12:
                dist[nl, nw] = nd
                heapq.heappush(heap, (nd, nl, nw))
    return dist


# ---------------------------------------------------------------------------
# navigation mask from the semantic map


def nav_blocked(
    m: SemanticDistributionMap,
    agent: AgentConfig | None = None,
    cfg: PlannerConfig | None = None,
) -> np.ndarray:
    """2D blocked mask: any voxel in the agent's body band with obstacle
    occupancy past threshold blocks the column; inflated by dilate_cells so
    the point planner respects the agent's radius.  Unexplored space counts
    as free."""
    agent = agent or AgentConfig()
    cfg = cfg or PlannerConfig()
    h_lo = 1
    h_hi = max(1, round(agent.body_height / m.resolution) - 1)
    band = m.obstacle[:, :, h_lo : h_hi + 1]
    blocked = (band >= cfg.obstacle_threshold).any(axis=2)
    if cfg.dilate_cells > 0:
        blocked = ndimage.binary_dilation(
            blocked, structure=np.ones((3, 3), dtype=bool), iterations=cfg.dilate_cells
        )
    return blocked


def pose_cell(pose: AgentPose, m: SemanticDistributionMap) -> tuple[int, int]:
    l = int(math.floor((pose.x - m.origin[0]) / m.resolution))
    w = int(math.floor((pose.y - m.origin[1]) / m.resolution))
    return l, w


def nearest_free_cell(
    blocked: np.ndarray, cell: tuple[int, int], max_radius: int = 12
) -> tuple[int, int] | None:
    """Closest free cell by expanding square rings; None if the search ring
    budget runs out."""
    L, W = blocked.shape
    cl = min(max(int(cell[0]), 0), L - 1)
    cw = min(max(int(cell[1]), 0), W - 1)
    if not blocked[cl, cw]:
        return cl, cw
    for r in range(1, max_radius + 1):
        best = None
        best_d = np.inf
        for dl in range(-r, r + 1):
            for dw in (-r, r) if abs(dl) < r else range(-r, r + 1):
                l, w = cl + dl, cw + dw
                if 0 <= l < L and 0 <= w < W and not blocked[l, w]:
                    d = dl * dl + dw * dw
                    if d < best_d:
                        best_d = d
                        best = (l, w)
        if best is not None:
            return best
    return None


def plan_field(
    m: SemanticDistributionMap,
    requested: tuple[int, int],
    pose: AgentPose,
    agent: AgentConfig | None = None,
    cfg: PlannerConfig | None = None,
) -> DistanceField:
    """Distance field toward the requested cell, guaranteed solvable from
    the agent's position.

    The goal snaps to the nearest free cell of the agent's own connected
    region, so a goal behind a wall redirects to the closest approachable
    cell.  Inflation can seal the agent into a sliver of free space as
    surfaces accumulate; when the agent's region shrinks below
    min_component_cells the mask is rebuilt without dilation (the scene's
    own collision check still guards actual movement).  Degenerate masks
    fall back to a goal at the agent's cell, which the controller reports
    as an immediate arrival.
    """
    agent = agent or AgentConfig()
    cfg = cfg or PlannerConfig()
    blocked = _component_mask(m, pose, agent, cfg, cfg.dilate_cells)
    if blocked is None and cfg.dilate_cells > 0:
        blocked = _component_mask(m, pose, agent, cfg, 0)
    if blocked is None:
        blocked = np.zeros((m.dims[0], m.dims[1]), dtype=bool)
        cell = pose_cell(pose, m)
        goal = (min(max(cell[0], 0), m.dims[0] - 1), min(max(cell[1], 0), m.dims[1] - 1))
        return fmm_field(blocked, goal)
    goal = nearest_free_cell(blocked, requested, max_radius=max(m.dims[0], m.dims[1]))
    if goal is None:  # cannot happen: the agent's own cell is free
        goal = pose_cell(pose, m)
    return fmm_field(blocked, goal)


def _component_mask(m, pose, agent, cfg, dilate) -> np.ndarray | None:
    """Blocked mask with everything outside the agent's free component also
    blocked; None when that component is too small to be worth planning in."""
    eff = PlannerConfig(
        obstacle_threshold=cfg.obstacle_threshold,
        dilate_cells=dilate,
        stuck_patience=cfg.stuck_patience,
        min_progress=cfg.min_progress,
        min_component_cells=cfg.min_component_cells,
    )
    blocked = nav_blocked(m, agent, eff)
    cl, cw = pose_cell(pose, m)
    L, W = blocked.shape
    if not (0 <= cl < L and 0 <= cw < W):
        return None
    blocked[cl, cw] = False  # the agent demonstrably stands here
    labels, _ = ndimage.label(~blocked, structure=np.ones((3, 3), dtype=int))
    comp = labels == labels[cl, cw]
    if comp.sum() < cfg.min_component_cells:
        return None
    return blocked | ~comp


# ---------------------------------------------------------------------------
# local steering


@dataclass(frozen=True)
class SteerDecision:
    action: Action | None  # None only when arrived
    arrived: bool
    stuck: bool
    field_value: float


def field_value_at(field: DistanceField, pose: AgentPose, m: SemanticDistributionMap) -> float:
    """Bilinear field value at a continuous pose; falls back to the cell
    value when a neighbor of the interpolation square is blocked."""
    u = (pose.x - m.origin[0]) / m.resolution - 0.5
    v = (pose.y - m.origin[1]) / m.resolution - 0.5
    l0, w0 = int(math.floor(u)), int(math.floor(v))
    fl, fw = u - l0, v - w0
    L, W = field.dist.shape
    vals = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            l, w = min(max(l0 + i, 0), L - 1), min(max(w0 + j, 0), W - 1)
            vals[i, j] = field.dist[l, w]
    if not np.all(np.isfinite(vals)):
        cl, cw = pose_cell(pose, m)
        cl, cw = min(max(cl, 0), L - 1), min(max(cw, 0), W - 1)
        return float(field.dist[cl, cw])
    return float(
        vals[0, 0] * (1 - fl) * (1 - fw)
        + vals[1, 0] * fl * (1 - fw)
        + vals[0, 1] * (1 - fl) * fw
        + vals[1, 1] * fl * fw
    )


def descent_direction(
    field: DistanceField, pose: AgentPose, m: SemanticDistributionMap
) -> tuple[float, float] | None:
    """Unit downhill direction of the field at the pose, or None when no
    finite gradient is available (then steer to the best finite neighbor)."""
    u = (pose.x - m.origin[0]) / m.resolution - 0.5
    v = (pose.y - m.origin[1]) / m.resolution - 0.5
    l0, w0 = int(math.floor(u)), int(math.floor(v))
    fl, fw = u - l0, v - w0
    L, W = field.dist.shape
    if 0 <= l0 and l0 + 1 < L and 0 <= w0 and w0 + 1 < W:
        q = field.dist[l0 : l0 + 2, w0 : w0 + 2]
        if np.all(np.isfinite(q)):
            gu = (q[1, 0] - q[0, 0]) * (1 - fw) + (q[1, 1] - q[0, 1]) * fw
            gv = (q[0, 1] - q[0, 0]) * (1 - fl) + (q[1, 1] - q[1, 0]) * fl
            norm = math.hypot(gu, gv)
            if norm > 1e-12:
                return -gu / norm, -gv / norm
    # fallback: aim at the lowest finite 8-neighbor cell center
    cl, cw = pose_cell(pose, m)
    best = None
    best_val = np.inf
    for dl in (-1, 0, 1):
        for dw in (-1, 0, 1):
            l, w = cl + dl, cw + dw
            if 0 <= l < L and 0 <= w < W and np.isfinite(field.dist[l, w]):
                if field.dist[l, w] < best_val:
                    best_val = field.dist[l, w]
                    best = (l, w)
    if best is None or best == (cl, cw):
        return None
    c = m.voxel_center(np.array([best[0], best[1], 0]))
    dx, dy = c[0] - pose.x, c[1] - pose.y
    norm = math.hypot(dx, dy)
    if norm < 1e-12:
        return None
    return dx / norm, dy / norm


def steer(
    field: DistanceField,
    pose: AgentPose,
    m: SemanticDistributionMap,
    agent: AgentConfig | None = None,
) -> tuple[Action | None, bool]:
    """One steering decision: (action, arrived).  At the goal cell the
    forward action is suppressed and arrival reported.  Heading errors
    within half a turn quantum go forward; larger errors turn toward the
    goal, ties breaking left."""
    agent = agent or AgentConfig()
    if pose_cell(pose, m) == field.goal:
        return None, True
    d = descent_direction(field, pose, m)
    if d is None:
        return None, False  # nowhere to go; caller counts it as no progress
    want = math.atan2(d[1], d[0])
    err = _wrap(want - pose.theta)
    half = math.radians(agent.turn_angle_deg) / 2.0
    if abs(err) <= half + 1e-12:
        return Action.FORWARD, False
    return (Action.TURN_LEFT if err > 0 else Action.TURN_RIGHT), False


def _wrap(theta: float) -> float:
    out = math.fmod(theta + math.pi, 2.0 * math.pi)
    if out <= 0.0:
        out += 2.0 * math.pi
    return out - math.pi


class LocalController:
    """Steering with stall detection.

    Tracks the best field value reached; stuck_patience consecutive
    decisions without improvement (collisions included) flag the leg as
    stuck so the caller can pick a new goal early.
    """

    def __init__(self, field: DistanceField, m: SemanticDistributionMap,
                 agent: AgentConfig | None = None, cfg: PlannerConfig | None = None):
        self.field = field
        self.map = m
        self.agent = agent or AgentConfig()
        self.cfg = cfg or PlannerConfig()
        self.best = np.inf
        self.no_progress = 0

    def decide(self, pose: AgentPose) -> SteerDecision:
        value = field_value_at(self.field, pose, self.map)
        if value < self.best - self.cfg.min_progress:
            self.best = value
            self.no_progress = 0
        else:
            self.no_progress += 1
        action, arrived = steer(self.field, pose, self.map, self.agent)
        stuck = (not arrived) and (
            self.no_progress >= self.cfg.stuck_patience or (action is None)
        )
        return SteerDecision(action=action, arrived=arrived, stuck=stuck, field_value=value)
