"""Episode environment: ties scene, perceiver, map, rewards, and planner
into the decision-level interface the policy trainer consumes.

One `decide(goal)` call walks up to `goal_interval` low-level steps toward
the chosen coarse cell: fast-marching field to the goal, steering by
descent, a frame processed after every action (render, predict, project,
reward against the pre-update map, fuse).  Arriving early turns the agent
in place so it keeps harvesting views; a stalled leg ends the window early
and hands control back to the policy.

Reward variants:
  sdd_sdu  - disagreement + uncertainty (the method under study)
  label2d  - fraction of top-down 2D cells whose stored argmax label flips,
             the flat-map proxy that conflates stacked objects
  none     - zero reward (baseline collection)
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import planner as pl
from . import reward as rw
from . import semap as sm
from .perceiver import ObjectPrediction, PerceiverParams, predict
from .policy import PolicyNetConfig, PPOConfig
from .scene import Action, AgentConfig, CameraModel, SceneSpec, default_start_pose, render
from .scene import step as scene_step

REWARD_KINDS = ("sdd_sdu", "label2d", "none")


def goal_index_to_cell(goal_idx: int, net_cfg: PolicyNetConfig, block: int) -> tuple[int, int]:
    """Coarse goal index -> center cell of that map block."""
    gl, gw = divmod(int(goal_idx), net_cfg.grid_size)
    return gl * block + block // 2, gw * block + block // 2


@numba.njit(cache=True)
def _pool_planes(data, G, b, out):
    """Coarse policy planes in one pass over the map.

    out[0] obstacle band (z in [1,4)) block max; out[1] column-explored
    block mean; out[2] per-voxel max class prob, column+block max; out[3]
    per-voxel runner-up prob, column+block max.
    """
    K, L, W, H = data.shape
    C = K - 2
    m1 = np.empty(H)
    m2 = np.empty(H)
    for gl in range(G):
        for gw in range(G):
            band = 0.0
            expl = 0.0
            mx = 0.0
            m2x = 0.0
            for l in range(gl * b, gl * b + b):
                for w in range(gw * b, gw * b + b):
                    for h in range(1, 4):
                        v = data[0, l, w, h]
                        if v > band:
                            band = v
                    col = 0.0
                    for h in range(H):
                        e = data[1, l, w, h]
                        if e > col:
                            col = e
                        m1[h] = -np.inf
                        m2[h] = -np.inf
                    expl += col
                    for c in range(C):
                        for h in range(H):
                            v = data[2 + c, l, w, h]
                            if v > m1[h]:
                                m2[h] = m1[h]
                                m1[h] = v
                            elif v > m2[h]:
                                m2[h] = v
                    for h in range(H):
                        if m1[h] > mx:
                            mx = m1[h]
                        if m2[h] > m2x:
                            m2x = m2[h]
            out[0, gl, gw] = band
            out[1, gl, gw] = expl / (b * b)
            out[2, gl, gw] = mx
            out[3, gl, gw] = m2x


@dataclass
class StepRecord:
    """Per-step log kept during collection runs."""

    step: int
    pose_x: float
    pose_y: float
    pose_theta: float
    predictions: list[ObjectPrediction]
    features: dict[int, np.ndarray]
    true_classes: dict[int, int]
    breakdown: rw.RewardBreakdown


@dataclass
class InvariantReport:
    worst_class_sum_dev: float = 0.0
    explored_monotone: bool = True
    channel_count_ok: bool = True
    frames: int = 0

    def ok(self, tol: float = 1e-6) -> bool:
        return self.worst_class_sum_dev <= tol and self.explored_monotone and self.channel_count_ok


class ExplorationEnv:
    """Decision-level environment for one episode in one scene."""

    def __init__(
        self,
        scene: SceneSpec,
        perceiver: PerceiverParams,
        seed: int = 0,
        reward_kind: str = "sdd_sdu",
        record: bool = False,
        map_cfg: sm.MapConfig | None = None,
        reward_cfg: rw.RewardConfig | None = None,
        planner_cfg: pl.PlannerConfig | None = None,
        agent: AgentConfig | None = None,
        camera: CameraModel | None = None,
        net_cfg: PolicyNetConfig | None = None,
        ppo_cfg: PPOConfig | None = None,
    ):
        if reward_kind not in REWARD_KINDS:
            raise ValueError(f"reward_kind must be one of {REWARD_KINDS}")
        self.scene = scene
        self.perceiver = perceiver
        self.seed = int(seed)
        self.reward_kind = reward_kind
        self.record = record
        self.map_cfg = map_cfg or sm.MapConfig()
        self.reward_cfg = reward_cfg or rw.RewardConfig()
        self.planner_cfg = planner_cfg or pl.PlannerConfig()
        self.agent = agent or AgentConfig()
        self.camera = camera or CameraModel()
        self.net_cfg = net_cfg or PolicyNetConfig()
        self.ppo_cfg = ppo_cfg or PPOConfig()
        if self.map_cfg.length % self.net_cfg.grid_size != 0:
            raise ValueError("map length must divide evenly into the policy grid")
        self.block = self.map_cfg.length // self.net_cfg.grid_size
        self.map: sm.SemanticDistributionMap | None = None
        self.records: list[StepRecord] = []
        self.invariants = InvariantReport()

    # -- lifecycle ----------------------------------------------------------

    def reset(self) -> np.ndarray:
        self.pose = default_start_pose(self.scene, self.agent)
        self.map = sm.map_centered_on(self.pose, self.scene.num_classes, self.map_cfg)
        self.invariants = InvariantReport(
            channel_count_ok=self.map.data.shape[0] == self.scene.num_classes + 2
        )
        self._explored_count = 0
        self.steps = 0
        self.episode_reward = 0.0
        self.records = []
        self._label2d = np.zeros((self.scene.num_classes, self.map_cfg.length, self.map_cfg.width))
        # the agent looks around before its first decision; this frame does
        # not count against the step budget
        self._process_frame()
        return self.policy_input()

    @property
    def done(self) -> bool:
        return self.steps >= self.ppo_cfg.episode_max_steps

    # -- decision interface -------------------------------------------------

    def decide(self, goal_idx: int) -> tuple[np.ndarray | None, float, bool, dict]:
        return self.decide_cell(goal_index_to_cell(goal_idx, self.net_cfg, self.block))

    def decide_cell(self, cell: tuple[int, int]) -> tuple[np.ndarray | None, float, bool, dict]:
        """Pursue a map cell for one local window.  Returns
        (next_input | None, window_reward, done, info)."""
        if self.map is None:
            raise RuntimeError("reset() must run before decide()")
        field = pl.plan_field(self.map, cell, self.pose, self.agent, self.planner_cfg)
        controller = pl.LocalController(field, self.map, self.agent, self.planner_cfg)

        window_reward = 0.0
        rd_sum = 0.0
        ru_sum = 0.0
        consumed = 0
        for _ in range(self.ppo_cfg.goal_interval):
            if self.done:
                break
            decision = controller.decide(self.pose)
            if decision.arrived:
                action = Action.TURN_LEFT  # scan in place until the window ends
            elif decision.stuck:
                if consumed == 0:
                    # a window must consume at least one step so the episode
                    # always terminates; scan once before handing back
                    action = Action.TURN_LEFT
                else:
                    break
            else:
                action = decision.action
            self.pose, _ = scene_step(self.scene, self.pose, action, self.agent)
            # count the step before recording so frame ids stay unique: the
            # reset frame owns id 0, action frames own 1..episode_max_steps
            self.steps += 1
            breakdown = self._process_frame()
            consumed += 1
            window_reward += breakdown.combined
            rd_sum += breakdown.disagreement
            ru_sum += breakdown.uncertainty
            if decision.stuck:
                break

        self.episode_reward += window_reward
        done = self.done
        # runtime invariant gate: a finished episode with a corrupted map
        # must never pass silently, training or collection alike
        if done and not self.invariants.ok():
            raise RuntimeError(
                f"map invariants violated ({self.scene.scene_id}, seed {self.seed}): "
                f"{self.invariants}"
            )
        info = {
            "steps_consumed": consumed,
            "r_d_sum": rd_sum,
            "r_u_sum": ru_sum,
            "goal_cell": field.goal,
        }
        return (None if done else self.policy_input()), window_reward, done, info

    # -- internals ----------------------------------------------------------

    def _process_frame(self) -> rw.RewardBreakdown:
        obs = render(self.scene, self.pose, self.camera)
        preds, _ = predict(self.perceiver, obs, with_pixels=False)
        vobs = sm.project_view(obs, preds, self.map, self.camera)

        if self.reward_kind == "sdd_sdu":
            breakdown = rw.step_reward(vobs, self.map, preds, self.reward_cfg)
        elif self.reward_kind == "label2d":
            flip = self._label2d_reward(vobs)
            breakdown = rw.RewardBreakdown(
                disagreement=flip,
                uncertainty=0.0,
                combined=self.reward_cfg.reward_coeff * flip,
                voxels_compared=0,
            )
        else:
            breakdown = rw.RewardBreakdown(0.0, 0.0, 0.0, 0)

        _, dev, newly = sm.fuse(self.map, vobs, self.map_cfg.ema_lambda, in_place=True)
        inv = self.invariants
        inv.frames += 1
        if dev > inv.worst_class_sum_dev:
            inv.worst_class_sum_dev = dev
        # incremental count, cross-checked against a full recount every 100
        # frames; a mismatch means some fuse shrank the explored set
        self._explored_count += newly
        if inv.frames % 100 == 0:
            if int((self.map.explored > 0).sum()) != self._explored_count:
                inv.explored_monotone = False

        if self.record:
            self.records.append(
                StepRecord(
                    step=self.steps,
                    pose_x=self.pose.x,
                    pose_y=self.pose.y,
                    pose_theta=self.pose.theta,
                    predictions=preds,
                    features=obs.object_features,
                    true_classes=dict(obs.object_classes),
                    breakdown=breakdown,
                )
            )
        return breakdown

    def _label2d_reward(self, vobs: sm.VoxelObservation) -> float:
        """Flat-map label inconsistency: fraction of observed 2D cells whose
        stored argmax class differs from this frame's argmax.  Column
        pooling is what conflates a stacked object with its support."""
        has = vobs.class_counts > 0
        if not has.any():
            return 0.0
        idx = vobs.indices[has]
        key = idx[:, 0] * self.map_cfg.width + idx[:, 1]
        uniq, inverse = np.unique(key, return_inverse=True)
        C = self.scene.num_classes
        weights = vobs.class_counts[has].astype(float)
        sums = np.zeros((len(uniq), C))
        for c in range(C):
            sums[:, c] = np.bincount(inverse, weights=weights * vobs.dists[has][:, c], minlength=len(uniq))
        cells_l = uniq // self.map_cfg.width
        cells_w = uniq % self.map_cfg.width
        obs2d = sums / sums.sum(axis=1, keepdims=True)

        prev = self._label2d[:, cells_l, cells_w].T
        prior = prev.sum(axis=1) > 0
        flips = 0.0
        if prior.any():
            flips = float(
                np.mean(prev[prior].argmax(axis=1) != obs2d[prior].argmax(axis=1))
            )
        lam = self.map_cfg.ema_lambda
        merged = np.where(
            prior[:, None], (1.0 - lam) * prev + lam * obs2d, obs2d
        )
        self._label2d[:, cells_l, cells_w] = merged.T
        return flips

    def policy_input(self) -> np.ndarray:
        """Five coarse planes in [0, 1]: obstacle band, explored fraction,
        per-column max class probability, per-column runner-up probability,
        agent one-hot."""
        m = self.map
        G = self.net_cfg.grid_size
        out = np.zeros((5, G, G))
        _pool_planes(m.data, G, self.block, out)
        cl, cw = pl.pose_cell(self.pose, m)
        b = self.block
        out[4, min(max(cl // b, 0), G - 1), min(max(cw // b, 0), G - 1)] = 1.0
        return out

    # -- collection-side helpers -------------------------------------------

    def detection_rows(self) -> list[tuple[int, float, np.ndarray, int]]:
        """(step, confidence-ranked raw data) for hardness evaluation:
        one row per (frame, object): (step, max prob, distribution, true class)."""
        rows = []
        for rec in self.records:
            for pred in rec.predictions:
                rows.append(
                    (rec.step, float(pred.distribution.max()), pred.distribution,
                     rec.true_classes[pred.object_id])
                )
        return rows
