"""Full pipeline orchestration.

Two stages per policy leg: (1) obtain a goal-choosing policy — trained by
PPO for the disagreement+uncertainty method and the label-inconsistency
proxy, analytic for the random and coverage baselines — then (2) collect
trajectories with it, select hard samples, label them with the simulator
oracle, and fine-tune the perceiver.  Every leg is scored by average
precision on frames rendered in held-out test scenes; a scene-id partition
check keeps test data out of fine-tuning.

Progressive mode (n_progressive > 1) splits the same policy-step and image
budgets across n rounds, re-training the goal policy against the latest
fine-tuned perceiver before each collection round, so n = 1 and n = 3 are
compute-matched and differ only in the re-training schedule.

Everything is keyed off one master seed; reports are plain CSV with stable
formatting so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import planner as pl
from . import semap as sm
from .episode import ExplorationEnv, goal_index_to_cell
from .perceiver import (
    Detection,
    EvalReport,
    LabeledSample,
    PerceiverConfig,
    PerceiverParams,
    average_precision,
    evaluate,
    finetune,
    predict_features,
    pretrain,
    save_params,
)
from .policy import (
    PolicyNetConfig,
    PolicyParams,
    PPOConfig,
    TrainResult,
    sample_goal,
    save_checkpoint,
    train_exploration,
)
from .reward import RewardConfig
from .scene import (
    AgentConfig,
    AgentPose,
    CameraModel,
    Observation,
    SceneGenConfig,
    SceneSpec,
    generate_scene,
    render,
)
from .selector import (
    ManifestEntry,
    SelectorConfig,
    oracle_label,
    select_hard_samples,
    selected_steps,
    write_manifest,
)

POLICY_KINDS = ("random", "coverage", "label_inconsistency", "eits")

# seed-stream tags; one per independent random decision in the pipeline
_TAG_TRAIN_SCENE = 0x7A51
_TAG_TEST_SCENE = 0x7E57
_TAG_PRETRAIN = 0x9E7
_TAG_POLICY = 0x90110
_TAG_COLLECT = 0xC011
_TAG_EPISODE = 0xE915
_TAG_FINETUNE = 0xF17
_TAG_EVAL = 0xE7A1
_TAG_EVAL_VIEW = 0xE7A2


def derive_seed(*key: int) -> int:
    """Well-mixed 63-bit seed from a tuple key; stable across runs."""
    ss = np.random.SeedSequence(tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class ExperimentConfig:
    train_scenes: int = 20
    test_scenes: int = 5
    episodes_per_scene: int = 6
    policies: tuple[str, ...] = ("random", "coverage", "label_inconsistency", "eits")
    n_progressive: int = 1
    image_budget: int = 2000
    seed: int = 0
    eval_views_per_object: int = 3
    scene: SceneGenConfig = field(default_factory=SceneGenConfig)
    perceiver: PerceiverConfig = field(default_factory=PerceiverConfig)
    map: sm.MapConfig = field(default_factory=sm.MapConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    planner: pl.PlannerConfig = field(default_factory=pl.PlannerConfig)
    net: PolicyNetConfig = field(default_factory=PolicyNetConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    camera: CameraModel = field(default_factory=CameraModel)

    def validate(self) -> None:
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ValueError("need at least one train and one test scene")
        if self.n_progressive < 1:
            raise ValueError("n_progressive must be >= 1")
        if self.episodes_per_scene < self.n_progressive:
            raise ValueError("episodes_per_scene must cover every progressive round")
        if self.image_budget < 0:
            raise ValueError("image_budget must be nonnegative")
        bad = [p for p in self.policies if p not in POLICY_KINDS]
        if bad:
            raise ValueError(f"unknown policies {bad}; expected subset of {POLICY_KINDS}")
        if len(set(self.policies)) != len(self.policies):
            raise ValueError("duplicate policy legs")
        # cross-module consistency: one resolution, one reward scale, and a
        # map that tiles evenly into the policy's goal grid
        if self.map.resolution != self.scene.resolution:
            raise ValueError("map and scene resolution differ")
        if self.map.length % self.net.grid_size != 0:
            raise ValueError("map length must divide into the policy goal grid")
        if self.reward.reward_coeff != self.ppo.reward_coeff:
            raise ValueError("reward_coeff differs between reward and ppo configs")
        self.ppo.validate()


@dataclass
class LegResult:
    policy: str
    n_round: int
    params: PerceiverParams
    eval_report: EvalReport
    images_selected: int
    samples_labeled: int


@dataclass
class ExperimentReport:
    rows: list[dict]
    hardness_rows: list[dict]
    legs: dict[str, LegResult]
    pretrained: PerceiverParams
    out_dir: Path | None


# ---------------------------------------------------------------------------
# scene pools and evaluation frames


def build_scene_pools(cfg: ExperimentConfig) -> tuple[list[SceneSpec], list[SceneSpec]]:
    train = [
        generate_scene(derive_seed(cfg.seed, _TAG_TRAIN_SCENE, i), cfg.scene, f"train{i:03d}")
        for i in range(cfg.train_scenes)
    ]
    test = [
        generate_scene(derive_seed(cfg.seed, _TAG_TEST_SCENE, i), cfg.scene, f"test{i:03d}")
        for i in range(cfg.test_scenes)
    ]
    overlap = {s.scene_id for s in train} & {s.scene_id for s in test}
    if overlap:
        raise RuntimeError(f"scene id collision across pools: {sorted(overlap)}")
    return train, test


def make_eval_frames(
    scene: SceneSpec,
    views_per_object: int,
    agent: AgentConfig,
    camera: CameraModel,
) -> list[Observation]:
    """Deterministic vantage frames: for each object, poses on rings around
    it, facing it, from navigable cells; frames that fail to see their
    target are dropped."""
    frames = []
    free = scene.nav_free(agent)
    res = scene.resolution
    for obj in scene.objects:
        cx, cy = obj.center_world(res)[:2]
        kept = 0
        for k in range(views_per_object * 6):  # 6 candidate angles per wanted view
            ang = 2.0 * math.pi * k / (views_per_object * 6)
            spot = None
            for radius in (1.25, 1.75, 2.5):
                px = cx + radius * math.cos(ang)
                py = cy + radius * math.sin(ang)
                l, w = int(px // res), int(py // res)
                if 0 <= l < free.shape[0] and 0 <= w < free.shape[1] and free[l, w]:
                    spot = ((l + 0.5) * res, (w + 0.5) * res)  # cell center
                    break
            if spot is None:
                continue
            sx, sy = spot
            theta = math.atan2(cy - sy, cx - sx)
            obs = render(scene, AgentPose(sx, sy, theta), camera)
            if obj.object_id in obs.object_features:
                frames.append(obs)
                kept += 1
                if kept >= views_per_object:
                    break
    return frames


# ---------------------------------------------------------------------------
# baseline goal choosers


def baseline_policy(
    kind: str,
    m: sm.SemanticDistributionMap,
    rng: np.random.Generator,
    agent: AgentConfig | None = None,
    planner_cfg: pl.PlannerConfig | None = None,
    policy_params: PolicyParams | None = None,
    policy_input: np.ndarray | None = None,
    net_cfg: PolicyNetConfig | None = None,
    frontier_radius: int = 5,
) -> tuple[int, int]:
    """Long-term goal cell for one window, from the current map snapshot.

    random: uniform over currently navigable cells (uniform over the grid if
    nothing is known free yet).  coverage: frontier cell adjacent to
    unexplored space scoring the most unexplored cells within a Chebyshev
    radius, rng tie-break, uniform fallback once fully explored.
    label_inconsistency: sampled from its trained goal network.
    """
    agent = agent or AgentConfig()
    planner_cfg = planner_cfg or pl.PlannerConfig()
    L, W, _ = m.dims

    if kind == "label_inconsistency":
        if policy_params is None or policy_input is None:
            raise ValueError("label_inconsistency goals need policy params and input")
        net_cfg = net_cfg or PolicyNetConfig()
        goal, _, _ = sample_goal(policy_params, policy_input, rng)
        return goal_index_to_cell(goal, net_cfg, m.dims[0] // net_cfg.grid_size)

    blocked = pl.nav_blocked(m, agent, planner_cfg)
    free = ~blocked

    if kind == "random":
        idx = np.flatnonzero(free.ravel())
        if idx.size == 0:
            idx = np.arange(L * W)
        pick = int(idx[rng.integers(idx.size)])
        return divmod(pick, W)

    if kind == "coverage":
        explored = m.explored.max(axis=2) > 0.0
        unexplored = ~explored
        # frontier: known-free cell with an unexplored 4-neighbor
        nb_unexplored = np.zeros_like(unexplored)
        nb_unexplored[1:, :] |= unexplored[:-1, :]
        nb_unexplored[:-1, :] |= unexplored[1:, :]
        nb_unexplored[:, 1:] |= unexplored[:, :-1]
        nb_unexplored[:, :-1] |= unexplored[:, 1:]
        frontier = free & explored & nb_unexplored
        cells = np.argwhere(frontier)
        if cells.shape[0] == 0:
            idx = np.flatnonzero(free.ravel())
            if idx.size == 0:
                idx = np.arange(L * W)
            pick = int(idx[rng.integers(idx.size)])
            return divmod(pick, W)
        # newly-explorable area proxy: unexplored count in a window
        r = frontier_radius
        pad = np.pad(unexplored.astype(np.int64), r)
        cum = pad.cumsum(axis=0).cumsum(axis=1)
        cum = np.pad(cum, ((1, 0), (1, 0)))

        def window_sum(l: np.ndarray, w: np.ndarray) -> np.ndarray:
            l0, w0 = l, w  # already offset by pad
            l1, w1 = l + 2 * r + 1, w + 2 * r + 1
            return cum[l1, w1] - cum[l0, w1] - cum[l1, w0] + cum[l0, w0]

        scores = window_sum(cells[:, 0], cells[:, 1])
        best = np.flatnonzero(scores == scores.max())
        pick = cells[best[rng.integers(best.size)]]
        return int(pick[0]), int(pick[1])

    raise ValueError(f"unknown baseline kind {kind!r}")


# ---------------------------------------------------------------------------
# collection


@dataclass
class CollectedEpisode:
    scene_id: str
    episode_seed: int
    manifest: list[ManifestEntry]
    n_frames: int
    frozen_detections: list[Detection]
    trajectory_rows: list[dict]
    records: list  # raw StepRecords, for staged selection outside the pipeline
    final_map: sm.SemanticDistributionMap


def collect_episode(
    scene: SceneSpec,
    perceiver: PerceiverParams,
    cfg: ExperimentConfig,
    episode_seed: int,
    goal_source: str,
    policy_params: PolicyParams | None,
    rng: np.random.Generator,
    frozen_params: PerceiverParams | None = None,
) -> CollectedEpisode:
    """One recorded episode driven by the given goal source.

    `goal_source` is "policy" (sample from policy_params) or a
    baseline_policy kind.  Rewards are skipped during collection; only the
    records matter here.  `frozen_params` (default: the acting perceiver)
    re-scores every sighting for the trajectory-hardness table, so that
    table always reflects one fixed model regardless of fine-tuning state.
    """
    env = ExplorationEnv(
        scene,
        perceiver,
        seed=episode_seed,
        reward_kind="none",
        record=True,
        map_cfg=cfg.map,
        reward_cfg=cfg.reward,
        planner_cfg=cfg.planner,
        agent=cfg.agent,
        camera=cfg.camera,
        net_cfg=cfg.net,
        ppo_cfg=cfg.ppo,
    )
    x = env.reset()
    while not env.done:
        if goal_source == "policy":
            goal, _, _ = sample_goal(policy_params, x, rng)
            nx, _, _, _ = env.decide(goal)
        else:
            cell = baseline_policy(
                goal_source,
                env.map,
                rng,
                agent=cfg.agent,
                planner_cfg=cfg.planner,
                policy_params=policy_params,
                policy_input=x,
                net_cfg=cfg.net,
            )
            nx, _, _, _ = env.decide_cell(cell)
        if nx is not None:
            x = nx
    if not env.invariants.ok():
        raise RuntimeError(
            f"map invariants violated in {scene.scene_id} seed {episode_seed}: {env.invariants}"
        )

    manifest = select_hard_samples(env.records, scene.scene_id, cfg.selector)
    frozen = frozen_params if frozen_params is not None else perceiver
    det_rng = np.random.default_rng(np.random.SeedSequence((episode_seed, 0x44A2)))
    frozen_dets: list[Detection] = []
    rows = []
    for rec in env.records:
        objects = []
        for p in rec.predictions:
            dist = predict_features(frozen, rec.features[p.object_id])[0]
            top = dist.max()
            tied = np.flatnonzero(dist >= top - 1e-12)
            cls = int(tied[det_rng.integers(len(tied))]) if len(tied) > 1 else int(tied[0])
            frozen_dets.append(
                Detection(
                    confidence=float(top),
                    pred_class=cls,
                    true_class=rec.true_classes[p.object_id],
                )
            )
            objects.append(
                {
                    "id": p.object_id,
                    "true": rec.true_classes[p.object_id],
                    "argmax": int(p.distribution.argmax()),
                    "maxp": round(float(p.distribution.max()), 6),
                }
            )
        rows.append(
            {
                "step": rec.step,
                "x": round(rec.pose_x, 6),
                "y": round(rec.pose_y, 6),
                "theta": round(rec.pose_theta, 6),
                "objects": objects,
            }
        )
    return CollectedEpisode(
        scene_id=scene.scene_id,
        episode_seed=episode_seed,
        manifest=manifest,
        n_frames=len(env.records),
        frozen_detections=frozen_dets,
        trajectory_rows=rows,
        records=env.records,
        final_map=env.map,
    )


def _split_round(total: int, n: int, r: int) -> int:
    """Portion of `total` assigned to round r (1-based): remainder goes to
    the later rounds so every round gets at least base."""
    base, rem = divmod(total, n)
    return base + (1 if r > n - rem else 0)


# ---------------------------------------------------------------------------
# the pipeline


def _leg_tag(policy: str) -> int:
    return {"random": 1, "coverage": 2, "label_inconsistency": 3, "eits": 4}[policy]


def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("trajectories", "manifests", "checkpoints"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        from .config import dump_json, to_dict

        dump_json(to_dict(cfg), out / "config.json")

    rows: list[dict] = []
    hardness_rows: list[dict] = []
    legs: dict[str, LegResult] = {}
    curve_rows: list[dict] = []

    def flush() -> None:
        if out is None:
            return
        write_report_csv(rows, cfg.scene.num_classes, out / "report.csv")
        write_hardness_csv(hardness_rows, cfg.scene.num_classes, out / "hardness.csv")
        write_curves_csv(curve_rows, out / "curves.csv")

    try:
        train_pool, test_pool = build_scene_pools(cfg)
        train_ids = {s.scene_id for s in train_pool}

        pre_params, pre_report = pretrain(
            cfg.perceiver, cfg.scene, seed=derive_seed(cfg.seed, _TAG_PRETRAIN)
        )
        if out is not None:
            save_params(pre_params, out / "checkpoints" / "perceiver_pretrained.json")

        eval_frames = []
        for i, scene in enumerate(test_pool):
            eval_frames.extend(
                make_eval_frames(
                    scene,
                    cfg.eval_views_per_object,
                    derive_seed(cfg.seed, _TAG_EVAL_VIEW, i),
                    cfg.agent,
                    cfg.camera,
                )
            )
        if not eval_frames:
            raise RuntimeError("no evaluation frames could be rendered in the test scenes")
        eval_seed = derive_seed(cfg.seed, _TAG_EVAL)

        pre_eval = evaluate(pre_params, eval_frames, cfg.scene.num_classes, seed=eval_seed)
        rows.append(
            report_row("pretrained", 0, pre_eval, cfg.scene.num_classes, 0, 0, pre_report)
        )
        flush()

        for policy in cfg.policies:
            n_rounds = cfg.n_progressive if policy == "eits" else 1
            perceiver = pre_params
            leg_detections: list[Detection] = []
            images_total = 0
            samples_total = 0

            for rnd in range(1, n_rounds + 1):
                policy_params: PolicyParams | None = None
                if policy in ("eits", "label_inconsistency"):
                    reward_kind = "sdd_sdu" if policy == "eits" else "label2d"
                    steps = _split_round(cfg.ppo.total_steps, n_rounds, rnd)
                    train_res = _train_goal_policy(
                        cfg, train_pool, perceiver, policy, rnd, steps, reward_kind
                    )
                    policy_params = train_res.best_params
                    for i, crow in enumerate(train_res.curve):
                        curve_rows.append(
                            {
                                "leg": f"{policy}_r{rnd}",
                                "episode": i + 1,
                                "steps": crow.steps,
                                "mean_reward": crow.mean_reward,
                                "r_d_mean": crow.r_d_mean,
                                "r_u_mean": crow.r_u_mean,
                                "is_best": int(i == train_res.best_row),
                            }
                        )
                    if out is not None:
                        save_checkpoint(
                            train_res.best_params,
                            out / "checkpoints" / f"policy_{policy}_r{rnd}.ckpt",
                            meta={
                                "leg": policy,
                                "round": rnd,
                                "best_row": train_res.best_row,
                                "episodes": train_res.episodes,
                                "total_steps": train_res.total_steps,
                            },
                        )

                goal_source = "policy" if policy == "eits" else policy
                round_budget = _split_round(cfg.image_budget, n_rounds, rnd)
                round_eps = _split_round(cfg.episodes_per_scene, n_rounds, rnd)

                manifest: list[ManifestEntry] = []
                images_round = 0
                labeled: list[LabeledSample] = []
                for si, scene in enumerate(train_pool):
                    for ep in range(round_eps):
                        ep_seed = derive_seed(
                            cfg.seed, _TAG_EPISODE, _leg_tag(policy), rnd, si, ep
                        )
                        rng = np.random.default_rng(
                            np.random.SeedSequence(
                                (cfg.seed, _TAG_COLLECT, _leg_tag(policy), rnd, si, ep)
                            )
                        )
                        col = collect_episode(
                            scene, perceiver, cfg, ep_seed, goal_source, policy_params, rng,
                            frozen_params=pre_params,
                        )
                        leg_detections.extend(col.frozen_detections)
                        kept = _truncate_to_budget(
                            col.manifest, round_budget - images_round
                        )
                        images_round += len(selected_steps(kept))
                        manifest.extend(kept)
                        if kept:
                            labeled.extend(oracle_label(scene, kept))
                        if out is not None:
                            traj_path = (
                                out
                                / "trajectories"
                                / f"{policy}_r{rnd}_{scene.scene_id}_ep{ep}.jsonl"
                            )
                            with open(traj_path, "w") as fh:
                                for row in col.trajectory_rows:
                                    fh.write(json.dumps(row, sort_keys=True) + "\n")

                bad = {s.source_scene for s in labeled} - train_ids
                if bad:
                    raise RuntimeError(f"fine-tuning would use non-train scenes: {sorted(bad)}")
                if out is not None:
                    write_manifest(
                        manifest, out / "manifests" / f"{policy}_r{rnd}.jsonl"
                    )

                if labeled:
                    perceiver, _ = finetune(
                        perceiver,
                        labeled,
                        seed=derive_seed(cfg.seed, _TAG_FINETUNE, _leg_tag(policy), rnd),
                        cfg=cfg.perceiver,
                    )
                images_total += images_round
                samples_total += len(labeled)

                leg_eval = evaluate(perceiver, eval_frames, cfg.scene.num_classes, seed=eval_seed)
                label = f"eits(n={rnd})" if policy == "eits" else policy
                rows.append(
                    report_row(
                        label, rnd, leg_eval, cfg.scene.num_classes, images_total, samples_total
                    )
                )
                legs[label] = LegResult(
                    policy=policy,
                    n_round=rnd,
                    params=perceiver,
                    eval_report=leg_eval,
                    images_selected=images_total,
                    samples_labeled=samples_total,
                )
                if out is not None:
                    save_params(
                        perceiver, out / "checkpoints" / f"perceiver_{policy}_r{rnd}.json"
                    )
                flush()

            hardness_rows.append(
                hardness_row(policy, leg_detections, cfg.scene.num_classes, eval_seed)
            )
            flush()
    finally:
        flush()

    return ExperimentReport(
        rows=rows, hardness_rows=hardness_rows, legs=legs, pretrained=pre_params, out_dir=out
    )


def _train_goal_policy(
    cfg: ExperimentConfig,
    train_pool: list[SceneSpec],
    perceiver: PerceiverParams,
    policy: str,
    rnd: int,
    steps: int,
    reward_kind: str,
) -> TrainResult:
    def factory(episode: int) -> ExplorationEnv:
        scene = train_pool[episode % len(train_pool)]
        return ExplorationEnv(
            scene,
            perceiver,
            seed=derive_seed(cfg.seed, _TAG_POLICY, _leg_tag(policy), rnd, episode),
            reward_kind=reward_kind,
            record=False,
            map_cfg=cfg.map,
            reward_cfg=cfg.reward,
            planner_cfg=cfg.planner,
            agent=cfg.agent,
            camera=cfg.camera,
            net_cfg=cfg.net,
            ppo_cfg=cfg.ppo,
        )

    ppo = PPOConfig(**{**_ppo_as_dict(cfg.ppo), "total_steps": int(steps)})
    return train_exploration(
        factory,
        cfg=ppo,
        net_cfg=cfg.net,
        seed=derive_seed(cfg.seed, _TAG_POLICY, _leg_tag(policy), rnd),
    )


def _ppo_as_dict(ppo: PPOConfig) -> dict:
    from .config import to_dict

    return to_dict(ppo)


def _truncate_to_budget(manifest: list[ManifestEntry], images_left: int) -> list[ManifestEntry]:
    """Keep whole selected images, in trajectory order, up to the budget."""
    if images_left <= 0:
        return []
    kept: list[ManifestEntry] = []
    seen: set[int] = set()
    for entry in manifest:
        if entry.step not in seen:
            if len(seen) >= images_left:
                break
            seen.add(entry.step)
        kept.append(entry)
    return kept


# ---------------------------------------------------------------------------
# hardness (frozen pre-trained perceiver on collected observations)


def evaluate_trajectory_hardness(
    detections: list[Detection],
    num_classes: int,
    seed: int = 0,
) -> EvalReport:
    """AP over sightings re-scored by the frozen pre-trained model during
    collection; lower means the policy sought harder views."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x44A2)))
    gt_counts = {c: 0 for c in range(num_classes)}
    for d in detections:
        gt_counts[d.true_class] += 1
    return average_precision(detections, gt_counts, rng)


def hardness_row(
    policy: str,
    detections: list[Detection],
    num_classes: int,
    seed: int,
) -> dict:
    rep = evaluate_trajectory_hardness(detections, num_classes, seed)
    row = {"policy": policy, "n_detections": rep.n_detections, "mean_ap": rep.mean_ap}
    for c in range(num_classes):
        row[f"ap_{c}"] = rep.per_class_ap.get(c)
    return row


# ---------------------------------------------------------------------------
# report emission


def report_row(
    label: str,
    n_round: int,
    rep: EvalReport,
    num_classes: int,
    images: int,
    samples: int,
    extra: dict | None = None,
) -> dict:
    row = {
        "policy": label,
        "n": n_round,
        "mean_ap": rep.mean_ap,
        "n_detections": rep.n_detections,
        "images_selected": images,
        "samples_labeled": samples,
    }
    for c in range(num_classes):
        row[f"ap_{c}"] = rep.per_class_ap.get(c)
    if extra:
        row["source_holdout_acc"] = extra.get("source_holdout_acc")
    return row


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt(row.get(k)) for k in fieldnames])


def write_report_csv(rows: list[dict], num_classes: int, path: str | Path) -> None:
    fields = ["policy", "n"] + [f"ap_{c}" for c in range(num_classes)] + [
        "mean_ap", "n_detections", "images_selected", "samples_labeled", "source_holdout_acc",
    ]
    _write_csv(Path(path), fields, rows)


def write_hardness_csv(rows: list[dict], num_classes: int, path: str | Path) -> None:
    fields = ["policy"] + [f"ap_{c}" for c in range(num_classes)] + ["mean_ap", "n_detections"]
    _write_csv(Path(path), fields, rows)


def write_curves_csv(rows: list[dict], path: str | Path) -> None:
    fields = ["leg", "episode", "steps", "mean_reward", "r_d_mean", "r_u_mean", "is_best"]
    _write_csv(Path(path), fields, rows)


# ---------------------------------------------------------------------------
# threshold sweep


def delta_sweep(
    cfg: ExperimentConfig,
    deltas: tuple[float, ...] = (0.1, 0.2, 0.3),
    episodes: int = 2,
    with_ap: bool = False,
) -> list[dict]:
    """Selection counts (and optionally fine-tuned AP) across thresholds on
    one shared set of trajectories, the fairness that makes the counts
    comparable."""
    cfg.validate()
    train_pool, test_pool = build_scene_pools(cfg)
    pre_params, _ = pretrain(cfg.perceiver, cfg.scene, seed=derive_seed(cfg.seed, _TAG_PRETRAIN))

    records_by_ep = []
    for si, scene in enumerate(train_pool):
        for ep in range(episodes):
            ep_seed = derive_seed(cfg.seed, _TAG_EPISODE, 0xD, si, ep)
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, _TAG_COLLECT, 0xD, si, ep))
            )
            env = ExplorationEnv(
                scene, pre_params, seed=ep_seed, reward_kind="none", record=True,
                map_cfg=cfg.map, reward_cfg=cfg.reward, planner_cfg=cfg.planner,
                agent=cfg.agent, camera=cfg.camera, net_cfg=cfg.net, ppo_cfg=cfg.ppo,
            )
            env.reset()
            while not env.done:
                cell = baseline_policy(
                    "random", env.map, rng, agent=cfg.agent, planner_cfg=cfg.planner
                )
                env.decide_cell(cell)
            records_by_ep.append((scene, env.records))

    eval_frames = []
    eval_seed = derive_seed(cfg.seed, _TAG_EVAL)
    if with_ap:
        for i, scene in enumerate(test_pool):
            eval_frames.extend(
                make_eval_frames(
                    scene, cfg.eval_views_per_object,
                    derive_seed(cfg.seed, _TAG_EVAL_VIEW, i), cfg.agent, cfg.camera,
                )
            )

    out = []
    for delta in deltas:
        sel_cfg = SelectorConfig(
            delta=delta, mode=cfg.selector.mode, entropy_threshold=cfg.selector.entropy_threshold
        )
        images = 0
        entries = 0
        labeled: list[LabeledSample] = []
        for scene, records in records_by_ep:
            man = select_hard_samples(records, scene.scene_id, sel_cfg)
            images += len(selected_steps(man))
            entries += len(man)
            if with_ap and man:
                labeled.extend(oracle_label(scene, man))
        row = {"delta": delta, "images_selected": images, "manifest_entries": entries}
        if with_ap:
            params = pre_params
            if labeled:
                params, _ = finetune(
                    pre_params, labeled, seed=derive_seed(cfg.seed, _TAG_FINETUNE, 0xD), cfg=cfg.perceiver
                )
            rep = evaluate(params, eval_frames, cfg.scene.num_classes, seed=eval_seed)
            row["mean_ap"] = rep.mean_ap
            row["samples_labeled"] = len(labeled)
        out.append(row)
    return out
