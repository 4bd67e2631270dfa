"""Command-line front end.

One executable, one subcommand per pipeline stage, everything driven by an
experiment config JSON layered as defaults < --config file < flags.  Exit
codes: 0 success, 1 usage error, 2 runtime failure.

The staged subcommands compose through files: `collect` writes trajectory
summaries plus per-sighting feature logs, `select` turns sighting logs into
a manifest, `finetune` labels a manifest against scene files and updates
the perceiver, `eval` scores any perceiver checkpoint on the test pool.
`run-pipeline` does all of it in one process.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import loop as lp
from .config import ConfigError, dump_json, load_json
from .episode import StepRecord
from .perceiver import ObjectPrediction, load_params, pretrain, save_params
from .perceiver import finetune as perceiver_finetune
from .perceiver import evaluate as perceiver_evaluate
from .policy import load_checkpoint, save_checkpoint
from .reward import RewardBreakdown
from .scene import generate_scene, load_scene, save_scene
from .selector import (
    MODES,
    SelectorConfig,
    oracle_label,
    read_manifest,
    select_hard_samples,
    selected_steps,
    write_manifest,
)
from . import semap as sm

log = logging.getLogger("eits")


class UsageError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="eits",
        description="Embodied exploration, hard-sample selection, perceiver fine-tuning.",
    )
    p.add_argument("--config", help="experiment config JSON", default=None)
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--out", default=None, help="output directory or file")
    p.add_argument("--threads", type=int, default=1, help="worker threads for numeric kernels")
    p.add_argument("--log-level", default="warning",
                   choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", metavar="command")

    sp = sub.add_parser("gen-scenes", help="generate scene files")
    sp.add_argument("--count", type=int, default=5)
    sp.add_argument("--out-dir", default=None, help="defaults to --out")
    sp.add_argument("--prefix", default="scene")

    sub.add_parser("pretrain", help="train the perceiver on the shifted source domain")

    sp = sub.add_parser("train-policy", help="PPO-train a goal policy on the train pool")
    sp.add_argument("--reward", default="sdd_sdu", choices=["sdd_sdu", "label2d"])
    sp.add_argument("--steps", type=int, default=None, help="override ppo.total_steps")
    sp.add_argument("--perceiver", default=None, help="perceiver params JSON (default: pretrain)")

    sp = sub.add_parser("collect", help="run a goal policy and log trajectories")
    sp.add_argument("--policy", default="random",
                    choices=["random", "coverage", "label_inconsistency", "eits"])
    sp.add_argument("--checkpoint", default=None, help="policy checkpoint for trained kinds")
    sp.add_argument("--perceiver", default=None, help="perceiver params JSON (default: pretrain)")
    sp.add_argument("--save-maps", action="store_true", help="save each episode's final map")

    sp = sub.add_parser("select", help="threshold sighting logs into a manifest")
    sp.add_argument("--sightings", required=True, help="directory of *.jsonl sighting logs")
    sp.add_argument("--mode", default="second_max", choices=list(MODES))
    sp.add_argument("--delta", type=float, default=None)

    sp = sub.add_parser("finetune", help="label a manifest and fine-tune the perceiver")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--scenes-dir", required=True)
    sp.add_argument("--perceiver", required=True, help="perceiver params JSON to start from")

    sp = sub.add_parser("eval", help="score a perceiver on the test pool")
    sp.add_argument("--perceiver", required=True)

    sub.add_parser("run-pipeline", help="full experiment, all stages")

    sp = sub.add_parser("dump-map", help="summarize a saved semantic map")
    sp.add_argument("--map", required=True, dest="map_path")

    sp = sub.add_parser("report", help="print a finished run's tables")
    sp.add_argument("--run", default=None, help="pipeline output directory")
    sp.add_argument("--delta-sweep", action="store_true",
                    help="run the selection-threshold sweep instead")

    return p


def _load_experiment(args) -> lp.ExperimentConfig:
    file_data = load_json(args.config) if args.config else None
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    from .config import layered

    return layered(lp.ExperimentConfig, file_data, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _perceiver_for(args, cfg: lp.ExperimentConfig):
    path = getattr(args, "perceiver", None)
    if path:
        return load_params(path)
    params, _ = pretrain(cfg.perceiver, cfg.scene, seed=lp.derive_seed(cfg.seed, 0x9E7))
    return params


# ---------------------------------------------------------------------------
# subcommand bodies


def _cmd_gen_scenes(args) -> int:
    cfg = _load_experiment(args)
    out = Path(args.out_dir or args.out or "scenes")
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = lp.derive_seed(cfg.seed, 0x5CE4E, i)
        scene = generate_scene(seed, cfg.scene, scene_id=f"{args.prefix}{i:03d}")
        save_scene(scene, out / f"{scene.scene_id}.json")
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, "pretrain_out")
    params, report = pretrain(cfg.perceiver, cfg.scene, seed=lp.derive_seed(cfg.seed, 0x9E7))
    save_params(params, out / "perceiver_pretrained.json")
    dump_json(report, out / "pretrain_report.json")
    print(f"source holdout accuracy {report['source_holdout_acc']:.3f}; params in {out}")
    return 0


def _cmd_train_policy(args) -> int:
    cfg = _load_experiment(args)
    if args.steps is not None:
        cfg.ppo = dataclasses.replace(cfg.ppo, total_steps=args.steps)
    out = _out_dir(args, "policy_out")
    perceiver = _perceiver_for(args, cfg)
    train_pool, _ = lp.build_scene_pools(cfg)
    policy = "eits" if args.reward == "sdd_sdu" else "label_inconsistency"
    res = lp._train_goal_policy(
        cfg, train_pool, perceiver, policy, 1, cfg.ppo.total_steps, args.reward
    )
    save_checkpoint(
        res.best_params, out / "policy_best.ckpt",
        meta={"reward": args.reward, "best_row": res.best_row, "episodes": res.episodes},
    )
    rows = [
        {"leg": policy, "episode": i + 1, "steps": r.steps, "mean_reward": r.mean_reward,
         "r_d_mean": r.r_d_mean, "r_u_mean": r.r_u_mean, "is_best": int(i == res.best_row)}
        for i, r in enumerate(res.curve)
    ]
    lp.write_curves_csv(rows, out / "curves.csv")
    print(f"trained {res.episodes} episodes, best curve row {res.best_row}; {out}")
    return 0


def _cmd_collect(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, "collect_out")
    (out / "trajectories").mkdir(exist_ok=True)
    (out / "sightings").mkdir(exist_ok=True)
    if args.save_maps:
        (out / "maps").mkdir(exist_ok=True)
    perceiver = _perceiver_for(args, cfg)
    policy_params = None
    if args.policy in ("eits", "label_inconsistency"):
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for --policy {args.policy}")
        policy_params, _ = load_checkpoint(args.checkpoint)
    train_pool, _ = lp.build_scene_pools(cfg)

    goal_source = "policy" if args.policy == "eits" else args.policy
    n_images = 0
    for si, scene in enumerate(train_pool):
        save_scene(scene, out / f"{scene.scene_id}.json")
        for ep in range(cfg.episodes_per_scene):
            ep_seed = lp.derive_seed(cfg.seed, 0xE915, si, ep)
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, 0xC011, si, ep))
            )
            col = lp.collect_episode(
                scene, perceiver, cfg, ep_seed, goal_source, policy_params, rng
            )
            stem = f"{scene.scene_id}_ep{ep}"
            with open(out / "trajectories" / f"{stem}.jsonl", "w") as fh:
                for row in col.trajectory_rows:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
            _write_sightings(out / "sightings" / f"{stem}.jsonl", scene.scene_id, col.records)
            if args.save_maps:
                sm.save_map(col.final_map, out / "maps" / f"{stem}.map")
            n_images += col.n_frames
    print(f"collected {n_images} frames over "
          f"{len(train_pool) * cfg.episodes_per_scene} episodes; {out}")
    return 0


def _write_sightings(path, scene_id: str, records) -> None:
    """Every (frame, object) feature/distribution pair, one JSON row each.
    This is the interchange format between `collect` and `select`."""
    with open(path, "w") as fh:
        for rec in records:
            for pred in rec.predictions:
                fh.write(json.dumps({
                    "scene_id": scene_id,
                    "step": rec.step,
                    "object_id": pred.object_id,
                    "true_class": rec.true_classes[pred.object_id],
                    "feature": [float(v) for v in rec.features[pred.object_id]],
                    "distribution": [float(v) for v in pred.distribution],
                }, sort_keys=True) + "\n")


def _cmd_select(args) -> int:
    cfg = _load_experiment(args)
    delta = args.delta if args.delta is not None else cfg.selector.delta
    sel_cfg = SelectorConfig(
        delta=delta, mode=args.mode, entropy_threshold=cfg.selector.entropy_threshold
    )
    out = _out_dir(args, "select_out")
    total_entries = 0
    total_images = 0
    manifest_all = []
    for path in sorted(Path(args.sightings).glob("*.jsonl")):
        by_step: dict[int, list[dict]] = {}
        scene_id = None
        with open(path) as fh:
            for line in fh:
                d = json.loads(line)
                scene_id = d["scene_id"]
                by_step.setdefault(d["step"], []).append(d)
        if scene_id is None:
            continue
        records = []
        for step in sorted(by_step):
            rows = by_step[step]
            records.append(StepRecord(
                step=step, pose_x=0.0, pose_y=0.0, pose_theta=0.0,
                predictions=[
                    ObjectPrediction(
                        object_id=r["object_id"],
                        distribution=np.asarray(r["distribution"]),
                        pixel_count=0,
                    ) for r in rows
                ],
                features={r["object_id"]: np.asarray(r["feature"]) for r in rows},
                true_classes={r["object_id"]: r["true_class"] for r in rows},
                breakdown=RewardBreakdown(0.0, 0.0, 0.0, 0),
            ))
        man = select_hard_samples(records, scene_id, sel_cfg)
        manifest_all.extend(man)
        total_entries += len(man)
        total_images += len(selected_steps(man))
    write_manifest(manifest_all, out / "manifest.jsonl")
    print(f"selected {total_images} images ({total_entries} object samples) "
          f"at {args.mode} threshold {delta:g}; {out / 'manifest.jsonl'}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, "finetune_out")
    params = load_params(args.perceiver)
    manifest = read_manifest(args.manifest)
    scenes = {}
    for path in Path(args.scenes_dir).glob("*.json"):
        try:
            scene = load_scene(path)
        except (ValueError, KeyError):
            continue
        scenes[scene.scene_id] = scene
    samples = []
    for scene_id in sorted({e.scene_id for e in manifest}):
        if scene_id not in scenes:
            raise UsageError(f"manifest references scene {scene_id!r} not in --scenes-dir")
        entries = [e for e in manifest if e.scene_id == scene_id]
        samples.extend(oracle_label(scenes[scene_id], entries))
    if not samples:
        print("manifest selected nothing; params copied unchanged")
        save_params(params, out / "perceiver_finetuned.json")
        return 0
    tuned, losses = perceiver_finetune(
        params, samples, seed=lp.derive_seed(cfg.seed, 0xF17), cfg=cfg.perceiver
    )
    save_params(tuned, out / "perceiver_finetuned.json")
    print(f"fine-tuned on {len(samples)} samples, "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_experiment(args)
    out = _out_dir(args, "eval_out")
    params = load_params(args.perceiver)
    _, test_pool = lp.build_scene_pools(cfg)
    frames = []
    for i, scene in enumerate(test_pool):
        frames.extend(lp.make_eval_frames(
            scene, cfg.eval_views_per_object,
            lp.derive_seed(cfg.seed, 0xE7A2, i), cfg.agent, cfg.camera,
        ))
    rep = perceiver_evaluate(
        params, frames, cfg.scene.num_classes, seed=lp.derive_seed(cfg.seed, 0xE7A1)
    )
    row = lp.report_row("eval", 0, rep, cfg.scene.num_classes, 0, 0)
    lp.write_report_csv([row], cfg.scene.num_classes, out / "eval.csv")
    print(f"mean AP {rep.mean_ap:.4f} over {rep.n_detections} detections; {out / 'eval.csv'}")
    return 0


def _cmd_run_pipeline(args) -> int:
    if not args.config:
        raise UsageError("run-pipeline requires --config (experiment JSON)")
    cfg = _load_experiment(args)
    out = _out_dir(args, "pipeline_out")
    report = lp.run_pipeline(cfg, out)
    for row in report.rows:
        ap = row["mean_ap"]
        print(f"{row['policy']:>24}  mean AP {ap if ap is None else f'{ap:.4f}'}")
    print(f"report: {out / 'report.csv'}")
    return 0


def _cmd_dump_map(args) -> int:
    m = sm.load_map(args.map_path)
    explored = m.explored > 0
    class_mass = m.class_channels.sum(axis=0)
    summary = {
        "dims": list(m.dims),
        "num_classes": m.num_classes,
        "resolution": m.resolution,
        "origin": [float(v) for v in m.origin],
        "explored_voxels": int(explored.sum()),
        "obstacle_voxels": int((m.obstacle > 0).sum()),
        "voxels_with_class_mass": int((class_mass > 0).sum()),
        "worst_class_sum_dev": float(
            np.abs(class_mass[class_mass > 0] - 1.0).max()
        ) if (class_mass > 0).any() else 0.0,
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_report(args) -> int:
    if args.delta_sweep:
        cfg = _load_experiment(args)
        out = _out_dir(args, "sweep_out")
        rows = lp.delta_sweep(cfg, with_ap=True)
        fields = ["delta", "images_selected", "manifest_entries", "samples_labeled", "mean_ap"]
        from .loop import _write_csv

        _write_csv(out / "delta_sweep.csv", fields, rows)
        for r in rows:
            print(f"delta {r['delta']:g}: {r['images_selected']} images, "
                  f"mean AP {r['mean_ap']:.4f}")
        return 0
    if not args.run:
        raise UsageError("report requires --run (pipeline output directory) or --delta-sweep")
    run = Path(args.run)
    for name in ("report.csv", "hardness.csv"):
        path = run / name
        if not path.exists():
            raise UsageError(f"{path} not found; is --run a pipeline output directory?")
        print(f"== {name}")
        with open(path) as fh:
            cells = [line.rstrip("\n").split(",") for line in fh]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
        for row in cells:
            print("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        print()
    return 0


_COMMANDS = {
    "gen-scenes": _cmd_gen_scenes,
    "pretrain": _cmd_pretrain,
    "train-policy": _cmd_train_policy,
    "collect": _cmd_collect,
    "select": _cmd_select,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "run-pipeline": _cmd_run_pipeline,
    "dump-map": _cmd_dump_map,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; we use 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    if args.threads and args.threads > 1:
        log.info("thread pool capped at 1 in this build; --threads ignored")
    if not args.command:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        log.debug("runtime failure", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
