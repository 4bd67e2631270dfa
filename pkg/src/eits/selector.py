"""Hard-sample selection and the simulator's oracle labeler.

A collected frame is worth labeling when any object in it still has a
plausible second class: second_max mode thresholds the runner-up softmax
probability at the same delta the uncertainty reward uses; entropy mode
thresholds the natural-log entropy instead.  Selection is per image, and a
selected image contributes every visible object as a labeling candidate.
Map disagreement is deliberately not a selection signal: it needs the
multi-view history, while selection must work frame by frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episode import StepRecord
from .perceiver import LabeledSample
from .reward import uncertainty_value
from .scene import SceneSpec

ENTROPY_THRESHOLD_DEFAULT = 0.4  # natural log
MODES = ("second_max", "entropy")


@dataclass(frozen=True)
class SelectorConfig:
    delta: float = 0.1
    mode: str = "second_max"
    entropy_threshold: float = ENTROPY_THRESHOLD_DEFAULT


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    step: int
    object_id: int
    feature: np.ndarray
    u_value: float
    mode: str
    threshold: float


def entropy_value(distribution: np.ndarray) -> float:
    d = np.asarray(distribution, dtype=float)
    nz = d[d > 0]
    return float(-(nz * np.log(nz)).sum())


def _uncertainty(distribution: np.ndarray, mode: str) -> float:
    if mode == "second_max":
        return uncertainty_value(distribution)
    if mode == "entropy":
        return entropy_value(distribution)
    raise ValueError(f"unknown selection mode {mode!r}; expected one of {MODES}")


def select_hard_samples(
    records: list[StepRecord],
    scene_id: str,
    cfg: SelectorConfig | None = None,
) -> list[ManifestEntry]:
    """Manifest of every object in every selected frame.

    A frame is selected iff some object's uncertainty strictly exceeds the
    mode's threshold, mirroring the uncertainty reward's any-object rule.
    Empty trajectory, empty manifest.
    """
    cfg = cfg or SelectorConfig()
    threshold = cfg.delta if cfg.mode == "second_max" else cfg.entropy_threshold
    if threshold <= 0:
        raise ValueError("selection threshold must be positive")
    out: list[ManifestEntry] = []
    for rec in records:
        if not rec.predictions:
            continue
        u_vals = {p.object_id: _uncertainty(p.distribution, cfg.mode) for p in rec.predictions}
        if not any(u > threshold for u in u_vals.values()):
            continue
        for pred in rec.predictions:
            out.append(
                ManifestEntry(
                    scene_id=scene_id,
                    step=rec.step,
                    object_id=pred.object_id,
                    feature=np.asarray(rec.features[pred.object_id], dtype=float),
                    u_value=u_vals[pred.object_id],
                    mode=cfg.mode,
                    threshold=threshold,
                )
            )
    return out


def selected_steps(manifest: list[ManifestEntry]) -> list[int]:
    return sorted({e.step for e in manifest})


def oracle_label(scene: SceneSpec, manifest: list[ManifestEntry]) -> list[LabeledSample]:
    """Attach ground-truth classes.  Unknown object ids are an error; a
    manifest from scene A labeled against scene B should fail loudly."""
    by_id = {o.object_id: o.class_id for o in scene.objects}
    samples = []
    for entry in manifest:
        if entry.object_id not in by_id:
            raise ValueError(
                f"manifest references object {entry.object_id} absent from scene {scene.scene_id!r}"
            )
        samples.append(
            LabeledSample(
                feature=entry.feature,
                true_class=by_id[entry.object_id],
                source_scene=entry.scene_id,
                source_step=entry.step,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# manifest files: one JSON object per line


def write_manifest(manifest: list[ManifestEntry], path: str | Path) -> None:
    with open(path, "w") as fh:
        for e in manifest:
            fh.write(
                json.dumps(
                    {
                        "scene_id": e.scene_id,
                        "step": e.step,
                        "object_id": e.object_id,
                        "feature": [float(v) for v in e.feature],
                        "u_value": e.u_value,
                        "mode": e.mode,
                        "threshold": e.threshold,
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append(
                ManifestEntry(
                    scene_id=d["scene_id"],
                    step=int(d["step"]),
                    object_id=int(d["object_id"]),
                    feature=np.asarray(d["feature"], dtype=float),
                    u_value=float(d["u_value"]),
                    mode=d["mode"],
                    threshold=float(d["threshold"]),
                )
            )
    return out
