"""Linear-softmax object classifier with a controllable domain gap.

The perceiver scores pooled object features with a single linear layer.  Its
"pretraining domain" is this world's appearance model rigidly translated:
each confusable class pair slides along its own pair axis plus a small
random offset.  Source-domain classes stay just as separable, so source
accuracy is high, but the learned boundaries sit in the wrong place for the
real scenes.  Shift magnitude is measured in units of the total per-class
feature scatter (appearance noise plus view jitter in quadrature), so
`domain_shift=2.0` means the class means moved two noise standard
deviations.

Evaluation is a ranked-detection average-precision proxy: every visible
object in an eval frame is one detection, scored by its top softmax
probability; a detection is correct when the argmax class matches the true
class.  Ties in both argmax and ranking are broken by a seeded generator so
reports are reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Observation, SceneGenConfig, class_feature_means

PARAMS_FORMAT = "perceiver-params.v1"


@dataclass(frozen=True)
class PerceiverConfig:
    num_classes: int = 6
    feature_dim: int = 16
    # source-domain construction
    domain_shift: float = 2.5
    shift_jitter_frac: float = 0.2
    source_seed: int = 913
    samples_per_class: int = 500
    holdout_per_class: int = 200
    # optimization
    pretrain_lr: float = 0.5
    pretrain_epochs: int = 300
    finetune_lr: float = 0.001
    finetune_epochs: int = 60
    finetune_batch_size: int | None = None  # None = full batch


@dataclass
class PerceiverParams:
    weights: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)

    def copy(self) -> "PerceiverParams":
        return PerceiverParams(self.weights.copy(), self.bias.copy())

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class ObjectPrediction:
    object_id: int
    distribution: np.ndarray  # (C,) softmax over classes
    pixel_count: int


@dataclass(frozen=True)
class LabeledSample:
    feature: np.ndarray  # (F,)
    true_class: int
    source_scene: str
    source_step: int


def total_feature_sigma(scene_cfg: SceneGenConfig) -> float:
    """Per-axis std of a class's pooled features around its mean."""
    return math.hypot(scene_cfg.appearance_sigma, scene_cfg.view_jitter)


def source_class_means(cfg: PerceiverConfig, scene_cfg: SceneGenConfig) -> np.ndarray:
    """Class means of the pretraining domain.

    Each pair of confusable classes is translated together along its pair
    axis by domain_shift sigmas, plus a smaller per-class random direction.
    A rigid pair translation keeps the source classes separable while moving
    the optimal decision boundary relative to the deployment domain.
    """
    means, axes = class_feature_means(scene_cfg)
    sigma = total_feature_sigma(scene_cfg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.source_seed, 0x5F1)))
    shifted = means.copy()
    for c in range(cfg.num_classes):
        raw = rng.normal(size=cfg.feature_dim)
        raw /= np.linalg.norm(raw)
        shifted[c] += cfg.domain_shift * sigma * axes[c // 2]
        shifted[c] += cfg.shift_jitter_frac * sigma * raw
    return shifted


def sample_class_features(
    means: np.ndarray, scene_cfg: SceneGenConfig, n_per_class: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw pooled-feature lookalikes: mean + appearance noise + view jitter."""
    C, F = means.shape
    sigma = total_feature_sigma(scene_cfg)
    X = np.repeat(means, n_per_class, axis=0) + sigma * rng.normal(size=(C * n_per_class, F))
    y = np.repeat(np.arange(C), n_per_class)
    return X, y


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ce_loss_and_grad(
    weights: np.ndarray, bias: np.ndarray, X: np.ndarray, y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy and its exact gradients."""
    probs = _softmax(X @ weights.T + bias)
    n = X.shape[0]
    loss = -float(np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
    d = probs
    d[np.arange(n), y] -= 1.0
    d /= n
    return loss, d.T @ X, d.sum(axis=0)


def _fit(
    params: PerceiverParams,
    X: np.ndarray,
    y: np.ndarray,
    lr: float,
    epochs: int,
    batch_size: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[PerceiverParams, list[float]]:
    W, b = params.weights.copy(), params.bias.copy()
    losses = []
    n = X.shape[0]
    for _ in range(epochs):
        if batch_size is None:
            loss, gW, gb = ce_loss_and_grad(W, b, X, y)
            W -= lr * gW
            b -= lr * gb
            losses.append(loss)
        else:
            order = rng.permutation(n) if rng is not None else np.arange(n)
            epoch_loss = 0.0
            for start in range(0, n, batch_size):
                idx = order[start : start + batch_size]
                loss, gW, gb = ce_loss_and_grad(W, b, X[idx], y[idx])
                W -= lr * gW
                b -= lr * gb
                epoch_loss += loss * len(idx)
            losses.append(epoch_loss / n)
        if not np.isfinite(losses[-1]):
            raise RuntimeError(f"training diverged: loss={losses[-1]}")
    return PerceiverParams(W, b), losses


def pretrain(
    cfg: PerceiverConfig, scene_cfg: SceneGenConfig, seed: int = 0
) -> tuple[PerceiverParams, dict]:
    """Train on the shifted source domain from a zero init.

    Returns (params, report) where the report carries source train/holdout
    accuracy.  Same seed, same params, bit for bit.
    """
    means = source_class_means(cfg, scene_cfg)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x9E7)))
    X, y = sample_class_features(means, scene_cfg, cfg.samples_per_class, rng)
    Xh, yh = sample_class_features(means, scene_cfg, cfg.holdout_per_class, rng)
    init = PerceiverParams(
        np.zeros((cfg.num_classes, cfg.feature_dim)), np.zeros(cfg.num_classes)
    )
    params, losses = _fit(init, X, y, cfg.pretrain_lr, cfg.pretrain_epochs)
    report = {
        "source_train_acc": float(np.mean(predict_features(params, X).argmax(1) == y)),
        "source_holdout_acc": float(np.mean(predict_features(params, Xh).argmax(1) == yh)),
        "final_loss": losses[-1],
    }
    return params, report


def predict_features(params: PerceiverParams, X: np.ndarray) -> np.ndarray:
    """Softmax distributions for a batch of feature vectors, shape (N, C)."""
    return _softmax(np.atleast_2d(X) @ params.weights.T + params.bias)


def predict(
    params: PerceiverParams, obs: Observation, with_pixels: bool = True
) -> tuple[list[ObjectPrediction], np.ndarray | None]:
    """Classify every visible object in a frame.

    Returns predictions sorted by object id and, when `with_pixels`, an
    (H, W, C) image whose object pixels carry that object's distribution and
    whose background rows are all zero.
    """
    ids = obs.visible_object_ids
    counts = obs.object_pixel_counts
    if counts is None:  # hand-built frames skip the render-side histogram
        counts = {
            int(k): int(v)
            for k, v in zip(*np.unique(obs.instance_ids[obs.instance_ids >= 0], return_counts=True))
        }
    preds: list[ObjectPrediction] = []
    if ids:
        X = np.stack([obs.object_features[i] for i in ids])
        dists = predict_features(params, X)
        preds = [
            ObjectPrediction(object_id=i, distribution=dists[k], pixel_count=counts.get(i, 0))
            for k, i in enumerate(ids)
        ]
    pixels = None
    if with_pixels:
        H, W = obs.instance_ids.shape
        pixels = np.zeros((H, W, params.num_classes))
        for pred in preds:
            pixels[obs.instance_ids == pred.object_id] = pred.distribution
    return preds, pixels


def finetune(
    params: PerceiverParams,
    samples: list[LabeledSample],
    lr: float | None = None,
    epochs: int | None = None,
    batch_size: int | None = None,
    seed: int = 0,
    cfg: PerceiverConfig | None = None,
) -> tuple[PerceiverParams, list[float]]:
    """Continue training on oracle-labeled hard samples.

    Full-batch by default (loss then decreases monotonically, which the
    tests pin); pass batch_size for shuffled mini-batches.  Raises on an
    empty sample list rather than silently returning the input.
    """
    if not samples:
        raise ValueError("finetune called with no labeled samples")
    cfg = cfg or PerceiverConfig()
    lr = cfg.finetune_lr if lr is None else lr
    epochs = cfg.finetune_epochs if epochs is None else epochs
    batch_size = cfg.finetune_batch_size if batch_size is None else batch_size
    X = np.stack([s.feature for s in samples])
    y = np.array([s.true_class for s in samples])
    if y.min() < 0 or y.max() >= params.num_classes:
        raise ValueError("labeled sample class outside the perceiver's class range")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xF17)))
    return _fit(params, X, y, lr, epochs, batch_size=batch_size, rng=rng)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Detection:
    """One ranked detection: an object somewhere in the eval set."""

    confidence: float
    pred_class: int
    true_class: int


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]  # None where the class is absent
    mean_ap: float
    n_detections: int
    n_objects_per_class: dict[int, int]

    def rows(self) -> list[tuple[str, str]]:
        out = [(f"ap_class_{c}", "" if ap is None else f"{ap:.6f}") for c, ap in sorted(self.per_class_ap.items())]
        out.append(("mean_ap", f"{self.mean_ap:.6f}"))
        return out


def detections_from_observation(
    params: PerceiverParams, obs: Observation, rng: np.random.Generator
) -> list[Detection]:
    preds, _ = predict(params, obs, with_pixels=False)
    dets = []
    for pred in preds:
        dist = pred.distribution
        top = dist.max()
        tied = np.flatnonzero(dist >= top - 1e-12)
        pred_class = int(tied[rng.integers(len(tied))]) if len(tied) > 1 else int(tied[0])
        dets.append(
            Detection(
                confidence=float(top),
                pred_class=pred_class,
                true_class=obs.object_classes[pred.object_id],
            )
        )
    return dets


def average_precision(detections: list[Detection], gt_counts: dict[int, int], rng: np.random.Generator) -> EvalReport:
    """Ranked AP per class over a pooled detection list.

    For class c: its detections are those predicted c, ranked by confidence
    with random tie order; precision is accumulated at each true positive
    against the total count of true-class-c objects.
    """
    classes = sorted(gt_counts)
    per_class: dict[int, float | None] = {}
    for c in classes:
        n_gt = gt_counts[c]
        if n_gt == 0:
            per_class[c] = None
            continue
        mine = [d for d in detections if d.pred_class == c]
        keys = rng.random(len(mine))
        order = sorted(range(len(mine)), key=lambda i: (-mine[i].confidence, keys[i]))
        ap = 0.0
        tp = 0
        prev_recall = 0.0
        for rank, i in enumerate(order, start=1):
            if mine[i].true_class == c:
                tp += 1
                recall = tp / n_gt
                ap += (recall - prev_recall) * (tp / rank)
                prev_recall = recall
        per_class[c] = ap
    present = [ap for ap in per_class.values() if ap is not None]
    return EvalReport(
        per_class_ap=per_class,
        mean_ap=float(np.mean(present)) if present else 0.0,
        n_detections=len(detections),
        n_objects_per_class=dict(gt_counts),
    )


def evaluate(
    params: PerceiverParams,
    eval_frames: list[Observation],
    num_classes: int | None = None,
    seed: int = 0,
) -> EvalReport:
    """AP over every visible object in every eval frame.

    Each (frame, object) pair counts separately: the same object seen from
    two poses is two ground-truth instances and up to two detections.
    """
    C = num_classes or params.num_classes
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE7A1)))
    gt_counts = {c: 0 for c in range(C)}
    detections: list[Detection] = []
    for obs in eval_frames:
        for oid in obs.visible_object_ids:
            gt_counts[obs.object_classes[oid]] += 1
        detections.extend(detections_from_observation(params, obs, rng))
    return average_precision(detections, gt_counts, rng)


def accuracy(params: PerceiverParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_features(params, X).argmax(axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# serialization


def params_to_dict(params: PerceiverParams) -> dict:
    return {
        "format": PARAMS_FORMAT,
        "num_classes": params.num_classes,
        "feature_dim": params.feature_dim,
        "weights": [[float(v) for v in row] for row in params.weights],
        "bias": [float(v) for v in params.bias],
    }


def params_from_dict(data: dict) -> PerceiverParams:
    if data.get("format") != PARAMS_FORMAT:
        raise ValueError(f"not a {PARAMS_FORMAT} document: format={data.get('format')!r}")
    W = np.asarray(data["weights"], dtype=float)
    b = np.asarray(data["bias"], dtype=float)
    if W.shape != (int(data["num_classes"]), int(data["feature_dim"])) or b.shape != (W.shape[0],):
        raise ValueError("weight/bias shapes disagree with the declared dimensions")
    return PerceiverParams(W, b)


def save_params(params: PerceiverParams, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params), fh, sort_keys=True)
        fh.write("\n")


def load_params(path: str | Path) -> PerceiverParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
