"""Exploration rewards: map disagreement and prediction uncertainty.

Disagreement is the KL divergence from the incoming view's voxel
distributions to what the map believed before fusing them, averaged over
the voxels where both sides have class evidence.  Uncertainty is the
second-highest softmax probability of any visible object; a view earns the
bonus when some object's runner-up class is still plausible.  Both are
computed before the map update they score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .perceiver import ObjectPrediction
from .semap import SemanticDistributionMap, VoxelObservation


@dataclass(frozen=True)
class RewardConfig:
    epsilon: float = 1e-6  # KL smoothing
    delta: float = 0.1  # uncertainty threshold on the runner-up probability
    w_disagreement: float = 1.0
    w_uncertainty: float = 1.0
    reward_coeff: float = 0.02
    kl_aggregation: str = "mean"  # or "sum"


@dataclass(frozen=True)
class RewardBreakdown:
    disagreement: float
    uncertainty: float
    combined: float
    voxels_compared: int

    def row(self) -> dict:
        return {
            "r_d": self.disagreement,
            "r_u": self.uncertainty,
            "reward": self.combined,
            "voxels_compared": self.voxels_compared,
        }


def smoothed(p: np.ndarray, epsilon: float) -> np.ndarray:
    """Additive smoothing that keeps rows normalized."""
    C = p.shape[-1]
    return (p + epsilon) / (1.0 + C * epsilon)


def disagreement_reward(
    vobs: VoxelObservation,
    m_prev: SemanticDistributionMap,
    epsilon: float = 1e-6,
    aggregation: str = "mean",
) -> tuple[float, int]:
    """KL(new view's voxel distribution || prior map distribution).

    Only voxels where the view carries class evidence AND the map already
    holds class mass are compared; a first look at a voxel is novelty for
    the map but not disagreement with it.  Both sides are epsilon-smoothed,
    which also bounds each term.  Returns (reward, voxels compared).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if aggregation not in ("mean", "sum"):
        raise ValueError(f"unknown aggregation {aggregation!r}")
    if vobs.n_voxels == 0:
        return 0.0, 0
    has_class = vobs.class_counts > 0
    if not has_class.any():
        return 0.0, 0
    idx = vobs.indices[has_class]
    p = vobs.dists[has_class]
    q = m_prev.class_channels[:, idx[:, 0], idx[:, 1], idx[:, 2]].T
    prior = q.sum(axis=1) > 0
    if not prior.any():
        return 0.0, 0
    ps = smoothed(p[prior], epsilon)
    qs = smoothed(q[prior], epsilon)
    kl = np.sum(ps * (np.log(ps) - np.log(qs)), axis=1)
    kl = np.maximum(kl, 0.0)  # clamp float round-off on identical rows
    total = float(kl.sum())
    n = int(prior.sum())
    return (total / n if aggregation == "mean" else total), n


def uncertainty_value(distribution: np.ndarray) -> float:
    """Runner-up probability: high when a second class stays plausible."""
    d = np.asarray(distribution)
    if d.shape[-1] < 2:
        raise ValueError("need at least two classes for a runner-up probability")
    return float(np.partition(d, -2)[-2])


def uncertainty_reward(predictions: list[ObjectPrediction], delta: float = 0.1) -> float:
    """1 when any visible object's runner-up probability exceeds delta,
    else 0.  Exactly delta does not trigger.  No objects, no reward."""
    for pred in predictions:
        if uncertainty_value(pred.distribution) > delta:
            return 1.0
    return 0.0


def combine(r_d: float, r_u: float, cfg: RewardConfig | None = None) -> float:
    cfg = cfg or RewardConfig()
    if cfg.w_disagreement < 0 or cfg.w_uncertainty < 0:
        raise ValueError("reward weights must be non-negative")
    return cfg.reward_coeff * (cfg.w_disagreement * r_d + cfg.w_uncertainty * r_u)


def step_reward(
    vobs: VoxelObservation,
    m_prev: SemanticDistributionMap,
    predictions: list[ObjectPrediction],
    cfg: RewardConfig | None = None,
) -> RewardBreakdown:
    """The full per-step reward, computed against the pre-update map."""
    cfg = cfg or RewardConfig()
    r_d, n = disagreement_reward(vobs, m_prev, cfg.epsilon, cfg.kl_aggregation)
    r_u = uncertainty_reward(predictions, cfg.delta)
    return RewardBreakdown(
        disagreement=r_d,
        uncertainty=r_u,
        combined=combine(r_d, r_u, cfg),
        voxels_compared=n,
    )
