"""Global goal policy: conv/FC actor-critic and PPO, all gradients by hand.

The network reads a coarse multi-plane view of the semantic map and scores
every coarse cell as a long-term goal, with a scalar value estimate on the
side.  Everything is plain numpy in float64: two 3x3 convolutions (the
second at stride 2), two fully-connected layers, then linear actor/critic
heads.  Backward passes are written against the forward cache and verified
by central finite differences, which is the load-bearing correctness test
for this module.

PPO follows the standard recipe: GAE advantages normalized per update,
clipped surrogate, value regression, entropy bonus, Adam over shuffled
minibatches for several epochs.  One rollout entry is one goal decision;
its reward is the sum of the per-step rewards earned during the local
window that pursued the goal.
"""

from __future__ import annotations

import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field, fields as dataclass_fields
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_MAGIC = b"EITSCKP1"


@dataclass(frozen=True)
class PolicyNetConfig:
    grid_size: int = 16
    in_channels: int = 5
    conv1_filters: int = 8
    conv2_filters: int = 16
    kernel: int = 3
    fc1: int = 256
    fc2: int = 128

    @property
    def conv2_grid(self) -> int:
        # stride-2 conv with pad 1 on an even grid halves it
        return (self.grid_size + 2 - self.kernel) // 2 + 1

    @property
    def n_goals(self) -> int:
        return self.grid_size * self.grid_size


@dataclass(frozen=True)
class PPOConfig:
    horizon: int = 20
    minibatches: int = 8
    epochs: int = 4
    lr: float = 2.5e-5
    entropy_coeff: float = 0.001
    value_coeff: float = 0.5
    reward_coeff: float = 0.02
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    total_steps: int = 50_000
    episode_max_steps: int = 500
    goal_interval: int = 25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    curve_window: int = 1000

    def validate(self) -> None:
        for name in ("horizon", "minibatches", "epochs", "lr", "value_coeff",
                     "gamma", "gae_lambda", "total_steps", "episode_max_steps",
                     "goal_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"PPOConfig.{name} must be positive")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")


@dataclass
class PolicyParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray
    fc2_b: np.ndarray
    actor_w: np.ndarray
    actor_b: np.ndarray
    critic_w: np.ndarray
    critic_b: np.ndarray

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in dataclass_fields(self)]

    def copy(self) -> "PolicyParams":
        return PolicyParams(**{n: t.copy() for n, t in self.tensors()})

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(**{n: np.zeros_like(t) for n, t in self.tensors()})

    def n_params(self) -> int:
        return sum(t.size for _, t in self.tensors())


def init_params(cfg: PolicyNetConfig | None = None, rng: np.random.Generator | None = None) -> PolicyParams:
    """He-scaled normal init; heads scaled down so the starting policy is
    near-uniform and the starting value near zero."""
    cfg = cfg or PolicyNetConfig()
    rng = rng or np.random.default_rng(0)
    k = cfg.kernel

    def he(shape, fan_in):
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    g2 = cfg.conv2_grid
    flat = cfg.conv2_filters * g2 * g2
    return PolicyParams(
        conv1_w=he((cfg.conv1_filters, cfg.in_channels, k, k), cfg.in_channels * k * k),
        conv1_b=np.zeros(cfg.conv1_filters),
        conv2_w=he((cfg.conv2_filters, cfg.conv1_filters, k, k), cfg.conv1_filters * k * k),
        conv2_b=np.zeros(cfg.conv2_filters),
        fc1_w=he((cfg.fc1, flat), flat),
        fc1_b=np.zeros(cfg.fc1),
        fc2_w=he((cfg.fc2, cfg.fc1), cfg.fc1),
        fc2_b=np.zeros(cfg.fc2),
        actor_w=0.01 * he((cfg.n_goals, cfg.fc2), cfg.fc2),
        actor_b=np.zeros(cfg.n_goals),
        critic_w=0.01 * he((1, cfg.fc2), cfg.fc2),
        critic_b=np.zeros(1),
    )


def zero_params(cfg: PolicyNetConfig | None = None) -> PolicyParams:
    return init_params(cfg, np.random.default_rng(0)).zeros_like()


# ---------------------------------------------------------------------------
# conv plumbing


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, pad: int):
    """x (B, Cin, H, W) -> out (B, F, H', W').  Patches are gathered with
    one strided slice per kernel offset; small kernels make that cheap."""
    B, Cin, H, W = x.shape
    F, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((B, Cin, k, k, Ho, Wo))
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride]
    flat = cols.reshape(B, Cin * k * k, Ho * Wo)
    out = np.einsum("bip,fi->bfp", flat, w.reshape(F, -1)) + b[None, :, None]
    return out.reshape(B, F, Ho, Wo), (x.shape, flat, stride, pad)


def _conv_backward(dout: np.ndarray, w: np.ndarray, cache):
    x_shape, flat, stride, pad = cache
    B, Cin, H, W = x_shape
    F, _, k, _ = w.shape
    _, _, Ho, Wo = dout.shape
    dflat_out = dout.reshape(B, F, Ho * Wo)
    dw = np.einsum("bfp,bip->fi", dflat_out, flat).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dflat = np.einsum("bfp,fi->bip", dflat_out, w.reshape(F, -1))
    dcols = dflat.reshape(B, Cin, k, k, Ho, Wo)
    dxp = np.zeros((B, Cin, H + 2 * pad, W + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += dcols[:, :, ki, kj]
    dx = dxp[:, :, pad : pad + H, pad : pad + W]
    return dx, dw, db


def forward(params: PolicyParams, x: np.ndarray, need_cache: bool = False):
    """(logits (B, G*G), value (B,), cache).  Accepts a single (C, G, G)
    input or a batch."""
    single = x.ndim == 3
    if single:
        x = x[None]
    x = np.ascontiguousarray(x, dtype=np.float64)

    z1, c1 = _conv_forward(x, params.conv1_w, params.conv1_b, stride=1, pad=1)
    a1 = np.maximum(z1, 0.0)
    z2, c2 = _conv_forward(a1, params.conv2_w, params.conv2_b, stride=2, pad=1)
    a2 = np.maximum(z2, 0.0)
    flat = a2.reshape(x.shape[0], -1)
    z3 = flat @ params.fc1_w.T + params.fc1_b
    a3 = np.maximum(z3, 0.0)
    z4 = a3 @ params.fc2_w.T + params.fc2_b
    a4 = np.maximum(z4, 0.0)
    logits = a4 @ params.actor_w.T + params.actor_b
    value = (a4 @ params.critic_w.T + params.critic_b)[:, 0]

    cache = None
    if need_cache:
        cache = {
            "c1": c1, "z1": z1, "a1": a1,
            "c2": c2, "z2": z2, "a2": a2,
            "flat": flat, "z3": z3, "a3": a3, "z4": z4, "a4": a4,
        }
    if single:
        return logits[0], float(value[0]), cache
    return logits, value, cache


def backward(params: PolicyParams, cache: dict, dlogits: np.ndarray, dvalue: np.ndarray) -> PolicyParams:
    """Gradients of sum(dlogits * logits) + sum(dvalue * value) w.r.t. every
    parameter tensor; dlogits (B, G*G), dvalue (B,)."""
    a4 = cache["a4"]
    g = params.zeros_like()
    g.actor_w[:] = dlogits.T @ a4
    g.actor_b[:] = dlogits.sum(axis=0)
    dv = np.atleast_1d(dvalue).astype(float)
    g.critic_w[:] = dv[None, :] @ a4
    g.critic_b[:] = dv.sum()

    da4 = dlogits @ params.actor_w + dv[:, None] * params.critic_w
    dz4 = da4 * (cache["z4"] > 0)
    g.fc2_w[:] = dz4.T @ cache["a3"]
    g.fc2_b[:] = dz4.sum(axis=0)

    da3 = dz4 @ params.fc2_w
    dz3 = da3 * (cache["z3"] > 0)
    g.fc1_w[:] = dz3.T @ cache["flat"]
    g.fc1_b[:] = dz3.sum(axis=0)

    dflat = dz3 @ params.fc1_w
    da2 = dflat.reshape(cache["a2"].shape)
    dz2 = da2 * (cache["z2"] > 0)
    da1, g.conv2_w[:], g.conv2_b[:] = _conv_backward(dz2, params.conv2_w, cache["c2"])
    dz1 = da1 * (cache["z1"] > 0)
    _, g.conv1_w[:], g.conv1_b[:] = _conv_backward(dz1, params.conv1_w, cache["c1"])
    return g


# ---------------------------------------------------------------------------
# sampling


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_goal(
    params: PolicyParams,
    x: np.ndarray,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> tuple[int, float, float]:
    """Sample a goal cell index from softmax(logits); a boolean mask can
    forbid cells (all cells of the coarse grid lie on the map, so the
    default mask allows everything)."""
    logits, value, _ = forward(params, x)
    if mask is not None:
        logits = np.where(mask.ravel(), logits, -np.inf)
    logp = _log_softmax(logits)
    p = np.exp(logp)
    p /= p.sum()
    goal = int(rng.choice(p.size, p=p))
    return goal, float(logp[goal]), float(value)


# ---------------------------------------------------------------------------
# PPO


@dataclass
class RolloutBuffer:
    horizon: int
    inputs: list = field(default_factory=list)
    goals: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    values: list = field(default_factory=list)
    rewards: list = field(default_factory=list)  # summed over the local window
    dones: list = field(default_factory=list)
    last_value: float = 0.0  # V(s) after the final entry, 0 if that state is terminal

    def add(self, x, goal, log_prob, value, reward, done) -> None:
        if self.full:
            raise ValueError("rollout buffer already holds a full horizon")
        if not math.isfinite(reward):
            raise ValueError(f"non-finite rollout reward: {reward}")
        self.inputs.append(np.asarray(x, dtype=np.float64))
        self.goals.append(int(goal))
        self.log_probs.append(float(log_prob))
        self.values.append(float(value))
        self.rewards.append(float(reward))
        self.dones.append(bool(done))

    @property
    def full(self) -> bool:
        return len(self.goals) >= self.horizon

    def clear(self) -> None:
        self.inputs, self.goals, self.log_probs = [], [], []
        self.values, self.rewards, self.dones = [], [], []
        self.last_value = 0.0


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
    last_value: float, gamma: float, lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Returns (advantages, returns); the value function fills in beyond the
    horizon, cut off at episode ends."""
    T = len(rewards)
    adv = np.zeros(T)
    next_adv = 0.0
    next_value = last_value
    for t in range(T - 1, -1, -1):
        cont = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * cont - values[t]
        next_adv = delta + gamma * lam * cont * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


class Adam:
    def __init__(self, params: PolicyParams, cfg: PPOConfig):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0
        self.cfg = cfg

    def step(self, params: PolicyParams, grads: PolicyParams) -> None:
        self.t += 1
        c = self.cfg
        b1t = 1.0 - c.adam_beta1 ** self.t
        b2t = 1.0 - c.adam_beta2 ** self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
            params.tensors(), grads.tensors(), self.m.tensors(), self.v.tensors()
        ):
            m *= c.adam_beta1
            m += (1 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1 - c.adam_beta2) * g * g
            p -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def _minibatch_loss_grads(params, xb, goals, logp_old, adv, returns, cfg):
    """Loss pieces and dlogits/dvalue for one minibatch; the surrogate's
    gradient flows only where the unclipped term is the active minimum."""
    logits, values, cache = forward(params, xb, need_cache=True)
    logp_all = _log_softmax(logits)
    B = xb.shape[0]
    rows = np.arange(B)
    logp = logp_all[rows, goals]
    ratio = np.exp(logp - logp_old)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    policy_loss = -float(np.mean(np.minimum(s1, s2)))

    p = np.exp(logp_all)
    entropy_per = -(p * logp_all).sum(axis=1)
    entropy = float(entropy_per.mean())

    verr = values - returns
    value_loss = float(np.mean(verr**2))

    # d(policy term)/dlogits: active where s1 <= s2 (clip not binding the min)
    active = (s1 <= s2).astype(float)
    coeff = -(active * ratio * adv) / B  # d/dlogp of the surrogate, per sample
    onehot = np.zeros_like(logits)
    onehot[rows, goals] = 1.0
    dlogits = coeff[:, None] * (onehot - p)
    # entropy bonus: subtracting entropy_coeff * H, dH/dz_j = -p_j(log p_j + H)
    dlogits += cfg.entropy_coeff * p * (logp_all + entropy_per[:, None]) / B
    dvalue = cfg.value_coeff * 2.0 * verr / B

    grads = backward(params, cache, dlogits, dvalue)
    stats = (
        policy_loss,
        value_loss,
        entropy,
        float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        float(np.mean(logp_old - logp)),
    )
    return grads, stats


def ppo_update(
    params: PolicyParams,
    buffer: RolloutBuffer,
    cfg: PPOConfig,
    rng: np.random.Generator,
    adam: Adam | None = None,
) -> tuple[PolicyParams, UpdateStats, Adam]:
    """One PPO update over a full rollout buffer.  Mutates nothing passed in;
    returns fresh params plus the (updated) Adam state for reuse."""
    if not buffer.full:
        raise ValueError(f"buffer holds {len(buffer.goals)} of {cfg.horizon} entries")
    X = np.stack(buffer.inputs)
    goals = np.asarray(buffer.goals)
    logp_old = np.asarray(buffer.log_probs)
    values_old = np.asarray(buffer.values)
    rewards = np.asarray(buffer.rewards)
    dones = np.asarray(buffer.dones)

    adv, returns = compute_gae(
        rewards, values_old, dones, buffer.last_value, cfg.gamma, cfg.gae_lambda
    )
    std = adv.std()
    adv = (adv - adv.mean()) / (std + 1e-8)

    params = params.copy()
    adam = adam or Adam(params, cfg)
    agg = np.zeros(5)
    n_mb = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(cfg.horizon)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            grads, stats = _minibatch_loss_grads(
                params, X[chunk], goals[chunk], logp_old[chunk],
                adv[chunk], returns[chunk], cfg,
            )
            total = stats[0] + cfg.value_coeff * stats[1] - cfg.entropy_coeff * stats[2]
            if not math.isfinite(total):
                raise RuntimeError(f"non-finite PPO loss: {total}")
            adam.step(params, grads)
            agg += np.asarray(stats)
            n_mb += 1
    agg /= max(n_mb, 1)
    return params, UpdateStats(*agg), adam


# ---------------------------------------------------------------------------
# training loop


@dataclass
class CurveRow:
    steps: int
    mean_reward: float
    r_d_mean: float
    r_u_mean: float


@dataclass
class TrainResult:
    best_params: PolicyParams
    final_params: PolicyParams
    curve: list[CurveRow]
    best_row: int
    episodes: int
    total_steps: int


def train_exploration(
    env_factory: Callable[[int], object],
    cfg: PPOConfig | None = None,
    net_cfg: PolicyNetConfig | None = None,
    seed: int = 0,
    progress: Callable[[CurveRow], None] | None = None,
) -> TrainResult:
    """Run PPO until total_steps local env steps are consumed.

    `env_factory(episode_index)` returns a fresh episode env exposing
    `reset() -> input` and
    `decide(goal) -> (next_input | None, window_reward, done, info)` where
    info carries steps_consumed / r_d_sum / r_u_sum for the local window.
    The learning curve is the moving average of total episode reward over
    the last curve_window episodes, one row per finished episode; the
    checkpoint with the highest curve value is returned as best.
    """
    cfg = cfg or PPOConfig()
    cfg.validate()
    net_cfg = net_cfg or PolicyNetConfig()
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x9011C7)))
    params = init_params(net_cfg, rng)
    adam: Adam | None = None
    buffer = RolloutBuffer(horizon=cfg.horizon)

    recent = deque(maxlen=cfg.curve_window)
    recent_rd: deque = deque(maxlen=cfg.curve_window)
    recent_ru: deque = deque(maxlen=cfg.curve_window)
    curve: list[CurveRow] = []
    best_value = -np.inf
    best_params = params.copy()
    best_row = -1

    steps_done = 0
    episode = 0
    while steps_done < cfg.total_steps:
        env = env_factory(episode)
        x = env.reset()
        ep_reward = 0.0
        ep_rd = 0.0
        ep_ru = 0.0
        ep_steps = 0
        done = False
        while not done:
            goal, logp, value = sample_goal(params, x, rng)
            nx, reward, done, info = env.decide(goal)
            buffer.add(x, goal, logp, value, reward, done)
            ep_reward += reward
            ep_rd += info.get("r_d_sum", 0.0)
            ep_ru += info.get("r_u_sum", 0.0)
            consumed = info.get("steps_consumed", cfg.goal_interval)
            ep_steps += consumed
            steps_done += consumed
            if buffer.full:
                if done or nx is None:
                    buffer.last_value = 0.0
                else:
                    _, bv, _ = forward(params, nx)
                    buffer.last_value = bv
                params, _, adam = ppo_update(params, buffer, cfg, rng, adam)
                buffer.clear()
            if done or nx is None:
                break
            x = nx

        episode += 1
        recent.append(ep_reward)
        recent_rd.append(ep_rd / max(ep_steps, 1))
        recent_ru.append(ep_ru / max(ep_steps, 1))
        row = CurveRow(
            steps=steps_done,
            mean_reward=float(np.mean(recent)),
            r_d_mean=float(np.mean(recent_rd)),
            r_u_mean=float(np.mean(recent_ru)),
        )
        curve.append(row)
        if progress is not None:
            progress(row)
        if row.mean_reward > best_value:
            best_value = row.mean_reward
            best_params = params.copy()
            best_row = len(curve) - 1

    return TrainResult(
        best_params=best_params,
        final_params=params,
        curve=curve,
        best_row=best_row,
        episodes=episode,
        total_steps=steps_done,
    )


# ---------------------------------------------------------------------------
# checkpoint serialization: length-prefixed JSON header + raw float64 blob


def save_checkpoint(params: PolicyParams, path: str | Path, meta: dict | None = None) -> None:
    names = [n for n, _ in params.tensors()]
    header = {
        "format": "policy-checkpoint.v1",
        "dtype": "float64",
        "tensors": {n: list(getattr(params, n).shape) for n in names},
        "order": names,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(getattr(params, n), dtype=np.float64).tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a policy checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    kwargs = {}
    off = 0
    for name in header["order"]:
        shape = tuple(header["tensors"][name])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=np.float64, count=n, offset=off).reshape(shape).copy()
        kwargs[name] = arr
        off += n * 8
    return PolicyParams(**kwargs), header.get("meta", {})
