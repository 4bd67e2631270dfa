"""
Training the goal policy with PPO
=================================

A short on-policy run: the actor-critic looks at five pooled map planes,
picks one of 256 coarse goal cells every 25 local steps, and is paid the
disagreement + uncertainty reward accumulated over the window.  A few
thousand steps are nowhere near convergence; the point is to watch the
plumbing work end to end: rollouts fill, updates apply, the curve file
protocol (moving average + best checkpoint) behaves.
"""

import numpy as np

from eits.episode import ExplorationEnv
from eits.loop import ExperimentConfig, build_scene_pools, derive_seed
from eits.perceiver import pretrain
from eits.policy import PPOConfig, forward, train_exploration

cfg = ExperimentConfig(train_scenes=3, test_scenes=1, seed=5)
train_pool, _ = build_scene_pools(cfg)
perceiver, _ = pretrain(cfg.perceiver, cfg.scene, seed=derive_seed(cfg.seed, 0x9E7))


def env_factory(episode):
    scene = train_pool[episode % len(train_pool)]
    return ExplorationEnv(
        scene, perceiver, seed=derive_seed(cfg.seed, 0xDE30, episode),
        reward_kind="sdd_sdu", record=False, map_cfg=cfg.map, reward_cfg=cfg.reward,
        planner_cfg=cfg.planner, agent=cfg.agent, camera=cfg.camera,
        net_cfg=cfg.net, ppo_cfg=cfg.ppo,
    )


ppo = PPOConfig(total_steps=4000)
rows = []
res = train_exploration(env_factory, cfg=ppo, net_cfg=cfg.net, seed=cfg.seed,
                        progress=lambda r: rows.append(r))

print(f"{res.episodes} episodes, {res.total_steps} env steps")
print("episode  steps  mean_reward  r_d_mean  r_u_mean")
for i, r in enumerate(rows):
    tag = "  <- best checkpoint" if i == res.best_row else ""
    print(f"{i + 1:7d}  {r.steps:5d}  {r.mean_reward:11.4f}  "
          f"{r.r_d_mean:.6f}  {r.r_u_mean:.6f}{tag}")

# the two checkpoints really are different parameter vectors
x = env_factory(0).reset()
lb, vb, _ = forward(res.best_params, x)
lf, vf, _ = forward(res.final_params, x)
print(f"\nbest vs final policy on one input: "
      f"max logit gap {float(np.abs(lb - lf).max()):.2e}, "
      f"value gap {abs(float(vb) - float(vf)):.2e}")
