"""
Projecting views into the semantic distribution map
===================================================

Drives the agent through a scripted sweep of headings from a few standing
points, pushes every frame through perceiver -> projection -> EMA fusion,
and watches the map fill in.  Two things to notice in the output:

  - explored voxel count only ever grows (fusion never forgets territory),
  - repeated fusions of the same view converge geometrically: the gap to
    the observed distribution shrinks by x0.7 each time.
"""

import numpy as np

from eits import semap as sm
from eits.perceiver import PerceiverConfig, predict, pretrain
from eits.scene import AgentPose, CameraModel, SceneGenConfig, generate_scene, render

scene_cfg = SceneGenConfig()
scene = generate_scene(seed=3, cfg=scene_cfg, scene_id="mapdemo")
params, _ = pretrain(PerceiverConfig(), scene_cfg, seed=3)
camera = CameraModel()

map_cfg = sm.MapConfig(length=scene.grid_dims[0], width=scene.grid_dims[1],
                       height=scene.grid_dims[2])
m = sm.init_map(scene_cfg.num_classes, map_cfg)
res = scene.resolution
L, W, _ = scene.grid_dims

stand_points = [(0.3, 0.3), (0.7, 0.3), (0.5, 0.7)]
frames = 0
for fx, fy in stand_points:
    pose_xy = (fx * L * res, fy * W * res)
    for k in range(12):  # full turn in 30 degree steps
        pose = AgentPose(pose_xy[0], pose_xy[1], theta=k * np.pi / 6)
        obs = render(scene, pose, camera, view_seed=scene.seed)
        preds, _ = predict(params, obs, with_pixels=False)
        vox = sm.project_view(obs, preds, m, camera)
        m, worst_dev, newly = sm.fuse(m, vox)
        frames += 1
    explored = int((m.explored > 0).sum())
    print(f"after {frames:2d} frames: {explored:5d} explored voxels, "
          f"worst class-sum deviation {worst_dev:.2e}")

# top-down argmax view: which class dominates each column
class_mass = m.class_channels.max(axis=3)          # (C, L, W) strongest along z
col_class = class_mass.argmax(axis=0)
col_has = class_mass.max(axis=0) > 0
print("\ntop-down dominant class per column ('.' = nothing mapped):")
for j in range(0, W, 2):
    print("".join(
        str(col_class[i, j]) if col_has[i, j] else "." for i in range(0, L, 2)
    ))

# fusion convergence on one voxel, the 0.7^n contraction
target = np.argwhere(m.class_channels.sum(axis=0) > 0)[0]
i, j, k = (int(v) for v in target)
observed = np.zeros(scene_cfg.num_classes)
observed[0] = 1.0
gap0 = np.abs(m.class_channels[:, i, j, k] - observed).max()
single = sm.VoxelObservation(
    indices=np.array([[i, j, k]]),
    dists=observed[None, :],
    class_counts=np.array([25]),
    hit=np.array([True]),
)
print()
for n in range(1, 6):
    m, _, _ = sm.fuse(m, single)
    gap = np.abs(m.class_channels[:, i, j, k] - observed).max()
    print(f"fusion {n}: gap {gap:.6f}  (geometric prediction {gap0 * 0.7 ** n:.6f})")
