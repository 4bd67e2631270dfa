"""Scene generation, kinematics, rendering, and serialization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eits.scene import (
    Action,
    AgentConfig,
    AgentPose,
    CameraModel,
    SceneGenConfig,
    _draw_class_ids,
    _rle_decode,
    _rle_encode,
    _wrap_angle,
    camera_ray_dirs,
    class_feature_means,
    default_start_pose,
    generate_scene,
    load_scene,
    render,
    save_scene,
    scene_from_dict,
    scene_to_dict,
    step,
    view_jitter,
    viewing_sector,
)

from conftest import empty_room


# ---------------------------------------------------------------------------
# kinematics


def test_turns_are_exact_quanta(room):
    pose = AgentPose(3.0, 3.0, 0.0)
    pose, collided = step(room, pose, Action.TURN_LEFT)
    assert not collided
    assert pose.theta == pytest.approx(math.pi / 6, abs=1e-12)
    assert (pose.x, pose.y) == (3.0, 3.0)
    for _ in range(11):
        pose, _ = step(room, pose, Action.TURN_LEFT)
    assert pose.theta == pytest.approx(0.0, abs=1e-9)  # 12 x 30deg wraps around


def test_forward_moves_one_step_east(room):
    pose = AgentPose(3.0, 3.0, 0.0)
    pose, collided = step(room, pose, Action.FORWARD)
    assert not collided
    assert pose.x == pytest.approx(3.25)
    assert pose.y == pytest.approx(3.0)


def test_forward_into_wall_collides_and_stays(room):
    pose = AgentPose(3.0, 3.0, 0.0)
    for _ in range(40):
        new, collided = step(room, pose, Action.FORWARD)
        if collided:
            assert (new.x, new.y, new.theta) == (pose.x, pose.y, pose.theta)
            break
        pose = new
    else:
        pytest.fail("agent walked through the east wall")
    # the disc footprint keeps the center at least a radius away from the wall
    wall_x = (room.grid_dims[0] - 1) * room.resolution
    assert wall_x - pose.x >= AgentConfig().radius - room.resolution


def test_unknown_action_raises(room):
    with pytest.raises(ValueError):
        step(room, AgentPose(3.0, 3.0, 0.0), 7)


@given(st.floats(-50.0, 50.0, allow_nan=False))
def test_wrap_angle_lands_in_half_open_interval(theta):
    w = _wrap_angle(theta)
    assert -math.pi < w <= math.pi
    # wrapping preserves the angle modulo 2*pi
    assert math.isclose(math.cos(w), math.cos(theta), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(theta), abs_tol=1e-9)


# ---------------------------------------------------------------------------
# appearance model


def test_class_means_geometry():
    cfg = SceneGenConfig()
    means, axes = class_feature_means(cfg)
    assert means.shape == (cfg.num_classes, cfg.feature_dim)
    for k in range(cfg.num_classes // 2):
        near, far = means[2 * k], means[2 * k + 1]
        assert np.linalg.norm(far - near) == pytest.approx(cfg.pair_gap, abs=1e-9)
        assert np.linalg.norm(axes[k]) == pytest.approx(1.0, abs=1e-12)
        # the pair axis is orthogonal to every anchor direction
        anchor = 0.5 * (near + far)
        assert abs(anchor @ axes[k]) < 1e-8
    # anchors are mutually orthogonal with norm class_sep
    anchors = np.array([0.5 * (means[2 * k] + means[2 * k + 1]) for k in range(3)])
    gram = anchors @ anchors.T
    assert np.allclose(np.diag(gram), cfg.class_sep**2, atol=1e-6)
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() < 1e-6


def test_class_means_keyed_only_by_appearance_seed():
    a = class_feature_means(SceneGenConfig())[0]
    b = class_feature_means(SceneGenConfig(n_objects_min=9, stack_prob=0.9))[0]
    c = class_feature_means(SceneGenConfig(appearance_seed=72))[0]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_odd_class_count_rejected():
    with pytest.raises(ValueError):
        class_feature_means(SceneGenConfig(num_classes=5))


def test_view_jitter_deterministic_and_sector_dependent():
    a = view_jitter(123, 4, 2, 16)
    b = view_jitter(123, 4, 2, 16)
    c = view_jitter(123, 4, 3, 16)
    d = view_jitter(124, 4, 2, 16)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_view_jitter_is_roughly_standard_normal():
    draws = np.concatenate(
        [view_jitter(9, obj, s, 64) for obj in range(20) for s in range(8)]
    )
    assert abs(draws.mean()) < 0.05
    assert abs(draws.std() - 1.0) < 0.05


def test_viewing_sector_octants():
    # equal 45-degree bins counterclockwise from east; probe bin centers
    obj = np.array([0.0, 0.0])
    for sector in range(8):
        ang = math.radians(45.0 * sector + 22.5)
        cam = obj + np.array([math.cos(ang), math.sin(ang)])
        assert viewing_sector(obj, cam) == sector


# ---------------------------------------------------------------------------
# generation


def test_generation_is_deterministic():
    a = generate_scene(31, SceneGenConfig(), "s")
    b = generate_scene(31, SceneGenConfig(), "s")
    assert np.array_equal(a.obstacles, b.obstacles)
    assert len(a.objects) == len(b.objects)
    for oa, ob in zip(a.objects, b.objects):
        assert (oa.lo, oa.hi, oa.class_id) == (ob.lo, ob.hi, ob.class_id)
        assert np.array_equal(oa.appearance, ob.appearance)


def test_objects_stay_inside_and_never_overlap(scene7):
    L, W, H = scene7.grid_dims
    boxes = []
    for o in scene7.objects:
        assert 0 < o.lo[0] and o.hi[0] < L
        assert 0 < o.lo[1] and o.hi[1] < W
        assert o.hi[2] <= H
        boxes.append((o.lo, o.hi))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            lo_i, hi_i = boxes[i]
            lo_j, hi_j = boxes[j]
            disjoint = any(hi_i[k] <= lo_j[k] or hi_j[k] <= lo_i[k] for k in range(3))
            assert disjoint, f"objects {i} and {j} share a voxel"


def test_stacked_objects_rest_on_a_support(scene7):
    cfg = SceneGenConfig()
    ground_tops = {o.hi[2] for o in scene7.objects if o.lo[2] == cfg.ground_base_h}
    for o in scene7.objects:
        if o.lo[2] != cfg.ground_base_h:
            assert o.lo[2] in ground_tops, "floating object"


def test_every_class_present_when_objects_suffice():
    rng = np.random.default_rng(0)
    ids = _draw_class_ids(rng, 9, 6)
    assert set(ids[:6]) == set(range(6))
    assert len(ids) == 9


def test_start_pose_is_footprint_valid(scene7):
    pose = default_start_pose(scene7)
    assert pose.theta == 0.0
    assert scene7.footprint_free(pose.x, pose.y, AgentConfig())


# ---------------------------------------------------------------------------
# rendering


def test_camera_rays_are_unit_and_centered():
    cam = CameraModel()
    dirs = camera_ray_dirs(cam)
    assert dirs.shape == (cam.height * cam.width, 3)
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
    # the mean of the two central pixels of the middle rows points forward
    mid = dirs.reshape(cam.height, cam.width, 3)[31:33, 31:33].mean(axis=(0, 1))
    mid /= np.linalg.norm(mid)
    assert mid[0] > 0.999
    # widest horizontal angle stays within the half field of view
    ang = np.degrees(np.abs(np.arctan2(dirs[:, 1], dirs[:, 0])))
    assert ang.max() < cam.hfov_deg / 2


def test_raycast_depth_matches_planar_wall_analytically():
    # a single wall plane at x = 3.0 and nothing else: every ray that reaches
    # it must report depth (3.0 - ox) / dir_x exactly (boundary crossing)
    dims = (20, 20, 10)
    obstacles = np.zeros(dims, dtype=bool)
    obstacles[12, :, :] = True  # wall occupying x in [3.0, 3.25)
    scene = empty_room(dims)
    scene.obstacles[:] = False
    scene.obstacles |= obstacles
    scene._solid = None  # rebuild cached volumes after the edit
    scene._cell_object = None

    pose = AgentPose(1.1, 2.5, 0.0)
    cam = CameraModel(width=32, height=32, max_range=5.0)
    obs = render(scene, pose, cam)
    dirs = obs._dirs_world.reshape(32, 32, 3)
    for i in (0, 8, 16, 24, 31):
        d = dirs[16, i]
        expected = (3.0 - pose.x) / d[0]
        if expected <= cam.max_range:
            assert obs.depth[16, i] == pytest.approx(expected, abs=1e-9)
            assert obs.instance_ids[16, i] == -1  # structure, not an object


def test_render_is_bit_identical_per_pose(scene7):
    pose = default_start_pose(scene7)
    a = render(scene7, pose, view_seed=5)
    b = render(scene7, pose, view_seed=5)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.instance_ids, b.instance_ids)
    assert a.visible_object_ids == b.visible_object_ids
    for oid in a.visible_object_ids:
        assert np.array_equal(a.object_features[oid], b.object_features[oid])


def test_feature_is_appearance_plus_octant_jitter(scene7):
    pose = default_start_pose(scene7)
    obs = render(scene7, pose, view_seed=41)
    assert obs.visible_object_ids, "start view sees nothing; scene unusable"
    for oid in obs.visible_object_ids:
        obj = scene7.objects[oid]
        sector = viewing_sector(
            obj.center_world(scene7.resolution)[:2], np.array([pose.x, pose.y])
        )
        want = obj.appearance + obj.view_jitter_scale * view_jitter(
            41, oid, sector, scene7.feature_dim
        )
        assert np.array_equal(obs.object_features[oid], want)


def test_pixel_counts_match_instance_image(scene7):
    obs = render(scene7, default_start_pose(scene7))
    for oid, n in obs.object_pixel_counts.items():
        assert n == int((obs.instance_ids == oid).sum())


# ---------------------------------------------------------------------------
# serialization


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=300))
def test_rle_roundtrip(bits):
    arr = np.array(bits, dtype=bool)
    runs = _rle_encode(arr)
    assert np.array_equal(_rle_decode(runs, arr.size), arr)


def test_rle_edge_cases():
    assert _rle_encode(np.zeros(5, dtype=bool)) == [5]
    assert _rle_encode(np.ones(5, dtype=bool)) == [0, 5]
    assert _rle_encode(np.array([], dtype=bool)) == []
    with pytest.raises(ValueError):
        _rle_decode([3], 5)


def test_scene_dict_roundtrip(scene7):
    back = scene_from_dict(scene_to_dict(scene7))
    assert np.array_equal(back.obstacles, scene7.obstacles)
    assert np.array_equal(back.solid, scene7.solid)
    assert back.scene_id == scene7.scene_id
    for a, b in zip(back.objects, scene7.objects):
        assert (a.lo, a.hi, a.class_id, a.object_id) == (b.lo, b.hi, b.class_id, b.object_id)
        assert np.array_equal(a.appearance, b.appearance)


def test_scene_file_roundtrip(tmp_path, scene7):
    path = tmp_path / "scene.json"
    save_scene(scene7, path)
    back = load_scene(path)
    assert np.array_equal(back.obstacles, scene7.obstacles)


def test_scene_format_guard():
    with pytest.raises(ValueError, match="format"):
        scene_from_dict({"format": "nope"})
