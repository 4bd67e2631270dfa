"""Map structure, projection (both routes), EMA fusion, and the file format."""

import struct

import numpy as np
import pytest

from eits.perceiver import PerceiverConfig, predict, pretrain
from eits.scene import AgentPose, CameraModel, Observation, SceneGenConfig, default_start_pose, render
from eits.semap import (
    MAP_MAGIC,
    MapConfig,
    SemanticDistributionMap,
    VoxelObservation,
    center_start_pose,
    check_map_invariants,
    fuse,
    init_map,
    load_map,
    map_centered_on,
    project,
    project_view,
    save_map,
)


def one_voxel_obs(idx, dist, count=4):
    return VoxelObservation(
        indices=np.array([idx], dtype=np.int64),
        dists=np.array([dist], dtype=float),
        class_counts=np.array([count], dtype=np.int64),
        hit=np.array([True]),
    )


# ---------------------------------------------------------------------------
# structure


def test_channel_layout():
    m = init_map(6)
    assert m.data.shape == (8, 96, 96, 12)
    assert m.num_classes == 6
    assert m.obstacle.shape == (96, 96, 12)
    assert m.class_channels.shape == (6, 96, 96, 12)
    with pytest.raises(ValueError):
        init_map(1)


def test_world_voxel_roundtrip():
    m = init_map(6, origin=np.array([1.0, -2.0, 0.0]))
    for idx in [(0, 0, 0), (5, 17, 3), (95, 95, 11)]:
        center = m.voxel_center(np.array(idx))
        assert tuple(m.world_to_voxel(center)[0]) == idx


def test_center_start_pose_lands_in_center_voxel():
    m = map_centered_on(AgentPose(3.3, 4.4, 0.0), 6)
    pose = center_start_pose(m)
    L, W, _ = m.dims
    assert tuple(m.world_to_voxel(np.array([pose.x, pose.y, 0.0]))[0]) == (L // 2, W // 2, 0)
    # and the construction pose itself sits in that same voxel
    assert tuple(m.world_to_voxel(np.array([3.3, 4.4, 0.0]))[0]) == (L // 2, W // 2, 0)


# ---------------------------------------------------------------------------
# fusion algebra


def test_first_observation_writes_through():
    m = init_map(6)
    d = np.array([0.5, 0.3, 0.2, 0.0, 0.0, 0.0])
    m2, dev, newly = fuse(m, one_voxel_obs((4, 5, 6), d))
    assert np.array_equal(m2.class_channels[:, 4, 5, 6], d)
    assert m2.explored[4, 5, 6] == 1.0
    assert m2.obstacle[4, 5, 6] == 1.0
    assert newly == 1
    assert dev < 1e-12
    # the input map is untouched without in_place
    assert m.class_channels[:, 4, 5, 6].sum() == 0.0


def test_second_observation_blends_with_lambda():
    m = init_map(4)
    d1 = np.array([1.0, 0.0, 0.0, 0.0])
    d2 = np.array([0.0, 1.0, 0.0, 0.0])
    m, _, _ = fuse(m, one_voxel_obs((1, 1, 1), d1), lam=0.3, in_place=True)
    m, _, newly = fuse(m, one_voxel_obs((1, 1, 1), d2), lam=0.3, in_place=True)
    assert newly == 0
    assert np.allclose(m.class_channels[:, 1, 1, 1], [0.7, 0.3, 0.0, 0.0], atol=1e-15)


def test_repeated_fusion_closes_the_gap_geometrically():
    m = init_map(4)
    d1 = np.array([1.0, 0.0, 0.0, 0.0])
    d2 = np.array([0.0, 0.5, 0.5, 0.0])
    m, _, _ = fuse(m, one_voxel_obs((2, 2, 2), d1), in_place=True)
    gap0 = np.abs(m.class_channels[:, 2, 2, 2] - d2).max()
    for n in range(1, 8):
        m, _, _ = fuse(m, one_voxel_obs((2, 2, 2), d2), in_place=True)
        gap = np.abs(m.class_channels[:, 2, 2, 2] - d2).max()
        assert gap == pytest.approx(gap0 * 0.7**n, abs=1e-13)


def test_structure_only_voxel_gets_no_class_mass():
    m = init_map(6)
    vobs = one_voxel_obs((3, 3, 3), np.zeros(6), count=0)
    m, _, newly = fuse(m, vobs, in_place=True)
    assert newly == 1
    assert m.explored[3, 3, 3] == 1.0
    assert m.class_channels[:, 3, 3, 3].sum() == 0.0


def test_fuse_lambda_validation_and_empty_obs():
    m = init_map(6)
    with pytest.raises(ValueError):
        fuse(m, one_voxel_obs((0, 0, 0), np.ones(6) / 6), lam=1.5)
    empty = VoxelObservation(
        np.empty((0, 3), np.int64), np.empty((0, 6)), np.empty(0, np.int64), np.empty(0, bool)
    )
    m2, dev, newly = fuse(m, empty)
    assert (dev, newly) == (0.0, 0)


def test_explored_never_unexplores():
    m = init_map(4)
    m, _, _ = fuse(m, one_voxel_obs((1, 2, 3), np.array([1.0, 0, 0, 0])), in_place=True)
    m, _, _ = fuse(m, one_voxel_obs((1, 2, 3), np.array([1.0, 0, 0, 0]), count=0), in_place=True)
    assert m.explored[1, 2, 3] == 1.0


# ---------------------------------------------------------------------------
# projection


def hand_observation(depths, instances, dirs, pose):
    H = W = int(np.sqrt(len(depths)))
    return Observation(
        depth=np.array(depths, dtype=float).reshape(H, W),
        instance_ids=np.array(instances, dtype=np.int32).reshape(H, W),
        object_features={},
        object_classes={},
        pose=pose,
        view_seed=0,
        object_pixel_counts=None,
        _dirs_world=np.array(dirs, dtype=float),
    )


def test_project_hand_built_rays():
    # four +x rays at unit resolution: two object pixels land in distinct
    # voxels, one structure pixel, one out of range
    m = SemanticDistributionMap(np.zeros((4, 8, 8, 4)), resolution=1.0, origin=np.zeros(3))
    pose = AgentPose(0.5, 0.5, 0.0)
    east = [1.0, 0.0, 0.0]
    obs = hand_observation(
        depths=[0.2, 1.2, 2.2, np.inf],
        instances=[0, 0, -1, -1],
        dirs=[east, east, east, east],
        pose=pose,
    )
    pix = np.zeros((2, 2, 2))
    pix[0, 0] = [0.9, 0.1]
    pix[0, 1] = [0.4, 0.6]
    camera = CameraModel(width=2, height=2, mount_height=1.0)
    vobs = project(obs, pix, m, camera)

    assert vobs.n_voxels == 3
    assert [tuple(i) for i in vobs.indices] == [(0, 0, 1), (1, 0, 1), (2, 0, 1)]
    assert np.allclose(vobs.dists[0], [0.9, 0.1])
    assert np.allclose(vobs.dists[1], [0.4, 0.6])
    assert vobs.class_counts.tolist() == [1, 1, 0]
    assert np.all(vobs.dists[2] == 0.0)
    assert vobs.hit.all()


def test_project_pools_pixels_sharing_a_voxel():
    m = SemanticDistributionMap(np.zeros((4, 8, 8, 4)), resolution=1.0, origin=np.zeros(3))
    pose = AgentPose(0.5, 0.5, 0.0)
    east = [1.0, 0.0, 0.0]
    obs = hand_observation(
        depths=[0.2, 0.3, 0.2, 0.3],
        instances=[0, 1, 0, -1],
        dirs=[east] * 4,
        pose=pose,
    )
    pix = np.zeros((2, 2, 2))
    pix[0, 0] = [1.0, 0.0]
    pix[0, 1] = [0.0, 1.0]
    pix[1, 0] = [1.0, 0.0]
    vobs = project(obs, pix, m, CameraModel(width=2, height=2))
    assert vobs.n_voxels == 1
    assert vobs.class_counts[0] == 3
    assert np.allclose(vobs.dists[0], [2.0 / 3.0, 1.0 / 3.0])


def test_project_view_matches_pixelwise_route():
    """The pooled fast path and the per-pixel reference must agree exactly."""
    scene_cfg = SceneGenConfig()
    from eits.scene import generate_scene

    scene = generate_scene(5, scene_cfg, "dual")
    params, _ = pretrain(PerceiverConfig(), scene_cfg, seed=3)
    pose = default_start_pose(scene)
    m = map_centered_on(pose, scene.num_classes)
    for theta_steps in range(0, 12, 3):
        p = AgentPose(pose.x, pose.y, theta_steps * np.pi / 6)
        obs = render(scene, p, view_seed=9)
        preds, pix = predict(params, obs, with_pixels=True)
        a = project(obs, pix, m)
        b = project_view(obs, preds, m)
        assert np.array_equal(a.indices, b.indices)
        assert np.array_equal(a.class_counts, b.class_counts)
        assert np.allclose(a.dists, b.dists, atol=1e-12)
        assert np.array_equal(a.hit, b.hit)


def test_projection_mismatched_pixel_image_raises(scene7):
    obs = render(scene7, default_start_pose(scene7))
    m = init_map(6)
    with pytest.raises(ValueError):
        project(obs, np.zeros((2, 2, 6)), m)


# ---------------------------------------------------------------------------
# invariants


def test_invariant_checker_catches_corruption():
    m = init_map(6)
    fuse(m, one_voxel_obs((1, 1, 1), np.full(6, 1.0 / 6.0)), in_place=True)
    check_map_invariants(m)

    bad = m.copy()
    bad.data[2, 1, 1, 1] += 0.5  # class sum off
    with pytest.raises(AssertionError):
        check_map_invariants(bad)

    bad = m.copy()
    bad.data[3, 4, 4, 4] = 0.9  # class mass without the explored flag
    with pytest.raises(AssertionError):
        check_map_invariants(bad)

    bad = m.copy()
    bad.data[0, 0, 0, 0] = -0.2
    with pytest.raises(AssertionError):
        check_map_invariants(bad)


# ---------------------------------------------------------------------------
# serialization


def test_map_roundtrip_and_header_layout(tmp_path):
    m = init_map(6, origin=np.array([-12.0, -12.0, 0.0]))
    rng = np.random.default_rng(2)
    raw = rng.random((6, 5))
    raw /= raw.sum(axis=0)
    for k in range(5):
        fuse(m, one_voxel_obs((k, 2 * k, 1), raw[:, k]), in_place=True)
    path = tmp_path / "m.map"
    save_map(m, path)

    back = load_map(path)
    assert back.dims == m.dims
    assert back.resolution == m.resolution
    assert np.array_equal(back.origin, m.origin)
    # float32 narrowing bounds the loss
    assert np.abs(back.data - m.data).max() < 1e-6

    # documented header layout: magic, version, K, L, W, H, then geometry
    blob = path.read_bytes()
    magic, version, K, L, W, H, res, ox, oy, oz = struct.unpack_from("<4sIIIIIdddd", blob)
    assert magic == MAP_MAGIC
    assert (version, K, L, W, H) == (1, 8, 96, 96, 12)
    assert (res, ox, oy, oz) == (0.25, -12.0, -12.0, 0.0)


def test_map_magic_guard(tmp_path):
    path = tmp_path / "bad.map"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        load_map(path)
