import dataclasses
import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from config import CAMERA_HEIGHT_ABOVE_FLOOR, SCENE_MAX_PILE_HEIGHT
from errors import ConfigurationError, DataError
from graspability_graph import load_object_pool_config
from nodes.geometry import project
from nodes.scene_synth import SceneDescription, SceneObject, ShapePrimitive, add_depth_noise, render, sample_scene

TETRAHEDRON_VERTICES = [[0, 0, 0], [0.04, 0, 0], [0, 0.04, 0], [0, 0, 0.04]]
TETRAHEDRON_FACES = [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]


@pytest.fixture(scope="module")
def pool():
    return load_object_pool_config()


def test_sampling_is_deterministic_in_seed(pool):
    first = sample_scene(11, pool)
    second = sample_scene(11, pool)
    other = sample_scene(12, pool)
    assert first.to_json() == second.to_json()
    assert first.to_json() != other.to_json()


@pytest.mark.parametrize("seed", range(10))
def test_sampled_objects_stay_inside_the_bin(pool, seed):
    scene = sample_scene(seed, pool)
    lo_bound, hi_bound = scene.bin.interior_bounds()
    assert 5 <= len(scene.objects) + len(scene.warnings) <= 10
    assert [obj.label for obj in scene.objects] == list(range(1, len(scene.objects) + 1))
    for obj in scene.objects:
        lo, hi = obj.aabb()
        assert np.all(lo[:2] >= lo_bound - 1e-9) and np.all(hi[:2] <= hi_bound + 1e-9)
        assert lo[2] >= scene.bin.floor_z - 1e-9
        assert hi[2] - scene.bin.floor_z <= SCENE_MAX_PILE_HEIGHT + 1e-9


def test_empty_pool_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        sample_scene(0, [])


def test_scene_json_round_trip(pool):
    scene = sample_scene(5, pool)
    restored = SceneDescription.from_dict(json.loads(scene.to_json()))
    assert restored.to_json() == scene.to_json()


def test_render_centered_box(centered_box_scene):
    depth, segmentation = render(centered_box_scene)
    # Box top is 6 cm above the floor, straight below the camera
    assert depth.data[128, 128] == pytest.approx(CAMERA_HEIGHT_ABOVE_FLOOR - 0.06, abs=1e-9)
    assert segmentation.labels[128, 128] == 1
    # Floor in the corner of the view
    assert depth.data[3, 3] == pytest.approx(CAMERA_HEIGHT_ABOVE_FLOOR, abs=1e-9)
    assert segmentation.labels[3, 3] == 0
    assert segmentation.labels.dtype == np.uint16


def test_render_box_footprint_matches_projection(centered_box_scene):
    _, segmentation = render(centered_box_scene)
    rows, cols = np.nonzero(segmentation.labels == 1)
    # 10 x 8 cm top at 0.69 m with f = 500 px: about 72 x 58 px (camera y is world -y)
    assert abs((cols.max() - cols.min() + 1) - 0.10 * 500 / 0.69) <= 2
    assert abs((rows.max() - rows.min() + 1) - 0.08 * 500 / 0.69) <= 2


def test_render_sphere_and_cylinder(make_scene):
    scene = make_scene((ShapePrimitive.sphere(0.03), None, (-0.08, 0.0)),
                       (ShapePrimitive.cylinder(0.025, 0.07), None, (0.08, 0.0)))
    depth, segmentation = render(scene)
    for obj, top in ((scene.objects[0], 0.06), (scene.objects[1], 0.07)):
        centre_top = obj.translation.copy()
        centre_top[2] = scene.bin.floor_z + top
        u, v = project(scene.camera_pose.to_camera(centre_top[None]), scene.intrinsics)[0]
        row, col = int(round(v)), int(round(u))
        assert segmentation.labels[row, col] == obj.label
        assert depth.data[row, col] == pytest.approx(CAMERA_HEIGHT_ABOVE_FLOOR - top, abs=2e-4)


def test_render_mesh_matches_its_bounds(make_scene):
    mesh = ShapePrimitive.mesh(TETRAHEDRON_VERTICES, TETRAHEDRON_FACES)
    depth, segmentation = render(make_scene((mesh,)))
    on_mesh = segmentation.labels == 1
    assert on_mesh.any()
    assert depth.data[on_mesh].min() >= CAMERA_HEIGHT_ABOVE_FLOOR - 0.04 - 1e-9


def test_mesh_validation():
    with pytest.raises(ConfigurationError):
        ShapePrimitive.mesh(TETRAHEDRON_VERTICES, TETRAHEDRON_FACES[:3])
    flipped = [face[::-1] for face in TETRAHEDRON_FACES]
    with pytest.raises(ConfigurationError):
        ShapePrimitive.mesh(TETRAHEDRON_VERTICES, flipped)


def test_rotated_bounds_are_tight_for_boxes():
    box = ShapePrimitive.box(0.1, 0.04, 0.02)
    rotation = Rotation.from_rotvec([0.3, -0.5, 1.1]).as_matrix()
    lo, hi = box.rotated_bounds(rotation)
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * [0.05, 0.02, 0.01]
    rotated = corners @ rotation.T
    np.testing.assert_allclose(lo, rotated.min(axis=0), atol=1e-12)
    np.testing.assert_allclose(hi, rotated.max(axis=0), atol=1e-12)


def test_depth_noise(centered_box_scene):
    depth, _ = render(centered_box_scene)
    np.testing.assert_array_equal(add_depth_noise(depth, 0.0, 1).data, depth.data)
    noisy = add_depth_noise(depth, 0.001, 7)
    np.testing.assert_array_equal(noisy.data, add_depth_noise(depth, 0.001, 7).data)
    assert np.std(noisy.data - depth.data) == pytest.approx(0.001, rel=0.1)
    with pytest.raises(DataError):
        add_depth_noise(depth, -1.0, 0)


def test_depth_noise_sigma_over_a_full_image(centered_box_scene):
    depth, _ = render(centered_box_scene)
    for sigma, seed in ((0.0005, 1), (0.002, 2)):
        residual = add_depth_noise(depth, sigma, seed).data - depth.data
        assert residual.size == 256 * 256
        assert np.std(residual) == pytest.approx(sigma, rel=0.1)
        assert abs(np.mean(residual)) < 0.1 * sigma


def _horizontal_overlap(a, b, margin=1e-6):
    (lo_a, hi_a), (lo_b, hi_b) = a.aabb(), b.aabb()
    return bool(np.all(np.minimum(hi_a[:2], hi_b[:2]) - np.maximum(lo_a[:2], lo_b[:2]) > margin))


@pytest.mark.parametrize("seed", range(8))
def test_full_scenes_do_not_interpenetrate(pool, seed):
    scene = sample_scene(seed, pool, count_range=(10, 10))
    assert len(scene.objects) + len(scene.warnings) == 10
    for j, upper in enumerate(scene.objects):
        for lower in scene.objects[:j]:
            if _horizontal_overlap(lower, upper):
                # A later object rests on top of everything below its footprint
                assert upper.aabb()[0][2] >= lower.aabb()[1][2] - 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_single_box_rests_exactly_on_the_floor(seed, bin_spec):
    scene = sample_scene(seed, [ShapePrimitive.box(0.09, 0.07, 0.05)], count_range=(1, 1))
    obj, = scene.objects
    assert obj.aabb()[0][2] == pytest.approx(bin_spec.floor_z, abs=1e-12)


def test_stacked_box_occludes_the_box_below(bin_spec, intrinsics):
    base = ShapePrimitive.box(0.12, 0.12, 0.04)
    top = ShapePrimitive.box(0.06, 0.06, 0.03)
    centre = np.array([bin_spec.center[0], bin_spec.center[1], bin_spec.floor_z])
    objects = [SceneObject(shape=base, rotation=np.eye(3), translation=centre + [0.0, 0.0, 0.02], label=1),
               SceneObject(shape=top, rotation=np.eye(3), translation=centre + [0.0, 0.0, 0.055], label=2)]
    scene = SceneDescription(bin=bin_spec, objects=objects, seed=None, intrinsics=intrinsics,
                             camera_pose=bin_spec.camera_pose())
    depth, segmentation = render(scene)

    assert segmentation.labels[128, 128] == 2
    assert depth.data[128, 128] == pytest.approx(CAMERA_HEIGHT_ABOVE_FLOOR - 0.07, abs=1e-9)
    # 32 px off centre: inside the lower top face, outside the upper one
    for row, col in ((128, 160), (128, 96), (160, 128), (96, 128)):
        assert segmentation.labels[row, col] == 1
        assert depth.data[row, col] == pytest.approx(CAMERA_HEIGHT_ABOVE_FLOOR - 0.04, abs=1e-9)

    alone = dataclasses.replace(scene, objects=objects[:1])
    _, lower_only = render(alone)
    # Every pixel of the upper box covers part of the lower one
    assert np.all(lower_only.labels[segmentation.labels == 2] == 1)


@pytest.mark.parametrize("seed", range(3))
def test_adding_objects_never_increases_depth(pool, seed):
    scene = sample_scene(seed, pool, count_range=(10, 10))
    previous, _ = render(dataclasses.replace(scene, objects=[]))
    for count in range(1, len(scene.objects) + 1):
        current, _ = render(dataclasses.replace(scene, objects=scene.objects[:count]))
        assert np.all(current.data <= previous.data + 1e-12)
        previous = current
