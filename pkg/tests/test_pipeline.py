import time

import numpy as np
import pytest

from config import ANALYSIS_PIPELINE_NAME, VERSION
from errors import ConfigurationError, DataError, StageError, EXIT_DATA_ERROR
from graspability_graph import (GraspabilityState, StageReporter, after_backproject, after_quality, annotate_scene,
                                build_pipeline_config, create_graspability_graph, needs_reachability,
                                load_object_pool_config, resolve_config_path, run_pipeline)
from nodes.geometry import CameraIntrinsics, CameraPose, DepthImage
from nodes.scene_synth import BinSpec, SceneDescription, SceneObject, ShapePrimitive, render, sample_scene

STAGES = ["backproject", "segmentation", "graspable_area", "grasp_quality", "ranking"]


def _quality_only(**overrides):
    return build_pipeline_config(policy='quality-only', compute_reachability=False, **overrides)


def _box_scene():
    bin_spec = BinSpec.default()
    box = ShapePrimitive.box(0.10, 0.08, 0.06)
    translation = np.array([bin_spec.center[0], bin_spec.center[1], bin_spec.floor_z + 0.03])
    return SceneDescription(bin=bin_spec, objects=[SceneObject(shape=box, rotation=np.eye(3),
                                                               translation=translation, label=1)],
                            seed=None, intrinsics=CameraIntrinsics.default(), camera_pose=bin_spec.camera_pose())


@pytest.fixture(scope="module")
def box_run():
    return annotate_scene(_box_scene(), cfg=_quality_only())


def test_graph_compiles():
    graph = create_graspability_graph()
    nodes = set(graph.get_graph().nodes)
    assert {"backproject_scene", "segment_surfaces", "detect_graspable_areas", "evaluate_grasp_quality",
            "evaluate_reachability", "rank_candidates", "generate_report", "finalize_output"} <= nodes


def test_centered_box_top_candidate_near_area_centroid(box_run):
    _, segmentation, result = box_run
    assert result.report['status'] == 'ok'
    assert len(result.candidates) == 1

    best = result.candidates[0]
    rows, cols = np.nonzero(result.area_map.mask)
    assert abs(best.pixel[0] - rows.mean()) <= 3 and abs(best.pixel[1] - cols.mean()) <= 3
    assert segmentation.labels[best.pixel] == 1
    assert best.quality > 0.9
    # Top face points straight up in the world frame
    np.testing.assert_allclose(best.n, [0.0, 0.0, 1.0], atol=0.02)
    assert best.p[2] == pytest.approx(-0.35 + 0.06, abs=0.002)


def test_box_heatmap_and_report(box_run):
    _, _, result = box_run
    values = result.quality.values
    assert values.min() >= 0.0 and values.max() <= 1.0
    np.testing.assert_array_equal(values[~result.area_map.mask], 0.0)
    assert result.reachability is None

    report = result.report
    assert report['counts']['objects'] == 1
    assert report['counts']['graspable_pixels'] == result.area_map.pixel_count > 0
    assert report['policy']['name'] == 'quality-only'
    assert report['heatmaps']['reachability'] is None
    assert set(STAGES) <= set(report['timings'])
    assert report['metadata']['pipeline'] == ANALYSIS_PIPELINE_NAME
    assert report['metadata']['version'] == VERSION
    assert report['metadata']['failed_stage'] is None


def test_empty_bin_yields_no_candidates():
    scene = _box_scene()
    scene.objects = []
    depth, segmentation, result = annotate_scene(scene)
    assert not segmentation.labels.any()
    assert result.candidates == []
    assert result.report['status'] == 'ok'
    assert not result.quality.values.any()
    assert not result.reachability.values.any()
    assert result.area_map.pixel_count == 0


def test_box_top_outscores_cylinder_side(make_scene):
    lying = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    scene = make_scene((ShapePrimitive.box(0.10, 0.08, 0.06), None, (-0.09, 0.0)),
                       (ShapePrimitive.cylinder(0.035, 0.10), lying, (0.09, 0.0)))
    _, segmentation, result = annotate_scene(scene, cfg=_quality_only())

    graspable = result.area_map.mask
    box = graspable & (segmentation.labels == 1)
    cylinder = graspable & (segmentation.labels == 2)
    assert box.any() and cylinder.any()
    assert result.quality.values[box].mean() > result.quality.values[cylinder].mean()


def test_without_segmentation_all_valid_pixels_form_one_object():
    depth, segmentation = render(_box_scene())
    # Blank out the bin so only the box survives as valid depth
    box_only = DepthImage(data=np.where(segmentation.labels > 0, depth.data, 0.0), intrinsics=depth.intrinsics)
    result = run_pipeline(box_only, None, cfg=_quality_only(), camera_pose=_box_scene().camera_pose)
    assert result.report['counts']['objects'] == 1
    assert result.report['status'] == 'ok'
    assert len(result.candidates) == 1


@pytest.mark.slow
def test_joint_policy_candidates_are_reachable(robot):
    cfg = build_pipeline_config(stride=8, ik_restarts=2)
    _, _, result = annotate_scene(_box_scene(), cfg=cfg, robot=robot)
    assert result.report['policy']['name'] == 'quality-and-reachability'
    assert result.candidates
    for candidate in result.candidates:
        assert candidate.reachability > 0.3
        assert candidate.quality > 0.5
    scaled = result.reachability.values * 72
    np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-6)


@pytest.mark.benchmark
def test_ten_object_scene_annotates_within_a_minute(robot):
    scene = sample_scene(5, load_object_pool_config(), count_range=(10, 10))
    started = time.perf_counter()
    _, _, result = annotate_scene(scene, cfg=build_pipeline_config(stride=2), robot=robot)
    elapsed = time.perf_counter() - started
    assert result.report['status'] == 'ok'
    assert result.reachability is not None
    assert elapsed < 60.0, f"annotation took {elapsed:.1f} s"


def test_stage_failure_raises_stage_error():
    depth, segmentation = render(_box_scene())
    cfg = _quality_only(flatness_mode='quadratic')
    with pytest.raises(StageError) as info:
        run_pipeline(depth, segmentation, cfg=cfg)
    assert info.value.stage == 'grasp_quality'
    assert isinstance(info.value.cause, DataError)
    assert info.value.exit_code == EXIT_DATA_ERROR


def test_stage_failure_is_reported_without_raising():
    depth, segmentation = render(_box_scene())
    result = run_pipeline(depth, segmentation, cfg=_quality_only(flatness_mode='quadratic'), raise_on_error=False)
    assert result.report['status'] == 'error'
    assert result.report['metadata']['failed_stage'] == 'grasp_quality'
    assert result.errors and result.errors[0].startswith('grasp_quality:')
    assert result.candidates == []


def test_mismatched_segmentation_fails_in_backproject():
    depth, segmentation = render(_box_scene())
    cropped = DepthImage(data=depth.data[:100], intrinsics=CameraIntrinsics(fx=500.0, fy=500.0, cx=128.0, cy=50.0,
                                                                            width=256, height=100))
    with pytest.raises(StageError) as info:
        run_pipeline(cropped, segmentation, cfg=_quality_only())
    assert info.value.stage == 'backproject'


def test_routing():
    state = GraspabilityState(config=_quality_only(), log_enabled=False, errors=[], object_clouds={})
    assert after_backproject(state) == 'generate_report'
    state.object_clouds = {1: object()}
    assert after_backproject(state) == 'segment_surfaces'
    assert after_quality(state) == 'rank_candidates'
    state.config = build_pipeline_config(policy='quality-and-reachability', compute_reachability=False)
    assert after_quality(state) == 'evaluate_reachability'
    state.errors = ['segmentation: boom']
    assert after_backproject(state) == 'finalize_output'
    assert after_quality(state) == 'finalize_output'


def test_needs_reachability():
    assert needs_reachability(build_pipeline_config())
    assert not needs_reachability(_quality_only())
    assert needs_reachability(build_pipeline_config(policy='quality-only'))


def test_build_pipeline_config():
    cfg = build_pipeline_config(stride=4, th_g=None)
    assert cfg['stride'] == 4
    assert cfg['th_g'] == 0.5
    cfg['region_grow']['k'] = 5
    assert build_pipeline_config()['region_grow']['k'] == 30
    with pytest.raises(ConfigurationError):
        build_pipeline_config(strides=4)


def test_resolve_config_path(tmp_path, monkeypatch):
    with pytest.raises(ConfigurationError):
        resolve_config_path('robot.json', str(tmp_path / 'missing.json'))

    monkeypatch.setenv('GRASPABILITY_CONFIG_DIR', str(tmp_path))
    assert resolve_config_path('robot.json').endswith('sample_data/robot.json')
    (tmp_path / 'robot.json').write_text('{}')
    assert resolve_config_path('robot.json') == str(tmp_path / 'robot.json')


def test_state_records_progress_and_failures():
    state = GraspabilityState(log_enabled=False)
    state.record_timing('backproject', 0.12345678)
    assert state.timings == {'backproject': 0.123457}
    state.fail('ranking', ValueError('bad mask'))
    assert state.failed_stage == 'ranking'
    assert state.errors == ['ranking: bad mask']
    assert isinstance(state.camera_pose, CameraPose)


def test_stage_reporter_writes_indented_details_only(capsys):
    state = GraspabilityState(log_enabled=True)
    reporter = state.stage_reporter()
    assert isinstance(reporter, StageReporter)
    reporter.detail("Object 1: 4176 points")
    assert state.logs == ["Object 1: 4176 points"]
    assert capsys.readouterr().out == "    Object 1: 4176 points\n"
    assert not state.errors
    assert not hasattr(reporter, 'add_error')
