import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from config import (LOG_LEVEL_ENV_VAR, DEFAULT_LOG_LEVEL, POLICY_CLI_CHOICES, POLICY_QUALITY_AND_REACHABILITY,
                    POLICY_DEFAULTS, REACHABILITY_STRIDE, IK_SEED, DATASET_WORKERS, SCENE_DEFAULT_COUNT_RANGE,
                    DEPTH_NOISE_SIGMA, TOPK_GT_THRESHOLD, TOPK_MODE, TOPK_MODES, SCENE_RECORD_FILES)
from errors import UsageError, EXIT_SUCCESS, exit_code_for
from graspability_graph import (build_pipeline_config, load_robot, load_world, load_object_pool_config, run_pipeline)
from nodes.collision import CollisionWorld
from nodes.dataset import DatasetConfig, generate_dataset
from nodes.dataset_io import read_json, read_pfm, read_pgm, read_sidecar, write_pfm
from nodes.evaluation import topk_precision
from nodes.geometry import CameraIntrinsics, DepthImage, SegmentationMask
from nodes.grasp_quality import HeatMap
from nodes.proposal_ranking import (PolicyConfig, GraspCandidate, threshold, label_components, rank,
                                    rank_without_clustering)
from nodes.scene_synth import BinSpec, SceneDescription
from nodes.visualization import render_heatmap, render_depth, render_segmentation, write_graspable_area_pgm

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)


class CliArgumentParser(argparse.ArgumentParser):
    """Usage errors raise instead of exiting with argparse's status 2."""

    def error(self, message):
        raise UsageError(message)


# =============================================================================
# Input helpers
# =============================================================================

def load_depth(path):
    sidecar = read_sidecar(path) or {}
    intrinsics = sidecar.get('intrinsics')
    intrinsics = CameraIntrinsics.from_dict(intrinsics) if intrinsics else CameraIntrinsics.default()
    return DepthImage(data=read_pfm(path).astype('float64'), intrinsics=intrinsics)


def load_heatmap(path):
    return HeatMap(values=read_pfm(path).astype('float64'))


def scene_context(args):
    """Camera pose and collision world: from --scene when given, otherwise the default bin."""
    world_extra = CollisionWorld.load(args.world) if getattr(args, 'world', None) else None
    if getattr(args, 'scene', None):
        scene = SceneDescription.from_dict(read_json(args.scene))
        return scene.camera_pose, CollisionWorld.from_scene(scene, extra=world_extra)
    bin_spec = BinSpec.default()
    return bin_spec.camera_pose(), load_world(args.world, bin_spec)


def pipeline_config(args, **extra):
    policy = PolicyConfig.policy_name(args.policy) if getattr(args, 'policy', None) else None
    return build_pipeline_config(policy=policy, th_g=getattr(args, 'th_g', None), th_r=getattr(args, 'th_r', None),
                                 stride=args.stride, ik_seed=args.seed, **extra)


def emit_json(document):
    json.dump(document, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# =============================================================================
# Subcommands
# =============================================================================

def cmd_synth(args):
    config = DatasetConfig(object_pool=load_object_pool_config(args.pool), robot=load_robot(args.robot),
                           pipeline=build_pipeline_config(stride=args.stride, ik_seed=IK_SEED),
                           world_extra=CollisionWorld.load(args.world) if args.world else None,
                           count_range=(args.min_objects, args.max_objects), noise_sigma=args.noise)
    manifest = generate_dataset(config, args.n, args.seed, args.out, workers=args.workers)
    print(f"Wrote {len(manifest['scenes'])} scenes to {args.out} ({len(manifest['failures'])} failed)")
    return EXIT_SUCCESS


def cmd_annotate(args):
    depth = load_depth(args.depth)
    segmentation = SegmentationMask(labels=read_pgm(args.seg)) if args.seg else None
    camera_pose, world = scene_context(args)
    cfg = pipeline_config(args, compute_reachability=True)
    result = run_pipeline(depth, segmentation, cfg=cfg, camera_pose=camera_pose, robot=load_robot(args.robot),
                          world=world)

    os.makedirs(args.out, exist_ok=True)
    meta = {'intrinsics': depth.intrinsics.to_dict(), 'range': [0.0, 1.0]}
    write_pfm(os.path.join(args.out, SCENE_RECORD_FILES['quality']), result.quality.values,
              sidecar={**meta, 'units': 'grasp quality'})
    write_pfm(os.path.join(args.out, SCENE_RECORD_FILES['reachability']), result.reachability.values,
              sidecar={**meta, 'units': 'reachability'})
    write_graspable_area_pgm(result.area_map, os.path.join(args.out, 'graspable.pgm'), depth.intrinsics.to_dict())
    print(f"Annotated {args.depth}: {result.report['counts'].get('graspable_pixels', 0)} graspable pixels -> {args.out}")
    return EXIT_SUCCESS


def cmd_propose(args):
    if args.depth:
        depth = load_depth(args.depth)
        segmentation = SegmentationMask(labels=read_pgm(args.seg)) if args.seg else None
        camera_pose, world = scene_context(args)
        cfg = pipeline_config(args, cluster=not args.no_cluster,
                              compute_reachability=PolicyConfig.policy_name(args.policy) == POLICY_QUALITY_AND_REACHABILITY)
        robot = load_robot(args.robot) if cfg['compute_reachability'] else None
        result = run_pipeline(depth, segmentation, cfg=cfg, camera_pose=camera_pose, robot=robot, world=world)
        emit_json(result.report)
        return EXIT_SUCCESS

    if not args.quality:
        raise UsageError("propose needs --depth (end to end) or --quality (from heatmaps)")
    policy = PolicyConfig(policy=PolicyConfig.policy_name(args.policy),
                          th_g=POLICY_DEFAULTS['th_g'] if args.th_g is None else args.th_g,
                          th_r=POLICY_DEFAULTS['th_r'] if args.th_r is None else args.th_r)
    quality = load_heatmap(args.quality)
    reachability = load_heatmap(args.reachability) if args.reachability else None
    candidates = propose_from_heatmaps(quality, reachability, policy, cluster=not args.no_cluster)
    emit_json({'policy': policy.policy, 'th_g': policy.th_g, 'th_r': policy.th_r,
               'candidates': [candidate.to_dict() for candidate in candidates]})
    return EXIT_SUCCESS


def propose_from_heatmaps(quality, reachability, policy, cluster=True):
    mask = threshold(quality, reachability, policy)
    if not cluster:
        return rank_without_clustering(mask, quality, reachability)
    labels, _ = label_components(mask, policy.connectivity)
    return rank(labels, quality, reachability)


def cmd_eval(args):
    report = topk_precision(load_heatmap(args.pred), load_heatmap(args.gt), gt_threshold=args.gt_threshold,
                            mode=args.mode)
    emit_json(report.to_dict())
    return EXIT_SUCCESS


def cmd_viz(args):
    kind = args.kind
    if kind == 'segmentation':
        render_segmentation(read_pgm(args.input), args.out, title=args.title)
    elif kind == 'depth':
        render_depth(read_pfm(args.input), args.out, title=args.title)
    else:
        candidates = None
        if args.candidates:
            candidates = [GraspCandidate(pixel=tuple(entry['pixel']), p=None, n=None, quality=entry['quality'],
                                         reachability=entry.get('reachability'), cluster_id=entry['cluster_id'],
                                         global_rank=entry['rank'])
                          for entry in read_json(args.candidates)['candidates']]
        render_heatmap(read_pfm(args.input), args.out, title=args.title, candidates=candidates)
    print(f"Rendered {args.input} -> {args.out}")
    return EXIT_SUCCESS


# =============================================================================
# Argument parsing
# =============================================================================

def _add_pipeline_flags(parser, policy=True):
    parser.add_argument('--seed', type=int, default=IK_SEED, help='IK restart seed')
    parser.add_argument('--stride', type=int, default=REACHABILITY_STRIDE, help='reachability evaluation stride')
    parser.add_argument('--robot', help='robot JSON (default: $GRASPABILITY_CONFIG_DIR or sample_data)')
    parser.add_argument('--world', help='extra collision world JSON')
    parser.add_argument('--scene', help='scene JSON supplying the camera pose and obstacles')
    if policy:
        parser.add_argument('--policy', type=int, choices=sorted(POLICY_CLI_CHOICES), default=1)
        parser.add_argument('--th-g', dest='th_g', type=float, default=None)
        parser.add_argument('--th-r', dest='th_r', type=float, default=None)


def build_parser():
    parser = CliArgumentParser(prog='graspability', description='Suction graspability annotation and grasp proposal')
    subparsers = parser.add_subparsers(dest='command', parser_class=CliArgumentParser)
    subparsers.required = True

    synth = subparsers.add_parser('synth', help='generate an annotated synthetic dataset')
    synth.add_argument('--out', required=True)
    synth.add_argument('--n', type=int, default=1, help='number of scenes')
    synth.add_argument('--seed', type=int, default=0)
    synth.add_argument('--workers', type=int, default=DATASET_WORKERS)
    synth.add_argument('--stride', type=int, default=REACHABILITY_STRIDE)
    synth.add_argument('--robot')
    synth.add_argument('--world')
    synth.add_argument('--pool', help='object pool JSON')
    synth.add_argument('--min-objects', dest='min_objects', type=int, default=SCENE_DEFAULT_COUNT_RANGE[0])
    synth.add_argument('--max-objects', dest='max_objects', type=int, default=SCENE_DEFAULT_COUNT_RANGE[1])
    synth.add_argument('--noise', type=float, default=DEPTH_NOISE_SIGMA, help='depth noise sigma [m]')
    synth.set_defaults(handler=cmd_synth)

    annotate = subparsers.add_parser('annotate', help='quality and reachability heatmaps from depth (+ segmentation)')
    annotate.add_argument('--depth', required=True)
    annotate.add_argument('--seg')
    annotate.add_argument('--out', required=True)
    _add_pipeline_flags(annotate, policy=False)
    annotate.set_defaults(handler=cmd_annotate)

    propose = subparsers.add_parser('propose', help='ranked grasp candidates as JSON')
    propose.add_argument('--depth')
    propose.add_argument('--seg')
    propose.add_argument('--quality')
    propose.add_argument('--reachability')
    propose.add_argument('--no-cluster', dest='no_cluster', action='store_true')
    _add_pipeline_flags(propose)
    propose.set_defaults(handler=cmd_propose)

    evaluate = subparsers.add_parser('eval', help='Top-k%% precision of a predicted heatmap as JSON')
    evaluate.add_argument('--pred', required=True)
    evaluate.add_argument('--gt', required=True)
    evaluate.add_argument('--gt-threshold', dest='gt_threshold', type=float, default=TOPK_GT_THRESHOLD)
    evaluate.add_argument('--mode', choices=TOPK_MODES, default=TOPK_MODE)
    evaluate.set_defaults(handler=cmd_eval)

    viz = subparsers.add_parser('viz', help='render a raster to PNG')
    viz.add_argument('--input', required=True)
    viz.add_argument('--out', required=True)
    viz.add_argument('--kind', choices=['heatmap', 'depth', 'segmentation'], default='heatmap')
    viz.add_argument('--candidates', help='propose output JSON to overlay')
    viz.add_argument('--title')
    viz.set_defaults(handler=cmd_viz)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get(LOG_LEVEL_ENV_VAR, DEFAULT_LOG_LEVEL).upper(),
                        format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except Exception as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
