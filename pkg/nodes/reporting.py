from datetime import datetime

import numpy as np

from config import ANALYSIS_PIPELINE_NAME, VERSION
from nodes.grasp_quality import HeatMap
from nodes.graspable_area import GraspableAreaMap


def generate_report(state):
    """Assemble the candidate list, per-stage counts and timings into the pipeline report."""
    reporter = state.stage_reporter()

    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] REPORTING: Assembling grasp proposal report...")

    if not state.object_clouds:
        # Nothing to score: zero heatmaps and no candidates is a successful outcome
        _fill_empty_scene(state)
        reporter.detail("Empty scene: no object points above the minimum size")

    candidates = state.candidates or []
    report = {
        "summary": _generate_summary(state, candidates),
        "policy": {
            "name": state.config.get('policy'),
            "th_g": state.config.get('th_g'),
            "th_r": state.config.get('th_r'),
            "clustered": bool(state.config.get('cluster', True))
        },
        "candidates": [candidate.to_dict() for candidate in candidates],
        "counts": _create_counts(state, candidates),
        "heatmaps": {
            "quality": _heatmap_summary(state.quality, state.area_map),
            "reachability": _heatmap_summary(state.reachability, state.area_map)
        },
        "timings": dict(state.timings or {})
    }

    state.report = report
    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] REPORTING: Report generated with {len(candidates)} candidates")
    return state


def finalize_output(state):
    """Format final output with status, version, and metadata."""
    # Progress tracking
    state.current_step += 1
    state.add_log(f"[{state.current_step}/{state.total_steps}] FINALIZE_OUTPUT: Preparing final report format...")

    if not state.report:
        # Create minimal report if none exists
        state.report = {
            "summary": "Annotation incomplete - no report generated",
            "candidates": [],
            "counts": {},
            "timings": dict(state.timings or {})
        }

    state.report["status"] = "error" if state.errors else "ok"

    # Add metadata
    state.report["metadata"] = {
        "pipeline": ANALYSIS_PIPELINE_NAME,
        "analysis_timestamp": datetime.now().isoformat(),
        "version": VERSION,
        "failed_stage": state.failed_stage,
        "pipeline_errors": state.errors or []
    }

    state.add_log(f"✓ [{state.current_step}/{state.total_steps}] FINALIZE_OUTPUT: Report finalized with status {state.report['status']}")
    return state


def _fill_empty_scene(state):
    shape = state.depth.data.shape
    if state.area_map is None:
        state.area_map = GraspableAreaMap.empty(shape)
    if state.quality is None:
        state.quality = HeatMap.zeros(shape)
    if state.reachability is None and state.config.get('compute_reachability', True):
        state.reachability = HeatMap.zeros(shape)
    state.candidates = []


def _generate_summary(state, candidates):
    """One-line natural language summary of the run."""
    n_objects = len(state.object_clouds or {})
    if n_objects == 0:
        return "Empty scene: no grasp candidates."

    summary_parts = [f"Annotated {n_objects} objects with {len(state.segments or [])} smooth surfaces"]
    if state.area_map is not None:
        summary_parts.append(f"{state.area_map.pixel_count} pixels admit a full cup seal")
    if candidates:
        best = candidates[0]
        summary_parts.append(f"Best candidate at pixel {tuple(best.pixel)} with J_q {best.quality:.3f}"
                             + ("" if best.reachability is None else f" and J_a {best.reachability:.3f}"))
    else:
        summary_parts.append("No pixel passed the policy thresholds")
    return ". ".join(summary_parts) + "."


def _create_counts(state, candidates):
    counts = {
        "objects": len(state.object_clouds or {}),
        "points": int(sum(len(cloud) for cloud in (state.object_clouds or {}).values())),
        "surfaces": len(state.segments or []),
        "graspable_pixels": 0 if state.area_map is None else state.area_map.pixel_count,
        "graspable_surfaces": 0 if state.area_map is None else len(state.area_map.surfaces),
        "candidates": len(candidates)
    }
    if state.cluster_labels is not None:
        counts["clusters"] = int(state.cluster_labels.max(initial=0))
    return counts


def _heatmap_summary(heatmap, area_map):
    if heatmap is None:
        return None
    if area_map is None or area_map.pixel_count == 0:
        return {"mean": 0.0, "max": 0.0, "nonzero_pixels": 0}
    values = heatmap.values[area_map.mask]
    return {
        "mean": round(float(values.mean()), 6),
        "max": round(float(values.max()), 6),
        "nonzero_pixels": int(np.count_nonzero(values))
    }
