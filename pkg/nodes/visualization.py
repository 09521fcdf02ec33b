"""PNG renders of heatmaps, depth and segmentation, plus graspable-area PGM export."""
import io

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from config import COLORMAPS, CANDIDATE_MARKER_COLOR, MAX_DRAWN_CANDIDATES
from errors import DataError
from nodes.dataset_io import atomic_write_bytes, write_pgm


def _save(fig, path):
    buffer = io.BytesIO()
    fig.savefig(buffer, format='png', dpi=100, bbox_inches='tight')
    plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())


def _raster(values):
    if not isinstance(values, np.ndarray):
        values = getattr(values, 'values', getattr(values, 'data', values))
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"expected a 2D raster, got shape {values.shape}")
    return values


def render_heatmap(heatmap, path, title=None, candidates=None):
    """Heatmap in [0, 1] with the viridis colormap and a colorbar."""
    values = _raster(heatmap)
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(values, cmap=COLORMAPS['heatmap'], vmin=0.0, vmax=1.0, interpolation='nearest')
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    if candidates:
        _draw_candidates(ax, candidates)
    _finish(ax, title)
    _save(fig, path)


def render_depth(depth, path, title=None):
    """Depth in gray, near is dark; invalid (0) pixels are left blank."""
    values = _raster(depth).astype(np.float64)
    masked = np.ma.masked_where(values == 0.0, values)
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(masked, cmap=COLORMAPS['depth'], interpolation='nearest')
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04, label='depth [m]')
    _finish(ax, title)
    _save(fig, path)


def render_segmentation(labels, path, title=None):
    """Object labels with tab20; background 0 is blank."""
    values = np.asarray(getattr(labels, 'labels', labels))
    masked = np.ma.masked_where(values == 0, values % 20)
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(masked, cmap=COLORMAPS['segmentation'], vmin=0, vmax=19, interpolation='nearest')
    _finish(ax, title)
    _save(fig, path)


def _draw_candidates(ax, candidates):
    for candidate in candidates[:MAX_DRAWN_CANDIDATES]:
        row, col = candidate.pixel
        ax.plot(col, row, marker='+', color=CANDIDATE_MARKER_COLOR, markersize=10, markeredgewidth=2)
        ax.annotate(str(candidate.global_rank), (col, row), xytext=(4, 4), textcoords='offset points',
                    color=CANDIDATE_MARKER_COLOR, fontsize=8)


def _finish(ax, title):
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])


def write_graspable_area_pgm(area_map, path, intrinsics=None):
    """8-bit mask: 255 where a full cup seal fits, 0 elsewhere."""
    mask = np.asarray(getattr(area_map, 'mask', area_map), dtype=bool)
    write_pgm(path, mask.astype(np.uint8) * 255, maxval=255,
              sidecar={'intrinsics': intrinsics, 'units': 'graspable mask', 'values': [0, 255]})
