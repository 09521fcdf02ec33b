import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from config import TOPK_PERCENTS, TOPK_GT_THRESHOLD, TOPK_MODE, TOPK_MODES
from errors import DataError, UsageError


@dataclass
class TopKResult:
    k: int
    threshold: float
    true_positives: int
    false_positives: int

    @property
    def precision(self):
        selected = self.true_positives + self.false_positives
        return None if selected == 0 else self.true_positives / selected

    def to_dict(self):
        return {'k': self.k, 'threshold': float(self.threshold), 'precision': self.precision,
                'true_positives': self.true_positives, 'false_positives': self.false_positives}


@dataclass
class PrecisionReport:
    results: Dict[int, TopKResult] = field(default_factory=dict)
    mode: str = TOPK_MODE
    gt_threshold: float = TOPK_GT_THRESHOLD
    valid_pixels: int = 0
    gt_area_fraction: float = 0.0
    degenerate: bool = False

    def precision(self, k):
        return self.results[k].precision

    def to_dict(self):
        return {
            'mode': self.mode,
            'gt_threshold': self.gt_threshold,
            'valid_pixels': self.valid_pixels,
            'gt_area_fraction': self.gt_area_fraction,
            'degenerate': self.degenerate,
            'topk': [self.results[k].to_dict() for k in sorted(self.results)]
        }


def nearest_rank_percentile(sorted_values, percent):
    """Nearest-rank percentile of ascending values: the ceil(P/100 * N)-th smallest (rank at least 1)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(percent / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


def topk_precision(predicted, ground_truth, gt_threshold=TOPK_GT_THRESHOLD, ks=TOPK_PERCENTS, mode=TOPK_MODE,
                   valid: Optional[np.ndarray] = None):
    """Top-k% precision of a predicted heatmap against a ground-truth heatmap.

    Pixels strictly above the per-k threshold are true positives when the ground truth exceeds
    gt_threshold there. In 'percentile' mode the threshold is the nearest-rank (100-k)th percentile
    of the predictions over valid pixels; in 'score' mode it is the fixed score 1 - k/100.
    """
    if mode not in TOPK_MODES:
        raise UsageError(f"unknown top-k mode '{mode}', expected one of {TOPK_MODES}")
    pred = np.asarray(getattr(predicted, 'values', predicted), dtype=np.float64)
    truth = np.asarray(getattr(ground_truth, 'values', ground_truth), dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"heatmap dimensions differ: {pred.shape} vs {truth.shape}")

    mask = np.isfinite(pred) & np.isfinite(truth)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    values = pred[mask]
    positive = truth[mask] > gt_threshold

    report = PrecisionReport(mode=mode, gt_threshold=gt_threshold, valid_pixels=int(values.size),
                             gt_area_fraction=float(positive.mean()) if values.size else 0.0,
                             degenerate=bool(values.size == 0 or values.min() == values.max()))
    ordered = np.sort(values)
    for k in ks:
        if not 0 < k <= 100:
            raise UsageError(f"k must lie in (0, 100], got {k}")
        if values.size == 0:
            cut = math.inf
        elif mode == 'percentile':
            cut = nearest_rank_percentile(ordered, 100 - k)
        else:
            cut = 1.0 - k / 100.0
        above = values > cut
        report.results[k] = TopKResult(k=k, threshold=cut,
                                       true_positives=int(np.count_nonzero(above & positive)),
                                       false_positives=int(np.count_nonzero(above & ~positive)))
    return report
