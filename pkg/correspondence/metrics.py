"""
Flow and pose evaluation: endpoint error, PCK, Fl, sparsification curves and AUSE,
relative-pose angular errors with mAP/AUC aggregation.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from .exceptions import InvalidRotation, ShapeMismatch
from .geometry import FlowField

logger = logging.getLogger(__name__)

SPARSIFICATION_STEPS = 50
MAX_REMOVED_FRACTION = 0.98
ORTHONORMAL_TOLERANCE = 1e-6
FL_ABSOLUTE_PX = 3.0
FL_RELATIVE = 0.05
POSE_GRID_DEG = 5


def _vectors(flow):
    if isinstance(flow, FlowField):
        return flow.vectors, flow.valid
    vectors = np.asarray(flow, dtype=np.float64)
    return vectors, np.isfinite(vectors).all(axis=-1)


def endpoint_errors(est, gt, valid=None) -> np.ndarray:
    """Per-pixel L2 error over the pixels selected by ``valid`` (1-d, raster order)"""
    est_vectors, est_valid = _vectors(est)
    gt_vectors, gt_valid = _vectors(gt)
    if est_vectors.shape != gt_vectors.shape:
        raise ShapeMismatch(f"estimate {est_vectors.shape} vs ground truth {gt_vectors.shape}")
    mask = gt_valid & est_valid
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != mask.shape:
            raise ShapeMismatch(f"valid mask {valid.shape} vs flow {mask.shape}")
        mask = mask & valid
    diff = est_vectors[mask] - gt_vectors[mask]
    return np.hypot(diff[:, 0], diff[:, 1])


def aepe(est, gt, valid=None) -> float:
    errors = endpoint_errors(est, gt, valid)
    if errors.size == 0:
        logger.warning("AEPE requested with no valid pixels")
        return float('nan')
    return float(errors.mean())


def pck(est, gt, threshold: float, valid=None) -> float:
    """Percentage of valid pixels with endpoint error <= threshold"""
    if threshold <= 0:
        raise ValueError(f"PCK threshold must be positive, got {threshold}")
    errors = endpoint_errors(est, gt, valid)
    if errors.size == 0:
        return float('nan')
    return float(100.0 * np.count_nonzero(errors <= threshold) / errors.size)


def fl(est, gt, valid=None) -> float:
    """
    Outlier percentage: error > 3 px and error > 5% of the ground-truth magnitude.
    Zero-magnitude ground truth only applies the absolute condition.
    """
    errors = endpoint_errors(est, gt, valid)
    if errors.size == 0:
        return float('nan')
    gt_vectors, gt_valid = _vectors(gt)
    est_vectors, est_valid = _vectors(est)
    mask = gt_valid & est_valid
    if valid is not None:
        mask = mask & np.asarray(valid, dtype=bool)
    magnitude = np.hypot(gt_vectors[mask][:, 0], gt_vectors[mask][:, 1])
    relative = np.where(magnitude > 0, errors / np.where(magnitude > 0, magnitude, 1.0), np.inf)
    outliers = (errors > FL_ABSOLUTE_PX) & (relative > FL_RELATIVE)
    return float(100.0 * np.count_nonzero(outliers) / errors.size)


def flow_metrics(est, gt, valid=None, pck_thresholds: Sequence[float] = (1, 3, 5)) -> Dict[str, float]:
    """Metric row for one pair, keyed the way the eval CSV names its columns"""
    row = {'aepe': aepe(est, gt, valid)}
    for threshold in pck_thresholds:
        row[f'pck_{threshold:g}'] = pck(est, gt, threshold, valid)
    row['fl'] = fl(est, gt, valid)
    row['valid_pixels'] = int(endpoint_errors(est, gt, valid).size)
    return row


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    values: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.fractions.shape != self.values.shape:
            raise ShapeMismatch("curve fractions and values differ in length")
        if self.fractions.size and (self.fractions[0] != 0 or np.any(np.diff(self.fractions) <= 0)):
            raise ValueError("curve fractions must increase strictly from 0")

    def rows(self) -> List[tuple]:
        return list(zip(self.fractions.tolist(), self.values.tolist()))


def removal_fractions(steps: int = SPARSIFICATION_STEPS) -> np.ndarray:
    return np.linspace(0.0, MAX_REMOVED_FRACTION, steps)


def _retained_metric(sorted_errors: np.ndarray, count: int, outlier_threshold: Optional[float]):
    kept = sorted_errors[:count]
    if outlier_threshold is None:
        return kept.mean()
    return 100.0 * np.count_nonzero(kept > outlier_threshold) / count


def sparsification(errors, ranking, steps: int = SPARSIFICATION_STEPS,
                   outlier_threshold: Optional[float] = None,
                   normalize: bool = True) -> SparsificationCurve:
    """
    Metric over the retained pixels as the highest-``ranking`` fraction is removed.

    ``ranking`` is an uncertainty score: larger values are removed first, ties in
    raster order. The metric is AEPE, or the outlier percentage above
    ``outlier_threshold`` when one is given.
    """
    errors = np.asarray(errors, dtype=np.float64).ravel()
    ranking = np.asarray(ranking, dtype=np.float64).ravel()
    if errors.shape != ranking.shape:
        raise ShapeMismatch(f"errors {errors.shape} vs ranking {ranking.shape}")
    if errors.size == 0 or not np.isfinite(errors).all():
        raise ValueError("sparsification needs a nonempty set of finite errors")
    if not np.isfinite(ranking).all():
        raise ValueError("sparsification ranking must be finite")

    order = np.argsort(ranking, kind='stable')
    sorted_errors = errors[order]
    fractions = removal_fractions(steps)
    n = errors.size
    values = np.empty_like(fractions)
    for i, fraction in enumerate(fractions):
        count = max(n - int(math.floor(fraction * n)), 1)
        values[i] = _retained_metric(sorted_errors, count, outlier_threshold)
    if normalize:
        values = values / values[0] if values[0] > 0 else np.zeros_like(values)
    return SparsificationCurve(fractions=fractions, values=values, normalized=normalize)


def oracle(errors, steps: int = SPARSIFICATION_STEPS, outlier_threshold: Optional[float] = None,
           normalize: bool = True) -> SparsificationCurve:
    """Curve obtained when the ranking is the true error itself"""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    return sparsification(errors, errors, steps, outlier_threshold, normalize)


def ause(curve: SparsificationCurve, oracle_curve: SparsificationCurve) -> float:
    if not np.array_equal(curve.fractions, oracle_curve.fractions):
        raise ShapeMismatch("curve and oracle use different fraction grids")
    return float(trapezoid(curve.values - oracle_curve.values, curve.fractions))


def average_curves(curves: Iterable[SparsificationCurve]) -> SparsificationCurve:
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    fractions = curves[0].fractions
    for curve in curves[1:]:
        if not np.array_equal(curve.fractions, fractions):
            raise ShapeMismatch("curves use different fraction grids")
    values = np.mean(np.stack([c.values for c in curves]), axis=0)
    return SparsificationCurve(fractions=fractions, values=values,
                               normalized=all(c.normalized for c in curves))


def random_ranking(size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random(size)


def _check_rotation(R: np.ndarray, name: str) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.isfinite(R).all():
        raise InvalidRotation(f"{name} must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
        raise InvalidRotation(f"{name} is not orthonormal")
    return R


def rotation_error(R, R_hat) -> float:
    """Angle in degrees of the rotation aligning ``R`` to ``R_hat``"""
    R = _check_rotation(R, 'R')
    R_hat = _check_rotation(R_hat, 'R_hat')
    cosine = (np.trace(R.T @ R_hat) - 1.0) / 2.0
    return math.degrees(math.acos(float(np.clip(cosine, -1.0, 1.0))))


def translation_error(T, T_hat) -> float:
    """Angle in degrees between two translation directions"""
    T = np.asarray(T, dtype=np.float64).ravel()
    T_hat = np.asarray(T_hat, dtype=np.float64).ravel()
    norms = np.linalg.norm(T) * np.linalg.norm(T_hat)
    if T.shape != (3,) or T_hat.shape != (3,) or not norms > 0:
        raise ValueError("translations must be nonzero 3-vectors")
    return math.degrees(math.acos(float(np.clip(T @ T_hat / norms, -1.0, 1.0))))


def pose_error(R, R_hat, T, T_hat) -> float:
    return max(translation_error(T, T_hat), abs(rotation_error(R, R_hat)))


def accuracy_at(errors, threshold: float) -> float:
    errors = np.asarray(errors, dtype=np.float64)
    return float(100.0 * np.count_nonzero(errors <= threshold) / errors.size)


def map_at(errors, thresholds: Sequence[float] = (5, 10, 20)) -> List[float]:
    """mAP at each threshold: mean accuracy over the 5-degree grid up to that threshold"""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no pose errors to aggregate")
    results = []
    for threshold in thresholds:
        grid = np.arange(POSE_GRID_DEG, threshold + 1e-9, POSE_GRID_DEG)
        if grid.size == 0:
            grid = np.array([threshold])
        results.append(float(np.mean([accuracy_at(errors, k) for k in grid])))
    return results


def auc_at(errors, thresholds: Sequence[float] = (5, 10, 20)) -> List[float]:
    """Area under the cumulative pose-error curve up to each threshold, in percent"""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("no pose errors to aggregate")
    recall = (np.arange(errors.size) + 1) / errors.size
    errors = np.concatenate(([0.0], errors))
    recall = np.concatenate(([0.0], recall))
    results = []
    for threshold in thresholds:
        last = int(np.searchsorted(errors, threshold))
        r = np.concatenate((recall[:last], [recall[last - 1]]))
        e = np.concatenate((errors[:last], [threshold]))
        results.append(float(100.0 * trapezoid(r, x=e) / threshold))
    return results
