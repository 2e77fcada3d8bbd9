"""
Confidence-driven estimation on top of the trained matcher.

Direct (D) inference runs the network once. Multi-stage (H) inference selects
confident matches, fits a homography with RANSAC, aligns the query and runs the
network again. Multi-scale (MS) inference repeats the homography fit over several
resizing ratios and keeps the one with the most inliers. Dense flow also drives
sparse keypoint matching with an optional cyclic-consistency filter.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DegenerateHomography, ShapeMismatch, TooFewMatches
from .formats import read_flo, read_pfm, write_flo, write_pfm
from .geometry import (
    FlowField, Homography, bilinear_sample, compose_flows, fit_homography_dlt,
    homography_to_flow, normalize_points, pixel_grid, resize_bilinear, warp_bilinear,
)
from .mixture import MixtureParams, confidence_pr, mixture_variance
from .model import ModelWeights, STRIDES, forward, upsample

logger = logging.getLogger(__name__)

MODES = ('D', 'H', 'MS')
COLLINEAR_AREA_EPS = 1e-3


@dataclass(frozen=True)
class InferenceConfig:
    gamma: float = 0.1
    radius: float = 1.0
    ransac_iters: int = 2000
    inlier_threshold: float = 1.0
    ms_ratios: Tuple[float, ...] = (0.5, 0.88, 1.0, 1.33, 1.66, 2.0)
    keypoint_distance: float = 4.0
    cyclic_threshold: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not self.ms_ratios or min(self.ms_ratios) <= 0:
            raise ValueError("scale ratios must be positive")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be at least 1")

    @classmethod
    def from_config(cls, config, **changes) -> 'InferenceConfig':
        values = dict(
            gamma=config.gamma, radius=config.radius, ransac_iters=config.ransac_iters,
            inlier_threshold=config.inlier_threshold, ms_ratios=tuple(config.ms_ratios),
            keypoint_distance=config.keypoint_distance,
            cyclic_threshold=config.cyclic_threshold, seed=config.seed,
        )
        values.update({k: v for k, v in changes.items() if v is not None})
        return cls(**values)


@dataclass
class MatchSet:
    """Point correspondences in full-resolution pixel coordinates"""

    ref_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    query_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.ref_points = np.asarray(self.ref_points, dtype=np.float64).reshape(-1, 2)
        self.query_points = np.asarray(self.query_points, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).ravel()
        if not len(self.ref_points) == len(self.query_points) == len(self.confidence):
            raise ShapeMismatch("match arrays differ in length")
        if self.confidence.size and (
                not np.isfinite(self.confidence).all()
                or self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValueError("match confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.confidence)

    def subset(self, index) -> 'MatchSet':
        return MatchSet(self.ref_points[index], self.query_points[index], self.confidence[index])

    def canonical(self) -> 'MatchSet':
        """Reference raster order (row, then column), query point as tie-break"""
        order = np.lexsort((self.query_points[:, 1], self.query_points[:, 0],
                            self.ref_points[:, 0], self.ref_points[:, 1]))
        return self.subset(order)

    def scaled(self, scale: float, offset: float) -> 'MatchSet':
        return MatchSet(self.ref_points * scale + offset, self.query_points * scale + offset,
                        self.confidence)


@dataclass
class Prediction:
    """One network pass: full-resolution flow and confidence, plus the native output"""

    flow: FlowField
    pr: np.ndarray
    variance: np.ndarray
    native_flow: FlowField
    native_pr: np.ndarray
    stride: int = STRIDES[-1]


@dataclass
class Estimate:
    """Final output of one inference strategy"""

    flow: FlowField
    pr: Optional[np.ndarray]
    variance: Optional[np.ndarray]
    homography: Optional[Homography] = None
    inlier_ratio: Optional[float] = None
    ratio: Optional[float] = None
    fallback: bool = False


class Estimator:
    """Runs the network and converts its finest level to full-resolution maps.

    Confidence and variance are expressed in output-resolution pixels, so the
    P_R radius is measured on the native grid before upsampling.
    """

    def __init__(self, weights: ModelWeights, radius: float = 1.0):
        self.weights = weights
        self.radius = radius

    def predict_batch(self, query: np.ndarray, reference: np.ndarray) -> List[Prediction]:
        finest = forward(query, reference, self.weights)[-1]
        stride = finest.stride
        constraints = self.weights.constraints
        native = finest.params(constraints)
        native_pr = confidence_pr(native, self.radius)

        full_mu = stride * upsample(finest.mu, stride)
        full = MixtureParams(
            mu=full_mu,
            component_logits=upsample(finest.component_logits, stride),
            raw_scales=upsample(finest.raw_scales, stride),
            constraints=constraints,
        )
        full_pr = confidence_pr(full, self.radius)
        full_variance = mixture_variance(full)
        return [
            Prediction(
                flow=FlowField(full_mu[i]),
                pr=full_pr[i],
                variance=full_variance[i],
                native_flow=FlowField(finest.mu[i]),
                native_pr=native_pr[i],
                stride=stride,
            )
            for i in range(finest.mu.shape[0])
        ]

    def predict(self, query: np.ndarray, reference: np.ndarray) -> Prediction:
        return self.predict_batch(query, reference)[0]

    def estimate(self, query: np.ndarray, reference: np.ndarray) -> Estimate:
        prediction = self.predict(query, reference)
        return Estimate(prediction.flow, prediction.pr, prediction.variance)


def extract_matches(flow: FlowField, pr_map: np.ndarray, gamma: float) -> MatchSet:
    """One match per valid pixel whose confidence reaches ``gamma`` and whose target stays in frame"""
    pr_map = np.asarray(pr_map, dtype=np.float64)
    if pr_map.shape != flow.shape:
        raise ShapeMismatch(f"confidence map {pr_map.shape} vs flow {flow.shape}")
    xs, ys = pixel_grid(flow.width, flow.height)
    tx, ty = flow.targets()
    in_frame = (tx >= 0) & (tx <= flow.width - 1) & (ty >= 0) & (ty <= flow.height - 1)
    keep = (pr_map >= gamma) & flow.valid & in_frame
    return MatchSet(
        ref_points=np.stack([xs[keep], ys[keep]], axis=-1),
        query_points=np.stack([tx[keep], ty[keep]], axis=-1),
        confidence=np.clip(pr_map[keep], 0.0, 1.0),
    )


def native_matches(prediction: Prediction, gamma: float) -> MatchSet:
    """Matches selected on the output grid, mapped to full-resolution coordinates"""
    stride = prediction.stride
    matches = extract_matches(prediction.native_flow, prediction.native_pr, gamma)
    return matches.scaled(stride, 0.5 * stride - 0.5)


def transfer_errors(homography: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Symmetric transfer error; inf where either projection escapes to infinity"""
    forward_err = np.linalg.norm(homography.apply(src) - dst, axis=-1)
    backward_err = np.linalg.norm(homography.inverse().apply(dst) - src, axis=-1)
    errors = forward_err + backward_err
    return np.where(np.isfinite(errors), errors, np.inf)


def _triangle_areas(points: np.ndarray) -> np.ndarray:
    a, b, c, d = points
    triangles = ((a, b, c), (a, b, d), (a, c, d), (b, c, d))
    return np.array([abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) / 2
                     for p, q, r in triangles])


def fit_homography_ransac(matches: MatchSet, config: InferenceConfig,
                          rng: np.random.Generator) -> Tuple[Homography, float]:
    """RANSAC over minimal four-point DLT hypotheses; returns the refit model and inlier ratio"""
    if len(matches) < 4:
        raise TooFewMatches(f"need at least 4 matches, got {len(matches)}")
    matches = matches.canonical()
    src, dst = matches.ref_points, matches.query_points
    src_n, _ = normalize_points(src)
    dst_n, _ = normalize_points(dst)
    n = len(matches)

    best_inliers = None
    best_count = -1
    for _ in range(config.ransac_iters):
        sample = rng.choice(n, size=4, replace=False)
        if (_triangle_areas(src_n[sample]).min() < COLLINEAR_AREA_EPS
                or _triangle_areas(dst_n[sample]).min() < COLLINEAR_AREA_EPS):
            continue
        try:
            hypothesis = fit_homography_dlt(src[sample], dst[sample])
        except DegenerateHomography:
            continue
        inliers = transfer_errors(hypothesis, src, dst) <= config.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            if count == n:
                break
    if best_inliers is None:
        raise DegenerateHomography("every RANSAC sample was collinear or degenerate")

    model = fit_homography_dlt(src[best_inliers], dst[best_inliers])
    inliers = transfer_errors(model, src, dst) <= config.inlier_threshold
    ratio = float(inliers.mean())
    logger.debug(f"RANSAC kept {int(inliers.sum())}/{n} matches")
    return model, ratio


def _align_and_refine(homography: Homography, query: np.ndarray, reference: np.ndarray,
                      estimator: Estimator) -> Tuple[FlowField, Prediction]:
    """Warp the query by ``homography``, run the second pass and compose the flows"""
    height, width = query.shape[:2]
    homography_flow = homography_to_flow(homography, width, height)
    aligned, _ = warp_bilinear(query, homography_flow)
    second = estimator.predict(aligned, reference)
    composed = compose_flows(homography_flow, second.flow)

    # pixels whose lookup left the homography flow's support are projected exactly
    patch = second.flow.valid & ~composed.valid
    if patch.any():
        xs, ys = second.flow.targets()
        projected = homography.apply(np.stack([xs[patch], ys[patch]], axis=-1))
        grid_x, grid_y = pixel_grid(width, height)
        vectors = composed.vectors.copy()
        vectors[patch] = projected - np.stack([grid_x[patch], grid_y[patch]], axis=-1)
        valid = composed.valid.copy()
        valid[patch] = np.isfinite(projected).all(axis=-1)
        composed = FlowField(np.where(valid[..., None], vectors, 0.0), valid)
    return composed, second


def infer_multistage_H(query: np.ndarray, reference: np.ndarray, estimator: Estimator,
                       config: InferenceConfig) -> Estimate:
    """Coarse homography alignment from confident matches, then a refining pass"""
    first = estimator.predict(query, reference)
    rng = np.random.default_rng(config.seed)
    try:
        homography, ratio = fit_homography_ransac(native_matches(first, config.gamma), config, rng)
        flow, second = _align_and_refine(homography, query, reference, estimator)
    except (TooFewMatches, DegenerateHomography) as e:
        logger.info(f"Homography stage failed, keeping single-pass flow: {e}")
        return Estimate(first.flow, first.pr, first.variance, fallback=True)
    return Estimate(flow, second.pr, second.variance, homography=homography, inlier_ratio=ratio,
                    ratio=1.0)


def _rescaled_pair(query: np.ndarray, reference: np.ndarray, ratio: float):
    if ratio < 1.0:
        return query, resize_bilinear(reference, ratio)
    if ratio > 1.0:
        return resize_bilinear(query, 1.0 / ratio), reference
    return query, reference


def _to_original_frame(homography: Homography, ratio: float) -> Homography:
    if ratio < 1.0:
        return homography @ Homography.scaling(ratio)
    if ratio > 1.0:
        return Homography.scaling(ratio) @ homography
    return homography


def infer_multiscale_MS(query: np.ndarray, reference: np.ndarray, estimator: Estimator,
                        config: InferenceConfig) -> Estimate:
    """Homography fitted at every scale ratio; the ratio with the most inliers drives refinement"""
    best = None
    first_at_one = None
    for ratio in config.ms_ratios:
        scaled_query, scaled_reference = _rescaled_pair(query, reference, ratio)
        first = estimator.predict(scaled_query, scaled_reference)
        if ratio == 1.0:
            first_at_one = first
        rng = np.random.default_rng(config.seed)
        try:
            homography, inlier_ratio = fit_homography_ransac(
                native_matches(first, config.gamma), config, rng)
            homography = _to_original_frame(homography, ratio)
        except (TooFewMatches, DegenerateHomography) as e:
            logger.debug(f"Scale ratio {ratio}: no homography ({e})")
            continue
        logger.debug(f"Scale ratio {ratio}: inlier ratio {inlier_ratio:.3f}")
        if best is None or inlier_ratio > best[1]:
            best = (homography, inlier_ratio, ratio)

    if first_at_one is None:
        first_at_one = estimator.predict(query, reference)
    if best is None:
        logger.info("No scale ratio produced a homography, keeping single-pass flow")
        return Estimate(first_at_one.flow, first_at_one.pr, first_at_one.variance, fallback=True)

    homography, inlier_ratio, ratio = best
    try:
        flow, second = _align_and_refine(homography, query, reference, estimator)
    except DegenerateHomography as e:
        logger.info(f"Selected homography unusable, keeping single-pass flow: {e}")
        return Estimate(first_at_one.flow, first_at_one.pr, first_at_one.variance, fallback=True)
    return Estimate(flow, second.pr, second.variance, homography=homography,
                    inlier_ratio=inlier_ratio, ratio=ratio)


def run_mode(mode: str, query: np.ndarray, reference: np.ndarray, estimator: Estimator,
             config: InferenceConfig) -> Estimate:
    if mode == 'D':
        return estimator.estimate(query, reference)
    if mode == 'H':
        return infer_multistage_H(query, reference, estimator, config)
    if mode == 'MS':
        return infer_multiscale_MS(query, reference, estimator, config)
    raise ValueError(f"unknown inference mode {mode!r}; expected one of {', '.join(MODES)}")


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def sparse_match(flow_rq: FlowField, pr_rq: np.ndarray, keypoints_ref, keypoints_query,
                 config: InferenceConfig) -> MatchSet:
    """Map confident reference keypoints through the flow onto the nearest query keypoint"""
    keypoints_ref = _as_points(keypoints_ref)
    keypoints_query = _as_points(keypoints_query)
    pr_rq = np.asarray(pr_rq, dtype=np.float64)
    if pr_rq.shape != flow_rq.shape:
        raise ShapeMismatch(f"confidence map {pr_rq.shape} vs flow {flow_rq.shape}")
    if len(keypoints_ref) == 0 or len(keypoints_query) == 0:
        return MatchSet()

    xs, ys = keypoints_ref[:, 0], keypoints_ref[:, 1]
    pr, in_view = bilinear_sample(pr_rq, xs, ys)
    vectors, _ = bilinear_sample(np.where(flow_rq.valid[..., None], flow_rq.vectors, 0.0), xs, ys)
    support, _ = bilinear_sample(flow_rq.valid.astype(np.float64), xs, ys)
    keep = in_view & (support >= 1.0 - 1e-9) & (pr >= config.gamma)

    mapped = keypoints_ref[keep] + vectors[keep]
    if not len(mapped):
        return MatchSet()
    distance, nearest = cKDTree(keypoints_query).query(mapped, k=1)
    close = distance < config.keypoint_distance
    return MatchSet(
        ref_points=keypoints_ref[keep][close],
        query_points=keypoints_query[nearest[close]],
        confidence=np.clip(pr[keep][close], 0.0, 1.0),
    ).canonical()


def cyclic_filter(c_rq: MatchSet, c_qr: MatchSet, threshold: float) -> MatchSet:
    """Keep reference-to-query matches whose reverse match returns within ``threshold``"""
    if not len(c_rq) or not len(c_qr):
        return MatchSet()
    tree = cKDTree(c_qr.ref_points)
    keep = np.zeros(len(c_rq), dtype=bool)
    for i, (start, end) in enumerate(zip(c_rq.ref_points, c_rq.query_points)):
        for j in tree.query_ball_point(end, r=1e-9):
            if np.linalg.norm(c_qr.query_points[j] - start) < threshold:
                keep[i] = True
                break
    return c_rq.subset(keep)


def keypoint_grid(width: int, height: int, spacing: int, offset: float = 0.0) -> np.ndarray:
    """Regular keypoints used when no detector output is supplied"""
    ys, xs = np.mgrid[0:height:spacing, 0:width:spacing].astype(np.float64)
    points = np.stack([xs.ravel(), ys.ravel()], axis=-1) + offset
    inside = (points[:, 0] <= width - 1) & (points[:, 1] <= height - 1)
    return points[inside]


FLOW_NAME = 'flow.flo'
PR_NAME = 'pr.pfm'
VARIANCE_NAME = 'variance.pfm'
BACKWARD_NAME = 'flow_backward.flo'


def write_estimate(directory, estimate: Estimate, backward: Optional[Estimate] = None):
    """Flow as .flo, confidence and variance as PFM; backward flow when given"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_flo(directory / FLOW_NAME, estimate.flow)
    if estimate.pr is not None:
        write_pfm(directory / PR_NAME, estimate.pr)
    if estimate.variance is not None:
        write_pfm(directory / VARIANCE_NAME, estimate.variance)
    if backward is not None:
        write_flo(directory / BACKWARD_NAME, backward.flow)


def read_estimate(directory) -> Tuple[Estimate, Optional[FlowField]]:
    """Stored prediction; confidence, variance and backward flow are optional"""
    directory = Path(directory)
    flow = read_flo(directory / FLOW_NAME)
    pr = read_pfm(directory / PR_NAME) if (directory / PR_NAME).exists() else None
    variance = read_pfm(directory / VARIANCE_NAME) if (directory / VARIANCE_NAME).exists() else None
    backward = read_flo(directory / BACKWARD_NAME) if (directory / BACKWARD_NAME).exists() else None
    return Estimate(flow, pr, variance), backward
