"""
Dense flow-field arithmetic.

Conventions used throughout the toolkit:
- a flow Y maps reference pixel x to query location x + Y(x);
- vectors are stored as (u, v) = (dx, dy) in an (H, W, 2) array;
- pixel centres sit on integer coordinates, so the image spans [0, W-1] x [0, H-1].
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import DegenerateHomography, ShapeMismatch, TooFewMatches

logger = logging.getLogger(__name__)

DENOMINATOR_EPS = 1e-9
DETERMINANT_EPS = 1e-12
MAX_HOMOGRAPHY_RESAMPLES = 100


@dataclass
class FlowField:
    """Dense reference-to-query flow with a per-pixel validity mask"""

    vectors: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 2:
            raise ShapeMismatch(f"flow vectors must be HxWx2, got {self.vectors.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.vectors).all(axis=-1)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.vectors.shape[:2]:
            raise ShapeMismatch(
                f"valid mask {self.valid.shape} does not match flow {self.vectors.shape[:2]}"
            )
        # invalid pixels may carry anything; valid ones must be finite
        self.valid &= np.isfinite(self.vectors).all(axis=-1)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.vectors.shape[:2]

    @classmethod
    def zeros(cls, width: int, height: int) -> 'FlowField':
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))

    def copy(self) -> 'FlowField':
        return FlowField(self.vectors.copy(), self.valid.copy())

    def targets(self) -> Tuple[np.ndarray, np.ndarray]:
        """Query coordinates x + Y(x) for every reference pixel"""
        xs, ys = pixel_grid(self.width, self.height)
        return xs + self.vectors[..., 0], ys + self.vectors[..., 1]


@dataclass
class Homography:
    """Projective transform normalised so that element (3,3) is 1 when nonzero"""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(m).all():
            raise DegenerateHomography("homography has non-finite entries")
        if abs(m[2, 2]) > DETERMINANT_EPS:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DETERMINANT_EPS:
            raise DegenerateHomography(f"homography is singular (det={np.linalg.det(m):.3e})")
        self.matrix = m

    @classmethod
    def identity(cls) -> 'Homography':
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> 'Homography':
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def scaling(cls, sx: float, sy: Optional[float] = None) -> 'Homography':
        sy = sx if sy is None else sy
        return cls(np.diag([sx, sy, 1.0]))

    def inverse(self) -> 'Homography':
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: 'Homography') -> 'Homography':
        return Homography(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        """Project (N, 2) points; points sent to infinity come back as inf"""
        return project_points(self.matrix, points)

    @property
    def is_affine(self) -> bool:
        return bool(np.allclose(self.matrix[2, :2], 0.0))


@dataclass(frozen=True)
class PerturbationSpec:
    """Local elastic perturbations added on top of the base warp"""

    count: int = 3
    elastic_sigma: float = 4.0
    elastic_alpha: float = 3.0
    mask_std_range: Tuple[float, float] = (2.0, 6.0)

    def __post_init__(self):
        if self.count < 0 or self.elastic_sigma < 0 or self.elastic_alpha < 0:
            raise ValueError("perturbation count and amplitudes must be non-negative")
        lo, hi = self.mask_std_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid mask std range {self.mask_std_range}")


@dataclass(frozen=True)
class HomographySpec:
    """Four-corner jitter of a centred square with side min(width, height)"""

    width: int
    height: int
    jitter: float = 0.12

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.jitter < 0:
            raise ValueError("homography spec needs a positive frame and non-negative jitter")


@dataclass(frozen=True)
class AffineSpec:
    """Bounded ranges for object motion"""

    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)
    max_shear: float = 0.05
    max_translation: float = 6.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid scale range {self.scale_range}")
        if self.max_rotation_deg < 0 or self.max_shear < 0 or self.max_translation < 0:
            raise ValueError("affine ranges must be non-negative")


def pixel_grid(width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Integer pixel-centre coordinates as float arrays (xs, ys) of shape (H, W)"""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def project_points(matrix: np.ndarray, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    homog = np.c_[points, np.ones(len(points))] @ np.asarray(matrix).T
    with np.errstate(divide='ignore', invalid='ignore'):
        den = homog[:, 2:3]
        projected = np.where(np.abs(den) > DENOMINATOR_EPS, homog[:, :2] / den, np.inf)
    return projected


def homography_to_flow(homography: Homography, width: int, height: int) -> FlowField:
    """Flow Y(x) = project(H x) - x on a width x height grid"""
    xs, ys = pixel_grid(width, height)
    m = homography.matrix
    den = m[2, 0] * xs + m[2, 1] * ys + m[2, 2]
    valid = den > DENOMINATOR_EPS
    invalid_fraction = 1.0 - valid.mean()
    if invalid_fraction > 0.5:
        raise DegenerateHomography(
            f"projection denominator vanishes on {invalid_fraction:.0%} of pixels"
        )
    safe_den = np.where(valid, den, 1.0)
    u = (m[0, 0] * xs + m[0, 1] * ys + m[0, 2]) / safe_den - xs
    v = (m[1, 0] * xs + m[1, 1] * ys + m[1, 2]) / safe_den - ys
    vectors = np.stack([u, v], axis=-1)
    vectors[~valid] = 0.0
    return FlowField(vectors, valid)


def bilinear_sample(grid: np.ndarray, xs, ys, return_gradients: bool = False):
    """Zero-padded bilinear lookup of ``grid`` (H, W[, C]) at real coordinates.

    Returns ``(values, in_view)`` and, with ``return_gradients``, the partial
    derivatives of the values with respect to xs and ys. ``in_view`` is true when
    the point lies inside [0, W-1] x [0, H-1]. Non-finite coordinates read 0.
    """
    grid = np.asarray(grid, dtype=np.float64)
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[..., None]
    height, width = grid.shape[:2]

    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    finite = np.isfinite(xs) & np.isfinite(ys)
    xs = np.where(finite, xs, -2.0)
    ys = np.where(finite, ys, -2.0)
    in_view = finite & (xs >= 0) & (xs <= width - 1) & (ys >= 0) & (ys <= height - 1)

    # clamp far-away points so integer indices stay small; they read zeros either way
    xs = np.clip(xs, -2.0, width + 1.0)
    ys = np.clip(ys, -2.0, height + 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]

    def tap(yi, xi):
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        values = grid[np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
        return np.where(inside[..., None], values, 0.0)

    v00 = tap(y0, x0)
    v01 = tap(y0, x0 + 1)
    v10 = tap(y0 + 1, x0)
    v11 = tap(y0 + 1, x0 + 1)

    values = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11)
    if squeeze:
        values = values[..., 0]
    if not return_gradients:
        return values, in_view

    d_x = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_y = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
    d_x = np.where(finite[..., None], d_x, 0.0)
    d_y = np.where(finite[..., None], d_y, 0.0)
    if squeeze:
        d_x, d_y = d_x[..., 0], d_y[..., 0]
    return values, in_view, d_x, d_y


def _check_same_frame(a_shape, b_shape, what: str):
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeMismatch(f"{what}: {tuple(a_shape)} vs {tuple(b_shape)}")


def warp_bilinear(image: np.ndarray, flow: FlowField) -> Tuple[np.ndarray, np.ndarray]:
    """Resample ``image`` at x + flow(x); returns the warped image and an out-of-view flag"""
    image = np.asarray(image, dtype=np.float64)
    _check_same_frame(image.shape[:2], flow.shape, "image and flow sizes differ")
    xs, ys = flow.targets()
    xs = np.where(flow.valid, xs, np.nan)
    ys = np.where(flow.valid, ys, np.nan)
    warped, in_view = bilinear_sample(image, xs, ys)
    return warped, ~in_view


def compose_flows(base: FlowField, residual: FlowField) -> FlowField:
    """Y(x) = base(x + residual(x)) + residual(x)"""
    _check_same_frame(base.shape, residual.shape, "flows to compose differ in size")
    xs, ys = residual.targets()
    sampled, in_view = bilinear_sample(np.where(base.valid[..., None], base.vectors, 0.0), xs, ys)
    support, _ = bilinear_sample(base.valid.astype(np.float64), xs, ys)
    vectors = sampled + residual.vectors
    valid = residual.valid & in_view & (support >= 1.0 - 1e-9)
    vectors = np.where(np.isfinite(vectors), vectors, 0.0)
    return FlowField(vectors, valid)


def fb_consistency_error(forward: FlowField, backward: FlowField) -> np.ndarray:
    """||forward(x) + backward(x + forward(x))||_2; +inf where the lookup leaves the frame"""
    _check_same_frame(forward.shape, backward.shape, "forward and backward flows differ in size")
    xs, ys = forward.targets()
    sampled, in_view = bilinear_sample(np.where(backward.valid[..., None], backward.vectors, 0.0),
                                       xs, ys)
    support, _ = bilinear_sample(backward.valid.astype(np.float64), xs, ys)
    error = np.linalg.norm(forward.vectors + sampled, axis=-1)
    usable = forward.valid & in_view & (support >= 1.0 - 1e-9)
    return np.where(usable, error, np.inf)


def normalize_points(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Hartley normalisation: centroid at the origin, mean distance sqrt(2)"""
    centroid = points.mean(axis=0)
    spread = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if spread < 1e-12:
        raise DegenerateHomography("all points coincide")
    s = np.sqrt(2.0) / spread
    transform = np.array([[s, 0.0, -s * centroid[0]],
                          [0.0, s, -s * centroid[1]],
                          [0.0, 0.0, 1.0]])
    return project_points(transform, points), transform


def _dlt_system(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    n = len(src)
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.zeros((2 * n, 9))
    a[0::2] = np.c_[x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u]
    a[1::2] = np.c_[zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v]
    return a


def fit_homography_dlt(src, dst) -> Homography:
    """Least-squares homography src -> dst by the normalised direct linear transform"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ShapeMismatch(f"{len(src)} source points vs {len(dst)} destination points")
    if len(src) < 4:
        raise TooFewMatches(f"need at least 4 correspondences, got {len(src)}")
    src_n, t_src = normalize_points(src)
    dst_n, t_dst = normalize_points(dst)
    a = _dlt_system(src_n, dst_n)
    _, singular, vt = np.linalg.svd(a)
    if singular.size >= 8 and singular[7] < 1e-12 * max(singular[0], 1.0):
        raise DegenerateHomography("correspondences do not determine a homography")
    h_n = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ h_n @ t_src)


def _is_convex(quad: np.ndarray) -> bool:
    edges = np.roll(quad, -1, axis=0) - quad
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    return bool((cross > 0).all() or (cross < 0).all())


def sample_random_homography(spec: HomographySpec, rng: np.random.Generator) -> Homography:
    """Fit the homography taking a centred square onto its randomly jittered corners"""
    if spec.jitter == 0:
        return Homography.identity()
    side = float(min(spec.width, spec.height))
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    half = side / 2.0
    square = np.array([[cx - half, cy - half], [cx + half, cy - half],
                       [cx + half, cy + half], [cx - half, cy + half]])
    bound = spec.jitter * side
    for _ in range(MAX_HOMOGRAPHY_RESAMPLES):
        quad = square + rng.uniform(-bound, bound, size=(4, 2))
        if _is_convex(quad):
            return fit_homography_dlt(square, quad)
    raise DegenerateHomography(
        f"no convex quad after {MAX_HOMOGRAPHY_RESAMPLES} draws (jitter={spec.jitter})"
    )


def sample_random_affine(spec: AffineSpec, rng: np.random.Generator,
                         center: Sequence[float] = (0.0, 0.0)) -> Homography:
    """Rotation, anisotropic scale, shear and translation about ``center``"""
    theta = np.deg2rad(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
    sx, sy = rng.uniform(spec.scale_range[0], spec.scale_range[1], size=2)
    shear = rng.uniform(-spec.max_shear, spec.max_shear)
    tx, ty = rng.uniform(-spec.max_translation, spec.max_translation, size=2)

    c, s = np.cos(theta), np.sin(theta)
    linear = np.array([[c, -s], [s, c]]) @ np.array([[1.0, shear], [0.0, 1.0]]) @ np.diag([sx, sy])
    center = np.asarray(center, dtype=np.float64)
    offset = center + np.array([tx, ty]) - linear @ center
    matrix = np.eye(3)
    matrix[:2, :2] = linear
    matrix[:2, 2] = offset
    return Homography(matrix)


def elastic_field(width: int, height: int, spec: PerturbationSpec,
                  rng: np.random.Generator) -> FlowField:
    """Gaussian-smoothed white noise, normalised to unit peak magnitude, scaled by elastic_alpha"""
    noise = rng.standard_normal((height, width, 2))
    if spec.elastic_alpha == 0:
        return FlowField.zeros(width, height)
    smooth = np.stack(
        [gaussian_filter(noise[..., k], sigma=spec.elastic_sigma, mode='reflect') for k in range(2)],
        axis=-1,
    )
    peak = np.linalg.norm(smooth, axis=-1).max()
    if peak <= 0:
        return FlowField.zeros(width, height)
    return FlowField(smooth / peak * spec.elastic_alpha, np.ones((height, width), dtype=bool))


def gaussian_mask(center: Sequence[float], std: float, width: int, height: int) -> np.ndarray:
    """min(2 exp(-|x - c|^2 / (2 std^2)), 1)"""
    if std <= 0:
        raise ValueError(f"mask std must be positive, got {std}")
    xs, ys = pixel_grid(width, height)
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.minimum(2.0 * np.exp(-d2 / (2.0 * std ** 2)), 1.0)


def resize_bilinear(image: np.ndarray, ratio: float, out_shape: Optional[Tuple[int, int]] = None
                    ) -> np.ndarray:
    """Scale an image by ``ratio`` with bilinear sampling; output defaults to the input frame"""
    image = np.asarray(image, dtype=np.float64)
    height, width = out_shape or image.shape[:2]
    xs, ys = pixel_grid(width, height)
    resized, _ = bilinear_sample(image, xs / ratio, ys / ratio)
    return resized
