import numpy as np
from django.test import SimpleTestCase
from scipy.ndimage import gaussian_filter, uniform_filter

from correspondence.exceptions import DegenerateHomography, ShapeMismatch, TooFewMatches
from correspondence.geometry import (
    FlowField, Homography, fit_homography_dlt, homography_to_flow, pixel_grid, resize_bilinear,
    warp_bilinear,
)
from correspondence.inference import (
    Estimate, Estimator, InferenceConfig, MatchSet, Prediction, cyclic_filter, extract_matches,
    fit_homography_ransac, infer_multiscale_MS, infer_multistage_H, keypoint_grid,
    native_matches, read_estimate, run_mode, sparse_match, write_estimate,
)
from correspondence.metrics import aepe
from correspondence.mixture import ConstraintSpec
from correspondence.model import ModelArchitecture, ModelWeights

from .utils import WorkspaceTestCase

CORNERS = np.array([[0.0, 0.0], [63.0, 0.0], [63.0, 63.0], [0.0, 63.0]])


def tiny_estimator():
    architecture = ModelArchitecture(
        image_height=32, image_width=32, feature_channels=4, flow_widths=(6, 4), cum_hidden=3,
        cum_out=2, predictor_widths=(4, 3), search_radius=2, temperature=5.0,
    )
    return Estimator(ModelWeights.initialize(architecture, ConstraintSpec.default(32, 32)))


def true_homography():
    return fit_homography_dlt(CORNERS, CORNERS + [[2.0, -1.0], [-3.0, 2.5], [1.5, 3.0], [-2.0, -2.0]])


def grid_matches(homography, size=10):
    ys, xs = np.mgrid[0:64:64 / size, 0:64:64 / size]
    src = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    return MatchSet(src, homography.apply(src), np.ones(len(src)))


class ExtractMatchesTest(SimpleTestCase):
    """Confidence-thresholded dense matches"""

    def setUp(self):
        self.flow = FlowField.zeros(6, 5)

    def test_zero_confidence_gives_nothing(self):
        """No pixel reaches a positive threshold"""
        self.assertEqual(len(extract_matches(self.flow, np.zeros((5, 6)), 0.1)), 0)

    def test_full_confidence_keeps_every_pixel(self):
        """Identity flow with certainty one matches each pixel to itself"""
        matches = extract_matches(self.flow, np.ones((5, 6)), 0.1)
        self.assertEqual(len(matches), 30)
        np.testing.assert_array_equal(matches.ref_points, matches.query_points)

    def test_threshold_is_inclusive_and_monotone(self):
        """Counts follow pr >= gamma and shrink as gamma grows"""
        pr = np.linspace(0.0, 1.0, 30).reshape(5, 6)
        self.assertEqual(len(extract_matches(self.flow, pr, float(pr[2, 3]))), 30 - 15)
        counts = [len(extract_matches(self.flow, pr, g)) for g in np.linspace(0, 0.99, 12)]
        self.assertEqual(counts, sorted(counts, reverse=True))

    def test_targets_outside_the_frame_dropped(self):
        """Flow leaving the query image gives no match"""
        flow = FlowField(np.broadcast_to([3.0, 0.0], (5, 6, 2)).copy())
        matches = extract_matches(flow, np.ones((5, 6)), 0.5)
        self.assertEqual(len(matches), 15)
        self.assertLessEqual(matches.query_points[:, 0].max(), 5.0)

    def test_shape_mismatch(self):
        """Confidence and flow must share a frame"""
        with self.assertRaises(ShapeMismatch):
            extract_matches(self.flow, np.ones((6, 5)), 0.1)

    def test_native_matches_use_pixel_centres(self):
        """Output-grid cell j maps to full-resolution coordinate stride * j + (stride - 1) / 2"""
        native = FlowField(np.zeros((2, 2, 2)))
        prediction = Prediction(flow=FlowField.zeros(8, 8), pr=np.ones((8, 8)),
                                variance=np.ones((8, 8)), native_flow=native,
                                native_pr=np.array([[1.0, 0.0], [1.0, 1.0]]), stride=4)
        matches = native_matches(prediction, 0.5).canonical()
        np.testing.assert_array_equal(matches.ref_points, [[1.5, 1.5], [1.5, 5.5], [5.5, 5.5]])


class RansacTest(SimpleTestCase):
    """Homography fitting on match sets"""

    def setUp(self):
        self.truth = true_homography()
        self.config = InferenceConfig(ransac_iters=500)

    def corner_error(self, model):
        return np.abs(model.apply(CORNERS) - self.truth.apply(CORNERS)).max()

    def test_noiseless_matches(self):
        """Exact correspondences recover the homography"""
        model, ratio = fit_homography_ransac(grid_matches(self.truth), self.config,
                                             np.random.default_rng(0))
        self.assertLessEqual(self.corner_error(model), 1e-6)
        self.assertEqual(ratio, 1.0)

    def test_outliers_are_rejected(self):
        """Thirty percent gross outliers do not bias the refit"""
        matches = grid_matches(self.truth)
        rng = np.random.default_rng(1)
        bad = rng.choice(len(matches), size=30, replace=False)
        angle = rng.uniform(0, 2 * np.pi, size=30)
        shift = rng.uniform(10, 20, size=30)[:, None] * np.stack([np.cos(angle), np.sin(angle)], -1)
        query = matches.query_points.copy()
        query[bad] += shift
        model, ratio = fit_homography_ransac(MatchSet(matches.ref_points, query, matches.confidence),
                                             self.config, np.random.default_rng(2))
        self.assertLessEqual(self.corner_error(model), 1e-6)
        self.assertAlmostEqual(ratio, 0.7)

    def test_minimal_set(self):
        """Four points in general position are fitted exactly"""
        src = np.array([[5.0, 5.0], [50.0, 8.0], [45.0, 55.0], [10.0, 40.0]])
        matches = MatchSet(src, self.truth.apply(src), np.ones(4))
        model, ratio = fit_homography_ransac(matches, self.config, np.random.default_rng(0))
        self.assertLessEqual(self.corner_error(model), 1e-6)
        self.assertEqual(ratio, 1.0)

    def test_order_and_seed_independence(self):
        """Permuted input with the same seed gives the same model"""
        matches = grid_matches(self.truth)
        matches.query_points[::7] += 15.0
        permuted = matches.subset(np.random.default_rng(4).permutation(len(matches)))
        first, _ = fit_homography_ransac(matches, self.config, np.random.default_rng(9))
        second, _ = fit_homography_ransac(permuted, self.config, np.random.default_rng(9))
        np.testing.assert_array_equal(first.matrix, second.matrix)

    def test_too_few_matches(self):
        """Three matches cannot define a homography"""
        src = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with self.assertRaises(TooFewMatches):
            fit_homography_ransac(MatchSet(src, src, np.ones(3)), self.config,
                                  np.random.default_rng(0))

    def test_collinear_matches(self):
        """Points on one line never give a hypothesis"""
        src = np.stack([np.arange(10.0), 2.0 * np.arange(10.0)], axis=-1)
        with self.assertRaises(DegenerateHomography):
            fit_homography_ransac(MatchSet(src, src, np.ones(10)), InferenceConfig(ransac_iters=50),
                                  np.random.default_rng(0))


class StrategyTest(SimpleTestCase):
    """Direct, multi-stage and multi-scale inference"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        rng = np.random.default_rng(0)
        cls.estimator = tiny_estimator()
        cls.reference = rng.random((32, 32, 3))
        cls.query = np.roll(cls.reference, (1, 1), axis=(0, 1))

    def test_direct_prediction_maps(self):
        """Flow, confidence and variance cover the full frame"""
        estimate = run_mode('D', self.query, self.reference, self.estimator, InferenceConfig())
        self.assertEqual(estimate.flow.shape, (32, 32))
        self.assertTrue(((estimate.pr >= 0) & (estimate.pr <= 1)).all())
        self.assertTrue((estimate.variance >= 1.0 - 1e-9).all())
        self.assertIsNone(estimate.homography)

    def test_multistage_falls_back_without_matches(self):
        """A threshold nothing reaches returns the single-pass flow"""
        config = InferenceConfig(gamma=0.99, ransac_iters=50)
        estimate = infer_multistage_H(self.query, self.reference, self.estimator, config)
        direct = self.estimator.estimate(self.query, self.reference)
        self.assertTrue(estimate.fallback)
        np.testing.assert_array_equal(estimate.flow.vectors, direct.flow.vectors)
        np.testing.assert_array_equal(estimate.pr, direct.pr)

    def test_single_ratio_multiscale_equals_multistage(self):
        """MS restricted to ratio 1 reproduces H exactly"""
        config = InferenceConfig(gamma=0.0, ransac_iters=50, ms_ratios=(1.0,))
        h = infer_multistage_H(self.query, self.reference, self.estimator, config)
        ms = infer_multiscale_MS(self.query, self.reference, self.estimator, config)
        self.assertEqual(h.fallback, ms.fallback)
        np.testing.assert_array_equal(h.flow.vectors, ms.flow.vectors)
        np.testing.assert_array_equal(h.flow.valid, ms.flow.valid)

    def test_unknown_mode(self):
        """Only D, H and MS exist"""
        with self.assertRaises(ValueError):
            run_mode('X', self.query, self.reference, self.estimator, InferenceConfig())


class BlockMatcher:
    """Exhaustive SSD search over a small window with parabolic sub-pixel refinement.

    Confident only where the cost minimum lies strictly inside the window, so
    displacements beyond ``search`` pixels are never trusted.
    """

    def __init__(self, search=3, half_window=3):
        self.search = search
        self.window = 2 * half_window + 1

    @staticmethod
    def _parabola(minus, centre, plus):
        curvature = minus - 2.0 * centre + plus
        return np.where(curvature > 1e-12, 0.5 * (minus - plus) / np.maximum(curvature, 1e-12), 0.0)

    def predict(self, query, reference):
        s = self.search
        side = 2 * s + 1
        height, width = reference.shape[:2]
        padded = np.pad(query, ((s, s), (s, s), (0, 0)))
        costs = np.empty((side, side, height, width))
        for iy in range(side):
            for ix in range(side):
                shifted = padded[iy:iy + height, ix:ix + width]
                costs[iy, ix] = uniform_filter(((shifted - reference) ** 2).sum(axis=-1),
                                               size=self.window, mode='constant')
        iy, ix = np.divmod(costs.reshape(side * side, height, width).argmin(axis=0), side)
        rows, cols = np.mgrid[0:height, 0:width]

        def cost(dy, dx):
            return costs[np.clip(iy + dy, 0, side - 1), np.clip(ix + dx, 0, side - 1), rows, cols]

        centre = cost(0, 0)
        u = ix - s + self._parabola(cost(0, -1), centre, cost(0, 1))
        v = iy - s + self._parabola(cost(-1, 0), centre, cost(1, 0))
        flow = FlowField(np.stack([u, v], axis=-1))
        pr = ((iy > 0) & (iy < side - 1) & (ix > 0) & (ix < side - 1)).astype(np.float64)
        return Prediction(flow=flow, pr=pr, variance=np.ones((height, width)), native_flow=flow,
                          native_pr=pr, stride=1)

    def estimate(self, query, reference):
        prediction = self.predict(query, reference)
        return Estimate(prediction.flow, prediction.pr, prediction.variance)


def smooth_texture(seed, size=64):
    image = gaussian_filter(np.random.default_rng(seed).random((size, size, 3)), sigma=(2, 2, 0))
    image -= image.min()
    return image / image.max()


def about_centre(scale, degrees, size=64):
    c = (size - 1) / 2.0
    t = np.radians(degrees)
    inner = Homography(np.array([
        [scale * np.cos(t), -scale * np.sin(t), 0.0],
        [scale * np.sin(t), scale * np.cos(t), 0.0],
        [0.0, 0.0, 1.0],
    ]))
    return Homography.translation(c, c) @ inner @ Homography.translation(-c, -c)


def evaluation_mask(gt, margin=4):
    """Valid ground truth whose source and target both stay clear of the frame border"""
    xs, ys = pixel_grid(gt.width, gt.height)
    tx, ty = gt.targets()

    def inside(a, limit):
        return (a >= margin) & (a <= limit - 1 - margin)

    return (gt.valid & inside(xs, gt.width) & inside(ys, gt.height)
            & inside(tx, gt.width) & inside(ty, gt.height))


class StrategyBehaviourTest(SimpleTestCase):
    """Multi-stage and multi-scale inference against a short-range matcher"""

    def setUp(self):
        self.matcher = BlockMatcher()
        self.config = InferenceConfig(gamma=0.5, ransac_iters=2000, inlier_threshold=1.0)

    def test_multistage_beats_direct_on_homographies(self):
        """Aligning with a homography first lowers AEPE over several warped pairs"""
        direct_errors, staged_errors = [], []
        warps = (about_centre(1.3, 0.0), about_centre(1.0, 12.0), about_centre(1.2, -10.0))
        for seed, homography in enumerate(warps):
            reference = smooth_texture(seed)
            query, _ = warp_bilinear(reference, homography_to_flow(homography.inverse(), 64, 64))
            gt = homography_to_flow(homography, 64, 64)
            mask = evaluation_mask(gt)
            direct = run_mode('D', query, reference, self.matcher, self.config)
            staged = run_mode('H', query, reference, self.matcher, self.config)
            self.assertFalse(staged.fallback)
            self.assertGreater((mask & staged.flow.valid).sum(), 0.95 * mask.sum())
            direct_errors.append(aepe(direct.flow.vectors, gt.vectors, mask))
            staged_errors.append(aepe(staged.flow.vectors, gt.vectors, mask & staged.flow.valid))
        self.assertLess(np.mean(staged_errors), 0.5 * np.mean(direct_errors))

    def test_multiscale_recovers_a_twofold_zoom(self):
        """A query magnified twice is matched at ratio 2 and beats direct inference"""
        reference = smooth_texture(7)
        query = resize_bilinear(reference, 2.0)
        xs, ys = pixel_grid(64, 64)
        gt = np.stack([xs, ys], axis=-1)
        mask = (xs >= 3) & (xs <= 28) & (ys >= 3) & (ys <= 28)
        estimate = run_mode('MS', query, reference, self.matcher, self.config)
        direct = run_mode('D', query, reference, self.matcher, self.config)
        self.assertFalse(estimate.fallback)
        self.assertEqual(estimate.ratio, 2.0)
        np.testing.assert_allclose(estimate.homography.apply(np.array([[10.0, 20.0]])), [[20.0, 40.0]],
                                   atol=0.05)
        self.assertTrue(estimate.flow.valid[mask].all())
        ms_error = aepe(estimate.flow.vectors, gt, mask)
        self.assertLess(ms_error, 0.25 * aepe(direct.flow.vectors, gt, mask))
        self.assertLess(ms_error, 1.0)


class SparseMatchTest(SimpleTestCase):
    """Keypoint matching through the dense flow"""

    def setUp(self):
        self.flow = FlowField(np.broadcast_to([2.0, 1.0], (16, 16, 2)).copy())
        self.pr = np.ones((16, 16))
        self.ref = np.array([[3.0, 3.0], [5.0, 7.0]])
        self.config = InferenceConfig(gamma=0.5, keypoint_distance=4.0)

    def test_exact_targets(self):
        """Keypoints landing on query keypoints are matched"""
        query = np.array([[12.0, 12.0], [7.0, 8.0], [5.0, 4.0]])
        matches = sparse_match(self.flow, self.pr, self.ref, query, self.config)
        np.testing.assert_array_equal(matches.ref_points, self.ref)
        np.testing.assert_array_equal(matches.query_points, [[5.0, 4.0], [7.0, 8.0]])

    def test_low_confidence_dropped(self):
        """Keypoints below gamma are ignored"""
        query = np.array([[5.0, 4.0], [7.0, 8.0]])
        self.assertEqual(len(sparse_match(self.flow, self.pr * 0.4, self.ref, query, self.config)), 0)

    def test_distance_is_strict(self):
        """Query keypoints at distance d or more are not matches"""
        far = np.array([[5.0 + 5.0, 4.0]])
        boundary = np.array([[5.0 + 4.0, 4.0]])
        near = np.array([[5.0 + 3.5, 4.0]])
        self.assertEqual(len(sparse_match(self.flow, self.pr, self.ref[:1], far, self.config)), 0)
        self.assertEqual(len(sparse_match(self.flow, self.pr, self.ref[:1], boundary, self.config)), 0)
        self.assertEqual(len(sparse_match(self.flow, self.pr, self.ref[:1], near, self.config)), 1)

    def test_invalid_flow_support(self):
        """Keypoints touching invalid flow are skipped"""
        flow = self.flow.copy()
        flow.valid[3, 4] = False
        query = np.array([[5.0, 4.0], [7.0, 8.0]])
        matches = sparse_match(flow, self.pr, np.array([[3.5, 3.0], [5.0, 7.0]]), query, self.config)
        np.testing.assert_array_equal(matches.ref_points, [[5.0, 7.0]])

    def test_cyclic_filter_is_subset(self):
        """Only round trips that come back close survive"""
        forward = MatchSet([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]],
                           [[5.0, 5.0], [6.0, 6.0], [7.0, 7.0]], [1.0, 1.0, 1.0])
        backward = MatchSet([[5.0, 5.0], [6.0, 6.0]], [[0.5, 0.0], [10.0, 10.0]], [1.0, 1.0])
        kept = cyclic_filter(forward, backward, 2.0)
        np.testing.assert_array_equal(kept.ref_points, [[0.0, 0.0]])
        np.testing.assert_array_equal(kept.query_points, [[5.0, 5.0]])

    def test_keypoint_grid(self):
        """Grid points stay inside the frame"""
        points = keypoint_grid(10, 6, 4)
        np.testing.assert_array_equal(points, [[0, 0], [4, 0], [8, 0], [0, 4], [4, 4], [8, 4]])


class EstimateFileTest(WorkspaceTestCase):
    """Prediction directories"""

    def test_write_and_read(self):
        """Flow, confidence, variance and backward flow survive storage"""
        rng = np.random.default_rng(0)
        flow = FlowField(rng.normal(size=(4, 5, 2)).astype(np.float32))
        pr = rng.random((4, 5)).astype(np.float32)
        estimate = Estimate(flow, pr, pr + 1.0)
        write_estimate(self.tmp / 'p', estimate, backward=Estimate(flow, None, None))
        loaded, backward = read_estimate(self.tmp / 'p')
        np.testing.assert_array_equal(loaded.flow.vectors, flow.vectors)
        np.testing.assert_array_equal(loaded.pr, pr)
        np.testing.assert_array_equal(backward.vectors, flow.vectors)

    def test_optional_maps(self):
        """Only the flow file is required"""
        write_estimate(self.tmp / 'p', Estimate(FlowField.zeros(3, 3), None, None))
        loaded, backward = read_estimate(self.tmp / 'p')
        self.assertIsNone(loaded.pr)
        self.assertIsNone(loaded.variance)
        self.assertIsNone(backward)
