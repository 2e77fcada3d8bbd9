from django.core.management.base import CommandError

from correspondence.exceptions import EXIT_CODES, USAGE
from correspondence.formats import read_image, read_keypoints, write_matches
from correspondence.inference import (
    MODES, Estimator, InferenceConfig, cyclic_filter, extract_matches, keypoint_grid, run_mode,
    sparse_match,
)
from correspondence.management.base import CorrespondenceCommand
from correspondence.model import ModelWeights


class Command(CorrespondenceCommand):
    help = 'Extract confident correspondences from the estimated flow of an image pair'

    def add_command_arguments(self, parser):
        parser.add_argument('--weights', required=True, help='trained weights.pdcw')
        parser.add_argument('--query', required=True, help='query image (PPM or PNG)')
        parser.add_argument('--reference', required=True, help='reference image (PPM or PNG)')
        parser.add_argument('--output', required=True, help='match CSV to write')
        parser.add_argument('--mode', choices=MODES, default='D')
        parser.add_argument('--ref-keypoints', dest='ref_keypoints',
                            help='reference keypoints CSV (x,y)')
        parser.add_argument('--query-keypoints', dest='query_keypoints',
                            help='query keypoints CSV (x,y)')
        parser.add_argument('--keypoint-spacing', dest='keypoint_spacing', type=int,
                            help='use a regular keypoint grid with this spacing in both images')
        parser.add_argument('--cyclic', action='store_true',
                            help='keep only keypoint matches that survive the reverse direction')

    def keypoints(self, options, width, height):
        if options.get('ref_keypoints') or options.get('query_keypoints'):
            if not (options.get('ref_keypoints') and options.get('query_keypoints')):
                raise CommandError("usage_error: give both --ref-keypoints and --query-keypoints",
                                   returncode=EXIT_CODES[USAGE])
            return read_keypoints(options['ref_keypoints']), read_keypoints(options['query_keypoints'])
        if options.get('keypoint_spacing'):
            grid = keypoint_grid(width, height, options['keypoint_spacing'])
            return grid, grid
        return None

    def run(self, config, **options):
        weights = ModelWeights.load(options['weights'])
        estimator = Estimator(weights, radius=config.radius)
        inference_config = InferenceConfig.from_config(config)
        query = read_image(options['query'])
        reference = read_image(options['reference'])
        height, width = reference.shape[:2]

        estimate = run_mode(options['mode'], query, reference, estimator, inference_config)
        keypoints = self.keypoints(options, width, height)
        if keypoints is None:
            if options['cyclic']:
                raise CommandError("usage_error: --cyclic needs keypoints",
                                   returncode=EXIT_CODES[USAGE])
            matches = extract_matches(estimate.flow, estimate.pr, inference_config.gamma).canonical()
        else:
            ref_keypoints, query_keypoints = keypoints
            matches = sparse_match(estimate.flow, estimate.pr, ref_keypoints, query_keypoints,
                                   inference_config)
            if options['cyclic']:
                reverse = run_mode(options['mode'], reference, query, estimator, inference_config)
                reverse_matches = sparse_match(reverse.flow, reverse.pr, query_keypoints,
                                               ref_keypoints, inference_config)
                matches = cyclic_filter(matches, reverse_matches, inference_config.cyclic_threshold)

        write_matches(options['output'], matches.ref_points, matches.query_points,
                      matches.confidence)
        return f"Wrote {len(matches)} matches to {options['output']}"
