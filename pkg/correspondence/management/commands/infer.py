import logging
from pathlib import Path

from django.core.management.base import CommandError

from app.utils.workers import parallel_map
from correspondence.datagen import list_samples, load_sample
from correspondence.exceptions import EXIT_CODES, USAGE
from correspondence.formats import read_image
from correspondence.inference import (
    MODES, Estimator, InferenceConfig, run_mode, write_estimate,
)
from correspondence.management.base import CorrespondenceCommand
from correspondence.model import ModelWeights

logger = logging.getLogger(__name__)


def predict_pair(query, reference, estimator, config, mode, backward=False):
    estimate = run_mode(mode, query, reference, estimator, config)
    reverse = run_mode(mode, reference, query, estimator, config) if backward else None
    return estimate, reverse


class Command(CorrespondenceCommand):
    help = 'Estimate dense flow with confidence for one image pair or a whole dataset'

    def add_command_arguments(self, parser):
        parser.add_argument('--weights', required=True, help='trained weights.pdcw')
        parser.add_argument('--output', required=True, help='prediction directory')
        parser.add_argument('--mode', choices=MODES, default='D',
                            help='D: single pass, H: homography then refine, MS: multi-scale H')
        parser.add_argument('--ratios', help='comma-separated scale ratios for --mode MS')
        parser.add_argument('--query', help='query image (PPM or PNG)')
        parser.add_argument('--reference', help='reference image (PPM or PNG)')
        parser.add_argument('--data', help='dataset directory; predicts every sample')
        parser.add_argument('--backward', action='store_true',
                            help='also write the query-to-reference flow')

    def config_overrides(self, options):
        return {'ms_ratios': options.get('ratios')}

    def run(self, config, **options):
        single = options.get('query') or options.get('reference')
        if bool(single) == bool(options.get('data')) or (
                single and not (options.get('query') and options.get('reference'))):
            raise CommandError(
                "usage_error: give either --query and --reference, or --data",
                returncode=EXIT_CODES[USAGE],
            )

        weights = ModelWeights.load(options['weights'])
        estimator = Estimator(weights, radius=config.radius)
        inference_config = InferenceConfig.from_config(config)
        mode = options['mode']
        output = Path(options['output'])

        if single:
            query = read_image(options['query'])
            reference = read_image(options['reference'])
            estimate, reverse = predict_pair(query, reference, estimator, inference_config, mode,
                                             options['backward'])
            write_estimate(output, estimate, reverse)
            return f"Wrote {mode} prediction to {output}"

        samples = list_samples(options['data'])

        def predict(path):
            pack = load_sample(path)
            estimate, reverse = predict_pair(pack.query, pack.reference, estimator,
                                             inference_config, mode, options['backward'])
            write_estimate(output / path.name, estimate, reverse)
            return estimate.fallback

        fallbacks = parallel_map(predict, samples, config.threads or None, progress='infer')
        if any(fallbacks):
            logger.info(f"{sum(fallbacks)} of {len(samples)} pairs kept the single-pass flow")
        return f"Wrote {mode} predictions for {len(samples)} pairs to {output}"
