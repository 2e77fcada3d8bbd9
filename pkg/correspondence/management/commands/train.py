from pathlib import Path

import numpy as np

from correspondence.management.base import CorrespondenceCommand
from correspondence.model import ModelWeights
from correspondence.training import train


class Command(CorrespondenceCommand):
    help = 'Train the matcher on a generated dataset and write weights.pdcw'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='dataset directory from gendata')
        parser.add_argument('--output', required=True, help='directory for checkpoints and weights')
        parser.add_argument('--iterations', type=int, help='training iterations')
        parser.add_argument('--init', help='checkpoint to resume from')

    def config_overrides(self, options):
        return {'iterations': options.get('iterations')}

    def run(self, config, **options):
        initial = ModelWeights.load(options['init']) if options.get('init') else None
        rng = np.random.default_rng([config.seed, 1])
        output = Path(options['output'])
        result = train(options['data'], config, rng, output_dir=output, initial=initial)
        return (
            f"Trained {config.iterations} iterations; validation AEPE {result.final_aepe:.3f} px; "
            f"weights in {output / 'weights.pdcw'}"
        )
