import logging
from pathlib import Path

import numpy as np

from app.utils.workers import parallel_map
from correspondence.datagen import list_samples, load_sample
from correspondence.exceptions import DatasetEmpty, FormatError
from correspondence.formats import write_curve_csv
from correspondence.geometry import fb_consistency_error
from correspondence.inference import BACKWARD_NAME, PR_NAME, VARIANCE_NAME, read_estimate
from correspondence.management.base import CorrespondenceCommand
from correspondence.metrics import (
    average_curves, ause, endpoint_errors, oracle, random_ranking, sparsification,
)

logger = logging.getLogger(__name__)

RANKINGS = ('pr', 'variance', 'fb', 'random')


def uncertainty_map(rank: str, estimate, backward, directory: Path) -> np.ndarray:
    """Per-pixel score where larger means removed earlier"""
    if rank == 'pr':
        if estimate.pr is None:
            raise FormatError(f"{directory}: missing {PR_NAME}")
        return -estimate.pr
    if rank == 'variance':
        if estimate.variance is None:
            raise FormatError(f"{directory}: missing {VARIANCE_NAME}")
        return estimate.variance
    if rank == 'fb':
        if backward is None:
            raise FormatError(f"{directory}: missing {BACKWARD_NAME}; run infer with --backward")
        error = fb_consistency_error(estimate.flow, backward)
        finite = error[np.isfinite(error)]
        ceiling = (finite.max() if finite.size else 0.0) + 1.0
        return np.where(np.isfinite(error), error, ceiling)
    raise ValueError(f"unknown ranking {rank!r}")


def curve_path(output: Path, suffix: str) -> Path:
    return output.with_name(f"{output.stem}_{suffix}{output.suffix}")


class Command(CorrespondenceCommand):
    help = 'Sparsification curves of stored predictions and their AUSE against the error oracle'

    def add_command_arguments(self, parser):
        parser.add_argument('--pred', required=True, help='prediction directory from infer --data')
        parser.add_argument('--data', required=True, help='dataset directory with ground truth')
        parser.add_argument('--output', required=True, help='curve CSV for the chosen ranking')
        parser.add_argument('--rank', choices=RANKINGS, default='pr',
                            help='uncertainty measure used to order the removal')
        parser.add_argument('--metric', choices=('aepe', 'outlier'), default='aepe',
                            help='AEPE or the percentage of pixels above --outlier-threshold')
        parser.add_argument('--outlier-threshold', dest='outlier_threshold', type=float,
                            default=5.0)

    def run(self, config, **options):
        pred_root = Path(options['pred'])
        rank = options['rank']
        threshold = options['outlier_threshold'] if options['metric'] == 'outlier' else None
        steps = config.sparsification_steps
        samples = list_samples(options['data'])

        def curves(item):
            index, path = item
            estimate, backward = read_estimate(pred_root / path.name)
            truth = load_sample(path).gt_flow
            mask = truth.valid & estimate.flow.valid
            if not mask.any():
                return None
            errors = endpoint_errors(estimate.flow, truth)
            if rank == 'random':
                ranking = random_ranking(errors.size, np.random.default_rng([config.seed, index]))
            else:
                ranking = uncertainty_map(rank, estimate, backward, pred_root / path.name)[mask]
            return (sparsification(errors, ranking, steps, threshold),
                    oracle(errors, steps, threshold))

        results = [r for r in parallel_map(curves, list(enumerate(samples)),
                                           config.threads or None, progress='sparsify') if r]
        if not results:
            raise DatasetEmpty(f"no pair in {options['data']} has valid ground truth")

        ranked = average_curves(r[0] for r in results)
        best = average_curves(r[1] for r in results)
        area = ause(ranked, best)

        output = Path(options['output'])
        write_curve_csv(output, ranked.fractions, ranked.values)
        write_curve_csv(curve_path(output, 'oracle'), best.fractions, best.values)
        logger.info(f"AUSE ({rank}, {options['metric']}) over {len(results)} pairs: {area:.6f}")
        return f"AUSE={area:.6f} rank={rank} pairs={len(results)} curve={output}"
