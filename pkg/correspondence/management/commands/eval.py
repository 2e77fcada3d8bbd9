import logging
from pathlib import Path

import numpy as np
from django.core.management.base import CommandError

from app.utils.workers import parallel_map
from correspondence.datagen import list_samples, load_sample
from correspondence.exceptions import EXIT_CODES, USAGE
from correspondence.formats import read_flo, write_metrics_csv
from correspondence.inference import FLOW_NAME
from correspondence.management.base import CorrespondenceCommand
from correspondence.metrics import flow_metrics

logger = logging.getLogger(__name__)

AGGREGATE_NAME = 'mean'


def aggregate_row(rows, fieldnames):
    """Mean of every metric over pairs; pixel counts are summed"""
    aggregate = {'sample': AGGREGATE_NAME}
    for name in fieldnames[1:]:
        values = np.array([row[name] for row in rows], dtype=np.float64)
        if name == 'valid_pixels':
            aggregate[name] = int(values.sum())
        else:
            finite = values[np.isfinite(values)]
            aggregate[name] = float(finite.mean()) if finite.size else float('nan')
    return aggregate


class Command(CorrespondenceCommand):
    help = 'Compute AEPE, PCK and Fl per pair plus an aggregate row'

    def add_command_arguments(self, parser):
        parser.add_argument('--output', required=True, help='metrics CSV to write')
        parser.add_argument('--pred', help='prediction directory from infer --data')
        parser.add_argument('--data', help='dataset directory with ground truth')
        parser.add_argument('--flow', help='single estimated .flo file')
        parser.add_argument('--gt', help='single ground-truth .flo file')

    def run(self, config, **options):
        thresholds = config.pck_thresholds
        if options.get('flow') and options.get('gt'):
            pairs = [('pair', lambda: (read_flo(options['flow']), read_flo(options['gt'])))]
        elif options.get('pred') and options.get('data'):
            pred_root = Path(options['pred'])
            pairs = [
                (path.name,
                 lambda path=path: (read_flo(pred_root / path.name / FLOW_NAME),
                                    load_sample(path).gt_flow))
                for path in list_samples(options['data'])
            ]
        else:
            raise CommandError("usage_error: give --pred and --data, or --flow and --gt",
                               returncode=EXIT_CODES[USAGE])

        def evaluate(pair):
            name, load = pair
            estimate, truth = load()
            row = {'sample': name}
            row.update(flow_metrics(estimate, truth, pck_thresholds=thresholds))
            return row

        rows = parallel_map(evaluate, pairs, config.threads or None, progress='eval')
        fieldnames = list(rows[0].keys())
        aggregate = aggregate_row(rows, fieldnames)
        write_metrics_csv(options['output'], rows + [aggregate], fieldnames)
        logger.info(f"Aggregate over {len(rows)} pairs: AEPE {aggregate['aepe']:.4f} px")
        return f"Wrote metrics for {len(rows)} pairs to {options['output']}"
