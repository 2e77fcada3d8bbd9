import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from correspondence.config import RunConfig

SMALL_SETTINGS = {
    'num_samples': 4,
    'image_height': 32,
    'image_width': 32,
    'crop_margin': 8,
    'feature_channels': 4,
    'flow_widths': '6,4',
    'cum_hidden': 3,
    'cum_out': 2,
    'predictor_widths': '4,3',
    'search_radius': 2,
    'iterations': 3,
    'batch_size': 2,
    'val_fraction': 0.25,
    'log_every': 1,
    'checkpoint_every': 2,
    'ransac_iters': 200,
}


def small_config(**changes) -> RunConfig:
    """A configuration small enough to generate, train and infer in a unit test"""
    return RunConfig.load(overrides={**SMALL_SETTINGS, **changes})


class WorkspaceTestCase(SimpleTestCase):
    """Gives every test a fresh temporary directory in ``self.tmp``"""

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
