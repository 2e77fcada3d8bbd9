from django.test import SimpleTestCase
from rest_framework.serializers import ValidationError

from app.utils.monitoring import StageMonitor
from correspondence.config import RunConfig

from .utils import WorkspaceTestCase


class RunConfigTest(SimpleTestCase):
    """Defaults, overrides and validation of run configurations"""

    def test_documented_defaults(self):
        """Defaults follow the published constants"""
        config = RunConfig.defaults()
        self.assertEqual(config.gamma, 0.1)
        self.assertEqual(config.radius, 1.0)
        self.assertEqual(config.search_radius, 4)
        self.assertEqual(config.inlier_threshold, 1.0)
        self.assertEqual(config.sigma1, 1.0)
        self.assertEqual(config.beta2_minus, 2.0)
        self.assertEqual(config.weight_decay, 4e-4)
        self.assertEqual(config.keypoint_distance, 4.0)
        self.assertEqual(config.ms_ratios, (0.5, 0.88, 1.0, 1.33, 1.66, 2.0))
        self.assertEqual(config.constraint_spec().bounds, ((1.0, 1.0), (2.0, 4096.0)))

    def test_mixture_variants(self):
        """Three-component and unconstrained mixtures build their own specs"""
        three = RunConfig.load(overrides={'mixture': 'three_component'}).constraint_spec()
        self.assertEqual(three.bounds[2], (4096.0, 4096.0))
        free = RunConfig.load(overrides={'mixture': 'unconstrained', 'beta2_plus': '100'})
        self.assertFalse(free.constraint_spec().ordered)

    def test_overrides_are_parsed(self):
        """String overrides are typed by the serializer"""
        config = RunConfig.load(overrides={'seed': '7', 'ms_ratios': '1.0', 'loss_weights': '1,0'})
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.ms_ratios, (1.0,))
        self.assertEqual(config.loss_weights, (1.0, 0.0))

    def test_none_overrides_are_ignored(self):
        """Unset flags keep the default"""
        self.assertEqual(RunConfig.load(overrides={'seed': None}).seed, 0)

    def test_unknown_key(self):
        """Typos are reported instead of silently ignored"""
        with self.assertRaises(ValidationError):
            RunConfig.load(overrides={'gama': '0.2'})

    def test_invalid_values(self):
        """Field and cross-field checks reject bad values"""
        for overrides in ({'gamma': '1.0'}, {'image_height': '30'}, {'radius': '0'},
                          {'mask_std_min': '8', 'mask_std_max': '2'},
                          {'reference_only_probability': '0.6', 'query_only_probability': '0.6'},
                          {'lr_milestones': '0.8,0.5'}, {'flow_widths': '6'}):
            with self.assertRaises(ValidationError, msg=str(overrides)):
                RunConfig.load(overrides=overrides)

    def test_hash_ignores_threads(self):
        """Thread count cannot change results, so it does not change the hash"""
        base = RunConfig.defaults()
        self.assertEqual(base.config_hash(), base.replace(threads=8).config_hash())
        self.assertNotEqual(base.config_hash(), base.replace(seed=1).config_hash())

    def test_unknown_attribute(self):
        """Missing names raise AttributeError"""
        with self.assertRaises(AttributeError):
            RunConfig.defaults().not_a_setting


class ConfigFileTest(WorkspaceTestCase):
    """key=value files merged with overrides"""

    def test_file_then_overrides(self):
        """Flags override file values"""
        path = self.tmp / 'run.cfg'
        path.write_text("# run\nseed = 4\ngamma = 0.3\n", encoding='utf-8')
        config = RunConfig.load(str(path), {'gamma': '0.2'})
        self.assertEqual(config.seed, 4)
        self.assertEqual(config.gamma, 0.2)


class StageMonitorTest(SimpleTestCase):
    """Stage timing logs"""

    def test_logs_duration(self):
        """Completed stages are logged with their duration"""
        with self.assertLogs('app.utils.monitoring', level='INFO') as logs:
            with StageMonitor('gendata') as monitor:
                pass
        self.assertIsNotNone(monitor.duration)
        self.assertIn('Stage: gendata', logs.output[0])

    def test_slow_stage_warning(self):
        """Stages over the threshold are flagged"""
        with self.assertLogs('app.utils.monitoring', level='WARNING') as logs:
            with StageMonitor('train', slow_threshold=-1.0):
                pass
        self.assertIn('Slow stage detected: train', logs.output[0])

    def test_exceptions_propagate(self):
        """Failures are logged and re-raised"""
        with self.assertLogs('app.utils.monitoring', level='ERROR'):
            with self.assertRaises(RuntimeError):
                with StageMonitor('infer'):
                    raise RuntimeError('boom')
