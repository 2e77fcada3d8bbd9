import logging

from django.core.management.base import BaseCommand, CommandError
from rest_framework.serializers import ValidationError

from app.utils.monitoring import StageMonitor
from correspondence.config import RunConfig
from correspondence.exceptions import EXIT_CODES, IO, USAGE, CorrespondenceError

logger = logging.getLogger(__name__)


def _flatten_detail(detail) -> str:
    if isinstance(detail, dict):
        return '; '.join(f"{key}: {_flatten_detail(value)}" for key, value in detail.items())
    if isinstance(detail, (list, tuple)):
        return ' '.join(_flatten_detail(item) for item in detail)
    return str(detail)


def parse_assignments(assignments) -> dict:
    """``key=value`` strings from repeated --set flags"""
    values = {}
    for item in assignments or []:
        key, sep, value = item.partition('=')
        if not sep or not key.strip():
            raise CommandError(f"usage_error: --set expects key=value, got {item!r}",
                               returncode=EXIT_CODES[USAGE])
        values[key.strip()] = value.strip()
    return values


class CorrespondenceCommand(BaseCommand):
    """
    Shared flags, run-config loading, stage timing and error mapping for every subcommand.

    Subclasses implement ``run(config, **options)`` and may return a success message.
    """

    stage = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='key=value run configuration file')
        parser.add_argument('--seed', type=int, help='random seed (overrides the config file)')
        parser.add_argument('--threads', type=int,
                            help='worker threads (default: UNCERTFLOW_THREADS, then logical cores)')
        parser.add_argument('--set', action='append', dest='assignments', metavar='KEY=VALUE',
                            help='override one configuration value; may be repeated')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def config_overrides(self, options) -> dict:
        """Extra configuration values derived from subcommand flags"""
        return {}

    def handle(self, *args, **options):
        stage = self.stage or self.__class__.__module__.rsplit('.', 1)[-1]
        try:
            overrides = parse_assignments(options.get('assignments'))
            overrides.update({
                'seed': options.get('seed'),
                'threads': options.get('threads'),
            })
            overrides.update(self.config_overrides(options))
            config = RunConfig.load(options.get('config'), overrides)
            with StageMonitor(stage):
                run_options = {key: value for key, value in options.items() if key != 'config'}
                message = self.run(config, **run_options)
        except ValidationError as e:
            raise CommandError(f"usage_error: {_flatten_detail(e.detail)}",
                               returncode=EXIT_CODES[USAGE])
        except CorrespondenceError as e:
            raise CommandError(f"{e.category}_error: {e}", returncode=e.exit_code)
        except OSError as e:
            raise CommandError(f"io_error: {e}", returncode=EXIT_CODES[IO])
        except ValueError as e:
            raise CommandError(f"usage_error: {e}", returncode=EXIT_CODES[USAGE])

        if message:
            self.stdout.write(self.style.SUCCESS(f"✅ {message}"))

    def run(self, config: RunConfig, **options):
        raise NotImplementedError
