# experiments/management/base.py
import logging

from django.core.management.base import BaseCommand, CommandError

from disc_segmentation.utils import generate_command_response
from segmentation.exceptions import SegmentationError
from experiments.runconfig import load_run_config
from experiments.workflows import RunContext

logger = logging.getLogger(__name__)


class RunCommand(BaseCommand):
    """
    A command that runs one workflow inside a run directory. Every failure
    ends with a CommandError whose message is a single line of JSON.
    """
    command = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help='RunConfig file (`key = value` lines). Defaults apply when omitted.')
        parser.add_argument(
            '--set', action='append', default=[], metavar='KEY=VALUE',
            help='Override one RunConfig key; may be repeated.',
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def check_options(self, options):
        """Reject option combinations before a run directory is created."""

    def run(self, context, config, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            self.check_options(options)
            config = load_run_config(options['config'], options['set'])
            with RunContext.start(self.command, config) as context:
                run_options = {k: v for k, v in options.items() if k != 'config'}
                summary = self.run(context, config, **run_options)
                context.complete(summary)
        except SegmentationError as e:
            raise CommandError(generate_command_response(False, e.code, e.message, e.as_dict()))
        except OSError as e:
            raise CommandError(generate_command_response(False, 'path_error', str(e), {'path': e.filename}))
        except Exception as e:
            logger.debug("Unexpected failure in %s.", self.command.value, exc_info=True)
            raise CommandError(generate_command_response(
                False, 'internal_error', str(e) or type(e).__name__, {'type': type(e).__name__},
            ))

        self.stdout.write(self.style.SUCCESS(f'{self.command.value} finished in {context.run.run_dir}'))
        self.stdout.write(generate_command_response(
            message=f'{self.command.value} completed',
            data={'run_dir': context.run.run_dir, 'config_hash': config.hash, **summary},
        ))
