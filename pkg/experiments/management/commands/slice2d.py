# experiments/management/commands/slice2d.py

from segmentation.exceptions import ConfigError
from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import slice2d_workflow


class Command(RunCommand):
    help = 'Trains 2D networks on slices along one axis (or all three, fused) and evaluates them.'
    command = CommandEnum.SLICE2D

    def add_command_arguments(self, parser):
        parser.add_argument('--axis', choices=['x', 'y', 'z', 'all'], help='Defaults to the slice_axis config key.')
        parser.add_argument('--checkpoint', help='Use this 2D checkpoint instead of training (single axis only).')

    def check_options(self, options):
        if options['checkpoint'] and options['axis'] == 'all':
            raise ConfigError('--checkpoint needs a single --axis.', field='checkpoint')

    def run(self, context, config, **options):
        axis = options['axis'] or config.slice_axis
        axes = ['x', 'y', 'z'] if axis == 'all' else [axis]
        return slice2d_workflow(config, context.artifacts, axes, checkpoint=options['checkpoint'])
