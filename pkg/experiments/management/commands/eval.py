# experiments/management/commands/eval.py

from segmentation.exceptions import ConfigError
from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import evaluate_artifacts


class Command(RunCommand):
    help = 'Computes per-disc Dice and Hausdorff distance for a prediction run or an explicit pred/gt pair.'
    command = CommandEnum.EVAL

    def add_command_arguments(self, parser):
        parser.add_argument('--run', help='Run directory holding pred/ and gt/ volumes.')
        parser.add_argument('--pred', help='Predicted label volume (MVL1).')
        parser.add_argument('--gt', help='Ground-truth label volume (MVL1).')

    def check_options(self, options):
        if not options['run'] and not (options['pred'] and options['gt']):
            raise ConfigError('Pass --run, or both --pred and --gt.', field='run')

    def run(self, context, config, **options):
        summary = evaluate_artifacts(context.artifacts, source=options['run'], pred=options['pred'], gt=options['gt'])
        self.stdout.write(self.style.SUCCESS(f"Mean dice {summary['mean_dice']:.2f} over {summary['discs']} discs."))
        return summary
