# experiments/management/commands/predict.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import load_network, predict_workflow


class Command(RunCommand):
    help = 'Runs localization, patch segmentation and reassembly on the validation samples.'
    command = CommandEnum.PREDICT

    def add_command_arguments(self, parser):
        parser.add_argument('--localizer', required=True, help='Localizer checkpoint, or the train run directory holding best.mck.')
        parser.add_argument('--segmenter', required=True, help='Segmenter checkpoint, or the train run directory holding best.mck.')

    def run(self, context, config, **options):
        localizer = load_network(options['localizer'])
        segmenter = load_network(options['segmenter'])
        summary = predict_workflow(config, context.artifacts, localizer, segmenter)
        if not summary['discs']:
            self.stdout.write(self.style.WARNING('No discs were localized.'))
        return summary
