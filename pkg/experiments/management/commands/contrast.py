# experiments/management/commands/contrast.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import contrast_workflow


class Command(RunCommand):
    help = 'Reports foreground/background statistics and Weber contrast per modality.'
    command = CommandEnum.CONTRAST

    def run(self, context, config, **options):
        return contrast_workflow(config, context.artifacts)
