# experiments/management/commands/augment.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import augment_workflow


class Command(RunCommand):
    help = 'Writes the training samples plus augmented copies as a new dataset.'
    command = CommandEnum.AUGMENT

    def run(self, context, config, **options):
        summary = augment_workflow(config, context.artifacts)
        self.stdout.write(self.style.SUCCESS(f"Augmented dataset has {summary['train']} training samples."))
        return summary
