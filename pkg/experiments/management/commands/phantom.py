# experiments/management/commands/phantom.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.workflows import phantom_workflow


class Command(RunCommand):
    help = 'Generates the synthetic Dixon phantom dataset (MVL1 volumes plus a manifest).'
    command = CommandEnum.PHANTOM

    def run(self, context, config, **options):
        self.stdout.write(self.style.SUCCESS(f'Generating {config.phantom_samples} phantom samples...'))
        return phantom_workflow(config, context.artifacts)
