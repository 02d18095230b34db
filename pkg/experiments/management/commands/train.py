# experiments/management/commands/train.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum, RunEventTypeEnum
from experiments.workflows import train_workflow


class Command(RunCommand):
    help = 'Trains the localization network (--stage loc) or the patch segmentation network (--stage seg).'
    command = CommandEnum.TRAIN

    def add_command_arguments(self, parser):
        parser.add_argument('--stage', choices=['loc', 'seg'], required=True)
        parser.add_argument('--resume', help='last.mck of an interrupted run to continue from.')

    def run(self, context, config, **options):
        self.stdout.write(self.style.SUCCESS(f"Training stage {options['stage']} on {','.join(config.modalities)}..."))
        summary = train_workflow(config, context.artifacts, options['stage'], resume=options['resume'])
        context.event(RunEventTypeEnum.CHECKPOINT_WRITTEN, file='best.mck', best_epoch=summary['best_epoch'])
        if summary['stopped_early']:
            self.stdout.write(self.style.WARNING(f"Stopped early after {summary['epochs']} epochs."))
        return summary
