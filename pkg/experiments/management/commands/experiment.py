# experiments/management/commands/experiment.py

from experiments.management.base import RunCommand
from experiments.models import CommandEnum
from experiments.tasks import dispatch_cells
from experiments.workflows import collect_experiment, plan_experiment


class Command(RunCommand):
    help = 'Runs an experiment matrix (modalities, augmentation, 2D axes or all) and tabulates the results.'
    command = CommandEnum.EXPERIMENT

    def add_command_arguments(self, parser):
        parser.add_argument('--matrix', choices=['modalities', 'augmentation', 'axes', 'all'], default='modalities')
        parser.add_argument('--jobs', type=int, default=1, help='Cells run in parallel as Celery tasks when > 1.')

    def run(self, context, config, **options):
        cells = plan_experiment(context, options['matrix'])
        self.stdout.write(self.style.SUCCESS(f"Running {len(cells)} cells of the {options['matrix']} matrix..."))
        dispatch_cells([cell.id for cell in cells], jobs=options['jobs'])
        summary = collect_experiment(context, cells)
        if summary['failed']:
            self.stdout.write(self.style.WARNING(f"{summary['failed']} cells failed; see results.csv."))
        return summary
