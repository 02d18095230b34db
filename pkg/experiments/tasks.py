# experiments/tasks.py
import logging

from celery import current_app, group, shared_task

from .models import ExperimentCell, RunEvent, RunEventTypeEnum, RunStatusEnum
from .workflows import execute_cell, timed

logger = logging.getLogger(__name__)


@shared_task
def run_experiment_cell(cell_id):
    """
    A Celery task that trains and evaluates one experiment matrix cell.
    Failures are stored on the cell so the rest of the matrix continues.
    """
    try:
        cell = ExperimentCell.objects.select_related('run').get(id=cell_id)
        cell.status = RunStatusEnum.PROCESSING.name
        cell.save()

        summary, wall_time = timed(execute_cell, cell)

        cell.mean_dice = summary['mean_dice']
        cell.sd_dice = summary['sd_dice']
        cell.mean_hd = summary['mean_hd']
        cell.sd_hd = summary['sd_hd']
        cell.wall_time = wall_time
        cell.status = RunStatusEnum.COMPLETED.name
        cell.save()
        RunEvent.objects.create(
            run=cell.run,
            event_type=RunEventTypeEnum.CELL_COMPLETED.name,
            details={'cell': cell.label, 'mean_dice': cell.mean_dice},
        )

    except Exception as e:
        # If anything goes wrong, mark the cell as failed
        logger.exception("Experiment cell %s failed.", cell_id)
        if 'cell' in locals():
            cell.status = RunStatusEnum.FAILED.name
            cell.error = str(e)
            cell.save()
            RunEvent.objects.create(
                run=cell.run,
                event_type=RunEventTypeEnum.CELL_FAILED.name,
                details={'cell': cell.label, 'error': str(e)},
            )

    return f"Experiment cell {cell_id} processing finished."


def dispatch_cells(cell_ids, jobs=1):
    """Run cells one after another, or in Celery groups of at most `jobs` cells."""
    if jobs <= 1:
        return [run_experiment_cell(cell_id) for cell_id in cell_ids]
    if current_app.conf.task_always_eager:
        logger.info("Celery runs tasks eagerly; %d cells run one after another despite --jobs %d.", len(cell_ids), jobs)
    results = []
    for start in range(0, len(cell_ids), jobs):
        wave = group(run_experiment_cell.s(cell_id) for cell_id in cell_ids[start:start + jobs])
        results += wave.apply_async().get(disable_sync_subtasks=False)
    return results
