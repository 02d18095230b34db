from unittest import mock

from django.test import SimpleTestCase

from disc_segmentation.celery import app as celery_app
from experiments.tasks import dispatch_cells


class DispatchCellsTests(SimpleTestCase):

    def setUp(self):
        eager = celery_app.conf.task_always_eager
        self.addCleanup(setattr, celery_app.conf, 'task_always_eager', eager)

    def dispatch(self, cell_ids, jobs):
        with mock.patch('experiments.tasks.group') as group:
            group.return_value.apply_async.return_value.get.side_effect = lambda **kwargs: ['done']
            results = dispatch_cells(cell_ids, jobs=jobs)
        return results, group

    def test_waves_hold_at_most_jobs_cells(self):
        celery_app.conf.task_always_eager = False
        results, group = self.dispatch([1, 2, 3], jobs=2)
        self.assertEqual(results, ['done', 'done'])
        self.assertEqual(group.call_count, 2)

    def test_eager_mode_notes_that_jobs_has_no_effect(self):
        celery_app.conf.task_always_eager = True
        with self.assertLogs('experiments.tasks', level='INFO') as logs:
            self.dispatch([1, 2], jobs=2)
        self.assertIn('one after another', logs.output[0])

    def test_single_job_runs_in_process(self):
        with mock.patch('experiments.tasks.run_experiment_cell', side_effect=lambda cell_id: cell_id) as task:
            self.assertEqual(dispatch_cells([4, 5]), [4, 5])
        self.assertEqual(task.call_count, 2)
