from django.test import SimpleTestCase

from experiments.models import ExperimentCell, MatrixEnum, RunStatusEnum
from experiments.workflows import augmentation_gain


def _cell(label, mean_dice, status=RunStatusEnum.COMPLETED, matrix=MatrixEnum.AUGMENTATION):
    return ExperimentCell(matrix=matrix.name, label=label, status=status.name, mean_dice=mean_dice)


class AugmentationGainTests(SimpleTestCase):

    def test_augmented_minus_not_augmented(self):
        cells = [_cell('augmented', 88.25), _cell('not-augmented', 86.0)]
        self.assertEqual(augmentation_gain(cells), 2.25)

    def test_needs_both_cells_completed(self):
        cells = [_cell('augmented', 88.0), _cell('not-augmented', None, status=RunStatusEnum.FAILED)]
        self.assertIsNone(augmentation_gain(cells))

    def test_other_matrices_are_ignored(self):
        cells = [_cell('opp-wat', 80.0, matrix=MatrixEnum.MODALITIES)]
        self.assertIsNone(augmentation_gain(cells))
