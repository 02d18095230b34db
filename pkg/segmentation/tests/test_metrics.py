import itertools
import json
import math

import numpy as np
from django.test import SimpleTestCase, tag

from segmentation.exceptions import DimensionError, EvaluationError
from segmentation.metrics import (
    CSV_COLUMNS,
    DiscRow,
    EvalReport,
    dice,
    evaluate_sample,
    hausdorff,
    localization_report,
    surface_points,
)
from segmentation.phantom import PhantomConfig, generate_phantom
from segmentation.pipeline import component_centers
from segmentation.volume import Volume, VolumeKind


def _cube(dims, lo, hi):
    mask = np.zeros(dims, dtype=np.uint8)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return mask


def _loop_dice(a, b):
    both = total = 0
    for index in itertools.product(*(range(n) for n in a.shape)):
        both += bool(a[index]) and bool(b[index])
        total += bool(a[index]) + bool(b[index])
    return 100.0 if total == 0 else 200.0 * both / total


def _loop_surface(mask):
    points = []
    for index in itertools.product(*(range(n) for n in mask.shape)):
        if not mask[index]:
            continue
        for axis, step in itertools.product(range(3), (-1, 1)):
            neighbour = list(index)
            neighbour[axis] += step
            if not 0 <= neighbour[axis] < mask.shape[axis] or not mask[tuple(neighbour)]:
                points.append(index)
                break
    return points


def _loop_hausdorff(a, b, spacing):
    pa, pb = _loop_surface(a), _loop_surface(b)

    def directed(source, target):
        worst = 0.0
        for p in source:
            best = math.inf
            for q in target:
                best = min(best, math.sqrt(sum(((i - j) * s) ** 2 for i, j, s in zip(p, q, spacing))))
            worst = max(worst, best)
        return worst

    return max(directed(pa, pb), directed(pb, pa))


class DiceTests(SimpleTestCase):

    def test_identical_masks(self):
        mask = _cube((5, 5, 5), (1, 1, 1), (4, 4, 4))
        self.assertEqual(dice(mask, mask), 100.0)

    def test_disjoint_masks(self):
        self.assertEqual(dice(_cube((4, 4, 4), (0, 0, 0), (2, 2, 2)), _cube((4, 4, 4), (2, 2, 2), (4, 4, 4))), 0.0)

    def test_half_overlap(self):
        a = _cube((1, 1, 4), (0, 0, 0), (1, 1, 2))
        b = _cube((1, 1, 4), (0, 0, 1), (1, 1, 3))
        self.assertEqual(dice(a, b), 50.0)

    def test_both_empty(self):
        empty = np.zeros((2, 2, 2))
        self.assertEqual(dice(empty, empty), 100.0)

    def test_dims_must_match(self):
        with self.assertRaises(DimensionError):
            dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = (rng.random((4, 5, 6)) > 0.5).astype(np.uint8)
            b = (rng.random((4, 5, 6)) > 0.5).astype(np.uint8)
            self.assertEqual(dice(a, b), _loop_dice(a, b))


class HausdorffTests(SimpleTestCase):

    def test_surface_of_a_cube(self):
        self.assertEqual(len(surface_points(_cube((5, 5, 5), (1, 1, 1), (4, 4, 4)))), 26)
        self.assertEqual(len(surface_points(_cube((7, 7, 7), (1, 1, 1), (6, 6, 6)))), 98)

    def test_voxels_on_the_grid_border_are_surface(self):
        self.assertEqual(len(surface_points(np.ones((3, 3, 3)))), 26)

    def test_identical_masks(self):
        mask = _cube((6, 6, 6), (1, 1, 1), (4, 4, 4))
        self.assertEqual(hausdorff(mask, mask), 0.0)

    def test_one_voxel_shift_in_millimeters(self):
        a = _cube((6, 8, 8), (1, 1, 1), (4, 4, 4))
        b = _cube((6, 8, 8), (1, 1, 2), (4, 4, 5))
        self.assertAlmostEqual(hausdorff(a, b, spacing=(2.0, 1.25, 1.25)), 1.25)
        c = _cube((6, 8, 8), (1, 1, 3), (4, 4, 6))
        self.assertAlmostEqual(hausdorff(a, c, spacing=(2.0, 1.25, 1.25)), 2.5)

    def test_spacing_comes_from_the_volume(self):
        a = Volume(_cube((6, 6, 6), (1, 1, 1), (4, 4, 4)), (2.0, 1.0, 1.0), VolumeKind.LABEL)
        b = Volume(_cube((6, 6, 6), (2, 1, 1), (5, 4, 4)), (2.0, 1.0, 1.0), VolumeKind.LABEL)
        self.assertAlmostEqual(hausdorff(a, b), 2.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        spacing = (2.0, 1.25, 1.25)
        for _ in range(5):
            a = (rng.random((5, 6, 6)) > 0.6).astype(np.uint8)
            b = (rng.random((5, 6, 6)) > 0.6).astype(np.uint8)
            self.assertAlmostEqual(hausdorff(a, b, spacing), _loop_hausdorff(a, b, spacing), places=12)

    def test_axis_shift_moves_by_the_spacing(self):
        spacing = (2.0, 1.25, 1.25)
        a = _cube((10, 10, 10), (2, 2, 2), (5, 5, 5))
        for axis in range(3):
            for step in (1, 2):
                with self.subTest(axis=axis, step=step):
                    shifted = np.roll(a, step, axis=axis)
                    self.assertEqual(hausdorff(a, shifted, spacing), step * spacing[axis])

    def test_translation_invariance(self):
        a = _cube((8, 8, 8), (1, 2, 1), (4, 5, 3))
        b = _cube((8, 8, 8), (2, 2, 2), (5, 6, 4))
        shifted = [np.roll(m, 2, axis=2) for m in (a, b)]
        self.assertAlmostEqual(hausdorff(a, b), hausdorff(*shifted))

    def test_empty_mask(self):
        with self.assertRaises(EvaluationError):
            hausdorff(np.zeros((3, 3, 3)), _cube((3, 3, 3), (0, 0, 0), (1, 1, 1)))


@tag("slow")
class RandomMaskOracleTests(SimpleTestCase):

    def test_thousand_random_mask_pairs(self):
        rng = np.random.default_rng(2024)
        spacing = (2.0, 1.25, 1.25)
        for trial in range(1000):
            dims = tuple(int(n) for n in rng.integers(1, 9, size=3))
            density = rng.uniform(0.1, 0.9)
            a = (rng.random(dims) < density).astype(np.uint8)
            b = (rng.random(dims) < density).astype(np.uint8)
            with self.subTest(trial=trial):
                self.assertEqual(dice(a, b), _loop_dice(a, b))
                if a.any() and b.any():
                    self.assertAlmostEqual(hausdorff(a, b, spacing), _loop_hausdorff(a, b, spacing), places=12)
                else:
                    with self.assertRaises(EvaluationError):
                        hausdorff(a, b, spacing)


class EvaluateSampleTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.label = generate_phantom(PhantomConfig(seed=1)).label

    def test_identical_prediction(self):
        report = evaluate_sample(self.label, self.label, sample_id="p")
        self.assertEqual(len(report.rows), 7)
        self.assertEqual(report.mean_dice, 100.0)
        self.assertEqual(report.sd_dice, 0.0)
        self.assertEqual(report.mean_hd, 0.0)
        self.assertEqual(report.global_dice, 100.0)
        self.assertEqual([row.disc_index for row in report.rows], list(range(7)))
        ys = [row.center[1] for row in report.rows]
        self.assertEqual(ys, sorted(ys))

    def test_missing_disc_scores_zero(self):
        centers = component_centers(self.label)
        pred = self.label.data[0].copy()
        z, y, x = centers[3]
        pred[:, y - 6:y + 7, :] = 0
        report = evaluate_sample(pred, self.label, sample_id="p")
        missing = report.rows[3]
        self.assertEqual(missing.dice_pct, 0.0)
        self.assertFalse(missing.matched)
        self.assertEqual(report.unmatched, 1)
        self.assertEqual(len(report.hd_values), 6)
        self.assertAlmostEqual(report.mean_dice, 600.0 / 7)

    def test_prediction_beside_the_disc_is_matched(self):
        gt = _cube((10, 10, 12), (3, 3, 3), (6, 6, 6))
        pred = _cube((10, 10, 12), (3, 3, 7), (6, 6, 10))
        row = evaluate_sample(pred, gt).rows[0]
        self.assertTrue(row.matched)
        self.assertEqual(row.dice_pct, 0.0)
        self.assertAlmostEqual(row.hd_mm, 4.0)

    def test_prediction_beyond_the_match_radius(self):
        gt = _cube((10, 10, 16), (3, 3, 3), (6, 6, 6))
        pred = _cube((10, 10, 16), (3, 3, 12), (6, 6, 15))
        report = evaluate_sample(pred, gt)
        self.assertFalse(report.rows[0].matched)
        self.assertTrue(evaluate_sample(pred, gt, match_radius=9.0).rows[0].matched)

    def test_empty_ground_truth(self):
        with self.assertRaises(EvaluationError):
            evaluate_sample(np.zeros((4, 4, 4)), np.zeros((4, 4, 4)))


class EvalReportTests(SimpleTestCase):

    def setUp(self):
        self.report = EvalReport(
            (
                DiscRow("a", 0, 90.0, 1.25),
                DiscRow("a", 1, 80.0, 2.5),
                DiscRow("a", 2, 0.0, None),
            ),
            global_dice=85.0,
        )

    def test_aggregates_use_population_sd(self):
        self.assertAlmostEqual(self.report.mean_dice, 170.0 / 3)
        self.assertAlmostEqual(self.report.sd_dice, np.std([90.0, 80.0, 0.0]))
        self.assertAlmostEqual(self.report.mean_hd, 1.875)
        self.assertAlmostEqual(self.report.sd_hd, 0.625)

    def test_csv_round_trip(self):
        text = self.report.to_csv()
        self.assertEqual(text.splitlines()[0], ",".join(CSV_COLUMNS))
        self.assertEqual(text.splitlines()[1], "a,0,90.000000,1.250000")
        again = EvalReport.from_csv(text)
        self.assertEqual([(r.sample_id, r.disc_index, r.dice_pct, r.hd_mm) for r in again.rows],
                         [(r.sample_id, r.disc_index, r.dice_pct, r.hd_mm) for r in self.report.rows])

    def test_json_summary(self):
        data = json.loads(self.report.to_json())
        self.assertEqual(data["discs"], 3)
        self.assertEqual(data["unmatched"], 1)
        self.assertEqual(data["global_dice"], 85.0)

    def test_merge_pools_discs(self):
        other = EvalReport((DiscRow("b", 0, 100.0, 0.0),), global_dice=95.0)
        merged = EvalReport.merge([self.report, other])
        self.assertEqual(len(merged.rows), 4)
        self.assertEqual(merged.global_dice, 90.0)


class LocalizationReportTests(SimpleTestCase):

    def test_distances_and_detection(self):
        report = localization_report([(10, 20, 30), (10, 40, 30)], [(10, 21, 30), (10, 44, 30), (10, 90, 30)], (2.0, 1.25, 1.25))
        self.assertEqual(report.total, 3)
        self.assertEqual(report.detected, 1)
        self.assertEqual(report.distances_voxels, (1.0, 4.0, 50.0))
        self.assertAlmostEqual(report.distances_mm[0], 1.25)
        self.assertAlmostEqual(report.distances_mm[1], 5.0)
        self.assertAlmostEqual(report.detection_rate, 1 / 3)

    def test_radius_is_in_voxels_on_anisotropic_grids(self):
        gt = [(10, 20, 30), (10, 40, 30)]
        pred = [(13, 20, 30), (10, 40, 34)]
        report = localization_report(pred, gt, (2.0, 1.25, 1.25))
        # 3 voxels along z is 6 mm, 4 voxels along x only 5 mm
        self.assertEqual(report.distances_mm, (6.0, 5.0))
        self.assertEqual(report.detected, 1)
        self.assertEqual(localization_report(pred, gt, (2.0, 1.25, 1.25), radius_voxels=4).detected, 2)

    def test_nothing_predicted(self):
        report = localization_report([], [(1, 2, 3)], (1.0, 1.0, 1.0))
        self.assertEqual(report.detected, 0)
        self.assertIsNone(report.mean_mm)
        self.assertEqual(report.as_dict()["distances_mm"], [None])

    def test_needs_ground_truth(self):
        with self.assertRaises(EvaluationError):
            localization_report([(1, 1, 1)], [], (1.0, 1.0, 1.0))
