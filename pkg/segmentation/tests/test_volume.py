import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from segmentation.exceptions import ContractError, DimensionError, FormatError
from segmentation.volume import (
    HEADER,
    BoxRegion,
    MultiModalSample,
    Volume,
    VolumeKind,
    crop_box,
    crop_to,
    load_volume,
    normalize_sample,
    pad_to,
    save_volume,
    slice_along_axis,
    stack_slices,
)


class VolumeModelTests(SimpleTestCase):

    def test_three_dimensional_data_gets_a_channel_axis(self):
        v = Volume(np.zeros((2, 3, 4)))
        self.assertEqual(v.dims, (1, 2, 3, 4))
        self.assertEqual(v.data.dtype, np.float32)

    def test_label_values_are_restricted(self):
        with self.assertRaises(ContractError):
            Volume(np.full((1, 2, 2, 2), 2), kind=VolumeKind.LABEL)

    def test_probability_range_is_checked(self):
        with self.assertRaises(ContractError):
            Volume(np.full((1, 2, 2, 2), 1.5), kind=VolumeKind.PROBABILITY)

    def test_spacing_must_be_positive(self):
        with self.assertRaises(ContractError):
            Volume(np.zeros((1, 2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_data_is_read_only(self):
        v = Volume(np.zeros((1, 2, 2, 2)))
        with self.assertRaises(ValueError):
            v.data[0, 0, 0, 0] = 1

    def test_sample_members_must_agree(self):
        a = Volume(np.zeros((1, 2, 2, 2)))
        b = Volume(np.zeros((1, 2, 2, 3)))
        with self.assertRaises(DimensionError):
            MultiModalSample({"fat": a, "wat": b})

    def test_sample_rejects_unknown_modality(self):
        with self.assertRaises(ContractError):
            MultiModalSample({"t1": Volume(np.zeros((1, 2, 2, 2)))})

    def test_stack_uses_canonical_order(self):
        fat = Volume(np.zeros((1, 1, 1, 1)))
        wat = Volume(np.ones((1, 1, 1, 1)))
        sample = MultiModalSample({"wat": wat, "fat": fat})
        self.assertEqual(sample.names, ("fat", "wat"))
        assert_array_equal(sample.stack().ravel(), [0, 1])

    def test_box_voxel_count(self):
        self.assertEqual(BoxRegion((0, 0, 0), (25, 35, 35)).voxel_count, 25 * 35 * 35)


class VolumeFileTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_zero_volume_file_layout(self):
        path = self.dir / "zeros.mvl"
        save_volume(Volume(np.zeros((1, 2, 2, 2))), path)
        self.assertEqual(path.stat().st_size, HEADER.size + 32)
        self.assertTrue(load_volume(path).equals(Volume(np.zeros((1, 2, 2, 2)))))

    def test_round_trip_keeps_spacing_and_kind(self):
        path = self.dir / "label.mvl"
        rng = np.random.default_rng(3)
        original = Volume(rng.integers(0, 2, (1, 3, 4, 5)), spacing=(2.0, 1.25, 1.25), kind=VolumeKind.LABEL)
        save_volume(original, path)
        restored = load_volume(path)
        self.assertTrue(restored.equals(original))
        self.assertEqual(path.read_bytes()[HEADER.size - 4], 1)

    def test_float_round_trip_is_bit_exact(self):
        path = self.dir / "noise.mvl"
        original = Volume(np.random.default_rng(0).standard_normal((2, 3, 3, 3)), spacing=(0.7, 0.9, 1.1))
        save_volume(original, path)
        self.assertTrue(load_volume(path).equals(original))

    def test_bad_magic(self):
        path = self.dir / "bad.mvl"
        save_volume(Volume(np.zeros((1, 2, 2, 2))), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XVL1"
        path.write_bytes(bytes(raw))
        with self.assertRaises(FormatError) as caught:
            load_volume(path)
        self.assertEqual(caught.exception.field, "magic")

    def test_truncated_payload(self):
        path = self.dir / "short.mvl"
        save_volume(Volume(np.zeros((1, 2, 2, 2))), path)
        path.write_bytes(path.read_bytes()[:-1])
        with self.assertRaises(FormatError) as caught:
            load_volume(path)
        self.assertEqual(caught.exception.field, "payload")

    def test_overflowing_dims(self):
        path = self.dir / "huge.mvl"
        header = HEADER.pack(b"MVL1", 0xFFFFFFFF, 0xFFFFFFFF, 2, 2, 1.0, 1.0, 1.0, 0, 0, b"\x00\x00")
        path.write_bytes(header)
        with self.assertRaises(FormatError) as caught:
            load_volume(path)
        self.assertEqual(caught.exception.field, "dims")

    def test_truncated_header(self):
        path = self.dir / "stub.mvl"
        path.write_bytes(struct.pack("<4s", b"MVL1"))
        with self.assertRaises(FormatError):
            load_volume(path)


class GeometryTests(SimpleTestCase):

    def test_patch_padding_split_is_floor_biased(self):
        patch = Volume(np.ones((1, 25, 35, 35)))
        padded = pad_to(patch, (28, 36, 36))
        self.assertEqual(padded.spatial_dims, (28, 36, 36))
        inside = np.argwhere(padded.data[0] == 1)
        assert_array_equal(inside.min(axis=0), [1, 0, 0])
        assert_array_equal(inside.max(axis=0), [25, 34, 34])

    def test_crop_to_inverts_pad_to(self):
        rng = np.random.default_rng(1)
        for source in [(1, 1, 1), (2, 3, 4), (5, 2, 7)]:
            v = Volume(rng.standard_normal((1,) + source))
            target = tuple(s + extra for s, extra in zip(source, (3, 0, 2)))
            self.assertTrue(crop_to(pad_to(v, target), source).equals(v))

    def test_equal_dims_are_unchanged(self):
        v = Volume(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        self.assertTrue(pad_to(v, (2, 2, 2)).equals(v))

    def test_pad_to_smaller_target_fails(self):
        with self.assertRaises(DimensionError):
            pad_to(Volume(np.zeros((1, 3, 3, 3))), (2, 3, 3))

    def test_slice_is_padded_symmetrically(self):
        plane = Volume(np.ones((1, 1, 256, 36)))
        padded = pad_to(plane, (1, 256, 256))
        columns = padded.data[0, 0].any(axis=0)
        self.assertEqual(int(np.argmax(columns)), 110)
        self.assertEqual(int((~columns).sum()), 220)

    def test_crop_box_matches_voxel_loop(self):
        rng = np.random.default_rng(2)
        v = Volume(rng.standard_normal((1, 6, 7, 8)))
        box = BoxRegion((0, 6, 1), (3, 4, 5))
        out = crop_box(v, box).data[0]
        start = box.start
        for index in np.ndindex(*box.extent):
            source = tuple(s + i for s, i in zip(start, index))
            inside = all(0 <= c < d for c, d in zip(source, v.spatial_dims))
            expected = v.data[(0,) + source] if inside else 0.0
            self.assertEqual(out[index], expected)

    def test_crop_box_interior_is_sub_array(self):
        v = Volume(np.arange(5 * 6 * 7, dtype=np.float32).reshape(1, 5, 6, 7))
        out = crop_box(v, BoxRegion((2, 3, 3), (3, 3, 3)))
        assert_array_equal(out.data, v.data[:, 1:4, 2:5, 2:5])

    def test_whole_volume_box(self):
        v = Volume(np.arange(27, dtype=np.float32).reshape(1, 3, 3, 3))
        self.assertTrue(crop_box(v, BoxRegion((1, 1, 1), (3, 3, 3))).equals(v))

    def test_slices_round_trip_on_every_axis(self):
        v = Volume(np.random.default_rng(4).standard_normal((1, 3, 4, 5)), spacing=(2.0, 1.25, 1.5))
        for axis, count in (("z", 3), ("y", 4), ("x", 5)):
            slices = slice_along_axis(v, axis)
            self.assertEqual(len(slices), count)
            self.assertTrue(stack_slices(slices, axis).equals(v))

    def test_y_slices_of_a_sagittal_stack(self):
        v = Volume(np.zeros((1, 36, 256, 256)))
        slices = slice_along_axis(v, "y")
        self.assertEqual(slices[0].spatial_dims, (1, 36, 256))

    def test_multichannel_slicing_is_rejected(self):
        with self.assertRaises(ContractError):
            slice_along_axis(Volume(np.zeros((2, 2, 2, 2))), "z")


class NormalizeTests(SimpleTestCase):

    def test_pooled_statistics(self):
        rng = np.random.default_rng(5)
        sample = MultiModalSample({
            "fat": Volume(rng.normal(10, 2, (1, 4, 4, 4))),
            "wat": Volume(rng.normal(100, 20, (1, 4, 4, 4))),
        })
        normalized = normalize_sample(sample)
        pooled = np.concatenate([v.data.ravel() for v in normalized.modalities.values()]).astype(np.float64)
        self.assertAlmostEqual(pooled.mean(), 0.0, places=5)
        self.assertAlmostEqual(pooled.std(), 1.0, places=5)

    def test_constant_sample_is_flagged(self):
        sample = MultiModalSample({"fat": Volume(np.full((1, 2, 2, 2), 7.0))}, sample_id="flat")
        normalized = normalize_sample(sample)
        assert_array_equal(normalized.modalities["fat"].data, 0)
        self.assertIn("degenerate-normalization", normalized.notes)
