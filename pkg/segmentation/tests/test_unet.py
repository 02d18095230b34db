import io
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
from django.test import SimpleTestCase, tag
from numpy.testing import assert_allclose, assert_array_equal

from segmentation.exceptions import ContractError, FormatError, ShapeError
from segmentation.metrics import dice
from segmentation.nn import LayerSpec, Tensor, numerical_gradient, relative_error
from segmentation.phantom import PhantomConfig, generate_dataset
from segmentation.pipeline import build_patch_dataset
from segmentation.unet import (
    Network,
    NetworkSpec,
    TrainConfig,
    TrainResult,
    build_unet2d,
    build_unet3d,
    evaluate_loss,
    fit,
    infer_shapes,
    load_checkpoint,
    output_shape,
    param_count,
    save_checkpoint,
)


def _skip_spec():
    """Smooth two-conv network with one skip connection, spatial multiple 1."""
    layers = (
        LayerSpec("conv", "a", in_channels=1, out_channels=2, kernel=(3, 3, 3)),
        LayerSpec("conv", "b", in_channels=2, out_channels=2, kernel=(3, 3, 3)),
        LayerSpec("concat", "cat", source="a"),
        LayerSpec("conv", "head", in_channels=4, out_channels=1, kernel=(1, 1, 1)),
        LayerSpec("sigmoid", "output"),
    )
    return NetworkSpec(layers, in_channels=1, base_channels=2, depth=0, dims=3)


def _cube_dataset(count=3, size=8, seed=0):
    rng = np.random.default_rng(seed)
    dataset = []
    for _ in range(count):
        y = np.zeros((1, size, size, size), dtype=np.float32)
        lo = int(rng.integers(1, size // 2))
        y[:, lo:lo + 3, lo:lo + 3, lo:lo + 3] = 1
        x = (y + 0.1 * rng.standard_normal(y.shape)).astype(np.float32)
        dataset.append((x, y))
    return dataset


class BuilderTests(SimpleTestCase):

    def test_3d_parameter_count(self):
        self.assertEqual(param_count(build_unet3d(in_channels=3, base=32)), 1357089)

    def test_2d_parameter_count(self):
        self.assertEqual(param_count(build_unet2d(in_channels=1, base=64)), 31030593)

    def test_pointwise_conv_has_two_parameters(self):
        spec = NetworkSpec(
            (LayerSpec("conv", "head", in_channels=1, out_channels=1, kernel=(1, 1, 1)), LayerSpec("sigmoid", "output")),
            in_channels=1, base_channels=1, depth=0, dims=3,
        )
        self.assertEqual(param_count(spec), 2)

    def test_affine_batchnorm_adds_scale_and_shift(self):
        plain = param_count(build_unet3d(base=4))
        affine = param_count(build_unet3d(base=4, batchnorm_affine=True))
        self.assertEqual(affine - plain, 2 * 4)

    def test_in_channels_range(self):
        for channels in (0, 5):
            with self.assertRaises(ContractError):
                build_unet3d(in_channels=channels)

    def test_patch_output_shape(self):
        self.assertEqual(output_shape(build_unet3d(base=2), (1, 3, 28, 36, 36)), (1, 1, 28, 36, 36))
        self.assertEqual(output_shape(build_unet2d(base=2), (4, 1, 256, 48)), (4, 1, 256, 48))

    def test_non_divisible_dims(self):
        with self.assertRaises(ShapeError):
            infer_shapes(build_unet3d(base=2), (1, 3, 25, 36, 36))
        with self.assertRaises(ShapeError):
            infer_shapes(build_unet2d(base=2), (1, 1, 40, 40))

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            infer_shapes(build_unet3d(in_channels=2, base=2), (1, 3, 8, 8, 8))

    def test_spec_validation(self):
        head = LayerSpec("conv", "head", in_channels=1, out_channels=1, kernel=(1, 1, 1))
        with self.assertRaises(ContractError):
            NetworkSpec((head,), in_channels=1, base_channels=1, depth=0, dims=3)
        with self.assertRaises(ContractError):
            NetworkSpec(
                (LayerSpec("concat", "cat", source="head"), head, LayerSpec("sigmoid", "output")),
                in_channels=1, base_channels=1, depth=0, dims=3,
            )
        two = LayerSpec("conv", "head", in_channels=1, out_channels=2, kernel=(1, 1, 1))
        with self.assertRaises(ContractError):
            NetworkSpec((two, LayerSpec("sigmoid", "output")), in_channels=1, base_channels=1, depth=0, dims=3)

    def test_spec_text_round_trip(self):
        spec = build_unet3d(base=4, dropout=0.1)
        self.assertEqual(NetworkSpec.from_text(spec.to_text()), spec)


class NetworkTests(SimpleTestCase):

    def test_forward_produces_probabilities(self):
        network = Network(build_unet3d(base=2), seed=1)
        x = np.random.default_rng(0).standard_normal((1, 3, 28, 36, 36)).astype(np.float32)
        out = network.forward(x)
        self.assertEqual(out.dims, (1, 1, 28, 36, 36))
        self.assertTrue(np.all((out.values >= 0) & (out.values <= 1)))

    def test_same_seed_same_weights(self):
        a = Network(build_unet3d(base=2), seed=3)
        b = Network(build_unet3d(base=2), seed=3)
        for x, y in zip(a.params(), b.params()):
            assert_array_equal(x.values, y.values)

    def test_skip_gradients(self):
        network = Network(_skip_spec(), seed=2).astype(np.float64)
        rng = np.random.default_rng(4)
        x = Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
        projection = rng.standard_normal((1, 1, 3, 3, 3))

        def objective():
            return float(np.sum(network.forward(x.values).values * projection))

        network.forward(x)
        network.backward(projection, x)
        self.assertLess(relative_error(x.grad, numerical_gradient(objective, x.values)), 1e-4)
        first = network.params()[0]
        self.assertLess(relative_error(first.grad, numerical_gradient(objective, first.values)), 1e-4)

    def test_backward_covers_every_parameter(self):
        network = Network(build_unet3d(in_channels=1, base=2), seed=0)
        network.forward(np.ones((1, 1, 8, 8, 8), dtype=np.float32), train=True, rng=np.random.default_rng(0))
        grad = network.backward(np.ones((1, 1, 8, 8, 8), dtype=np.float32))
        self.assertEqual(grad.shape, (1, 1, 8, 8, 8))
        for tensor in network.params():
            self.assertIsNotNone(tensor.grad)
            self.assertEqual(tensor.grad.shape, tensor.values.shape)


class CheckpointTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "net.mck"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip(self):
        network = Network(build_unet3d(in_channels=1, base=2), seed=5)
        network.layers[-3].running_mean[...] = 0.25
        save_checkpoint(self.path, network, progress={"epoch": 3})
        loaded, adam, progress = load_checkpoint(self.path)
        self.assertEqual(loaded.spec, network.spec)
        self.assertIsNone(adam)
        self.assertEqual(progress, {"epoch": 3})
        for a, b in zip(network.params(), loaded.params()):
            assert_array_equal(a.values, b.values)
        assert_array_equal(loaded.buffers()[0], 0.25)
        x = np.random.default_rng(1).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
        assert_array_equal(network.predict(x), loaded.predict(x))

    def test_bad_magic(self):
        self.path.write_bytes(b"NOPE" + bytes(16))
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)

    def test_truncated(self):
        save_checkpoint(self.path, Network(_skip_spec(), seed=0))
        raw = self.path.read_bytes()
        self.path.write_bytes(raw[:-20])
        with self.assertRaises(FormatError):
            load_checkpoint(self.path)


class TrainingTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dataset = _cube_dataset()
        self.spec = build_unet3d(in_channels=1, base=2)

    def tearDown(self):
        self.tmp.cleanup()

    def test_config_validation(self):
        with self.assertRaises(ContractError):
            TrainConfig(batch_size=0)
        with self.assertRaises(ContractError):
            TrainConfig(lr=0.0)
        with self.assertRaises(ContractError):
            TrainConfig(mode="turbo")

    def test_patience_zero_stops_on_the_first_non_improving_epoch(self):
        cfg = TrainConfig(max_epochs=6, patience=0, lr=1e-3)
        with mock.patch("segmentation.unet.evaluate_loss", side_effect=[0.5, 0.4, 0.45, 0.3]):
            result = fit(Network(self.spec, seed=0), self.dataset[:2], cfg, validation=self.dataset[2:])
        self.assertTrue(result.stopped_early)
        self.assertEqual(len(result.history), 3)
        self.assertEqual(result.best_epoch, 2)
        self.assertEqual(result.best_val_loss, 0.4)

    def test_patience_tolerates_stale_epochs(self):
        cfg = TrainConfig(max_epochs=4, patience=1, lr=1e-3)
        with mock.patch("segmentation.unet.evaluate_loss", side_effect=[0.5, 0.4, 0.45, 0.3]):
            result = fit(Network(self.spec, seed=0), self.dataset[:2], cfg, validation=self.dataset[2:])
        self.assertFalse(result.stopped_early)
        self.assertEqual(result.best_epoch, 4)

    def test_history_csv(self):
        self.assertEqual(TrainResult().history_csv(), "epoch,train_loss,val_loss\n")
        cfg = TrainConfig(max_epochs=2, lr=1e-3)
        result = fit(Network(self.spec, seed=0), self.dataset, cfg, validation_split=0.34)
        frame = pd.read_csv(io.StringIO(result.history_csv()))
        self.assertEqual(list(frame.columns), ["epoch", "train_loss", "val_loss"])
        self.assertEqual(frame["epoch"].tolist(), [1, 2])
        assert_allclose(frame[["train_loss", "val_loss"]].to_numpy(), [row[1:] for row in result.history], rtol=1e-8)

    def test_empty_dataset(self):
        with self.assertRaises(ContractError):
            fit(Network(self.spec, seed=0), [], TrainConfig())

    def test_training_is_reproducible(self):
        cfg = TrainConfig(max_epochs=2, lr=1e-3, batch_size=2, seed=9)
        a, b = Network(self.spec, seed=1), Network(self.spec, seed=1)
        ra = fit(a, self.dataset[:2], cfg, validation=self.dataset[2:])
        rb = fit(b, self.dataset[:2], cfg, validation=self.dataset[2:])
        self.assertEqual(ra.history, rb.history)
        for x, y in zip(a.params(), b.params()):
            assert_array_equal(x.values, y.values)

    def test_resume_matches_an_uninterrupted_run(self):
        directory = Path(self.tmp.name)
        full = Network(self.spec, seed=1)
        reference = fit(full, self.dataset[:2], TrainConfig(max_epochs=3, lr=1e-3, seed=2), validation=self.dataset[2:])

        first = TrainConfig(max_epochs=2, lr=1e-3, seed=2, checkpoint_dir=str(directory))
        fit(Network(self.spec, seed=1), self.dataset[:2], first, validation=self.dataset[2:])
        self.assertTrue((directory / "best.mck").exists())
        self.assertTrue((directory / "last.mck").exists())

        resumed = Network(self.spec, seed=1)
        second = TrainConfig(max_epochs=3, lr=1e-3, seed=2, checkpoint_dir=str(directory))
        result = fit(resumed, self.dataset[:2], second, validation=self.dataset[2:], resume=directory / "last.mck")
        self.assertEqual(result.history, reference.history)
        for x, y in zip(full.params(), resumed.params()):
            assert_array_equal(x.values, y.values)

    def test_stacked_validation_agrees(self):
        network = Network(self.spec, seed=4)
        single = evaluate_loss(network, self.dataset)
        stacked = evaluate_loss(network, self.dataset, stacked=True)
        assert_allclose(stacked, single, rtol=1e-5)


def _phantom_patches(samples=2):
    """Small disc patches (fat, opp, wat) from the two-disc phantom; two per sample."""
    cfg = PhantomConfig(dims=(12, 48, 48), discs=2, semi_axes=(4.0, 3.0, 8.0), amplitude=2.0)
    return build_patch_dataset(
        generate_dataset(samples, cfg, seed=0), ("fat", "opp", "wat"), box_extent=(11, 11, 19), patch_dims=(12, 12, 20),
    )


@tag("slow")
class PhantomPatchTrainingTests(SimpleTestCase):

    def test_train_loss_improves_over_the_first_ten_epochs(self):
        dataset = _phantom_patches()
        self.assertEqual(len(dataset), 4)
        network = Network(build_unet3d(in_channels=3, base=8), seed=0)
        result = fit(network, dataset, TrainConfig(max_epochs=50, patience=50, lr=1e-3, seed=0))
        self.assertEqual(len(result.history), 50)
        losses = [row[1] for row in result.history[:10]]
        best_so_far = np.minimum.accumulate(losses)
        self.assertTrue(np.all(np.diff(best_so_far) <= 0))
        self.assertLess(best_so_far[-1], losses[0])

    def test_overfits_one_patch(self):
        x, y = _phantom_patches(samples=1)[0]
        network = Network(build_unet3d(in_channels=3, base=8, dropout=0.0), seed=0)
        fit(network, [(x, y)], TrainConfig(max_epochs=200, patience=200, lr=3e-3, dropout=0.0, seed=0))
        prediction = network.predict(x[np.newaxis])[0] > 0.5
        self.assertGreater(dice(prediction, y > 0.5), 95.0)
