#    clinaudit - A safety audit toolkit for clinical classifiers and language models
#    Copyright (C) 2026  The clinaudit authors

#    This program is free software: you can redistribute it and/or modify
#    it under the terms of the GNU General Public License as published by
#    the Free Software Foundation, either version 3 of the License, or
#    (at your option) any later version.

#    This program is distributed in the hope that it will be useful,
#    but WITHOUT ANY WARRANTY; without even the implied warranty of
#    MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#    GNU General Public License for more details.

#    You should have received a copy of the GNU General Public License
#    along with this program.  If not, see <https://www.gnu.org/licenses/>.

import os
import tempfile
import unittest
import numpy as np
import helpers
from clinaudit.data import SplitConfig, ClassLabel, LabeledImage, NormalizationStats, default_labels, generate_synthetic_benchmark, stack_pixels
from clinaudit.errors import DimensionError, TrainingDivergedError, ValidationError
from clinaudit.model import (Architecture, TrainConfig, TrainingTrace, MicroDenseNet, Adam, ConfusionMatrix,
                             parameter_shapes, classification_report, format_classification_report, train, evaluate,
                             predict, checkpoint_hash, save_checkpoint, load_checkpoint, write_trace_csv)
from clinaudit.tensor import Tensor


class TestArchitecture(unittest.TestCase):
    def test_channel_bookkeeping(self):
        arch = Architecture()
        self.assertEqual(16, arch.block_input_channels(0))
        self.assertEqual(32, arch.layer_input_channels(0, 2))
        self.assertEqual(16 + 2 * 3 * 8, arch.feature_channels)

    def test_parameter_shapes(self):
        shapes = parameter_shapes(Architecture())
        self.assertEqual((16, 1, 3, 3), shapes["stem.weight"])
        self.assertEqual((8, 24, 3, 3), shapes["block0.layer1.weight"])
        self.assertEqual((3, 64), shapes["head.weight"])

    def test_parameter_count(self):
        model = MicroDenseNet.initialize(Architecture(), NormalizationStats.for_channels(1))
        self.assertEqual(sum(int(np.prod(s)) for s in parameter_shapes(Architecture()).values()), model.parameter_count())

    def test_invalid(self):
        self.assertRaises(ValidationError, Architecture, in_channels=2)
        self.assertRaises(ValidationError, Architecture, num_classes=1)

    def test_stats_must_match_channels(self):
        self.assertRaises(ValidationError, MicroDenseNet.initialize, Architecture(in_channels=3), NormalizationStats.for_channels(1))


class TestForward(unittest.TestCase):
    def test_logit_shape(self):
        model = helpers.small_model()
        logits = model.logits(np.zeros((5, 1, 16, 16), dtype=np.float32))
        self.assertEqual((5, 3), logits.shape)

    def test_wrong_size_names_axis(self):
        model = helpers.small_model()

        with self.assertRaises(DimensionError) as ctx:
            model.forward_pixels(Tensor(np.zeros((1, 1, 16, 12))))

        self.assertEqual("W", ctx.exception.axis)

    def test_initialisation_is_seeded(self):
        a, b, c = helpers.small_model(3), helpers.small_model(3), helpers.small_model(4)
        self.assertEqual(checkpoint_hash(a), checkpoint_hash(b))
        self.assertNotEqual(checkpoint_hash(a), checkpoint_hash(c))

    def test_dense_taps_grow(self):
        model = helpers.small_model()
        taps = dict()
        x = model.normalize(Tensor(np.zeros((1, 1, 16, 16))))
        model.forward(x, taps=taps)
        self.assertEqual(4, taps[(0, 0)].shape[1])
        self.assertEqual(6, taps[(0, 1)].shape[1])
        self.assertEqual(8, taps[(1, 0)].shape[1])
        self.assertEqual(8, taps[(1, 0)].shape[2])

    def test_ablation_changes_output(self):
        model = helpers.small_model()
        x = model.normalize(Tensor(np.random.default_rng(0).uniform(size=(2, 1, 16, 16))))
        full = model.forward(x).data
        ablated = model.forward(x, ablate=(0, 0)).data
        self.assertFalse(np.allclose(full, ablated))


class TestTraining(unittest.TestCase):
    def test_schedule(self):
        cfg = TrainConfig()
        self.assertEqual([1e-4, 1e-4, 1e-4, 5e-5], [cfg.lr_at(e) for e in range(1, 5)])
        self.assertAlmostEqual(1.25e-5, cfg.lr_at(10))

    def test_recipe_validation(self):
        self.assertRaises(ValidationError, TrainConfig, epochs=0)
        self.assertRaises(ValidationError, TrainConfig, learning_rate=0.0)
        self.assertRaises(ValidationError, TrainConfig, gamma=1.5)

    def test_adam_zero_rate_is_identity(self):
        params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        updated = Adam(["w"]).step(params, {"w": np.array([0.3, 0.1], dtype=np.float32)}, 0.0)
        np.testing.assert_array_equal(params["w"], updated["w"])

    def test_adam_moves_against_gradient(self):
        params = {"w": np.array([1.0], dtype=np.float64)}
        updated = Adam(["w"]).step(params, {"w": np.array([2.0])}, 0.1)
        self.assertAlmostEqual(0.9, float(updated["w"][0]), places=6)

    def test_training_is_reproducible(self):
        data, _ = generate_synthetic_benchmark(SplitConfig(6, 1, 11), 16)
        cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, seed=11)
        a, trace_a = train(helpers.small_model(), data, cfg)
        b, trace_b = train(helpers.small_model(), data, cfg)
        self.assertEqual(checkpoint_hash(a), checkpoint_hash(b))
        self.assertEqual(trace_a.to_dict(), trace_b.to_dict())

    def test_original_model_untouched(self):
        data, _ = generate_synthetic_benchmark(SplitConfig(4, 1, 1), 16)
        model = helpers.small_model()
        before = checkpoint_hash(model)
        train(model, data, TrainConfig(epochs=1, learning_rate=1e-2, batch_size=4))
        self.assertEqual(before, checkpoint_hash(model))

    def test_divergence_detected(self):
        images, _ = generate_synthetic_benchmark(SplitConfig(2, 1, 3), 16)
        self.assertRaises(TrainingDivergedError, train, helpers.poisoned_model(), images, TrainConfig(epochs=1))

    def test_labels_outside_model_rejected(self):
        pixels = np.zeros((1, 16, 16), dtype=np.float32)

        for index in (-1, 3):
            images = [LabeledImage(pixels, ClassLabel(index, "Other"), "x")]

            with self.subTest(index=index):
                self.assertRaises(ValidationError, train, helpers.small_model(), images, TrainConfig(epochs=1))

    def test_benchmark_trace(self):
        model, trace = helpers.trained_benchmark()
        cfg = TrainConfig()
        self.assertEqual(10, len(trace))
        self.assertLess(trace.epochs[-1].loss, trace.epochs[0].loss)
        self.assertEqual(cfg.lr_at(cfg.epochs), trace.epochs[-1].learning_rate)

    def test_default_recipe_fits_benchmark(self):
        _, trace = helpers.trained_benchmark()
        self.assertGreaterEqual(trace.epochs[-1].train_accuracy, 0.95)

    def test_benchmark_accuracy(self):
        model, _ = helpers.trained_benchmark()
        _, test_set = helpers.benchmark_data()
        accuracy, per_class, cm = evaluate(model, test_set)
        self.assertEqual(150, cm.total)
        self.assertGreaterEqual(accuracy, 0.8)

        # no class may be given up to win the others
        for recall in per_class:
            self.assertGreaterEqual(recall, 0.5)


class TestMetrics(unittest.TestCase):
    def test_confusion_matrix(self):
        cm = ConfusionMatrix.from_predictions([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
        self.assertEqual([[1, 1, 0], [0, 1, 0], [1, 0, 1]], cm.to_list())
        self.assertAlmostEqual(0.6, cm.overall())
        self.assertEqual([0.5, 1.0, 0.5], cm.per_class())

    def test_absent_class_scores_zero(self):
        cm = ConfusionMatrix.from_predictions([0, 0], [0, 1], 3)
        self.assertEqual(0.0, cm.per_class()[2])

    def test_empty_rejected(self):
        self.assertRaises(ValidationError, ConfusionMatrix.from_predictions([], [], 3).overall)

    def test_classification_report(self):
        cm = ConfusionMatrix.from_predictions([0, 0, 1, 2], [0, 0, 0, 0], 3)
        metrics = classification_report(cm, default_labels())
        self.assertAlmostEqual(0.5, metrics[0].precision)
        self.assertAlmostEqual(1.0, metrics[0].recall)
        self.assertAlmostEqual(2 / 3, metrics[0].f1)
        self.assertEqual(0.0, metrics[1].precision)
        self.assertEqual(0.0, metrics[1].f1)
        self.assertIn("Non-COVID Pneumonia", format_classification_report(metrics))

    def test_predict_returns_labels(self):
        model = helpers.small_model()
        data, _ = generate_synthetic_benchmark(SplitConfig(2, 1, 1), 16)
        labels, probs = predict(model, data)
        self.assertEqual(len(data), len(labels))
        np.testing.assert_allclose(1.0, probs.sum(axis=1))
        self.assertEqual(list(probs.argmax(axis=1)), [l.index for l in labels])


class TestCheckpoint(unittest.TestCase):
    def test_save_and_load(self):
        model = helpers.small_model(5)
        pixels = stack_pixels(generate_synthetic_benchmark(SplitConfig(2, 1, 1), 16)[0])

        with tempfile.TemporaryDirectory() as root:
            path = save_checkpoint(model, os.path.join(root, "model.json"))
            loaded = load_checkpoint(path)

        self.assertEqual(checkpoint_hash(model), checkpoint_hash(loaded))
        self.assertEqual(model.arch, loaded.arch)
        self.assertEqual(model.labels, loaded.labels)
        np.testing.assert_array_equal(model.logits(pixels), loaded.logits(pixels))

    def test_foreign_document_rejected(self):
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, "x.json")

            with open(path, 'w') as file:
                file.write('{"format": "other"}')

            self.assertRaises(ValidationError, load_checkpoint, path)

    def test_trace_csv(self):
        trace = TrainingTrace.from_dict({"epochs": [{"epoch": 1, "loss": 1.5, "train_accuracy": 0.5, "learning_rate": 1e-4}]})

        with tempfile.TemporaryDirectory() as root:
            path = write_trace_csv(trace, os.path.join(root, "trace.csv"))

            with open(path) as file:
                self.assertEqual("epoch,loss,accuracy\n1,1.500000,0.5000\n", file.read())


if __name__ == "__main__":
    unittest.main()
