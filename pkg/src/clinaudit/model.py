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

from __future__ import annotations

import base64
import numpy as np
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple
from . import ops
from .constants import *
from .data import ClassLabel, LabeledImage, NormalizationStats, default_labels, stack_pixels
from .errors import ValidationError, DimensionError, TrainingDivergedError
from .tensor import Tensor, ComputeGraph
from .utils import SplitMix64, TabWriter, audit_log, canonical_json, sha256_hex, read_json, write_json, write_text


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    image_size: int = DEFAULT_IMAGE_SIZE
    num_classes: int = len(CLASS_NAMES)
    stem_channels: int = STEM_CHANNELS
    blocks: int = DENSE_BLOCKS
    layers: int = DENSE_LAYERS
    growth: int = GROWTH_RATE

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ValidationError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if min(self.stem_channels, self.blocks, self.layers, self.growth) < 1 or self.num_classes < 2:
            raise ValidationError(f"Invalid architecture {self}")
        if self.image_size >> (self.blocks - 1) < 1:
            raise ValidationError(f"image_size {self.image_size} is too small for {self.blocks} dense blocks")

    def block_input_channels(self, block: int) -> int:
        return self.stem_channels + block * self.layers * self.growth

    def layer_input_channels(self, block: int, layer: int) -> int:
        """
        Channels consumed by a dense layer: the block input plus every
        earlier layer's output in the same block.

        @param block: Block index.
        @param layer: Layer index within the block.
        @return: Channel count.
        """
        return self.block_input_channels(block) + layer * self.growth

    @property
    def feature_channels(self) -> int:
        return self.block_input_channels(self.blocks)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = EPOCHS
    learning_rate: float = LEARNING_RATE
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    step_size: int = STEP_SIZE
    gamma: float = GAMMA
    batch_size: int = BATCH_SIZE
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.gamma <= 1:
            raise ValidationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.step_size < 1 or self.batch_size < 1:
            raise ValidationError("step_size and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """
        Step decay: the rate is multiplied by gamma entering every
        step_size-th epoch boundary.

        @param epoch: 1-based epoch number.
        @return: Learning rate used throughout that epoch.
        """
        return self.learning_rate * self.gamma ** ((epoch - 1) // self.step_size)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    learning_rate: float


@dataclass
class TrainingTrace:
    epochs: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self) -> str:
        lines = ["epoch,loss,accuracy"]
        lines.extend(f"{r.epoch},{r.loss:.6f},{r.train_accuracy:.4f}" for r in self.epochs)
        return '\n'.join(lines) + '\n'

    def to_dict(self) -> dict:
        return {"epochs": [asdict(r) for r in self.epochs]}

    @classmethod
    def from_dict(cls, obj: dict) -> TrainingTrace:
        return cls([EpochRecord(**r) for r in obj["epochs"]])


class MicroDenseNet:
    def __init__(self, arch: Architecture, params: Dict[str, Tensor], stats: NormalizationStats,
                 labels: Sequence[ClassLabel] = ()):
        """
        Densely connected CNN. A trained instance is treated as immutable;
        training and fine-tuning return new instances.

        @param arch: Layer sizes.
        @param params: Named weights, see parameter_shapes().
        @param stats: Normalisation applied to pixel-space inputs.
        @param labels: Class labels in output order.
        """
        self.arch = arch
        self.params = params
        self.stats = stats
        self.labels = tuple(labels or default_labels()[:arch.num_classes])

        if stats.channels != arch.in_channels:
            raise ValidationError(f"Normalization has {stats.channels} channels, architecture expects {arch.in_channels}")
        if len(self.labels) != arch.num_classes:
            raise ValidationError(f"{len(self.labels)} labels for {arch.num_classes} outputs")

        for name, shape in parameter_shapes(arch).items():
            if name not in params:
                raise ValidationError(f"Missing parameter '{name}'")
            if params[name].shape != shape:
                raise DimensionError(f"Parameter '{name}' has shape {params[name].shape}, expected {shape}", axis=name)

    @classmethod
    def initialize(cls, arch: Architecture, stats: NormalizationStats, seed: int = DEFAULT_SEED,
                   labels: Sequence[ClassLabel] = ()) -> MicroDenseNet:
        """
        Fan-in scaled uniform initialisation from the seeded generator.
        Convolutions use bound sqrt(6 / fan_in); the head uses 1 / sqrt(fan_in).
        Biases start at zero.

        @param arch: Layer sizes.
        @param stats: Input normalisation.
        @param seed: Initialisation seed.
        @param labels: Class labels in output order.
        @return: Untrained model.
        """
        root = SplitMix64(seed)
        params = dict()

        for i, (name, shape) in enumerate(parameter_shapes(arch).items()):
            if name.endswith(".bias"):
                params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
                continue

            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in) if name.startswith("head") else np.sqrt(6.0 / fan_in)
            u = root.fork(i).uniform_block(int(np.prod(shape))).reshape(shape)
            params[name] = Tensor((2.0 * u - 1.0) * bound, requires_grad=True, name=name)

        return cls(arch, params, stats, labels)

    def parameter_count(self) -> int:
        return sum(int(t.data.size) for t in self.params.values())

    @property
    def dtype(self) -> np.dtype:
        return self.params["head.weight"].dtype

    def with_params(self, params: Dict[str, np.ndarray]) -> MicroDenseNet:
        return MicroDenseNet(self.arch, {k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in params.items()},
                             self.stats, self.labels)

    def copy(self) -> MicroDenseNet:
        return self.with_params({k: t.data for k, t in self.params.items()})

    def with_dtype(self, dtype: np.dtype) -> MicroDenseNet:
        """
        @param dtype: Floating dtype, e.g. np.float64 for gradient checks.
        @return: A copy whose weights use the given dtype.
        """
        return self.with_params({k: t.data.astype(dtype) for k, t in self.params.items()})

    def check_input(self, x: Tensor):
        if x.ndim != 4:
            raise DimensionError(f"Model input must be [N,C,H,W], got {x.shape}", axis="ndim")

        _, c, h, w = x.shape

        if c != self.arch.in_channels:
            raise DimensionError(f"Model expects {self.arch.in_channels} channels, got {c}", axis="C")
        if h != self.arch.image_size:
            raise DimensionError(f"Model expects height {self.arch.image_size}, got {h}", axis="H")
        if w != self.arch.image_size:
            raise DimensionError(f"Model expects width {self.arch.image_size}, got {w}", axis="W")

    def normalize(self, x: Tensor) -> Tensor:
        weight = [1.0 / s for s in self.stats.std]
        shift = [-m / s for m, s in zip(self.stats.mean, self.stats.std)]
        return ops.channel_affine(x, weight, shift)

    def forward(self, x: Tensor, params: Optional[Dict[str, Tensor]] = None,
                taps: Optional[Dict[Tuple[int, int], np.ndarray]] = None,
                ablate: Optional[Tuple[int, int]] = None) -> Tensor:
        """
        Logits for a normalised batch.

        @param x: Model-space input [N,C,H,W].
        @param params: Weights to use instead of this model's own.
        @param taps: If given, receives the input of every dense layer keyed by (block, layer).
        @param ablate: (block, layer) whose output is replaced by zeros.
        @return: Logits [N,K].
        """
        p = params or self.params
        arch = self.arch
        h = ops.relu(ops.conv2d(x, p["stem.weight"], p["stem.bias"], padding=1))

        for b in range(arch.blocks):
            if b > 0:
                h = ops.avgpool2d(h, 2)

            for l in range(arch.layers):
                prefix = f"block{b}.layer{l}"

                if taps is not None:
                    taps[(b, l)] = h.data

                out = ops.relu(ops.conv2d(h, p[prefix + ".weight"], p[prefix + ".bias"], padding=1))

                if ablate == (b, l):
                    out = Tensor(np.zeros(out.shape), dtype=out.dtype)

                h = ops.concat_channels(h, out)

        pooled = ops.flatten(ops.avgpool2d(h, h.shape[2]))
        return ops.linear(pooled, p["head.weight"], p["head.bias"])

    def forward_pixels(self, x: Tensor, params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        Logits for a pixel-space batch; normalisation is part of the graph,
        so gradients reach the pixels.

        @param x: Pixel-space input [N,C,H,W] in [0,1].
        @param params: Optional weights override.
        @return: Logits [N,K].
        """
        self.check_input(x)
        return self.forward(self.normalize(x), params)

    def logits(self, pixels: np.ndarray, batch_size: int = 64) -> np.ndarray:
        rows = list()

        for start in range(0, len(pixels), batch_size):
            x = Tensor(pixels[start:start + batch_size], dtype=self.dtype)
            rows.append(self.forward_pixels(x).data)

        return np.concatenate(rows) if rows else np.zeros((0, self.arch.num_classes), dtype=self.dtype)

    def input_gradient(self, pixels: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gradient of the mean cross-entropy with respect to pixel-space inputs.

        @param pixels: Batch [N,C,H,W].
        @param labels: True class indices.
        @return: (per-image loss [N], gradient [N,C,H,W]).
        """
        x = Tensor(pixels, requires_grad=True, dtype=self.dtype)

        with ComputeGraph() as graph:
            logits = self.forward_pixels(x)
            loss = ops.softmax_cross_entropy(logits, labels)
            graph.backward(loss)

        return per_image_loss(logits.data, labels), x.grad

    def per_image_loss(self, pixels: np.ndarray, labels: Sequence[int]) -> np.ndarray:
        return per_image_loss(self.logits(pixels), labels)

    def fingerprint(self) -> dict:
        return {
            "architecture": asdict(self.arch),
            "parameters": self.parameter_count(),
            "checkpoint_hash": checkpoint_hash(self)
        }


def parameter_shapes(arch: Architecture) -> Dict[str, Tuple[int, ...]]:
    shapes = {
        "stem.weight": (arch.stem_channels, arch.in_channels, 3, 3),
        "stem.bias": (arch.stem_channels,)
    }

    for b in range(arch.blocks):
        for l in range(arch.layers):
            shapes[f"block{b}.layer{l}.weight"] = (arch.growth, arch.layer_input_channels(b, l), 3, 3)
            shapes[f"block{b}.layer{l}.bias"] = (arch.growth,)

    shapes["head.weight"] = (arch.num_classes, arch.feature_channels)
    shapes["head.bias"] = (arch.num_classes,)
    return shapes


def per_image_loss(logits: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(z)), np.asarray(labels, dtype=np.int64)]


class Adam:
    def __init__(self, names: Sequence[str], betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.names = list(names)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = dict()
        self.v: Dict[str, np.ndarray] = dict()

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
        """
        One bias-corrected Adam update.

        @param params: Current weights.
        @param grads: Loss gradients, same keys and shapes.
        @param lr: Step size for this update.
        @return: New weight arrays; the inputs are not modified.
        """
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        updated = dict()

        for name in self.names:
            g = grads[name].astype(np.float64)
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            w = params[name]
            updated[name] = (w - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(w.dtype)

        return updated


def gradient_step(model: MicroDenseNet, params: Dict[str, np.ndarray], pixels: np.ndarray,
                  labels: Sequence[int]) -> Tuple[float, np.ndarray, Dict[str, np.ndarray]]:
    """
    Forward and backward pass over one batch.

    @param model: Supplies architecture and normalisation.
    @param params: Current weights.
    @param pixels: Pixel-space batch.
    @param labels: True class indices.
    @return: (mean loss, logits, gradient per parameter).
    """
    tensors = {k: Tensor(v, requires_grad=True, dtype=v.dtype, name=k) for k, v in params.items()}

    with ComputeGraph() as graph:
        logits = model.forward_pixels(Tensor(pixels, dtype=model.dtype), tensors)
        loss = ops.softmax_cross_entropy(logits, labels)
        graph.backward(loss)

    return loss.item(), logits.data, {k: t.grad for k, t in tensors.items()}


def train(model: MicroDenseNet, train_set: Sequence[LabeledImage], cfg: TrainConfig) -> Tuple[MicroDenseNet, TrainingTrace]:
    """
    Fine-tune with Adam, step learning-rate decay and per-epoch seeded shuffles.

    @param model: Starting weights; left untouched.
    @param train_set: Pixel-space training images.
    @param cfg: Recipe.
    @return: (trained model, per-epoch trace).
    """
    if not train_set:
        raise ValidationError("Training set is empty")

    pixels = stack_pixels(train_set)
    labels = np.array([img.label.index for img in train_set], dtype=np.int64)

    if labels.min() < 0 or labels.max() >= model.arch.num_classes:
        bad = labels.min() if labels.min() < 0 else labels.max()
        raise ValidationError(f"Training label {bad} is outside the {model.arch.num_classes} model classes")

    model.check_input(Tensor(pixels[:1]))
    params = {k: t.data for k, t in model.params.items()}
    optimizer = Adam(list(params), cfg.betas, cfg.eps)
    rng = SplitMix64(cfg.seed)
    trace = TrainingTrace()

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = np.array(rng.fork(epoch).shuffle(list(range(len(train_set)))), dtype=np.int64)
        total_loss, correct = 0.0, 0

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, logits, grads = gradient_step(model, params, pixels[batch], labels[batch])

            if not np.isfinite(loss):
                raise TrainingDivergedError(f"Loss became {loss} in epoch {epoch}; lower the learning rate or check the inputs")

            params = optimizer.step(params, grads, lr)
            total_loss += loss * len(batch)
            correct += int((logits.argmax(axis=1) == labels[batch]).sum())

        record = EpochRecord(epoch, total_loss / len(order), correct / len(order), lr)
        trace.epochs.append(record)
        audit_log(f"Epoch {epoch}/{cfg.epochs}: loss {record.loss:.4f}, accuracy {record.train_accuracy:.4f}, lr {lr:.3g}",
                  source="train", severity=1)

    return model.with_params(params), trace


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def from_predictions(cls, truth: Sequence[int], predicted: Sequence[int], num_classes: int) -> ConfusionMatrix:
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(truth, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def overall(self) -> float:
        if self.total == 0:
            raise ValidationError("Confusion matrix is empty")
        return self.correct / self.total

    def per_class(self) -> List[float]:
        """
        Recall per class; a class absent from the test set scores 0.0.

        @return: One fraction per class.
        """
        rows = self.counts.sum(axis=1)
        return [float(self.counts[k, k] / rows[k]) if rows[k] else 0.0 for k in range(len(rows))]

    def to_list(self) -> List[List[int]]:
        return self.counts.tolist()


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


def classification_report(cm: ConfusionMatrix, labels: Sequence[ClassLabel]) -> List[ClassMetrics]:
    """
    @param cm: Confusion matrix, rows true and columns predicted.
    @param labels: Class labels in index order.
    @return: Precision, recall and F1 per class; a never-predicted class has precision 0.0.
    """
    metrics = list()
    recalls = cm.per_class()
    predicted = cm.counts.sum(axis=0)

    for label in labels:
        k = label.index
        precision = float(cm.counts[k, k] / predicted[k]) if predicted[k] else 0.0
        recall = recalls[k]
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        metrics.append(ClassMetrics(label.name, precision, recall, f1, int(cm.counts[k].sum())))

    return metrics


def format_classification_report(metrics: Sequence[ClassMetrics]) -> str:
    writer = TabWriter()
    rows = [[m.name, f"{m.precision:.2f}", f"{m.recall:.2f}", f"{m.f1:.2f}", str(m.support)] for m in metrics]
    writer.write_table(["class", "precision", "recall", "f1", "support"], rows, (False, True, True, True, True))
    return writer.getvalue()


def predict_pixels(model: MicroDenseNet, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    @param model: Trained model.
    @param pixels: Pixel-space batch [N,C,H,W].
    @return: (class indices [N], float64 probabilities [N,K]); argmax ties go to the lowest index.
    """
    probs = ops.softmax(model.logits(pixels).astype(np.float64))
    return probs.argmax(axis=1), probs


def predict(model: MicroDenseNet, images: Sequence[LabeledImage]) -> Tuple[List[ClassLabel], np.ndarray]:
    if not images:
        return list(), np.zeros((0, model.arch.num_classes))

    indices, probs = predict_pixels(model, stack_pixels(images))
    return [model.labels[i] for i in indices], probs


def evaluate_predictions(truth: Sequence[int], predicted: Sequence[int],
                         num_classes: int) -> Tuple[float, List[float], ConfusionMatrix]:
    cm = ConfusionMatrix.from_predictions(truth, predicted, num_classes)
    return cm.overall(), cm.per_class(), cm


def evaluate(model: MicroDenseNet, test_set: Sequence[LabeledImage]) -> Tuple[float, List[float], ConfusionMatrix]:
    """
    @param model: Trained model.
    @param test_set: Non-empty evaluation images.
    @return: (overall accuracy, per-class recall, confusion matrix).
    """
    if not test_set:
        raise ValidationError("Test set is empty")

    labels, _ = predict(model, test_set)
    return evaluate_predictions([img.label.index for img in test_set], [l.index for l in labels], model.arch.num_classes)


def checkpoint_document(model: MicroDenseNet) -> dict:
    weights = dict()

    for name, tensor in model.params.items():
        data = np.ascontiguousarray(tensor.data, dtype=tensor.dtype.newbyteorder('<'))
        weights[name] = {
            "shape": list(tensor.shape),
            "dtype": tensor.dtype.name,
            "data": base64.b64encode(data.tobytes()).decode("ascii")
        }

    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": asdict(model.arch),
        "normalization": model.stats.to_dict(),
        "labels": [l.name for l in model.labels],
        "weights": weights
    }


def checkpoint_hash(model: MicroDenseNet) -> str:
    return sha256_hex(canonical_json(checkpoint_document(model)).encode("utf-8"))


def model_from_document(doc: dict) -> MicroDenseNet:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"Not a clinaudit checkpoint (format {doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"Unsupported checkpoint version {doc.get('version')!r}")

    arch = Architecture(**doc["architecture"])
    stats = NormalizationStats(tuple(doc["normalization"]["mean"]), tuple(doc["normalization"]["std"]))
    labels = tuple(ClassLabel(i, name) for i, name in enumerate(doc["labels"]))
    params = dict()

    for name, entry in doc["weights"].items():
        dtype = np.dtype(entry["dtype"]).newbyteorder('<')
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype=dtype)
        params[name] = Tensor(raw.reshape(entry["shape"]), requires_grad=True, dtype=np.dtype(entry["dtype"]), name=name)

    return MicroDenseNet(arch, params, stats, labels)


def save_checkpoint(model: MicroDenseNet, path: str) -> str:
    return write_json(path, checkpoint_document(model))


def load_checkpoint(path: str) -> MicroDenseNet:
    try:
        return model_from_document(read_json(path))
    except (KeyError, TypeError) as e:
        raise ValidationError(f"Malformed checkpoint '{path}': {e}") from e


def write_trace_csv(trace: TrainingTrace, path: str) -> str:
    return write_text(path, trace.to_csv())
