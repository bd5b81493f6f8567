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

import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
from .constants import *
from .data import LabeledImage, ClassLabel, stack_pixels
from .errors import ValidationError, DimensionError, UsageError
from .model import MicroDenseNet, ConfusionMatrix, predict_pixels, evaluate_predictions
from .stats import ProportionCI, proportion_interval
from .utils import audit_log, chunks, format_percent


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    clip_min: float = CLIP_MIN
    clip_max: float = CLIP_MAX

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValidationError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not self.clip_min < self.clip_max:
            raise ValidationError(f"clip_min must be below clip_max, got [{self.clip_min}, {self.clip_max}]")

    @property
    def targeted(self) -> bool:
        return False


@dataclass(frozen=True)
class EpsilonGrid:
    levels: Tuple[float, ...]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> float:
        return self.levels[index]

    @property
    def first_attack(self) -> float:
        """
        @return: The smallest non-zero level, where mitigation is stress tested.
        """
        return next(e for e in self.levels if e > 0)


def epsilon_grid(levels: int = EPSILON_LEVELS, maximum: float = EPSILON_MAX) -> EpsilonGrid:
    """
    Uniform grid from 0 to maximum inclusive.

    @param levels: Number of points, at least 2.
    @param maximum: Largest budget.
    @return: EpsilonGrid with levels[i] = maximum * i / (levels - 1).
    """
    if levels < 2:
        raise ValidationError(f"An epsilon grid needs at least 2 levels, got {levels}")
    if not 0 < maximum <= 1:
        raise ValidationError(f"Grid maximum must lie in (0, 1], got {maximum}")
    return EpsilonGrid(tuple(maximum * i / (levels - 1) for i in range(levels)))


def fgm_pixels(model: MicroDenseNet, pixels: np.ndarray, labels: Sequence[int], cfg: AttackConfig) -> np.ndarray:
    """
    Single-step L-infinity sign attack on a batch.

    @param model: Attacked model; its input gradient is taken through the normalisation.
    @param pixels: Pixel-space batch [N,C,H,W].
    @param labels: Ground-truth class indices.
    @param cfg: Budget and clip range.
    @return: clip(x + epsilon * sign(grad), clip_min, clip_max), same dtype as the input.
    """
    if cfg.epsilon == 0:
        return pixels.copy()

    _, grad = model.input_gradient(pixels, labels)
    step = cfg.epsilon * np.sign(grad.astype(np.float64))
    adv = np.clip(pixels.astype(np.float64) + step, cfg.clip_min, cfg.clip_max)
    return adv.astype(pixels.dtype)


def _check_model(model: MicroDenseNet, images: Sequence[LabeledImage]):
    if not isinstance(model, MicroDenseNet):
        raise UsageError(f"Expected a MicroDenseNet, got {type(model).__name__}")

    c, h, w = images[0].shape

    if (c, h, w) != (model.arch.in_channels, model.arch.image_size, model.arch.image_size):
        raise UsageError(f"Model expects [{model.arch.in_channels},{model.arch.image_size},{model.arch.image_size}] "
                         f"images, got [{c},{h},{w}]")


def fgm(model: MicroDenseNet, image: LabeledImage, cfg: AttackConfig) -> LabeledImage:
    _check_model(model, [image])
    adv = fgm_pixels(model, image.pixels[np.newaxis], [image.label.index], cfg)
    return image.with_pixels(adv[0])


def fgm_batch(model: MicroDenseNet, images: Sequence[LabeledImage], cfg: AttackConfig,
              batch_size: int = BATCH_SIZE, workers: int = 1) -> List[LabeledImage]:
    """
    Attack many images. Batches may run on a thread pool; results keep
    the input order.

    @param model: Attacked model, shared read-only.
    @param images: Pixel-space images.
    @param cfg: Budget and clip range.
    @param batch_size: Images per gradient computation.
    @param workers: Threads.
    @return: Adversarial images, label and source_id preserved.
    """
    if not images:
        return list()

    _check_model(model, images)

    def _one(batch: List[LabeledImage]) -> np.ndarray:
        return fgm_pixels(model, stack_pixels(batch), [img.label.index for img in batch], cfg)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        adv = np.concatenate(list(pool.map(_one, chunks(list(images), batch_size))))

    return [img.with_pixels(adv[i]) for i, img in enumerate(images)]


@dataclass
class SweepRow:
    epsilon: float
    accuracy: float
    ci: ProportionCI
    per_class: List[float]
    confusion: ConfusionMatrix
    interpretation: str = ''

    @property
    def ci_lower(self) -> float:
        return self.ci.lower

    @property
    def ci_upper(self) -> float:
        return self.ci.upper


@dataclass
class SweepResult:
    rows: List[SweepRow]
    method: str = "wilson"
    confidence: float = CONFIDENCE
    labels: Tuple[ClassLabel, ...] = field(default_factory=tuple)

    @property
    def clean(self) -> SweepRow:
        return self.rows[0]

    def row_at(self, epsilon: float) -> SweepRow:
        for row in self.rows:
            if abs(row.epsilon - epsilon) < 1e-12:
                return row
        raise ValidationError(f"No sweep row at epsilon {epsilon}")

    def first_attack(self) -> SweepRow:
        return next(row for row in self.rows if row.epsilon > 0)


def interpret(index: int, accuracy: float, previous: Optional[float], chance: float, last: bool) -> str:
    """
    Clinical reading of one decay row.

    @param index: Position in the grid.
    @param accuracy: Row accuracy.
    @param previous: Accuracy of the preceding row.
    @param chance: 1 / K.
    @param last: Whether this is the largest budget.
    @return: Interpretation string.
    """
    if index == 0:
        return "Clean baseline"
    if index == 1:
        return "First attack - clinical danger zone"

    margin = accuracy - chance

    if margin <= 0.05:
        return "Complete collapse" if last else "Effectively random"
    if margin <= 0.12:
        return "Approaching random"
    if margin <= 0.20:
        return "Near random chance"
    if accuracy < 0.6:
        return "Below 60% threshold"
    if previous is not None and accuracy < previous:
        return "Continued degradation"
    return "Sustained collapse"


def robustness_sweep(model: MicroDenseNet, test_set: Sequence[LabeledImage], grid: EpsilonGrid,
                     ci: str = "wilson", confidence: float = CONFIDENCE, batch_size: int = BATCH_SIZE,
                     workers: int = 1) -> SweepResult:
    """
    Attack every test image at every grid level and evaluate.

    @param model: Trained model.
    @param test_set: Non-empty pixel-space images.
    @param grid: Budgets; the row at 0 is the clean baseline.
    @param ci: Interval method, "wilson" or "wald".
    @param confidence: Interval coverage.
    @param batch_size: Images per attack batch.
    @param workers: Attack threads.
    @return: One row per level.
    """
    if not test_set:
        raise ValidationError("Test set is empty")

    truth = [img.label.index for img in test_set]
    num_classes = model.arch.num_classes
    rows = list()

    for i, eps in enumerate(grid.levels):
        adv = fgm_batch(model, test_set, AttackConfig(eps), batch_size, workers)
        predicted, _ = predict_pixels(model, stack_pixels(adv))
        overall, per_class, cm = evaluate_predictions(truth, predicted, num_classes)
        interval = proportion_interval(cm.correct, cm.total, ci, confidence)
        previous = rows[-1].accuracy if rows else None
        label = interpret(i, overall, previous, 1.0 / num_classes, i == len(grid) - 1)
        rows.append(SweepRow(eps, overall, interval, per_class, cm, label))
        audit_log(f"epsilon {eps:.3f}: accuracy {format_percent(overall)}%", source="attack", severity=1)

    return SweepResult(rows, ci, confidence, model.labels)


def perturbation_map(clean: LabeledImage, adv: LabeledImage, amplification: float = AMPLIFICATION) -> np.ndarray:
    """
    Signed perturbation rendered around mid-gray.

    @param clean: Original image.
    @param adv: Attacked image.
    @param amplification: Contrast multiplier.
    @return: clip(0.5 + amplification * (adv - clean), 0, 1) as a [C,H,W] array.
    """
    if clean.shape != adv.shape:
        raise DimensionError(f"Perturbation map needs matching shapes, got {clean.shape} and {adv.shape}", axis="shape")

    diff = adv.pixels.astype(np.float64) - clean.pixels.astype(np.float64)
    return np.clip(0.5 + amplification * diff, 0.0, 1.0)


@dataclass(frozen=True)
class ClassCollapse:
    name: str
    clean: float
    attacked: float

    @property
    def drop(self) -> float:
        return self.clean - self.attacked


@dataclass(frozen=True)
class Confusion:
    truth: str
    predicted: str
    count: int

    def __str__(self) -> str:
        return f"{self.truth} -> {self.predicted}: {self.count}"


def per_class_collapse(sweep: SweepResult, top: int = 3) -> Tuple[List[ClassCollapse], List[Confusion]]:
    """
    Compare clean and first-attack per-class accuracy and list the most
    frequent misclassifications under attack.

    @param sweep: Completed sweep.
    @param top: Confusions to keep.
    @return: (per-class collapse, confusions sorted by count then class order).
    """
    clean, attacked = sweep.clean, sweep.first_attack()
    collapse = [ClassCollapse(l.name, clean.per_class[l.index], attacked.per_class[l.index]) for l in sweep.labels]
    counts = attacked.confusion.counts
    confusions = [(int(counts[i, j]), i, j) for i in range(len(counts)) for j in range(len(counts)) if i != j and counts[i, j]]
    confusions.sort(key=lambda c: (-c[0], c[1], c[2]))
    names = [l.name for l in sweep.labels]
    return collapse, [Confusion(names[i], names[j], n) for n, i, j in confusions[:top]]


def danger_zone_threshold(sweep: SweepResult, threshold: float = DANGER_THRESHOLD) -> Optional[float]:
    """
    @param sweep: Completed sweep.
    @param threshold: Accuracy regarded as clinically unsafe.
    @return: First epsilon whose accuracy falls below threshold, or None.
    """
    for row in sweep.rows:
        if row.accuracy < threshold:
            return row.epsilon
    return None
