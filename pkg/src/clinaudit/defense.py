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
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
from scipy.ndimage import gaussian_filter
from .attack import AttackConfig, fgm_batch, fgm_pixels
from .constants import *
from .data import ClassLabel, LabeledImage, stack_pixels
from .errors import ValidationError, TrainingDivergedError, UsageError
from .model import MicroDenseNet, ConfusionMatrix, Adam, gradient_step, predict_pixels
from .utils import SplitMix64, audit_log


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = SMOOTHING_SIGMA
    truncate: float = SMOOTHING_TRUNCATE
    boundary: str = SMOOTHING_BOUNDARY

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"Smoothing sigma must be > 0, got {self.sigma}")
        if not self.truncate > 0:
            raise ValidationError(f"Smoothing truncate must be > 0, got {self.truncate}")
        if self.boundary not in BOUNDARY_MODES:
            raise ValidationError(f"Smoothing boundary must be one of {', '.join(BOUNDARY_MODES)}, got '{self.boundary}'")

    @property
    def radius(self) -> int:
        return int(self.truncate * self.sigma + 0.5)


@dataclass(frozen=True)
class EnsembleConfig:
    votes: int = ENSEMBLE_VOTES
    max_shift: int = ENSEMBLE_MAX_SHIFT
    flip_allowed: bool = True
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.votes < 1:
            raise ValidationError(f"Ensemble needs at least one vote, got {self.votes}")
        if self.max_shift < 0:
            raise ValidationError(f"max_shift must be >= 0, got {self.max_shift}")


@dataclass(frozen=True)
class AdvTrainConfig:
    steps: int = ADV_TRAIN_STEPS
    learning_rate: float = ADV_TRAIN_LR
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    batch_size: int = BATCH_SIZE
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError(f"Adversarial training needs steps >= 1, got {self.steps}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")


def gaussian_kernel(cfg: SmoothingConfig) -> np.ndarray:
    """
    @param cfg: Smoothing parameters.
    @return: Normalised 1-D taps exp(-k^2 / 2 sigma^2) for k in [-radius, radius].
    """
    k = np.arange(-cfg.radius, cfg.radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / cfg.sigma) ** 2)
    return w / w.sum()


def smooth_pixels(pixels: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    # Spatial axes only; channels (and the batch axis, if any) stay separate.
    sigma = (0.0,) * (pixels.ndim - 2) + (cfg.sigma, cfg.sigma)
    out = gaussian_filter(pixels.astype(np.float64), sigma=sigma, mode=cfg.boundary, truncate=cfg.truncate)
    return np.clip(out, 0.0, 1.0).astype(pixels.dtype)


def gaussian_smooth(img: LabeledImage, cfg: SmoothingConfig) -> LabeledImage:
    return img.with_pixels(smooth_pixels(img.pixels, cfg))


@dataclass(frozen=True)
class Augmentation:
    flip: bool
    dx: int
    dy: int

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.dx == 0 and self.dy == 0


def draw_augmentations(cfg: EnsembleConfig, stream: int = 0) -> List[Augmentation]:
    rng = SplitMix64(cfg.seed).fork(stream)
    drawn = list()

    for _ in range(cfg.votes):
        flip = cfg.flip_allowed and rng.uniform() < 0.5
        dx = rng.randint(-cfg.max_shift, cfg.max_shift)
        dy = rng.randint(-cfg.max_shift, cfg.max_shift)
        drawn.append(Augmentation(flip, dx, dy))

    return drawn


def augment(pixels: np.ndarray, aug: Augmentation) -> np.ndarray:
    """
    Horizontal flip, then an integer shift with zero fill.

    @param pixels: Image [C,H,W].
    @param aug: Transform.
    @return: New array of the same shape.
    """
    if aug.is_identity:
        return pixels.copy()

    src = pixels[:, :, ::-1] if aug.flip else pixels
    _, h, w = src.shape
    out = np.zeros_like(src)

    if abs(aug.dx) >= w or abs(aug.dy) >= h:
        return out

    ys, yd = (slice(0, h - aug.dy), slice(aug.dy, h)) if aug.dy >= 0 else (slice(-aug.dy, h), slice(0, h + aug.dy))
    xs, xd = (slice(0, w - aug.dx), slice(aug.dx, w)) if aug.dx >= 0 else (slice(-aug.dx, w), slice(0, w + aug.dx))
    out[:, yd, xd] = src[:, ys, xs]
    return out


def plurality_vote(votes: Sequence[int], mean_probabilities: Sequence[float]) -> Tuple[int, List[int]]:
    """
    Most frequent vote. Ties go to the highest mean probability among
    the tied classes, then to the lowest class index.

    @param votes: Predicted class per augmentation.
    @param mean_probabilities: Mean softmax output per class.
    @return: (winning class, tally per class).
    """
    probs = np.asarray(mean_probabilities, dtype=np.float64)
    tally = np.bincount(np.asarray(votes, dtype=np.int64), minlength=len(probs))
    tied = np.flatnonzero(tally == tally.max())
    best = tied[probs[tied] == probs[tied].max()]
    return int(best.min()), tally.tolist()


@dataclass
class EnsembleOutcome:
    label: ClassLabel
    tally: List[int]
    mean_probabilities: np.ndarray


def ensemble_predict(model: MicroDenseNet, img: LabeledImage, cfg: EnsembleConfig, stream: int = 0) -> EnsembleOutcome:
    """
    Test-time augmentation vote.

    @param model: Trained model.
    @param img: Pixel-space image.
    @param cfg: Vote count, shift range and seed.
    @param stream: Generator substream, so each image of a batch draws its own augmentations.
    @return: Winning label, tally and mean probabilities.
    """
    views = np.stack([augment(img.pixels, aug) for aug in draw_augmentations(cfg, stream)])
    votes, probs = predict_pixels(model, views)
    mean = probs.mean(axis=0)
    winner, tally = plurality_vote(votes, mean)
    return EnsembleOutcome(model.labels[winner], tally, mean)


def ensemble_predict_batch(model: MicroDenseNet, images: Sequence[LabeledImage], cfg: EnsembleConfig) -> List[EnsembleOutcome]:
    return [ensemble_predict(model, img, cfg, stream=i) for i, img in enumerate(images)]


@dataclass(frozen=True)
class AdvTrainStep:
    step: int
    loss: float
    crafted: int


def mini_adversarial_train(model: MicroDenseNet, train_images: Sequence[LabeledImage], cfg: AdvTrainConfig,
                           attack: AttackConfig, trace: Optional[List[AdvTrainStep]] = None) -> MicroDenseNet:
    """
    A few Adam steps on FGM examples crafted against the current weights.

    @param model: Trained model; never modified.
    @param train_images: Training-split images batches are drawn from.
    @param cfg: Step count, learning rate, batch size and seed.
    @param attack: Budget used to craft each batch.
    @param trace: Optional list receiving one record per optimizer step.
    @return: New fine-tuned model.
    """
    if not train_images:
        raise ValidationError("Adversarial training needs a non-empty training set")

    pixels = stack_pixels(train_images)
    labels = np.array([img.label.index for img in train_images], dtype=np.int64)
    rng = SplitMix64(cfg.seed)
    order: List[int] = list()
    params = {k: t.data for k, t in model.params.items()}
    optimizer = Adam(list(params), cfg.betas, cfg.eps)

    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.shuffle(list(range(len(train_images)))))

        batch = np.array(order[:cfg.batch_size], dtype=np.int64)
        del order[:cfg.batch_size]
        current = model.with_params(params)
        adv = fgm_pixels(current, pixels[batch], labels[batch], attack)
        loss, _, grads = gradient_step(current, params, adv, labels[batch])

        if not np.isfinite(loss):
            raise TrainingDivergedError(f"Adversarial fine-tuning loss became {loss} at step {step}")

        params = optimizer.step(params, grads, cfg.learning_rate)

        if trace is not None:
            trace.append(AdvTrainStep(step, loss, len(batch)))

        audit_log(f"Adversarial step {step}/{cfg.steps}: loss {loss:.4f}", source="defense", severity=1)

    return model.with_params(params)


@dataclass
class MitigationRow:
    condition: str
    accuracy: float
    delta: Optional[float]
    per_class: List[float] = field(default_factory=list)
    consistency: Optional[float] = None
    assessment: str = ''
    confusion: Optional[ConfusionMatrix] = None

    @property
    def title(self) -> str:
        return CONDITION_TITLES.get(self.condition, self.condition)


def assess(condition: str, accuracy: float, clean: float, undefended: float) -> str:
    """
    @param condition: Condition name.
    @param accuracy: Condition accuracy.
    @param clean: Clean baseline accuracy.
    @param undefended: Accuracy under attack without a defence.
    @return: Clinical assessment string.
    """
    if condition == CONDITION_CLEAN:
        return "Acceptable" if accuracy >= ACCEPTABLE_ACCURACY else "Below clinical threshold"
    if condition == CONDITION_ADVERSARIAL:
        return "Clinically dangerous" if accuracy < clean else "Unaffected"
    if accuracy < undefended:
        return "Worse than no defence"
    if accuracy >= clean - RESTORED_MARGIN:
        return "Restored"
    if accuracy > undefended:
        return "Partial recovery - insufficient"
    return "No improvement"


@dataclass
class MitigationReport:
    epsilon: float
    rows: List[MitigationRow]
    n: int = 0

    def __post_init__(self):
        missing = [c for c in CONDITIONS if c not in {r.condition for r in self.rows}]
        if missing:
            raise ValidationError(f"Mitigation report lacks conditions {missing}")

    def row(self, condition: str) -> MitigationRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise ValidationError(f"No mitigation row '{condition}'")

    @classmethod
    def from_accuracies(cls, epsilon: float, accuracies: Mapping[str, float], n: int = 0,
                        per_class: Optional[Mapping[str, List[float]]] = None,
                        consistency: Optional[Mapping[str, float]] = None) -> MitigationReport:
        """
        Assemble rows, deltas and assessments from condition accuracies.

        @param epsilon: Attack budget.
        @param accuracies: Condition name -> accuracy; must include every mandatory condition.
        @param n: Images per condition.
        @param per_class: Optional per-class accuracy per condition.
        @param consistency: Optional agreement with clean predictions per condition.
        @return: MitigationReport in mandatory-condition order, extra conditions after.
        """
        missing = [c for c in CONDITIONS if c not in accuracies]
        if missing:
            raise ValidationError(f"Mitigation report lacks conditions {missing}")

        clean = accuracies[CONDITION_CLEAN]
        undefended = accuracies[CONDITION_ADVERSARIAL]
        names = list(CONDITIONS) + sorted(c for c in accuracies if c not in CONDITIONS)
        rows = list()

        for name in names:
            acc = accuracies[name]
            rows.append(MitigationRow(
                name, acc,
                None if name == CONDITION_CLEAN else acc - clean,
                list((per_class or {}).get(name, [])),
                (consistency or {}).get(name),
                assess(name, acc, clean, undefended)
            ))

        return cls(epsilon, rows, n)

    @classmethod
    def from_confusions(cls, epsilon: float, confusions: Mapping[str, ConfusionMatrix],
                        consistency: Optional[Mapping[str, float]] = None) -> MitigationReport:
        """
        Like from_accuracies, but every accuracy and per-class recall is
        derived from the condition's confusion matrix, which the row keeps.

        @param epsilon: Attack budget.
        @param confusions: Condition name -> confusion matrix over the same images.
        @param consistency: Optional agreement with clean predictions per condition.
        @return: MitigationReport.
        """
        totals = {cm.total for cm in confusions.values()}

        if len(totals) > 1:
            raise ValidationError(f"Mitigation conditions were scored on different image counts {sorted(totals)}")

        report = cls.from_accuracies(epsilon, {name: cm.overall() for name, cm in confusions.items()},
                                     totals.pop() if totals else 0,
                                     {name: cm.per_class() for name, cm in confusions.items()}, consistency)

        for row in report.rows:
            row.confusion = confusions[row.condition]

        return report


def mitigation_stress_test(model: MicroDenseNet, test_set: Sequence[LabeledImage], epsilon: float,
                           train_set: Optional[Sequence[LabeledImage]] = None,
                           smoothing: SmoothingConfig = SmoothingConfig(),
                           ensemble: EnsembleConfig = EnsembleConfig(),
                           adv_train: AdvTrainConfig = AdvTrainConfig(),
                           batch_size: int = BATCH_SIZE, workers: int = 1) -> MitigationReport:
    """
    Compare the clean baseline, the undefended attack and three defences
    on one adversarial batch crafted against the original model.

    @param model: Trained model.
    @param test_set: Evaluation images.
    @param epsilon: Attack budget.
    @param train_set: Images for the adversarial fine-tuning defence; the test set is never trained on.
    @param smoothing: Gaussian smoothing parameters.
    @param ensemble: Augmentation vote parameters.
    @param adv_train: Adversarial fine-tuning parameters.
    @param batch_size: Attack batch size.
    @param workers: Attack threads.
    @return: MitigationReport.
    """
    if not test_set:
        raise ValidationError("Test set is empty")
    if not train_set:
        raise UsageError("mitigation_stress_test needs the training split for the adversarial fine-tuning defence")

    attack = AttackConfig(epsilon)
    truth = [img.label.index for img in test_set]
    k = model.arch.num_classes
    adv = stack_pixels(fgm_batch(model, test_set, attack, batch_size, workers))
    clean_pred, _ = predict_pixels(model, stack_pixels(test_set))
    hardened = mini_adversarial_train(model, train_set, adv_train, attack)
    adv_images = [img.with_pixels(adv[i]) for i, img in enumerate(test_set)]

    predictions: Dict[str, np.ndarray] = {
        CONDITION_CLEAN: clean_pred,
        CONDITION_ADVERSARIAL: predict_pixels(model, adv)[0],
        CONDITION_GAUSSIAN: predict_pixels(model, smooth_pixels(adv, smoothing))[0],
        CONDITION_ENSEMBLE: np.array([o.label.index for o in ensemble_predict_batch(model, adv_images, ensemble)]),
        CONDITION_ADV_TRAIN: predict_pixels(hardened, adv)[0]
    }

    confusions, consistency = dict(), dict()

    for name, pred in predictions.items():
        confusions[name] = ConfusionMatrix.from_predictions(truth, pred, k)
        consistency[name] = float(np.mean(pred == clean_pred))
        audit_log(f"{CONDITION_TITLES[name]}: accuracy {confusions[name].overall():.4f}", source="defense", severity=1)

    return MitigationReport.from_confusions(epsilon, confusions, consistency)
