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

import os
import os.path
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter
from .constants import *
from .errors import ValidationError, DimensionError, AuditIOError
from .tensor import Tensor
from .utils import SplitMix64, audit_log, read_json


@dataclass(frozen=True)
class ClassLabel:
    index: int
    name: str

    def __str__(self) -> str:
        return self.name


def default_labels() -> Tuple[ClassLabel, ...]:
    return tuple(ClassLabel(i, name) for i, name in enumerate(CLASS_NAMES))


def make_labels(names: Sequence[str]) -> Tuple[ClassLabel, ...]:
    """
    Build a label set, index order following the given names.

    @param names: Unique class names.
    @return: Tuple of ClassLabel.
    """
    if len(set(names)) != len(names):
        raise ValidationError(f"Class names must be unique, got {list(names)}")
    return tuple(ClassLabel(i, name) for i, name in enumerate(names))


def label_by_name(labels: Sequence[ClassLabel], name: str) -> ClassLabel:
    for label in labels:
        if label.name == name:
            return label
    raise ValidationError(f"Unknown class '{name}'; expected one of {[l.name for l in labels]}")


@dataclass(frozen=True)
class NormalizationStats:
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ValidationError("Normalization mean and std must have one entry per channel")
        if any(s <= 0 for s in self.std):
            raise ValidationError(f"Normalization std must be positive, got {self.std}")

    @property
    def channels(self) -> int:
        return len(self.mean)

    @classmethod
    def for_channels(cls, channels: int) -> NormalizationStats:
        if channels == 3:
            return cls(IMAGENET_MEAN, IMAGENET_STD)
        if channels == 1:
            return cls(GRAY_MEAN, GRAY_STD)
        raise ValidationError(f"Images must have 1 or 3 channels, got {channels}")

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


@dataclass(frozen=True)
class SplitConfig:
    per_class_train: int = PER_CLASS_TRAIN
    per_class_test: int = PER_CLASS_TEST
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.per_class_train <= 0 or self.per_class_test <= 0:
            raise ValidationError("Per-class train and test counts must be positive")


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: ClassLabel
    source_id: str

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise DimensionError(f"Image '{self.source_id}' must be [C,H,W] with C in (1, 3), got {self.pixels.shape}", axis="C")
        # NaN fails both comparisons
        if not np.all((self.pixels >= 0.0) & (self.pixels <= 1.0)):
            raise ValidationError(f"Image '{self.source_id}' has pixels outside [0, 1]")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> LabeledImage:
        """
        Same label and provenance, new pixel array (e.g. after an attack).

        @param pixels: Replacement [C,H,W] array.
        @return: New LabeledImage.
        """
        return LabeledImage(pixels, self.label, self.source_id)


@dataclass
class SkippedFile:
    path: str
    reason: str


def stack_pixels(images: Sequence[LabeledImage]) -> np.ndarray:
    if not images:
        raise ValidationError("Expected at least one image")

    shape = images[0].shape

    for img in images:
        if img.shape != shape:
            raise DimensionError(f"Image '{img.source_id}' has shape {img.shape}, expected {shape}", axis="HW")

    return np.stack([img.pixels for img in images]).astype(DTYPE, copy=False)


def normalize(img: LabeledImage, stats: NormalizationStats) -> Tensor:
    """
    Map pixel-space values to model space: (x - mean[c]) / std[c].

    @param img: Pixel-space image in [0,1].
    @param stats: Per-channel statistics matching the image channels.
    @return: Tensor [C,H,W].
    """
    if img.shape[0] != stats.channels:
        raise ValidationError(f"Image '{img.source_id}' has {img.shape[0]} channels, stats describe {stats.channels}")

    mean = np.asarray(stats.mean, dtype=DTYPE).reshape(-1, 1, 1)
    std = np.asarray(stats.std, dtype=DTYPE).reshape(-1, 1, 1)
    return Tensor((img.pixels - mean) / std)


def denormalize(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """
    Inverse of normalize: x * std[c] + mean[c] on a [C,H,W] or [N,C,H,W] array.

    @param values: Model-space values.
    @param stats: The statistics used to normalise them.
    @return: Pixel-space array.
    """
    shape = (-1, 1, 1) if values.ndim == 3 else (1, -1, 1, 1)
    mean = np.asarray(stats.mean, dtype=values.dtype).reshape(shape)
    std = np.asarray(stats.std, dtype=values.dtype).reshape(shape)
    return values * std + mean


def _class_texture(rng: SplitMix64, class_index: int, n_classes: int, size: int) -> np.ndarray:
    # Classes share brightness and contrast and differ only in stripe
    # orientation, spread evenly over half a turn.
    jitter, angle, phase = rng.normal_block(1)[0], rng.uniform(), rng.uniform()
    theta = np.pi * class_index / n_classes + (angle - 0.5) * SYNTHETIC_ANGLE_SPREAD
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    wave = np.sin(2.0 * np.pi * (SYNTHETIC_CYCLES * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))
    noise = gaussian_filter(rng.normal_block(size * size).reshape(size, size), sigma=1.0, mode="reflect")
    img = SYNTHETIC_LEVEL + 0.04 * jitter + SYNTHETIC_CONTRAST * wave + 0.05 * noise
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_benchmark(cfg: SplitConfig, image_size: int = DEFAULT_IMAGE_SIZE,
                                 labels: Optional[Sequence[ClassLabel]] = None) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """
    Deterministic procedural stand-in for the chest X-ray split: one
    texture family per class, single channel, fully determined by the seed.
    Every class has the same mean brightness; only the orientation of a
    fine stripe pattern tells them apart.

    @param cfg: Per-class counts and seed.
    @param image_size: Edge length, at least 16.
    @param labels: Class labels; defaults to the three diagnostic classes.
    @return: (train, test) lists; test images never share a source_id with train.
    """
    if image_size < MIN_SYNTHETIC_SIZE:
        raise ValidationError(f"Synthetic image size must be >= {MIN_SYNTHETIC_SIZE}, got {image_size}")

    labels = tuple(labels or default_labels())
    root = SplitMix64(cfg.seed)
    train, test = list(), list()

    for label in labels:
        rng = root.fork(label.index)
        slug = label.name.lower().replace(' ', '-')

        for i in range(cfg.per_class_train + cfg.per_class_test):
            pixels = _class_texture(rng, label.index, len(labels), image_size).astype(DTYPE)[np.newaxis]
            img = LabeledImage(pixels, label, f"synthetic/{slug}/{i:04d}")
            (train if i < cfg.per_class_train else test).append(img)

    audit_log(f"Generated {len(train)} train / {len(test)} test synthetic images ({image_size}x{image_size})",
              source="data", severity=1)
    return train, test


def _resize(plane: np.ndarray, size: int) -> np.ndarray:
    if plane.shape == (size, size):
        return plane
    return np.asarray(Image.fromarray(plane, mode='F').resize((size, size), Image.BILINEAR), dtype=np.float32)


def decode_image(path: str, channels: int, target_size: int) -> np.ndarray:
    """
    Decode a PNG or binary PGM/PPM file into a [C,H,W] float array in [0,1],
    resized bilinearly to target_size x target_size.

    @param path: Image file.
    @param channels: 1 for grayscale, 3 for RGB; gray inputs are replicated to 3.
    @param target_size: Output edge length.
    @return: Pixel array.
    """
    with Image.open(path) as im:
        im.load()

        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            scale = 65535.0
            planes = [np.asarray(im, dtype=np.float32)]
        else:
            scale = 255.0
            rgb = im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr") and channels == 3
            arr = np.asarray(im.convert("RGB" if rgb else "L"), dtype=np.float32)
            planes = [arr[:, :, c] for c in range(3)] if rgb else [arr]

    planes = [np.clip(_resize(p / scale, target_size), 0.0, 1.0) for p in planes]

    if channels == 3 and len(planes) == 1:
        planes = planes * 3

    return np.stack(planes).astype(DTYPE)


def _scan_class(root: str, name: str) -> List[str]:
    directory = os.path.join(root, name)

    if not os.path.isdir(directory):
        raise ValidationError(f"Missing class directory '{directory}'")

    files = sorted(os.path.join(directory, f) for f in os.listdir(directory)
                   if os.path.splitext(f)[1].lower() in IMAGE_SUFFIXES)

    if not files:
        raise ValidationError(f"Class directory '{directory}' contains no images")

    return files


def _decode_all(paths: Sequence[str], channels: int, target_size: int, workers: int,
                skipped: Optional[List[SkippedFile]]) -> List[Optional[np.ndarray]]:
    def _one(path: str) -> Tuple[Optional[np.ndarray], str]:
        try:
            return decode_image(path, channels, target_size), ''
        except (OSError, UnidentifiedImageError, ValueError) as e:
            return None, str(e)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(_one, paths))

    decoded = list()

    for path, (pixels, reason) in zip(paths, results):
        if pixels is None:
            audit_log(f"Skipping unreadable image '{path}': {reason}", source="data", severity=2)
            if skipped is not None:
                skipped.append(SkippedFile(path, reason))
        decoded.append(pixels)

    return decoded


def load_image_directory(root_path: str, label_map: Mapping[str, ClassLabel], stats: NormalizationStats,
                         target_size: int, workers: int = 4,
                         skipped: Optional[List[SkippedFile]] = None) -> List[LabeledImage]:
    """
    Load a class-per-subdirectory image tree. Decoding may run on a thread
    pool; output order is always class order, then file name.

    @param root_path: Directory holding one subdirectory per class name.
    @param label_map: Subdirectory name -> label.
    @param stats: Statistics of the target model; fixes the channel count.
    @param target_size: Output edge length.
    @param workers: Decoder threads.
    @param skipped: Optional list that receives a record per unreadable file.
    @return: Images in pixel space.
    """
    if not os.path.isdir(root_path):
        raise AuditIOError(f"Unable to find image directory '{root_path}'")

    images = list()

    for name, label in sorted(label_map.items(), key=lambda kv: kv[1].index):
        paths = _scan_class(root_path, name)
        decoded = _decode_all(paths, stats.channels, target_size, workers, skipped)

        if all(p is None for p in decoded):
            raise ValidationError(f"Class directory '{name}' has no readable images")

        for path, pixels in zip(paths, decoded):
            if pixels is not None:
                source_id = os.path.relpath(path, root_path).replace(os.path.sep, '/')
                images.append(LabeledImage(pixels, label, source_id))

    return images


def load_manifest(path: str, labels: Sequence[ClassLabel], stats: NormalizationStats, target_size: int,
                  workers: int = 4, skipped: Optional[List[SkippedFile]] = None) -> Dict[str, List[LabeledImage]]:
    """
    Load images listed in a JSON manifest of {path, label, split} records.
    Relative paths resolve against the manifest's directory.

    @param path: Manifest file.
    @param labels: Known classes; every record label must name one.
    @param stats: Statistics of the target model.
    @param target_size: Output edge length.
    @param workers: Decoder threads.
    @param skipped: Optional list that receives a record per unreadable file.
    @return: Split name -> images, in manifest order.
    """
    records = read_json(path)

    if not isinstance(records, list):
        raise ValidationError(f"Manifest '{path}' must be a JSON array")

    base = os.path.dirname(os.path.abspath(path))
    files, entries = list(), list()

    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not {"path", "label", "split"} <= set(rec):
            raise ValidationError(f"Manifest record {i} needs 'path', 'label' and 'split'")
        label = label_by_name(labels, rec["label"])
        files.append(os.path.join(base, rec["path"]))
        entries.append((rec["path"], label, str(rec["split"])))

    decoded = _decode_all(files, stats.channels, target_size, workers, skipped)
    splits: Dict[str, List[LabeledImage]] = dict()

    for (source_id, label, split), pixels in zip(entries, decoded):
        if pixels is not None:
            splits.setdefault(split, list()).append(LabeledImage(pixels, label, source_id))

    seen: Dict[str, str] = dict()

    for split, images in splits.items():
        for img in images:
            if seen.setdefault(img.source_id, split) != split:
                raise ValidationError(f"'{img.source_id}' appears in both '{seen[img.source_id]}' and '{split}'")

    return splits


def stratified_sample(images: Sequence[LabeledImage], per_class: int, seed: int) -> List[LabeledImage]:
    """
    Draw exactly per_class images of every class present. Inputs are
    sorted by source_id first, so the draw ignores input order.

    @param images: Population.
    @param per_class: Images to keep per class.
    @param seed: Shuffle seed.
    @return: Deterministically shuffled sample.
    """
    if per_class <= 0:
        raise ValidationError(f"per_class must be positive, got {per_class}")

    by_class: Dict[int, List[LabeledImage]] = dict()

    for img in sorted(images, key=lambda im: im.source_id):
        by_class.setdefault(img.label.index, list()).append(img)

    rng = SplitMix64(seed)
    sample = list()

    for index in sorted(by_class):
        members = by_class[index]

        if len(members) < per_class:
            raise ValidationError(f"Class '{members[0].label.name}' has {len(members)} images, {per_class} requested")

        sample.extend(rng.shuffle(list(members))[:per_class])

    return list(rng.shuffle(sample))


def class_counts(images: Sequence[LabeledImage], num_classes: int) -> List[int]:
    counts = [0] * num_classes
    for img in images:
        counts[img.label.index] += 1
    return counts
