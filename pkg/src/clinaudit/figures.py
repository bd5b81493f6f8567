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
import io
import os.path
import numpy as np
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, Optional, Sequence, Tuple
from xml.sax.saxutils import escape, quoteattr
from PIL import Image
from .attack import SweepResult, perturbation_map
from .constants import *
from .data import ClassLabel, LabeledImage
from .defense import MitigationReport
from .errors import ValidationError
from .lingua import DriftProfile, is_unparseable
from .model import ConfusionMatrix, TrainingTrace
from .utils import TabWriter, ensure_directory, format_percent, write_text

SVG_NS = "http://www.w3.org/2000/svg"
FONT = "font-family=\"sans-serif\""

CLEAN_COLOR = "#2b6cb0"
ATTACK_COLOR = "#c53030"
BAND_COLOR = "#90cdf4"
DANGER_COLOR = "#fed7d7"
NEUTRAL_COLOR = "#718096"
CORRECT_COLOR = "#38a169"
INCORRECT_COLOR = "#e53e3e"
UNPARSEABLE_COLOR = "#a0aec0"
SERIES_COLORS = ("#2b6cb0", "#dd6b20", "#38a169", "#805ad5")

PANEL_SIZE = 96


def _n(value: float) -> str:
    return f"{value + 0.0:.2f}"


@dataclass(frozen=True)
class _Axes:
    left: float
    top: float
    width: float
    height: float
    x_min: float
    x_max: float
    y_min: float = 0.0
    y_max: float = 1.0

    def x(self, value: float) -> float:
        span = self.x_max - self.x_min or 1.0
        return self.left + (value - self.x_min) / span * self.width

    def y(self, value: float) -> float:
        span = self.y_max - self.y_min or 1.0
        return self.top + self.height - (value - self.y_min) / span * self.height

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def right(self) -> float:
        return self.left + self.width


@contextmanager
def _open(writer: TabWriter, width: int, height: int, title: str) -> Iterator[TabWriter]:
    writer.writeline('<?xml version="1.0" encoding="UTF-8"?>')

    with writer.nested(f'<svg xmlns="{SVG_NS}" version="1.1" width="{width}" height="{height}" '
                         f'viewBox="0 0 {width} {height}">', "</svg>"):
        writer.writeline(f"<title>{escape(title)}</title>")
        yield writer


def _text(writer: TabWriter, x: float, y: float, value: str, size: int = 11, anchor: str = "start", css: str = ''):
    klass = f' class="{css}"' if css else ''
    writer.writeline(f'<text x="{_n(x)}" y="{_n(y)}" {FONT} font-size="{size}" text-anchor="{anchor}"{klass}>'
                     f'{escape(value)}</text>')


def _line(writer: TabWriter, x1: float, y1: float, x2: float, y2: float, css: str, color: str = "#000000", dash: str = ''):
    dashed = f' stroke-dasharray="{dash}"' if dash else ''
    writer.writeline(f'<line class="{css}" x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" '
                     f'stroke="{color}"{dashed}/>')


def _rect(writer: TabWriter, x: float, y: float, w: float, h: float, fill: str, css: str = '', title: str = ''):
    klass = f'class="{css}" ' if css else ''
    tag = f'<rect {klass}x="{_n(x)}" y="{_n(y)}" width="{_n(max(w, 0.0))}" height="{_n(max(h, 0.0))}" fill="{fill}"'

    if title:
        writer.writeline(tag + f'><title>{escape(title)}</title></rect>')
    else:
        writer.writeline(tag + '/>')


def _rate_axis(writer: TabWriter, axes: _Axes, ticks: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)):
    _line(writer, axes.left, axes.top, axes.left, axes.bottom, "axis")
    _line(writer, axes.left, axes.bottom, axes.right, axes.bottom, "axis")

    for t in ticks:
        _line(writer, axes.left - 4, axes.y(t), axes.left, axes.y(t), "tick")
        _text(writer, axes.left - 6, axes.y(t) + 4, format_percent(t, 0) + '%', 10, "end")


def decay_curve_svg(sweep: SweepResult, width: int = 640, height: int = 400) -> str:
    """
    Accuracy against epsilon with the interval band and two reference
    lines: the clean accuracy and chance 1/K.

    @param sweep: Completed sweep.
    @param width: Pixels.
    @param height: Pixels.
    @return: SVG document.
    """
    if not sweep.rows:
        raise ValidationError("Cannot plot an empty sweep")

    rows = sweep.rows
    axes = _Axes(60, 40, width - 90, height - 100, 0.0, max(r.epsilon for r in rows) or 1.0)
    chance = 1.0 / max(1, len(sweep.labels) or len(rows[0].per_class))
    writer = TabWriter()

    with _open(writer, width, height, "decay"):
        _text(writer, width / 2, 22, "Accuracy under FGM attack", 14, "middle")
        _rate_axis(writer, axes)

        band = [(axes.x(r.epsilon), axes.y(r.ci_upper)) for r in rows]
        band += [(axes.x(r.epsilon), axes.y(r.ci_lower)) for r in reversed(rows)]
        writer.writeline(f'<polygon class="ci-band" fill="{BAND_COLOR}" fill-opacity="0.5" points="'
                         + ' '.join(f"{_n(x)},{_n(y)}" for x, y in band) + '"/>')

        _line(writer, axes.left, axes.y(sweep.clean.accuracy), axes.right, axes.y(sweep.clean.accuracy),
              "reference", CLEAN_COLOR, "6 4")
        _line(writer, axes.left, axes.y(chance), axes.right, axes.y(chance), "reference", NEUTRAL_COLOR, "2 4")
        _text(writer, axes.right, axes.y(sweep.clean.accuracy) - 4, "clean baseline", 10, "end")
        _text(writer, axes.right, axes.y(chance) - 4, "chance", 10, "end")

        writer.writeline(f'<polyline class="curve" fill="none" stroke="{ATTACK_COLOR}" stroke-width="2" points="'
                         + ' '.join(f"{_n(axes.x(r.epsilon))},{_n(axes.y(r.accuracy))}" for r in rows) + '"/>')

        with writer.nested('<g class="points">', "</g>"):
            for r in rows:
                writer.writeline(f'<circle class="point" cx="{_n(axes.x(r.epsilon))}" cy="{_n(axes.y(r.accuracy))}" r="3" '
                                 f'fill="{ATTACK_COLOR}"><title>epsilon {r.epsilon:.3f}: '
                                 f'{format_percent(r.accuracy)}%</title></circle>')

        for r in rows[::max(1, len(rows) // 7)]:
            _text(writer, axes.x(r.epsilon), axes.bottom + 16, f"{r.epsilon:.3f}", 10, "middle")

        _text(writer, width / 2, height - 18, "epsilon (L-infinity budget)", 11, "middle")

    return writer.getvalue()


def per_class_bars_svg(sweep: SweepResult, width: int = 520, height: int = 340) -> str:
    clean, attacked = sweep.clean, sweep.first_attack()
    labels = sweep.labels
    axes = _Axes(60, 40, width - 80, height - 100, 0.0, float(len(labels)))
    group = axes.width / max(1, len(labels))
    bar = group * 0.35
    writer = TabWriter()

    with _open(writer, width, height, "per-class"):
        _text(writer, width / 2, 22, f"Per-class accuracy, clean vs epsilon {attacked.epsilon:.3f}", 14, "middle")
        _rate_axis(writer, axes)

        for label in labels:
            x = axes.left + group * label.index + group * 0.15

            for offset, value, color, css in ((0.0, clean.per_class[label.index], CLEAN_COLOR, "bar clean"),
                                              (bar, attacked.per_class[label.index], ATTACK_COLOR, "bar attacked")):
                _rect(writer, x + offset, axes.y(value), bar, axes.bottom - axes.y(value), color, css,
                      f"{label.name}: {format_percent(value)}%")

            _text(writer, x + bar, axes.bottom + 16, label.name, 10, "middle")

    return writer.getvalue()


def mitigation_bars_svg(report: MitigationReport, width: int = 640, height: int = 320) -> str:
    """
    Horizontal accuracy bars per condition over a shaded region below
    the danger threshold.

    @param report: Stress test result.
    @param width: Pixels.
    @param height: Pixels.
    @return: SVG document.
    """
    axes = _Axes(200, 40, width - 240, height - 90, 0.0, 1.0)
    step = axes.height / len(report.rows)
    writer = TabWriter()

    with _open(writer, width, height, "mitigation"):
        _text(writer, width / 2, 22, f"Defence stress test at epsilon {report.epsilon:.3f}", 14, "middle")
        _rect(writer, axes.left, axes.top, axes.x(DANGER_THRESHOLD) - axes.left, axes.height, DANGER_COLOR,
              "danger-zone", f"Danger zone (<{format_percent(DANGER_THRESHOLD, 0)}%)")

        for i, row in enumerate(report.rows):
            y = axes.top + step * i + step * 0.2
            color = CLEAN_COLOR if row.condition == CONDITION_CLEAN else SERIES_COLORS[i % len(SERIES_COLORS)]
            _rect(writer, axes.left, y, axes.x(row.accuracy) - axes.left, step * 0.6, color, "bar",
                  f"{row.title}: {format_percent(row.accuracy)}%")
            _text(writer, axes.left - 8, y + step * 0.4, row.title, 11, "end")
            _text(writer, axes.x(row.accuracy) + 4, y + step * 0.4, format_percent(row.accuracy) + '%', 10)

        _line(writer, axes.left, axes.bottom, axes.right, axes.bottom, "axis")

        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            _text(writer, axes.x(t), axes.bottom + 16, format_percent(t, 0) + '%', 10, "middle")

    return writer.getvalue()


def drift_heatmap_svg(profile: DriftProfile, cell: int = 24) -> str:
    """
    One row per register, one column per case; cells coloured by
    correct, incorrect or unparseable.

    @param profile: Drift profile of one model.
    @param cell: Cell edge in pixels.
    @return: SVG document.
    """
    left, top = 150, 50
    width = left + cell * len(profile.case_ids) + 20
    height = top + cell * len(REGISTERS) + 40
    writer = TabWriter()

    with _open(writer, width, height, "heatmap"):
        _text(writer, width / 2, 22, f"{profile.model_name}: correctness by case and register", 14, "middle")

        for c, case_id in enumerate(profile.case_ids):
            _text(writer, left + cell * c + cell / 2, top - 6, str(case_id), 9, "middle")

        for r, register in enumerate(REGISTERS):
            y = top + cell * r
            _text(writer, left - 8, y + cell * 0.65, REGISTER_TITLES[register], 11, "end")

            with writer.nested(f'<g class="register" data-register="{register}">', "</g>"):
                for c, case_id in enumerate(profile.case_ids):
                    o = profile.outcome(case_id, register)

                    if is_unparseable(o.parsed):
                        fill, state = UNPARSEABLE_COLOR, "unparseable"
                    elif o.correct:
                        fill, state = CORRECT_COLOR, "correct"
                    else:
                        fill, state = INCORRECT_COLOR, "incorrect"

                    _rect(writer, left + cell * c + 1, y + 1, cell - 2, cell - 2, fill, f"cell {state}",
                          f"case {case_id}: {o.parsed.name}")

    return writer.getvalue()


def _png_data_uri(pixels: np.ndarray) -> str:
    plane = np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)

    if plane.shape[0] == 1:
        image = Image.fromarray(plane[0], mode="L")
    else:
        image = Image.fromarray(np.transpose(plane, (1, 2, 0)), mode="RGB")

    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buffer.getvalue()).decode("ascii")


def triptych_svg(pairs: Sequence[Tuple[LabeledImage, LabeledImage]], amplification: float = AMPLIFICATION,
                 captions: Sequence[str] = ()) -> str:
    """
    Clean image, attacked image and amplified perturbation side by side.

    @param pairs: (clean, adversarial) images.
    @param amplification: Perturbation contrast multiplier.
    @param captions: Optional text per pair, e.g. the two predictions.
    @return: SVG document with three panels per pair.
    """
    if not pairs:
        raise ValidationError("A triptych needs at least one image pair")

    gap, top = 12, 40
    width = 3 * PANEL_SIZE + 4 * gap + 180
    height = top + len(pairs) * (PANEL_SIZE + 2 * gap)
    titles = ("Clean", "Adversarial", f"Perturbation x{amplification:g}")
    writer = TabWriter()

    with _open(writer, width, height, "triptych"):
        for k, title in enumerate(titles):
            _text(writer, gap + k * (PANEL_SIZE + gap) + PANEL_SIZE / 2, top - 10, title, 11, "middle")

        for i, (clean, adv) in enumerate(pairs):
            y = top + i * (PANEL_SIZE + 2 * gap)
            panels = (clean.pixels, adv.pixels, perturbation_map(clean, adv, amplification))

            with writer.nested(f'<g class="example" data-source={quoteattr(clean.source_id)}>', "</g>"):
                for k, pixels in enumerate(panels):
                    x = gap + k * (PANEL_SIZE + gap)
                    writer.writeline(f'<image class="panel" x="{x}" y="{y}" width="{PANEL_SIZE}" height="{PANEL_SIZE}" '
                                     f'style="image-rendering:pixelated" href="{_png_data_uri(pixels)}"/>')

                caption = captions[i] if i < len(captions) else clean.label.name
                _text(writer, gap + 3 * (PANEL_SIZE + gap), y + PANEL_SIZE / 2, caption, 11)

    return writer.getvalue()


def training_curves_svg(trace: TrainingTrace, width: int = 560, height: int = 340) -> str:
    if not len(trace):
        raise ValidationError("Cannot plot an empty training trace")

    epochs = trace.epochs
    peak = max(max(r.loss for r in epochs), 1e-12)
    axes = _Axes(60, 40, width - 120, height - 100, float(epochs[0].epoch), float(epochs[-1].epoch))
    loss_axes = _Axes(axes.left, axes.top, axes.width, axes.height, axes.x_min, axes.x_max, 0.0, peak)
    writer = TabWriter()

    with _open(writer, width, height, "training"):
        _text(writer, width / 2, 22, "Training loss and accuracy", 14, "middle")
        _rate_axis(writer, axes)

        for css, color, points in (
                ("loss", ATTACK_COLOR, [(loss_axes.x(r.epoch), loss_axes.y(r.loss)) for r in epochs]),
                ("accuracy", CLEAN_COLOR, [(axes.x(r.epoch), axes.y(r.train_accuracy)) for r in epochs])):
            writer.writeline(f'<polyline class="{css}" fill="none" stroke="{color}" stroke-width="2" points="'
                             + ' '.join(f"{_n(x)},{_n(y)}" for x, y in points) + '"/>')

        for r in epochs:
            _text(writer, axes.x(r.epoch), axes.bottom + 16, str(r.epoch), 10, "middle")

        _text(writer, axes.right + 8, axes.top + 10, f"loss (max {peak:.3f})", 10)
        _text(writer, width / 2, height - 18, "epoch", 11, "middle")

    return writer.getvalue()


def confusion_heatmap_svg(cm: ConfusionMatrix, labels: Sequence[ClassLabel], title: str, cell: int = 64) -> str:
    k = len(labels)
    left, top = 170, 60
    width, height = left + cell * k + 20, top + cell * k + 40
    rows = cm.counts.sum(axis=1)
    writer = TabWriter()

    with _open(writer, width, height, "confusion"):
        _text(writer, width / 2, 22, title, 14, "middle")
        _text(writer, left + cell * k / 2, top - 24, "predicted", 10, "middle")

        for j, label in enumerate(labels):
            _text(writer, left + cell * j + cell / 2, top - 8, label.name, 9, "middle")

        for i, label in enumerate(labels):
            _text(writer, left - 8, top + cell * i + cell / 2 + 4, label.name, 10, "end")

            for j in range(k):
                count = int(cm.counts[i, j])
                share = count / rows[i] if rows[i] else 0.0
                shade = int(round(255 - 200 * share))
                _rect(writer, left + cell * j, top + cell * i, cell - 1, cell - 1, f"#{shade:02x}{shade:02x}ff", "cell",
                      f"{label.name} -> {labels[j].name}: {count}")
                _text(writer, left + cell * j + cell / 2, top + cell * i + cell / 2 + 4, str(count), 11, "middle")

    return writer.getvalue()


def drift_bars_svg(profile: DriftProfile, width: int = 480, height: int = 320) -> str:
    """
    @param profile: Drift profile of one model.
    @param width: Pixels.
    @param height: Pixels.
    @return: SVG bar chart of accuracy per register, annotated with the drop from English.
    """
    axes = _Axes(60, 40, width - 80, height - 100, 0.0, float(len(REGISTERS)))
    group = axes.width / len(REGISTERS)
    english = profile.accuracy(REGISTER_ENGLISH)
    writer = TabWriter()

    with _open(writer, width, height, "drift"):
        _text(writer, width / 2, 22, f"{profile.model_name}: accuracy by register", 14, "middle")
        _rate_axis(writer, axes)

        for i, register in enumerate(REGISTERS):
            value = profile.accuracy(register)
            x = axes.left + group * i + group * 0.2
            _rect(writer, x, axes.y(value), group * 0.6, axes.bottom - axes.y(value), SERIES_COLORS[i], "bar",
                  f"{REGISTER_TITLES[register]}: {format_percent(value)}%")
            note = format_percent(value) + '%'

            if register != REGISTER_ENGLISH:
                note += f" ({format_percent(value - english, signed=True)} pp)"

            _text(writer, x + group * 0.3, axes.y(value) - 6, note, 10, "middle")
            _text(writer, x + group * 0.3, axes.bottom + 16, REGISTER_TITLES[register], 10, "middle")

    return writer.getvalue()


def comparison_svg(profiles: Sequence[DriftProfile], width: int = 640, height: int = 340) -> str:
    if len(profiles) < 2:
        raise ValidationError(f"Comparison needs at least two drift profiles, got {len(profiles)}")

    axes = _Axes(60, 50, width - 80, height - 110, 0.0, float(len(REGISTERS)))
    group = axes.width / len(REGISTERS)
    bar = group * 0.8 / len(profiles)
    writer = TabWriter()

    with _open(writer, width, height, "comparison"):
        _text(writer, width / 2, 22, "Accuracy by register, head to head", 14, "middle")
        _rate_axis(writer, axes)

        for m, p in enumerate(profiles):
            color = SERIES_COLORS[m % len(SERIES_COLORS)]
            _rect(writer, axes.left + 140 * m, 30, 10, 10, color)
            _text(writer, axes.left + 140 * m + 14, 39, p.model_name, 10)

            for i, register in enumerate(REGISTERS):
                value = p.accuracy(register)
                x = axes.left + group * i + group * 0.1 + bar * m
                _rect(writer, x, axes.y(value), bar, axes.bottom - axes.y(value), color, "bar",
                      f"{p.model_name} {REGISTER_TITLES[register]}: {format_percent(value)}%")

        for i, register in enumerate(REGISTERS):
            _text(writer, axes.left + group * i + group / 2, axes.bottom + 16, REGISTER_TITLES[register], 10, "middle")

    return writer.getvalue()


def _slug(text: str) -> str:
    return ''.join(c if c.isalnum() else '_' for c in text.lower()).strip('_')


def emit_figures(out_dir: str, sweep: Optional[SweepResult] = None, mitigation: Optional[MitigationReport] = None,
                 drifts: Sequence[DriftProfile] = (), examples: Sequence[Tuple[LabeledImage, LabeledImage]] = (),
                 trace: Optional[TrainingTrace] = None, amplification: float = AMPLIFICATION,
                 captions: Sequence[str] = ()) -> Dict[str, str]:
    """
    Render every figure the given inputs support.

    @param out_dir: Destination directory.
    @param sweep: Robustness sweep.
    @param mitigation: Stress test result.
    @param drifts: Drift profiles; a comparison chart is added for two or more.
    @param examples: (clean, adversarial) pairs for the triptych.
    @param trace: Training trace.
    @param amplification: Perturbation contrast multiplier.
    @param captions: Triptych captions.
    @return: Figure name -> path.
    """
    ensure_directory(out_dir)
    figures: Dict[str, str] = dict()

    if sweep is not None:
        figures["decay_curve"] = decay_curve_svg(sweep)
        figures["confusion_clean"] = confusion_heatmap_svg(sweep.clean.confusion, sweep.labels, "Confusion matrix, clean")

        if any(r.epsilon > 0 for r in sweep.rows):
            attacked = sweep.first_attack()
            figures["per_class_collapse"] = per_class_bars_svg(sweep)
            figures["confusion_attacked"] = confusion_heatmap_svg(attacked.confusion, sweep.labels,
                                                                  f"Confusion matrix, epsilon {attacked.epsilon:.3f}")

    if mitigation is not None:
        figures["mitigation"] = mitigation_bars_svg(mitigation)

    if examples:
        figures["triptych"] = triptych_svg(examples, amplification, captions)

    if trace is not None and len(trace):
        figures["training_curves"] = training_curves_svg(trace)

    for p in drifts:
        figures[f"heatmap_{_slug(p.model_name)}"] = drift_heatmap_svg(p)
        figures[f"drift_{_slug(p.model_name)}"] = drift_bars_svg(p)

    if len(drifts) > 1:
        figures["comparison"] = comparison_svg(drifts)

    return {name: write_text(os.path.join(out_dir, name + ".svg"), svg) for name, svg in figures.items()}
