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

import os.path
import numpy as np
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple
from .attack import SweepResult, SweepRow, per_class_collapse, danger_zone_threshold
from .constants import *
from .data import ClassLabel, default_labels
from .defense import MitigationReport, MitigationRow
from .errors import ValidationError
from .lingua import DriftProfile, ComparisonRow, compare_models
from .model import ConfusionMatrix, TrainingTrace, classification_report
from .stats import ProportionCI
from .utils import TabWriter, ensure_directory, fingerprint, format_percent, read_json, read_text, write_json, write_text

DECAY_HEADER = "epsilon,accuracy,ci_lower,ci_upper"
MITIGATION_HEADER = "condition,accuracy,delta,consistency,assessment"
MAP_KIND = "adversarial_robustness_map"
DRIFT_KIND = "cross_lingual_drift_profile"
MAP_FILE = "robustness_map.json"
DRIFT_FILE = "drift_profile.json"
SUMMARY_FILE = "summary.txt"
DECAY_FILE = "exp1_robustness_decay.csv"
MITIGATION_FILE = "exp2_mitigation.csv"


def format_rate(value: float, rate_format: str = "fraction") -> str:
    if rate_format == "percent":
        return format_percent(value, 1)
    if rate_format == "fraction":
        return f"{value + 0.0:.4f}"
    raise ValidationError(f"Unknown rate format '{rate_format}'; expected one of {RATE_FORMATS}")


def timestamp_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def decay_csv(sweep: SweepResult, rate_format: str = "fraction") -> str:
    """
    @param sweep: Completed sweep.
    @param rate_format: "fraction" (4 decimals) or "percent" (1 decimal).
    @return: CSV text with header, one row per level and a trailing newline.
    """
    lines = [DECAY_HEADER]

    for row in sweep.rows:
        rates = (format_rate(v, rate_format) for v in (row.accuracy, row.ci_lower, row.ci_upper))
        lines.append(f"{row.epsilon:.3f}," + ','.join(rates))

    return '\n'.join(lines) + '\n'


def emit_decay_csv(sweep: SweepResult, path: str, rate_format: str = "fraction") -> str:
    if not sweep.rows:
        raise ValidationError("Cannot write an empty sweep")
    return write_text(path, decay_csv(sweep, rate_format))


@dataclass(frozen=True)
class DecayRow:
    epsilon: float
    accuracy: float
    ci_lower: float
    ci_upper: float


def parse_decay_csv(text: str, rate_format: str = "fraction") -> List[DecayRow]:
    """
    Inverse of decay_csv; rates come back as fractions.

    @param text: CSV contents.
    @param rate_format: Format the file was written with.
    @return: Rows in file order.
    """
    lines = text.splitlines()

    if not lines or lines[0].strip() != DECAY_HEADER:
        raise ValidationError(f"Decay CSV must start with '{DECAY_HEADER}'")

    scale = 100.0 if rate_format == "percent" else 1.0
    rows = list()

    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue

        cells = line.split(',')

        if len(cells) != 4:
            raise ValidationError(f"Decay CSV line {n} has {len(cells)} cells, expected 4")

        try:
            eps, acc, lo, hi = (float(c) for c in cells)
        except ValueError as e:
            raise ValidationError(f"Decay CSV line {n}: {e}") from e

        rows.append(DecayRow(eps, acc / scale, lo / scale, hi / scale))

    return rows


def mitigation_csv(report: MitigationReport, rate_format: str = "fraction") -> str:
    lines = [MITIGATION_HEADER]

    for row in report.rows:
        delta = '' if row.delta is None else format_rate(row.delta, rate_format)
        consistency = '' if row.consistency is None else format_rate(row.consistency, rate_format)
        lines.append(f"{row.condition},{format_rate(row.accuracy, rate_format)},{delta},{consistency},{row.assessment}")

    return '\n'.join(lines) + '\n'


def emit_mitigation_csv(report: MitigationReport, path: str, rate_format: str = "fraction") -> str:
    return write_text(path, mitigation_csv(report, rate_format))


def format_decay_table(sweep: SweepResult) -> str:
    writer = TabWriter()
    rows = [[f"{r.epsilon:.3f}", format_percent(r.accuracy), format_percent(r.ci_lower), format_percent(r.ci_upper),
             r.interpretation] for r in sweep.rows]
    writer.write_table(["Epsilon", "Accuracy (%)", f"{sweep.confidence:.0%} CI Lower (%)",
                        f"{sweep.confidence:.0%} CI Upper (%)", "Clinical Interpretation"],
                       rows, (True, True, True, True, False))
    return writer.getvalue()


def format_mitigation_table(report: MitigationReport) -> str:
    """
    @param report: Stress test result.
    @return: Text table: condition, accuracy %, delta vs clean (e.g. "-16.6%"), assessment.
    """
    writer = TabWriter()
    rows = [[r.title, format_percent(r.accuracy), '-' if r.delta is None else format_percent(r.delta, signed=True) + '%',
             r.assessment] for r in report.rows]
    writer.write_table(["Condition", "Accuracy (%)", "vs. Clean Baseline", "Clinical Assessment"], rows,
                       (False, True, True, False))
    return writer.getvalue()


def format_drift_table(profiles: Sequence[DriftProfile]) -> str:
    writer = TabWriter()
    header = ["Language Register"]
    header += [f"{p.model_name} Accuracy" for p in profiles]
    header += [f"{p.model_name} Consistency" for p in profiles]
    rows = list()

    for register in REGISTERS:
        row = [REGISTER_TITLES[register]]
        row += [format_percent(p.accuracy(register)) + '%' for p in profiles]
        row += [format_percent(p.consistency(register)) + '%' for p in profiles]
        rows.append(row)

    writer.write_table(header, rows, [False] + [True] * (2 * len(profiles)))
    return writer.getvalue()


def format_comparison_table(comparison: Sequence[ComparisonRow]) -> str:
    writer = TabWriter()
    rows = list()

    for c in comparison:
        for register in REGISTERS:
            drop = '-' if register == REGISTER_ENGLISH else format_percent(c.drop[register], signed=True) + " pp"
            rows.append([c.model_name, REGISTER_TITLES[register], format_percent(c.accuracy[register]), drop])

    writer.write_table(["Model", "Language Register", "Accuracy (%)", "Drop vs English"], rows, (False, False, True, True))
    return writer.getvalue()


def _cm_from(obj: Any) -> ConfusionMatrix:
    return ConfusionMatrix(np.asarray(obj, dtype=np.int64))


def sweep_to_dict(sweep: SweepResult) -> dict:
    return {
        "method": sweep.method,
        "confidence": sweep.confidence,
        "rows": [{
            "epsilon": r.epsilon,
            "accuracy": r.accuracy,
            "ci_lower": r.ci_lower,
            "ci_upper": r.ci_upper,
            "per_class": list(r.per_class),
            "confusion": r.confusion.to_list(),
            "interpretation": r.interpretation
        } for r in sweep.rows]
    }


def sweep_from_dict(doc: dict, labels: Sequence[ClassLabel]) -> SweepResult:
    rows = list()

    for r in doc["rows"]:
        cm = _cm_from(r["confusion"])
        ci = ProportionCI(r["accuracy"], r["ci_lower"], r["ci_upper"], doc["method"], doc["confidence"], cm.total, cm.correct)
        rows.append(SweepRow(r["epsilon"], r["accuracy"], ci, list(r["per_class"]), cm, r.get("interpretation", '')))

    return SweepResult(rows, doc["method"], doc["confidence"], tuple(labels))


def mitigation_to_dict(report: MitigationReport) -> dict:
    return {
        "epsilon": report.epsilon,
        "n": report.n,
        "rows": [{
            "condition": r.condition,
            "title": r.title,
            "accuracy": r.accuracy,
            "delta": r.delta,
            "per_class": list(r.per_class),
            "consistency": r.consistency,
            "assessment": r.assessment,
            "confusion": None if r.confusion is None else r.confusion.to_list()
        } for r in report.rows]
    }


def mitigation_from_dict(doc: dict) -> MitigationReport:
    rows = [MitigationRow(r["condition"], r["accuracy"], r["delta"], list(r.get("per_class", [])),
                          r.get("consistency"), r.get("assessment", ''),
                          None if r.get("confusion") is None else _cm_from(r["confusion"])) for r in doc["rows"]]
    return MitigationReport(doc["epsilon"], rows, doc.get("n", 0))


@dataclass
class RobustnessMap:
    model: Dict[str, Any]
    labels: Tuple[ClassLabel, ...]
    sweep: Optional[SweepResult] = None
    mitigation: Optional[MitigationReport] = None
    trace: Optional[TrainingTrace] = None
    threshold: float = DANGER_THRESHOLD
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self, generated_at: str) -> dict:
        """
        @param generated_at: ISO-8601 timestamp recorded in the document.
        @return: JSON-ready document; fields unknown to this version are carried through.
        """
        if self.sweep is None or not self.sweep.rows:
            raise ValidationError("A robustness map needs a completed sweep")

        clean = self.sweep.clean
        doc = dict(self.extra)
        doc.update({
            "schema_version": SCHEMA_VERSION,
            "kind": MAP_KIND,
            "generated_at": generated_at,
            "input_hashes": {
                "checkpoint": self.model.get("checkpoint_hash", ''),
                "sweep": fingerprint(sweep_to_dict(self.sweep), 64)
            },
            "model": self.model,
            "labels": [l.name for l in self.labels],
            "clean_baseline": {
                "accuracy": clean.accuracy,
                "per_class": list(clean.per_class),
                "confusion": clean.confusion.to_list()
            },
            "classification_report": [asdict(m) for m in classification_report(clean.confusion, self.labels)],
            "sweep": sweep_to_dict(self.sweep),
            "danger_threshold": self.threshold,
            "danger_zone_epsilon": danger_zone_threshold(self.sweep, self.threshold),
            "per_class_collapse": None,
            "mitigation": None if self.mitigation is None else mitigation_to_dict(self.mitigation),
            "training": None if self.trace is None else self.trace.to_dict()
        })

        if any(r.epsilon > 0 for r in self.sweep.rows):
            collapse, confusions = per_class_collapse(self.sweep)
            doc["per_class_collapse"] = {
                "epsilon": self.sweep.first_attack().epsilon,
                "classes": [{"name": c.name, "clean": c.clean, "attacked": c.attacked, "drop": c.drop} for c in collapse],
                "top_confusions": [asdict(c) for c in confusions]
            }

        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> RobustnessMap:
        validate_map_document(doc)
        labels = tuple(ClassLabel(i, n) for i, n in enumerate(doc["labels"]))
        known = {"schema_version", "kind", "generated_at", "input_hashes", "model", "labels", "clean_baseline",
                 "classification_report", "sweep", "danger_threshold", "danger_zone_epsilon", "per_class_collapse",
                 "mitigation", "training"}
        return cls(doc["model"], labels, sweep_from_dict(doc["sweep"], labels),
                   None if doc.get("mitigation") is None else mitigation_from_dict(doc["mitigation"]),
                   None if doc.get("training") is None else TrainingTrace.from_dict(doc["training"]),
                   doc.get("danger_threshold", DANGER_THRESHOLD),
                   {k: v for k, v in doc.items() if k not in known})


@dataclass
class DriftProfileDocument:
    profiles: List[DriftProfile]
    corpus_note: str = ''
    case_count: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self, generated_at: str) -> dict:
        if not self.profiles:
            raise ValidationError("A drift profile document needs at least one profile")

        hashes = {p.corpus_hash for p in self.profiles}

        if len(hashes) > 1:
            raise ValidationError("Drift profiles were measured on different corpora")

        corpus_hash = self.profiles[0].corpus_hash
        comparison = None

        if len(self.profiles) > 1:
            comparison = [asdict(c) for c in compare_models(self.profiles)]

        doc = dict(self.extra)
        doc.update({
            "schema_version": SCHEMA_VERSION,
            "kind": DRIFT_KIND,
            "generated_at": generated_at,
            "input_hashes": {"corpus": corpus_hash},
            "corpus": {"hash": corpus_hash, "cases": self.case_count or len(self.profiles[0].case_ids), "note": self.corpus_note},
            "profiles": [p.to_dict() for p in self.profiles],
            "comparison": comparison
        })
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> DriftProfileDocument:
        validate_drift_document(doc)
        known = {"schema_version", "kind", "generated_at", "input_hashes", "corpus", "profiles", "comparison"}
        return cls([DriftProfile.from_dict(p) for p in doc["profiles"]], doc["corpus"].get("note", ''),
                   doc["corpus"].get("cases", 0), {k: v for k, v in doc.items() if k not in known})


def _require(doc: Any, keys: Dict[str, type], where: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"{where} must be an object")

    for key, kind in keys.items():
        if key not in doc:
            raise ValidationError(f"{where} lacks '{key}'")
        if kind is not None and not isinstance(doc[key], kind):
            raise ValidationError(f"{where}.{key} must be {getattr(kind, '__name__', kind)}")


def _require_header(doc: Any, kind: str):
    _require(doc, {"schema_version": int, "kind": str, "generated_at": str, "input_hashes": dict}, "document")

    if doc["kind"] != kind:
        raise ValidationError(f"Expected a '{kind}' document, got '{doc['kind']}'")
    if doc["schema_version"] > SCHEMA_VERSION:
        raise ValidationError(f"Schema version {doc['schema_version']} is newer than supported version {SCHEMA_VERSION}")


def validate_map_document(doc: Any):
    """
    Structural checks plus internal consistency: every accuracy, in the
    sweep and in the mitigation rows, must be re-derivable from its
    confusion matrix.

    @param doc: Parsed robustness map.
    @return: None; raises ValidationError on the first problem.
    """
    _require_header(doc, MAP_KIND)
    _require(doc, {"model": dict, "labels": list, "clean_baseline": dict, "sweep": dict}, "robustness map")
    _require(doc["sweep"], {"method": str, "confidence": (int, float), "rows": list}, "sweep")
    k = len(doc["labels"])

    if not doc["sweep"]["rows"]:
        raise ValidationError("sweep.rows is empty")

    checks = [("clean_baseline", doc["clean_baseline"])]
    checks += [(f"sweep.rows[{i}]", r) for i, r in enumerate(doc["sweep"]["rows"])]
    mitigation = doc.get("mitigation")

    if mitigation is not None:
        _require(mitigation, {"epsilon": (int, float), "n": int, "rows": list}, "mitigation")
        checks += [(f"mitigation.rows[{i}]", r) for i, r in enumerate(mitigation["rows"])]

    for where, row in checks:
        _require(row, {"accuracy": (int, float), "per_class": list, "confusion": list}, where)
        cm = np.asarray(row["confusion"], dtype=np.int64)

        if cm.shape != (k, k):
            raise ValidationError(f"{where}.confusion must be {k}x{k}, got {cm.shape}")
        if cm.sum() == 0 or abs(np.trace(cm) / cm.sum() - row["accuracy"]) > 1e-9:
            raise ValidationError(f"{where}.accuracy does not match its confusion matrix")
        if where.startswith("mitigation") and cm.sum() != mitigation["n"]:
            raise ValidationError(f"{where}.confusion covers {cm.sum()} images, expected {mitigation['n']}")

    for i, r in enumerate(doc["sweep"]["rows"]):
        _require(r, {"epsilon": (int, float), "ci_lower": (int, float), "ci_upper": (int, float)}, f"sweep.rows[{i}]")

        if not r["ci_lower"] <= r["ci_upper"]:
            raise ValidationError(f"sweep.rows[{i}] has an inverted interval")


def validate_drift_document(doc: Any):
    _require_header(doc, DRIFT_KIND)
    _require(doc, {"corpus": dict, "profiles": list}, "drift profile")

    for i, p in enumerate(doc["profiles"]):
        _require(p, {"model_name": str, "base_url": str, "corpus_hash": str, "registers": dict, "flips": list,
                     "outcomes": list}, f"profiles[{i}]")

        if p["corpus_hash"] != doc["corpus"].get("hash"):
            raise ValidationError(f"profiles[{i}] was measured on a different corpus")

        for register, values in p["registers"].items():
            _require(values, {"accuracy": (int, float), "consistency": (int, float)}, f"profiles[{i}].registers.{register}")

            if not 0 <= values["consistency"] <= 1:
                raise ValidationError(f"profiles[{i}].registers.{register}.consistency is outside [0, 1]")

        if p["registers"].get(REGISTER_ENGLISH, {}).get("consistency") != 1.0:
            raise ValidationError(f"profiles[{i}] English consistency must be 1.0")


def summary_text(robustness: Optional[RobustnessMap], drift: Optional[DriftProfileDocument]) -> str:
    """
    Plain-text tables mirroring the machine-readable documents.

    @param robustness: Robustness map, if any.
    @param drift: Drift profiles, if any.
    @return: Text with '\\n' line endings.
    """
    writer = TabWriter()

    if robustness is not None:
        sweep = robustness.sweep
        model = robustness.model
        writer.writeline("ADVERSARIAL ROBUSTNESS MAP")
        writer.writeline(f"Model: {model.get('parameters', '?')} parameters, checkpoint {str(model.get('checkpoint_hash', ''))[:12]}")
        writer.writeline(f"Clean accuracy: {format_percent(sweep.clean.accuracy)}% (N={sweep.clean.confusion.total})")
        danger = danger_zone_threshold(sweep, robustness.threshold)
        writer.writeline(f"Danger zone (<{format_percent(robustness.threshold, 0)}%): "
                         + ("not reached" if danger is None else f"from epsilon {danger:.3f}"))
        writer.writeline()
        writer.writeline(f"Robustness decay ({sweep.method} intervals)")
        writer.write(format_decay_table(sweep))

        if any(r.epsilon > 0 for r in sweep.rows):
            collapse, confusions = per_class_collapse(sweep)
            writer.writeline()
            writer.writeline(f"Per-class collapse at epsilon {sweep.first_attack().epsilon:.3f}")
            rows = [[c.name, format_percent(c.clean), format_percent(c.attacked), format_percent(c.drop, signed=True)]
                    for c in collapse]
            writer.write_table(["Class", "Clean (%)", "Attacked (%)", "Drop (pp)"], rows, (False, True, True, True))

            for c in confusions:
                writer.writeline(f"    {c}")

        if robustness.mitigation is not None:
            writer.writeline()
            writer.writeline(f"Mitigation stress test (epsilon {robustness.mitigation.epsilon:.3f}, N={robustness.mitigation.n})")
            writer.write(format_mitigation_table(robustness.mitigation))

    if drift is not None:
        if robustness is not None:
            writer.writeline()
        writer.writeline("CROSS-LINGUAL DRIFT PROFILE")
        writer.writeline(f"Corpus: {drift.case_count or len(drift.profiles[0].case_ids)} cases, hash {drift.profiles[0].corpus_hash[:12]}")
        writer.writeline()
        writer.write(format_drift_table(drift.profiles))

        for p in drift.profiles:
            flips = p.flips()
            writer.writeline(f"{p.model_name} diagnosis flips: {len(flips)}" + (f" (cases {', '.join(map(str, flips))})" if flips else ''))

        if len(drift.profiles) > 1:
            writer.writeline()
            writer.write(format_comparison_table(compare_models(drift.profiles)))

    return writer.getvalue()


def emit_audit_bundle(robustness: Optional[RobustnessMap], drift: Optional[DriftProfileDocument], out_dir: str,
                      timestamp: Optional[str] = None, rate_format: str = "fraction") -> Dict[str, str]:
    """
    Write the governance artifacts. With the timestamp pinned, identical
    inputs give byte-identical files.

    @param robustness: Robustness map, or None.
    @param drift: Drift profile document, or None.
    @param out_dir: Destination directory.
    @param timestamp: ISO-8601 generation time; defaults to now.
    @param rate_format: Rate style of the CSV files.
    @return: Artifact name -> path.
    """
    if robustness is None and drift is None:
        raise ValidationError("An audit bundle needs a robustness map, a drift profile, or both")

    generated_at = timestamp or timestamp_now()
    ensure_directory(out_dir)
    written = dict()

    if robustness is not None:
        written["robustness_map"] = write_json(os.path.join(out_dir, MAP_FILE), robustness.to_dict(generated_at))
        written["decay_csv"] = emit_decay_csv(robustness.sweep, os.path.join(out_dir, DECAY_FILE), rate_format)

        if robustness.mitigation is not None:
            written["mitigation_csv"] = emit_mitigation_csv(robustness.mitigation, os.path.join(out_dir, MITIGATION_FILE), rate_format)

    if drift is not None:
        written["drift_profile"] = write_json(os.path.join(out_dir, DRIFT_FILE), drift.to_dict(generated_at))

    written["summary"] = write_text(os.path.join(out_dir, SUMMARY_FILE), summary_text(robustness, drift))
    return written


def validate_bundle(out_dir: str) -> List[str]:
    """
    @param out_dir: Bundle directory.
    @return: Names of the validated documents; raises ValidationError if any is invalid or none exist.
    """
    checked = list()

    for name, check in ((MAP_FILE, validate_map_document), (DRIFT_FILE, validate_drift_document)):
        path = os.path.join(out_dir, name)

        if os.path.isfile(path):
            check(read_json(path))
            checked.append(name)

    if not checked:
        raise ValidationError(f"No audit documents found in '{out_dir}'")

    return checked


def load_robustness_map(path: str) -> RobustnessMap:
    return RobustnessMap.from_dict(read_json(path))


def load_drift_document(path: str) -> DriftProfileDocument:
    return DriftProfileDocument.from_dict(read_json(path))
