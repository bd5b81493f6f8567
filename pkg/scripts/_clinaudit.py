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
import argparse
import sys
import os
import os.path
from typing import List, Optional, Sequence, Tuple
from colorama import init as colorama_init
from clinaudit import __version__
from clinaudit.attack import robustness_sweep, fgm_batch, AttackConfig, SweepResult
from clinaudit.config import RunConfig, EndpointSpec
from clinaudit.constants import *
from clinaudit.data import (LabeledImage, NormalizationStats, default_labels, generate_synthetic_benchmark,
                            load_image_directory, load_manifest)
from clinaudit.defense import mitigation_stress_test, MitigationReport
from clinaudit.errors import AuditError, UsageError, ValidationError
from clinaudit.figures import emit_figures
from clinaudit.lingua import load_corpus, load_default_corpus, run_drift_audit, DriftProfile
from clinaudit.model import (MicroDenseNet, Architecture, TrainingTrace, train, evaluate, classification_report,
                             format_classification_report, save_checkpoint, load_checkpoint, predict, write_trace_csv)
from clinaudit.report import (RobustnessMap, DriftProfileDocument, emit_audit_bundle, emit_decay_csv, emit_mitigation_csv,
                              format_decay_table, format_mitigation_table, format_drift_table, sweep_to_dict,
                              sweep_from_dict, mitigation_to_dict, mitigation_from_dict, validate_bundle, timestamp_now)
from clinaudit.utils import audit_log, set_verbose, ensure_directory, read_json, write_json


CHECKPOINT_FILE = "checkpoint.json"
TRACE_CSV = "training_trace.csv"
TRACE_JSON = "training_trace.json"
SWEEP_FILE = "sweep.json"
MITIGATION_JSON = "mitigation.json"
DRIFT_FILE = "drift_profile.json"
FIGURES_DIR = "figures"
BUNDLE_DIR = "bundle"


class ClinAudit:
    def __init__(self, program_options: argparse.Namespace, environ: Optional[dict] = None):
        """
        Main class for the clinaudit script. CLI implementation; every
        command writes into one run directory named by the configuration hash.

        @param program_options: Options supplied to CLI.
        @param environ: Environment for endpoint overrides, defaults to os.environ.
        """
        opts = program_options
        cfg = RunConfig.load(opts.config) if opts.config else RunConfig()
        cfg = cfg.override(None, seed=opts.seed, output=opts.output)
        cfg = cfg.override("data", synthetic=True if opts.synthetic else None, data_dir=opts.data_dir, manifest=opts.manifest)

        if opts.data_dir or opts.manifest:
            cfg = cfg.override("data", synthetic=False)

        cfg = cfg.override("train", epochs=opts.epochs, learning_rate=opts.learning_rate, checkpoint=opts.checkpoint)
        cfg = cfg.override("attack", ci=opts.ci, levels=opts.levels, maximum=opts.max_epsilon, workers=opts.workers)
        cfg = cfg.override("defense", epsilon=opts.epsilon, sigma=opts.sigma, votes=opts.votes, max_shift=opts.max_shift,
                           adv_steps=opts.adv_steps, adv_learning_rate=opts.adv_learning_rate)
        cfg = cfg.override("report", timestamp=opts.timestamp, rate_format=opts.rate_format)

        if opts.endpoint:
            cfg = cfg.override("lingua", endpoints=[EndpointSpec(url, model) for url, model in opts.endpoint])
        if opts.lenient:
            cfg = cfg.override("lingua", strict=False)

        cfg = cfg.override("lingua", corpus=opts.corpus).with_env(environ)

        self.opts = opts
        self.cfg = cfg
        self.run_dir = cfg.run_directory()
        self._data: Optional[Tuple[List[LabeledImage], List[LabeledImage]]] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def run(self):
        """
        Run the selected command.

        @return: None.
        """
        ensure_directory(self.run_dir)
        # the output root is where this file lives, not part of the run
        settings = self.cfg.resolved()
        settings.pop("output")
        write_json(self.path("run_config.json"), settings)
        audit_log(f"Run directory {self.run_dir}", source="cli", severity=1)

        command = {
            "train": self.cmd_train,
            "attack": self.cmd_attack,
            "defend": self.cmd_defend,
            "lang-audit": self.cmd_lang_audit,
            "report": self.cmd_report,
            "audit-all": self.cmd_audit_all
        }[self.opts.command]

        command()

    def datasets(self) -> Tuple[List[LabeledImage], List[LabeledImage]]:
        if self._data is not None:
            return self._data

        d = self.cfg.data
        labels = default_labels()

        if d.synthetic:
            if d.channels != 1:
                raise UsageError("The synthetic benchmark is single-channel; set data.channels = 1")
            self._data = generate_synthetic_benchmark(self.cfg.split_config(), d.image_size, labels)
            return self._data

        stats = NormalizationStats.for_channels(d.channels)

        if d.manifest:
            splits = load_manifest(d.manifest, labels, stats, d.image_size, d.workers)

            if not splits.get("train") or not splits.get("test"):
                raise ValidationError(f"Manifest '{d.manifest}' needs non-empty 'train' and 'test' splits")

            self._data = splits["train"], splits["test"]
        elif d.data_dir:
            label_map = {l.name: l for l in labels}
            self._data = tuple(load_image_directory(os.path.join(d.data_dir, split), label_map, stats, d.image_size, d.workers)
                               for split in ("train", "test"))
        else:
            raise UsageError("No data source: pass --synthetic, --data-dir or --manifest")

        return self._data

    def checkpoint_path(self) -> str:
        return self.cfg.train.checkpoint or self.path(CHECKPOINT_FILE)

    def load_model(self) -> MicroDenseNet:
        path = self.checkpoint_path()

        if not os.path.isfile(path):
            raise UsageError(f"No checkpoint at '{path}'; run `clinaudit train` first or pass --checkpoint")

        return load_checkpoint(path)

    def cmd_train(self) -> MicroDenseNet:
        train_set, test_set = self.datasets()
        d = self.cfg.data
        arch = Architecture(in_channels=train_set[0].shape[0], image_size=d.image_size)
        stats = NormalizationStats.for_channels(arch.in_channels)
        model = MicroDenseNet.initialize(arch, stats, self.cfg.seed, default_labels())
        audit_log(f"Training {model.parameter_count()} parameters on {len(train_set)} images", source="cli", severity=1)

        model, trace = train(model, train_set, self.cfg.train_config())
        save_checkpoint(model, self.checkpoint_path())
        write_trace_csv(trace, self.path(TRACE_CSV))
        write_json(self.path(TRACE_JSON), trace.to_dict())

        accuracy, _, cm = evaluate(model, test_set)
        print(f"Clean test accuracy: {accuracy * 100:.1f}% (N={cm.total})")
        print(format_classification_report(classification_report(cm, model.labels)), end='')
        return model

    def cmd_attack(self) -> SweepResult:
        model = self.load_model()
        _, test_set = self.datasets()
        a = self.cfg.attack
        sweep = robustness_sweep(model, test_set, self.cfg.grid(), a.ci, a.confidence, self.cfg.train.batch_size, a.workers)

        doc = sweep_to_dict(sweep)
        doc["labels"] = [l.name for l in sweep.labels]
        write_json(self.path(SWEEP_FILE), doc)
        emit_decay_csv(sweep, self.path("exp1_robustness_decay.csv"), self.cfg.report.rate_format)

        examples = list()
        captions = list()

        if a.examples > 0:
            clean = list(test_set[::max(1, len(test_set) // a.examples)][:a.examples])
            adv = fgm_batch(model, clean, AttackConfig(sweep.first_attack().epsilon))
            before, _ = predict(model, clean)
            after, _ = predict(model, adv)
            examples = list(zip(clean, adv))
            captions = [f"{c.label.name}: {b.name} -> {x.name}" for c, b, x in zip(clean, before, after)]

        emit_figures(self.path(FIGURES_DIR), sweep=sweep, examples=examples, amplification=a.amplification, captions=captions)
        print(format_decay_table(sweep), end='')
        return sweep

    def cmd_defend(self) -> MitigationReport:
        model = self.load_model()
        train_set, test_set = self.datasets()
        epsilon = self.cfg.defense_epsilon()
        report = mitigation_stress_test(model, test_set, epsilon, train_set, self.cfg.smoothing_config(),
                                        self.cfg.ensemble_config(), self.cfg.adv_train_config(),
                                        self.cfg.train.batch_size, self.cfg.attack.workers)

        write_json(self.path(MITIGATION_JSON), mitigation_to_dict(report))
        emit_mitigation_csv(report, self.path("exp2_mitigation.csv"), self.cfg.report.rate_format)
        emit_figures(self.path(FIGURES_DIR), mitigation=report)
        print(format_mitigation_table(report), end='')
        return report

    def cmd_lang_audit(self) -> List[DriftProfile]:
        l = self.cfg.lingua
        endpoints = self.cfg.inference_endpoints()

        if not endpoints:
            raise UsageError("No inference endpoints configured; pass --endpoint URL MODEL")

        corpus = load_corpus(l.corpus) if l.corpus else load_default_corpus()
        profiles = [run_drift_audit(e, corpus, l.strict, l.workers) for e in endpoints]
        document = DriftProfileDocument(profiles, corpus.note, len(corpus.case_ids))

        write_json(self.path(DRIFT_FILE), document.to_dict(self.cfg.report.timestamp or timestamp_now()))
        emit_figures(self.path(FIGURES_DIR), drifts=profiles)
        print(format_drift_table(profiles), end='')
        return profiles

    def cmd_report(self):
        robustness, drift = None, None

        if os.path.isfile(self.path(SWEEP_FILE)):
            model = self.load_model()
            sweep_doc = read_json(self.path(SWEEP_FILE))
            sweep = sweep_from_dict(sweep_doc, model.labels)
            mitigation = None
            trace = None

            if os.path.isfile(self.path(MITIGATION_JSON)):
                mitigation = mitigation_from_dict(read_json(self.path(MITIGATION_JSON)))
            if os.path.isfile(self.path(TRACE_JSON)):
                trace = TrainingTrace.from_dict(read_json(self.path(TRACE_JSON)))

            fingerprint = model.fingerprint()
            fingerprint["seed"] = self.cfg.seed
            robustness = RobustnessMap(fingerprint, model.labels, sweep, mitigation, trace)

        if os.path.isfile(self.path(DRIFT_FILE)):
            drift = DriftProfileDocument.from_dict(read_json(self.path(DRIFT_FILE)))

        if robustness is None and drift is None:
            raise ValidationError(f"Nothing to report in '{self.run_dir}'; run attack or lang-audit first")

        out_dir = self.path(BUNDLE_DIR)
        emit_audit_bundle(robustness, drift, out_dir, self.cfg.report.timestamp or None, self.cfg.report.rate_format)
        emit_figures(os.path.join(out_dir, FIGURES_DIR),
                     sweep=robustness.sweep if robustness else None,
                     mitigation=robustness.mitigation if robustness else None,
                     trace=robustness.trace if robustness else None,
                     drifts=drift.profiles if drift else ())

        checked = validate_bundle(out_dir)
        audit_log(f"Validated {', '.join(checked)}", source="report", severity=1)
        print(f"Audit bundle written to {out_dir}")

    def cmd_audit_all(self):
        checkpoint = self.cfg.train.checkpoint

        if checkpoint and os.path.isfile(checkpoint):
            audit_log(f"Using existing checkpoint '{checkpoint}'", source="cli", severity=1)
        else:
            self.cmd_train()

        self.cmd_attack()
        self.cmd_defend()

        if self.cfg.lingua.endpoints:
            self.cmd_lang_audit()
        else:
            audit_log("No inference endpoints configured; skipping the language audit", source="cli", severity=2)

        self.cmd_report()


def _add_common(argp: argparse.ArgumentParser):
    argp.add_argument("-c", "--config",
                      help="Path to a .toml, .json or .ini run configuration (default: built-in protocol)")
    argp.add_argument("-s", "--seed",
                      type=int,
                      help=f"Global random seed (default: {DEFAULT_SEED})")
    argp.add_argument("-o", "--output",
                      help="Root directory for run directories (default: runs)")
    argp.add_argument("--checkpoint",
                      help="Checkpoint path (default: checkpoint.json in the run directory)")
    argp.add_argument("--timestamp",
                      help="Pin the generation timestamp (default: current UTC time)")
    argp.add_argument("--rate-format",
                      choices=RATE_FORMATS,
                      help="Rate style in CSV files (default: fraction)")
    argp.add_argument("-v", "--verbose",
                      action="store_true",
                      help="Print remarks about each stage to stderr")


def _add_data(argp: argparse.ArgumentParser):
    group = argp.add_argument_group("data")
    group.add_argument("--synthetic",
                       action="store_true",
                       help="Use the procedural synthetic benchmark (default when no data source is given)")
    group.add_argument("--data-dir",
                       help="Directory with train/ and test/ subdirectories, one folder per class")
    group.add_argument("--manifest",
                       help="JSON manifest of {path, label, split} records")


def _add_train(argp: argparse.ArgumentParser):
    group = argp.add_argument_group("training")
    group.add_argument("--epochs",
                       type=int,
                       help=f"Training epochs (default: {EPOCHS})")
    group.add_argument("--learning-rate",
                       type=float,
                       help=f"Adam learning rate (default: {LEARNING_RATE})")


def _add_attack(argp: argparse.ArgumentParser):
    group = argp.add_argument_group("attack")
    group.add_argument("--ci",
                       choices=CI_METHODS,
                       help="Confidence interval method (default: wilson)")
    group.add_argument("--levels",
                       type=int,
                       help=f"Number of epsilon levels (default: {EPSILON_LEVELS})")
    group.add_argument("--max-epsilon",
                       type=float,
                       help=f"Largest epsilon (default: {EPSILON_MAX})")
    group.add_argument("--workers",
                       type=int,
                       help="Attack threads (default: 1)")


def _add_defense(argp: argparse.ArgumentParser):
    group = argp.add_argument_group("defences")
    group.add_argument("--epsilon",
                       type=float,
                       help="Defence attack budget (default: first non-zero grid level)")
    group.add_argument("--sigma",
                       type=float,
                       help=f"Gaussian smoothing sigma in pixels (default: {SMOOTHING_SIGMA})")
    group.add_argument("--votes",
                       type=int,
                       help=f"Augmented copies per ensemble vote (default: {ENSEMBLE_VOTES})")
    group.add_argument("--max-shift",
                       type=int,
                       help=f"Largest ensemble translation in pixels (default: {ENSEMBLE_MAX_SHIFT})")
    group.add_argument("--adv-steps",
                       type=int,
                       help=f"Adversarial fine-tuning steps (default: {ADV_TRAIN_STEPS})")
    group.add_argument("--adv-learning-rate",
                       type=float,
                       help=f"Adversarial fine-tuning learning rate (default: {ADV_TRAIN_LR})")


def _add_lingua(argp: argparse.ArgumentParser):
    group = argp.add_argument_group("language audit")
    group.add_argument("-e", "--endpoint",
                       nargs=2,
                       action="append",
                       metavar=("URL", "MODEL"),
                       help=f"Endpoint base URL and model name; repeat to compare models (default: {ENV_ENDPOINT_URL})")
    group.add_argument("--corpus",
                       help="Vignette corpus JSON (default: shipped illustrative corpus)")
    group.add_argument("--lenient",
                       action="store_true",
                       help="Record endpoint failures as Unparseable instead of aborting")


COMMANDS = (
    ("train", "Generate or load data, train the classifier, save checkpoint and trace"),
    ("attack", "Sweep FGM over the epsilon grid and emit the decay table"),
    ("defend", "Stress test the defences at one epsilon"),
    ("lang-audit", "Query inference endpoints with the vignette corpus"),
    ("report", "Assemble the audit bundle from prior run outputs"),
    ("audit-all", "Train, attack, defend, audit endpoints and report")
)


def build_parser() -> argparse.ArgumentParser:
    """
    Every command accepts every setting that feeds the run directory hash,
    so a staged session reaches the same directory as long as the same
    flags are repeated.

    @return: The clinaudit argument parser.
    """
    argp = argparse.ArgumentParser(prog="clinaudit",
                                   description="Adversarial robustness and cross-lingual drift audits for clinical AI")
    argp.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = argp.add_subparsers(dest="command", required=True, metavar="command")

    for name, description in COMMANDS:
        p = sub.add_parser(name, help=description, description=description)
        _add_common(p)
        _add_data(p)
        _add_train(p)
        _add_attack(p)
        _add_defense(p)
        _add_lingua(p)

    return argp


def main(args: Optional[Sequence[str]] = None) -> int:
    """
    Entry point for clinaudit CLI.

    @param args: Arguments, defaults to sys.argv[1:].
    @return: Exit code; also raised through sys.exit when run as a script.
    """
    colorama_init()
    opts = build_parser().parse_args(sys.argv[1:] if args is None else list(args))
    set_verbose(opts.verbose)

    try:
        ClinAudit(opts).run()
    except AuditError as e:
        audit_log(str(e), source="cli", severity=3)
        return e.exit_code

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
