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
import tomllib
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Any, Dict, List, Mapping, Optional, get_type_hints
from .attack import epsilon_grid, EpsilonGrid
from .constants import *
from .data import SplitConfig
from .defense import SmoothingConfig, EnsembleConfig, AdvTrainConfig
from .errors import ValidationError
from .lingua import InferenceEndpoint
from .model import TrainConfig
from .utils import fingerprint, read_json, read_text


@dataclass
class EndpointSpec:
    base_url: str = ENDPOINT_URL
    model_name: str = ENDPOINT_MODEL


@dataclass
class DataSection:
    synthetic: bool = True
    data_dir: str = ''
    manifest: str = ''
    image_size: int = DEFAULT_IMAGE_SIZE
    channels: int = 1
    per_class_train: int = PER_CLASS_TRAIN
    per_class_test: int = PER_CLASS_TEST
    workers: int = 4


@dataclass
class TrainSection:
    epochs: int = EPOCHS
    learning_rate: float = LEARNING_RATE
    step_size: int = STEP_SIZE
    gamma: float = GAMMA
    batch_size: int = BATCH_SIZE
    checkpoint: str = ''


@dataclass
class AttackSection:
    levels: int = EPSILON_LEVELS
    maximum: float = EPSILON_MAX
    ci: str = "wilson"
    confidence: float = CONFIDENCE
    amplification: float = AMPLIFICATION
    examples: int = 3
    workers: int = 1


@dataclass
class DefenseSection:
    epsilon: Optional[float] = None
    sigma: float = SMOOTHING_SIGMA
    truncate: float = SMOOTHING_TRUNCATE
    boundary: str = SMOOTHING_BOUNDARY
    votes: int = ENSEMBLE_VOTES
    max_shift: int = ENSEMBLE_MAX_SHIFT
    flip: bool = True
    adv_steps: int = ADV_TRAIN_STEPS
    adv_learning_rate: float = ADV_TRAIN_LR
    adv_batch_size: int = BATCH_SIZE


@dataclass
class LinguaSection:
    endpoints: List[EndpointSpec] = field(default_factory=list)
    corpus: str = ''
    strict: bool = True
    workers: int = 1
    timeout: float = ENDPOINT_TIMEOUT
    retries: int = ENDPOINT_RETRIES
    backoff: float = ENDPOINT_BACKOFF


@dataclass
class ReportSection:
    rate_format: str = "fraction"
    timestamp: str = ''


_SECTIONS = {
    "data": DataSection,
    "train": TrainSection,
    "attack": AttackSection,
    "defense": DefenseSection,
    "lingua": LinguaSection,
    "report": ReportSection
}
_TOP_LEVEL = {"seed": int, "output": str}


def _coerce(value: Any, hint: Any, where: str) -> Any:
    hint_s = str(hint)

    try:
        if value is None:
            if "Optional" in hint_s or "None" in hint_s:
                return None
            raise ValueError("value is required")
        if hint is bool or hint_s == "bool":
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                    raise ValueError(f"'{value}' is not a boolean")
                return lowered in ("true", "yes", "1", "on")
            return bool(value)
        if hint is int or hint_s == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if hint is float or "float" in hint_s:
            if isinstance(value, str) and not value.strip() and "Optional" in hint_s:
                return None
            return float(value)
        if "EndpointSpec" in hint_s:
            return _endpoints(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"Invalid value for '{where}': {e}") from e


def _endpoints(value: Any) -> List[EndpointSpec]:
    # INI files give "url model, url model"; TOML and JSON give tables
    if isinstance(value, str):
        specs = list()
        for entry in filter(None, (e.strip() for e in value.split(','))):
            parts = entry.split()
            if len(parts) != 2:
                raise ValueError(f"endpoint entry '{entry}' must be 'base_url model_name'")
            specs.append(EndpointSpec(parts[0], parts[1]))
        return specs

    specs = list()

    for entry in value:
        if isinstance(entry, EndpointSpec):
            specs.append(entry)
            continue

        unknown = set(entry) - {"base_url", "model_name"}
        if unknown:
            raise ValueError(f"unknown endpoint keys {sorted(unknown)}")
        specs.append(EndpointSpec(**entry))

    return specs


def _build_section(cls: type, values: Mapping[str, Any], name: str):
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known

    if unknown:
        raise ValidationError(f"Unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")

    return cls(**{k: _coerce(v, hints[k], f"{name}.{k}") for k, v in values.items()})


@dataclass
class RunConfig:
    seed: int = DEFAULT_SEED
    output: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    lingua: LinguaSection = field(default_factory=LinguaSection)
    report: ReportSection = field(default_factory=ReportSection)

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> RunConfig:
        """
        @param doc: Nested mapping {section: {key: value}} plus top-level seed and output.
        @return: Validated configuration.
        """
        unknown = set(doc) - set(_SECTIONS) - set(_TOP_LEVEL)

        if unknown:
            raise ValidationError(f"Unknown configuration section(s): {', '.join(sorted(unknown))}")

        kwargs = {k: _coerce(doc[k], t, k) for k, t in _TOP_LEVEL.items() if k in doc}

        for name, section in _SECTIONS.items():
            values = doc.get(name, {})
            if not isinstance(values, Mapping):
                raise ValidationError(f"Configuration section '{name}' must be a table")
            kwargs[name] = _build_section(section, values, name)

        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> RunConfig:
        """
        Read a .toml, .json or .ini run configuration. INI files keep
        seed and output in a [run] section.

        @param path: Configuration file.
        @return: Validated configuration.
        """
        ext = os.path.splitext(path)[1].lower()

        if ext == ".toml":
            try:
                doc = tomllib.loads(read_text(path))
            except tomllib.TOMLDecodeError as e:
                raise ValidationError(f"'{path}' is not valid TOML: {e}") from e
        elif ext == ".json":
            doc = read_json(path)
        elif ext in (".ini", ".cfg"):
            parser = ConfigParser()

            try:
                parser.read_string(read_text(path), source=path)
            except ConfigParserError as e:
                raise ValidationError(f"'{path}' is not a valid INI file: {e}") from e

            doc = {s: dict(parser[s]) for s in parser.sections() if s != "run"}

            if parser.has_section("run"):
                doc.update(parser["run"])
        else:
            raise ValidationError(f"Unsupported configuration format '{ext}'; use .toml, .json or .ini")

        if not isinstance(doc, Mapping):
            raise ValidationError(f"'{path}' must hold a table of sections")

        return cls.from_mapping(doc)

    def validate(self):
        if self.attack.ci not in CI_METHODS:
            raise ValidationError(f"attack.ci must be one of {CI_METHODS}, got '{self.attack.ci}'")
        if self.report.rate_format not in RATE_FORMATS:
            raise ValidationError(f"report.rate_format must be one of {RATE_FORMATS}, got '{self.report.rate_format}'")
        if self.defense.epsilon is not None and not 0 <= self.defense.epsilon <= 1:
            raise ValidationError(f"defense.epsilon must lie in [0, 1], got {self.defense.epsilon}")
        if self.data.channels not in (1, 3):
            raise ValidationError(f"data.channels must be 1 or 3, got {self.data.channels}")

        # Constructing the module configs runs their own checks
        self.split_config(), self.train_config(), self.grid()
        self.smoothing_config(), self.ensemble_config(), self.adv_train_config()

    def override(self, section: Optional[str] = None, **values) -> RunConfig:
        """
        Apply command-line flags; None values leave the file value in place.

        @param section: Section name, or None for top-level keys.
        @param values: Keys and values.
        @return: New validated configuration.
        """
        values = {k: v for k, v in values.items() if v is not None}

        if not values:
            return self

        if section is None:
            cfg = replace(self, **{k: _coerce(v, _TOP_LEVEL[k], k) for k, v in values.items()})
        else:
            current = getattr(self, section)
            merged = {**asdict(current), **values}
            cfg = replace(self, **{section: _build_section(_SECTIONS[section], merged, section)})

        cfg.validate()
        return cfg

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
        """
        AUDIT_ENDPOINT_URL and AUDIT_MODEL_NAME override the first endpoint,
        adding one when none is configured.

        @param environ: Environment, defaults to os.environ.
        @return: Possibly updated configuration.
        """
        env = os.environ if environ is None else environ
        url, model = env.get(ENV_ENDPOINT_URL), env.get(ENV_MODEL_NAME)

        if not url and not model:
            return self

        endpoints = [EndpointSpec(e.base_url, e.model_name) for e in self.lingua.endpoints] or [EndpointSpec()]
        endpoints[0] = EndpointSpec(url or endpoints[0].base_url, model or endpoints[0].model_name)
        return replace(self, lingua=replace(self.lingua, endpoints=endpoints))

    def resolved(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """
        Output root, report presentation and thread counts do not change
        results, so they stay out of the hash.

        @return: 12 hex characters.
        """
        doc = self.resolved()
        doc.pop("output")
        doc.pop("report")

        for section in ("data", "attack", "lingua"):
            doc[section].pop("workers")

        return fingerprint(doc, 12)

    def run_directory(self) -> str:
        return os.path.join(self.output, self.config_hash())

    def split_config(self) -> SplitConfig:
        return SplitConfig(self.data.per_class_train, self.data.per_class_test, self.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t.epochs, learning_rate=t.learning_rate, step_size=t.step_size,
                           gamma=t.gamma, batch_size=t.batch_size, seed=self.seed)

    def grid(self) -> EpsilonGrid:
        return epsilon_grid(self.attack.levels, self.attack.maximum)

    def defense_epsilon(self) -> float:
        return self.grid().first_attack if self.defense.epsilon is None else self.defense.epsilon

    def smoothing_config(self) -> SmoothingConfig:
        return SmoothingConfig(self.defense.sigma, self.defense.truncate, self.defense.boundary)

    def ensemble_config(self) -> EnsembleConfig:
        d = self.defense
        return EnsembleConfig(d.votes, d.max_shift, d.flip, self.seed)

    def adv_train_config(self) -> AdvTrainConfig:
        d = self.defense
        return AdvTrainConfig(steps=d.adv_steps, learning_rate=d.adv_learning_rate, batch_size=d.adv_batch_size, seed=self.seed)

    def inference_endpoints(self) -> List[InferenceEndpoint]:
        l = self.lingua
        return [InferenceEndpoint(e.base_url, e.model_name, 0.0, l.timeout, l.retries, l.backoff) for e in l.endpoints]
