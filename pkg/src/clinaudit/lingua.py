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
import re
import time
import json
import requests
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from .constants import *
from .data import ClassLabel, default_labels, label_by_name
from .errors import ValidationError, EndpointError
from .stats import accuracy
from .utils import audit_log, fingerprint, read_json

UNPARSEABLE = ClassLabel(-1, UNPARSEABLE_NAME)


def is_unparseable(label: ClassLabel) -> bool:
    return label.index < 0


@dataclass(frozen=True)
class Vignette:
    case_id: int
    register: str
    text: str
    truth: ClassLabel

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "register": self.register, "text": self.text, "truth": self.truth.name}


@dataclass(frozen=True)
class CorpusManifest:
    cases: Tuple[Vignette, ...]
    labels: Tuple[ClassLabel, ...]
    note: str = ''

    @property
    def case_ids(self) -> List[int]:
        return sorted({v.case_id for v in self.cases})

    def __len__(self) -> int:
        return len(self.cases)

    def class_counts(self) -> List[int]:
        """
        @return: Cases per class, counted once per case_id.
        """
        counts = [0] * len(self.labels)
        for v in self.cases:
            if v.register == REGISTER_ENGLISH:
                counts[v.truth.index] += 1
        return counts

    def get(self, case_id: int, register: str) -> Vignette:
        for v in self.cases:
            if v.case_id == case_id and v.register == register:
                return v
        raise ValidationError(f"No vignette for case {case_id} in register '{register}'")

    def corpus_hash(self) -> str:
        return fingerprint([v.to_dict() for v in self.cases], 64)


def _sort_key(v: Vignette) -> Tuple[int, int]:
    return v.case_id, REGISTERS.index(v.register)


def corpus_from_records(records: Any, labels: Sequence[ClassLabel] = (), note: str = '') -> CorpusManifest:
    """
    Validate vignette records: every case appears once in every register
    and keeps the same truth across registers.

    @param records: List of {case_id, register, text, truth} objects.
    @param labels: Known classes.
    @param note: Free-text provenance, kept with the manifest.
    @return: CorpusManifest in case_id-then-register order.
    """
    labels = tuple(labels or default_labels())

    if not isinstance(records, list) or not records:
        raise ValidationError("Corpus must be a non-empty JSON array of vignette records")

    seen: Dict[Tuple[int, str], Vignette] = dict()

    for i, rec in enumerate(records):
        if not isinstance(rec, dict) or not {"case_id", "register", "text", "truth"} <= set(rec):
            raise ValidationError(f"Corpus record {i} needs 'case_id', 'register', 'text' and 'truth'")
        if not isinstance(rec["case_id"], int) or isinstance(rec["case_id"], bool):
            raise ValidationError(f"Corpus record {i} has a non-integer case_id {rec['case_id']!r}")
        if rec["register"] not in REGISTERS:
            raise ValidationError(f"Case {rec['case_id']} has unknown register '{rec['register']}'; expected one of {REGISTERS}")

        v = Vignette(rec["case_id"], rec["register"], str(rec["text"]), label_by_name(labels, rec["truth"]))
        key = (v.case_id, v.register)

        if key in seen:
            raise ValidationError(f"Case {v.case_id} has more than one '{v.register}' vignette")
        seen[key] = v

    for case_id in sorted({k[0] for k in seen}):
        missing = [r for r in REGISTERS if (case_id, r) not in seen]

        if missing:
            raise ValidationError(f"Case {case_id} lacks register(s) {', '.join(missing)}")

        truths = {seen[(case_id, r)].truth for r in REGISTERS}

        if len(truths) > 1:
            raise ValidationError(f"Case {case_id} has differing truth labels across registers: {sorted(t.name for t in truths)}")

    return CorpusManifest(tuple(sorted(seen.values(), key=_sort_key)), labels, note)


def load_corpus(path: str, labels: Sequence[ClassLabel] = ()) -> CorpusManifest:
    """
    @param path: JSON array of vignette records, or an object with a
        "vignettes" array and an optional "note".
    @param labels: Known classes.
    @return: Validated manifest.
    """
    doc = read_json(path)

    if isinstance(doc, dict):
        return corpus_from_records(doc.get("vignettes"), labels, str(doc.get("note", '')))

    return corpus_from_records(doc, labels)


def load_default_corpus() -> CorpusManifest:
    """
    @return: The shipped illustrative corpus (20 cases x 3 registers).
    """
    text = resources.files("clinaudit").joinpath("resources", CORPUS_RESOURCE).read_text(encoding="utf-8")
    doc = json.loads(text)
    return corpus_from_records(doc["vignettes"], note=doc.get("note", ''))


def build_prompt(v: Vignette, labels: Sequence[ClassLabel] = ()) -> str:
    """
    Single-turn zero-shot prompt. Identical inputs give identical bytes.

    @param v: Vignette.
    @param labels: Closed answer set, listed once in index order.
    @return: Prompt text.
    """
    names = ", ".join(l.name for l in (labels or default_labels()))
    return f"{PROMPT_PREAMBLE}\n\nCase:\n{v.text}\n\n{PROMPT_ANSWER.format(labels=names)}\n"


@dataclass(frozen=True)
class InferenceEndpoint:
    base_url: str = ENDPOINT_URL
    model_name: str = ENDPOINT_MODEL
    temperature: float = 0.0
    timeout: float = ENDPOINT_TIMEOUT
    max_retries: int = ENDPOINT_RETRIES
    backoff: float = ENDPOINT_BACKOFF

    def __post_init__(self):
        if not self.base_url:
            raise ValidationError("Endpoint base_url is empty")
        if self.max_retries < 0:
            raise ValidationError(f"max_retries must be >= 0, got {self.max_retries}")
        if not self.timeout > 0:
            raise ValidationError(f"timeout must be > 0, got {self.timeout}")

    @property
    def url(self) -> str:
        return self.base_url.rstrip('/') + GENERATE_ROUTE

    def with_env_overrides(self, environ: Optional[Dict[str, str]] = None) -> InferenceEndpoint:
        env = os.environ if environ is None else environ
        return replace(self,
                       base_url=env.get(ENV_ENDPOINT_URL) or self.base_url,
                       model_name=env.get(ENV_MODEL_NAME) or self.model_name)

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "temperature": self.temperature,
            "timeout": self.timeout,
            "max_retries": self.max_retries
        }


class EndpointClient:
    def __init__(self, endpoint: InferenceEndpoint, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        """
        Non-streaming completion client. Transport failures, 429 and 5xx
        responses are retried with exponential backoff; other HTTP errors
        fail at once.

        @param endpoint: Server, model and retry policy.
        @param session: Optional requests session to reuse.
        @param sleep: Delay function, replaceable in tests.
        """
        self.endpoint = endpoint
        self.session = session or requests.Session()
        self.sleep = sleep
        self.last_attempt_count = 0

    def payload(self, prompt: str) -> dict:
        return {
            "model": self.endpoint.model_name,
            "prompt": prompt,
            "stream": False,
            "options": {"temperature": self.endpoint.temperature}
        }

    def query_with_attempts(self, prompt: str) -> Tuple[str, int]:
        """
        @param prompt: Prompt text.
        @return: (completion text, requests sent).
        """
        ep = self.endpoint
        attempts = 0
        failure = None

        while attempts <= ep.max_retries:
            if attempts:
                delay = ep.backoff * 2 ** (attempts - 1)
                audit_log(f"Retrying {ep.url} in {delay:g}s after {failure}", source="lingua", severity=2)
                self.sleep(delay)

            attempts += 1

            try:
                response = self.session.post(ep.url, json=self.payload(prompt), timeout=ep.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                failure = EndpointError(f"Request to {ep.url} failed: {e}", attempts=attempts)
                continue

            if response.status_code == 429 or response.status_code >= 500:
                failure = EndpointError(f"Transient failure from {ep.url}", response.status_code, response.text, attempts)
                continue
            if response.status_code >= 400:
                raise EndpointError(f"Request to {ep.url} rejected", response.status_code, response.text, attempts)

            try:
                text = response.json()["response"]
            except (ValueError, KeyError, TypeError) as e:
                raise EndpointError(f"Malformed completion from {ep.url}", response.status_code, response.text, attempts) from e

            return str(text), attempts

        failure.attempts = attempts
        raise failure

    def query(self, prompt: str) -> str:
        text, self.last_attempt_count = self.query_with_attempts(prompt)
        return text


def _label_pattern(name: str) -> re.Pattern:
    parts = [re.escape(p) for p in re.split(r"[\s\-]+", name.lower()) if p]
    body = r"[\s\-]*".join(parts)

    # "Non-COVID-19 Pneumonia" style spellings
    if parts and parts[0] == "non" and len(parts) > 2:
        body = r"[\s\-]*".join(parts[:2]) + r"(?:[\s\-]*19)?[\s\-]*" + r"[\s\-]*".join(parts[2:])

    return re.compile(r"(?<![a-z0-9])(?<!non-)(?<!non )" + body + r"(?![a-z0-9])")


def parse_label(raw_response: str, labels: Sequence[ClassLabel] = ()) -> ClassLabel:
    """
    Map a free-text answer to one class or UNPARSEABLE. Canonical names are
    tried longest first, then the synonym table; the first match wins.

    @param raw_response: Completion text.
    @param labels: Known classes.
    @return: ClassLabel, or UNPARSEABLE when nothing matches.
    """
    labels = tuple(labels or default_labels())
    text = raw_response.lower()

    for label in sorted(labels, key=lambda l: (-len(l.name), l.index)):
        if _label_pattern(label.name).search(text):
            return label

    by_name = {l.name: l for l in labels}

    for pattern, name in LABEL_SYNONYMS:
        if name in by_name and pattern.search(text):
            return by_name[name]

    return UNPARSEABLE


@dataclass(frozen=True)
class CaseOutcome:
    case_id: int
    register: str
    raw_response: str
    parsed: ClassLabel
    correct: bool
    consistent_with_english: Optional[bool]
    attempts: int = 0
    error: str = ''

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "register": self.register,
            "raw_response": self.raw_response,
            "parsed": self.parsed.name,
            "correct": self.correct,
            "consistent_with_english": self.consistent_with_english,
            "attempts": self.attempts,
            "error": self.error
        }


@dataclass
class DriftProfile:
    model_name: str
    base_url: str
    corpus_hash: str
    case_ids: List[int]
    outcomes: Dict[Tuple[int, str], CaseOutcome] = field(default_factory=dict)

    def outcome(self, case_id: int, register: str) -> CaseOutcome:
        return self.outcomes[(case_id, register)]

    def grid(self, register: str) -> List[CaseOutcome]:
        return [self.outcomes[(c, register)] for c in self.case_ids]

    def accuracy(self, register: str) -> float:
        return accuracy(sum(o.correct for o in self.grid(register)), len(self.case_ids))

    def consistency(self, register: str) -> float:
        """
        Agreement with the model's own Standard English answer; 1.0 for
        English by definition. Unparseable answers never agree.

        @param register: Register name.
        @return: Fraction of cases.
        """
        if register == REGISTER_ENGLISH:
            return 1.0
        return accuracy(sum(bool(o.consistent_with_english) for o in self.grid(register)), len(self.case_ids))

    def flips(self) -> List[int]:
        """
        @return: Case ids whose parsed outcome differs between at least two registers.
        """
        return [c for c in self.case_ids if len({self.outcomes[(c, r)].parsed for r in REGISTERS}) > 1]

    def summary(self) -> Dict[str, Dict[str, float]]:
        return {r: {"accuracy": self.accuracy(r), "consistency": self.consistency(r)} for r in REGISTERS}

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "base_url": self.base_url,
            "corpus_hash": self.corpus_hash,
            "registers": self.summary(),
            "flips": self.flips(),
            "outcomes": [self.outcomes[(c, r)].to_dict() for c in self.case_ids for r in REGISTERS]
        }

    @classmethod
    def from_dict(cls, doc: dict, labels: Sequence[ClassLabel] = ()) -> DriftProfile:
        labels = tuple(labels or default_labels())
        by_name = {l.name: l for l in labels}
        by_name[UNPARSEABLE_NAME] = UNPARSEABLE
        outcomes = dict()

        for o in doc["outcomes"]:
            outcome = CaseOutcome(o["case_id"], o["register"], o["raw_response"], by_name[o["parsed"]], o["correct"],
                                  o["consistent_with_english"], o.get("attempts", 0), o.get("error", ''))
            outcomes[(outcome.case_id, outcome.register)] = outcome

        case_ids = sorted({k[0] for k in outcomes})
        return cls(doc["model_name"], doc["base_url"], doc["corpus_hash"], case_ids, outcomes)


def run_drift_audit(endpoint: InferenceEndpoint, corpus: CorpusManifest, strict: bool = True, workers: int = 1,
                    client: Optional[EndpointClient] = None) -> DriftProfile:
    """
    Query every vignette once and score the answers.

    @param endpoint: Server and model; temperature must be 0.0.
    @param corpus: Validated corpus.
    @param strict: Abort on the first endpoint failure; otherwise record Unparseable.
    @param workers: Concurrent requests; outcomes are keyed, not ordered by completion.
    @param client: Optional pre-built client.
    @return: DriftProfile.
    """
    if endpoint.temperature != 0.0:
        raise ValidationError(f"Audit runs require temperature 0.0, got {endpoint.temperature}")

    client = client or EndpointClient(endpoint)
    ordered = list(corpus.cases)

    def _ask(v: Vignette) -> Tuple[str, int, str]:
        try:
            text, attempts = client.query_with_attempts(build_prompt(v, corpus.labels))
            return text, attempts, ''
        except EndpointError as e:
            if strict:
                raise
            audit_log(f"Case {v.case_id} ({v.register}) recorded as {UNPARSEABLE_NAME}: {e}", source="lingua", severity=2)
            return '', e.attempts, str(e)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        answers = dict(zip(((v.case_id, v.register) for v in ordered), pool.map(_ask, ordered)))

    profile = DriftProfile(endpoint.model_name, endpoint.base_url, corpus.corpus_hash(), corpus.case_ids)

    for case_id in corpus.case_ids:
        english = None

        for register in REGISTERS:
            v = corpus.get(case_id, register)
            raw, attempts, error = answers[(case_id, register)]
            parsed = parse_label(raw, corpus.labels) if not error else UNPARSEABLE

            if register == REGISTER_ENGLISH:
                english = parsed
                consistent = None
            else:
                consistent = not is_unparseable(parsed) and parsed == english

            correct = not is_unparseable(parsed) and parsed == v.truth
            profile.outcomes[(case_id, register)] = CaseOutcome(case_id, register, raw, parsed, correct, consistent, attempts, error)

    audit_log(f"{endpoint.model_name}: " + ", ".join(f"{r} {profile.accuracy(r):.3f}" for r in REGISTERS),
              source="lingua", severity=1)
    return profile


@dataclass(frozen=True)
class ComparisonRow:
    model_name: str
    accuracy: Dict[str, float]
    drop: Dict[str, float]
    consistency: Dict[str, float]
    flips: int


def compare_models(profiles: Sequence[DriftProfile]) -> List[ComparisonRow]:
    """
    Side-by-side accuracy, drop from English and consistency per model.

    @param profiles: Two or more profiles over the same corpus.
    @return: One row per profile, in input order.
    """
    if len(profiles) < 2:
        raise ValidationError(f"Comparison needs at least two drift profiles, got {len(profiles)}")

    hashes = {p.corpus_hash for p in profiles}

    if len(hashes) > 1:
        raise ValidationError("Drift profiles were measured on different corpora")

    rows = list()

    for p in profiles:
        acc = {r: p.accuracy(r) for r in REGISTERS}
        rows.append(ComparisonRow(p.model_name, acc,
                                  {r: acc[r] - acc[REGISTER_ENGLISH] for r in REGISTERS},
                                  {r: p.consistency(r) for r in REGISTERS},
                                  len(p.flips())))

    return rows
