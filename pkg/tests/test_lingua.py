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

import json
import os
import tempfile
import unittest
import helpers
from clinaudit.errors import EndpointError, ValidationError
from clinaudit.lingua import (UNPARSEABLE, is_unparseable, corpus_from_records, load_corpus, load_default_corpus,
                              build_prompt, InferenceEndpoint, EndpointClient, parse_label, DriftProfile,
                              run_drift_audit, compare_models)

# (response, expected label name or None for Unparseable)
PARSER_CASES = (
    ("COVID-19", "COVID-19"),
    ("covid-19", "COVID-19"),
    ("Covid 19", "COVID-19"),
    ("COVID19", "COVID-19"),
    ("covid-19.", "COVID-19"),
    ("**COVID-19**", "COVID-19"),
    ("Answer: covid-19\n", "COVID-19"),
    ("The most likely diagnosis is COVID-19.", "COVID-19"),
    ("COVID-19 pneumonia", "COVID-19"),
    ("COVID pneumonia", "COVID-19"),
    ("coronavirus", "COVID-19"),
    ("Coronavirus disease", "COVID-19"),
    ("SARS-CoV-2 infection", "COVID-19"),
    ("sars cov 2", "COVID-19"),
    ("It could be Normal or COVID-19", "COVID-19"),
    ("COVID-19 is unlikely; this is Normal", "COVID-19"),
    ("Non-COVID Pneumonia", "Non-COVID Pneumonia"),
    ("Diagnosis: Non-COVID Pneumonia.", "Non-COVID Pneumonia"),
    ("non-covid pneumonia", "Non-COVID Pneumonia"),
    ("NON COVID PNEUMONIA", "Non-COVID Pneumonia"),
    ("Noncovid pneumonia", "Non-COVID Pneumonia"),
    ("Non-COVID-19 Pneumonia", "Non-COVID Pneumonia"),
    ("non covid-19 pneumonia", "Non-COVID Pneumonia"),
    ("Non-COVID Pneumonia, not COVID-19", "Non-COVID Pneumonia"),
    ("Non-COVID pneumonia (bacterial)", "Non-COVID Pneumonia"),
    ("Pneumonia", "Non-COVID Pneumonia"),
    ("pneumonia", "Non-COVID Pneumonia"),
    ("Bacterial pneumonia", "Non-COVID Pneumonia"),
    ("viral pneumonia", "Non-COVID Pneumonia"),
    ("bronchopneumonia", "Non-COVID Pneumonia"),
    ("lobar consolidation", "Non-COVID Pneumonia"),
    ("Pneumonia (non-COVID)", "Non-COVID Pneumonia"),
    ("Normal", "Normal"),
    ("NORMAL", "Normal"),
    ("normal chest x-ray", "Normal"),
    ("Diagnosis: Normal", "Normal"),
    ("Diagnosis - Normal.", "Normal"),
    ("The patient is likely healthy.", "Normal"),
    ("No findings", "Normal"),
    ("no abnormality detected", "Normal"),
    ("No abnormalities", "Normal"),
    ("unremarkable chest", "Normal"),
    ("I cannot provide medical advice.", None),
    ("", None),
    ("Unknown", None),
    ("I don't know", None),
    ("Tuberculosis", None),
    ("Malaria", None),
    ("abnormal findings", None),
    ("Normalcy", None),
    ("covidien", None),
    ("N/A", None)
)


def endpoint(url: str, model: str = "mock", **kwargs) -> InferenceEndpoint:
    kwargs.setdefault("timeout", 5.0)
    kwargs.setdefault("max_retries", 0)
    return InferenceEndpoint(url, model, **kwargs)


def no_sleep(_delay: float):
    pass


def fixture_profile(name: str, workers: int = 1) -> DriftProfile:
    fixture = helpers.load_fixture(name)
    corpus = load_default_corpus()

    with helpers.MockEndpoint(helpers.prompt_map(fixture["responses"], corpus)) as mock:
        return run_drift_audit(endpoint(mock.url, fixture["model_name"]), corpus, workers=workers)


class TestParser(unittest.TestCase):
    def test_response_corpus(self):
        for response, expected in PARSER_CASES:
            with self.subTest(response=response):
                parsed = parse_label(response)

                if expected is None:
                    self.assertTrue(is_unparseable(parsed))
                else:
                    self.assertEqual(expected, parsed.name)

    def test_longest_match(self):
        for wrapper in ("{}", "Answer: {}.", "I think {}, clearly", "{} (not COVID-19)"):
            self.assertEqual("Non-COVID Pneumonia", parse_label(wrapper.format("Non-COVID Pneumonia")).name)

    def test_unparseable_value(self):
        self.assertEqual("Unparseable", UNPARSEABLE.name)
        self.assertIs(UNPARSEABLE, parse_label("no idea"))


class TestCorpus(unittest.TestCase):
    def records(self):
        return [v.to_dict() for v in load_default_corpus().cases]

    def test_default_corpus(self):
        corpus = load_default_corpus()
        self.assertEqual(60, len(corpus))
        self.assertEqual(list(range(1, 21)), corpus.case_ids)
        self.assertEqual([11, 5, 4], corpus.class_counts())
        self.assertTrue(corpus.note)
        self.assertEqual(64, len(corpus.corpus_hash()))

    def test_missing_register(self):
        records = [r for r in self.records() if not (r["case_id"] == 7 and r["register"] == "pidgin")]

        with self.assertRaises(ValidationError) as ctx:
            corpus_from_records(records)

        self.assertIn("Case 7", str(ctx.exception))

    def test_truth_mismatch(self):
        records = self.records()
        target = next(r for r in records if r["case_id"] == 3 and r["register"] == "yoruba_english")
        target["truth"] = "Normal" if target["truth"] != "Normal" else "COVID-19"
        self.assertRaises(ValidationError, corpus_from_records, records)

    def test_bad_records(self):
        records = self.records()
        records[0]["register"] = "french"
        self.assertRaises(ValidationError, corpus_from_records, records)
        self.assertRaises(ValidationError, corpus_from_records, [])
        self.assertRaises(ValidationError, corpus_from_records, self.records() + [self.records()[0]])

    def test_load_forms(self):
        with tempfile.TemporaryDirectory() as root:
            bare, wrapped = os.path.join(root, "bare.json"), os.path.join(root, "wrapped.json")

            with open(bare, 'w') as file:
                json.dump(self.records(), file)
            with open(wrapped, 'w') as file:
                json.dump({"note": "ward round", "vignettes": self.records()}, file)

            self.assertEqual(load_default_corpus().corpus_hash(), load_corpus(bare).corpus_hash())
            self.assertEqual("ward round", load_corpus(wrapped).note)

    def test_prompt(self):
        corpus = load_default_corpus()
        v = corpus.get(4, "pidgin")
        prompt = build_prompt(v, corpus.labels)
        self.assertEqual(prompt, build_prompt(v, corpus.labels))
        self.assertIn(v.text, prompt)
        instruction = prompt.strip().splitlines()[-1]

        for label in corpus.labels:
            self.assertEqual(1, instruction.count(label.name))


class TestClient(unittest.TestCase):
    def test_payload(self):
        with helpers.MockEndpoint({}, default="COVID-19") as mock:
            client = EndpointClient(endpoint(mock.url, "llama3.1:8b"))
            self.assertEqual("COVID-19", client.query("hello"))
            self.assertEqual(1, client.last_attempt_count)

        self.assertEqual([{"model": "llama3.1:8b", "prompt": "hello", "stream": False, "options": {"temperature": 0.0}}],
                         mock.requests)

    def test_transient_failures_are_retried(self):
        delays = list()

        with helpers.MockEndpoint({}, failures=(500, 500), default="Normal") as mock:
            client = EndpointClient(endpoint(mock.url, max_retries=3, backoff=0.5), sleep=delays.append)
            self.assertEqual(("Normal", 3), client.query_with_attempts("x"))

        self.assertEqual([0.5, 1.0], delays)

    def test_retries_exhausted(self):
        with helpers.MockEndpoint({}, failures=(503,) * 5, default="Normal") as mock:
            client = EndpointClient(endpoint(mock.url, max_retries=2), sleep=no_sleep)

            with self.assertRaises(EndpointError) as ctx:
                client.query("x")

        self.assertEqual(503, ctx.exception.status)
        self.assertEqual(3, ctx.exception.attempts)
        self.assertIn("scripted 503", ctx.exception.body_excerpt)

    def test_client_errors_are_not_retried(self):
        with helpers.MockEndpoint({}, failures=(400,), default="Normal") as mock:
            client = EndpointClient(endpoint(mock.url, max_retries=3), sleep=no_sleep)

            with self.assertRaises(EndpointError) as ctx:
                client.query("x")

        self.assertEqual(400, ctx.exception.status)
        self.assertEqual(1, ctx.exception.attempts)
        self.assertEqual(1, len(mock.requests))

    def test_timeout(self):
        with helpers.MockEndpoint({}, delay=1.0, default="Normal") as mock:
            client = EndpointClient(endpoint(mock.url, timeout=0.2, max_retries=1), sleep=no_sleep)

            with self.assertRaises(EndpointError) as ctx:
                client.query("x")

        self.assertIsNone(ctx.exception.status)
        self.assertEqual(2, ctx.exception.attempts)

    def test_endpoint_settings(self):
        self.assertRaises(ValidationError, InferenceEndpoint, "")
        self.assertRaises(ValidationError, InferenceEndpoint, max_retries=-1)
        ep = InferenceEndpoint("http://host:1/").with_env_overrides({"AUDIT_MODEL_NAME": "natlas"})
        self.assertEqual("natlas", ep.model_name)
        self.assertEqual("http://host:1/api/generate", ep.url)


class TestDriftAudit(unittest.TestCase):
    def test_llama_like_marginals(self):
        profile = fixture_profile("llama_like.json")
        self.assertEqual({"english": 0.80, "pidgin": 0.65, "yoruba_english": 0.60},
                         {r: profile.accuracy(r) for r in ("english", "pidgin", "yoruba_english")})
        self.assertEqual(1.0, profile.consistency("english"))
        self.assertEqual(0.85, profile.consistency("pidgin"))
        self.assertEqual(0.80, profile.consistency("yoruba_english"))
        self.assertEqual([5, 10, 14, 17, 19], profile.flips())

    def test_natlas_like_marginals(self):
        profile = fixture_profile("natlas_like.json")
        self.assertEqual([0.85, 0.55, 0.75], [profile.accuracy(r) for r in ("english", "pidgin", "yoruba_english")])
        self.assertEqual(0.50, profile.consistency("pidgin"))
        self.assertEqual(0.60, profile.consistency("yoruba_english"))

    def test_parallel_matches_sequential(self):
        self.assertEqual(fixture_profile("llama_like.json").to_dict(), fixture_profile("llama_like.json", workers=4).to_dict())

    def test_comparison(self):
        rows = compare_models([fixture_profile("llama_like.json"), fixture_profile("natlas_like.json")])
        self.assertEqual(["llama3.1:8b", "natlas"], [r.model_name for r in rows])
        self.assertAlmostEqual(-0.20, rows[0].drop["yoruba_english"])
        self.assertAlmostEqual(-0.30, rows[1].drop["pidgin"])
        self.assertEqual(0.0, rows[1].drop["english"])
        self.assertEqual(5, rows[0].flips)

    def test_identical_profiles(self):
        profile = fixture_profile("llama_like.json")
        a, b = compare_models([profile, profile])
        self.assertEqual(a.accuracy, b.accuracy)
        self.assertEqual(a.drop, b.drop)

    def test_comparison_needs_matching_corpora(self):
        profile = fixture_profile("llama_like.json")
        other = DriftProfile("other", profile.base_url, "0" * 64, profile.case_ids, profile.outcomes)
        self.assertRaises(ValidationError, compare_models, [profile, other])
        self.assertRaises(ValidationError, compare_models, [profile])

    def test_perfect_model(self):
        corpus = load_default_corpus()
        answers = {build_prompt(v, corpus.labels): v.truth.name for v in corpus.cases}

        with helpers.MockEndpoint(answers) as mock:
            profile = run_drift_audit(endpoint(mock.url), corpus)

        for register in ("english", "pidgin", "yoruba_english"):
            self.assertEqual(1.0, profile.accuracy(register))
            self.assertEqual(1.0, profile.consistency(register))

        self.assertEqual([], profile.flips())

    def test_strict_and_lenient(self):
        corpus = load_default_corpus()
        english = {build_prompt(v, corpus.labels): v.truth.name for v in corpus.cases if v.register == "english"}

        with helpers.MockEndpoint(english) as mock:
            self.assertRaises(EndpointError, run_drift_audit, endpoint(mock.url), corpus)
            profile = run_drift_audit(endpoint(mock.url), corpus, strict=False)

        self.assertEqual(1.0, profile.accuracy("english"))
        self.assertEqual(0.0, profile.accuracy("pidgin"))
        self.assertEqual(0.0, profile.consistency("pidgin"))
        outcome = profile.outcome(1, "pidgin")
        self.assertTrue(is_unparseable(outcome.parsed))
        self.assertFalse(outcome.correct)
        self.assertFalse(outcome.consistent_with_english)
        self.assertIn("404", outcome.error)

    def test_unparseable_never_agrees(self):
        corpus = load_default_corpus()

        with helpers.MockEndpoint({}, default="I cannot say.") as mock:
            profile = run_drift_audit(endpoint(mock.url), corpus)

        self.assertEqual(0.0, profile.consistency("pidgin"))
        self.assertEqual(1.0, profile.consistency("english"))
        self.assertEqual([], profile.flips())

    def test_temperature_must_be_zero(self):
        self.assertRaises(ValidationError, run_drift_audit, endpoint("http://127.0.0.1:9", temperature=0.7),
                          load_default_corpus())

    def test_document_form(self):
        profile = fixture_profile("natlas_like.json")
        restored = DriftProfile.from_dict(json.loads(json.dumps(profile.to_dict())))
        self.assertEqual(profile.summary(), restored.summary())
        self.assertEqual(profile.flips(), restored.flips())


class TestLiveEndpoint(unittest.TestCase):
    def setUp(self):
        section = helpers.configuration()["Endpoint"]
        self.url, self.model = section.get("url", ''), section.get("model", '') or "llama3.1:8b"

        if not self.url:
            self.skipTest("No live endpoint configured in configuration.ini")

    def test_single_vignette(self):
        corpus = load_default_corpus()
        case = corpus.cases[0]
        client = EndpointClient(InferenceEndpoint(self.url, self.model, timeout=120.0, max_retries=1))
        response = client.query(build_prompt(case, corpus.labels))
        self.assertIsInstance(response, str)
        self.assertIn(parse_label(response), list(corpus.labels) + [UNPARSEABLE])


if __name__ == "__main__":
    unittest.main()
