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
import sys
import threading
import time
from configparser import ConfigParser
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np

TESTS = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(TESTS)

for path in (os.path.join(ROOT, "src"), os.path.join(ROOT, "scripts")):
    if path not in sys.path:
        sys.path.insert(0, path)

from clinaudit.constants import DEFAULT_IMAGE_SIZE, DEFAULT_SEED
from clinaudit.data import SplitConfig, NormalizationStats, LabeledImage, generate_synthetic_benchmark
from clinaudit.lingua import CorpusManifest, load_default_corpus, build_prompt
from clinaudit.model import Architecture, MicroDenseNet, TrainConfig, TrainingTrace, train

FIXTURES = os.path.join(TESTS, "fixtures")


def configuration() -> ConfigParser:
    cfg = ConfigParser()
    cfg.read(os.path.join(TESTS, "configuration.ini"))
    return cfg


@lru_cache(maxsize=None)
def benchmark_data() -> Tuple[Tuple[LabeledImage, ...], Tuple[LabeledImage, ...]]:
    train_set, test_set = generate_synthetic_benchmark(SplitConfig(), DEFAULT_IMAGE_SIZE)
    return tuple(train_set), tuple(test_set)


@lru_cache(maxsize=None)
def trained_benchmark() -> Tuple[MicroDenseNet, TrainingTrace]:
    """
    The default recipe on the default split, trained once per test process;
    training dominates the suite runtime.
    """
    model = MicroDenseNet.initialize(Architecture(image_size=DEFAULT_IMAGE_SIZE), NormalizationStats.for_channels(1), DEFAULT_SEED)
    train_set, _ = benchmark_data()
    return train(model, train_set, TrainConfig())


def small_model(seed: int = 7, image_size: int = 16, dtype=None) -> MicroDenseNet:
    arch = Architecture(image_size=image_size, stem_channels=4, blocks=2, layers=2, growth=2)
    model = MicroDenseNet.initialize(arch, NormalizationStats.for_channels(1), seed)
    return model.with_dtype(dtype) if dtype is not None else model


def poisoned_model() -> MicroDenseNet:
    # NaN head weights make the first loss non-finite
    model = small_model()
    params = {k: t.data for k, t in model.params.items()}
    params["head.weight"] = np.full_like(params["head.weight"], np.nan)
    return model.with_params(params)


def load_fixture(name: str) -> dict:
    with open(os.path.join(FIXTURES, name), 'r', encoding="utf-8") as file:
        return json.load(file)


def prompt_map(responses: Dict[str, str], corpus: Optional[CorpusManifest] = None) -> Dict[str, str]:
    """
    Translate a "case_id:register" -> response fixture into prompt -> response.
    """
    corpus = corpus or load_default_corpus()
    return {build_prompt(v, corpus.labels): responses[f"{v.case_id}:{v.register}"]
            for v in corpus.cases if f"{v.case_id}:{v.register}" in responses}


class MockEndpoint:
    def __init__(self, responses: Dict[str, str], failures: Sequence[int] = (), delay: float = 0.0,
                 default: Optional[str] = None):
        """
        Local completion server replaying scripted answers keyed by prompt.

        @param responses: Prompt -> completion text.
        @param failures: HTTP statuses returned, in order, before answers are served.
        @param delay: Seconds to wait before every answer.
        @param default: Completion for unknown prompts; None answers 404.
        """
        self.responses = dict(responses)
        self.failures = list(failures)
        self.delay = delay
        self.default = default
        self.requests: List[dict] = list()
        self.lock = threading.Lock()
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _send(self, status: int, body: str):
                data = body.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")

                with endpoint.lock:
                    endpoint.requests.append(payload)
                    status = endpoint.failures.pop(0) if endpoint.failures else None

                if status is not None:
                    self._send(status, json.dumps({"error": f"scripted {status}"}))
                    return

                if endpoint.delay:
                    time.sleep(endpoint.delay)

                answer = endpoint.responses.get(payload.get("prompt"), endpoint.default)

                if answer is None:
                    self._send(404, json.dumps({"error": "unknown prompt"}))
                else:
                    self._send(200, json.dumps({"model": payload.get("model"), "response": answer, "done": True}))

        return Handler

    def __enter__(self) -> "MockEndpoint":
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join()
