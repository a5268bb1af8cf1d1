"""In-process logprobs service answering from a local backend.

Speaks the same wire protocol as :class:`cdtax.lm.RemoteLM` and exists for
integration tests: start it on an ephemeral port, point a remote backend at
it, and every query is answered from the wrapped model. ``fail_after`` makes
the server start returning HTTP 500 after a number of successful answers,
which is how resumable-run behaviour gets exercised.
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Iterator

from .lm import REMOTE_PATH, LanguageModel, Prefix, encode_logprob
from .vocab import Vocabulary

__all__ = ["MockLogprobsServer", "run_mock_server"]


class MockLogprobsServer:
    def __init__(
        self,
        model: LanguageModel,
        vocab: Vocabulary,
        host: str = "127.0.0.1",
        port: int = 0,
        fail_after: int | None = None,
        fingerprint_override: str | None = None,
    ):
        self.model = model
        self.vocab = vocab
        self.fail_after = fail_after
        self.fingerprint = fingerprint_override or vocab.fingerprint
        self._served = 0
        self._lock = threading.Lock()

        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                pass

            def do_POST(self):
                if self.path != REMOTE_PATH:
                    self.send_error(404, "unknown path")
                    return
                with server._lock:
                    server._served += 1
                    if server.fail_after is not None and server._served > server.fail_after:
                        self.send_error(500, "injected failure")
                        return
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    body = json.loads(self.rfile.read(length))
                    prefix = Prefix(
                        tuple(int(t) for t in body["prompt_ids"]),
                        tuple(int(t) for t in body["generated_ids"]),
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    self.send_error(400, f"bad request: {exc}")
                    return
                dist = server.model.next_distribution(prefix)
                payload = {
                    "vocab_fingerprint": server.fingerprint,
                    "logprobs": [encode_logprob(v) for v in dist.logprobs.tolist()],
                }
                data = json.dumps(payload).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def requests_served(self) -> int:
        with self._lock:
            return self._served

    def reset_failure(self, fail_after: int | None = None) -> None:
        with self._lock:
            self.fail_after = fail_after
            self._served = 0

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()


@contextmanager
def run_mock_server(
    model: LanguageModel,
    vocab: Vocabulary,
    fail_after: int | None = None,
    fingerprint_override: str | None = None,
) -> Iterator[MockLogprobsServer]:
    server = MockLogprobsServer(
        model, vocab, fail_after=fail_after, fingerprint_override=fingerprint_override
    )
    server.start()
    try:
        yield server
    finally:
        server.stop()
