"""Shared builders for the test suite."""

from __future__ import annotations

import json
import math
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ecotune.backend import MockBackend, MockModelProfile
from ecotune.data import TuningSet
from ecotune.space import Constant, Hierarchical, LogRandInt, RandInt, SearchSpace, Uniform


def arithmetic_set(size: int, seed: int = 0) -> TuningSet:
    rng = random.Random(seed)
    examples = []
    for _ in range(size):
        a, b = rng.randint(1, 99), rng.randint(1, 99)
        examples.append({"prompt": f"What is {a} + {b}?", "answer": str(a + b)})
    return TuningSet(examples)


def constant_cost_backend(tokens_per_response: int) -> MockBackend:
    """Every response costs exactly ``tokens_per_response`` (if max_tokens allows); no input charge."""
    return MockBackend(
        default=MockModelProfile(fixed_output_tokens=tokens_per_response, charge_input=False)
    )


def tuning_space(**overrides) -> SearchSpace:
    domains = {
        "model": Constant("mock-1"),
        "prompt": Constant("{prompt}"),
        "max_tokens": LogRandInt(100, 1000),
        "temperature_or_top_p": Hierarchical(
            [{"temperature": Uniform(0.0, 1.0)}, {"top_p": Uniform(0.0, 1.0)}]
        ),
        "n": RandInt(1, 100),
    }
    domains.update(overrides)
    return SearchSpace(domains)


def landscape_utility(example, responses, config) -> float:
    """Synthetic objective peaking at n = 25, max_tokens = 400."""
    u = 1 - abs(config.n - 25) / 100 - abs(math.log(config.max_tokens / 400)) / 10
    return max(0.0, u)


def constant_utility(value: float):
    def utility(example, responses, config):
        return value

    return utility


class StubServer:
    """Local HTTP server replaying scripted (status, body) replies and recording requests."""

    def __init__(self):
        self.replies: list[tuple[int, bytes]] = []
        self.received: list[dict] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = self.rfile.read(length)
                stub.received.append(
                    {"path": self.path, "body": body, "headers": dict(self.headers)}
                )
                status, reply = stub.replies.pop(0) if stub.replies else (500, b"{}")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(reply)))
                self.end_headers()
                self.wfile.write(reply)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1"

    def script(self, *replies):
        for status, body in replies:
            raw = body if isinstance(body, bytes) else json.dumps(body).encode()
            self.replies.append((status, raw))

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
