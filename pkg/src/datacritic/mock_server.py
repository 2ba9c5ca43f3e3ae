"""Scripted mock critique/rewrite HTTP service for integration tests.

Responses are pure functions of the request content (plus the URL path prefix,
which acts as a per-expert salt), so repeated runs against the same server are
byte-for-byte reproducible. A scripted failure mode can reject the first
attempt of every distinct request to exercise client retries.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .experts import embed_latent_quality, extract_latent_quality, strip_latent_quality
from .rewards import (
    MARKER_EVALUATION_REASONS,
    MARKER_QUESTION_ANALYSIS,
    MARKER_SCORING,
    SCORING_CLOSE,
)

DEFAULT_BASE_QUALITY = 2.5


def _unit_hash(*parts: str) -> float:
    """Deterministic pseudo-uniform value in [0, 1) from the given strings."""
    digest = hashlib.sha256("|".join(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2 ** 64


def _clip(value: float) -> float:
    return min(max(value, 0.0), 5.0)


class MockExpertServer:
    """Threaded HTTP server answering POST <salt>/critique and <salt>/rewrite."""

    def __init__(self, noise_scale: float = 0.5, fail_first_attempt: bool = False,
                 port: int = 0):
        self.noise_scale = noise_scale
        self.fail_first_attempt = fail_first_attempt
        self._seen: set[tuple[str, str, str]] = set()
        self._seen_lock = threading.Lock()
        self.request_count = 0

        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                try:
                    body = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    self._reply(400, {"error": "malformed JSON"})
                    return
                parts = [p for p in self.path.split("/") if p]
                if not parts or parts[-1] not in ("critique", "rewrite"):
                    self._reply(404, {"error": f"unknown path {self.path}"})
                    return
                op = parts[-1]
                salt = "/".join(parts[:-1]) or "default"
                server.request_count += 1
                if server._should_fail(self.path, body):
                    self._reply(500, {"error": "scripted transient failure"})
                    return
                self._reply(200, server.respond(op, salt, body))

            def _reply(self, status: int, payload: dict):
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._httpd = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    def _should_fail(self, path: str, body: dict) -> bool:
        if not self.fail_first_attempt:
            return False
        key = (path, str(body.get("sample_id")), str(body.get("answer")))
        with self._seen_lock:
            if key in self._seen:
                return False
            self._seen.add(key)
            return True

    def respond(self, op: str, salt: str, body: dict) -> dict:
        sample_id = str(body.get("sample_id", ""))
        answer = str(body.get("answer", ""))
        quality = extract_latent_quality(answer)
        if quality is None:
            quality = DEFAULT_BASE_QUALITY
        if op == "critique":
            jitter = (2 * _unit_hash(salt, sample_id, answer, "critique") - 1) * self.noise_scale
            score = _clip(quality + jitter)
            rationale = (
                f"{MARKER_QUESTION_ANALYSIS} Mock expert {salt} reviewed sample {sample_id}. "
                f"{MARKER_EVALUATION_REASONS} Evidence-based assessment of the answer. "
                f"{MARKER_SCORING} {int(round(score))} {SCORING_CLOSE}"
            )
            return {"score": score, "rationale": rationale}
        fused = body.get("fused_score", DEFAULT_BASE_QUALITY)
        jitter = (2 * _unit_hash(salt, sample_id, answer, "rewrite") - 1) * self.noise_scale
        new_quality = max(quality, _clip(float(fused) + jitter))
        base = strip_latent_quality(answer)
        return {"answer": embed_latent_quality(f"Mock rewrite ({salt}): {base}", new_quality)}

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address
        return f"http://{host}:{port}"

    def start(self) -> "MockExpertServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()

    def __enter__(self) -> "MockExpertServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run the mock expert HTTP service")
    parser.add_argument("--port", type=int, default=8761)
    parser.add_argument("--noise", type=float, default=0.5)
    parser.add_argument("--fail-first", action="store_true",
                        help="reject the first attempt of each distinct request")
    args = parser.parse_args(argv)
    server = MockExpertServer(noise_scale=args.noise, fail_first_attempt=args.fail_first,
                              port=args.port)
    print(f"mock expert server listening on {server.base_url}")
    try:
        server._httpd.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
