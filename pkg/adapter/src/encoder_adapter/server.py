"""Single-model bridge server with request coalescing.

One worker thread owns the backend. Transport threads (HTTP handlers or
the stdio loop) enqueue jobs and block on a per-job event; the worker
drains up to ``coalesce_max`` queued jobs at a time and merges their
items into one backend call per mode, so concurrent small requests ride
in shared batches. Replies are routed back through the job objects, so
ids never cross between callers.

Item-level failures (oversized inputs, bad pooling marks) null out that
item's vector slots and add an entry to the reply's ``errors`` list;
the rest of the batch still encodes. Request-level failures (wrong
proto, malformed fields) produce a top-level ``error`` reply instead.
"""

from __future__ import annotations

import json
import logging
import queue
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .backend import Backend, load_backend
from .config import AdapterConfig
from .protocol import (
    PROTO_VERSION,
    EncodeRequest,
    build_reply,
    error_reply,
    finalize_vector,
    validate_payload,
)

logger = logging.getLogger(__name__)

_SHUTDOWN = object()


class _Job:
    __slots__ = ("payload", "done", "reply")

    def __init__(self, payload):
        self.payload = payload
        self.done = threading.Event()
        self.reply: dict | None = None


class _Item:
    """One text slotted into a merged backend batch."""

    __slots__ = ("request", "index", "batch_pos")

    def __init__(self, request: EncodeRequest, index: int, batch_pos: int):
        self.request = request
        self.index = index
        self.batch_pos = batch_pos


class BridgeServer:
    """Owns one backend instance and serves it over HTTP and/or stdio."""

    def __init__(self, config: AdapterConfig, coalesce_max: int = 8, backend: Backend | None = None):
        if coalesce_max < 1:
            raise ValueError("coalesce_max must be at least 1")
        self.config = config
        self.coalesce_max = coalesce_max
        self.backend = backend if backend is not None else load_backend(config.model, config.device)
        self._queue: queue.Queue = queue.Queue()
        self._httpd: ThreadingHTTPServer | None = None
        self._http_thread: threading.Thread | None = None
        self._worker = threading.Thread(target=self._drain, name="bridge-worker", daemon=True)
        self._worker.start()

    # -- job intake ---------------------------------------------------

    def submit(self, payload) -> dict:
        """Process one already-parsed request payload; blocks until done."""
        job = _Job(payload)
        self._queue.put(job)
        job.done.wait()
        assert job.reply is not None
        return job.reply

    def health(self) -> dict:
        return {"proto": PROTO_VERSION, "dim": self.backend.dim}

    # -- worker -------------------------------------------------------

    def _drain(self) -> None:
        while True:
            first = self._queue.get()
            if first is _SHUTDOWN:
                return
            jobs = [first]
            stop = False
            while len(jobs) < self.coalesce_max:
                try:
                    nxt = self._queue.get(block=False)
                except queue.Empty:
                    break
                if nxt is _SHUTDOWN:
                    stop = True
                    break
                jobs.append(nxt)
            try:
                self._process(jobs)
            finally:
                for job in jobs:
                    if job.reply is None:
                        job.reply = error_reply(None, "internal adapter failure")
                    job.done.set()
            if stop:
                return

    def _process(self, jobs: list[_Job]) -> None:
        plain_texts: list[str] = []
        plain_items: list[_Item] = []
        dual_inputs: list[tuple[str, tuple[int, int]]] = []
        dual_items: list[_Item] = []
        encodes: list[tuple[_Job, EncodeRequest, list, list]] = []

        for job in jobs:
            kind, value = validate_payload(job.payload)
            if kind == "error":
                job.reply = value
                continue
            if kind == "health":
                reply = self.health()
                if value is not None:
                    reply["id"] = value
                job.reply = reply
                continue
            request: EncodeRequest = value
            slots = [None] * (2 * len(request.texts) if request.dual else len(request.texts))
            item_errors: list[dict] = []
            encodes.append((job, request, slots, item_errors))
            for i, text in enumerate(request.texts):
                problem = self._check_item(request, i, text)
                if problem is not None:
                    item_errors.append({"index": i, "error": problem})
                    continue
                if request.dual:
                    dual_items.append(_Item(request, i, len(dual_inputs)))
                    dual_inputs.append((text, request.marks[i]))
                else:
                    plain_items.append(_Item(request, i, len(plain_texts)))
                    plain_texts.append(text)

        plain_vecs = self.backend.encode_plain(plain_texts, self.config.pooling) if plain_texts else []
        dual_vecs = self.backend.encode_dual(dual_inputs, self.config.pooling) if dual_inputs else []

        by_request = {id(req): slots for _, req, slots, _ in encodes}
        for item in plain_items:
            vec = plain_vecs[item.batch_pos]
            by_request[id(item.request)][item.index] = finalize_vector(vec, self.config.normalize)
        for item in dual_items:
            first, second = dual_vecs[item.batch_pos]
            slots = by_request[id(item.request)]
            slots[2 * item.index] = finalize_vector(first, self.config.normalize)
            slots[2 * item.index + 1] = finalize_vector(second, self.config.normalize)

        for job, request, slots, item_errors in encodes:
            job.reply = build_reply(request, self.backend.dim, slots, item_errors)

    def _check_item(self, request: EncodeRequest, index: int, text: str) -> str | None:
        count = self.backend.token_count(text)
        if count > self.config.max_input_length:
            return f"input of {count} tokens exceeds max input length {self.config.max_input_length}"
        if request.dual:
            start, end = request.marks[index]
            if not (0 <= start < end <= len(text)):
                return f"pooling marks [{start}, {end}] out of range for text of length {len(text)}"
        return None

    # -- HTTP transport -----------------------------------------------

    def start_http(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        """Bind and serve in a background thread; returns (host, port)."""
        bridge = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep request noise out of stderr
                logger.debug("http: " + fmt, *args)

            def _send(self, code: int, obj: dict) -> None:
                body = json.dumps(obj).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path.rstrip("/") == "/health":
                    self._send(200, bridge.health())
                else:
                    self._send(404, error_reply(None, f"unknown path {self.path!r}"))

            def do_POST(self):
                if self.path.rstrip("/") != "/encode":
                    self._send(404, error_reply(None, f"unknown path {self.path!r}"))
                    return
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length)
                try:
                    payload = json.loads(raw)
                except ValueError:
                    self._send(400, error_reply(None, "request body is not JSON"))
                    return
                self._send(200, bridge.submit(payload))

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self._http_thread = threading.Thread(
            target=self._httpd.serve_forever, name="bridge-http", daemon=True
        )
        self._http_thread.start()
        bound = self._httpd.server_address
        return bound[0], bound[1]

    # -- stdio transport ----------------------------------------------

    def serve_stdio(self, stdin=None, stdout=None) -> None:
        """Newline-framed JSON: one request per line, one reply per line."""
        stdin = sys.stdin if stdin is None else stdin
        stdout = sys.stdout if stdout is None else stdout
        for line in stdin:
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except ValueError:
                reply = error_reply(None, "request line is not JSON")
            else:
                reply = self.submit(payload)
            stdout.write(json.dumps(reply) + "\n")
            stdout.flush()

    # -- lifecycle ----------------------------------------------------

    def close(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
        self._queue.put(_SHUTDOWN)
        self._worker.join(timeout=5.0)

    def __enter__(self) -> "BridgeServer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve(config: AdapterConfig, host: str = "127.0.0.1", port: int = 8632,
          coalesce_max: int = 8) -> tuple[BridgeServer, str, int]:
    """Construct a server and bind its HTTP endpoint."""
    server = BridgeServer(config, coalesce_max=coalesce_max)
    bound_host, bound_port = server.start_http(host, port)
    return server, bound_host, bound_port
