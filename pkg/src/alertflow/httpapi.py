"""Thin HTTP front door over the runtime's ingress routes.

POST bodies are handed to FunctionRuntime.http_ingress; GET /healthz
answers 200 while the server is up. Listens on an ephemeral port by
default so parallel test runs never collide.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import PortInUse
from .runtime import FunctionRuntime

logger = logging.getLogger(__name__)


class _Handler(BaseHTTPRequestHandler):
    runtime: FunctionRuntime  # injected by the server factory
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet; route through logging instead
        logger.debug("http: " + fmt, *args)

    def _respond(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/healthz":
            self._respond(200, {"status": "ok"})
        else:
            self._respond(404, {"error": f"no such route {self.path!r}"})

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        # refuse oversized bodies before buffering them
        if length > self.runtime.broker.max_message_bytes:
            self._respond(413, {"error": "body exceeds the 1 MiB message cap"})
            return
        body = self.rfile.read(length) if length else b""
        headers = {k.lower(): v for k, v in self.headers.items()}
        status, payload = self.runtime.http_ingress(self.path, body, headers)
        self._respond(status, payload)


class IngressServer:
    def __init__(self, runtime: FunctionRuntime, host: str = "127.0.0.1", port: int = 0):
        self._runtime = runtime
        self._host = host
        self._port = port
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        handler = type("BoundHandler", (_Handler,), {"runtime": self._runtime})
        try:
            self._server = ThreadingHTTPServer((self._host, self._port), handler)
        except OSError as e:
            raise PortInUse(f"cannot bind {self._host}:{self._port}: {e}") from e
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        if self._server is None:
            raise RuntimeError("server not started")
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self._host}:{self.port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
