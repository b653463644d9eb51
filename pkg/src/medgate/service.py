"""Line-delimited JSON-over-TCP transport for the gateway.

One request object per line, one response object per line, connection closed
after the response.  Transport security is assumed to be provided by the
deployment environment; this layer carries application-level controls only.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading

from .config import GatewayConfig
from .gateway import Gateway

MAX_LINE = 64 * 1024 * 1024


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        line = self.rfile.readline(MAX_LINE)
        if not line:
            return
        try:
            request = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            response = {"ok": False, "error": "BadRequest", "message": "request is not valid JSON"}
        else:
            response = self.server.gateway.handle(request)  # type: ignore[attr-defined]
        self.wfile.write(json.dumps(response).encode("utf-8") + b"\n")


class GatewayServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, gateway: Gateway):
        super().__init__((gateway.config.host, gateway.config.port), _Handler)
        self.gateway = gateway

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]


def serve(config: GatewayConfig, master_key: bytes | None = None) -> GatewayServer:
    """Start the service in a background thread; caller owns shutdown()."""
    gateway = Gateway(config, master_key=master_key)
    server = GatewayServer(gateway)
    thread = threading.Thread(target=server.serve_forever, name="medgate-service", daemon=True)
    thread.start()
    return server


class GatewayClient:
    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout

    def request(self, op: str, token: str | None = None, **params) -> dict:
        payload: dict = {"op": op, **params}
        if token:
            payload["token"] = token
        with socket.create_connection((self.host, self.port), timeout=self.timeout) as sock:
            sock.sendall(json.dumps(payload).encode("utf-8") + b"\n")
            chunks = []
            while True:
                chunk = sock.recv(1 << 16)
                if not chunk:
                    break
                chunks.append(chunk)
                if chunk.endswith(b"\n"):
                    break
        return json.loads(b"".join(chunks).decode("utf-8"))
