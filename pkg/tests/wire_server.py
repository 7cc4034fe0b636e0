"""In-process HTTP server exposing a TableModel over the logits wire protocol.

Test infrastructure for the remote-backend client: real sockets, real JSON,
plus switches to inject failures (5xx bursts, garbage bodies).
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from cotdecode.backends import TableModel


class TableWireServer:
    def __init__(self, model: TableModel, max_context: int = 4096):
        self.model = model
        self.max_context = max_context
        self.fail_next = 0          # respond 500 to this many requests
        self.garbage_next = 0       # respond with unparseable bodies
        self.fail_after: int | None = None  # permanent outage past N requests
        self.request_count = 0
        self._lock = threading.Lock()

        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _send(self, status: int, payload: dict | str):
                body = payload if isinstance(payload, str) else json.dumps(payload)
                data = body.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def _intercept(self) -> bool:
                with server._lock:
                    server.request_count += 1
                    if server.fail_after is not None and server.request_count > server.fail_after:
                        self._send(500, {"error": "injected outage"})
                        return True
                    if server.fail_next > 0:
                        server.fail_next -= 1
                        self._send(500, {"error": "injected failure"})
                        return True
                    if server.garbage_next > 0:
                        server.garbage_next -= 1
                        self._send(200, "this is not json {")
                        return True
                return False

            def do_GET(self):
                if self._intercept():
                    return
                if self.path == "/v1/model_info":
                    self._send(
                        200,
                        {
                            "name": "table",
                            "vocab_size": server.model.vocab_size,
                            "eos_id": server.model.eos_id,
                            "max_context": server.max_context,
                        },
                    )
                else:
                    self._send(404, {"error": "unknown endpoint"})

            def do_POST(self):
                if self._intercept():
                    return
                length = int(self.headers.get("Content-Length", "0"))
                try:
                    request = json.loads(self.rfile.read(length))
                except json.JSONDecodeError:
                    self._send(400, {"error": "invalid JSON"})
                    return
                try:
                    if self.path == "/v1/tokenize":
                        ids = server.model.tokenize(request["text"])
                        self._send(
                            200,
                            {
                                "token_ids": ids,
                                "token_texts": [server.model.token_text(i) for i in ids],
                            },
                        )
                    elif self.path == "/v1/detokenize":
                        self._send(200, {"text": server.model.detokenize(request["token_ids"])})
                    elif self.path == "/v1/next_token":
                        context = request["context_token_ids"]
                        if len(context) > server.max_context:
                            self._send(400, {"error": "context_overflow"})
                            return
                        dist = server.model.next_token_distribution(context, request["top_n"])
                        self._send(
                            200,
                            {
                                "entries": [
                                    {"id": e.id, "text": e.text, "prob": e.prob}
                                    for e in dist.entries
                                ],
                                "truncated_mass": dist.truncated_mass,
                                "eos_id": server.model.eos_id,
                            },
                        )
                    else:
                        self._send(404, {"error": "unknown endpoint"})
                except (KeyError, TypeError):
                    self._send(400, {"error": "malformed request"})
                except ValueError as exc:
                    self._send(400, {"error": str(exc)})

        self._httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def __enter__(self) -> "TableWireServer":
        self._thread.start()
        return self

    def __exit__(self, *exc_info):
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)
