from __future__ import annotations

import json
import logging
import threading
import time
from collections.abc import Callable
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

import requests

from .errors import EndpointError

logger = logging.getLogger(__name__)

JsonHandler = Callable[[dict[str, Any]], dict[str, Any]]


class JsonEndpoint:
    """
    A JSON-over-HTTP client: POST a JSON object, receive a JSON object. Transport failures are retried up to
    `try_max_times` before an EndpointError is raised.
    """

    def __init__(self, url: str, timeout: float = 30.0, try_max_times: int = 3, retry_sleep: float = 0.5) -> None:
        """
        :param url: The endpoint URL
        :param timeout: Per-request timeout in seconds
        :param try_max_times: The number of attempts before giving up
        :param retry_sleep: Seconds to wait between attempts
        """
        if not url:
            raise EndpointError("An endpoint URL is required for a remote backend")
        self.url: str = url
        self.timeout: float = timeout
        self.try_max_times: int = max(1, try_max_times)
        self.retry_sleep: float = retry_sleep

    def post(self, payload: dict[str, Any]) -> dict[str, Any]:
        last_error: Exception | None = None
        for attempt in range(1, self.try_max_times + 1):
            try:
                response = requests.post(
                    self.url,
                    json=payload,
                    headers={"Content-Type": "application/json"},
                    timeout=self.timeout,
                )
                response.raise_for_status()
                reply = response.json()
            except (requests.RequestException, ValueError) as error:
                last_error = error
                logger.info("Request to %s failed (attempt %d/%d): %s", self.url, attempt, self.try_max_times, error)
                if attempt < self.try_max_times:
                    time.sleep(self.retry_sleep)
                continue
            if not isinstance(reply, dict):
                raise EndpointError(f"{self.url} answered with a JSON {type(reply).__name__}, expected an object")
            return reply
        raise EndpointError(f"Request to {self.url} failed after {self.try_max_times} attempts: {last_error}")


class MockEndpointServer:
    """
    An in-process HTTP server answering every POST with `handler(request_json)`. Used to exercise remote clients
    without a live service; use it as a context manager.
    """

    def __init__(self, handler: JsonHandler, host: str = "127.0.0.1", port: int = 0) -> None:
        """
        :param handler: Maps the decoded request object to the reply object
        :param host: The interface to bind
        :param port: The port to bind, 0 for any free port
        """
        self.handler: JsonHandler = handler
        self.requests_seen: list[dict[str, Any]] = []
        outer = self

        class _Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:
                length = int(self.headers.get("Content-Length", 0))
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                    outer.requests_seen.append(payload)
                    body = json.dumps(outer.handler(payload)).encode("utf-8")
                    status = 200
                except Exception as error:
                    body = json.dumps({"error": str(error)}).encode("utf-8")
                    status = 500
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, format: str, *args: Any) -> None:
                logger.debug("mock endpoint: " + format, *args)

        self.server: ThreadingHTTPServer = ThreadingHTTPServer((host, port), _Handler)
        self.thread: threading.Thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/"

    def __enter__(self) -> MockEndpointServer:
        self.thread.start()
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)
