"""Discovery API as JSON-RPC 2.0 over HTTP POST ``/rpc``, plus a client.

Methods: ``discovery.register``, ``renew``, ``deregister``, ``find``,
``find_key``, ``find_server`` and ``list``. Records travel in the JSON shape
of :func:`griddisc.model.record_to_json`.
"""

from __future__ import annotations

import http.client
import json
import logging
import socket
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import urlsplit

from griddisc.errors import DiscoveryError
from griddisc.model import QueryFilter, lease_to_json, now_micros, record_to_json
from griddisc.registry import Registry

logger = logging.getLogger(__name__)

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603

RPC_PATH = "/rpc"


class InvalidParams(Exception):
    pass


def _str(params: dict, key: str, required: bool = True) -> Optional[str]:
    value = params.get(key)
    if value is None:
        if required:
            raise InvalidParams(f"missing parameter {key!r}")
        return None
    if not isinstance(value, str):
        raise InvalidParams(f"parameter {key!r} must be a string")
    return value


def _int(params: dict, key: str, default: Optional[int] = None) -> int:
    value = params.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidParams(f"parameter {key!r} must be an integer")
    return value


def _records(records) -> list:
    return [record_to_json(r) for r in records]


class Dispatcher:
    """Maps method names onto registry calls. Transport-independent."""

    def __init__(self, registry: Registry, clock: Callable[[], int] = now_micros, default_lease_secs: int = 3600):
        self.registry = registry
        self.clock = clock
        self.default_lease_secs = default_lease_secs
        self.methods: dict[str, Callable[[dict], Any]] = {
            "discovery.register": self.register,
            "discovery.renew": self.renew,
            "discovery.deregister": self.deregister,
            "discovery.find": self.find,
            "discovery.find_key": self.find_key,
            "discovery.find_server": self.find_server,
            "discovery.list": self.list,
        }

    def register(self, p: dict):
        methods = p.get("methods", [])
        attributes = p.get("attributes", {})
        if not isinstance(methods, list):
            raise InvalidParams("methods must be a list")
        if not isinstance(attributes, dict):
            raise InvalidParams("attributes must be an object")
        record = self.registry.register(
            _str(p, "name"),
            _str(p, "server_url"),
            methods,
            attributes,
            lease_secs=_int(p, "lease_secs", self.default_lease_secs),
            now=self.clock(),
        )
        return record_to_json(record)

    def renew(self, p: dict):
        return lease_to_json(self.registry.renew(_str(p, "service_id"), _int(p, "lease_secs", self.default_lease_secs), self.clock()))

    def deregister(self, p: dict):
        self.registry.deregister(_str(p, "service_id"), self.clock())
        return {"ok": True}

    def find(self, p: dict):
        required = p.get("required_attrs") or {}
        if not isinstance(required, dict):
            raise InvalidParams("required_attrs must be an object")
        for key, value in required.items():
            if value is not None and not isinstance(value, str):
                raise InvalidParams(f"required_attrs[{key!r}] must be a string or null")
        query = QueryFilter(
            name_pattern=_str(p, "name_pattern", required=False),
            server_url=_str(p, "server_url", required=False),
            required_attrs=tuple(sorted(required.items())),
        )
        return _records(self.registry.find(query, self.clock()))

    def find_key(self, p: dict):
        return _records(self.registry.find_key(_str(p, "key"), _str(p, "value", required=False), now=self.clock()))

    def find_server(self, p: dict):
        return _records(self.registry.find_server(_str(p, "server_url"), self.clock()))

    def list(self, p: dict):
        return _records(self.registry.list_live(self.clock()))

    def handle_body(self, body: bytes) -> Optional[dict]:
        """Process one request body; returns the response object (None for notifications)."""
        try:
            request = json.loads(body)
        except (ValueError, UnicodeDecodeError) as exc:
            return _error(None, PARSE_ERROR, f"parse error: {exc}")
        if not isinstance(request, dict) or not isinstance(request.get("method"), str):
            return _error(request.get("id") if isinstance(request, dict) else None, INVALID_REQUEST, "invalid request")
        req_id = request.get("id")
        notification = "id" not in request
        response = self.dispatch(request["method"], request.get("params", {}), req_id)
        return None if notification else response

    def dispatch(self, method: str, params: Any, req_id: Any = None) -> dict:
        handler = self.methods.get(method)
        if handler is None:
            return _error(req_id, METHOD_NOT_FOUND, f"method not found: {method}")
        if params is None:
            params = {}
        if not isinstance(params, dict):
            return _error(req_id, INVALID_PARAMS, "params must be an object")
        try:
            result = handler(params)
        except InvalidParams as exc:
            return _error(req_id, INVALID_PARAMS, str(exc))
        except DiscoveryError as exc:
            return _error(req_id, exc.rpc_code, f"{type(exc).__name__}: {exc}")
        except Exception as exc:
            logger.exception("internal error in %s", method)
            return _error(req_id, INTERNAL_ERROR, f"internal error: {exc}")
        return {"jsonrpc": "2.0", "id": req_id, "result": result}


def _error(req_id, code: int, message: str) -> dict:
    return {"jsonrpc": "2.0", "id": req_id, "error": {"code": code, "message": message}}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out in separate writes
    disable_nagle_algorithm = True
    server: "_HTTPServer"

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _reply(self, status: int, body: bytes = b""):
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        if urlsplit(self.path).path != RPC_PATH:
            self._reply(404, b'{"error": "not found"}')
            return
        # the reply is part of the call, so stop() waits for it too
        with self.server.track():
            response = self.server.dispatcher.handle_body(body)
            if response is None:
                self._reply(204)
            else:
                self._reply(200, json.dumps(response, separators=(",", ":")).encode())


class _HTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128

    def __init__(self, address, dispatcher: Dispatcher):
        super().__init__(address, _Handler)
        self.dispatcher = dispatcher
        self.connections: set[socket.socket] = set()
        self._inflight = 0
        self._cond = threading.Condition()

    def process_request(self, request, client_address):
        with self._cond:
            self.connections.add(request)
        super().process_request(request, client_address)

    def shutdown_request(self, request):
        with self._cond:
            self.connections.discard(request)
        super().shutdown_request(request)

    def track(self):
        server = self

        class _Tracker:
            def __enter__(self):
                with server._cond:
                    server._inflight += 1

            def __exit__(self, *exc):
                with server._cond:
                    server._inflight -= 1
                    server._cond.notify_all()

        return _Tracker()

    def drain(self, timeout: float) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._inflight == 0, timeout)


class RpcServer:
    """A running HTTP endpoint. ``stop()`` drains in-flight calls before closing."""

    def __init__(self, bind: tuple[str, int], registry: Registry, clock: Callable[[], int] = now_micros, default_lease_secs: int = 3600):
        self.dispatcher = Dispatcher(registry, clock, default_lease_secs)
        self.httpd = _HTTPServer(bind, self.dispatcher)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}{RPC_PATH}"

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.1}, name="rpc-server", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float = 5.0) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join(timeout)
        if not self.httpd.drain(timeout):
            logger.warning("rpc server stopped with calls still in flight")
        with self.httpd._cond:
            idle = list(self.httpd.connections)
        for conn in idle:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        self.httpd.server_close()


def serve(bind: tuple[str, int], registry: Registry, **kwargs) -> RpcServer:
    """Bind and start serving. Raises OSError when the address cannot be bound."""
    return RpcServer(bind, registry, **kwargs).start()


# -- client -------------------------------------------------------------------


class ClientError(Exception):
    pass


class RpcTimeout(ClientError):
    pass


class ConnectFailure(ClientError):
    pass


class ProtocolError(ClientError):
    pass


class RpcError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


@dataclass
class RpcResponse:
    result: Any = None
    error: Optional[RpcError] = None
    # request sent to response parsed, connection setup excluded when warm
    latency_micros: int = 0

    @property
    def ok(self) -> bool:
        return self.error is None

    def unwrap(self) -> Any:
        if self.error is not None:
            raise self.error
        return self.result


def _split_endpoint(endpoint) -> tuple[str, int, str]:
    if isinstance(endpoint, tuple):
        return endpoint[0], int(endpoint[1]), RPC_PATH
    parts = urlsplit(endpoint if "://" in endpoint else f"http://{endpoint}")
    return parts.hostname, parts.port or 80, parts.path or RPC_PATH


class RpcClient:
    """JSON-RPC client with one persistent connection per thread."""

    def __init__(self, endpoint, timeout: float = 10.0):
        self.host, self.port, self.path = _split_endpoint(endpoint)
        self.timeout = timeout
        self._local = threading.local()
        self._ids = iter(range(1, 1 << 62))
        self._id_lock = threading.Lock()

    def _connection(self) -> tuple[http.client.HTTPConnection, bool]:
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            return conn, True
        conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
        try:
            conn.connect()
        except socket.timeout as exc:
            raise RpcTimeout(f"connect to {self.host}:{self.port} timed out") from exc
        except OSError as exc:
            raise ConnectFailure(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._local.conn = conn
        return conn, False

    def _drop(self):
        conn = getattr(self._local, "conn", None)
        if conn is not None:
            conn.close()
            self._local.conn = None

    def connect(self) -> None:
        """Open this thread's connection ahead of time so later calls exclude setup."""
        self._connection()

    def call_raw(self, method: str, params: Optional[dict] = None, timeout: Optional[float] = None) -> RpcResponse:
        with self._id_lock:
            req_id = next(self._ids)
        body = json.dumps({"jsonrpc": "2.0", "id": req_id, "method": method, "params": params or {}}).encode()
        for attempt in (0, 1):
            conn, reused = self._connection()
            if timeout is not None:
                conn.sock.settimeout(timeout)
            start = time.perf_counter_ns()
            try:
                conn.request("POST", self.path, body, {"Content-Type": "application/json"})
                response = conn.getresponse()
                payload = response.read()
            except socket.timeout as exc:
                self._drop()
                raise RpcTimeout(f"{method} timed out") from exc
            except (http.client.RemoteDisconnected, ConnectionResetError, BrokenPipeError) as exc:
                self._drop()
                if reused and attempt == 0:
                    continue
                raise ConnectFailure(f"connection lost during {method}: {exc}") from exc
            except (OSError, http.client.HTTPException) as exc:
                self._drop()
                raise ProtocolError(f"{method} failed: {exc}") from exc
            finally:
                if timeout is not None and getattr(self._local, "conn", None) is conn:
                    conn.sock.settimeout(self.timeout)
            if response.status != 200:
                raise ProtocolError(f"HTTP {response.status} from {self.host}:{self.port}")
            try:
                message = json.loads(payload)
            except ValueError as exc:
                raise ProtocolError(f"unparseable response: {exc}") from exc
            latency = (time.perf_counter_ns() - start) // 1000
            if not isinstance(message, dict) or ("result" in message) == ("error" in message):
                raise ProtocolError("response must carry exactly one of result/error")
            if "error" in message:
                err = message["error"]
                return RpcResponse(error=RpcError(err.get("code", 0), err.get("message", "")), latency_micros=latency)
            return RpcResponse(result=message["result"], latency_micros=latency)
        raise AssertionError("unreachable")

    def call(self, method: str, params: Optional[dict] = None) -> Any:
        return self.call_raw(method, params).unwrap()

    def register(self, name: str, server_url: str, methods=(), attributes=None, lease_secs: Optional[int] = None) -> dict:
        params = {"name": name, "server_url": server_url, "methods": list(methods), "attributes": dict(attributes or {})}
        if lease_secs is not None:
            params["lease_secs"] = lease_secs
        return self.call("discovery.register", params)

    def find(self, **query) -> list:
        return self.call("discovery.find", query)

    def list(self) -> list:
        return self.call("discovery.list")

    def close(self) -> None:
        self._drop()


def client_call(endpoint, method: str, params: Optional[dict] = None, timeout: float = 10.0) -> RpcResponse:
    """One-shot call on a fresh connection."""
    client = RpcClient(endpoint, timeout)
    try:
        return client.call_raw(method, params)
    finally:
        client.close()
