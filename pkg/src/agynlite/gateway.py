"""Single ingress: HTTP API, credential authentication, authz enforcement.

Every request is authenticated before any handler runs: either a user
bearer token from the static users table, or an overlay identity
credential in `X-Agyn-Identity-Token`. Any client-supplied
`X-Agyn-Identity` header is stripped; the value propagated downstream is
always the authenticated principal. Authorization is consulted per route;
denied requests produce 403 with no side effects.

Responses are JSON; errors are {code, message}. The live feed at
GET /events/stream is server-sent events
(`event: <topic>\\ndata: <json>\\n\\n`).
"""

from __future__ import annotations

import json
import mimetypes
import os
import queue
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

from .authz import Authz, DepthExceeded, RelationTuple, SchemaViolation
from .identity import Identity, IdentityProvider, InvalidCredential
from .orchestrator import Orchestrator, UnknownInstance, WrongState
from .registry import (
    AgentDefinition,
    AgentNotFound,
    Registry,
    ValidationError,
)
from .threads import ThreadNotFound, ThreadService

IDENTITY_TOKEN_HEADER = "X-Agyn-Identity-Token"
IDENTITY_HEADER = "X-Agyn-Identity"

SSE_TOPICS = ("instance.state", "thread.message", "config.applied")


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _unauthorized(msg: str) -> ApiError:
    return ApiError(401, "unauthenticated", msg)


def _forbidden(msg: str) -> ApiError:
    return ApiError(403, "forbidden", msg)


def _not_found(msg: str) -> ApiError:
    return ApiError(404, "not_found", msg)


def _bad_request(msg: str) -> ApiError:
    return ApiError(400, "bad_request", msg)


@dataclass
class Principal:
    kind: str  # "user" | "identity"
    subject: str  # authz subject: "user:alice" or "agent:<id>" for workloads
    propagated_id: str  # value of the internal X-Agyn-Identity header
    admin: bool = False
    identity: Optional[Identity] = None


class Gateway:
    """Routing + enforcement core, independent of the HTTP server shell."""

    def __init__(
        self,
        threads: ThreadService,
        registry: Registry,
        orchestrator: Orchestrator,
        identity: IdentityProvider,
        authz: Authz,
        bus,
        users: dict,
        console_dir: Optional[str] = None,
    ):
        self._threads = threads
        self._registry = registry
        self._orch = orchestrator
        self._identity = identity
        self._authz = authz
        self._bus = bus
        self._users = users  # token -> {"user": "user:alice", "admin": bool}
        self._console_dir = console_dir
        self.downstream_recorder: Optional[Callable[[str, str], None]] = None

    # -- authentication ---------------------------------------------------

    def authenticate(self, headers: dict) -> Principal:
        token = headers.get(IDENTITY_TOKEN_HEADER)
        if token:
            try:
                ident = self._identity.verify(token)
            except InvalidCredential as e:
                raise _unauthorized(str(e))
            if ident.identity_class == "ephemeral-workload":
                subject = f"agent:{ident.attributes.get('agent_id', '')}"
            else:
                subject = f"service:{ident.subject}"
            return Principal(
                kind="identity",
                subject=subject,
                propagated_id=ident.identity_id,
                identity=ident,
            )
        auth = headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            entry = self._users.get(auth[len("Bearer ") :])
            if entry is not None:
                return Principal(
                    kind="user",
                    subject=entry["user"],
                    propagated_id=entry["user"],
                    admin=bool(entry.get("admin")),
                )
        raise _unauthorized("missing or invalid credentials")

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, method: str, path: str, headers: dict, body: bytes):
        """Returns (status, json-serializable response)."""
        principal = self.authenticate(headers)
        doc = None
        if body:
            try:
                doc = json.loads(body)
            except json.JSONDecodeError:
                raise _bad_request("request body is not valid JSON")

        routes = [
            ("POST", r"^/threads$", self._post_threads),
            ("GET", r"^/threads$", self._get_threads),
            ("GET", r"^/threads/([^/]+)/messages$", self._get_messages),
            ("POST", r"^/threads/([^/]+)/messages$", self._post_message),
            ("PUT", r"^/agents/([^/]+)$", self._put_agent),
            ("DELETE", r"^/agents/([^/]+)$", self._delete_agent),
            ("GET", r"^/agents$", self._get_agents),
            ("GET", r"^/instances$", self._get_instances),
            ("POST", r"^/instances/([^/]+)/keepalive$", self._keepalive),
            ("POST", r"^/secrets$", self._post_secret),
            ("GET", r"^/secrets$", self._get_secrets),
            ("POST", r"^/dial/([^/]+)$", self._dial),
            ("POST", r"^/tuples$", self._post_tuple),
            ("DELETE", r"^/tuples$", self._delete_tuple),
            ("GET", r"^/tuples$", self._get_tuples),
            ("POST", r"^/check$", self._check),
            ("POST", r"^/policies$", self._post_policy),
            ("DELETE", r"^/policies/([^/]+)$", self._delete_policy),
            ("GET", r"^/policies$", self._get_policies),
            ("GET", r"^/identities$", self._get_identities),
        ]
        for m, pattern, fn in routes:
            if m != method:
                continue
            match = re.match(pattern, path)
            if match:
                return fn(principal, doc, *match.groups())
        raise _not_found(f"{method} {path}")

    def _record(self, route: str, principal: Principal) -> None:
        # the internal call chain always carries the authenticated principal
        if self.downstream_recorder is not None:
            self.downstream_recorder(route, principal.propagated_id)

    def _require(self, principal: Principal, obj: str, permission: str) -> None:
        if principal.admin:
            return
        try:
            if not self._authz.check(obj, permission, principal.subject):
                raise _forbidden(f"{principal.subject} lacks {permission} on {obj}")
        except (SchemaViolation, DepthExceeded) as e:
            raise _forbidden(str(e))

    def _require_admin(self, principal: Principal) -> None:
        if not principal.admin:
            raise _forbidden("admin token required")

    # -- thread routes ----------------------------------------------------

    def _post_threads(self, principal: Principal, doc, *_):
        if not doc or "agent_id" not in doc:
            raise _bad_request("agent_id required")
        agent_id = doc["agent_id"]
        try:
            self._registry.get_definition(agent_id)
        except AgentNotFound:
            raise _not_found(f"agent {agent_id}")
        self._require(principal, f"agent:{agent_id}", "create_thread")
        self._record("threads.create", principal)
        thread_id = self._threads.create_thread(agent_id, principal.subject)
        self._authz.grant_defaults_on_thread_create(thread_id, principal.subject, agent_id)
        return 200, {"thread_id": thread_id, "agent_id": agent_id}

    def _get_threads(self, principal: Principal, doc, *_):
        self._record("threads.list", principal)
        out = []
        for t in self._threads.list_threads():
            if principal.admin or self._authz.check(
                f"thread:{t['thread_id']}", "read", principal.subject
            ):
                out.append(t)
        return 200, {"threads": out}

    def _get_messages(self, principal: Principal, doc, thread_id):
        try:
            self._threads.get_thread(thread_id)
        except ThreadNotFound:
            raise _not_found(f"thread {thread_id}")
        self._require(principal, f"thread:{thread_id}", "read")
        self._record("threads.messages", principal)
        return 200, {"messages": self._threads.list_messages(thread_id)}

    def _post_message(self, principal: Principal, doc, thread_id):
        if not doc or "text" not in doc:
            raise _bad_request("text required")
        try:
            self._threads.get_thread(thread_id)
        except ThreadNotFound:
            raise _not_found(f"thread {thread_id}")
        self._require(principal, f"thread:{thread_id}", "post")
        self._record("threads.post", principal)
        msg = self._threads.post_message(thread_id, principal.subject, doc["text"])
        return 200, {"message": msg}

    # -- agent routes -----------------------------------------------------

    def _put_agent(self, principal: Principal, doc, agent_id):
        if not doc:
            raise _bad_request("definition document required")
        doc = dict(doc)
        doc["agent_id"] = agent_id
        try:
            definition = AgentDefinition.from_doc(doc)
        except (KeyError, TypeError) as e:
            raise _bad_request(f"malformed definition: {e}")
        exists = True
        try:
            self._registry.get_definition(agent_id)
        except AgentNotFound:
            exists = False
        if exists:
            self._require(principal, f"agent:{agent_id}", "configure")
        elif principal.kind != "user" and not principal.admin:
            raise _forbidden("only users may create agents")
        self._record("agents.put", principal)
        try:
            revision = self._registry.put_definition(definition)
        except ValidationError as e:
            raise _bad_request(str(e))
        if not exists and principal.kind == "user":
            self._authz.write_tuple(
                RelationTuple(f"agent:{agent_id}", "owner", principal.subject)
            )
        return 200, {"agent_id": agent_id, "revision": revision}

    def _delete_agent(self, principal: Principal, doc, agent_id):
        try:
            self._registry.get_definition(agent_id)
        except AgentNotFound:
            raise _not_found(f"agent {agent_id}")
        self._require(principal, f"agent:{agent_id}", "delete")
        self._record("agents.delete", principal)
        self._registry.delete_definition(agent_id)
        return 200, {"agent_id": agent_id, "deleted": True}

    def _get_agents(self, principal: Principal, doc, *_):
        self._record("agents.list", principal)
        return 200, {"agents": [d.to_doc() for d in self._registry.list_agents()]}

    # -- instance routes --------------------------------------------------

    def _get_instances(self, principal: Principal, doc, *_):
        self._record("instances.list", principal)
        return 200, {"instances": [i.to_doc() for i in self._orch.list_instances()]}

    def _keepalive(self, principal: Principal, doc, instance_id):
        if (
            principal.kind != "identity"
            or principal.identity is None
            or principal.identity.identity_class != "ephemeral-workload"
            or principal.identity.subject != instance_id
        ):
            raise _forbidden("keep-alive only from the instance's own identity")
        self._record("instances.keepalive", principal)
        try:
            self._orch.record_keepalive(instance_id)
        except UnknownInstance:
            raise _not_found(f"instance {instance_id}")
        except WrongState as e:
            raise ApiError(409, "wrong_state", str(e))
        return 200, {"ack": True}

    # -- secret routes ----------------------------------------------------

    def _post_secret(self, principal: Principal, doc, *_):
        if not doc or "name" not in doc or "value" not in doc:
            raise _bad_request("name and value required")
        owning_agent = doc.get("agent_id")
        if not principal.admin:
            if not owning_agent:
                raise _forbidden("admin token required for unscoped secrets")
            self._require(principal, f"agent:{owning_agent}", "configure")
        self._record("secrets.put", principal)
        self._registry.put_secret(doc["name"], doc["value"].encode())
        return 200, {"name": doc["name"], "stored": True}

    def _get_secrets(self, principal: Principal, doc, *_):
        self._record("secrets.list", principal)
        # names and keyed fingerprints only: the secret read API does not exist
        return 200, {"secrets": self._registry.list_secrets()}

    # -- dial (ABAC test surface) ----------------------------------------

    def _dial(self, principal: Principal, doc, service):
        if principal.kind != "identity" or principal.identity is None:
            raise _forbidden("dial requires an overlay identity")
        self._record("dial", principal)
        allowed = self._authz.dial_allowed(principal.identity.attributes, service)
        if not allowed:
            raise _forbidden(f"no dial policy permits {service}")
        return 200, {"allowed": True, "service": service}

    # -- authz admin routes ----------------------------------------------

    def _post_tuple(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        if not doc or "tuple" not in doc:
            raise _bad_request("tuple required")
        self._record("tuples.write", principal)
        try:
            self._authz.write_tuple(RelationTuple.parse(doc["tuple"]))
        except SchemaViolation as e:
            raise _bad_request(str(e))
        return 200, {"written": doc["tuple"]}

    def _delete_tuple(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        if not doc or "tuple" not in doc:
            raise _bad_request("tuple required")
        self._record("tuples.delete", principal)
        try:
            self._authz.delete_tuple(RelationTuple.parse(doc["tuple"]))
        except SchemaViolation as e:
            raise _bad_request(str(e))
        return 200, {"deleted": doc["tuple"]}

    def _get_tuples(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        self._record("tuples.list", principal)
        return 200, {"tuples": [t.text() for t in self._authz.list_tuples()]}

    def _check(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        if not doc:
            raise _bad_request("object, relation, subject required")
        self._record("tuples.check", principal)
        try:
            ok = self._authz.check(doc["object"], doc["relation"], doc["subject"])
        except (SchemaViolation, DepthExceeded) as e:
            raise _bad_request(str(e))
        return 200, {"allowed": ok}

    def _post_policy(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        if not doc or "policy_id" not in doc:
            raise _bad_request("policy_id, selector, services required")
        self._record("policies.put", principal)
        self._authz.put_policy(
            doc["policy_id"], doc.get("selector", {}), doc.get("services", [])
        )
        return 200, {"policy_id": doc["policy_id"]}

    def _delete_policy(self, principal: Principal, doc, policy_id):
        self._require_admin(principal)
        self._record("policies.delete", principal)
        self._authz.delete_policy(policy_id)
        return 200, {"policy_id": policy_id, "deleted": True}

    def _get_policies(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        self._record("policies.list", principal)
        return 200, {"policies": self._authz.list_policies()}

    def _get_identities(self, principal: Principal, doc, *_):
        self._require_admin(principal)
        self._record("identities.list", principal)
        out = []
        for i in self._identity.list_identities():
            doc_i = i.to_doc()
            doc_i.pop("credential", None)  # credentials never leave the provider
            out.append(doc_i)
        return 200, {"identities": out}


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # headers and body go out as separate writes; without TCP_NODELAY that
    # pattern trips Nagle + delayed-ACK stalls of ~40 ms per response
    disable_nagle_algorithm = True
    gateway: Gateway = None  # set by server factory

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _headers_dict(self) -> dict:
        headers = {k: v for k, v in self.headers.items()}
        headers.pop(IDENTITY_HEADER, None)  # never trust a client-sent identity
        return headers

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send_json(self, status: int, payload) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _handle(self, method: str) -> None:
        path = self.path.split("?", 1)[0]
        if method == "GET" and path == "/events/stream":
            return self._sse()
        if method == "GET" and (path == "/console" or path.startswith("/console/")):
            return self._console(path)
        try:
            status, payload = self.gateway.dispatch(
                method, path, self._headers_dict(), self._read_body()
            )
            self._send_json(status, payload)
        except ApiError as e:
            self._send_json(e.status, {"code": e.code, "message": e.message})
        except Exception as e:  # noqa: BLE001 - last-resort 500
            self._send_json(500, {"code": "internal", "message": str(e)})

    def _sse(self) -> None:
        try:
            self.gateway.authenticate(self._headers_dict())
        except ApiError as e:
            self._send_json(e.status, {"code": e.code, "message": e.message})
            return
        q: "queue.Queue" = queue.Queue()

        def watcher(ev):
            if ev.topic in SSE_TOPICS:
                q.put(ev)

        self.gateway._bus.add_watcher(watcher)
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            self.end_headers()
            while True:
                try:
                    ev = q.get(timeout=1.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                frame = f"event: {ev.topic}\ndata: {json.dumps(ev.payload)}\n\n"
                self.wfile.write(frame.encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.gateway._bus.remove_watcher(watcher)

    def _console(self, path: str) -> None:
        root = self.gateway._console_dir
        if root is None:
            self._send_json(404, {"code": "not_found", "message": "console not built"})
            return
        root = os.path.abspath(root)
        rel = path[len("/console") :].lstrip("/") or "index.html"
        full = os.path.normpath(os.path.join(root, rel))
        if not full.startswith(root) or not os.path.isfile(full):
            full = os.path.join(root, "index.html")
            if not os.path.isfile(full):
                self._send_json(404, {"code": "not_found", "message": rel})
                return
        ctype = mimetypes.guess_type(full)[0] or "application/octet-stream"
        with open(full, "rb") as f:
            data = f.read()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def do_PUT(self):
        self._handle("PUT")

    def do_DELETE(self):
        self._handle("DELETE")


class GatewayServer:
    """Threaded HTTP shell around a Gateway."""

    def __init__(self, gateway: Gateway, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"gateway": gateway})
        # a spawn burst opens many connections at once; the default listen
        # backlog of 5 drops the excess with connection resets
        server_cls = type(
            "QueuedServer", (ThreadingHTTPServer,), {"request_queue_size": 128}
        )
        self._httpd = server_cls((host, port), handler)
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, daemon=True, name="gateway-http"
        )
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=2)
