"""HTTP service wrapping the engine, registry, and resolution flow.

State that must survive a restart lives as flat files under the data
directory: uploaded process XML verbatim next to a JSON index, the
registry document, the notification journal, and per-instance event
logs.  Every mutation writes its files before touching memory, via
temp-file-plus-rename, so a failed request changes nothing.  Resolution
sessions are deliberately ephemeral; a lost session costs one re-resolve.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Mapping
from urllib.parse import parse_qs, unquote, urlsplit

from .bpmn import parse_process
from .config import ServiceConfig
from .connectors import (
    HttpSkillConnector,
    InProcessConnector,
    RoutingConnector,
    SkillConnector,
)
from .engine import Engine, InstanceView, event_json
from .errors import (
    AlreadyEnded,
    AmbiguousCapability,
    ConfigError,
    DuplicateIri,
    IllegalTransition,
    NoOpenWorkItem,
    NoSkillAvailable,
    NotACandidate,
    ParseError,
    PlanIncomplete,
    PlanMismatch,
    SessionComplete,
    SkillflowError,
    UnknownDeployment,
    UnknownInstance,
    UnknownIri,
    UnknownPendingTask,
    UnknownSession,
    UnknownSkill,
    ValidationFailed,
    WrongState,
)
from .notifications import (
    FanoutSink,
    FileSink,
    NotificationRecord,
    WebhookSink,
    now_iso,
    record_json,
)
from .plant import VirtualModule
from .processes import (
    CapabilityTask,
    EndEvent,
    ExclusiveGateway,
    ParallelGateway,
    ProcessDefinition,
    SendTask,
    StartEvent,
    TimerCatchEvent,
    UserTask,
    validate_process,
)
from .registry import (
    Registry,
    capability_json,
    dump_registry,
    load_registry,
    machine_json,
    parse_machine_fragment,
)
from .resolution import (
    BindingPlan,
    PendingDecisions,
    SelectionPolicy,
    decide,
    plan_to_json,
    resolve,
)

log = logging.getLogger(__name__)

MAX_POLL_MS = 60_000


def _write_atomic(path: Path, data: bytes) -> None:
    """All-or-nothing file write; readers never see a partial file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


@dataclass(frozen=True)
class DeploymentRecord:
    deployment_id: str
    definition: ProcessDefinition
    xml: bytes
    name: str
    deployed_at: str


@dataclass
class ResolutionSession:
    session_id: str
    deployment_id: str
    policy: SelectionPolicy
    state: BindingPlan | PendingDecisions


_NODE_KINDS = {
    StartEvent: "start",
    EndEvent: "end",
    UserTask: "userTask",
    SendTask: "sendTask",
    CapabilityTask: "capabilityTask",
    ExclusiveGateway: "exclusiveGateway",
    ParallelGateway: "parallelGateway",
    TimerCatchEvent: "timer",
}


class Service:
    """Everything behind the HTTP surface, usable directly in tests."""

    def __init__(
        self,
        config: ServiceConfig,
        registry: Registry | None = None,
        connector: SkillConnector | None = None,
        poll_timeout_s: float = 1.0,
        recovery_timeout_s: float = 10.0,
    ) -> None:
        self.config = config
        self.data_dir = Path(config.data_dir)
        self._deploy_dir = self.data_dir / "deployments"
        self._deploy_dir.mkdir(parents=True, exist_ok=True)
        self._registry_path = self.data_dir / "registry.json"

        if self._registry_path.exists():
            self.registry = load_registry(self._registry_path.read_bytes())
        elif registry is not None:
            self.registry = registry
            self._persist_registry()
        else:
            self.registry = Registry()

        self.file_sink = FileSink(self.data_dir / "notifications.jsonl")
        sinks = [self.file_sink]
        if config.webhook_url:
            sinks.append(WebhookSink(config.webhook_url))
        if connector is None:
            connector = RoutingConnector()
        self.connector = connector
        self.engine = Engine(
            self.registry,
            connector,
            sink=FanoutSink(sinks),
            history_dir=self.data_dir / "instances",
            poll_timeout_s=poll_timeout_s,
            recovery_timeout_s=recovery_timeout_s,
        )

        self._lock = threading.Lock()
        self._deployments: dict[str, DeploymentRecord] = {}
        self._sessions: dict[str, ResolutionSession] = {}
        self._instance_deployments: dict[str, str] = {}
        self._load_deployments()

    def close(self) -> None:
        self.engine.shutdown()
        close = getattr(self.connector, "close", None)
        if close is not None:
            close()

    def attach_module(self, module: VirtualModule) -> None:
        """Route the module's skills in-process (tests, demo plants)."""
        if isinstance(self.connector, RoutingConnector):
            self.connector.in_process.attach(module)
        elif isinstance(self.connector, InProcessConnector):
            self.connector.attach(module)
        else:
            raise ConfigError("connector cannot host in-process modules")

    # --- deployments ---------------------------------------------------------

    def _index_path(self) -> Path:
        return self._deploy_dir / "index.json"

    def _load_deployments(self) -> None:
        if not self._index_path().exists():
            return
        try:
            doc = json.loads(self._index_path().read_bytes())
            entries = doc["deployments"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"deployment index is corrupt: {exc}") from exc
        for entry in entries:
            xml = (self._deploy_dir / entry["file"]).read_bytes()
            record = DeploymentRecord(
                deployment_id=entry["deploymentId"],
                definition=parse_process(xml),
                xml=xml,
                name=entry["name"],
                deployed_at=entry["deployedAt"],
            )
            self._deployments[record.deployment_id] = record

    def _persist_deployments(self, records: list[DeploymentRecord]) -> None:
        entries = [
            {
                "deploymentId": r.deployment_id,
                "processId": r.definition.id,
                "name": r.name,
                "deployedAt": r.deployed_at,
                "file": f"{r.deployment_id}.bpmn",
            }
            for r in records
        ]
        payload = json.dumps({"deployments": entries}, indent=2).encode()
        _write_atomic(self._index_path(), payload)

    def deploy(self, xml: bytes) -> DeploymentRecord:
        definition = parse_process(xml)
        diagnostics = validate_process(definition)
        if diagnostics:
            raise ValidationFailed(diagnostics)
        with self._lock:
            deployment_id = "p-" + uuid.uuid4().hex[:12]
            record = DeploymentRecord(
                deployment_id=deployment_id,
                definition=definition,
                xml=bytes(xml),
                name=definition.name or definition.id,
                deployed_at=now_iso(),
            )
            # files first: a failed write must leave the index and memory alone
            _write_atomic(self._deploy_dir / f"{deployment_id}.bpmn", record.xml)
            self._persist_deployments(list(self._deployments.values()) + [record])
            self._deployments[deployment_id] = record
        return record

    def deployments(self) -> list[DeploymentRecord]:
        with self._lock:
            return list(self._deployments.values())

    def deployment(self, deployment_id: str) -> DeploymentRecord:
        with self._lock:
            record = self._deployments.get(deployment_id)
        if record is None:
            raise UnknownDeployment(deployment_id)
        return record

    # --- resolution sessions --------------------------------------------------

    def create_resolution(
        self, deployment_id: str, policy: str | None = None
    ) -> ResolutionSession:
        record = self.deployment(deployment_id)
        try:
            parsed = (
                SelectionPolicy.parse(policy) if policy else SelectionPolicy.AUTO_STRICT
            )
        except ValueError as exc:
            raise ParseError(str(exc)) from exc
        state = resolve(record.definition, self.registry, parsed)
        session = ResolutionSession(
            session_id="r-" + uuid.uuid4().hex[:12],
            deployment_id=deployment_id,
            policy=parsed,
            state=state,
        )
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def resolution(self, session_id: str) -> ResolutionSession:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(session_id)
        return session

    def decide_resolution(
        self, session_id: str, task_id: str, skill_iri: str
    ) -> ResolutionSession:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise UnknownSession(session_id)
            if isinstance(session.state, BindingPlan):
                raise SessionComplete(session_id)
            session.state = decide(session.state, task_id, skill_iri)
        return session

    # --- instances -------------------------------------------------------------

    def start_instance(
        self, session_id: str, initial_vars: Mapping[str, object] | None = None
    ) -> str:
        session = self.resolution(session_id)
        if not isinstance(session.state, BindingPlan):
            raise PlanIncomplete(session_id)
        record = self.deployment(session.deployment_id)
        instance_id = self.engine.start_instance(
            record.definition, session.state, initial_vars
        )
        with self._lock:
            self._instance_deployments[instance_id] = session.deployment_id
        return instance_id

    def instance_deployment(self, instance_id: str) -> str | None:
        with self._lock:
            return self._instance_deployments.get(instance_id)

    # --- registry ---------------------------------------------------------------

    def _persist_registry(self) -> None:
        _write_atomic(self._registry_path, dump_registry(self.registry))

    def register_machine(self, fragment: dict) -> str:
        try:
            machine, skills = parse_machine_fragment(fragment)
        except SkillflowError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"bad machine fragment: {exc!r}") from exc
        with self._lock:
            self.registry.register_machine(machine, skills)
            try:
                self._persist_registry()
            except Exception:
                self.registry.unregister_machine(machine.iri)
                raise
        return machine.iri

    def unregister_machine(self, machine_iri: str) -> None:
        with self._lock:
            machine = self.registry.machine(machine_iri)
            skills = [
                s for s in self.registry.skills() if s.machine_iri == machine_iri
            ]
            self.registry.unregister_machine(machine_iri)
            try:
                self._persist_registry()
            except Exception:
                self.registry.register_machine(machine, skills)
                raise

    # --- notifications ------------------------------------------------------------

    def notifications(self) -> list[NotificationRecord]:
        return self.file_sink.records()

    # --- JSON views ----------------------------------------------------------------

    def deployment_view(self, record: DeploymentRecord, detail: bool = False) -> dict:
        doc = {
            "deploymentId": record.deployment_id,
            "processId": record.definition.id,
            "name": record.name,
            "deployedAt": record.deployed_at,
            "capabilityTasks": [t.id for t in record.definition.capability_tasks()],
        }
        if detail:
            doc["nodes"] = [
                {
                    "id": node.id,
                    "kind": _NODE_KINDS.get(type(node), "boundary"),
                    "name": node.name,
                }
                for node in record.definition.nodes
            ]
        return doc

    def session_view(self, session: ResolutionSession) -> dict:
        record = self.deployment(session.deployment_id)
        state = session.state
        doc = {
            "sessionId": session.session_id,
            "deploymentId": session.deployment_id,
            "processId": record.definition.id,
            "policy": session.policy.value,
            "complete": isinstance(state, BindingPlan),
        }
        if isinstance(state, BindingPlan):
            doc["plan"] = plan_to_json(state)
            doc["pending"] = []
        else:
            doc["plan"] = plan_to_json(
                BindingPlan(state.definition_id, dict(state.decided))
            )
            doc["pending"] = [
                self._choice_view(record.definition, choice)
                for choice in state.pending
            ]
        return doc

    def _choice_view(self, definition: ProcessDefinition, choice) -> dict:
        candidates = []
        for iri in choice.candidates:
            skill = choice.candidate_skills[iri]
            try:
                machine_name = self.registry.machine(skill.machine_iri).name
            except UnknownIri:
                machine_name = ""
            candidates.append(
                {
                    "skill": iri,
                    "skillName": skill.name,
                    "machine": skill.machine_iri,
                    "machineName": machine_name,
                }
            )
        return {
            "taskId": choice.task_id,
            "taskName": definition.node(choice.task_id).name,
            "capability": choice.capability_iri,
            "candidates": candidates,
        }

    def instance_view(self, view: InstanceView, detail: bool = False) -> dict:
        deployment_id = self.instance_deployment(view.instance_id)
        doc = {
            "instanceId": view.instance_id,
            "deploymentId": deployment_id,
            "processId": view.definition_id,
            "status": view.status.value,
            "eventCount": view.event_count,
        }
        if detail:
            definition = None
            if deployment_id is not None:
                definition = self.deployment(deployment_id).definition
            doc["tokens"] = dict(view.tokens)
            doc["variables"] = dict(view.variables)
            doc["skillStates"] = dict(view.skill_states)
            doc["workItems"] = [
                {
                    "taskId": item.task_id,
                    "taskName": (
                        definition.node(item.task_id).name if definition else ""
                    ),
                    "fields": [
                        {"name": f.name, "datatype": f.datatype.value}
                        for f in item.form_fields
                    ],
                    "createdAt": item.created_at,
                }
                for item in view.work_items
            ]
        return doc


# --- HTTP layer ---------------------------------------------------------------------

_NOT_FOUND_ERRORS = (
    UnknownIri,
    UnknownInstance,
    UnknownSkill,
    UnknownPendingTask,
    UnknownDeployment,
    UnknownSession,
)
_CONFLICT_ERRORS = (
    NoSkillAvailable,
    AmbiguousCapability,
    NotACandidate,
    NoOpenWorkItem,
    AlreadyEnded,
    PlanMismatch,
    SessionComplete,
    PlanIncomplete,
    DuplicateIri,
    WrongState,
    IllegalTransition,
)


def error_payload(exc: SkillflowError) -> dict:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ValidationFailed):
        doc["diagnostics"] = [
            {"code": d.code, "subject": d.subject, "message": d.message}
            for d in exc.diagnostics
        ]
    if isinstance(exc, NoSkillAvailable):
        doc["taskId"] = exc.task_id
        doc["capability"] = exc.capability_iri
    if isinstance(exc, AmbiguousCapability):
        doc["taskId"] = exc.task_id
        doc["candidates"] = list(exc.candidates)
    return doc


def error_status(exc: SkillflowError) -> int:
    if isinstance(exc, _NOT_FOUND_ERRORS):
        return 404
    if isinstance(exc, _CONFLICT_ERRORS):
        return 409
    return 400


_ROUTES: list[tuple[str, re.Pattern, str]] = [
    ("GET", re.compile(r"^/health$"), "ep_health"),
    ("POST", re.compile(r"^/processes$"), "ep_deploy"),
    ("GET", re.compile(r"^/processes$"), "ep_list_deployments"),
    ("GET", re.compile(r"^/processes/([^/]+)$"), "ep_get_deployment"),
    ("GET", re.compile(r"^/processes/([^/]+)/xml$"), "ep_get_xml"),
    ("POST", re.compile(r"^/processes/([^/]+)/resolutions$"), "ep_create_resolution"),
    ("GET", re.compile(r"^/resolutions/([^/]+)$"), "ep_get_resolution"),
    ("POST", re.compile(r"^/resolutions/([^/]+)/decisions$"), "ep_decide"),
    ("POST", re.compile(r"^/instances$"), "ep_start_instance"),
    ("GET", re.compile(r"^/instances$"), "ep_list_instances"),
    ("GET", re.compile(r"^/instances/([^/]+)$"), "ep_get_instance"),
    ("GET", re.compile(r"^/instances/([^/]+)/events$"), "ep_get_events"),
    (
        "POST",
        re.compile(r"^/instances/([^/]+)/user-tasks/([^/]+)/complete$"),
        "ep_complete_task",
    ),
    ("POST", re.compile(r"^/instances/([^/]+)/cancel$"), "ep_cancel"),
    ("GET", re.compile(r"^/notifications$"), "ep_notifications"),
    ("GET", re.compile(r"^/registry/capabilities$"), "ep_capabilities"),
    ("GET", re.compile(r"^/registry/machines$"), "ep_list_machines"),
    ("POST", re.compile(r"^/registry/machines$"), "ep_register_machine"),
    ("DELETE", re.compile(r"^/registry/machines/(.+)$"), "ep_unregister_machine"),
]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "ServiceServer"

    # -- plumbing --

    @property
    def service(self) -> Service:
        return self.server.service

    def log_message(self, format: str, *args) -> None:
        log.debug("%s - %s", self.address_string(), format % args)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _json_body(self) -> dict:
        raw = self._read_body()
        if not raw:
            return {}
        try:
            doc = json.loads(raw)
        except ValueError as exc:
            raise ParseError(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ParseError("request body must be a JSON object")
        return doc

    def _send(
        self, status: int, body: bytes = b"", content_type: str = "application/json"
    ) -> None:
        self.send_response(status)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header(
            "Access-Control-Allow-Methods", "GET, POST, PUT, DELETE, OPTIONS"
        )
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        if body:
            self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        if body:
            self.wfile.write(body)

    def _send_json(self, status: int, doc: object) -> None:
        self._send(status, json.dumps(doc).encode())

    def _dispatch(self, method: str) -> None:
        split = urlsplit(self.path)
        path = split.path
        query = {k: v[-1] for k, v in parse_qs(split.query).items()}
        matched_other_method = False
        for route_method, pattern, name in _ROUTES:
            match = pattern.match(path)
            if not match:
                continue
            if route_method != method:
                matched_other_method = True
                continue
            try:
                getattr(self, name)(match, query)
            except SkillflowError as exc:
                self._send_json(error_status(exc), error_payload(exc))
            except Exception:
                log.exception("unhandled error on %s %s", method, path)
                self._send_json(
                    500, {"error": "InternalError", "message": "unexpected failure"}
                )
            return
        if matched_other_method:
            self._send_json(405, {"error": "MethodNotAllowed", "message": method})
        else:
            self._send_json(404, {"error": "NotFound", "message": path})

    def do_GET(self) -> None:
        self._dispatch("GET")

    def do_POST(self) -> None:
        self._dispatch("POST")

    def do_DELETE(self) -> None:
        self._dispatch("DELETE")

    def do_OPTIONS(self) -> None:
        self._send(204)

    # -- endpoints --

    def ep_health(self, match, query) -> None:
        self._send_json(200, {"status": "ok"})

    def ep_deploy(self, match, query) -> None:
        record = self.service.deploy(self._read_body())
        self._send_json(201, self.service.deployment_view(record))

    def ep_list_deployments(self, match, query) -> None:
        views = [self.service.deployment_view(r) for r in self.service.deployments()]
        self._send_json(200, {"deployments": views})

    def ep_get_deployment(self, match, query) -> None:
        record = self.service.deployment(match.group(1))
        self._send_json(200, self.service.deployment_view(record, detail=True))

    def ep_get_xml(self, match, query) -> None:
        record = self.service.deployment(match.group(1))
        self._send(200, record.xml, content_type="application/xml")

    def ep_create_resolution(self, match, query) -> None:
        body = self._json_body()
        session = self.service.create_resolution(match.group(1), body.get("policy"))
        self._send_json(201, self.service.session_view(session))

    def ep_get_resolution(self, match, query) -> None:
        session = self.service.resolution(match.group(1))
        self._send_json(200, self.service.session_view(session))

    def ep_decide(self, match, query) -> None:
        body = self._json_body()
        task_id = body.get("taskId")
        skill_iri = body.get("skillIri")
        if not isinstance(task_id, str) or not isinstance(skill_iri, str):
            raise ParseError("decision needs string taskId and skillIri")
        session = self.service.decide_resolution(match.group(1), task_id, skill_iri)
        self._send_json(200, self.service.session_view(session))

    def ep_start_instance(self, match, query) -> None:
        body = self._json_body()
        session_id = body.get("sessionId")
        if not isinstance(session_id, str):
            raise ParseError("start needs a string sessionId")
        initial = body.get("initialVars") or {}
        if not isinstance(initial, dict):
            raise ParseError("initialVars must be an object")
        instance_id = self.service.start_instance(session_id, initial)
        self._send_json(201, {"instanceId": instance_id})

    def ep_list_instances(self, match, query) -> None:
        views = [
            self.service.instance_view(v) for v in self.service.engine.list_instances()
        ]
        self._send_json(200, {"instances": views})

    def ep_get_instance(self, match, query) -> None:
        view = self.service.engine.snapshot(match.group(1))
        self._send_json(200, self.service.instance_view(view, detail=True))

    def ep_get_events(self, match, query) -> None:
        try:
            since = int(query.get("since", "0"))
            timeout_ms = float(query.get("timeoutMs", "0"))
        except ValueError as exc:
            raise ParseError(f"bad event query: {exc}") from exc
        timeout_ms = min(max(timeout_ms, 0.0), MAX_POLL_MS)
        events = self.service.engine.wait_events(
            match.group(1), since, timeout_ms / 1000.0
        )
        self._send_json(
            200,
            {"events": [event_json(e) for e in events], "next": since + len(events)},
        )

    def ep_complete_task(self, match, query) -> None:
        body = self._json_body()
        values = body.get("values")
        if not isinstance(values, dict):
            raise ParseError("completion needs a values object")
        self.service.engine.complete_user_task(match.group(1), match.group(2), values)
        self._send(204)

    def ep_cancel(self, match, query) -> None:
        self.service.engine.cancel_instance(match.group(1))
        self._send(204)

    def ep_notifications(self, match, query) -> None:
        records = [record_json(r) for r in self.service.notifications()]
        self._send_json(200, {"notifications": records})

    def ep_capabilities(self, match, query) -> None:
        docs = [capability_json(c) for c in self.service.registry.capabilities()]
        self._send_json(200, {"capabilities": docs})

    def ep_list_machines(self, match, query) -> None:
        registry = self.service.registry
        docs = [machine_json(registry, m) for m in registry.machines()]
        self._send_json(200, {"machines": docs})

    def ep_register_machine(self, match, query) -> None:
        iri = self.service.register_machine(self._json_body())
        self._send_json(201, {"machine": iri})

    def ep_unregister_machine(self, match, query) -> None:
        self.service.unregister_machine(unquote(match.group(1)))
        self._send(204)


class ServiceServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: Service) -> None:
        super().__init__(address, _Handler)
        self.service = service


class ServiceHandle:
    """A running service plus its HTTP server, for tests and the CLI."""

    def __init__(self, service: Service, server: ServiceServer) -> None:
        self.service = service
        self.server = server
        self._thread = threading.Thread(
            target=server.serve_forever, name="skillflow-service", daemon=True
        )
        self._thread.start()

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def base_url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self._thread.join(timeout=5)
        self.service.close()

    def __enter__(self) -> "ServiceHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def spawn_service(
    config: ServiceConfig,
    registry: Registry | None = None,
    connector: SkillConnector | None = None,
    poll_timeout_s: float = 1.0,
    recovery_timeout_s: float = 10.0,
) -> ServiceHandle:
    """Start the HTTP service; config.port 0 picks a free port."""
    service = Service(
        config,
        registry=registry,
        connector=connector,
        poll_timeout_s=poll_timeout_s,
        recovery_timeout_s=recovery_timeout_s,
    )
    try:
        server = ServiceServer((config.host, config.port), service)
    except Exception:
        service.close()
        raise
    return ServiceHandle(service, server)
