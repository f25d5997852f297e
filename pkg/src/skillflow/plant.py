"""Simulated machine modules that run the skill state machine on timers.

Each module hosts the skills of one machine. Acting states last a
configured number of milliseconds and then advance on their own; outputs
are computed from expressions over the set parameters at the moment
Complete is entered. Injected failures turn the next pass through a
chosen acting phase into a self-commanded Stop or Abort.

A module is reachable two ways: directly as Python objects (in-process
transport, used by embedded tests) and over a small JSON-over-HTTP wire
with long-poll event delivery. Both paths funnel into the same
per-skill lock, so commands, timer expirations, parameter writes and
injections are serialized per skill while separate skills run in
parallel.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping
from urllib.parse import parse_qs, urlsplit

from .datatypes import coerce
from .errors import (
    ConfigError,
    DatatypeMismatch,
    IllegalTransition,
    ParseError,
    PortUnavailable,
    SkillflowError,
    UnknownParameter,
    UnknownSkill,
    WrongState,
)
from .expressions import (
    Expression,
    ValueExpr,
    evaluate_value,
    free_variables,
    parse_value_expr,
)
from .registry import MachineDescriptor, Skill, parse_machine_fragment, skill_json
from .statemachine import (
    ACTING_STATES,
    SkillState,
    TransitionCommand,
    apply_command,
    complete_acting,
)

DEFAULT_ACTING_MS = 50.0

# ceiling on one wire long-poll, so parked handler threads always drain
MAX_POLL_MS = 60_000.0

INJECTION_MODES = ("stop", "abort")

# Which acting state each injection phase names.
PHASE_STATES = {
    "duringStarting": SkillState.STARTING,
    "duringExecute": SkillState.EXECUTE,
    "duringCompleting": SkillState.COMPLETING,
}

_INJECTION_COMMANDS = {
    "stop": TransitionCommand.STOP,
    "abort": TransitionCommand.ABORT,
}


@dataclass(frozen=True)
class FailureInjection:
    mode: str  # "stop" | "abort"
    phase: str  # "duringStarting" | "duringExecute" | "duringCompleting"
    one_shot: bool = True

    def __post_init__(self) -> None:
        if self.mode not in INJECTION_MODES:
            raise ValueError(f"unknown injection mode: {self.mode!r}")
        if self.phase not in PHASE_STATES:
            raise ValueError(f"unknown injection phase: {self.phase!r}")

    @classmethod
    def from_json(cls, obj: object) -> "FailureInjection":
        if not isinstance(obj, dict):
            raise ValueError("injection must be a JSON object")
        one_shot = obj.get("oneShot", True)
        if not isinstance(one_shot, bool):
            raise ValueError("oneShot must be a boolean")
        return cls(str(obj.get("mode")), str(obj.get("phase")), one_shot)


@dataclass(frozen=True)
class SkillBehavior:
    """How one simulated skill behaves: pacing plus computed outputs."""

    acting_durations: Mapping[SkillState, float] = field(default_factory=dict)  # ms
    output_programs: Mapping[str, ValueExpr] = field(default_factory=dict)

    def duration_seconds(self, state: SkillState) -> float:
        return self.acting_durations.get(state, DEFAULT_ACTING_MS) / 1000.0


DEFAULT_BEHAVIOR = SkillBehavior()


@dataclass(frozen=True)
class VirtualModuleConfig:
    machine: MachineDescriptor
    skills: tuple[Skill, ...]
    behaviors: Mapping[str, SkillBehavior] = field(default_factory=dict)  # by skill iri
    port: int | None = None  # None: in-process only; 0: pick a free port
    host: str = "127.0.0.1"


@dataclass(frozen=True)
class SkillRuntimeRecord:
    """A point-in-time snapshot of one skill."""

    skill_id: str
    state: SkillState
    parameters: Mapping[str, object]
    outputs: Mapping[str, object]
    event_seq: int


@dataclass(frozen=True)
class RunRecord:
    """One Start command and the parameters it was issued with."""

    started_seq: int
    parameters: Mapping[str, object]


class SkillRuntime:
    """One simulated skill: its state, its timers, and its event log.

    Timers carry the sequence number they were scheduled at and give up
    silently when a command got there first.
    """

    def __init__(self, skill: Skill, behavior: SkillBehavior) -> None:
        self.skill = skill
        self.behavior = behavior
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._state = SkillState.IDLE
        self._seq = 0
        self._events: list[tuple[int, SkillState]] = [(0, SkillState.IDLE)]
        self._parameters: dict[str, object] = {}
        self._outputs: dict[str, object] = {}
        self._injection: FailureInjection | None = None
        self._timer: threading.Timer | None = None
        self._closed = False
        self.runs: list[RunRecord] = []

    # -- queries -----------------------------------------------------------

    def snapshot(self) -> SkillRuntimeRecord:
        with self._lock:
            return SkillRuntimeRecord(
                skill_id=self.skill.interface.skill_id,
                state=self._state,
                parameters=dict(self._parameters),
                outputs=dict(self._outputs),
                event_seq=self._seq,
            )

    def events(self) -> list[tuple[int, SkillState]]:
        with self._lock:
            return list(self._events)

    def poll_events(
        self, since_seq: int, timeout_s: float = 0.0
    ) -> list[tuple[int, SkillState]]:
        """All state changes with seq > since_seq, waiting up to timeout_s."""
        deadline = time.monotonic() + max(timeout_s, 0.0)
        with self._changed:
            while True:
                pending = [e for e in self._events if e[0] > since_seq]
                if pending:
                    return pending
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed:
                    return []
                self._changed.wait(remaining)

    # -- commands ------------------------------------------------------------

    def set_parameters(self, values: Mapping[str, object]) -> None:
        declared = {v.name: v for v in self.skill.parameters}
        with self._lock:
            if self._state is not SkillState.IDLE:
                raise WrongState(self._state.value)
            staged: dict[str, object] = {}
            for name, value in values.items():
                variable = declared.get(name)
                if variable is None:
                    raise UnknownParameter(name)
                staged[name] = coerce(value, variable.datatype)
            self._parameters.update(staged)

    def command(self, cmd: TransitionCommand) -> SkillState:
        """Apply a command and return the acting state it moved into."""
        with self._lock:
            target = apply_command(self._state, cmd)
            if self._timer is not None:
                self._timer.cancel()
                self._timer = None
            if self._state is SkillState.COMPLETE:
                self._outputs.clear()  # outputs live only in Complete
            if cmd is TransitionCommand.START:
                self.runs.append(RunRecord(self._seq + 1, dict(self._parameters)))
            if cmd is TransitionCommand.RESET:
                self._parameters.clear()
                self._outputs.clear()
            self._enter(target)
            return target

    def inject(self, injection: FailureInjection) -> None:
        with self._lock:
            self._injection = injection

    def close(self) -> None:
        with self._lock:
            self._closed = True
            if self._timer is not None:
                self._timer.cancel()
                self._timer = None
            self._changed.notify_all()

    # -- internals ------------------------------------------------------------

    def _enter(self, state: SkillState) -> None:
        # lock held
        self._state = state
        self._seq += 1
        self._events.append((self._seq, state))
        self._changed.notify_all()
        if state in ACTING_STATES and not self._closed:
            timer = threading.Timer(
                self.behavior.duration_seconds(state),
                self._auto_advance,
                (self._seq,),
            )
            timer.daemon = True
            self._timer = timer
            timer.start()

    def _auto_advance(self, scheduled_seq: int) -> None:
        with self._lock:
            if self._closed or self._seq != scheduled_seq:
                return  # a command intervened; this timer is stale
            injection = self._injection
            if injection is not None and PHASE_STATES[injection.phase] is self._state:
                if injection.one_shot:
                    self._injection = None
                command = _INJECTION_COMMANDS[injection.mode]
                self._enter(apply_command(self._state, command))
                return
            following = complete_acting(self._state)
            if following is SkillState.COMPLETE:
                try:
                    self._outputs = self._compute_outputs()
                except SkillflowError:
                    # a failed output program behaves like a machine fault
                    self._enter(apply_command(self._state, TransitionCommand.ABORT))
                    return
            self._enter(following)

    def _compute_outputs(self) -> dict[str, object]:
        declared = {v.name: v for v in self.skill.results}
        outputs: dict[str, object] = {}
        for name, program in self.behavior.output_programs.items():
            value = evaluate_value(program, self._parameters)  # type: ignore[arg-type]
            outputs[name] = coerce(value, declared[name].datatype)
        return outputs


class VirtualModule:
    """The skills of one machine, addressed by their wire skill id."""

    def __init__(self, config: VirtualModuleConfig) -> None:
        self.machine = config.machine
        self.skills = config.skills
        self._runtimes: dict[str, SkillRuntime] = {}
        for skill in config.skills:
            behavior = config.behaviors.get(skill.iri, DEFAULT_BEHAVIOR)
            self._runtimes[skill.interface.skill_id] = SkillRuntime(skill, behavior)

    def runtime(self, skill_id: str) -> SkillRuntime:
        try:
            return self._runtimes[skill_id]
        except KeyError:
            raise UnknownSkill(skill_id) from None

    def skill_ids(self) -> list[str]:
        return sorted(self._runtimes)

    def set_parameters(self, skill_id: str, values: Mapping[str, object]) -> None:
        self.runtime(skill_id).set_parameters(values)

    def invoke_transition(self, skill_id: str, cmd: TransitionCommand) -> SkillState:
        return self.runtime(skill_id).command(cmd)

    def get_state(self, skill_id: str) -> SkillRuntimeRecord:
        return self.runtime(skill_id).snapshot()

    def poll_events(
        self, skill_id: str, since_seq: int, timeout_s: float = 0.0
    ) -> list[tuple[int, SkillState]]:
        return self.runtime(skill_id).poll_events(since_seq, timeout_s)

    def inject_failure(self, skill_id: str, injection: FailureInjection) -> None:
        self.runtime(skill_id).inject(injection)

    def close(self) -> None:
        for runtime in self._runtimes.values():
            runtime.close()


# --- configuration ------------------------------------------------------------


def _validate_behavior(behavior: SkillBehavior, skill: Skill) -> None:
    for state, ms in behavior.acting_durations.items():
        if state not in ACTING_STATES:
            raise ConfigError(f"{state.value} is not an acting state")
        if ms < 0:
            raise ConfigError(f"negative duration for {state.value}")
    parameters = {v.name for v in skill.parameters}
    results = {v.name for v in skill.results}
    for name, program in behavior.output_programs.items():
        if name not in results:
            raise ConfigError(f"output program for undeclared result: {name}")
        if isinstance(program, Expression):
            unknown = free_variables(program.ast) - parameters
            if unknown:
                raise ConfigError(
                    f"output program {name} references unknown parameter: "
                    + ", ".join(sorted(unknown))
                )


def validate_module_config(config: VirtualModuleConfig) -> None:
    declared = {s.iri: s for s in config.skills}
    if set(declared) != set(config.machine.skill_iris):
        raise ConfigError("machine skill list does not match the skills given")
    seen: set[str] = set()
    for skill in config.skills:
        if skill.interface.skill_id in seen:
            raise ConfigError(f"duplicate wire skill id: {skill.interface.skill_id}")
        seen.add(skill.interface.skill_id)
    for iri, behavior in config.behaviors.items():
        skill = declared.get(iri)
        if skill is None:
            raise ConfigError(f"behavior for unknown skill: {iri}")
        _validate_behavior(behavior, skill)


def _parse_behavior(obj: dict) -> SkillBehavior:
    durations: dict[SkillState, float] = {}
    raw_durations = obj.get("actingDurations", {})
    if not isinstance(raw_durations, dict):
        raise ConfigError("actingDurations must be an object")
    for name, ms in raw_durations.items():
        try:
            state = SkillState.parse(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(ms, bool) or not isinstance(ms, (int, float)):
            raise ConfigError(f"duration for {name} must be a number")
        durations[state] = float(ms)
    programs: dict[str, ValueExpr] = {}
    raw_programs = obj.get("outputPrograms", {})
    if not isinstance(raw_programs, dict):
        raise ConfigError("outputPrograms must be an object")
    for name, source in raw_programs.items():
        if not isinstance(source, str):
            raise ConfigError(f"output program {name} must be a string")
        try:
            programs[name] = parse_value_expr(source)
        except SkillflowError as exc:
            raise ConfigError(f"output program {name}: {exc}") from None
    return SkillBehavior(durations, programs)


def load_module_config(document: bytes | str) -> VirtualModuleConfig:
    """Decode and validate a module config document.

    Shape: {"machine": <registry machine fragment>, "behaviors":
    {"<skill iri>": {"actingDurations": {"Execute": 100, ...},
    "outputPrograms": {"<result>": "${...}"}}}, "port": 8093?, "host": ...?}
    """
    try:
        text = document.decode("utf-8") if isinstance(document, bytes) else document
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ParseError(str(err)) from err
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    machine_obj = obj.get("machine")
    if not isinstance(machine_obj, dict):
        raise ConfigError("config needs a machine fragment under 'machine'")
    try:
        machine, skills = parse_machine_fragment(machine_obj)
    except (KeyError, ValueError, TypeError, SkillflowError) as exc:
        raise ConfigError(f"bad machine fragment: {exc!r}") from None
    raw_behaviors = obj.get("behaviors", {})
    if not isinstance(raw_behaviors, dict):
        raise ConfigError("behaviors must be an object")
    behaviors: dict[str, SkillBehavior] = {}
    for iri, behavior_obj in raw_behaviors.items():
        if not isinstance(behavior_obj, dict):
            raise ConfigError(f"behavior for {iri} must be an object")
        behaviors[iri] = _parse_behavior(behavior_obj)
    port = obj.get("port")
    if port is not None and (isinstance(port, bool) or not isinstance(port, int)):
        raise ConfigError("port must be an integer")
    host = obj.get("host", "127.0.0.1")
    if not isinstance(host, str):
        raise ConfigError("host must be a string")
    config = VirtualModuleConfig(machine, tuple(skills), behaviors, port, host)
    validate_module_config(config)
    return config


def machine_fragment_json(machine: MachineDescriptor, skills: tuple[Skill, ...]) -> dict:
    """The registry document fragment a module can be registered under."""
    return {
        "iri": machine.iri,
        "name": machine.name,
        "skills": [skill_json(s) for s in skills],
    }


# --- wire protocol ------------------------------------------------------------


class _PlantServer(ThreadingHTTPServer):
    daemon_threads = True
    module: VirtualModule


class _PlantHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: _PlantServer

    def log_message(self, fmt: str, *args: object) -> None:
        pass

    # -- plumbing -------------------------------------------------------------

    def _send_json(self, status: int, payload: object) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_no_content(self) -> None:
        self.send_response(204)
        self.end_headers()

    def _fail(self, status: int, error: str, message: str) -> None:
        self._send_json(status, {"error": error, "message": message})

    def _read_json(self) -> object:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise ValueError("empty request body")
        return json.loads(raw)

    def _guarded(self, route) -> None:
        try:
            route()
        except (BrokenPipeError, ConnectionResetError):
            pass
        except Exception as exc:  # keep the connection usable
            try:
                self._fail(500, "Internal", repr(exc))
            except OSError:
                pass

    # -- routes ------------------------------------------------------------

    def do_PUT(self) -> None:
        self._guarded(self._route_put)

    def do_POST(self) -> None:
        self._guarded(self._route_post)

    def do_GET(self) -> None:
        self._guarded(self._route_get)

    def _route_put(self) -> None:
        parts = [p for p in urlsplit(self.path).path.split("/") if p]
        if len(parts) == 3 and parts[0] == "skills" and parts[2] == "parameters":
            self._put_parameters(parts[1])
        else:
            self._fail(404, "NotFound", self.path)

    def _route_post(self) -> None:
        parts = [p for p in urlsplit(self.path).path.split("/") if p]
        if len(parts) == 4 and parts[0] == "skills" and parts[2] == "transitions":
            self._post_transition(parts[1], parts[3])
        elif len(parts) == 3 and parts[0] == "skills" and parts[2] == "inject":
            self._post_inject(parts[1])
        else:
            self._fail(404, "NotFound", self.path)

    def _route_get(self) -> None:
        split = urlsplit(self.path)
        parts = [p for p in split.path.split("/") if p]
        if len(parts) == 3 and parts[0] == "skills" and parts[2] == "state":
            self._get_state(parts[1])
        elif len(parts) == 3 and parts[0] == "skills" and parts[2] == "events":
            self._get_events(parts[1], parse_qs(split.query))
        else:
            self._fail(404, "NotFound", self.path)

    def _put_parameters(self, skill_id: str) -> None:
        try:
            values = self._read_json()
        except ValueError as exc:
            self._fail(400, "BadRequest", f"body must be a JSON object: {exc}")
            return
        if not isinstance(values, dict):
            self._fail(400, "BadRequest", "body must be a JSON object")
            return
        try:
            self.server.module.set_parameters(skill_id, values)
        except UnknownSkill as exc:
            self._fail(404, "UnknownSkill", str(exc))
        except WrongState as exc:
            self._fail(409, "WrongState", str(exc))
        except (UnknownParameter, DatatypeMismatch) as exc:
            self._fail(400, type(exc).__name__, str(exc))
        else:
            self._send_no_content()

    def _post_transition(self, skill_id: str, command_text: str) -> None:
        try:
            cmd = TransitionCommand.parse(command_text)
        except ValueError as exc:
            self._fail(404, "NotFound", str(exc))
            return
        try:
            state = self.server.module.invoke_transition(skill_id, cmd)
        except UnknownSkill as exc:
            self._fail(404, "UnknownSkill", str(exc))
        except IllegalTransition as exc:
            self._fail(409, "IllegalTransition", str(exc))
        else:
            self._send_json(202, {"state": state.value})

    def _post_inject(self, skill_id: str) -> None:
        try:
            injection = FailureInjection.from_json(self._read_json())
        except ValueError as exc:
            self._fail(400, "BadRequest", str(exc))
            return
        try:
            self.server.module.inject_failure(skill_id, injection)
        except UnknownSkill as exc:
            self._fail(404, "UnknownSkill", str(exc))
        else:
            self._send_no_content()

    def _get_state(self, skill_id: str) -> None:
        try:
            record = self.server.module.get_state(skill_id)
        except UnknownSkill as exc:
            self._fail(404, "UnknownSkill", str(exc))
            return
        self._send_json(
            200,
            {
                "state": record.state.value,
                "seq": record.event_seq,
                "outputs": dict(record.outputs),
                "parameters": dict(record.parameters),
            },
        )

    def _get_events(self, skill_id: str, query: Mapping[str, list[str]]) -> None:
        try:
            since = int(query.get("since", ["0"])[0])
            timeout_ms = float(query.get("timeoutMs", ["0"])[0])
        except ValueError:
            self._fail(400, "BadRequest", "since and timeoutMs must be numbers")
            return
        timeout_ms = min(timeout_ms, MAX_POLL_MS)
        try:
            events = self.server.module.poll_events(skill_id, since, timeout_ms / 1000.0)
        except UnknownSkill as exc:
            self._fail(404, "UnknownSkill", str(exc))
            return
        self._send_json(
            200, [{"seq": seq, "state": state.value} for seq, state in events]
        )


class ModuleHandle:
    """A spawned module plus, when one was asked for, its wire endpoint."""

    def __init__(
        self,
        module: VirtualModule,
        server: _PlantServer | None = None,
        thread: threading.Thread | None = None,
    ) -> None:
        self.module = module
        self._server = server
        self._thread = thread

    @property
    def port(self) -> int | None:
        return None if self._server is None else self._server.server_address[1]

    @property
    def base_url(self) -> str | None:
        if self._server is None:
            return None
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def close(self) -> None:
        self.module.close()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self) -> "ModuleHandle":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def spawn_module(config: VirtualModuleConfig) -> ModuleHandle:
    """Bring a module up with every skill in Idle."""
    validate_module_config(config)
    module = VirtualModule(config)
    if config.port is None:
        return ModuleHandle(module)
    try:
        server = _PlantServer((config.host, config.port), _PlantHandler)
    except OSError as exc:
        raise PortUnavailable(
            f"cannot bind {config.host}:{config.port}: {exc}"
        ) from None
    server.module = module
    thread = threading.Thread(
        target=server.serve_forever,
        daemon=True,
        name=f"plant:{config.machine.name}",
    )
    thread.start()
    return ModuleHandle(module, server, thread)
