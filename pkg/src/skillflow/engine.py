"""Token-based executor for resolved processes.

An instance advances in quiescent steps: every external stimulus (start,
user-task completion, observed skill state, timer expiry) is applied
under the instance lock and drives the token game until every remaining
token is parked on something that waits (a user task, a delegated skill,
a timer, or a starved parallel join). Stimuli for one instance are
therefore serialized; distinct instances run in parallel.

Skill delegation happens on worker threads, one per activation. A worker
first acquires the per-skill slot (FIFO, one in-flight invocation per
skill), drives the skill back to Idle if a previous run left it anywhere
else, writes parameters, issues Start, and then feeds every observed
state change back into the instance as a stimulus. The engine reacts to
terminal states: Complete harvests outputs and issues Reset, Stopped and
Aborted become catchable process errors ("SkillStopped"/"SkillAborted",
with Clear acknowledging an abort).

Process error codes are fixed strings: "SkillStopped", "SkillAborted",
"SkillUnreachable", "ParameterConstraint", "UnknownVariable",
"NoFlowEnabled". A boundary error event catches by string equality; a
filterless boundary catches everything; an uncaught error ends the
instance as Faulted.
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from collections import Counter, deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping

from .connectors import SkillConnector
from .datatypes import coerce
from .errors import (
    AlreadyEnded,
    DatatypeMismatch,
    MissingField,
    NoOpenWorkItem,
    PlanMismatch,
    SkillflowError,
    UnknownInstance,
    UnknownParameter,
    UnknownVariable,
    ValidationFailed,
)
from .expressions import evaluate, evaluate_value, render_template
from .notifications import NotificationRecord, NotificationSink, now_iso
from .processes import (
    BoundaryErrorEvent,
    CapabilityTask,
    EndEvent,
    ExclusiveGateway,
    FormField,
    ParallelGateway,
    ProcessDefinition,
    SendTask,
    SequenceFlow,
    StartEvent,
    TimerCatchEvent,
    UserTask,
    structural_problems,
)
from .registry import Registry, Skill, check_constraint
from .resolution import BindingPlan, validate_plan
from .statemachine import ACTING_STATES, SkillState, TransitionCommand

log = logging.getLogger(__name__)

ERROR_SKILL_STOPPED = "SkillStopped"
ERROR_SKILL_ABORTED = "SkillAborted"
ERROR_SKILL_UNREACHABLE = "SkillUnreachable"
ERROR_PARAMETER_CONSTRAINT = "ParameterConstraint"
ERROR_UNKNOWN_VARIABLE = "UnknownVariable"
ERROR_NO_FLOW_ENABLED = "NoFlowEnabled"


class InstanceStatus(Enum):
    RUNNING = "Running"
    WAITING_USER = "WaitingUser"
    COMPLETED = "Completed"
    FAULTED = "Faulted"
    CANCELLED = "Cancelled"

    @classmethod
    def parse(cls, text: str) -> "InstanceStatus":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown instance status: {text!r}")


ENDED_STATUSES = frozenset(
    {InstanceStatus.COMPLETED, InstanceStatus.FAULTED, InstanceStatus.CANCELLED}
)


@dataclass(frozen=True)
class EngineEvent:
    seq: int
    kind: str  # NodeEntered NodeCompleted VariableSet SkillStateObserved
    #           ErrorThrown ErrorCaught InstanceEnded
    payload: Mapping[str, object]


def event_json(event: EngineEvent) -> dict:
    return {"seq": event.seq, "kind": event.kind, "payload": dict(event.payload)}


def event_from_json(obj: dict) -> EngineEvent:
    return EngineEvent(int(obj["seq"]), str(obj["kind"]), dict(obj.get("payload", {})))


@dataclass(frozen=True)
class WorkItem:
    instance_id: str
    task_id: str
    form_fields: tuple[FormField, ...]
    created_at: str


@dataclass(frozen=True)
class DelegationRequest:
    skill_iri: str
    transition: TransitionCommand
    parameter_values: Mapping[str, object]


@dataclass(frozen=True)
class InstanceView:
    instance_id: str
    definition_id: str
    status: InstanceStatus
    tokens: Mapping[str, int]
    variables: Mapping[str, object]
    work_items: tuple[WorkItem, ...]
    skill_states: Mapping[str, str]  # task id -> last observed skill state
    event_count: int


class _SkillWait:
    """Bookkeeping for one in-flight delegation."""

    __slots__ = ("gen", "skill", "request", "cancelled", "start_issued")

    def __init__(self, gen: int, skill: Skill, request: DelegationRequest) -> None:
        self.gen = gen
        self.skill = skill
        self.request = request
        self.cancelled = threading.Event()
        self.start_issued = False


class _TimerWait:
    __slots__ = ("gen", "timer")

    def __init__(self, gen: int, timer: threading.Timer) -> None:
        self.gen = gen
        self.timer = timer


class _FifoSlot:
    """One in-flight invocation per skill, grants strictly in arrival order."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._queue: deque[object] = deque()
        self._busy = False

    def acquire(self) -> None:
        ticket = object()
        with self._cond:
            self._queue.append(ticket)
            while self._busy or self._queue[0] is not ticket:
                self._cond.wait()
            self._queue.popleft()
            self._busy = True

    def release(self) -> None:
        with self._cond:
            self._busy = False
            self._cond.notify_all()


class _Instance:
    def __init__(
        self,
        instance_id: str,
        definition: ProcessDefinition,
        plan: BindingPlan,
        history_path: Path | None,
    ) -> None:
        self.id = instance_id
        self.definition = definition
        self.plan = plan
        self.lock = threading.Lock()
        self.changed = threading.Condition(self.lock)
        self.status = InstanceStatus.RUNNING
        self.tokens: Counter[str] = Counter()
        self.arrivals: dict[str, Counter[str]] = {}
        self.ready: deque[str] = deque()
        self.variables: dict[str, object] = {}
        self.history: list[EngineEvent] = []
        self.work_items: dict[str, WorkItem] = {}
        self.skill_waits: dict[str, _SkillWait] = {}
        self.timer_waits: dict[str, _TimerWait] = {}
        self.last_skill_state: dict[str, str] = {}
        self.next_gen = 1
        self.history_path = history_path

    def take_gen(self) -> int:
        gen = self.next_gen
        self.next_gen += 1
        return gen


class Engine:
    """Runs process instances against a registry and a skill connector."""

    def __init__(
        self,
        registry: Registry,
        connector: SkillConnector,
        sink: NotificationSink | None = None,
        history_dir: str | Path | None = None,
        poll_timeout_s: float = 1.0,
        recovery_timeout_s: float = 10.0,
    ) -> None:
        self._registry = registry
        self._connector = connector
        self._sink = sink
        self._history_dir = Path(history_dir) if history_dir is not None else None
        if self._history_dir is not None:
            self._history_dir.mkdir(parents=True, exist_ok=True)
        self._poll_timeout_s = poll_timeout_s
        self._recovery_timeout_s = recovery_timeout_s
        self._lock = threading.Lock()
        self._instances: dict[str, _Instance] = {}
        self._slots: dict[str, _FifoSlot] = {}
        self._notifications: list[NotificationRecord] = []

    # -- public API -----------------------------------------------------------

    def start_instance(
        self,
        definition: ProcessDefinition,
        plan: BindingPlan,
        initial_vars: Mapping[str, object] | None = None,
        instance_id: str | None = None,
    ) -> str:
        problems = structural_problems(definition)
        if problems:
            raise ValidationFailed(problems)
        if plan.definition_id != definition.id:
            raise PlanMismatch(
                f"plan is for {plan.definition_id!r}, not {definition.id!r}"
            )
        task_ids = {task.id for task in definition.capability_tasks()}
        missing = task_ids - set(plan.bindings)
        extra = set(plan.bindings) - task_ids
        if missing or extra:
            raise PlanMismatch(
                "plan does not cover the definition"
                + (f"; unbound: {sorted(missing)}" if missing else "")
                + (f"; unknown: {sorted(extra)}" if extra else "")
            )
        diagnostics = validate_plan(plan, definition, self._registry)
        if diagnostics:
            raise ValidationFailed(diagnostics)
        for value in (initial_vars or {}).values():
            if not isinstance(value, (bool, int, float, str)):
                raise DatatypeMismatch("integer|real|boolean|string", value)

        if instance_id is None:
            instance_id = "i-" + uuid.uuid4().hex[:12]
        history_path = None
        if self._history_dir is not None:
            history_path = self._history_dir / f"{instance_id}.events.jsonl"
        inst = _Instance(instance_id, definition, plan, history_path)
        with self._lock:
            if instance_id in self._instances:
                raise PlanMismatch(f"instance id already in use: {instance_id}")
            self._instances[instance_id] = inst

        with inst.lock:
            for name, value in (initial_vars or {}).items():
                inst.variables[name] = value
                self._emit(inst, "VariableSet", name=name, value=value)
            start = definition.start_event()
            self._produce(inst, start.id)
            self._drain(inst)
        return instance_id

    def complete_user_task(
        self, instance_id: str, task_id: str, values: Mapping[str, object]
    ) -> None:
        inst = self._instance(instance_id)
        with inst.lock:
            item = inst.work_items.get(task_id)
            if item is None:
                raise NoOpenWorkItem(task_id)
            declared = {f.name for f in item.form_fields}
            for name in values:
                if name not in declared:
                    raise UnknownParameter(name)
            staged: list[tuple[str, object]] = []
            for form_field in item.form_fields:
                if form_field.name not in values:
                    raise MissingField(form_field.name)
                staged.append(
                    (form_field.name, coerce(values[form_field.name], form_field.datatype))
                )
            inst.work_items.pop(task_id)
            for name, value in staged:
                variable = f"{task_id}_{name}"
                inst.variables[variable] = value
                self._emit(inst, "VariableSet", name=variable, value=value)
            self._finish_node(inst, task_id)
            self._drain(inst)

    def cancel_instance(self, instance_id: str) -> None:
        inst = self._instance(instance_id)
        with inst.lock:
            if inst.status in ENDED_STATUSES:
                raise AlreadyEnded(instance_id, inst.status.value)
            self._end(inst, InstanceStatus.CANCELLED)

    def snapshot(self, instance_id: str) -> InstanceView:
        inst = self._instance(instance_id)
        with inst.lock:
            return self._view(inst)

    def list_instances(self) -> list[InstanceView]:
        with self._lock:
            instances = list(self._instances.values())
        views = []
        for inst in instances:
            with inst.lock:
                views.append(self._view(inst))
        return views

    def history(self, instance_id: str) -> list[EngineEvent]:
        inst = self._instance(instance_id)
        with inst.lock:
            return list(inst.history)

    def wait_events(
        self, instance_id: str, since_seq: int = 0, timeout_s: float = 0.0
    ) -> list[EngineEvent]:
        """Events with seq >= since_seq, long-polling up to timeout_s."""
        inst = self._instance(instance_id)
        deadline = time.monotonic() + max(timeout_s, 0.0)
        with inst.changed:
            while True:
                if len(inst.history) > since_seq:
                    return list(inst.history[since_seq:])
                remaining = deadline - time.monotonic()
                if remaining <= 0 or inst.status in ENDED_STATUSES:
                    return []
                inst.changed.wait(remaining)

    def notifications(self) -> list[NotificationRecord]:
        with self._lock:
            return list(self._notifications)

    def shutdown(self) -> None:
        """Cancel whatever is still alive; used by tests and service teardown."""
        with self._lock:
            ids = list(self._instances)
        for instance_id in ids:
            try:
                self.cancel_instance(instance_id)
            except (AlreadyEnded, UnknownInstance):
                pass

    # -- internals: bookkeeping ------------------------------------------------

    def _instance(self, instance_id: str) -> _Instance:
        with self._lock:
            inst = self._instances.get(instance_id)
        if inst is None:
            raise UnknownInstance(instance_id)
        return inst

    def _slot(self, skill_iri: str) -> _FifoSlot:
        with self._lock:
            slot = self._slots.get(skill_iri)
            if slot is None:
                slot = self._slots[skill_iri] = _FifoSlot()
            return slot

    def _view(self, inst: _Instance) -> InstanceView:
        return InstanceView(
            instance_id=inst.id,
            definition_id=inst.definition.id,
            status=inst.status,
            tokens=dict(inst.tokens),
            variables=dict(inst.variables),
            work_items=tuple(inst.work_items.values()),
            skill_states=dict(inst.last_skill_state),
            event_count=len(inst.history),
        )

    def _emit(self, inst: _Instance, kind: str, **payload: object) -> None:
        event = EngineEvent(len(inst.history), kind, payload)
        inst.history.append(event)
        if inst.history_path is not None:
            line = json.dumps(event_json(event), sort_keys=True)
            with inst.history_path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")
        inst.changed.notify_all()

    def _settle(self, inst: _Instance) -> None:
        if inst.status in ENDED_STATUSES:
            return
        inst.status = (
            InstanceStatus.WAITING_USER if inst.work_items else InstanceStatus.RUNNING
        )
        inst.changed.notify_all()

    # -- internals: the token game ----------------------------------------------

    def _produce(self, inst: _Instance, node_id: str) -> None:
        inst.tokens[node_id] += 1
        inst.ready.append(node_id)

    def _consume(self, inst: _Instance, node_id: str) -> None:
        inst.tokens[node_id] -= 1
        if inst.tokens[node_id] <= 0:
            del inst.tokens[node_id]

    def _route(self, inst: _Instance, flow: SequenceFlow) -> None:
        target = inst.definition.node(flow.target_id)
        if isinstance(target, ParallelGateway):
            arrivals = inst.arrivals.setdefault(target.id, Counter())
            arrivals[flow.id] += 1
            inst.tokens[target.id] += 1
            incoming = inst.definition.incoming(target.id)
            while all(arrivals[f.id] >= 1 for f in incoming):
                for f in incoming:
                    arrivals[f.id] -= 1
                inst.tokens[target.id] -= len(incoming) - 1
                inst.ready.append(target.id)
        else:
            self._produce(inst, flow.target_id)

    def _finish_node(self, inst: _Instance, node_id: str, **payload: object) -> None:
        self._emit(inst, "NodeCompleted", node=node_id, **payload)
        self._consume(inst, node_id)
        for flow in inst.definition.outgoing(node_id):
            self._route(inst, flow)

    def _drain(self, inst: _Instance) -> None:
        while inst.ready and inst.status not in ENDED_STATUSES:
            node_id = inst.ready.popleft()
            if inst.tokens.get(node_id, 0) <= 0:
                continue  # activation was cancelled while queued
            self._execute(inst, node_id)
        self._settle(inst)

    def _execute(self, inst: _Instance, node_id: str) -> None:
        node = inst.definition.node(node_id)
        self._emit(inst, "NodeEntered", node=node_id)

        if isinstance(node, StartEvent):
            self._finish_node(inst, node_id)
        elif isinstance(node, EndEvent):
            self._emit(inst, "NodeCompleted", node=node_id)
            self._consume(inst, node_id)
            if sum(inst.tokens.values()) == 0:
                self._end(inst, InstanceStatus.COMPLETED, node=node_id)
        elif isinstance(node, ExclusiveGateway):
            self._execute_exclusive(inst, node)
        elif isinstance(node, ParallelGateway):
            # only ever queued once all arrivals are in
            self._finish_node(inst, node_id)
        elif isinstance(node, UserTask):
            inst.work_items[node_id] = WorkItem(
                instance_id=inst.id,
                task_id=node_id,
                form_fields=node.form_fields,
                created_at=now_iso(),
            )
        elif isinstance(node, SendTask):
            self._execute_send(inst, node)
        elif isinstance(node, CapabilityTask):
            self._begin_delegation(inst, node)
        elif isinstance(node, TimerCatchEvent):
            gen = inst.take_gen()
            timer = threading.Timer(
                node.duration_seconds(), self._on_timer, (inst.id, node_id, gen)
            )
            timer.daemon = True
            inst.timer_waits[node_id] = _TimerWait(gen, timer)
            timer.start()
        else:
            # boundary events are executed from _throw, never from a token
            self._throw(inst, node_id, ERROR_NO_FLOW_ENABLED, "token at boundary event")

    def _execute_exclusive(self, inst: _Instance, node: ExclusiveGateway) -> None:
        chosen: SequenceFlow | None = None
        for flow in inst.definition.outgoing(node.id):
            if flow.id == node.default_flow_id:
                continue
            if flow.condition is None:
                chosen = flow  # an unconditioned flow is an always-true branch
                break
            try:
                value = evaluate(flow.condition.ast, inst.variables)
            except UnknownVariable as exc:
                self._throw(inst, node.id, ERROR_UNKNOWN_VARIABLE, str(exc))
                return
            except SkillflowError as exc:
                self._throw(
                    inst,
                    node.id,
                    ERROR_NO_FLOW_ENABLED,
                    f"condition on {flow.id} failed: {exc}",
                )
                return
            if not isinstance(value, bool):
                self._throw(
                    inst,
                    node.id,
                    ERROR_NO_FLOW_ENABLED,
                    f"condition on {flow.id} is not boolean: {value!r}",
                )
                return
            if value:
                chosen = flow
                break
        if chosen is None and node.default_flow_id is not None:
            chosen = inst.definition.flow(node.default_flow_id)
        if chosen is None:
            self._throw(inst, node.id, ERROR_NO_FLOW_ENABLED, "no outgoing flow enabled")
            return
        self._emit(inst, "NodeCompleted", node=node.id)
        self._consume(inst, node.id)
        self._route(inst, chosen)

    def _execute_send(self, inst: _Instance, node: SendTask) -> None:
        try:
            subject = render_template(node.subject, inst.variables)
            body = render_template(node.body, inst.variables)
        except UnknownVariable as exc:
            self._throw(inst, node.id, ERROR_UNKNOWN_VARIABLE, str(exc))
            return
        except SkillflowError as exc:
            self._throw(inst, node.id, ERROR_UNKNOWN_VARIABLE, f"template failed: {exc}")
            return
        record = NotificationRecord(
            instance_id=inst.id,
            task_id=node.id,
            subject=subject,
            body=body,
            timestamp=now_iso(),
        )
        with self._lock:
            self._notifications.append(record)
        if self._sink is not None:
            try:
                self._sink.deliver(record)
            except Exception as exc:  # sink trouble never blocks the process
                log.warning("notification sink failed: %s", exc)
        self._finish_node(inst, node.id)

    # -- internals: delegation -----------------------------------------------

    def _begin_delegation(self, inst: _Instance, task: CapabilityTask) -> None:
        binding = inst.plan.bindings[task.id]
        try:
            skill = self._registry.skill(binding.skill_iri)
        except SkillflowError as exc:
            self._throw(inst, task.id, ERROR_SKILL_UNREACHABLE, str(exc))
            return

        values: dict[str, object] = {}
        declared = {v.name: v for v in skill.parameters}
        capability = None
        for name, expr in binding.parameter_assignments.items():
            try:
                value = evaluate_value(expr, inst.variables)
            except UnknownVariable as exc:
                self._throw(inst, task.id, ERROR_UNKNOWN_VARIABLE, str(exc))
                return
            except SkillflowError as exc:
                self._throw(inst, task.id, ERROR_UNKNOWN_VARIABLE, str(exc))
                return
            variable = declared.get(name)
            if variable is None:
                self._throw(
                    inst,
                    task.id,
                    ERROR_SKILL_UNREACHABLE,
                    f"skill {skill.iri} has no parameter {name!r}",
                )
                return
            try:
                value = coerce(value, variable.datatype)
            except DatatypeMismatch:
                self._throw(
                    inst,
                    task.id,
                    ERROR_PARAMETER_CONSTRAINT,
                    f"{name}={value!r} does not match datatype {variable.datatype.value}",
                )
                return
            if variable.linked_property is not None:
                if capability is None:
                    try:
                        capability = self._registry.capability(skill.capability_iri)
                    except SkillflowError as exc:
                        self._throw(inst, task.id, ERROR_SKILL_UNREACHABLE, str(exc))
                        return
                prop = capability.property_by_iri(variable.linked_property)
                if prop is not None:
                    try:
                        verdict = check_constraint(prop, value)
                    except DatatypeMismatch as exc:
                        self._throw(
                            inst, task.id, ERROR_PARAMETER_CONSTRAINT, str(exc)
                        )
                        return
                    if not verdict.satisfied:
                        self._throw(
                            inst,
                            task.id,
                            ERROR_PARAMETER_CONSTRAINT,
                            f"{name}={value!r} violates {verdict.violated_bound}"
                            f" on {prop.iri}",
                        )
                        return
            values[name] = value

        request = DelegationRequest(skill.iri, TransitionCommand.START, values)
        wait = _SkillWait(inst.take_gen(), skill, request)
        inst.skill_waits[task.id] = wait
        worker = threading.Thread(
            target=self._delegation_worker,
            args=(inst, task.id, wait),
            daemon=True,
            name=f"delegate:{inst.id}:{task.id}",
        )
        worker.start()

    def _delegation_worker(self, inst: _Instance, task_id: str, wait: _SkillWait) -> None:
        slot = self._slot(wait.skill.iri)
        slot.acquire()
        try:
            if wait.cancelled.is_set():
                return
            try:
                status = self._recover_to_idle(wait.skill, wait.cancelled)
                if status is None:
                    return  # cancelled while recovering
                self._connector.set_parameters(
                    wait.skill, dict(wait.request.parameter_values)
                )
                wait.start_issued = True
                self._connector.command(wait.skill, wait.request.transition)
            except SkillflowError as exc:
                self._on_delegation_failure(inst, task_id, wait, exc)
                return
            if wait.cancelled.is_set():
                self._quiet_command(wait.skill, TransitionCommand.ABORT)
                return
            since = status.seq
            while not wait.cancelled.is_set():
                try:
                    events = self._connector.wait_events(
                        wait.skill, since, self._poll_timeout_s
                    )
                except SkillflowError as exc:
                    self._on_delegation_failure(inst, task_id, wait, exc)
                    return
                for seq, state in events:
                    since = seq
                    outputs: dict[str, object] = {}
                    if state is SkillState.COMPLETE:
                        try:
                            outputs = dict(self._connector.status(wait.skill).outputs)
                        except SkillflowError as exc:
                            self._on_delegation_failure(inst, task_id, wait, exc)
                            return
                    if not self._on_skill_event(inst, task_id, wait, state, outputs):
                        return
        finally:
            slot.release()

    def _recover_to_idle(self, skill: Skill, cancelled: threading.Event):
        """Drive a skill back to Idle before a fresh run; None when cancelled."""
        deadline = time.monotonic() + self._recovery_timeout_s
        status = self._connector.status(skill)
        while status.state is not SkillState.IDLE:
            if cancelled.is_set():
                return None
            if time.monotonic() > deadline:
                raise SkillflowError(
                    f"skill {skill.iri} stuck in {status.state.value}"
                )
            command = None
            if status.state in (SkillState.COMPLETE, SkillState.STOPPED):
                command = TransitionCommand.RESET
            elif status.state is SkillState.ABORTED:
                command = TransitionCommand.CLEAR
            if command is not None:
                self._quiet_command(skill, command)
            remaining = max(deadline - time.monotonic(), 0.05)
            self._connector.wait_events(
                skill, status.seq, min(self._poll_timeout_s, remaining)
            )
            status = self._connector.status(skill)
        return status

    def _quiet_command(self, skill: Skill, command: TransitionCommand) -> None:
        try:
            self._connector.command(skill, command)
        except SkillflowError:
            pass  # recovery retries from the observed state; nothing to do here

    def _on_skill_event(
        self,
        inst: _Instance,
        task_id: str,
        wait: _SkillWait,
        state: SkillState,
        outputs: Mapping[str, object],
    ) -> bool:
        """Apply one observed state; False tells the worker to stop watching."""
        with inst.lock:
            current = inst.skill_waits.get(task_id)
            if current is not wait or inst.status in ENDED_STATUSES:
                return False
            inst.last_skill_state[task_id] = state.value
            self._emit(
                inst,
                "SkillStateObserved",
                node=task_id,
                skill=wait.skill.iri,
                state=state.value,
            )
            if state is SkillState.COMPLETE:
                inst.skill_waits.pop(task_id)
                self._quiet_command(wait.skill, TransitionCommand.RESET)
                self._harvest_outputs(inst, task_id, wait.skill, outputs)
                self._drain(inst)
                return False
            if state is SkillState.STOPPED:
                inst.skill_waits.pop(task_id)
                self._throw(inst, task_id, ERROR_SKILL_STOPPED)
                self._drain(inst)
                return False
            if state is SkillState.ABORTED:
                inst.skill_waits.pop(task_id)
                self._quiet_command(wait.skill, TransitionCommand.CLEAR)
                self._throw(inst, task_id, ERROR_SKILL_ABORTED)
                self._drain(inst)
                return False
            return True

    def _harvest_outputs(
        self,
        inst: _Instance,
        task_id: str,
        skill: Skill,
        outputs: Mapping[str, object],
    ) -> None:
        binding = inst.plan.bindings[task_id]
        declared = {v.name: v for v in skill.results}
        missing: list[str] = []
        for skill_var, process_var in binding.output_assignments.items():
            if skill_var not in outputs:
                missing.append(skill_var)
                continue
            value = outputs[skill_var]
            result = declared.get(skill_var)
            if result is not None:
                try:
                    value = coerce(value, result.datatype)
                except DatatypeMismatch:
                    missing.append(skill_var)
                    continue
            inst.variables[process_var] = value
            self._emit(inst, "VariableSet", name=process_var, value=value)
        if missing:
            self._finish_node(inst, task_id, missingOutputs=sorted(missing))
        else:
            self._finish_node(inst, task_id)

    def _on_delegation_failure(
        self, inst: _Instance, task_id: str, wait: _SkillWait, exc: SkillflowError
    ) -> None:
        with inst.lock:
            current = inst.skill_waits.get(task_id)
            if current is not wait or inst.status in ENDED_STATUSES:
                return
            inst.skill_waits.pop(task_id)
            self._throw(inst, task_id, ERROR_SKILL_UNREACHABLE, str(exc))
            self._drain(inst)

    def _on_timer(self, instance_id: str, node_id: str, gen: int) -> None:
        try:
            inst = self._instance(instance_id)
        except UnknownInstance:
            return
        with inst.lock:
            wait = inst.timer_waits.get(node_id)
            if wait is None or wait.gen != gen or inst.status in ENDED_STATUSES:
                return
            inst.timer_waits.pop(node_id)
            self._finish_node(inst, node_id)
            self._drain(inst)

    # -- internals: errors and teardown ----------------------------------------

    def _throw(
        self, inst: _Instance, node_id: str, code: str, message: str | None = None
    ) -> None:
        payload: dict[str, object] = {"node": node_id, "code": code}
        if message:
            payload["message"] = message
        self._emit(inst, "ErrorThrown", **payload)
        boundaries = inst.definition.boundaries_of(node_id)
        matched: BoundaryErrorEvent | None = None
        for boundary in boundaries:  # a specific filter beats a catch-all
            if boundary.error_code_filter == code:
                matched = boundary
                break
        if matched is None:
            for boundary in boundaries:
                if boundary.error_code_filter is None:
                    matched = boundary
                    break
        if matched is None:
            self._end(inst, InstanceStatus.FAULTED, node=node_id, code=code)
            return
        self._cancel_activation(inst, node_id)
        self._emit(inst, "ErrorCaught", boundary=matched.id, host=node_id, code=code)
        self._emit(inst, "NodeEntered", node=matched.id)
        self._emit(inst, "NodeCompleted", node=matched.id)
        for flow in inst.definition.outgoing(matched.id):
            self._route(inst, flow)

    def _cancel_activation(self, inst: _Instance, node_id: str) -> None:
        if inst.tokens.get(node_id, 0) > 0:
            self._consume(inst, node_id)
        inst.work_items.pop(node_id, None)
        wait = inst.skill_waits.pop(node_id, None)
        if wait is not None:
            wait.cancelled.set()
            self._abort_if_acting(inst, node_id, wait)
        timer = inst.timer_waits.pop(node_id, None)
        if timer is not None:
            timer.timer.cancel()

    def _abort_if_acting(self, inst: _Instance, task_id: str, wait: _SkillWait) -> None:
        if not wait.start_issued:
            return
        last = inst.last_skill_state.get(task_id)
        if last is not None and SkillState.parse(last) not in ACTING_STATES:
            return
        self._quiet_command(wait.skill, TransitionCommand.ABORT)

    def _end(self, inst: _Instance, status: InstanceStatus, **info: object) -> None:
        inst.work_items.clear()
        for task_id, wait in list(inst.skill_waits.items()):
            wait.cancelled.set()
            self._abort_if_acting(inst, task_id, wait)
        inst.skill_waits.clear()
        for timer in inst.timer_waits.values():
            timer.timer.cancel()
        inst.timer_waits.clear()
        inst.tokens.clear()
        inst.arrivals.clear()
        inst.ready.clear()
        inst.status = status
        self._emit(inst, "InstanceEnded", status=status.value, **info)
