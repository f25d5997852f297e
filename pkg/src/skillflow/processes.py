"""Process graph model: nodes, flows, bindings, and structural validation.

A process is a directed graph over a small set of node kinds. Service
tasks carry an optional capability binding; resolution later replaces
those references with concrete skills. Definitions are immutable values:
``attach_capability`` returns a new definition.

``structural_problems`` reports the invariants that make a graph
non-executable (these raise at XML parse time); ``validate_process``
additionally reports advisory diagnostics and, given a registry,
binding-level checks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Union

from .datatypes import Datatype, matches, value_datatype
from .errors import InvalidBinding, UnknownTask
from .expressions import Constant, Expression, ValueExpr
from .registry import Registry, check_constraint

# --- nodes -------------------------------------------------------------------


@dataclass(frozen=True)
class StartEvent:
    id: str
    name: str = ""


@dataclass(frozen=True)
class EndEvent:
    id: str
    name: str = ""


@dataclass(frozen=True)
class ExclusiveGateway:
    id: str
    name: str = ""
    default_flow_id: str | None = None


@dataclass(frozen=True)
class ParallelGateway:
    id: str
    name: str = ""


@dataclass(frozen=True)
class FormField:
    name: str
    datatype: Datatype


@dataclass(frozen=True)
class UserTask:
    id: str
    name: str = ""
    form_fields: tuple[FormField, ...] = ()


@dataclass(frozen=True)
class SendTask:
    id: str
    name: str = ""
    subject: str = ""
    body: str = ""


@dataclass(frozen=True)
class CapabilityBinding:
    capability_iri: str
    input_assignments: Mapping[str, ValueExpr] = field(default_factory=dict)
    output_mappings: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class CapabilityTask:
    id: str
    name: str = ""
    binding: CapabilityBinding | None = None


@dataclass(frozen=True)
class TimerCatchEvent:
    id: str
    name: str = ""
    duration: str = "PT0S"  # ISO-8601, kept verbatim for serialization

    def duration_seconds(self) -> float:
        return parse_iso_duration(self.duration)


@dataclass(frozen=True)
class BoundaryErrorEvent:
    id: str
    name: str = ""
    error_code_filter: str | None = None  # None catches every error


FlowNode = Union[
    StartEvent,
    EndEvent,
    ExclusiveGateway,
    ParallelGateway,
    UserTask,
    SendTask,
    CapabilityTask,
    TimerCatchEvent,
    BoundaryErrorEvent,
]

TASK_KINDS = (UserTask, SendTask, CapabilityTask)


@dataclass(frozen=True)
class SequenceFlow:
    id: str
    source_id: str
    target_id: str
    condition: Expression | None = None
    name: str = ""


# --- durations ----------------------------------------------------------------

_DURATION_RE = re.compile(
    r"^P(?:(?P<days>\d+)D)?"
    r"(?:T(?:(?P<hours>\d+)H)?(?:(?P<minutes>\d+)M)?"
    r"(?:(?P<seconds>\d+(?:\.\d+)?)S)?)?$"
)


def parse_iso_duration(text: str) -> float:
    """ISO-8601 duration (days and below) in seconds."""
    m = _DURATION_RE.match(text)
    if not m or text in ("P", "PT"):
        raise ValueError(f"not an ISO-8601 duration: {text!r}")
    days, hours, minutes, seconds = m.groups()
    return (
        int(days or 0) * 86400.0
        + int(hours or 0) * 3600.0
        + int(minutes or 0) * 60.0
        + float(seconds or 0.0)
    )


# --- definition ---------------------------------------------------------------


@dataclass(frozen=True)
class ProcessDefinition:
    id: str
    name: str = ""
    nodes: tuple[FlowNode, ...] = ()
    flows: tuple[SequenceFlow, ...] = ()
    boundary_attachments: Mapping[str, str] = field(default_factory=dict)
    diagram_xml: str | None = None  # opaque pass-through, not interpreted

    def node(self, node_id: str) -> FlowNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)

    def has_node(self, node_id: str) -> bool:
        return any(node.id == node_id for node in self.nodes)

    def start_event(self) -> StartEvent:
        for node in self.nodes:
            if isinstance(node, StartEvent):
                return node
        raise ValueError("definition has no start event")

    def outgoing(self, node_id: str) -> list[SequenceFlow]:
        """Outgoing flows in document order (condition evaluation order)."""
        return [f for f in self.flows if f.source_id == node_id]

    def incoming(self, node_id: str) -> list[SequenceFlow]:
        return [f for f in self.flows if f.target_id == node_id]

    def flow(self, flow_id: str) -> SequenceFlow:
        for f in self.flows:
            if f.id == flow_id:
                return f
        raise KeyError(flow_id)

    def capability_tasks(self) -> list[CapabilityTask]:
        return [n for n in self.nodes if isinstance(n, CapabilityTask)]

    def boundaries_of(self, task_id: str) -> list[BoundaryErrorEvent]:
        found = []
        for boundary_id, host_id in self.boundary_attachments.items():
            if host_id == task_id:
                found.append(self.node(boundary_id))
        return found


def attach_capability(
    definition: ProcessDefinition, task_id: str, binding: CapabilityBinding
) -> ProcessDefinition:
    """Bind a capability to a service task; an existing binding is replaced."""
    overlap = set(binding.input_assignments) & set(binding.output_mappings)
    if overlap:
        raise InvalidBinding(
            f"properties both assigned and mapped: {sorted(overlap)}"
        )
    nodes = []
    found = False
    for node in definition.nodes:
        if node.id == task_id:
            if not isinstance(node, CapabilityTask):
                raise UnknownTask(task_id)
            node = replace(node, binding=binding)
            found = True
        nodes.append(node)
    if not found:
        raise UnknownTask(task_id)
    return replace(definition, nodes=tuple(nodes))


# --- validation -----------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    subject: str  # node, flow, or property the problem is about
    message: str


def _edge_count_problems(
    definition: ProcessDefinition, node: FlowNode
) -> Iterator[Diagnostic]:
    n_in = len(definition.incoming(node.id))
    n_out = len(definition.outgoing(node.id))

    def bad(message: str) -> Diagnostic:
        return Diagnostic("EdgeCardinality", node.id, message)

    if isinstance(node, StartEvent):
        if n_in != 0:
            yield bad("start event must have no incoming flow")
        if n_out != 1:
            yield bad("start event needs exactly one outgoing flow")
    elif isinstance(node, EndEvent):
        if n_in < 1:
            yield bad("end event needs an incoming flow")
        if n_out != 0:
            yield bad("end event must have no outgoing flow")
    elif isinstance(node, BoundaryErrorEvent):
        if n_in != 0:
            yield bad("boundary event must have no incoming flow")
        if n_out != 1:
            yield bad("boundary event needs exactly one outgoing flow")
    elif isinstance(node, (ExclusiveGateway, ParallelGateway)):
        if n_in < 1:
            yield bad("gateway needs an incoming flow")
        if n_out < 1:
            yield bad("gateway needs an outgoing flow")
    else:  # tasks and timer catches
        if n_in < 1:
            yield bad("node needs an incoming flow")
        if n_out != 1:
            yield bad("node needs exactly one outgoing flow")


def structural_problems(definition: ProcessDefinition) -> list[Diagnostic]:
    """Invariant violations that make the graph non-executable."""
    problems: list[Diagnostic] = []
    ids: set[str] = set()
    for item in list(definition.nodes) + list(definition.flows):
        if item.id in ids:
            problems.append(Diagnostic("DuplicateId", item.id, "id used twice"))
        ids.add(item.id)
    if problems:
        return problems  # later checks assume unique ids

    by_id = {node.id: node for node in definition.nodes}

    starts = [n for n in definition.nodes if isinstance(n, StartEvent)]
    if len(starts) != 1:
        problems.append(
            Diagnostic(
                "StartEventCount",
                definition.id,
                f"expected exactly one start event, found {len(starts)}",
            )
        )
    if not any(isinstance(n, EndEvent) for n in definition.nodes):
        problems.append(
            Diagnostic("NoEndEvent", definition.id, "process has no end event")
        )

    for flow in definition.flows:
        for endpoint in (flow.source_id, flow.target_id):
            if endpoint not in by_id:
                problems.append(
                    Diagnostic(
                        "UnknownEndpoint",
                        flow.id,
                        f"flow references missing node {endpoint!r}",
                    )
                )
        if flow.condition is not None and not isinstance(
            by_id.get(flow.source_id), ExclusiveGateway
        ):
            problems.append(
                Diagnostic(
                    "MisplacedCondition",
                    flow.id,
                    "conditions belong on exclusive gateway outgoing flows",
                )
            )
    if any(p.code == "UnknownEndpoint" for p in problems):
        return problems

    for node in definition.nodes:
        problems.extend(_edge_count_problems(definition, node))
        if isinstance(node, ExclusiveGateway) and node.default_flow_id is not None:
            default = next(
                (f for f in definition.outgoing(node.id) if f.id == node.default_flow_id),
                None,
            )
            if default is None:
                problems.append(
                    Diagnostic(
                        "BadDefaultFlow",
                        node.id,
                        f"default flow {node.default_flow_id!r} is not outgoing",
                    )
                )
            elif default.condition is not None:
                problems.append(
                    Diagnostic(
                        "BadDefaultFlow",
                        node.id,
                        "default flow must not carry a condition",
                    )
                )
        if isinstance(node, TimerCatchEvent):
            try:
                parse_iso_duration(node.duration)
            except ValueError as err:
                problems.append(Diagnostic("BadTimer", node.id, str(err)))

    for boundary_id, host_id in definition.boundary_attachments.items():
        boundary = by_id.get(boundary_id)
        host = by_id.get(host_id)
        if not isinstance(boundary, BoundaryErrorEvent):
            problems.append(
                Diagnostic("BadAttachment", boundary_id, "not a boundary event")
            )
        elif not isinstance(host, TASK_KINDS):
            problems.append(
                Diagnostic(
                    "BadAttachment", boundary_id, "boundary events attach to tasks"
                )
            )
    for node in definition.nodes:
        if (
            isinstance(node, BoundaryErrorEvent)
            and node.id not in definition.boundary_attachments
        ):
            problems.append(
                Diagnostic("BadAttachment", node.id, "boundary event has no host")
            )

    if starts:
        reached = _reachable(definition, starts[0].id)
        for node in definition.nodes:
            if node.id not in reached:
                problems.append(
                    Diagnostic("Unreachable", node.id, "not reachable from the start")
                )
    return problems


def _reachable(definition: ProcessDefinition, start_id: str) -> set[str]:
    edges: dict[str, list[str]] = {}
    for flow in definition.flows:
        edges.setdefault(flow.source_id, []).append(flow.target_id)
    # a boundary event is reached through its host task
    for boundary_id, host_id in definition.boundary_attachments.items():
        edges.setdefault(host_id, []).append(boundary_id)
    seen = {start_id}
    queue = [start_id]
    while queue:
        for target in edges.get(queue.pop(), ()):
            if target not in seen:
                seen.add(target)
                queue.append(target)
    return seen


def _binding_diagnostics(
    task: CapabilityTask, registry: Registry
) -> Iterator[Diagnostic]:
    binding = task.binding
    assert binding is not None
    if not registry.has_capability(binding.capability_iri):
        yield Diagnostic(
            "UnknownCapability",
            task.id,
            f"capability {binding.capability_iri!r} is not registered",
        )
        return
    capability = registry.capability(binding.capability_iri)
    inputs = {p.iri: p for p in capability.inputs}
    outputs = {p.iri: p for p in capability.outputs}
    for prop_iri, value in binding.input_assignments.items():
        prop = inputs.get(prop_iri)
        if prop is None:
            yield Diagnostic(
                "UnknownProperty",
                prop_iri,
                f"{prop_iri!r} is not an input of {capability.iri!r}",
            )
            continue
        if isinstance(value, Constant):
            if not matches(value.value, prop.datatype):
                yield Diagnostic(
                    "DatatypeMismatch",
                    prop_iri,
                    f"constant is {value_datatype(value.value).value}, "
                    f"property wants {prop.datatype.value}",
                )
                continue
            result = check_constraint(prop, value.value)
            if not result.satisfied:
                yield Diagnostic(
                    "ConstraintViolated",
                    prop_iri,
                    f"constant {value.render()} violates {result.violated_bound}",
                )
    for prop_iri in binding.output_mappings:
        if prop_iri not in outputs:
            yield Diagnostic(
                "UnknownProperty",
                prop_iri,
                f"{prop_iri!r} is not an output of {capability.iri!r}",
            )


def validate_process(
    definition: ProcessDefinition, registry: Registry | None = None
) -> list[Diagnostic]:
    """All problems: structural, advisory, and (with a registry) binding-level."""
    diagnostics = structural_problems(definition)
    for node in definition.nodes:
        if isinstance(node, ExclusiveGateway):
            plain = [
                f
                for f in definition.outgoing(node.id)
                if f.condition is None and f.id != node.default_flow_id
            ]
            if len(plain) >= 2:
                diagnostics.append(
                    Diagnostic(
                        "AmbiguousGateway",
                        node.id,
                        f"{len(plain)} unconditioned outgoing flows",
                    )
                )
        if isinstance(node, CapabilityTask):
            if node.binding is None:
                diagnostics.append(
                    Diagnostic("UnboundTask", node.id, "service task has no capability")
                )
            elif registry is not None:
                diagnostics.extend(_binding_diagnostics(node, registry))
    return diagnostics
