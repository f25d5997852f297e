"""BPMN-subset XML codec.

``parse_process`` accepts documents in the BPMN 2.0 model namespace with
the capability extension namespace for task payloads; anything outside
the supported subset raises instead of being dropped. ``serialize_process``
emits a canonical form (fixed attribute order, two-space indent, one
element per line) so serializing the same definition twice is
byte-identical, and parse o serialize is a fixed point.

Diagram interchange blocks are not interpreted: the first
``bpmndi:BPMNDiagram`` element is normalized into the same canonical
layout and carried as an opaque string.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from typing import Mapping

from .datatypes import Datatype
from .errors import ExprParseError, StructureError, UnsupportedElement, XmlError
from .expressions import Expression, ValueExpr, parse_value_expr
from .processes import (
    BoundaryErrorEvent,
    CapabilityBinding,
    CapabilityTask,
    EndEvent,
    ExclusiveGateway,
    FlowNode,
    FormField,
    ParallelGateway,
    ProcessDefinition,
    SendTask,
    SequenceFlow,
    StartEvent,
    TimerCatchEvent,
    UserTask,
    parse_iso_duration,
    structural_problems,
)

BPMN_NS = "http://www.omg.org/spec/BPMN/20100524/MODEL"
CAP_NS = "urn:skillflow:capability"
BPMNDI_NS = "http://www.omg.org/spec/BPMN/20100524/DI"
DC_NS = "http://www.omg.org/spec/DD/20100524/DC"
DI_NS = "http://www.omg.org/spec/DD/20100524/DI"

_PREFIXES = {
    BPMN_NS: "bpmn",
    CAP_NS: "cap",
    BPMNDI_NS: "bpmndi",
    DC_NS: "dc",
    DI_NS: "di",
}


def _split(tag: str) -> tuple[str, str]:
    if tag.startswith("{"):
        ns, local = tag[1:].split("}", 1)
        return ns, local
    return "", tag


def _qname(tag: str) -> str:
    ns, local = _split(tag)
    prefix = _PREFIXES.get(ns)
    if prefix is None:
        return local if not ns else f"{{{ns}}}{local}"
    return f"{prefix}:{local}"


def _bpmn(local: str) -> str:
    return f"{{{BPMN_NS}}}{local}"


def _cap(local: str) -> str:
    return f"{{{CAP_NS}}}{local}"


# --- parsing ------------------------------------------------------------------


def _check_attrs(element: ET.Element, allowed: set[str]) -> None:
    for attr in element.attrib:
        if attr not in allowed:
            raise XmlError(
                f"unexpected attribute {_qname(attr)!r} on {_qname(element.tag)}"
            )


def _required(element: ET.Element, attr: str) -> str:
    value = element.get(attr)
    if value is None:
        raise XmlError(f"{_qname(element.tag)} needs attribute {attr!r}")
    return value


def _parse_value(text: str, where: str) -> ValueExpr:
    try:
        return parse_value_expr(text)
    except ExprParseError as err:
        raise XmlError(f"bad expression in {where}: {err}") from err


def _extension_children(element: ET.Element) -> list[ET.Element]:
    """Children of the task's bpmn:extensionElements block, if present."""
    blocks = [child for child in element if child.tag == _bpmn("extensionElements")]
    if len(blocks) > 1:
        raise XmlError(f"{_qname(element.tag)} has multiple extension blocks")
    return list(blocks[0]) if blocks else []


def _skip_refs(element: ET.Element) -> list[ET.Element]:
    """Semantic children: redundant flow references are skipped."""
    skipped = (_bpmn("incoming"), _bpmn("outgoing"))
    return [child for child in element if child.tag not in skipped]


def _reject_children(element: ET.Element, allow_extension: bool = False) -> None:
    for child in _skip_refs(element):
        if allow_extension and child.tag == _bpmn("extensionElements"):
            continue
        raise UnsupportedElement(_qname(child.tag))


def _parse_binding(element: ET.Element) -> CapabilityBinding | None:
    payload = None
    for child in _extension_children(element):
        if child.tag != _cap("capability"):
            raise UnsupportedElement(_qname(child.tag))
        if payload is not None:
            raise XmlError("service task has more than one capability element")
        payload = child
    if payload is None:
        return None
    _check_attrs(payload, {"iri"})
    inputs: dict[str, ValueExpr] = {}
    outputs: dict[str, str] = {}
    for item in payload:
        if item.tag == _cap("input"):
            _check_attrs(item, {"property", "value"})
            prop = _required(item, "property")
            if prop in inputs:
                raise XmlError(f"property {prop!r} assigned twice")
            inputs[prop] = _parse_value(
                _required(item, "value"), f"input {prop!r}"
            )
        elif item.tag == _cap("output"):
            _check_attrs(item, {"property", "variable"})
            prop = _required(item, "property")
            if prop in outputs:
                raise XmlError(f"property {prop!r} mapped twice")
            outputs[prop] = _required(item, "variable")
        else:
            raise UnsupportedElement(_qname(item.tag))
    for prop in set(inputs) & set(outputs):
        raise XmlError(f"property {prop!r} is both input and output")
    return CapabilityBinding(_required(payload, "iri"), inputs, outputs)


def _parse_form_fields(element: ET.Element) -> tuple[FormField, ...]:
    fields: list[FormField] = []
    for child in _extension_children(element):
        if child.tag != _cap("formField"):
            raise UnsupportedElement(_qname(child.tag))
        _check_attrs(child, {"name", "datatype"})
        name = _required(child, "name")
        if any(f.name == name for f in fields):
            raise XmlError(f"form field {name!r} declared twice")
        try:
            datatype = Datatype.parse(_required(child, "datatype"))
        except ValueError as err:
            raise XmlError(str(err)) from err
        fields.append(FormField(name, datatype))
    return tuple(fields)


def _parse_message(element: ET.Element) -> tuple[str, str]:
    subject, body = "", ""
    seen = False
    for child in _extension_children(element):
        if child.tag != _cap("message"):
            raise UnsupportedElement(_qname(child.tag))
        if seen:
            raise XmlError("send task has more than one message element")
        seen = True
        _check_attrs(child, {"subject", "body"})
        subject = child.get("subject", "")
        body = child.get("body", "")
    return subject, body


def _parse_timer(element: ET.Element) -> str:
    definitions = _skip_refs(element)
    if len(definitions) != 1 or definitions[0].tag != _bpmn("timerEventDefinition"):
        for child in definitions:
            if child.tag != _bpmn("timerEventDefinition"):
                raise UnsupportedElement(_qname(child.tag))
        raise XmlError("intermediate catch event needs one timer definition")
    timer = definitions[0]
    _check_attrs(timer, set())
    durations = list(timer)
    if len(durations) != 1 or durations[0].tag != _bpmn("timeDuration"):
        raise XmlError("timer definition needs one timeDuration")
    _check_attrs(durations[0], set())
    text = (durations[0].text or "").strip()
    try:
        parse_iso_duration(text)
    except ValueError as err:
        raise XmlError(str(err)) from err
    return text


def _parse_boundary(
    element: ET.Element, errors_by_id: Mapping[str, str]
) -> tuple[BoundaryErrorEvent, str]:
    _check_attrs(element, {"id", "name", "attachedToRef", "cancelActivity"})
    if element.get("cancelActivity", "true") != "true":
        raise UnsupportedElement('bpmn:boundaryEvent cancelActivity="false"')
    definitions = _skip_refs(element)
    if len(definitions) != 1 or definitions[0].tag != _bpmn("errorEventDefinition"):
        for child in definitions:
            if child.tag != _bpmn("errorEventDefinition"):
                raise UnsupportedElement(_qname(child.tag))
        raise XmlError("boundary event needs one error definition")
    error_def = definitions[0]
    _check_attrs(error_def, {"errorRef", "id"})
    error_filter = None
    ref = error_def.get("errorRef")
    if ref is not None:
        if ref not in errors_by_id:
            raise XmlError(f"errorRef {ref!r} matches no bpmn:error element")
        error_filter = errors_by_id[ref]
    node = BoundaryErrorEvent(
        id=_required(element, "id"),
        name=element.get("name", ""),
        error_code_filter=error_filter,
    )
    return node, _required(element, "attachedToRef")


def _parse_condition(flow_element: ET.Element, flow_id: str) -> Expression | None:
    conditions = [
        child
        for child in flow_element
        if child.tag == _bpmn("conditionExpression")
    ]
    for child in flow_element:
        if child.tag != _bpmn("conditionExpression"):
            raise UnsupportedElement(_qname(child.tag))
    if not conditions:
        return None
    if len(conditions) > 1:
        raise XmlError(f"flow {flow_id!r} has multiple conditions")
    _check_attrs(conditions[0], set())
    text = (conditions[0].text or "").strip()
    if not text.startswith("${"):
        raise XmlError(f"condition on flow {flow_id!r} must use the ${{...}} form")
    value = _parse_value(text, f"condition of flow {flow_id!r}")
    assert isinstance(value, Expression)
    return value


_SIMPLE_NODE_TAGS = {
    "startEvent": StartEvent,
    "endEvent": EndEvent,
    "parallelGateway": ParallelGateway,
}


def _parse_process_element(
    process: ET.Element, errors_by_id: Mapping[str, str]
) -> ProcessDefinition:
    _check_attrs(process, {"id", "name", "isExecutable"})
    nodes: list[FlowNode] = []
    flows: list[SequenceFlow] = []
    attachments: dict[str, str] = {}
    for element in process:
        ns, local = _split(element.tag)
        if ns != BPMN_NS:
            raise UnsupportedElement(_qname(element.tag))
        if local in _SIMPLE_NODE_TAGS:
            _check_attrs(element, {"id", "name"})
            _reject_children(element)
            nodes.append(
                _SIMPLE_NODE_TAGS[local](
                    id=_required(element, "id"), name=element.get("name", "")
                )
            )
        elif local == "exclusiveGateway":
            _check_attrs(element, {"id", "name", "default"})
            _reject_children(element)
            nodes.append(
                ExclusiveGateway(
                    id=_required(element, "id"),
                    name=element.get("name", ""),
                    default_flow_id=element.get("default"),
                )
            )
        elif local == "userTask":
            _check_attrs(element, {"id", "name"})
            _reject_children(element, allow_extension=True)
            nodes.append(
                UserTask(
                    id=_required(element, "id"),
                    name=element.get("name", ""),
                    form_fields=_parse_form_fields(element),
                )
            )
        elif local == "sendTask":
            _check_attrs(element, {"id", "name"})
            _reject_children(element, allow_extension=True)
            subject, body = _parse_message(element)
            nodes.append(
                SendTask(
                    id=_required(element, "id"),
                    name=element.get("name", ""),
                    subject=subject,
                    body=body,
                )
            )
        elif local == "serviceTask":
            _check_attrs(element, {"id", "name"})
            _reject_children(element, allow_extension=True)
            nodes.append(
                CapabilityTask(
                    id=_required(element, "id"),
                    name=element.get("name", ""),
                    binding=_parse_binding(element),
                )
            )
        elif local == "intermediateCatchEvent":
            _check_attrs(element, {"id", "name"})
            nodes.append(
                TimerCatchEvent(
                    id=_required(element, "id"),
                    name=element.get("name", ""),
                    duration=_parse_timer(element),
                )
            )
        elif local == "boundaryEvent":
            node, host_id = _parse_boundary(element, errors_by_id)
            nodes.append(node)
            attachments[node.id] = host_id
        elif local == "sequenceFlow":
            _check_attrs(element, {"id", "name", "sourceRef", "targetRef"})
            flow_id = _required(element, "id")
            flows.append(
                SequenceFlow(
                    id=flow_id,
                    source_id=_required(element, "sourceRef"),
                    target_id=_required(element, "targetRef"),
                    condition=_parse_condition(element, flow_id),
                    name=element.get("name", ""),
                )
            )
        else:
            raise UnsupportedElement(_qname(element.tag))
    return ProcessDefinition(
        id=_required(process, "id"),
        name=process.get("name", ""),
        nodes=tuple(nodes),
        flows=tuple(flows),
        boundary_attachments=attachments,
    )


def parse_process(data: bytes | str) -> ProcessDefinition:
    """Decode and structurally validate one process definition."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as err:
        raise XmlError(f"not well-formed XML: {err}") from err
    if root.tag != _bpmn("definitions"):
        raise XmlError(f"expected bpmn:definitions, got {_qname(root.tag)}")

    process_element: ET.Element | None = None
    diagram: ET.Element | None = None
    errors_by_id: dict[str, str] = {}
    for child in root:
        if child.tag == _bpmn("process"):
            if process_element is not None:
                raise XmlError("more than one bpmn:process element")
            process_element = child
        elif child.tag == _bpmn("error"):
            _check_attrs(child, {"id", "name", "errorCode"})
            errors_by_id[_required(child, "id")] = _required(child, "errorCode")
        elif child.tag == f"{{{BPMNDI_NS}}}BPMNDiagram":
            if diagram is not None:
                raise XmlError("more than one diagram block")
            diagram = child
        else:
            raise UnsupportedElement(_qname(child.tag))
    if process_element is None:
        raise XmlError("document contains no bpmn:process")

    definition = _parse_process_element(process_element, errors_by_id)
    if diagram is not None:
        out: list[str] = []
        _render_foreign(out, diagram, 1)
        definition = ProcessDefinition(
            id=definition.id,
            name=definition.name,
            nodes=definition.nodes,
            flows=definition.flows,
            boundary_attachments=definition.boundary_attachments,
            diagram_xml="\n".join(out),
        )
    problems = structural_problems(definition)
    if problems:
        raise StructureError(
            "; ".join(f"{p.code}({p.subject}): {p.message}" for p in problems)
        )
    return definition


# --- serialization --------------------------------------------------------------


def _escape_attr(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("\n", "&#10;")
        .replace("\t", "&#9;")
        .replace("\r", "&#13;")
    )


def _escape_text(value: str) -> str:
    return value.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _attrs(pairs: list[tuple[str, str]]) -> str:
    return "".join(f' {name}="{_escape_attr(value)}"' for name, value in pairs)


def _render_foreign(out: list[str], element: ET.Element, depth: int) -> None:
    """Canonical rendering for diagram elements (sorted attributes)."""
    ns, local = _split(element.tag)
    prefix = _PREFIXES.get(ns)
    if prefix is None:
        raise XmlError(f"unsupported namespace in diagram block: {ns!r}")
    tag = f"{prefix}:{local}"
    pairs = []
    for attr in sorted(element.attrib):
        attr_ns, attr_local = _split(attr)
        if attr_ns:
            attr_prefix = _PREFIXES.get(attr_ns)
            if attr_prefix is None:
                raise XmlError(f"unsupported namespace in diagram block: {attr_ns!r}")
            attr_local = f"{attr_prefix}:{attr_local}"
        pairs.append((attr_local, element.get(attr)))
    indent = "  " * depth
    text = (element.text or "").strip()
    children = list(element)
    if not text and not children:
        out.append(f"{indent}<{tag}{_attrs(pairs)} />")
        return
    if text and not children:
        out.append(f"{indent}<{tag}{_attrs(pairs)}>{_escape_text(text)}</{tag}>")
        return
    out.append(f"{indent}<{tag}{_attrs(pairs)}>")
    if text:
        out.append(f"{indent}  {_escape_text(text)}")
    for child in children:
        _render_foreign(out, child, depth + 1)
    out.append(f"{indent}</{tag}>")


def _error_element_id(code: str) -> str:
    return "Error_" + re.sub(r"[^A-Za-z0-9_.-]", "_", code)


class _Writer:
    def __init__(self, definition: ProcessDefinition) -> None:
        self.definition = definition
        self.out: list[str] = []

    def line(self, depth: int, text: str) -> None:
        self.out.append("  " * depth + text)

    def element(
        self,
        depth: int,
        tag: str,
        pairs: list[tuple[str, str]],
        body: list[str] | None = None,
    ) -> None:
        """Emit one element; ``body`` lines are pre-rendered children."""
        if not body:
            self.line(depth, f"<{tag}{_attrs(pairs)} />")
        else:
            self.line(depth, f"<{tag}{_attrs(pairs)}>")
            self.out.extend(body)
            self.line(depth, f"</{tag}>")

    def _named(self, node: FlowNode) -> list[tuple[str, str]]:
        pairs = [("id", node.id)]
        if node.name:
            pairs.append(("name", node.name))
        return pairs

    def _refs(self, depth: int, node_id: str) -> list[str]:
        indent = "  " * depth
        lines = []
        for flow in self.definition.flows:
            if flow.target_id == node_id:
                lines.append(f"{indent}<bpmn:incoming>{_escape_text(flow.id)}</bpmn:incoming>")
        for flow in self.definition.flows:
            if flow.source_id == node_id:
                lines.append(f"{indent}<bpmn:outgoing>{_escape_text(flow.id)}</bpmn:outgoing>")
        return lines

    def _extension(self, depth: int, inner: list[str]) -> list[str]:
        indent = "  " * depth
        return [f"{indent}<bpmn:extensionElements>"] + inner + [
            f"{indent}</bpmn:extensionElements>"
        ]

    def node_lines(self, node: FlowNode, depth: int) -> None:
        pairs = self._named(node)
        refs = self._refs(depth + 1, node.id)
        inner = "  " * (depth + 2)
        if isinstance(node, StartEvent):
            self.element(depth, "bpmn:startEvent", pairs, refs)
        elif isinstance(node, EndEvent):
            self.element(depth, "bpmn:endEvent", pairs, refs)
        elif isinstance(node, ExclusiveGateway):
            if node.default_flow_id is not None:
                pairs.append(("default", node.default_flow_id))
            self.element(depth, "bpmn:exclusiveGateway", pairs, refs)
        elif isinstance(node, ParallelGateway):
            self.element(depth, "bpmn:parallelGateway", pairs, refs)
        elif isinstance(node, UserTask):
            body = []
            if node.form_fields:
                fields = [
                    f"{inner}<cap:formField"
                    + _attrs([("name", f.name), ("datatype", f.datatype.value)])
                    + " />"
                    for f in node.form_fields
                ]
                body.extend(self._extension(depth + 1, fields))
            self.element(depth, "bpmn:userTask", pairs, body + refs)
        elif isinstance(node, SendTask):
            body = []
            if node.subject or node.body:
                message = (
                    f"{inner}<cap:message"
                    + _attrs([("subject", node.subject), ("body", node.body)])
                    + " />"
                )
                body.extend(self._extension(depth + 1, [message]))
            self.element(depth, "bpmn:sendTask", pairs, body + refs)
        elif isinstance(node, CapabilityTask):
            body = []
            if node.binding is not None:
                b = node.binding
                payload = [f'{inner}<cap:capability iri="{_escape_attr(b.capability_iri)}">']
                for prop, value in b.input_assignments.items():
                    payload.append(
                        f"{inner}  <cap:input"
                        + _attrs([("property", prop), ("value", value.render())])
                        + " />"
                    )
                for prop, variable in b.output_mappings.items():
                    payload.append(
                        f"{inner}  <cap:output"
                        + _attrs([("property", prop), ("variable", variable)])
                        + " />"
                    )
                payload.append(f"{inner}</cap:capability>")
                body.extend(self._extension(depth + 1, payload))
            self.element(depth, "bpmn:serviceTask", pairs, body + refs)
        elif isinstance(node, TimerCatchEvent):
            timer = [
                "  " * (depth + 1) + "<bpmn:timerEventDefinition>",
                f"{inner}<bpmn:timeDuration>{_escape_text(node.duration)}</bpmn:timeDuration>",
                "  " * (depth + 1) + "</bpmn:timerEventDefinition>",
            ]
            self.element(depth, "bpmn:intermediateCatchEvent", pairs, refs + timer)
        elif isinstance(node, BoundaryErrorEvent):
            pairs.append(
                ("attachedToRef", self.definition.boundary_attachments[node.id])
            )
            if node.error_code_filter is None:
                error = ["  " * (depth + 1) + "<bpmn:errorEventDefinition />"]
            else:
                ref = _error_element_id(node.error_code_filter)
                error = [
                    "  " * (depth + 1)
                    + f'<bpmn:errorEventDefinition errorRef="{_escape_attr(ref)}" />'
                ]
            self.element(depth, "bpmn:boundaryEvent", pairs, refs + error)
        else:
            raise TypeError(f"unknown node kind: {type(node).__name__}")

    def flow_lines(self, flow: SequenceFlow, depth: int) -> None:
        pairs = [("id", flow.id)]
        if flow.name:
            pairs.append(("name", flow.name))
        pairs.extend([("sourceRef", flow.source_id), ("targetRef", flow.target_id)])
        body = []
        if flow.condition is not None:
            body.append(
                "  " * (depth + 1)
                + "<bpmn:conditionExpression>"
                + _escape_text(flow.condition.render())
                + "</bpmn:conditionExpression>"
            )
        self.element(depth, "bpmn:sequenceFlow", pairs, body)


def serialize_process(definition: ProcessDefinition) -> bytes:
    """Canonical XML bytes for a definition."""
    w = _Writer(definition)
    w.line(0, '<?xml version="1.0" encoding="UTF-8"?>')
    xmlns = (
        f' xmlns:bpmn="{BPMN_NS}" xmlns:cap="{CAP_NS}"'
    )
    if definition.diagram_xml is not None:
        xmlns += (
            f' xmlns:bpmndi="{BPMNDI_NS}" xmlns:dc="{DC_NS}" xmlns:di="{DI_NS}"'
        )
    w.line(
        0,
        f'<bpmn:definitions{xmlns} id="Definitions_1"'
        ' targetNamespace="urn:skillflow:process">',
    )
    pairs = [("id", definition.id)]
    if definition.name:
        pairs.append(("name", definition.name))
    pairs.append(("isExecutable", "true"))
    w.line(1, f"<bpmn:process{_attrs(pairs)}>")
    for node in definition.nodes:
        w.node_lines(node, 2)
    for flow in definition.flows:
        w.flow_lines(flow, 2)
    w.line(1, "</bpmn:process>")
    codes = sorted(
        {
            node.error_code_filter
            for node in definition.nodes
            if isinstance(node, BoundaryErrorEvent)
            and node.error_code_filter is not None
        }
    )
    for code in codes:
        w.line(
            1,
            "<bpmn:error"
            + _attrs([("id", _error_element_id(code)), ("errorCode", code)])
            + " />",
        )
    if definition.diagram_xml is not None:
        w.out.append(definition.diagram_xml)
    w.line(0, "</bpmn:definitions>")
    return ("\n".join(w.out) + "\n").encode("utf-8")
