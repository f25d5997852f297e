"""Exception types shared across skillflow modules.

Engine-level *process errors* (the catchable error codes thrown at tasks,
such as "SkillAborted") are not exceptions; they live in the engine as
history events. Everything here signals misuse of an API or a malformed
artifact.
"""

from __future__ import annotations


class SkillflowError(Exception):
    """Base class for all skillflow errors."""


# --- registry -----------------------------------------------------------


class ParseError(SkillflowError):
    """A document could not be decoded at all (bad JSON, bad encoding)."""


class ValidationError(SkillflowError):
    """A referential or datatype invariant is violated.

    Carries the first offending identifier so callers can point at it.
    """

    def __init__(self, message: str, iri: str | None = None) -> None:
        self.iri = iri
        super().__init__(message if iri is None else f"{message} (iri: {iri})")


class DuplicateIri(SkillflowError):
    def __init__(self, iri: str) -> None:
        self.iri = iri
        super().__init__(f"iri already registered: {iri}")


class UnknownIri(SkillflowError):
    def __init__(self, iri: str) -> None:
        self.iri = iri
        super().__init__(f"unknown iri: {iri}")


class DatatypeMismatch(SkillflowError):
    def __init__(self, expected: str, value: object) -> None:
        self.expected = expected
        self.value = value
        super().__init__(f"value {value!r} does not match datatype {expected}")


# --- process model ------------------------------------------------------


class XmlError(SkillflowError):
    """Input is not well-formed XML or not a BPMN definitions document."""


class UnsupportedElement(SkillflowError):
    """An element outside the supported BPMN subset was encountered."""

    def __init__(self, qualified_name: str) -> None:
        self.qualified_name = qualified_name
        super().__init__(f"unsupported element: {qualified_name}")


class StructureError(SkillflowError):
    """A structural invariant of the process graph is violated."""


class UnknownTask(SkillflowError):
    pass


class InvalidBinding(SkillflowError):
    pass


class ExprParseError(SkillflowError):
    def __init__(self, position: int, expected: str) -> None:
        self.position = position
        self.expected = expected
        super().__init__(f"parse error at position {position}: expected {expected}")


class UnknownVariable(SkillflowError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown variable: {name}")


class EvalTypeError(SkillflowError):
    """An operator was applied to operand types it does not accept."""

    def __init__(self, operator: str, operand_types: tuple[str, ...]) -> None:
        self.operator = operator
        self.operand_types = operand_types
        super().__init__(
            f"operator {operator!r} not defined for {', '.join(operand_types)}"
        )


class DivisionByZero(SkillflowError):
    pass


# --- skill state machine ------------------------------------------------


class IllegalTransition(SkillflowError):
    def __init__(self, state: object, command: object) -> None:
        self.state = state
        self.command = command
        super().__init__(f"command {command} is illegal in state {state}")


class NotActing(SkillflowError):
    def __init__(self, state: object) -> None:
        self.state = state
        super().__init__(f"{state} is not an acting state")


# --- virtual plant ------------------------------------------------------


class PortUnavailable(SkillflowError):
    pass


class ConfigError(SkillflowError):
    pass


class WrongState(SkillflowError):
    def __init__(self, current: object) -> None:
        self.current = current
        super().__init__(f"not allowed in state {current}")


class UnknownParameter(SkillflowError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unknown parameter: {name}")


class UnknownSkill(SkillflowError):
    def __init__(self, skill_id: str) -> None:
        self.skill_id = skill_id
        super().__init__(f"unknown skill: {skill_id}")


# --- resolution ---------------------------------------------------------


class NoSkillAvailable(SkillflowError):
    def __init__(self, task_id: str, capability_iri: str) -> None:
        self.task_id = task_id
        self.capability_iri = capability_iri
        super().__init__(
            f"no skill registered for capability {capability_iri} (task {task_id})"
        )


class AmbiguousCapability(SkillflowError):
    def __init__(self, task_id: str, candidates: list[str]) -> None:
        self.task_id = task_id
        self.candidates = candidates
        super().__init__(f"task {task_id} has {len(candidates)} candidate skills")


class UnknownPendingTask(SkillflowError):
    def __init__(self, task_id: str) -> None:
        self.task_id = task_id
        super().__init__(f"no pending decision for task {task_id}")


class NotACandidate(SkillflowError):
    def __init__(self, task_id: str, skill_iri: str) -> None:
        self.task_id = task_id
        self.skill_iri = skill_iri
        super().__init__(f"{skill_iri} is not a candidate for task {task_id}")


class UnlinkedProperty(SkillflowError):
    def __init__(self, property_iri: str, skill_iri: str) -> None:
        self.property_iri = property_iri
        self.skill_iri = skill_iri
        super().__init__(
            f"property {property_iri} has no linked variable on skill {skill_iri}"
        )


# --- engine -------------------------------------------------------------


class PlanMismatch(SkillflowError):
    pass


class ValidationFailed(SkillflowError):
    def __init__(self, diagnostics: list) -> None:
        self.diagnostics = diagnostics
        super().__init__(
            "; ".join(str(d) for d in diagnostics) or "validation failed"
        )


class NoOpenWorkItem(SkillflowError):
    def __init__(self, task_id: str) -> None:
        self.task_id = task_id
        super().__init__(f"no open work item for task {task_id}")


class MissingField(SkillflowError):
    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"missing form field: {name}")


class UnknownInstance(SkillflowError):
    def __init__(self, instance_id: str) -> None:
        self.instance_id = instance_id
        super().__init__(f"unknown instance: {instance_id}")


class AlreadyEnded(SkillflowError):
    def __init__(self, instance_id: str, status: object) -> None:
        self.instance_id = instance_id
        self.status = status
        super().__init__(f"instance {instance_id} already ended ({status})")


class SkillUnreachable(SkillflowError):
    """Transport-level failure talking to a skill endpoint."""


class UnknownDeployment(SkillflowError):
    def __init__(self, deployment_id: str) -> None:
        self.deployment_id = deployment_id
        super().__init__(f"unknown deployment: {deployment_id}")


class UnknownSession(SkillflowError):
    def __init__(self, session_id: str) -> None:
        self.session_id = session_id
        super().__init__(f"unknown resolution session: {session_id}")


class SessionComplete(SkillflowError):
    def __init__(self, session_id: str) -> None:
        self.session_id = session_id
        super().__init__(f"resolution session {session_id} already holds a full plan")


class PlanIncomplete(SkillflowError):
    def __init__(self, session_id: str) -> None:
        self.session_id = session_id
        super().__init__(
            f"resolution session {session_id} still has undecided tasks"
        )
