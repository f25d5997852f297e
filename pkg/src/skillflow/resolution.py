"""Binding capability tasks to concrete skills.

``resolve`` turns a validated definition plus the current registry into a
BindingPlan: per task, the chosen skill and its parameter/output
assignments keyed by skill variable names. Ambiguity (several skills for
one capability) is handled by policy: fail, pick the lexicographically
first, or hand back PendingDecisions for a user to settle via ``decide``.

Plans and pending sets are immutable values; ``decide`` returns a new
value. Callers that share a pending set across threads must apply
decisions one at a time.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

from .datatypes import matches, value_datatype
from .errors import (
    InvalidBinding,
    NoSkillAvailable,
    AmbiguousCapability,
    NotACandidate,
    ParseError,
    UnknownPendingTask,
    UnlinkedProperty,
    ValidationFailed,
)
from .expressions import Constant, ValueExpr, parse_value_expr
from .processes import (
    CapabilityBinding,
    Diagnostic,
    ProcessDefinition,
    validate_process,
)
from .registry import Registry, Skill, check_constraint


class SelectionPolicy(Enum):
    AUTO_STRICT = "AutoStrict"
    FIRST_DETERMINISTIC = "FirstDeterministic"
    INTERACTIVE = "Interactive"

    @classmethod
    def parse(cls, text: str) -> "SelectionPolicy":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown selection policy: {text!r}")


@dataclass(frozen=True)
class TaskBinding:
    skill_iri: str
    parameter_assignments: Mapping[str, ValueExpr] = field(default_factory=dict)
    output_assignments: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class BindingPlan:
    definition_id: str
    bindings: Mapping[str, TaskBinding] = field(default_factory=dict)


@dataclass(frozen=True)
class PendingChoice:
    task_id: str
    capability_iri: str
    candidates: tuple[str, ...]  # skill iris, lexicographic
    # carried so decide() needs no registry access
    candidate_skills: Mapping[str, Skill] = field(default_factory=dict)
    binding: CapabilityBinding | None = None


@dataclass(frozen=True)
class PendingDecisions:
    definition_id: str
    pending: tuple[PendingChoice, ...] = ()
    decided: Mapping[str, TaskBinding] = field(default_factory=dict)


def map_parameters(
    binding: CapabilityBinding, skill: Skill
) -> tuple[dict[str, ValueExpr], dict[str, str]]:
    """Re-key property assignments by the skill variables linked to them."""
    if skill.capability_iri != binding.capability_iri:
        raise InvalidBinding(
            f"skill {skill.iri} executes {skill.capability_iri}, "
            f"not {binding.capability_iri}"
        )
    parameters: dict[str, ValueExpr] = {}
    for prop_iri, value in binding.input_assignments.items():
        var = skill.parameter_linked_to(prop_iri)
        if var is None:
            raise UnlinkedProperty(prop_iri, skill.iri)
        parameters[var.name] = value
    outputs: dict[str, str] = {}
    for prop_iri, variable in binding.output_mappings.items():
        var = skill.result_linked_to(prop_iri)
        if var is None:
            raise UnlinkedProperty(prop_iri, skill.iri)
        outputs[var.name] = variable
    return parameters, outputs


def resolve(
    definition: ProcessDefinition,
    registry: Registry,
    policy: SelectionPolicy = SelectionPolicy.AUTO_STRICT,
) -> BindingPlan | PendingDecisions:
    """Choose a skill for every capability task."""
    diagnostics = validate_process(definition, registry)
    if diagnostics:
        raise ValidationFailed(diagnostics)
    bindings: dict[str, TaskBinding] = {}
    pending: list[PendingChoice] = []
    for task in definition.capability_tasks():
        binding = task.binding
        assert binding is not None  # validate_process flags unbound tasks
        candidates = registry.skills_for_capability(binding.capability_iri)
        if not candidates:
            raise NoSkillAvailable(task.id, binding.capability_iri)
        if len(candidates) == 1 or policy is SelectionPolicy.FIRST_DETERMINISTIC:
            skill = candidates[0]
            parameters, outputs = map_parameters(binding, skill)
            bindings[task.id] = TaskBinding(skill.iri, parameters, outputs)
        elif policy is SelectionPolicy.AUTO_STRICT:
            raise AmbiguousCapability(task.id, [s.iri for s in candidates])
        else:
            pending.append(
                PendingChoice(
                    task_id=task.id,
                    capability_iri=binding.capability_iri,
                    candidates=tuple(s.iri for s in candidates),
                    candidate_skills={s.iri: s for s in candidates},
                    binding=binding,
                )
            )
    if pending:
        return PendingDecisions(definition.id, tuple(pending), bindings)
    return BindingPlan(definition.id, bindings)


def decide(
    pending: PendingDecisions, task_id: str, skill_iri: str
) -> BindingPlan | PendingDecisions:
    """Settle one pending choice; a plan comes back once none remain."""
    choice = next((p for p in pending.pending if p.task_id == task_id), None)
    if choice is None:
        raise UnknownPendingTask(task_id)
    if skill_iri not in choice.candidates:
        raise NotACandidate(task_id, skill_iri)
    skill = choice.candidate_skills[skill_iri]
    assert choice.binding is not None
    parameters, outputs = map_parameters(choice.binding, skill)
    decided = dict(pending.decided)
    decided[task_id] = TaskBinding(skill_iri, parameters, outputs)
    remaining = tuple(p for p in pending.pending if p.task_id != task_id)
    if remaining:
        return PendingDecisions(pending.definition_id, remaining, decided)
    return BindingPlan(pending.definition_id, decided)


# --- plan validation -------------------------------------------------------------


def validate_plan(
    plan: BindingPlan, definition: ProcessDefinition, registry: Registry
) -> list[Diagnostic]:
    """Pre-start gate: coverage, capability match, datatypes, constraints."""
    diagnostics: list[Diagnostic] = []
    if plan.definition_id != definition.id:
        diagnostics.append(
            Diagnostic(
                "DefinitionMismatch",
                plan.definition_id,
                f"plan is for {plan.definition_id!r}, not {definition.id!r}",
            )
        )
    tasks = {task.id: task for task in definition.capability_tasks()}
    for task_id in tasks:
        if task_id not in plan.bindings:
            diagnostics.append(
                Diagnostic("MissingBinding", task_id, "capability task not bound")
            )
    for task_id, bound in plan.bindings.items():
        task = tasks.get(task_id)
        if task is None:
            diagnostics.append(
                Diagnostic("ExtraBinding", task_id, "no such capability task")
            )
            continue
        if not any(s.iri == bound.skill_iri for s in registry.skills()):
            diagnostics.append(
                Diagnostic("UnknownSkill", bound.skill_iri, "skill not registered")
            )
            continue
        skill = registry.skill(bound.skill_iri)
        binding = task.binding
        if binding is None:
            diagnostics.append(
                Diagnostic("UnboundTask", task_id, "task carries no capability")
            )
            continue
        if skill.capability_iri != binding.capability_iri:
            diagnostics.append(
                Diagnostic(
                    "CapabilityMismatch",
                    task_id,
                    f"{skill.iri} executes {skill.capability_iri}, "
                    f"task wants {binding.capability_iri}",
                )
            )
            continue
        diagnostics.extend(_assignment_diagnostics(task_id, bound, skill, registry))
    return diagnostics


def _assignment_diagnostics(
    task_id: str, bound: TaskBinding, skill: Skill, registry: Registry
):
    parameters = {v.name: v for v in skill.parameters}
    results = {v.name: v for v in skill.results}
    capability = registry.capability(skill.capability_iri)
    for name, value in bound.parameter_assignments.items():
        var = parameters.get(name)
        if var is None:
            yield Diagnostic(
                "UnknownParameter", name, f"skill {skill.iri} has no parameter {name!r}"
            )
            continue
        if not isinstance(value, Constant):
            continue  # variable-valued: checked at invocation time
        if not matches(value.value, var.datatype):
            yield Diagnostic(
                "DatatypeMismatch",
                name,
                f"constant is {value_datatype(value.value).value}, "
                f"parameter wants {var.datatype.value}",
            )
            continue
        if var.linked_property is not None:
            prop = capability.property_by_iri(var.linked_property)
            if prop is not None:
                result = check_constraint(prop, value.value)
                if not result.satisfied:
                    yield Diagnostic(
                        "ConstraintViolated",
                        name,
                        f"constant {value.render()} violates {result.violated_bound}",
                    )
    for name in bound.output_assignments:
        if name not in results:
            yield Diagnostic(
                "UnknownResult", name, f"skill {skill.iri} has no result {name!r}"
            )


# --- JSON form ---------------------------------------------------------------------


def plan_to_json(plan: BindingPlan) -> dict:
    return {
        "definitionId": plan.definition_id,
        "bindings": {
            task_id: {
                "skill": bound.skill_iri,
                "parameters": {
                    name: value.render()
                    for name, value in bound.parameter_assignments.items()
                },
                "outputs": dict(bound.output_assignments),
            }
            for task_id, bound in plan.bindings.items()
        },
    }


def plan_from_json(obj: dict) -> BindingPlan:
    try:
        bindings = {
            task_id: TaskBinding(
                skill_iri=raw["skill"],
                parameter_assignments={
                    name: parse_value_expr(text)
                    for name, text in raw.get("parameters", {}).items()
                },
                output_assignments=dict(raw.get("outputs", {})),
            )
            for task_id, raw in obj.get("bindings", {}).items()
        }
        return BindingPlan(obj["definitionId"], bindings)
    except (KeyError, TypeError, AttributeError) as err:
        raise ParseError(f"malformed plan document: {err!r}") from err


def plan_dumps(plan: BindingPlan) -> str:
    return json.dumps(plan_to_json(plan), indent=2, sort_keys=True)


def pending_to_json(pending: PendingDecisions) -> dict:
    return {
        "definitionId": pending.definition_id,
        "pending": [
            {
                "taskId": choice.task_id,
                "capability": choice.capability_iri,
                "candidates": list(choice.candidates),
            }
            for choice in pending.pending
        ],
        "decided": plan_to_json(
            BindingPlan(pending.definition_id, pending.decided)
        )["bindings"],
    }
