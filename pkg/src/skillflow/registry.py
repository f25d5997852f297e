"""Typed store of machines, capabilities, and skills.

Capabilities are plant-independent descriptions of machine functions with
typed input/output property elements; skills are the executable
implementations hosted by exactly one machine each. The registry validates
the referential invariants between them and answers the queries resolution
and execution need.

Documents are UTF-8 JSON with top-level "capabilities" and "machines"
lists; see ``load_registry`` / ``dump_registry``.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace
from urllib.parse import urlparse

from .datatypes import Datatype, matches
from .errors import (
    DatatypeMismatch,
    DuplicateIri,
    ParseError,
    UnknownIri,
    ValidationError,
)

# --- domain types ---------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """Bound predicate on a property: min/max for numerics, enum for strings."""

    minimum: int | float | None = None
    maximum: int | float | None = None
    enum: tuple[str, ...] | None = None


@dataclass(frozen=True)
class PropertyElement:
    iri: str
    name: str
    datatype: Datatype
    unit: str | None = None
    constraint: Constraint | None = None


@dataclass(frozen=True)
class Capability:
    iri: str
    name: str
    inputs: tuple[PropertyElement, ...] = ()
    outputs: tuple[PropertyElement, ...] = ()

    def property_by_iri(self, iri: str) -> PropertyElement | None:
        for prop in self.inputs + self.outputs:
            if prop.iri == iri:
                return prop
        return None


@dataclass(frozen=True)
class SkillVariable:
    name: str
    datatype: Datatype
    linked_property: str | None = None


@dataclass(frozen=True)
class SkillInterfaceDescriptor:
    transport: str  # "in-process" | "http"
    skill_id: str
    base_url: str | None = None


@dataclass(frozen=True)
class Skill:
    iri: str
    name: str
    capability_iri: str
    machine_iri: str
    parameters: tuple[SkillVariable, ...] = ()
    results: tuple[SkillVariable, ...] = ()
    interface: SkillInterfaceDescriptor = SkillInterfaceDescriptor("in-process", "")

    def parameter_linked_to(self, property_iri: str) -> SkillVariable | None:
        for var in self.parameters:
            if var.linked_property == property_iri:
                return var
        return None

    def result_linked_to(self, property_iri: str) -> SkillVariable | None:
        for var in self.results:
            if var.linked_property == property_iri:
                return var
        return None


@dataclass(frozen=True)
class MachineDescriptor:
    iri: str
    name: str
    skill_iris: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConstraintResult:
    satisfied: bool
    violated_bound: str | None = None  # e.g. "max=4" or "enum=red|green"


# --- constraint checking ----------------------------------------------------


def check_constraint(prop: PropertyElement, value: object) -> ConstraintResult:
    """Check a typed value against a property's bound predicate."""
    if not matches(value, prop.datatype):
        raise DatatypeMismatch(prop.datatype.value, value)
    c = prop.constraint
    if c is None:
        return ConstraintResult(True)
    if c.minimum is not None and value < c.minimum:  # type: ignore[operator]
        return ConstraintResult(False, f"min={c.minimum}")
    if c.maximum is not None and value > c.maximum:  # type: ignore[operator]
        return ConstraintResult(False, f"max={c.maximum}")
    if c.enum is not None and value not in c.enum:
        return ConstraintResult(False, "enum=" + "|".join(c.enum))
    return ConstraintResult(True)


# --- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class _State:
    capabilities: dict[str, Capability] = field(default_factory=dict)
    machines: dict[str, MachineDescriptor] = field(default_factory=dict)
    skills: dict[str, Skill] = field(default_factory=dict)


class Registry:
    """Mutable store with atomic writes.

    Readers work off an immutable state snapshot swapped in one reference
    assignment, so a concurrent register/unregister is never observed
    half-applied.
    """

    def __init__(self, state: _State | None = None) -> None:
        self._state = state or _State()
        self._write_lock = threading.Lock()

    # -- queries ------------------------------------------------------------

    def capabilities(self) -> list[Capability]:
        return sorted(self._state.capabilities.values(), key=lambda c: c.iri)

    def machines(self) -> list[MachineDescriptor]:
        return sorted(self._state.machines.values(), key=lambda m: m.iri)

    def skills(self) -> list[Skill]:
        return sorted(self._state.skills.values(), key=lambda s: s.iri)

    def capability(self, iri: str) -> Capability:
        try:
            return self._state.capabilities[iri]
        except KeyError:
            raise UnknownIri(iri) from None

    def machine(self, iri: str) -> MachineDescriptor:
        try:
            return self._state.machines[iri]
        except KeyError:
            raise UnknownIri(iri) from None

    def skill(self, iri: str) -> Skill:
        try:
            return self._state.skills[iri]
        except KeyError:
            raise UnknownIri(iri) from None

    def has_capability(self, iri: str) -> bool:
        return iri in self._state.capabilities

    def skills_for_capability(self, capability_iri: str) -> list[Skill]:
        """All skills executing a capability, ordered by skill iri."""
        state = self._state
        if capability_iri not in state.capabilities:
            raise UnknownIri(capability_iri)
        found = [
            s for s in state.skills.values() if s.capability_iri == capability_iri
        ]
        return sorted(found, key=lambda s: s.iri)

    # -- mutation -------------------------------------------------------------

    def add_capability(self, capability: Capability) -> None:
        with self._write_lock:
            state = self._state
            if capability.iri in state.capabilities:
                raise DuplicateIri(capability.iri)
            _validate_capability(capability)
            caps = dict(state.capabilities)
            caps[capability.iri] = capability
            self._state = replace(state, capabilities=caps)

    def register_machine(
        self, machine: MachineDescriptor, skills: list[Skill]
    ) -> None:
        """Add a machine and its skills atomically."""
        with self._write_lock:
            state = self._state
            if machine.iri in state.machines:
                raise DuplicateIri(machine.iri)
            listed = set(machine.skill_iris)
            provided = {s.iri for s in skills}
            if listed != provided:
                raise ValidationError(
                    "machine skill list does not match the provided skills",
                    machine.iri,
                )
            new_skills = dict(state.skills)
            for skill in skills:
                if skill.iri in new_skills:
                    raise DuplicateIri(skill.iri)
                if skill.machine_iri != machine.iri:
                    raise ValidationError(
                        "skill names a different machine", skill.iri
                    )
                _validate_skill(skill, state.capabilities)
                new_skills[skill.iri] = skill
            machines = dict(state.machines)
            machines[machine.iri] = machine
            self._state = replace(state, machines=machines, skills=new_skills)

    def unregister_machine(self, machine_iri: str) -> None:
        """Remove a machine and its skills; capabilities stay."""
        with self._write_lock:
            state = self._state
            if machine_iri not in state.machines:
                raise UnknownIri(machine_iri)
            machine = state.machines[machine_iri]
            machines = dict(state.machines)
            del machines[machine_iri]
            skills = {
                iri: s
                for iri, s in state.skills.items()
                if iri not in set(machine.skill_iris)
            }
            self._state = replace(state, machines=machines, skills=skills)

    # -- equivalence ------------------------------------------------------------

    def query_equivalent(self, other: "Registry") -> bool:
        a, b = self._state, other._state
        return (
            a.capabilities == b.capabilities
            and a.machines == b.machines
            and a.skills == b.skills
        )


# --- validation ---------------------------------------------------------------


def _validate_constraint(prop_iri: str, datatype: Datatype, c: Constraint) -> None:
    if c.enum is not None:
        if datatype is not Datatype.STRING:
            raise ValidationError("enum constraint on non-string property", prop_iri)
        if not c.enum:
            raise ValidationError("empty enumeration", prop_iri)
        if c.minimum is not None or c.maximum is not None:
            raise ValidationError("mixed enum and numeric bounds", prop_iri)
    if c.minimum is not None or c.maximum is not None:
        if datatype not in (Datatype.INTEGER, Datatype.REAL):
            raise ValidationError("numeric bounds on non-numeric property", prop_iri)
        if c.minimum is not None and c.maximum is not None and c.minimum > c.maximum:
            raise ValidationError("min exceeds max", prop_iri)


def _validate_capability(capability: Capability) -> None:
    seen: set[str] = set()
    for prop in capability.inputs + capability.outputs:
        if prop.iri in seen:
            raise ValidationError("duplicate property iri", prop.iri)
        seen.add(prop.iri)
        if prop.constraint is not None:
            _validate_constraint(prop.iri, prop.datatype, prop.constraint)


def _validate_skill(skill: Skill, capabilities: dict[str, Capability]) -> None:
    capability = capabilities.get(skill.capability_iri)
    if capability is None:
        raise ValidationError("skill references unknown capability", skill.capability_iri)
    names: set[str] = set()
    for var in skill.parameters + skill.results:
        if var.name in names:
            raise ValidationError(f"duplicate variable name {var.name!r}", skill.iri)
        names.add(var.name)
        if var.linked_property is not None:
            prop = capability.property_by_iri(var.linked_property)
            if prop is None:
                raise ValidationError(
                    "linked property not on the skill's capability",
                    var.linked_property,
                )
            if prop.datatype is not var.datatype:
                raise ValidationError(
                    f"variable {var.name!r} datatype differs from linked property",
                    skill.iri,
                )
    interface = skill.interface
    if interface.transport not in ("in-process", "http"):
        raise ValidationError(
            f"unknown transport {interface.transport!r}", skill.iri
        )
    if interface.transport == "http":
        parsed = urlparse(interface.base_url or "")
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValidationError("http interface needs an absolute URL", skill.iri)


# --- document (de)serialization ---------------------------------------------


def _parse_constraint(obj: dict, prop_iri: str) -> Constraint:
    known = {"min", "max", "enum"}
    unknown = set(obj) - known
    if unknown:
        raise ValidationError(f"unknown constraint keys {sorted(unknown)}", prop_iri)
    enum = obj.get("enum")
    return Constraint(
        minimum=obj.get("min"),
        maximum=obj.get("max"),
        enum=tuple(enum) if enum is not None else None,
    )


def _parse_property(obj: dict) -> PropertyElement:
    iri = obj["iri"]
    constraint = None
    if "constraint" in obj and obj["constraint"] is not None:
        constraint = _parse_constraint(obj["constraint"], iri)
    return PropertyElement(
        iri=iri,
        name=obj.get("name", iri),
        datatype=Datatype.parse(obj["datatype"]),
        unit=obj.get("unit"),
        constraint=constraint,
    )


def _parse_variable(obj: dict) -> SkillVariable:
    return SkillVariable(
        name=obj["name"],
        datatype=Datatype.parse(obj["datatype"]),
        linked_property=obj.get("linkedProperty"),
    )


def parse_capability(obj: dict) -> Capability:
    return Capability(
        iri=obj["iri"],
        name=obj.get("name", obj["iri"]),
        inputs=tuple(_parse_property(p) for p in obj.get("inputs", [])),
        outputs=tuple(_parse_property(p) for p in obj.get("outputs", [])),
    )


def parse_machine_fragment(obj: dict) -> tuple[MachineDescriptor, list[Skill]]:
    """Decode one machine-with-skills document fragment."""
    machine_iri = obj["iri"]
    skills: list[Skill] = []
    for raw in obj.get("skills", []):
        interface_obj = raw.get("interface", {})
        skills.append(
            Skill(
                iri=raw["iri"],
                name=raw.get("name", raw["iri"]),
                capability_iri=raw["capability"],
                machine_iri=machine_iri,
                parameters=tuple(
                    _parse_variable(v) for v in raw.get("parameters", [])
                ),
                results=tuple(_parse_variable(v) for v in raw.get("results", [])),
                interface=SkillInterfaceDescriptor(
                    transport=interface_obj.get("transport", "in-process"),
                    skill_id=interface_obj.get("skillId", raw["iri"]),
                    base_url=interface_obj.get("baseUrl"),
                ),
            )
        )
    machine = MachineDescriptor(
        iri=machine_iri,
        name=obj.get("name", machine_iri),
        skill_iris=tuple(s.iri for s in skills),
    )
    return machine, skills


def load_registry(document: bytes | str) -> Registry:
    """Parse and validate a registry document."""
    try:
        text = document.decode("utf-8") if isinstance(document, bytes) else document
        obj = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ParseError(str(err)) from err
    if not isinstance(obj, dict):
        raise ParseError("registry document must be a JSON object")
    registry = Registry()
    try:
        for raw in obj.get("capabilities", []):
            registry.add_capability(parse_capability(raw))
        for raw in obj.get("machines", []):
            machine, skills = parse_machine_fragment(raw)
            registry.register_machine(machine, skills)
    except KeyError as err:
        raise ParseError(f"missing required key {err}") from err
    return registry


def _constraint_json(c: Constraint) -> dict:
    out: dict = {}
    if c.minimum is not None:
        out["min"] = c.minimum
    if c.maximum is not None:
        out["max"] = c.maximum
    if c.enum is not None:
        out["enum"] = list(c.enum)
    return out


def _property_json(p: PropertyElement) -> dict:
    out: dict = {"iri": p.iri, "name": p.name, "datatype": p.datatype.value}
    if p.unit is not None:
        out["unit"] = p.unit
    if p.constraint is not None:
        out["constraint"] = _constraint_json(p.constraint)
    return out


def _variable_json(v: SkillVariable) -> dict:
    out: dict = {"name": v.name, "datatype": v.datatype.value}
    if v.linked_property is not None:
        out["linkedProperty"] = v.linked_property
    return out


def capability_json(c: Capability) -> dict:
    return {
        "iri": c.iri,
        "name": c.name,
        "inputs": [_property_json(p) for p in c.inputs],
        "outputs": [_property_json(p) for p in c.outputs],
    }


def skill_json(s: Skill) -> dict:
    interface: dict = {
        "transport": s.interface.transport,
        "skillId": s.interface.skill_id,
    }
    if s.interface.base_url is not None:
        interface["baseUrl"] = s.interface.base_url
    return {
        "iri": s.iri,
        "name": s.name,
        "capability": s.capability_iri,
        "parameters": [_variable_json(v) for v in s.parameters],
        "results": [_variable_json(v) for v in s.results],
        "interface": interface,
    }


def machine_json(registry: Registry, machine: MachineDescriptor) -> dict:
    return {
        "iri": machine.iri,
        "name": machine.name,
        "skills": [skill_json(registry.skill(iri)) for iri in machine.skill_iris],
    }


def dump_registry(registry: Registry) -> bytes:
    document = {
        "capabilities": [capability_json(c) for c in registry.capabilities()],
        "machines": [machine_json(registry, m) for m in registry.machines()],
    }
    return json.dumps(document, indent=2).encode("utf-8")
