import pytest

from skillflow.bpmn import parse_process
from skillflow.datatypes import Datatype
from skillflow.errors import (
    AmbiguousCapability,
    InvalidBinding,
    NoSkillAvailable,
    NotACandidate,
    UnknownPendingTask,
    UnlinkedProperty,
    ValidationFailed,
)
from skillflow.expressions import Constant, parse_value_expr
from skillflow.processes import (
    CapabilityBinding,
    CapabilityTask,
    EndEvent,
    ProcessDefinition,
    SequenceFlow,
    StartEvent,
)
from skillflow.registry import (
    MachineDescriptor,
    Skill,
    SkillInterfaceDescriptor,
    SkillVariable,
)
from skillflow.resolution import (
    BindingPlan,
    PendingDecisions,
    SelectionPolicy,
    TaskBinding,
    decide,
    map_parameters,
    plan_from_json,
    plan_to_json,
    resolve,
    validate_plan,
)
from process_fixtures import fixture_bytes
from registry_fixtures import (
    DRILL1_MACHINE,
    DRILL1_SKILL,
    DRILL2_SKILL,
    DRILLING_CAP,
    demo_registry,
    drill2,
)


def thermometer():
    return parse_process(fixture_bytes("thermometer.bpmn"))


def both_drills():
    registry = demo_registry()
    registry.register_machine(*drill2())
    return registry


class TestResolve:
    def test_unique_skills_give_complete_plan(self):
        plan = resolve(thermometer(), demo_registry())
        assert isinstance(plan, BindingPlan)
        assert set(plan.bindings) == {
            "Activity_supply",
            "Activity_transport",
            "Activity_drill",
        }

    def test_drill_binding_assignments(self):
        plan = resolve(thermometer(), demo_registry())
        bound = plan.bindings["Activity_drill"]
        assert bound.skill_iri == DRILL1_SKILL
        assert bound.parameter_assignments["noOfHoles"].render() == (
            "${Activity_6k239cs_NoOfHoles}"
        )
        assert bound.output_assignments == {"drillDuration": "drillDuration"}

    def test_supply_binding_assignment(self):
        plan = resolve(thermometer(), demo_registry())
        bound = plan.bindings["Activity_supply"]
        assert bound.parameter_assignments["color"].render() == (
            "${Activity_6k239cs_Color}"
        )

    def test_no_skill_available(self):
        registry = demo_registry()
        registry.unregister_machine(DRILL1_MACHINE)
        with pytest.raises(NoSkillAvailable) as err:
            resolve(thermometer(), registry)
        assert err.value.task_id == "Activity_drill"
        assert err.value.capability_iri == DRILLING_CAP

    def test_ambiguity_auto_strict(self):
        with pytest.raises(AmbiguousCapability) as err:
            resolve(thermometer(), both_drills(), SelectionPolicy.AUTO_STRICT)
        assert err.value.task_id == "Activity_drill"
        assert len(err.value.candidates) == 2

    def test_ambiguity_interactive(self):
        result = resolve(thermometer(), both_drills(), SelectionPolicy.INTERACTIVE)
        assert isinstance(result, PendingDecisions)
        assert len(result.pending) == 1
        choice = result.pending[0]
        assert choice.task_id == "Activity_drill"
        assert choice.candidates == (DRILL1_SKILL, DRILL2_SKILL)
        # the unambiguous tasks are already bound
        assert set(result.decided) == {"Activity_supply", "Activity_transport"}

    def test_first_deterministic_picks_smallest_iri(self):
        plan = resolve(thermometer(), both_drills(), SelectionPolicy.FIRST_DETERMINISTIC)
        assert plan.bindings["Activity_drill"].skill_iri == DRILL1_SKILL

    def test_first_deterministic_ignores_registration_order(self):
        registry = demo_registry()
        registry.unregister_machine(DRILL1_MACHINE)
        registry.register_machine(*drill2())
        machine, skills = (
            demo_registry().machine(DRILL1_MACHINE),
            [demo_registry().skill(DRILL1_SKILL)],
        )
        registry.register_machine(machine, skills)
        plan = resolve(thermometer(), registry, SelectionPolicy.FIRST_DETERMINISTIC)
        assert plan.bindings["Activity_drill"].skill_iri == DRILL1_SKILL

    def test_validation_gate(self):
        definition = thermometer()
        over_limit = attach_over_limit(definition)
        with pytest.raises(ValidationFailed):
            resolve(over_limit, demo_registry())

    def test_deterministic(self):
        for policy in (SelectionPolicy.AUTO_STRICT, SelectionPolicy.FIRST_DETERMINISTIC):
            assert resolve(thermometer(), demo_registry(), policy) == resolve(
                thermometer(), demo_registry(), policy
            )

    def test_module_swap_only_changes_skill_iri(self):
        r1 = demo_registry()
        r2 = demo_registry()
        r2.unregister_machine(DRILL1_MACHINE)
        r2.register_machine(*drill2())
        data = fixture_bytes("thermometer.bpmn")
        plan1 = resolve(parse_process(data), r1)
        plan2 = resolve(parse_process(data), r2)
        bound1 = plan1.bindings["Activity_drill"]
        bound2 = plan2.bindings["Activity_drill"]
        assert bound1.skill_iri == DRILL1_SKILL
        assert bound2.skill_iri == DRILL2_SKILL
        assert bound1.parameter_assignments == bound2.parameter_assignments
        assert bound1.output_assignments == bound2.output_assignments
        for task_id in ("Activity_supply", "Activity_transport"):
            assert plan1.bindings[task_id] == plan2.bindings[task_id]


def attach_over_limit(definition):
    from skillflow.processes import attach_capability

    return attach_capability(
        definition,
        "Activity_drill",
        CapabilityBinding(
            DRILLING_CAP, {"urn:demo:property:no-of-holes": Constant(5)}
        ),
    )


def two_drill_tasks() -> ProcessDefinition:
    binding = CapabilityBinding(
        DRILLING_CAP, {"urn:demo:property:no-of-holes": Constant(1)}
    )
    return ProcessDefinition(
        id="P2",
        nodes=(
            StartEvent("s"),
            CapabilityTask("d1", binding=binding),
            CapabilityTask("d2", binding=binding),
            EndEvent("e"),
        ),
        flows=(
            SequenceFlow("f1", "s", "d1"),
            SequenceFlow("f2", "d1", "d2"),
            SequenceFlow("f3", "d2", "e"),
        ),
    )


class TestDecide:
    def test_decide_completes_plan(self):
        pending = resolve(thermometer(), both_drills(), SelectionPolicy.INTERACTIVE)
        plan = decide(pending, "Activity_drill", DRILL2_SKILL)
        assert isinstance(plan, BindingPlan)
        assert plan.bindings["Activity_drill"].skill_iri == DRILL2_SKILL
        assert plan.bindings["Activity_drill"].parameter_assignments[
            "noOfHoles"
        ].render() == "${Activity_6k239cs_NoOfHoles}"

    def test_decide_not_a_candidate(self):
        pending = resolve(thermometer(), both_drills(), SelectionPolicy.INTERACTIVE)
        with pytest.raises(NotACandidate):
            decide(pending, "Activity_drill", "urn:demo:skill:supply-module:supply")

    def test_decide_unknown_task(self):
        pending = resolve(thermometer(), both_drills(), SelectionPolicy.INTERACTIVE)
        with pytest.raises(UnknownPendingTask):
            decide(pending, "Activity_supply", DRILL1_SKILL)

    def test_decide_stepwise(self):
        pending = resolve(two_drill_tasks(), both_drills(), SelectionPolicy.INTERACTIVE)
        assert len(pending.pending) == 2
        after_one = decide(pending, "d1", DRILL1_SKILL)
        assert isinstance(after_one, PendingDecisions)
        assert [p.task_id for p in after_one.pending] == ["d2"]
        with pytest.raises(UnknownPendingTask):
            decide(after_one, "d1", DRILL2_SKILL)
        plan = decide(after_one, "d2", DRILL2_SKILL)
        assert isinstance(plan, BindingPlan)
        assert plan.bindings["d1"].skill_iri == DRILL1_SKILL
        assert plan.bindings["d2"].skill_iri == DRILL2_SKILL

    def test_original_pending_unchanged(self):
        pending = resolve(two_drill_tasks(), both_drills(), SelectionPolicy.INTERACTIVE)
        decide(pending, "d1", DRILL1_SKILL)
        assert len(pending.pending) == 2


class TestMapParameters:
    def test_empty_binding(self):
        binding = CapabilityBinding("urn:demo:capability:transport")
        skill = demo_registry().skill("urn:demo:skill:transport-module:move")
        assert map_parameters(binding, skill) == ({}, {})

    def test_unlinked_property(self):
        unlinked = Skill(
            iri="urn:x:skill:bare-drill",
            name="Bare drill",
            capability_iri=DRILLING_CAP,
            machine_iri="urn:x:m",
            parameters=(SkillVariable("holes", Datatype.INTEGER, None),),
            interface=SkillInterfaceDescriptor("in-process", "bare"),
        )
        binding = CapabilityBinding(
            DRILLING_CAP,
            {"urn:demo:property:no-of-holes": Constant(2)},
        )
        with pytest.raises(UnlinkedProperty) as err:
            map_parameters(binding, unlinked)
        assert err.value.property_iri == "urn:demo:property:no-of-holes"
        assert err.value.skill_iri == "urn:x:skill:bare-drill"

    def test_capability_mismatch(self):
        binding = CapabilityBinding("urn:demo:capability:transport")
        skill = demo_registry().skill(DRILL1_SKILL)
        with pytest.raises(InvalidBinding):
            map_parameters(binding, skill)


class TestValidatePlan:
    def test_resolved_plan_is_clean(self):
        plan = resolve(thermometer(), demo_registry())
        assert validate_plan(plan, thermometer(), demo_registry()) == []

    def test_constant_over_limit(self):
        definition = attach_over_limit(thermometer())
        plan = BindingPlan(
            definition.id,
            {
                **resolve(thermometer(), demo_registry()).bindings,
                "Activity_drill": TaskBinding(
                    DRILL1_SKILL, {"noOfHoles": Constant(9)}, {}
                ),
            },
        )
        diagnostics = validate_plan(plan, definition, demo_registry())
        assert [d.code for d in diagnostics] == ["ConstraintViolated"]
        assert "max=4" in diagnostics[0].message

    def test_wrong_capability_skill(self):
        base = resolve(thermometer(), demo_registry())
        plan = BindingPlan(
            base.definition_id,
            {
                **base.bindings,
                "Activity_drill": TaskBinding(
                    "urn:demo:skill:transport-module:move"
                ),
            },
        )
        diagnostics = validate_plan(plan, thermometer(), demo_registry())
        assert [d.code for d in diagnostics] == ["CapabilityMismatch"]

    def test_missing_binding(self):
        base = resolve(thermometer(), demo_registry())
        bindings = dict(base.bindings)
        del bindings["Activity_drill"]
        plan = BindingPlan(base.definition_id, bindings)
        diagnostics = validate_plan(plan, thermometer(), demo_registry())
        assert [d.code for d in diagnostics] == ["MissingBinding"]

    def test_unknown_skill(self):
        base = resolve(thermometer(), demo_registry())
        plan = BindingPlan(
            base.definition_id,
            {**base.bindings, "Activity_drill": TaskBinding("urn:x:ghost")},
        )
        diagnostics = validate_plan(plan, thermometer(), demo_registry())
        assert [d.code for d in diagnostics] == ["UnknownSkill"]

    def test_constant_wrong_datatype(self):
        base = resolve(thermometer(), demo_registry())
        plan = BindingPlan(
            base.definition_id,
            {
                **base.bindings,
                "Activity_drill": TaskBinding(
                    DRILL1_SKILL, {"noOfHoles": Constant("three")}, {}
                ),
            },
        )
        diagnostics = validate_plan(plan, thermometer(), demo_registry())
        assert [d.code for d in diagnostics] == ["DatatypeMismatch"]

    def test_unknown_parameter_and_result(self):
        base = resolve(thermometer(), demo_registry())
        plan = BindingPlan(
            base.definition_id,
            {
                **base.bindings,
                "Activity_drill": TaskBinding(
                    DRILL1_SKILL, {"depth": Constant(1)}, {"speed": "v"}
                ),
            },
        )
        codes = {d.code for d in validate_plan(plan, thermometer(), demo_registry())}
        assert codes == {"UnknownParameter", "UnknownResult"}

    def test_extra_binding(self):
        base = resolve(thermometer(), demo_registry())
        plan = BindingPlan(
            base.definition_id,
            {**base.bindings, "NotATask": TaskBinding(DRILL1_SKILL)},
        )
        diagnostics = validate_plan(plan, thermometer(), demo_registry())
        assert [d.code for d in diagnostics] == ["ExtraBinding"]

    def test_definition_mismatch(self):
        plan = resolve(thermometer(), demo_registry())
        other = ProcessDefinition(
            id="Other",
            nodes=(StartEvent("s"), EndEvent("e")),
            flows=(SequenceFlow("f", "s", "e"),),
        )
        codes = [d.code for d in validate_plan(plan, other, demo_registry())]
        assert "DefinitionMismatch" in codes


class TestJson:
    def test_round_trip(self):
        plan = resolve(thermometer(), demo_registry())
        assert plan_from_json(plan_to_json(plan)) == plan

    def test_shape(self):
        plan = resolve(thermometer(), demo_registry())
        obj = plan_to_json(plan)
        assert obj["definitionId"] == "Process_thermometer"
        drill = obj["bindings"]["Activity_drill"]
        assert drill["skill"] == DRILL1_SKILL
        assert drill["parameters"] == {"noOfHoles": "${Activity_6k239cs_NoOfHoles}"}
        assert drill["outputs"] == {"drillDuration": "drillDuration"}

    def test_expression_strings_reparse(self):
        plan = BindingPlan(
            "P",
            {
                "t": TaskBinding(
                    "urn:x:s",
                    {
                        "a": Constant(3),
                        "b": Constant(2.5),
                        "c": Constant(True),
                        "d": Constant("red"),
                        "e": parse_value_expr("${x + 1 * 2}"),
                    },
                    {"out": "var"},
                )
            },
        )
        assert plan_from_json(plan_to_json(plan)) == plan

    def test_policy_parse(self):
        assert SelectionPolicy.parse("Interactive") is SelectionPolicy.INTERACTIVE
        with pytest.raises(ValueError):
            SelectionPolicy.parse("Greedy")
