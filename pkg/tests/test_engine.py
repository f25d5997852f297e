"""Executor tests.

Routing correctness is argued two ways: a few hand-sized graphs with
known answers, and agreement with an independent edge-marking
interpreter (tests/engine_oracle.py) over a few hundred random graphs.
Skill delegation runs against real virtual modules; replay determinism
runs against a scripted connector with canned state sequences.
"""

from __future__ import annotations

import dataclasses
import json
import random
import threading
import time
from collections import Counter, defaultdict, deque

import pytest

import engine_oracle
from plant_fixtures import path_is_legal, spawn_demo_plant
from process_fixtures import fixture_bytes
from registry_fixtures import (
    DRILL1_MACHINE,
    DRILL1_SKILL,
    DRILLING_CAP,
    demo_registry,
)

from skillflow.bpmn import parse_process
from skillflow.connectors import HttpSkillConnector, InProcessConnector, SkillStatus
from skillflow.datatypes import Datatype
from skillflow.engine import Engine, InstanceStatus, event_from_json, event_json
from skillflow.errors import (
    AlreadyEnded,
    DatatypeMismatch,
    MissingField,
    NoOpenWorkItem,
    PlanMismatch,
    SkillUnreachable,
    UnknownInstance,
    UnknownParameter,
    UnknownSkill,
    ValidationFailed,
)
from skillflow.expressions import Constant, Expression, parse_expression
from skillflow.notifications import MemorySink
from skillflow.plant import FailureInjection
from skillflow.processes import (
    BoundaryErrorEvent,
    CapabilityBinding,
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
from skillflow.registry import Registry, SkillInterfaceDescriptor
from skillflow.resolution import BindingPlan, SelectionPolicy, TaskBinding, resolve
from skillflow.statemachine import SkillState, TransitionCommand

ENDED = (InstanceStatus.COMPLETED, InstanceStatus.FAULTED, InstanceStatus.CANCELLED)

USER_TASK = "Activity_6k239cs"


def expr(text: str) -> Expression:
    return Expression(parse_expression(text), "${" + text + "}")


def linear_def(def_id: str, *middle) -> ProcessDefinition:
    nodes = [StartEvent("start"), *middle, EndEvent("end")]
    ids = [n.id for n in nodes]
    flows = tuple(
        SequenceFlow(f"f{i}", a, b) for i, (a, b) in enumerate(zip(ids, ids[1:]))
    )
    return ProcessDefinition(id=def_id, nodes=tuple(nodes), flows=flows)


def empty_plan(definition: ProcessDefinition) -> BindingPlan:
    return BindingPlan(definition.id, {})


def thermometer() -> ProcessDefinition:
    return parse_process(fixture_bytes("thermometer.bpmn"))


def kinds(history) -> list[str]:
    return [e.kind for e in history]


def completions(history) -> Counter:
    return Counter(e.payload["node"] for e in history if e.kind == "NodeCompleted")


def throws(history) -> list[dict]:
    return [dict(e.payload) for e in history if e.kind == "ErrorThrown"]


def catches(history) -> list[dict]:
    return [dict(e.payload) for e in history if e.kind == "ErrorCaught"]


def ended_payload(history) -> dict:
    ends = [dict(e.payload) for e in history if e.kind == "InstanceEnded"]
    assert len(ends) == 1
    return ends[0]


def wait_status(engine, instance_id, wanted, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        view = engine.snapshot(instance_id)
        if view.status in wanted:
            return view
        time.sleep(0.004)
    raise AssertionError(f"stuck in {engine.snapshot(instance_id).status}")


def wait_plant_state(runtime, target, timeout=3.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if runtime.snapshot().state is target:
            return
        time.sleep(0.003)
    raise AssertionError(f"skill never reached {target}")


def assert_conserved(history, tokens):
    """On a Completed run every entry is matched by a completion or a catch."""
    entered = Counter(e.payload["node"] for e in history if e.kind == "NodeEntered")
    consumed = completions(history) + Counter(
        e.payload["host"] for e in history if e.kind == "ErrorCaught"
    )
    assert entered == consumed
    assert tokens == {}


class Rig:
    """Engine wired to in-process demo plant modules."""

    def __init__(self, **plant_kwargs):
        self.handles = spawn_demo_plant(**plant_kwargs)
        self.registry = demo_registry()
        self.sink = MemorySink()
        self.connector = InProcessConnector([h.module for h in self.handles])
        self.engine = Engine(
            self.registry,
            self.connector,
            sink=self.sink,
            poll_timeout_s=0.05,
            recovery_timeout_s=3.0,
        )

    def module(self, skill_id):
        for handle in self.handles:
            if skill_id in handle.module.skill_ids():
                return handle.module
        raise KeyError(skill_id)

    def runtime(self, skill_id):
        return self.module(skill_id).runtime(skill_id)

    def thermometer_plan(self):
        definition = thermometer()
        plan = resolve(definition, self.registry, SelectionPolicy.FIRST_DETERMINISTIC)
        return definition, plan

    def start_thermometer(self, color="red", holes=3):
        definition, plan = self.thermometer_plan()
        instance_id = self.engine.start_instance(definition, plan)
        self.engine.complete_user_task(
            instance_id, USER_TASK, {"Color": color, "NoOfHoles": holes}
        )
        return instance_id

    def close(self):
        self.engine.shutdown()
        for handle in self.handles:
            handle.close()


@pytest.fixture
def make_rig():
    rigs = []

    def factory(**kwargs):
        rig = Rig(**kwargs)
        rigs.append(rig)
        return rig

    yield factory
    for rig in rigs:
        rig.close()


@pytest.fixture
def rig(make_rig):
    return make_rig()


@pytest.fixture
def engine():
    eng = Engine(Registry(), InProcessConnector(), poll_timeout_s=0.05)
    yield eng
    eng.shutdown()


# --- start gate -----------------------------------------------------------------


class TestStartGate:
    def test_trivial_process_completes_synchronously(self, engine):
        definition = linear_def("triv")
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.COMPLETED
        assert view.tokens == {}
        history = engine.history(instance_id)
        assert kinds(history) == [
            "NodeEntered",
            "NodeCompleted",
            "NodeEntered",
            "NodeCompleted",
            "InstanceEnded",
        ]
        assert ended_payload(history) == {"status": "Completed", "node": "end"}

    def test_plan_for_other_definition_rejected(self, engine):
        definition = linear_def("triv")
        with pytest.raises(PlanMismatch):
            engine.start_instance(definition, BindingPlan("other", {}))

    def test_plan_must_cover_every_capability_task(self):
        registry = demo_registry()
        engine = Engine(registry, InProcessConnector())
        definition = thermometer()
        plan = resolve(definition, registry, SelectionPolicy.FIRST_DETERMINISTIC)
        partial = BindingPlan(
            plan.definition_id,
            {k: v for k, v in plan.bindings.items() if k != "Activity_drill"},
        )
        with pytest.raises(PlanMismatch, match="Activity_drill"):
            engine.start_instance(definition, partial)

    def test_plan_with_stray_binding_rejected(self, engine):
        definition = linear_def("triv")
        stray = BindingPlan(
            "triv", {"ghost": TaskBinding("urn:x:skill", {}, {})}
        )
        with pytest.raises(PlanMismatch, match="ghost"):
            engine.start_instance(definition, stray)

    def test_plan_violating_constraint_rejected_up_front(self):
        registry = demo_registry()
        engine = Engine(registry, InProcessConnector())
        definition = thermometer()
        plan = resolve(definition, registry, SelectionPolicy.FIRST_DETERMINISTIC)
        drill = plan.bindings["Activity_drill"]
        bad = BindingPlan(
            plan.definition_id,
            {
                **plan.bindings,
                "Activity_drill": TaskBinding(
                    drill.skill_iri,
                    {**drill.parameter_assignments, "noOfHoles": Constant(9)},
                    drill.output_assignments,
                ),
            },
        )
        with pytest.raises(ValidationFailed) as err:
            engine.start_instance(definition, bad)
        assert any(d.code == "ConstraintViolated" for d in err.value.diagnostics)

    def test_structurally_broken_definition_rejected(self, engine):
        definition = ProcessDefinition(
            id="broken",
            nodes=(StartEvent("start"), EndEvent("end")),
            flows=(SequenceFlow("f0", "start", "missing"),),
        )
        with pytest.raises(ValidationFailed):
            engine.start_instance(definition, empty_plan(definition))

    def test_duplicate_instance_id_rejected(self, engine):
        definition = linear_def("triv")
        engine.start_instance(definition, empty_plan(definition), instance_id="i-dup")
        with pytest.raises(PlanMismatch):
            engine.start_instance(
                definition, empty_plan(definition), instance_id="i-dup"
            )

    def test_initial_variables_recorded_first(self, engine):
        definition = linear_def("triv")
        instance_id = engine.start_instance(
            definition, empty_plan(definition), initial_vars={"a": 1, "b": "x"}
        )
        history = engine.history(instance_id)
        assert kinds(history)[:2] == ["VariableSet", "VariableSet"]
        assert engine.snapshot(instance_id).variables == {"a": 1, "b": "x"}

    def test_initial_variables_must_be_primitive(self, engine):
        definition = linear_def("triv")
        with pytest.raises(DatatypeMismatch):
            engine.start_instance(
                definition, empty_plan(definition), initial_vars={"a": [1]}
            )
        assert engine.list_instances() == []

    def test_unknown_instance_everywhere(self, engine):
        with pytest.raises(UnknownInstance):
            engine.snapshot("i-nope")
        with pytest.raises(UnknownInstance):
            engine.cancel_instance("i-nope")
        with pytest.raises(UnknownInstance):
            engine.complete_user_task("i-nope", "t", {})
        with pytest.raises(UnknownInstance):
            engine.history("i-nope")
        with pytest.raises(UnknownInstance):
            engine.wait_events("i-nope")


# --- user tasks -------------------------------------------------------------------


def ask_def() -> ProcessDefinition:
    task = UserTask(
        "ask",
        form_fields=(
            FormField("Color", Datatype.STRING),
            FormField("N", Datatype.INTEGER),
        ),
    )
    return linear_def("asking", task)


class TestUserTasks:
    def test_open_work_item_parks_the_instance(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.WAITING_USER
        assert view.tokens == {"ask": 1}
        (item,) = view.work_items
        assert item.task_id == "ask"
        assert [f.name for f in item.form_fields] == ["Color", "N"]

    def test_completion_writes_prefixed_variables(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        engine.complete_user_task(instance_id, "ask", {"Color": "red", "N": 2})
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.COMPLETED
        assert view.variables == {"ask_Color": "red", "ask_N": 2}
        assert view.work_items == ()

    def test_unknown_task_and_double_completion(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        with pytest.raises(NoOpenWorkItem):
            engine.complete_user_task(instance_id, "nope", {})
        engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": 1})
        with pytest.raises(NoOpenWorkItem):
            engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": 1})

    def test_missing_field_leaves_item_open(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        with pytest.raises(MissingField):
            engine.complete_user_task(instance_id, "ask", {"Color": "red"})
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.WAITING_USER
        assert view.variables == {}

    def test_field_values_are_typed(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        with pytest.raises(DatatypeMismatch):
            engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": "two"})
        with pytest.raises(DatatypeMismatch):
            engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": True})
        with pytest.raises(UnknownParameter):
            engine.complete_user_task(
                instance_id, "ask", {"Color": "r", "N": 1, "Extra": 0}
            )
        assert engine.snapshot(instance_id).status is InstanceStatus.WAITING_USER


# --- gateways ---------------------------------------------------------------------


def xor_def(conditions, default_flow=None, initial=None) -> ProcessDefinition:
    """start -> xor -> (a|b) -> own end; conditions maps branch -> Expression."""
    nodes = (
        StartEvent("start"),
        ExclusiveGateway("xor", default_flow_id=default_flow),
        SendTask("a", subject="a", body="-"),
        SendTask("b", subject="b", body="-"),
        EndEvent("end_a"),
        EndEvent("end_b"),
    )
    flows = (
        SequenceFlow("f0", "start", "xor"),
        SequenceFlow("fa", "xor", "a", condition=conditions.get("a")),
        SequenceFlow("fb", "xor", "b", condition=conditions.get("b")),
        SequenceFlow("f1", "a", "end_a"),
        SequenceFlow("f2", "b", "end_b"),
    )
    return ProcessDefinition(id="branching", nodes=nodes, flows=flows)


class TestGateways:
    def test_first_true_condition_wins_in_document_order(self, engine):
        definition = xor_def({"a": expr("x > 1"), "b": expr("true")})
        instance_id = engine.start_instance(
            definition, empty_plan(definition), initial_vars={"x": 5}
        )
        done = completions(engine.history(instance_id))
        assert done["a"] == 1 and "b" not in done

    def test_default_taken_when_nothing_enables(self, engine):
        definition = xor_def({"a": expr("false")}, default_flow="fb")
        instance_id = engine.start_instance(definition, empty_plan(definition))
        done = completions(engine.history(instance_id))
        assert done["b"] == 1 and "a" not in done

    def test_unconditioned_flow_is_always_true(self, engine):
        definition = xor_def({"b": expr("true")})  # branch a carries no condition
        instance_id = engine.start_instance(definition, empty_plan(definition))
        assert completions(engine.history(instance_id))["a"] == 1

    def test_nothing_enabled_faults(self, engine):
        definition = xor_def({"a": expr("false"), "b": expr("false")})
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.FAULTED
        history = engine.history(instance_id)
        assert throws(history)[0]["code"] == "NoFlowEnabled"
        assert ended_payload(history)["code"] == "NoFlowEnabled"

    def test_condition_on_missing_variable_faults(self, engine):
        definition = xor_def({"a": expr("ghost"), "b": expr("false")})
        instance_id = engine.start_instance(definition, empty_plan(definition))
        assert engine.snapshot(instance_id).status is InstanceStatus.FAULTED
        assert throws(engine.history(instance_id))[0]["code"] == "UnknownVariable"

    def test_non_boolean_condition_faults(self, engine):
        definition = xor_def({"a": expr("x + 1"), "b": expr("false")})
        instance_id = engine.start_instance(
            definition, empty_plan(definition), initial_vars={"x": 1}
        )
        assert throws(engine.history(instance_id))[0]["code"] == "NoFlowEnabled"

    def test_parallel_join_fires_once(self, engine):
        nodes = (
            StartEvent("start"),
            ParallelGateway("fork"),
            SendTask("a", subject="a", body="-"),
            SendTask("b", subject="b", body="-"),
            ParallelGateway("join"),
            EndEvent("end"),
        )
        flows = (
            SequenceFlow("f0", "start", "fork"),
            SequenceFlow("f1", "fork", "a"),
            SequenceFlow("f2", "fork", "b"),
            SequenceFlow("f3", "a", "join"),
            SequenceFlow("f4", "b", "join"),
            SequenceFlow("f5", "join", "end"),
        )
        definition = ProcessDefinition(id="forkjoin", nodes=nodes, flows=flows)
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.COMPLETED
        done = completions(engine.history(instance_id))
        assert done == Counter(
            {"start": 1, "fork": 1, "a": 1, "b": 1, "join": 1, "end": 1}
        )
        assert_conserved(engine.history(instance_id), view.tokens)

    def test_starved_join_parks_the_run(self, engine):
        nodes = (
            StartEvent("start"),
            ExclusiveGateway("xor"),
            SendTask("a", subject="a", body="-"),
            SendTask("b", subject="b", body="-"),
            ParallelGateway("join"),
            EndEvent("end"),
        )
        flows = (
            SequenceFlow("f0", "start", "xor"),
            SequenceFlow("f1", "xor", "a", condition=engine_oracle.TRUE),
            SequenceFlow("f2", "xor", "b", condition=engine_oracle.FALSE),
            SequenceFlow("f3", "a", "join"),
            SequenceFlow("f4", "b", "join"),
            SequenceFlow("f5", "join", "end"),
        )
        definition = ProcessDefinition(id="starved", nodes=nodes, flows=flows)
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.RUNNING
        assert view.tokens == {"join": 1}
        engine.cancel_instance(instance_id)
        assert engine.snapshot(instance_id).status is InstanceStatus.CANCELLED


# --- send tasks and notifications ---------------------------------------------------


class _ExplodingSink:
    def deliver(self, record):
        raise RuntimeError("sink down")


class TestSendTasks:
    def test_send_renders_and_records(self):
        sink = MemorySink()
        engine = Engine(Registry(), InProcessConnector(), sink=sink)
        definition = linear_def(
            "notify", SendTask("tell", subject="made ${n}", body="color ${c}")
        )
        instance_id = engine.start_instance(
            definition, empty_plan(definition), initial_vars={"n": 2, "c": "red"}
        )
        assert engine.snapshot(instance_id).status is InstanceStatus.COMPLETED
        (record,) = engine.notifications()
        assert record.subject == "made 2"
        assert record.body == "color red"
        assert record.instance_id == instance_id
        assert record.task_id == "tell"
        assert sink.records() == [record]

    def test_broken_sink_does_not_break_the_run(self):
        engine = Engine(Registry(), InProcessConnector(), sink=_ExplodingSink())
        definition = linear_def("notify", SendTask("tell", subject="s", body="b"))
        instance_id = engine.start_instance(definition, empty_plan(definition))
        assert engine.snapshot(instance_id).status is InstanceStatus.COMPLETED
        assert len(engine.notifications()) == 1

    def test_template_over_missing_variable_is_catchable(self, engine):
        task = SendTask("tell", subject="s ${ghost}", body="b")
        nodes = (
            StartEvent("start"),
            task,
            BoundaryErrorEvent("guard"),
            EndEvent("end"),
            EndEvent("end_err"),
        )
        flows = (
            SequenceFlow("f0", "start", "tell"),
            SequenceFlow("f1", "tell", "end"),
            SequenceFlow("f2", "guard", "end_err"),
        )
        definition = ProcessDefinition(
            id="notify-err",
            nodes=nodes,
            flows=flows,
            boundary_attachments={"guard": "tell"},
        )
        instance_id = engine.start_instance(definition, empty_plan(definition))
        history = engine.history(instance_id)
        assert throws(history)[0]["code"] == "UnknownVariable"
        assert engine.snapshot(instance_id).status is InstanceStatus.COMPLETED
        assert ended_payload(history)["node"] == "end_err"
        assert engine.notifications() == []


# --- timers ------------------------------------------------------------------------


class TestTimers:
    def test_timer_delays_the_token(self, engine):
        definition = linear_def("timed", TimerCatchEvent("wait", duration="PT0.08S"))
        began = time.monotonic()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.RUNNING
        assert view.tokens == {"wait": 1}
        wait_status(engine, instance_id, (InstanceStatus.COMPLETED,), timeout=2.0)
        assert time.monotonic() - began >= 0.07
        assert completions(engine.history(instance_id))["wait"] == 1

    def test_cancel_beats_the_timer(self, engine):
        definition = linear_def("timed", TimerCatchEvent("wait", duration="PT0.1S"))
        instance_id = engine.start_instance(definition, empty_plan(definition))
        engine.cancel_instance(instance_id)
        assert engine.snapshot(instance_id).status is InstanceStatus.CANCELLED
        frozen = len(engine.history(instance_id))
        time.sleep(0.18)
        assert len(engine.history(instance_id)) == frozen


# --- agreement with the reference interpreter ---------------------------------------


class TestOracleAgreement:
    def test_random_graphs_match_reference(self, engine):
        rng = random.Random(20260818)
        for index in range(220):
            definition = engine_oracle.random_graph(rng, index)
            assert structural_problems(definition) == []
            expected, status, marks = engine_oracle.simulate(definition)
            assert status != "Faulted"  # generator guarantees an enabled flow
            instance_id = engine.start_instance(definition, empty_plan(definition))
            view = engine.snapshot(instance_id)
            history = engine.history(instance_id)
            assert completions(history) == expected, f"graph {index}"
            assert view.status.value == status, f"graph {index}"
            entered = Counter(
                e.payload["node"] for e in history if e.kind == "NodeEntered"
            )
            assert entered == completions(history), f"graph {index}"
            if status == "Completed":
                assert view.tokens == {}, f"graph {index}"
            else:
                # both sides park the same number of tokens at starved joins
                assert sum(view.tokens.values()) == sum(marks.values()), f"graph {index}"


# --- delegation --------------------------------------------------------------------


class TestDelegation:
    def test_thermometer_happy_path(self, rig):
        definition, plan = rig.thermometer_plan()
        instance_id = rig.engine.start_instance(definition, plan)
        assert rig.engine.snapshot(instance_id).status is InstanceStatus.WAITING_USER
        rig.engine.complete_user_task(
            instance_id, USER_TASK, {"Color": "red", "NoOfHoles": 3}
        )
        view = wait_status(rig.engine, instance_id, (InstanceStatus.COMPLETED,))
        assert view.variables["drillDuration"] == 1.5
        assert view.variables[f"{USER_TASK}_Color"] == "red"
        assert rig.engine.notifications() == []
        history = rig.engine.history(instance_id)
        assert ended_payload(history)["node"] == "EndEvent_done"
        assert_conserved(history, view.tokens)

        assert rig.runtime("drill").runs[-1].parameters == {"noOfHoles": 3}
        for skill_id in ("supply", "move", "drill"):
            states = [state for _, state in rig.runtime(skill_id).events()]
            assert path_is_legal(states), f"{skill_id}: {states}"
            for i, state in enumerate(states):
                if state is SkillState.COMPLETE:
                    assert states[i + 1] is SkillState.RESETTING, (
                        f"{skill_id} not reset after Complete"
                    )

        observed = defaultdict(list)
        for event in history:
            if event.kind == "SkillStateObserved":
                observed[event.payload["node"]].append(event.payload["state"])
        assert observed["Activity_drill"] == [
            "Starting",
            "Execute",
            "Completing",
            "Complete",
        ]

    def test_two_tasks_share_one_skill_in_turn(self, rig):
        binding = CapabilityBinding(
            DRILLING_CAP,
            {"urn:demo:property:no-of-holes": Constant(2)},
            {},
        )
        nodes = (
            StartEvent("start"),
            ParallelGateway("fork"),
            CapabilityTask("d1", binding=dataclasses.replace(
                binding, output_mappings={"urn:demo:property:drill-duration": "dur1"}
            )),
            CapabilityTask("d2", binding=dataclasses.replace(
                binding, output_mappings={"urn:demo:property:drill-duration": "dur2"}
            )),
            ParallelGateway("join"),
            EndEvent("end"),
        )
        flows = (
            SequenceFlow("f0", "start", "fork"),
            SequenceFlow("f1", "fork", "d1"),
            SequenceFlow("f2", "fork", "d2"),
            SequenceFlow("f3", "d1", "join"),
            SequenceFlow("f4", "d2", "join"),
            SequenceFlow("f5", "join", "end"),
        )
        definition = ProcessDefinition(id="twin-drill", nodes=nodes, flows=flows)
        plan = resolve(definition, rig.registry, SelectionPolicy.FIRST_DETERMINISTIC)
        instance_id = rig.engine.start_instance(definition, plan)
        view = wait_status(rig.engine, instance_id, (InstanceStatus.COMPLETED,))
        assert view.variables["dur1"] == 1.0
        assert view.variables["dur2"] == 1.0
        assert len(rig.runtime("drill").runs) == 2

        # the second activation must not start until the first finished
        nodes_seen = [
            e.payload["node"]
            for e in rig.engine.history(instance_id)
            if e.kind == "SkillStateObserved"
        ]
        assert len(nodes_seen) == 8
        assert len(set(nodes_seen[:4])) == 1
        assert len(set(nodes_seen[4:])) == 1
        assert nodes_seen[0] != nodes_seen[4]
        states = [s for _, s in rig.runtime("drill").events()]
        assert path_is_legal(states)

    def test_missing_output_is_recorded_not_fatal(self, make_rig):
        rig = make_rig(with_programs=False)
        instance_id = rig.start_thermometer()
        view = wait_status(rig.engine, instance_id, (InstanceStatus.COMPLETED,))
        assert "drillDuration" not in view.variables
        history = rig.engine.history(instance_id)
        assert throws(history) == []
        drill_done = [
            dict(e.payload)
            for e in history
            if e.kind == "NodeCompleted" and e.payload["node"] == "Activity_drill"
        ]
        assert drill_done == [
            {"node": "Activity_drill", "missingOutputs": ["drillDuration"]}
        ]
        assert ended_payload(history)["node"] == "EndEvent_done"


class TestConnectors:
    def test_http_connector_runs_a_skill(self):
        handles = spawn_demo_plant(http=True)
        try:
            handle = next(h for h in handles if "drill" in h.module.skill_ids())
            registry = demo_registry()
            skill = dataclasses.replace(
                registry.skill(DRILL1_SKILL),
                interface=SkillInterfaceDescriptor(
                    "http", "drill", f"http://127.0.0.1:{handle.port}"
                ),
            )
            connector = HttpSkillConnector(timeout_s=2.0)
            try:
                status = connector.status(skill)
                assert status.state is SkillState.IDLE
                connector.set_parameters(skill, {"noOfHoles": 2})
                connector.command(skill, TransitionCommand.START)
                since = status.seq
                seen = []
                deadline = time.monotonic() + 3.0
                while time.monotonic() < deadline:
                    for seq, state in connector.wait_events(skill, since, 0.2):
                        since = seq
                        seen.append(state)
                    if seen and seen[-1] is SkillState.COMPLETE:
                        break
                assert seen[-1] is SkillState.COMPLETE
                assert connector.status(skill).outputs == {"drillDuration": 1.0}
                ghost = dataclasses.replace(
                    skill,
                    interface=SkillInterfaceDescriptor(
                        "http", "nope", f"http://127.0.0.1:{handle.port}"
                    ),
                )
                with pytest.raises(UnknownSkill):
                    connector.status(ghost)
            finally:
                connector.close()
        finally:
            for spawned in handles:
                spawned.close()

    def test_dead_endpoint_is_unreachable(self):
        registry = demo_registry()
        skill = dataclasses.replace(
            registry.skill(DRILL1_SKILL),
            interface=SkillInterfaceDescriptor("http", "drill", "http://127.0.0.1:9"),
        )
        connector = HttpSkillConnector(timeout_s=0.3)
        try:
            with pytest.raises(SkillUnreachable):
                connector.status(skill)
        finally:
            connector.close()

    def test_unattached_module_is_unreachable(self):
        registry = demo_registry()
        connector = InProcessConnector([])
        with pytest.raises(SkillUnreachable):
            connector.status(registry.skill(DRILL1_SKILL))


# --- delegation failure paths -------------------------------------------------------


class TestDelegationErrors:
    def _run_to_alternative_end(self, rig, holes=3):
        instance_id = rig.start_thermometer(holes=holes)
        view = wait_status(rig.engine, instance_id, ENDED)
        assert view.status is InstanceStatus.COMPLETED
        history = rig.engine.history(instance_id)
        assert ended_payload(history)["node"] == "EndEvent_error"
        return instance_id, history

    def test_stop_injection_becomes_skill_stopped(self, rig):
        rig.module("drill").inject_failure(
            "drill", FailureInjection("stop", "duringExecute")
        )
        instance_id, history = self._run_to_alternative_end(rig)
        assert [t["code"] for t in throws(history)] == ["SkillStopped"]
        assert catches(history) == [
            {"boundary": "Boundary_drill", "host": "Activity_drill", "code": "SkillStopped"}
        ]
        (record,) = rig.engine.notifications()
        assert record.subject == "Production error"
        assert "red" in record.body
        states = [s for _, s in rig.runtime("drill").events()]
        assert SkillState.STOPPING in states and SkillState.STOPPED in states
        assert path_is_legal(states)

    def test_abort_injection_becomes_skill_aborted(self, rig):
        rig.module("drill").inject_failure(
            "drill", FailureInjection("abort", "duringExecute")
        )
        instance_id, history = self._run_to_alternative_end(rig)
        assert [t["code"] for t in throws(history)] == ["SkillAborted"]
        states = [s for _, s in rig.runtime("drill").events()]
        assert SkillState.ABORTED in states
        # the executor acknowledged the abort with Clear
        after_abort = states[states.index(SkillState.ABORTED):]
        assert SkillState.CLEARING in after_abort
        assert path_is_legal(states)

        # the one-shot injection is spent; the next run recovers and completes
        second = rig.start_thermometer()
        view = wait_status(rig.engine, second, (InstanceStatus.COMPLETED,))
        assert view.variables["drillDuration"] == 1.5
        assert rig.engine.history(second)[-1].payload["node"] == "EndEvent_done"

    def test_constraint_violation_at_invocation(self, rig):
        instance_id, history = self._run_to_alternative_end(rig, holes=9)
        (thrown,) = throws(history)
        assert thrown["code"] == "ParameterConstraint"
        assert thrown["node"] == "Activity_drill"
        assert rig.runtime("drill").runs == []  # never reached the machine
        assert len(rig.engine.notifications()) == 1

    def test_datatype_mismatch_at_invocation(self, rig):
        definition, plan = rig.thermometer_plan()
        drill = plan.bindings["Activity_drill"]
        rebound = BindingPlan(
            plan.definition_id,
            {
                **plan.bindings,
                "Activity_drill": TaskBinding(
                    drill.skill_iri,
                    {"noOfHoles": expr(f"{USER_TASK}_Color")},
                    drill.output_assignments,
                ),
            },
        )
        instance_id = rig.engine.start_instance(definition, rebound)
        rig.engine.complete_user_task(
            instance_id, USER_TASK, {"Color": "red", "NoOfHoles": 3}
        )
        wait_status(rig.engine, instance_id, ENDED)
        (thrown,) = throws(rig.engine.history(instance_id))
        assert thrown["code"] == "ParameterConstraint"
        assert "red" in thrown["message"]

    def test_unset_variable_at_invocation(self, rig):
        definition, plan = rig.thermometer_plan()
        drill = plan.bindings["Activity_drill"]
        rebound = BindingPlan(
            plan.definition_id,
            {
                **plan.bindings,
                "Activity_drill": TaskBinding(
                    drill.skill_iri,
                    {"noOfHoles": expr("neverSet")},
                    drill.output_assignments,
                ),
            },
        )
        instance_id = rig.engine.start_instance(definition, rebound)
        rig.engine.complete_user_task(
            instance_id, USER_TASK, {"Color": "red", "NoOfHoles": 3}
        )
        wait_status(rig.engine, instance_id, ENDED)
        (thrown,) = throws(rig.engine.history(instance_id))
        assert thrown["code"] == "UnknownVariable"

    def test_machine_unregistered_mid_run_is_unreachable(self, rig):
        definition, plan = rig.thermometer_plan()
        instance_id = rig.engine.start_instance(definition, plan)
        rig.registry.unregister_machine(DRILL1_MACHINE)
        rig.engine.complete_user_task(
            instance_id, USER_TASK, {"Color": "red", "NoOfHoles": 3}
        )
        view = wait_status(rig.engine, instance_id, ENDED)
        assert view.status is InstanceStatus.COMPLETED  # boundary route
        codes = [t["code"] for t in throws(rig.engine.history(instance_id))]
        assert codes == ["SkillUnreachable"]


# --- error routing matrix ------------------------------------------------------------


def throwing_def(boundaries, def_id="err") -> ProcessDefinition:
    """One capability task whose parameter expression references nothing."""
    binding = CapabilityBinding(
        DRILLING_CAP, {"urn:demo:property:no-of-holes": expr("missing")}, {}
    )
    nodes = [
        StartEvent("start"),
        CapabilityTask("task", binding=binding),
        EndEvent("end_ok"),
    ]
    flows = [
        SequenceFlow("f0", "start", "task"),
        SequenceFlow("f1", "task", "end_ok"),
    ]
    attachments = {}
    for boundary_id, code_filter in boundaries:
        nodes.append(BoundaryErrorEvent(boundary_id, error_code_filter=code_filter))
        nodes.append(EndEvent(f"end_{boundary_id}"))
        flows.append(SequenceFlow(f"f_{boundary_id}", boundary_id, f"end_{boundary_id}"))
        attachments[boundary_id] = "task"
    return ProcessDefinition(
        id=def_id,
        nodes=tuple(nodes),
        flows=tuple(flows),
        boundary_attachments=attachments,
    )


class TestErrorRouting:
    @pytest.fixture
    def demo_engine(self):
        registry = demo_registry()
        eng = Engine(registry, InProcessConnector(), poll_timeout_s=0.05)
        yield registry, eng
        eng.shutdown()

    def _run(self, registry, eng, definition):
        plan = resolve(definition, registry, SelectionPolicy.FIRST_DETERMINISTIC)
        instance_id = eng.start_instance(definition, plan)
        wait_status(eng, instance_id, ENDED, timeout=2.0)
        return eng.snapshot(instance_id), eng.history(instance_id)

    def test_exact_filter_catches(self, demo_engine):
        view, history = self._run(
            *demo_engine, throwing_def([("b1", "UnknownVariable")])
        )
        assert view.status is InstanceStatus.COMPLETED
        assert catches(history)[0]["boundary"] == "b1"
        assert ended_payload(history)["node"] == "end_b1"

    def test_catch_all_catches(self, demo_engine):
        view, history = self._run(*demo_engine, throwing_def([("b1", None)]))
        assert view.status is InstanceStatus.COMPLETED
        assert catches(history)[0]["boundary"] == "b1"

    def test_specific_filter_beats_catch_all(self, demo_engine):
        view, history = self._run(
            *demo_engine,
            throwing_def([("anything", None), ("exact", "UnknownVariable")]),
        )
        assert [c["boundary"] for c in catches(history)] == ["exact"]

    def test_wrong_filter_does_not_catch(self, demo_engine):
        view, history = self._run(
            *demo_engine, throwing_def([("b1", "SkillStopped")])
        )
        assert view.status is InstanceStatus.FAULTED
        assert catches(history) == []
        assert ended_payload(history)["code"] == "UnknownVariable"

    def test_unguarded_task_faults_the_instance(self, demo_engine):
        view, history = self._run(*demo_engine, throwing_def([]))
        assert view.status is InstanceStatus.FAULTED
        assert ended_payload(history) == {
            "status": "Faulted",
            "node": "task",
            "code": "UnknownVariable",
        }

    def test_sibling_boundary_stays_out_of_it(self, demo_engine):
        registry, eng = demo_engine
        binding = CapabilityBinding(
            DRILLING_CAP, {"urn:demo:property:no-of-holes": expr("missing")}, {}
        )
        safe = CapabilityBinding(
            DRILLING_CAP, {"urn:demo:property:no-of-holes": Constant(2)}, {}
        )
        nodes = (
            StartEvent("start"),
            CapabilityTask("bad", binding=binding),
            CapabilityTask("good", binding=safe),
            BoundaryErrorEvent("guard"),
            EndEvent("end"),
            EndEvent("end_err"),
        )
        flows = (
            SequenceFlow("f0", "start", "bad"),
            SequenceFlow("f1", "bad", "good"),
            SequenceFlow("f2", "good", "end"),
            SequenceFlow("f3", "guard", "end_err"),
        )
        definition = ProcessDefinition(
            id="sibling",
            nodes=nodes,
            flows=flows,
            boundary_attachments={"guard": "good"},
        )
        view, history = self._run(registry, eng, definition)
        assert view.status is InstanceStatus.FAULTED
        assert catches(history) == []
        assert "NodeEntered" not in [
            e.kind for e in history if e.payload.get("node") == "good"
        ]


# --- cancellation ---------------------------------------------------------------------


class TestCancellation:
    def test_cancel_closes_work_items(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        engine.cancel_instance(instance_id)
        view = engine.snapshot(instance_id)
        assert view.status is InstanceStatus.CANCELLED
        assert view.work_items == ()
        assert view.tokens == {}
        with pytest.raises(NoOpenWorkItem):
            engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": 1})
        assert ended_payload(engine.history(instance_id))["status"] == "Cancelled"

    def test_cancel_aborts_the_running_skill(self, make_rig):
        rig = make_rig(slow_execute={DRILL1_SKILL: 400.0})
        instance_id = rig.start_thermometer()
        wait_plant_state(rig.runtime("drill"), SkillState.EXECUTE)
        rig.engine.cancel_instance(instance_id)
        assert rig.engine.snapshot(instance_id).status is InstanceStatus.CANCELLED
        wait_plant_state(rig.runtime("drill"), SkillState.ABORTED)
        states = [s for _, s in rig.runtime("drill").events()]
        assert SkillState.ABORTING in states
        frozen = len(rig.engine.history(instance_id))
        time.sleep(0.15)
        assert len(rig.engine.history(instance_id)) == frozen

    def test_cancel_is_not_idempotent(self, engine):
        definition = linear_def("triv")
        instance_id = engine.start_instance(definition, empty_plan(definition))
        with pytest.raises(AlreadyEnded):
            engine.cancel_instance(instance_id)  # already completed
        definition2 = ask_def()
        other = engine.start_instance(definition2, empty_plan(definition2))
        engine.cancel_instance(other)
        with pytest.raises(AlreadyEnded):
            engine.cancel_instance(other)


# --- replay determinism -----------------------------------------------------------------


class ScriptedConnector:
    """Plays back canned runs; each Start consumes the next scripted run."""

    def __init__(self, scripts):
        # scripts: skill id -> list of (states, outputs_in_complete)
        self._runs = {sid: deque(runs) for sid, runs in scripts.items()}
        self._lock = threading.Lock()
        self._seq = defaultdict(int)
        self._state = defaultdict(lambda: SkillState.IDLE)
        self._events = defaultdict(list)
        self._outputs = defaultdict(dict)
        self.command_log = []
        self.param_log = []

    def set_parameters(self, skill, values):
        with self._lock:
            self.param_log.append((skill.interface.skill_id, dict(values)))

    def command(self, skill, cmd):
        skill_id = skill.interface.skill_id
        with self._lock:
            self.command_log.append((skill_id, cmd.value))
            if cmd is TransitionCommand.START:
                states, outputs = self._runs[skill_id].popleft()
                for state in states:
                    self._seq[skill_id] += 1
                    self._events[skill_id].append((self._seq[skill_id], state))
                self._outputs[skill_id] = dict(outputs)
                self._state[skill_id] = states[-1]
            elif cmd is TransitionCommand.RESET:
                self._state[skill_id] = SkillState.IDLE
                self._outputs[skill_id] = {}
            elif cmd is TransitionCommand.CLEAR:
                self._state[skill_id] = SkillState.STOPPED
            elif cmd is TransitionCommand.ABORT:
                self._state[skill_id] = SkillState.ABORTED

    def status(self, skill):
        skill_id = skill.interface.skill_id
        with self._lock:
            return SkillStatus(
                self._seq[skill_id],
                self._state[skill_id],
                dict(self._outputs[skill_id]),
            )

    def wait_events(self, skill, since_seq, timeout_s):
        skill_id = skill.interface.skill_id
        with self._lock:
            return [
                (seq, state)
                for seq, state in self._events[skill_id]
                if seq > since_seq
            ]


NOMINAL_RUN = [
    SkillState.STARTING,
    SkillState.EXECUTE,
    SkillState.COMPLETING,
    SkillState.COMPLETE,
]
ABORTING_RUN = [
    SkillState.STARTING,
    SkillState.EXECUTE,
    SkillState.ABORTING,
    SkillState.ABORTED,
]


def scripted_run(script):
    registry = demo_registry()
    definition = throwing_def([("guard", None)], def_id="scripted")
    # rebind the parameter so evaluation succeeds
    plan = resolve(definition, registry, SelectionPolicy.FIRST_DETERMINISTIC)
    bound = plan.bindings["task"]
    plan = BindingPlan(
        plan.definition_id,
        {
            "task": TaskBinding(
                bound.skill_iri,
                {"noOfHoles": Constant(2)},
                {"drillDuration": "dur"},
            )
        },
    )
    connector = ScriptedConnector({"drill": [script]})
    eng = Engine(registry, connector, poll_timeout_s=0.05)
    try:
        instance_id = eng.start_instance(definition, plan)
        view = wait_status(eng, instance_id, ENDED, timeout=3.0)
        history = [(e.kind, dict(e.payload)) for e in eng.history(instance_id)]
        return view, history, connector
    finally:
        eng.shutdown()


class TestReplayDeterminism:
    def test_nominal_replay_is_identical(self):
        script = (NOMINAL_RUN, {"drillDuration": 1.0})
        first_view, first_history, first_conn = scripted_run(script)
        second_view, second_history, second_conn = scripted_run(script)
        assert first_view.status is InstanceStatus.COMPLETED
        assert first_view.variables == second_view.variables == {"dur": 1.0}
        assert first_history == second_history
        assert first_conn.command_log == second_conn.command_log
        assert ("drill", "Reset") in first_conn.command_log

    def test_aborting_replay_is_identical(self):
        script = (ABORTING_RUN, {})
        first_view, first_history, first_conn = scripted_run(script)
        second_view, second_history, second_conn = scripted_run(script)
        assert first_view.status is InstanceStatus.COMPLETED  # caught by guard
        assert first_history == second_history
        codes = [p["code"] for k, p in first_history if k == "ErrorThrown"]
        assert codes == ["SkillAborted"]
        assert ("drill", "Clear") in first_conn.command_log


# --- history and long-poll ---------------------------------------------------------------


class TestHistory:
    def test_history_jsonl_round_trip(self, tmp_path):
        eng = Engine(Registry(), InProcessConnector(), history_dir=tmp_path)
        definition = linear_def("triv", SendTask("tell", subject="s", body="b"))
        instance_id = eng.start_instance(
            definition, empty_plan(definition), initial_vars={"x": 1}
        )
        path = tmp_path / f"{instance_id}.events.jsonl"
        assert path.exists()
        loaded = [
            event_from_json(json.loads(line))
            for line in path.read_text().splitlines()
        ]
        assert loaded == eng.history(instance_id)
        assert [e.seq for e in loaded] == list(range(len(loaded)))

    def test_event_json_round_trip(self, engine):
        definition = linear_def("triv")
        instance_id = engine.start_instance(definition, empty_plan(definition))
        for event in engine.history(instance_id):
            assert event_from_json(event_json(event)) == event

    def test_wait_events_long_polls(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        seen = len(engine.history(instance_id))

        def finish():
            time.sleep(0.06)
            engine.complete_user_task(instance_id, "ask", {"Color": "r", "N": 1})

        threading.Thread(target=finish, daemon=True).start()
        began = time.monotonic()
        events = engine.wait_events(instance_id, since_seq=seen, timeout_s=2.0)
        assert events and events[0].seq == seen
        assert 0.04 <= time.monotonic() - began < 1.5

    def test_wait_events_times_out_empty(self, engine):
        definition = ask_def()
        instance_id = engine.start_instance(definition, empty_plan(definition))
        began = time.monotonic()
        out = engine.wait_events(instance_id, since_seq=999, timeout_s=0.08)
        assert out == []
        assert time.monotonic() - began >= 0.07

    def test_wait_events_returns_promptly_once_ended(self, engine):
        definition = linear_def("triv")
        instance_id = engine.start_instance(definition, empty_plan(definition))
        began = time.monotonic()
        out = engine.wait_events(instance_id, since_seq=999, timeout_s=5.0)
        assert out == []
        assert time.monotonic() - began < 1.0
