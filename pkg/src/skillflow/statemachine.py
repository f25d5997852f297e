"""The transition system every skill obeys.

A reduced machine-state model: the hold and suspend branches of the full
standard are left out, but Clearing is kept so an Aborted skill needs an
explicit acknowledgment (Clear) before it can be Reset. Commands trigger
transitions into *acting* states; acting states perform work and
auto-advance on their own once done.

Wire protocols spell states exactly as the enum values here (case
sensitive).
"""

from __future__ import annotations

from enum import Enum

from .errors import IllegalTransition, NotActing


class SkillState(Enum):
    IDLE = "Idle"
    STARTING = "Starting"
    EXECUTE = "Execute"
    COMPLETING = "Completing"
    COMPLETE = "Complete"
    RESETTING = "Resetting"
    STOPPING = "Stopping"
    STOPPED = "Stopped"
    CLEARING = "Clearing"
    ABORTING = "Aborting"
    ABORTED = "Aborted"

    @classmethod
    def parse(cls, text: str) -> "SkillState":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown skill state: {text!r}")


class TransitionCommand(Enum):
    START = "Start"
    STOP = "Stop"
    ABORT = "Abort"
    RESET = "Reset"
    CLEAR = "Clear"

    @classmethod
    def parse(cls, text: str) -> "TransitionCommand":
        for member in cls:
            if member.value.lower() == text.lower():
                return member
        raise ValueError(f"unknown transition command: {text!r}")


ACTING_STATES = frozenset(
    {
        SkillState.STARTING,
        SkillState.EXECUTE,
        SkillState.COMPLETING,
        SkillState.RESETTING,
        SkillState.STOPPING,
        SkillState.CLEARING,
        SkillState.ABORTING,
    }
)

WAITING_STATES = frozenset(
    {
        SkillState.IDLE,
        SkillState.COMPLETE,
        SkillState.STOPPED,
        SkillState.ABORTED,
    }
)


def _build_command_table() -> dict[tuple[SkillState, TransitionCommand], SkillState]:
    table: dict[tuple[SkillState, TransitionCommand], SkillState] = {}
    table[(SkillState.IDLE, TransitionCommand.START)] = SkillState.STARTING
    no_stop = {
        SkillState.STOPPING,
        SkillState.STOPPED,
        SkillState.CLEARING,
        SkillState.ABORTING,
        SkillState.ABORTED,
    }
    for state in SkillState:
        if state not in no_stop:
            table[(state, TransitionCommand.STOP)] = SkillState.STOPPING
    for state in SkillState:
        if state not in {SkillState.ABORTING, SkillState.ABORTED}:
            table[(state, TransitionCommand.ABORT)] = SkillState.ABORTING
    table[(SkillState.ABORTED, TransitionCommand.CLEAR)] = SkillState.CLEARING
    table[(SkillState.COMPLETE, TransitionCommand.RESET)] = SkillState.RESETTING
    table[(SkillState.STOPPED, TransitionCommand.RESET)] = SkillState.RESETTING
    return table


COMMAND_TABLE = _build_command_table()

# Where each acting state lands when its work is done. Clearing resolves to
# Stopped (then Reset leads back to Idle); changing that reading means
# changing exactly this row.
AUTO_ADVANCE = {
    SkillState.STARTING: SkillState.EXECUTE,
    SkillState.EXECUTE: SkillState.COMPLETING,
    SkillState.COMPLETING: SkillState.COMPLETE,
    SkillState.RESETTING: SkillState.IDLE,
    SkillState.STOPPING: SkillState.STOPPED,
    SkillState.CLEARING: SkillState.STOPPED,
    SkillState.ABORTING: SkillState.ABORTED,
}


def apply_command(state: SkillState, command: TransitionCommand) -> SkillState:
    """Return the acting state a command moves into, or raise IllegalTransition."""
    try:
        return COMMAND_TABLE[(state, command)]
    except KeyError:
        raise IllegalTransition(state.value, command.value) from None


def complete_acting(state: SkillState) -> SkillState:
    """Auto-advance an acting state to its successor."""
    try:
        return AUTO_ADVANCE[state]
    except KeyError:
        raise NotActing(state.value) from None


class Activity(Enum):
    ACTING = "Acting"
    WAITING = "Waiting"


class Outcome(Enum):
    NOMINAL = "Nominal"
    FAILURE = "Failure"
    FINAL_SUCCESS = "Final-success"


def classify(state: SkillState) -> tuple[Activity, Outcome]:
    activity = Activity.ACTING if state in ACTING_STATES else Activity.WAITING
    if state is SkillState.COMPLETE:
        outcome = Outcome.FINAL_SUCCESS
    elif state in (SkillState.STOPPED, SkillState.ABORTED):
        outcome = Outcome.FAILURE
    else:
        outcome = Outcome.NOMINAL
    return activity, outcome
