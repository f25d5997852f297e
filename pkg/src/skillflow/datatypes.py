"""The four property datatypes and their Python value representations."""

from __future__ import annotations

from enum import Enum

from .errors import DatatypeMismatch


class Datatype(Enum):
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"
    STRING = "string"

    @classmethod
    def parse(cls, text: str) -> "Datatype":
        for member in cls:
            if member.value == text:
                return member
        raise ValueError(f"unknown datatype: {text!r}")


# bool is a subclass of int, so boolean checks must come first everywhere.


def value_datatype(value: object) -> Datatype:
    if isinstance(value, bool):
        return Datatype.BOOLEAN
    if isinstance(value, int):
        return Datatype.INTEGER
    if isinstance(value, float):
        return Datatype.REAL
    if isinstance(value, str):
        return Datatype.STRING
    raise ValueError(f"unsupported value type: {type(value).__name__}")


def matches(value: object, datatype: Datatype) -> bool:
    if datatype is Datatype.BOOLEAN:
        return isinstance(value, bool)
    if datatype is Datatype.INTEGER:
        return isinstance(value, int) and not isinstance(value, bool)
    if datatype is Datatype.REAL:
        # integers widen to reals
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if datatype is Datatype.STRING:
        return isinstance(value, str)
    raise ValueError(datatype)


def coerce(value: object, datatype: Datatype) -> object:
    """Return ``value`` as the canonical Python type for ``datatype``.

    The only widening performed is int -> float for real properties;
    anything else that does not already match raises DatatypeMismatch.
    """
    if not matches(value, datatype):
        raise DatatypeMismatch(datatype.value, value)
    if datatype is Datatype.REAL:
        return float(value)  # type: ignore[arg-type]
    return value


def format_value(value: object) -> str:
    """Render a typed value the way the process XML spells constants."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
