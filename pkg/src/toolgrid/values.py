"""Typed values that travel over workflow connections.

Five value kinds exist: boolean, integer (signed 64-bit), float (binary64),
text (UTF-8), and file references (blob digest + suggested filename). The only
implicit conversion anywhere in the system is integer -> float on a connection.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

INT64_MIN = -(2 ** 63)
INT64_MAX = 2 ** 63 - 1


class DatumType(enum.Enum):
    BOOLEAN = "boolean"
    INTEGER = "integer"
    FLOAT = "float"
    TEXT = "text"
    FILE = "file"

    @classmethod
    def parse(cls, text: str) -> "DatumType":
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown value type {text!r}") from None


@dataclass(frozen=True)
class FileRef:
    """Reference to immutable stored bytes plus the name to materialize under."""

    digest: str
    filename: str

    def __post_init__(self):
        if len(self.digest) != 64 or any(c not in "0123456789abcdef" for c in self.digest):
            raise ValueError(f"not a sha256 hex digest: {self.digest!r}")
        if not self.filename or "/" in self.filename or self.filename in (".", ".."):
            raise ValueError(f"bad suggested filename: {self.filename!r}")


@dataclass(frozen=True)
class Datum:
    """One typed value on a connection."""

    type: DatumType
    value: bool | int | float | str | FileRef

    def __post_init__(self):
        t, v = self.type, self.value
        if t is DatumType.BOOLEAN:
            ok = isinstance(v, bool)
        elif t is DatumType.INTEGER:
            ok = isinstance(v, int) and not isinstance(v, bool) and INT64_MIN <= v <= INT64_MAX
        elif t is DatumType.FLOAT:
            ok = isinstance(v, float)
        elif t is DatumType.TEXT:
            ok = isinstance(v, str)
        else:
            ok = isinstance(v, FileRef)
        if not ok:
            raise ValueError(f"value {v!r} does not fit datum type {t.value}")

    @classmethod
    def boolean(cls, v: bool) -> "Datum":
        return cls(DatumType.BOOLEAN, v)

    @classmethod
    def integer(cls, v: int) -> "Datum":
        return cls(DatumType.INTEGER, v)

    @classmethod
    def of_float(cls, v: float) -> "Datum":
        return cls(DatumType.FLOAT, float(v))

    @classmethod
    def text(cls, v: str) -> "Datum":
        return cls(DatumType.TEXT, v)

    @classmethod
    def file(cls, digest: str, filename: str) -> "Datum":
        return cls(DatumType.FILE, FileRef(digest, filename))

    def literal(self) -> str:
        """Command-line text form for scalar values (files are path-rendered by callers)."""
        if self.type is DatumType.BOOLEAN:
            return "true" if self.value else "false"
        if self.type is DatumType.FILE:
            raise ValueError("file references have no scalar literal")
        if self.type is DatumType.FLOAT:
            return repr(self.value)
        return str(self.value)

    def to_json(self) -> dict:
        if self.type is DatumType.FILE:
            ref = self.value
            return {"type": "file", "digest": ref.digest, "filename": ref.filename}
        return {"type": self.type.value, "value": self.value}


def datum_from_json(obj: dict) -> Datum:
    if not isinstance(obj, dict) or "type" not in obj:
        raise ValueError(f"not a datum object: {obj!r}")
    dtype = DatumType.parse(obj["type"])
    if dtype is DatumType.FILE:
        return Datum(dtype, FileRef(obj["digest"], obj["filename"]))
    value = obj["value"]
    if dtype is DatumType.FLOAT and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return Datum(dtype, value)


def scalar_datum(value, dtype: DatumType) -> Datum:
    """Build a datum of a declared type from a plain JSON scalar.

    Integers are accepted for float endpoints (the one implicit conversion);
    everything else must match exactly.
    """
    if dtype is DatumType.FLOAT and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return Datum(dtype, value)


def infer_scalar_type(value) -> DatumType:
    """Value-type inference for config-supplied scalars."""
    if isinstance(value, bool):
        return DatumType.BOOLEAN
    if isinstance(value, int):
        return DatumType.INTEGER
    if isinstance(value, float):
        return DatumType.FLOAT
    if isinstance(value, str):
        return DatumType.TEXT
    raise ValueError(f"unsupported scalar {value!r}")


def convertible(from_type: DatumType, to_type: DatumType) -> bool:
    """Connection-type compatibility: equal, or integer into float."""
    return from_type is to_type or (
        from_type is DatumType.INTEGER and to_type is DatumType.FLOAT
    )


def convert(datum: Datum, to_type: DatumType) -> Datum:
    if datum.type is to_type:
        return datum
    if datum.type is DatumType.INTEGER and to_type is DatumType.FLOAT:
        return Datum(DatumType.FLOAT, float(datum.value))
    raise ValueError(f"no conversion {datum.type.value} -> {to_type.value}")
