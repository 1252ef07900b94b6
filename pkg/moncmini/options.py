"""
The options database is the centralised store of every configuration option of
a run. It is read from ``key=value`` text and written into checkpoints so that
a restarted run sees exactly the options of the run that wrote it.
"""

from __future__ import annotations

import io
import re
import struct
from collections.abc import Iterable, Mapping
from typing import cast

import attrs

from . import errors, protocols

OptionScalar = int | float | bool | str
OptionValue = OptionScalar | list[int] | list[float] | list[bool] | list[str]

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

regexes = {
    "key": re.compile(r"^[A-Za-z_][\w.-]*$"),
    "int": re.compile(r"^[+-]?\d+$"),
    "real": re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eEdD][+-]?\d+)?$"),
}

_BOOLEANS = {".true.": True, ".false.": False, "true": True, "false": False}

_TAG_INT = 1
_TAG_REAL = 2
_TAG_BOOL = 3
_TAG_STR = 4
_TAG_LIST = 5


def _unquote(text: str) -> str:
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _parse_scalar(text: str) -> OptionScalar:
    lowered = text.lower()
    if lowered in _BOOLEANS:
        return _BOOLEANS[lowered]

    if regexes["int"].match(text):
        return int(text)

    if regexes["real"].match(text):
        return float(text.replace("d", "e").replace("D", "e"))

    return _unquote(text)


def _parse_value(text: str) -> OptionValue:
    if "," not in text:
        return _parse_scalar(text)

    items = [_parse_scalar(part.strip()) for part in text.split(",")]
    if all(isinstance(item, bool) for item in items):
        return cast(list[bool], items)
    elif all(isinstance(item, int) and not isinstance(item, bool) for item in items):
        return cast(list[int], items)
    elif all(isinstance(item, int | float) and not isinstance(item, bool) for item in items):
        return [float(item) for item in items]
    else:
        return [_unquote(part.strip()) for part in text.split(",")]


def _homogeneous(key: str, value: OptionValue) -> OptionValue:
    """
    Lists hold one type of scalar, integers mixed with reals become reals
    """
    if not isinstance(value, list):
        return value

    items: list[object] = list(value)
    numbers = [
        item for item in items if isinstance(item, int | float) and not isinstance(item, bool)
    ]
    if all(isinstance(item, bool) for item in items):
        return cast(list[bool], items)
    elif all(isinstance(item, str) for item in items):
        return cast(list[str], items)
    elif len(numbers) == len(items):
        if all(isinstance(item, int) for item in numbers):
            return cast(list[int], numbers)
        return [float(item) for item in numbers]

    kinds = sorted({_describe(item) for item in items})
    raise errors.OptionTypeError(
        message=f"List option '{key}' mixes {' and '.join(kinds)} values", key=key
    )


def _homogeneous_entries(entries: Mapping[str, OptionValue]) -> dict[str, OptionValue]:
    return {key: _homogeneous(key, value) for key, value in entries.items()}


def _check_range(key: str, line: int | None, value: OptionValue) -> None:
    values = value if isinstance(value, list) else [value]
    for item in values:
        if isinstance(item, int) and not isinstance(item, bool):
            if not INT64_MIN <= item <= INT64_MAX:
                raise errors.ConfigurationError(
                    message=f"Integer option '{key}' does not fit in 64 bits",
                    key=key,
                    line=line,
                )


def load_config(text: str) -> OptionsDatabase:
    """
    Parse configuration text into an options database.

    Every non blank line that isn't a comment must be ``key=value``. Values
    are booleans (``.true.``/``.false.``), integers, reals or strings and a
    comma separated value becomes a list.
    """
    entries: dict[str, OptionValue] = {}
    seen_at: dict[str, int] = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue

        if "=" not in line:
            raise errors.ConfigurationError(
                message=f"Line {number} is not of the form key=value", line=number
            )

        key, _, value = line.partition("=")
        key = key.strip()
        if not regexes["key"].match(key):
            raise errors.ConfigurationError(
                message=f"Line {number} has an invalid key '{key}'", key=key, line=number
            )

        if key in seen_at:
            raise errors.ConfigurationError(
                message=f"Option '{key}' on line {number} was already given on line"
                f" {seen_at[key]}",
                key=key,
                line=number,
            )

        parsed = _parse_value(value.strip())
        _check_range(key, number, parsed)
        entries[key] = parsed
        seen_at[key] = number

    return OptionsDatabase(entries=entries)


def _describe(value: object) -> str:
    if isinstance(value, list):
        return "list"
    elif isinstance(value, bool):
        return "boolean"
    elif isinstance(value, int):
        return "integer"
    elif isinstance(value, float):
        return "real"
    return "string"


@attrs.frozen
class OptionsDatabase:
    """
    Read only mapping of option name to typed value.
    """

    entries: Mapping[str, OptionValue] = attrs.field(
        factory=dict, converter=_homogeneous_entries
    )

    def __contains__(self, key: str) -> bool:
        return key in self.entries

    def has(self, key: str) -> bool:
        return key in self.entries

    def _lookup(self, key: str, default: object) -> object:
        if key in self.entries:
            return self.entries[key]
        if isinstance(default, protocols.NotGiven):
            raise errors.MissingOption(message=f"Required option '{key}' is missing", key=key)
        return default

    def _wrong_type(self, key: str, wanted: str, got: object) -> errors.OptionTypeError:
        return errors.OptionTypeError(
            message=f"Option '{key}' should be {wanted} but is {_describe(got)}", key=key
        )

    def get_int(self, key: str, default: int | protocols.NotGiven = protocols._NotGiven) -> int:
        value = self._lookup(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            raise self._wrong_type(key, "an integer", value)
        return value

    def get_real(
        self, key: str, default: float | protocols.NotGiven = protocols._NotGiven
    ) -> float:
        value = self._lookup(key, default)
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise self._wrong_type(key, "a real", value)
        return float(value)

    def get_bool(
        self, key: str, default: bool | protocols.NotGiven = protocols._NotGiven
    ) -> bool:
        value = self._lookup(key, default)
        if not isinstance(value, bool):
            raise self._wrong_type(key, "a boolean", value)
        return value

    def get_str(self, key: str, default: str | protocols.NotGiven = protocols._NotGiven) -> str:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            raise self._wrong_type(key, "a string", value)
        return value

    def get_list(
        self,
        key: str,
        default: list[OptionScalar] | protocols.NotGiven = protocols._NotGiven,
    ) -> list[OptionScalar]:
        value = self._lookup(key, default)
        if isinstance(value, list):
            return list(value)
        return [cast(OptionScalar, value)]

    def merged(self, overrides: OptionsDatabase | Mapping[str, OptionValue]) -> OptionsDatabase:
        """
        Return a new database with entries from overrides replacing ours
        """
        if isinstance(overrides, OptionsDatabase):
            overrides = overrides.entries
        for key, value in overrides.items():
            _check_range(key, None, value)
        return OptionsDatabase(entries={**self.entries, **overrides})

    def serialize(self) -> bytes:
        """
        Encode as a little endian binary block of (key, type tag, value) records
        """
        out = io.BytesIO()
        out.write(struct.pack("<I", len(self.entries)))
        for key, value in self.entries.items():
            _write_str(out, key)
            if isinstance(value, list):
                out.write(struct.pack("<B", _TAG_LIST))
                out.write(struct.pack("<BI", _list_tag(value), len(value)))
                for item in value:
                    _write_scalar(out, item, include_tag=False)
            else:
                _write_scalar(out, value, include_tag=True)
        return out.getvalue()

    @classmethod
    def deserialize(cls, data: bytes) -> OptionsDatabase:
        reader = _Reader(data)
        entries: dict[str, OptionValue] = {}
        for _ in range(reader.unpack("<I")):
            key = reader.string()
            tag = reader.unpack("<B")
            if tag == _TAG_LIST:
                element_tag = reader.unpack("<B")
                count = reader.unpack("<I")
                entries[key] = cast(
                    OptionValue, [reader.scalar(element_tag) for _ in range(count)]
                )
            else:
                entries[key] = reader.scalar(tag)

        if reader.remaining:
            raise ValueError(f"{reader.remaining} trailing bytes after options block")
        return cls(entries=entries)


def _list_tag(value: Iterable[OptionScalar]) -> int:
    for item in value:
        return _scalar_tag(item)
    return _TAG_STR


def _scalar_tag(value: OptionScalar) -> int:
    if isinstance(value, bool):
        return _TAG_BOOL
    elif isinstance(value, int):
        return _TAG_INT
    elif isinstance(value, float):
        return _TAG_REAL
    return _TAG_STR


def _write_str(out: io.BytesIO, value: str) -> None:
    encoded = value.encode("utf-8")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)


def _write_scalar(out: io.BytesIO, value: OptionScalar, *, include_tag: bool) -> None:
    tag = _scalar_tag(value)
    if include_tag:
        out.write(struct.pack("<B", tag))

    if tag == _TAG_BOOL:
        out.write(struct.pack("<B", int(value)))
    elif tag == _TAG_INT:
        out.write(struct.pack("<q", value))
    elif tag == _TAG_REAL:
        out.write(struct.pack("<d", value))
    else:
        _write_str(out, str(value))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, size: int) -> bytes:
        if size > self.remaining:
            raise ValueError("Options block is truncated")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> int:
        (value,) = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return cast(int, value)

    def string(self) -> str:
        return self.take(self.unpack("<I")).decode("utf-8")

    def scalar(self, tag: int) -> OptionScalar:
        if tag == _TAG_BOOL:
            return bool(self.unpack("<B"))
        elif tag == _TAG_INT:
            return self.unpack("<q")
        elif tag == _TAG_REAL:
            (value,) = struct.unpack("<d", self.take(8))
            return cast(float, value)
        elif tag == _TAG_STR:
            return self.string()
        raise ValueError(f"Unknown option type tag {tag}")
