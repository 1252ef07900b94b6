"""
Checkpoint files let a run be continued later, possibly on a different number
of workers.

The layout is little endian::

    "MONCMINI"  u32 version
    u64 length  options block (see ``OptionsDatabase.serialize``)
    u64 z, y, x
    u64 timestep  f64 time
    u32 field count
    per field: u32 length, utf-8 name, u8 precision (4 or 8),
               z*y*x values with z varying fastest

Fields are gathered into global index order before writing so the file does
not depend on the decomposition that wrote it.
"""

from __future__ import annotations

import io
import logging
import os
import pathlib
import struct
from collections.abc import Iterable, Mapping, Sequence
from typing import Any

import attrs
import numpy as np

from . import errors, protocols
from .decomp import Field3D, PencilLayout, gather_to_root, global_reduce
from .dycore import ALL_FIELDS, PROGNOSTIC_FIELDS
from .options import OptionsDatabase
from .state import ModelState

log = logging.getLogger(__name__)

MAGIC = b"MONCMINI"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<8sI")
_GRID = struct.Struct("<QQQ")
_CLOCK = struct.Struct("<Qd")


@attrs.frozen
class Checkpoint:
    options: OptionsDatabase
    grid_shape: tuple[int, int, int]
    timestep: int
    time: float
    fields: Mapping[str, protocols.Array] = attrs.field(factory=dict, eq=False)


def field_order(names: Iterable[str]) -> list[str]:
    """
    Known fields in their usual order, then anything else alphabetically
    """
    present = set(names)
    ordered = [name for name in ALL_FIELDS if name in present]
    return ordered + sorted(present - set(ordered))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, FORMAT_VERSION))

    options = checkpoint.options.serialize()
    out.write(struct.pack("<Q", len(options)))
    out.write(options)

    out.write(_GRID.pack(*checkpoint.grid_shape))
    out.write(_CLOCK.pack(checkpoint.timestep, checkpoint.time))

    out.write(struct.pack("<I", len(checkpoint.fields)))
    for name in field_order(checkpoint.fields):
        values = np.asarray(checkpoint.fields[name])
        if values.shape != checkpoint.grid_shape:
            raise ValueError(f"Field '{name}' has shape {values.shape}")
        precision = protocols.Precision.from_dtype(values.dtype)
        encoded = name.encode("utf-8")
        out.write(struct.pack("<I", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", precision.tag))
        out.write(values.astype(precision.dtype.newbyteorder("<")).tobytes(order="F"))

    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.path = path
        self.offset = 0

    def fail(self, message: str, field: str | None = None) -> errors.CheckpointFormatError:
        return errors.CheckpointFormatError(message=message, path=self.path, field=field)

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise self.fail(f"Checkpoint is truncated while reading {what}")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple[Any, ...]:
        return layout.unpack(self.take(layout.size, what))

    def u32(self, what: str) -> int:
        (value,) = struct.unpack("<I", self.take(4, what))
        return int(value)


def decode_checkpoint(data: bytes, *, path: str = "<memory>") -> Checkpoint:
    reader = _Reader(data, path)

    magic, version = reader.unpack(_HEADER, "the header")
    if magic != MAGIC:
        raise reader.fail(f"Not a checkpoint, found magic {magic!r}")
    if version != FORMAT_VERSION:
        raise reader.fail(f"Unsupported checkpoint version {version}")

    (length,) = struct.unpack("<Q", reader.take(8, "the options length"))
    try:
        options = OptionsDatabase.deserialize(reader.take(int(length), "the options"))
    except ValueError as error:
        raise reader.fail(f"Options block is invalid: {error}") from error

    gz, gy, gx = (int(n) for n in reader.unpack(_GRID, "the grid"))
    timestep, time = reader.unpack(_CLOCK, "the clock")
    shape = (gz, gy, gx)
    points = gz * gy * gx

    fields: dict[str, protocols.Array] = {}
    for _ in range(reader.u32("the field count")):
        name = reader.take(reader.u32("a field name"), "a field name").decode("utf-8")
        (tag,) = struct.unpack("<B", reader.take(1, f"the precision of '{name}'"))
        try:
            precision = protocols.Precision.from_tag(tag)
        except ValueError as error:
            raise reader.fail(f"Field '{name}' has unknown precision {tag}", name) from error

        dtype = precision.dtype.newbyteorder("<")
        raw = reader.take(points * dtype.itemsize, f"the values of '{name}'")
        values = np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")
        fields[name] = values.astype(precision.dtype)

    if reader.offset != len(data):
        raise reader.fail(f"{len(data) - reader.offset} trailing bytes after the last field")

    return Checkpoint(
        options=options,
        grid_shape=shape,
        timestep=int(timestep),
        time=float(time),
        fields=fields,
    )


def read_checkpoint(
    path: pathlib.Path | str, *, required: Sequence[str] = PROGNOSTIC_FIELDS
) -> Checkpoint:
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as error:
        raise errors.StorageError(
            message=f"Could not read checkpoint: {error}", path=str(path)
        ) from error

    checkpoint = decode_checkpoint(data, path=str(path))
    for name in required:
        if name not in checkpoint.fields:
            raise errors.CheckpointFormatError(
                message=f"Checkpoint has no record for field '{name}'", path=str(path), field=name
            )
    return checkpoint


def write_checkpoint_file(path: pathlib.Path | str, checkpoint: Checkpoint) -> None:
    """
    Write through a temporary file so a failed write never leaves a partial
    checkpoint at path.
    """
    path = pathlib.Path(path)
    partial = path.with_name(f"{path.name}.partial")
    try:
        partial.write_bytes(encode_checkpoint(checkpoint))
        os.replace(partial, path)
    except OSError as error:
        partial.unlink(missing_ok=True)
        raise errors.CheckpointWriteError(
            message=f"Could not write checkpoint: {error}", path=str(path)
        ) from error


def checkpoint_write(state: ModelState, path: pathlib.Path | str) -> None:
    """
    Collective: rank 0 gathers and writes, then every rank learns whether
    that worked.
    """
    transport = state.transport
    gathered = {
        name: gather_to_root(state.fields[name], transport)
        for name in field_order(state.fields)
    }

    failure: errors.CheckpointWriteError | None = None
    if transport.rank == 0:
        checkpoint = Checkpoint(
            options=state.options,
            grid_shape=state.layout.grid.shape,
            timestep=state.timestep,
            time=state.time,
            fields={name: values for name, values in gathered.items() if values is not None},
        )
        try:
            write_checkpoint_file(path, checkpoint)
        except errors.CheckpointWriteError as error:
            failure = error

    (written,) = global_reduce(
        np.array([0.0 if failure else 1.0]), protocols.ReductionOp.MIN, transport
    )
    if failure is not None:
        raise failure
    if not written:
        raise errors.CheckpointWriteError(
            message="Rank 0 could not write the checkpoint", path=str(path)
        )

    log.info("Wrote checkpoint to %s", path, extra=dict(state.logging_context))


def restore_state(
    checkpoint: Checkpoint,
    layout: PencilLayout,
    *,
    transport: protocols.Transport,
    options: OptionsDatabase | None = None,
) -> ModelState:
    """
    Build this rank's state of ``layout`` from a checkpoint already in memory.

    Options given here override the stored options entry by entry.
    """
    if checkpoint.grid_shape != layout.grid.shape:
        raise errors.DecompositionError(
            message=f"Checkpoint grid {checkpoint.grid_shape} does not match the layout grid"
            f" {layout.grid.shape}"
        )

    merged = checkpoint.options if options is None else checkpoint.options.merged(options)
    state = ModelState.fresh(layout=layout, options=merged, transport=transport)
    state.timestep = checkpoint.timestep
    state.time = checkpoint.time
    state.restarted = True

    for name, values in checkpoint.fields.items():
        state.fields[name] = Field3D.from_global(layout, values)
    for name in ALL_FIELDS:
        if name not in state.fields:
            state.fields[name] = Field3D.zeros(layout)
    return state


def checkpoint_read(
    path: pathlib.Path | str,
    layout: PencilLayout,
    *,
    transport: protocols.Transport,
    options: OptionsDatabase | None = None,
    required: Sequence[str] = PROGNOSTIC_FIELDS,
) -> ModelState:
    """
    Restore a state for this rank of ``layout`` from a checkpoint file
    """
    checkpoint = read_checkpoint(path, required=required)
    state = restore_state(checkpoint, layout, transport=transport, options=options)
    log.info(
        "Restored checkpoint %s at timestep %d",
        path,
        state.timestep,
        extra=dict(state.logging_context),
    )
    return state
