from __future__ import annotations

from typing import TYPE_CHECKING, Self

import attrs

from . import errors, protocols
from .decomp import Field3D, PencilLayout
from .options import OptionsDatabase

if TYPE_CHECKING:
    from .errors import ComponentFailed


def _never_decreases(instance: ModelState, attribute: attrs.Attribute[int], value: int) -> int:
    if value < getattr(instance, attribute.name):
        raise ValueError(
            f"{attribute.name} can't go backwards from {getattr(instance, attribute.name)}"
            f" to {value}"
        )
    return value


@attrs.define
class ModelState:
    """
    The single point of truth about a rank's model.

    Components read and write fields here and keep no copies of their own.
    """

    layout: PencilLayout
    options: OptionsDatabase
    transport: protocols.Transport = attrs.field(repr=False)
    fields: dict[str, Field3D] = attrs.field(factory=dict, repr=False)
    timestep: int = attrs.field(default=0, on_setattr=_never_decreases)
    time: float = 0.0
    dtm: float = 1.0
    io_handle: protocols.IoBridge | None = attrs.field(default=None, repr=False)
    continue_run: bool = True
    restarted: bool = False
    loop_seconds: float = 0.0
    failure: ComponentFailed | None = None

    @classmethod
    def fresh(
        cls,
        *,
        layout: PencilLayout,
        options: OptionsDatabase,
        transport: protocols.Transport,
        io_handle: protocols.IoBridge | None = None,
    ) -> Self:
        return cls(
            layout=layout,
            options=options,
            transport=transport,
            dtm=options.get_real("dtm", 1.0),
            io_handle=io_handle,
        )

    @property
    def rank(self) -> int:
        return self.layout.rank

    @property
    def logging_context(self) -> protocols.LoggingContext:
        return {"rank": self.layout.rank, "timestep": self.timestep, "model_time": self.time}

    def field(self, name: str) -> Field3D:
        if (found := self.fields.get(name)) is None:
            raise errors.ConfigurationError(
                message=f"Field '{name}' has not been initialised", key=name
            )
        return found
