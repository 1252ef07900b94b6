from __future__ import annotations

import logging
import re
from collections.abc import Iterable, Sequence
from typing import Self

import attrs

from . import errors, protocols
from .options import OptionsDatabase

log = logging.getLogger(__name__)

regexes = {"component_name": re.compile(r"^(?!.*\s)\w+$", re.ASCII)}


@attrs.frozen
class ComponentDescriptor:
    """
    A named, versioned component made of optional lifecycle callbacks.

    The version is stored and reported but never interpreted.
    """

    name: str = attrs.field()
    version: str = "1.0"
    init_callback: protocols.Callback | None = None
    timestep_callback: protocols.Callback | None = None
    finalise_callback: protocols.Callback | None = None

    @name.validator
    def _validate_name(self, attribute: object, value: str) -> None:
        if not regexes["component_name"].match(value):
            raise errors.RegistrationError(message=f"Invalid component name {value!r}", key=value)

    def __attrs_post_init__(self) -> None:
        if all(self.callback(stage) is None for stage in protocols.Stage):
            raise errors.RegistrationError(
                message=f"Component '{self.name}' supplies no callbacks", key=self.name
            )

    def callback(self, stage: protocols.Stage) -> protocols.Callback | None:
        if stage is protocols.Stage.INIT:
            return self.init_callback
        elif stage is protocols.Stage.TIMESTEP:
            return self.timestep_callback
        return self.finalise_callback


@attrs.frozen
class OrderedCallback:
    component: str
    stage: protocols.Stage
    callback: protocols.Callback = attrs.field(eq=False, repr=False)


def ordering_option(stage: protocols.Stage) -> str:
    return f"{stage.value}_ordering"


def enabled_option(name: str) -> str:
    return f"{name}_enabled"


@attrs.define
class Registry:
    """
    Records every known component and resolves, per stage, the order in which
    the callbacks of enabled components are run.
    """

    components: list[ComponentDescriptor] = attrs.field(factory=list)
    enabled: list[str] = attrs.field(factory=list)
    init_order: list[OrderedCallback] = attrs.field(factory=list)
    timestep_order: list[OrderedCallback] = attrs.field(factory=list)
    finalise_order: list[OrderedCallback] = attrs.field(factory=list)
    finalised: bool = False

    def order(self, stage: protocols.Stage) -> list[OrderedCallback]:
        if stage is protocols.Stage.INIT:
            return self.init_order
        elif stage is protocols.Stage.TIMESTEP:
            return self.timestep_order
        return self.finalise_order

    def descriptor(self, name: str) -> ComponentDescriptor:
        for component in self.components:
            if component.name == name:
                return component
        raise errors.RegistrationError(message=f"No component named '{name}'", key=name)

    def register(self, descriptor: ComponentDescriptor, options: OptionsDatabase) -> Self:
        if self.finalised:
            raise errors.RegistrationError(
                message=f"Can't register '{descriptor.name}' after the registry is finalised",
                key=descriptor.name,
            )

        if any(component.name == descriptor.name for component in self.components):
            raise errors.RegistrationError(
                message=f"Component '{descriptor.name}' is already registered",
                key=descriptor.name,
            )

        self.components.append(descriptor)
        is_enabled = options.get_bool(enabled_option(descriptor.name), False)
        if is_enabled:
            self.enabled.append(descriptor.name)

        log.debug(
            "Registered component",
            extra={"component": descriptor.name, "version": descriptor.version},
        )
        self._resolve(options, strict=False)
        return self

    def finalise(self, options: OptionsDatabase) -> Self:
        """
        Resolve the orders a final time and refuse any further registration
        """
        self._resolve(options, strict=True)
        self.finalised = True
        for stage in protocols.Stage:
            log.info(
                "Resolved %s order: %s",
                stage.value,
                ", ".join(entry.component for entry in self.order(stage)) or "<empty>",
            )
        return self

    def _resolve(self, options: OptionsDatabase, *, strict: bool) -> None:
        for stage in protocols.Stage:
            names = self._ordering(stage, options, strict=strict)
            resolved = resolve_order(self.components, self.enabled, stage, names)

            order = self.order(stage)
            order.clear()
            order.extend(resolved)

    def _ordering(
        self, stage: protocols.Stage, options: OptionsDatabase, *, strict: bool
    ) -> list[str]:
        key = ordering_option(stage)
        if not options.has(key):
            return []

        names = [str(name).strip() for name in options.get_list(key)]
        names = [name for name in names if name]
        if len(set(names)) != len(names):
            raise errors.ConfigurationError(
                message=f"Option '{key}' names a component more than once", key=key
            )

        known = {component.name for component in self.components}
        unknown = [name for name in names if name not in known]
        if unknown and strict:
            raise errors.ConfigurationError(
                message=f"Option '{key}' names unknown components: {', '.join(unknown)}",
                key=key,
            )

        return [name for name in names if name in known]


def resolve_order(
    components: Sequence[ComponentDescriptor],
    enabled: Iterable[str],
    stage: protocols.Stage,
    explicit: Sequence[str],
) -> list[OrderedCallback]:
    """
    Explicitly named components come first in the given order, the rest
    follow in registration order. Disabled components are never included.
    """
    enabled = set(enabled)
    by_name = {component.name: component for component in components}

    names = list(explicit)
    names.extend(component.name for component in components if component.name not in explicit)

    resolved: list[OrderedCallback] = []
    for name in names:
        if name not in enabled:
            continue
        callback = by_name[name].callback(stage)
        if callback is not None:
            resolved.append(OrderedCallback(component=name, stage=stage, callback=callback))
    return resolved


def register_component(
    registry: Registry, descriptor: ComponentDescriptor, options: OptionsDatabase
) -> Registry:
    return registry.register(descriptor, options)
