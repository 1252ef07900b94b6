from collections.abc import Sequence
from typing import ClassVar

import attrs


@attrs.frozen
class MoncError(Exception):
    exit_code: ClassVar[int] = 1


## CONFIGURATION


@attrs.frozen
class ConfigurationError(MoncError):
    message: str
    key: str | None = None
    line: int | None = None


@attrs.frozen
class MissingOption(ConfigurationError):
    pass


@attrs.frozen
class OptionTypeError(ConfigurationError):
    pass


@attrs.frozen
class RegistrationError(ConfigurationError):
    pass


@attrs.frozen
class DecompositionError(ConfigurationError):
    pass


## NUMERIC


@attrs.frozen
class NumericError(MoncError):
    exit_code: ClassVar[int] = 2

    message: str


@attrs.frozen
class SingularityError(NumericError):
    mean: float


@attrs.frozen
class FactorisationError(NumericError):
    cell: int


@attrs.frozen
class NonConvergence(NumericError):
    residual_history: Sequence[float]


@attrs.frozen
class Breakdown(NumericError):
    iteration: int


@attrs.frozen
class StabilityError(NumericError):
    courant: float


## COMMUNICATION


@attrs.frozen
class CommunicationError(MoncError):
    exit_code: ClassVar[int] = 3

    message: str
    rank: int | None = None
    direction: str | None = None


@attrs.frozen
class ProtocolError(CommunicationError):
    pass


@attrs.frozen
class TransmissionError(CommunicationError):
    pass


@attrs.frozen
class StalenessError(CommunicationError):
    absent_ranks: Sequence[int] = ()


## STORAGE


@attrs.frozen
class StorageError(MoncError):
    exit_code: ClassVar[int] = 4

    message: str
    path: str


@attrs.frozen
class CheckpointWriteError(StorageError):
    pass


@attrs.frozen
class CheckpointFormatError(StorageError):
    field: str | None = None


@attrs.frozen
class DiagnosticsWriteError(StorageError):
    pass


## LIFECYCLE


@attrs.frozen
class ComponentFailed(MoncError):
    component: str
    stage: str
    error: Exception

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        return getattr(self.error, "exit_code", 1)
