from __future__ import annotations

import logging
from typing import Iterable, Optional, Sequence

logger = logging.getLogger(__name__)


class Collector:
    """An error collector used by library operations so that recoverable
    problems can be saved for later and reported by the command runners.

    Errors are raised when `throw` is `True` (the default). Warnings
    (`HandMotionWarning`) are never raised; they are logged and stored so a
    caller can inspect or flush them.
    """

    default: Collector
    """Simple singleton used whenever an Optional[Collector] parameter is None."""

    def __init__(self, throw: bool = True):
        self._exceptions: list[Exception] = []
        self._throw = throw

    def handle(self, err: Exception):
        """Handle an exception.

        Warnings are logged and stored. Other exceptions are stored and, if
        `throw` is `True`, raised."""

        self._exceptions.append(err)
        if isinstance(err, HandMotionWarning):
            logger.warning("%s", err)
        elif self._throw:
            raise err

    def exceptions(self):
        return self._exceptions

    def warnings(self) -> list[HandMotionWarning]:
        return [e for e in self._exceptions if isinstance(e, HandMotionWarning)]

    def flush(self):
        e = list(self._exceptions)
        self._exceptions = []
        return e

    def __len__(self):
        return len(self._exceptions)

    def __iter__(self) -> Iterable[Exception]:
        return iter(self._exceptions)


Collector.default = Collector()


class HandMotionError(Exception):
    """Base class for every error raised by this package."""

    ...


class HandMotionWarning(HandMotionError):
    """A recoverable condition. Collected, never raised by a `Collector`."""

    ...


class ConfigError(HandMotionError): ...


class DataFormatError(HandMotionError): ...


class NumericError(HandMotionError): ...


class ContractError(HandMotionError): ...


class InvalidConfigError(ConfigError):
    def __init__(self, source: str, message: str, path: Optional[str] = None):
        self.source = source
        self.path = path
        where = f" at `{path}`" if path else ""
        super().__init__(f"Invalid configuration in {source}{where}: {message}")


class InvalidScheduleError(ConfigError):
    def __init__(self, message: str):
        super().__init__(f"Invalid noise schedule: {message}")


class EvenKernelError(ConfigError):
    def __init__(self, kernel: int):
        self.kernel = kernel
        super().__init__(f"Median filter kernel must be odd and >= 3, got {kernel}")


class UnknownStyleError(ConfigError):
    def __init__(self, style: str | int, known: Sequence[str]):
        self.style = style
        super().__init__(
            f"Unknown style `{style}`; known styles are: {', '.join(known)}"
        )


class UnwritableOutputError(ConfigError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Output directory {path} is not writable")


class FileFormatError(DataFormatError):
    def __init__(self, file: str, message: str, offset: Optional[int] = None):
        self.file = file
        self.offset = offset
        at = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{file}{at}: {message}")


class BadMagicError(FileFormatError):
    def __init__(self, file: str, expected: bytes, found: bytes):
        super().__init__(
            file, f"bad magic {found!r}, expected {expected!r}", offset=0
        )


class TruncatedFileError(FileFormatError):
    def __init__(self, file: str, section: str, offset: int):
        self.section = section
        super().__init__(file, f"file truncated, missing {section}", offset=offset)


class ClipCapacityError(FileFormatError):
    def __init__(self, file: str, frames: int, capacity: int):
        super().__init__(
            file,
            f"clip has {frames} frames but capacity is {capacity};"
            " clips must be pre-split",
        )


class MotionLengthError(DataFormatError):
    def __init__(self, length: int, expected: int):
        super().__init__(f"Motion vector has {length} values, expected {expected}")


class MismatchedDatasetError(DataFormatError):
    def __init__(self, message: str):
        super().__init__(f"Mismatched datasets: {message}")


class NonFiniteError(NumericError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"Non-finite values produced by `{op}`")


class NonFiniteLossError(NumericError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Loss became non-finite at training step {step}")


class DegenerateScheduleError(NumericError):
    def __init__(self, t: int, alpha_bar: float):
        super().__init__(
            f"alpha_bar[{t}] = {alpha_bar:.3e} is too small to invert the forward process"
        )


class NegativeEigenvalueError(NumericError):
    def __init__(self, value: float):
        super().__init__(
            f"Covariance product has a negative eigenvalue {value:.3e} below tolerance"
        )


class EigensolveError(NumericError):
    def __init__(self, cause: str):
        super().__init__(f"Eigendecomposition did not converge: {cause}")


class DimensionError(ContractError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"Shape mismatch in `{op}`: {shown}")


class NonScalarLossError(ContractError):
    def __init__(self, shape: tuple[int, ...]):
        super().__init__(f"Backward needs a scalar loss, got shape {shape}")


class DegenerateLossError(ContractError):
    def __init__(self):
        super().__init__("Every frame in the batch is masked out; the loss is undefined")


class UndefinedMetricError(HandMotionError):
    def __init__(self, metric: str, reason: str):
        self.metric = metric
        super().__init__(f"{metric} is undefined: {reason}")


class UndefinedAmplitudeError(HandMotionError):
    def __init__(self, hand: str, valid: int):
        self.hand = hand
        super().__init__(
            f"Amplitude of the {hand} hand needs at least 2 valid frames, got {valid}"
        )


class QuaternionNormWarning(HandMotionWarning):
    def __init__(self, slot: str, norm: float):
        self.slot = slot
        self.norm = norm
        super().__init__(f"Quaternion {slot} had norm {norm:.6f}; renormalized")


class ScoreClampedWarning(HandMotionWarning):
    def __init__(self, hand: str, score: float):
        super().__init__(f"Confidence score {score} for the {hand} hand clamped to [0, 1]")


class MetricAbsentWarning(HandMotionWarning):
    def __init__(self, metric: str, reason: str):
        self.metric = metric
        super().__init__(f"{metric} reported as absent: {reason}")


class TimestepRangeError(ContractError):
    def __init__(self, t, steps: int):
        super().__init__(f"Timestep {t} outside the schedule range [0, {steps})")


class InvalidClipError(DataFormatError):
    def __init__(self, file: str, message: str):
        self.file = file
        super().__init__(f"Invalid clip {file}: {message}")


class InvalidBasePathError(ConfigError):
    def __init__(self, message: str):
        super().__init__(message)
