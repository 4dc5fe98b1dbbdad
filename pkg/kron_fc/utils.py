from __future__ import annotations

from os.path import abspath, dirname

import numpy as np
from numpy.typing import NDArray


ROOT = dirname(dirname(abspath(__file__)))

FloatArray = NDArray[np.float64]


class ShapeError(ValueError):
    """Operand shapes are incompatible or a dimension does not divide."""


class ArgumentError(ValueError):
    """A scalar argument lies outside its documented range."""


class CapacityError(ValueError):
    """A result would be too large to allocate."""


class NumericError(ArithmeticError):
    """An iterative routine failed to converge."""


class UnsupportedError(NotImplementedError):
    """The requested combination of inputs has no implementation."""


class ParseError(ValueError):
    """Malformed binary input. `offset` is the byte position of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Malformed config text. `line` is 1-based, 0 when not tied to a line."""

    def __init__(self, message: str, line: int = 0) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class CheckpointError(ValueError):
    """Checkpoint cannot be read or does not fit the requested model."""


# largest number of float64 entries we are willing to materialize (2 GiB)
MAX_ENTRIES = 2**28


def check_capacity(*dims: int) -> None:
    """Raise CapacityError if an array with the given dims would be too large."""
    size = int(np.prod([int(d) for d in dims], dtype=object))
    if size > MAX_ENTRIES:
        raise CapacityError(
            f"result of shape {tuple(dims)} has {size} entries, limit is {MAX_ENTRIES}"
        )


def si_format(count: int | float) -> str:
    """Format a parameter count the way the published tables do: 2084 -> '2.1K',
    1638656 -> '1.64M', 16484 -> '16.5K'.
    """
    if count < 1e3:
        return f"{count:g}"
    if count < 1e6:
        return f"{count / 1e3:.1f}K"
    return f"{count / 1e6:.2f}M"


def reduction(count: float, baseline: float) -> float:
    """Percent reduction of count relative to baseline."""
    if baseline <= 0:
        raise ArgumentError(f"baseline count must be positive, got {baseline}")
    return 100 * (1 - count / baseline)
