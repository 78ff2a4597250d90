"""Fixed-point numeric primitives: rounding, saturation, MAC accumulation,
and multiply-shift requantization.

All functions are pure and operate on plain Python integers, so results are
exact at any width. The same rules are mirrored by the vectorized integer
engine; this module is the single definition of the arithmetic semantics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "FxFormat",
    "Accumulator",
    "AccumulatorOverflowError",
    "round_nearest",
    "rounding_rshift",
    "saturate",
    "mac",
    "requantize",
]


class AccumulatorOverflowError(ArithmeticError):
    """A MAC accumulation exceeded the accumulator register width."""


@dataclass(frozen=True)
class FxFormat:
    """Signed fixed-point storage format.

    n_bits counts the full word including the sign bit; frac_bits is how many
    of them are fractional (weights in [-1, 1) use n_bits - 1).
    """

    n_bits: int
    frac_bits: int

    def __post_init__(self) -> None:
        if not 2 <= self.n_bits <= 16:
            raise ValueError(f"n_bits must be in [2, 16], got {self.n_bits}")
        if not 0 <= self.frac_bits < self.n_bits:
            raise ValueError(
                f"frac_bits must be in [0, n_bits), got {self.frac_bits}"
            )

    @property
    def min_int(self) -> int:
        return -(1 << (self.n_bits - 1))

    @property
    def max_int(self) -> int:
        return (1 << (self.n_bits - 1)) - 1


@dataclass(frozen=True)
class Accumulator:
    """Signed accumulation register. Overflow is a detected error, never a wrap."""

    value: int = 0
    width: int = 32

    def __post_init__(self) -> None:
        if self.width < 2:
            raise ValueError(f"accumulator width must be >= 2, got {self.width}")
        lim = 1 << (self.width - 1)
        if not -lim <= self.value <= lim - 1:
            raise AccumulatorOverflowError(
                f"value {self.value} does not fit a signed {self.width}-bit register"
            )

    def __int__(self) -> int:
        return self.value


def round_nearest(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    if not math.isfinite(x):
        raise ValueError(f"cannot round non-finite value {x!r}")
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def rounding_rshift(v: int, shift: int) -> int:
    """Divide v by 2**shift, rounding to nearest with ties away from zero.

    Exact integer arithmetic; equal to round_nearest(v / 2**shift) at any
    magnitude.
    """
    if shift < 0:
        raise ValueError(f"shift must be >= 0, got {shift}")
    if shift == 0:
        return v
    half = 1 << (shift - 1)
    if v >= 0:
        return (v + half) >> shift
    return -((-v + half) >> shift)


def saturate(v: int, fmt: FxFormat) -> int:
    """Clamp v into the signed n_bits range of fmt."""
    if v > fmt.max_int:
        return fmt.max_int
    if v < fmt.min_int:
        return fmt.min_int
    return int(v)


def mac(acc: Accumulator, a: int, b: int) -> Accumulator:
    """One multiply-accumulate step: acc + a*b in exact arithmetic.

    Raises AccumulatorOverflowError if the result does not fit acc.width,
    which signals an undersized accumulator rather than silently wrapping.
    """
    total = acc.value + a * b
    lim = 1 << (acc.width - 1)
    if not -lim <= total <= lim - 1:
        raise AccumulatorOverflowError(
            f"accumulating {a}*{b} onto {acc.value} exceeds {acc.width}-bit range"
        )
    return Accumulator(total, acc.width)


def requantize(
    acc: Accumulator | int,
    mult: int,
    shift: int,
    fmt: FxFormat,
    relu: bool = False,
) -> int:
    """Rescale an accumulator to the output format: saturate(round(acc*mult/2^shift)).

    With relu on, negative results clamp to 0 before saturation, folding the
    activation into the requantization stage.
    """
    if mult < 1:
        raise ValueError(f"mult must be >= 1, got {mult}")
    v = rounding_rshift(int(acc) * mult, shift)
    if relu and v < 0:
        v = 0
    return saturate(v, fmt)
