"""Uniform affine and symmetric power-of-two quantizers.

The symmetric quantizers keep the zero-point at 0 and restrict the clipping
threshold to t = 2**exponent, so every step size is an exact power of two and
quantize/dequantize arithmetic is exact in binary floating point.

Rounding is half away from zero throughout; the test oracles rely on the same
rule.
"""

import math
from dataclasses import dataclass

import numpy as np

# Exponent assigned to all-zero data, where log2 of the max is undefined.
MIN_EXPONENT = -16


def round_half_away(x):
    """Round to nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class UniformSpec:
    """General uniform quantizer over a clip range [low, high]."""

    low: float
    high: float
    bits: int

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if not self.low < self.high:
            raise ValueError(f"need low < high, got [{self.low}, {self.high}]")

    @property
    def step(self):
        return (self.high - self.low) / (2**self.bits - 1)

    @property
    def zero_point(self):
        return self.low / self.step


@dataclass(frozen=True)
class QuantSpec:
    """Symmetric quantizer with threshold 2**exponent and zero-point 0."""

    bits: int
    signed: bool
    exponent: int

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.exponent != int(self.exponent):
            raise ValueError(f"exponent must be an integer, got {self.exponent}")

    @property
    def threshold(self):
        return math.ldexp(1.0, self.exponent)

    @property
    def step(self):
        # signed: 2t / 2^bits, unsigned: t / 2^bits -- both exact powers of two
        shift = 1 if self.signed else 0
        return math.ldexp(1.0, self.exponent + shift - self.bits)

    @property
    def int_min(self):
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def int_max(self):
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    def to_dict(self):
        return {"bits": self.bits, "signed": self.signed, "exponent": self.exponent}

    @classmethod
    def from_dict(cls, d):
        return cls(bits=int(d["bits"]), signed=bool(d["signed"]), exponent=int(d["exponent"]))


def uniform_quantize(x, spec: UniformSpec):
    """Clip to [low, high] and snap to the 2^bits point uniform grid."""
    x = np.asarray(x, dtype=np.float64)
    clipped = np.clip(x, spec.low, spec.high)
    return spec.step * round_half_away((clipped - spec.low) / spec.step) + spec.low


def quantize_int(x, spec: QuantSpec):
    """Integer image of the symmetric quantizer."""
    x = np.asarray(x, dtype=np.float64)
    codes = round_half_away(x / spec.step)
    return np.clip(codes, spec.int_min, spec.int_max).astype(np.int64)


def dequantize_int(codes, spec: QuantSpec):
    return np.asarray(codes, dtype=np.float64) * spec.step


def quantize(x, spec: QuantSpec):
    """Simulated quantize-dequantize (values land on the grid {k * step})."""
    return dequantize_int(quantize_int(x, spec), spec)
