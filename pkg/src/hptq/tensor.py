"""Dense float64 tensors with explicit layout tags.

Layouts name the axis meaning so per-channel reductions are unambiguous:
  hwc   activation, height x width x channels
  hwio  conv weight, kh x kw x in-channels x out-channels
  io    dense weight, in-features x out-features
  c     flat vector (bias, flattened activation, logits)
"""

from dataclasses import dataclass

import numpy as np

CHANNEL_AXIS = {"hwc": 2, "hwio": 3, "io": 1, "c": 0}


@dataclass(frozen=True)
class Tensor:
    """Immutable n-d array of 64-bit reals, stored flat in row-major order."""

    dims: tuple
    data: np.ndarray
    layout: str = "hwc"

    def __post_init__(self):
        if len(self.data) != int(np.prod(self.dims)):
            raise ValueError(
                f"dims {self.dims} imply {int(np.prod(self.dims))} elements, got {len(self.data)}"
            )
        if self.layout not in CHANNEL_AXIS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if len(self.dims) != len(self.layout):
            raise ValueError(f"layout {self.layout!r} expects rank {len(self.layout)}, got dims {self.dims}")
        self.data.setflags(write=False)

    @classmethod
    def from_array(cls, array, layout="hwc"):
        arr = np.ascontiguousarray(array, dtype=np.float64)
        return cls(dims=arr.shape, data=arr.reshape(-1), layout=layout)

    @property
    def array(self):
        """Shaped read-only view of the flat storage."""
        return self.data.reshape(self.dims)

    @property
    def channels(self):
        return self.dims[CHANNEL_AXIS[self.layout]]

    def size(self):
        return len(self.data)


def max_abs(t: Tensor) -> float:
    """Largest absolute value in the tensor."""
    if t.size() == 0:
        raise ValueError("empty input")
    return float(np.max(np.abs(t.data)))


def channel_reduce(t: Tensor, which: str) -> np.ndarray:
    """Reduce over every non-channel position; returns one value per channel.

    `which` is one of min/max/mean.
    """
    if t.size() == 0:
        raise ValueError("empty input")
    axis = CHANNEL_AXIS[t.layout]
    moved = np.moveaxis(t.array, axis, -1).reshape(-1, t.dims[axis])
    if which == "min":
        return moved.min(axis=0)
    if which == "max":
        return moved.max(axis=0)
    if which == "mean":
        return moved.mean(axis=0)
    raise ValueError(f"unknown reduction {which!r}")
