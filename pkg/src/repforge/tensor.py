"""Dense float64 tensors.

``Tensor`` is a thin, validated, immutable wrapper over a row-major numpy
array. Layer kernels work directly on float64 ndarrays; ``Tensor`` converts to
one through ``np.asarray`` so both can be passed wherever an array is expected.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

MAX_RANK = 4


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with an operation."""


class Tensor:
    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != arr.size:
                raise ShapeError(
                    f"shape {list(shape)} needs {math.prod(shape)} elements, got {arr.size}"
                )
            arr = arr.reshape(shape)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ShapeError(f"rank must be 1..{MAX_RANK}, got {arr.ndim}")
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"extents must be positive, got {list(arr.shape)}")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def zeros(cls, shape: Iterable[int]) -> "Tensor":
        return cls(np.zeros(tuple(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values (read-only)."""
        return self._array.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._array

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __len__(self) -> int:
        return self._array.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)})"

    def tolist(self):
        return self._array.tolist()


def _as_tensor(t) -> Tensor:
    return t if isinstance(t, Tensor) else Tensor(t)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.rank != 2 or b.rank != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {list(a.shape)} by {list(b.shape)}")
    return Tensor(a.numpy() @ b.numpy())


def reshape(t, new_shape: Sequence[int]) -> Tensor:
    t = _as_tensor(t)
    new_shape = tuple(int(s) for s in new_shape)
    if math.prod(new_shape) != math.prod(t.shape):
        raise ShapeError(
            f"cannot reshape {list(t.shape)} ({math.prod(t.shape)} elements) "
            f"to {list(new_shape)} ({math.prod(new_shape)} elements)"
        )
    return Tensor(t.numpy().reshape(new_shape))


def reduce(t, mode: str = "sum", axis: int | None = None) -> Tensor:
    """Sum, mean or max along ``axis`` (``None`` reduces everything).

    Full reductions return a length-1 tensor; axis reductions of a vector
    likewise return length 1, since rank-0 tensors are not representable.
    """
    t = _as_tensor(t)
    if axis is not None and not 0 <= axis < t.rank:
        raise ShapeError(f"axis {axis} out of range for rank {t.rank}")
    arr = t.numpy()
    if mode == "sum":
        out = math.fsum(arr.ravel()) if axis is None else arr.sum(axis=axis)
    elif mode == "mean":
        out = math.fsum(arr.ravel()) / arr.size if axis is None else arr.mean(axis=axis)
    elif mode == "max":
        out = arr.max(axis=axis)
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    return Tensor(np.atleast_1d(out))
