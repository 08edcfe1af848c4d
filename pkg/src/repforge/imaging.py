"""Map a preprocessed 9x784 rep matrix onto one of the CNN input layouts."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from repforge.dataset import NUM_FEATURES, TARGET_LEN
from repforge.tensor import ShapeError


class ImageLayout(str, Enum):
    SQUARE = "square84"
    RECT = "rect"
    CHANNELS = "channels"

    @classmethod
    def parse(cls, name: str) -> "ImageLayout":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown layout {name!r}; valid layouts: {valid}") from None


_DIMS = {
    ImageLayout.SQUARE: (84, 84, 1),
    ImageLayout.RECT: (NUM_FEATURES, TARGET_LEN, 1),
    ImageLayout.CHANNELS: (3, TARGET_LEN, 3),
}


def layout_dims(layout: ImageLayout | str) -> tuple[int, int, int]:
    return _DIMS[ImageLayout(layout)]


@dataclass
class InputImage:
    data: np.ndarray  # (H, W, C)
    layout: ImageLayout
    label: int = 0
    set_id: str = ""
    rep_index: int = 0


def format_array(padded: np.ndarray, layout: ImageLayout | str) -> np.ndarray:
    """Layout transform on a bare ``(9, L)`` matrix; returns ``(H, W, C)``.

    Works for any time length ``L`` (the square layout requires 9 * L to be a
    perfect square).
    """
    layout = ImageLayout(layout)
    padded = np.asarray(padded, dtype=np.float64)
    if padded.ndim != 2 or padded.shape[0] != NUM_FEATURES:
        raise ShapeError(f"expected a {NUM_FEATURES}xL matrix, got {list(padded.shape)}")
    if layout is ImageLayout.RECT:
        return padded[:, :, None].copy()
    if layout is ImageLayout.CHANNELS:
        # channel c stacks feature rows 3c, 3c+1, 3c+2
        return padded.reshape(3, 3, padded.shape[1]).transpose(1, 2, 0).copy()
    side = int(round(np.sqrt(padded.size)))
    if side * side != padded.size:
        raise ShapeError(f"{list(padded.shape)} cannot be reshaped into a square image")
    return padded.reshape(side, side, 1).copy()


def unformat_array(image: np.ndarray, layout: ImageLayout | str) -> np.ndarray:
    """Inverse of :func:`format_array`."""
    layout = ImageLayout(layout)
    image = np.asarray(image, dtype=np.float64)
    if layout is ImageLayout.RECT:
        return image[:, :, 0].copy()
    if layout is ImageLayout.CHANNELS:
        return image.transpose(2, 0, 1).reshape(NUM_FEATURES, image.shape[1]).copy()
    return image.reshape(NUM_FEATURES, -1).copy()


def format_rep(
    padded: np.ndarray, layout: ImageLayout | str, label: int = 0, set_id: str = "", rep_index: int = 0
) -> InputImage:
    padded = np.asarray(padded)
    if padded.shape != (NUM_FEATURES, TARGET_LEN):
        raise ShapeError(f"expected a {NUM_FEATURES}x{TARGET_LEN} matrix, got {list(padded.shape)}")
    layout = ImageLayout(layout)
    return InputImage(format_array(padded, layout), layout, label, set_id, rep_index)
