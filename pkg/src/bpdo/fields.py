"""Dense rank-3 fields: the carrier type for features and prior maps."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


class TensorField:
    """A dense (channels, rows, cols) array of finite reals.

    This is the container that moves between pipeline stages: backbone
    features, attention outputs, and the four prior maps all live in one.
    The constructor validates shape and finiteness once so downstream code
    can assume both.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise InvalidInputError(
                f"TensorField expects a (channels, rows, cols) array, got shape {arr.shape}"
            )
        if arr.size == 0:
            raise InvalidInputError("TensorField must be non-empty")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("TensorField values must all be finite")
        self.data = arr

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, channels, rows, cols, dtype=np.float64):
        if channels < 1 or rows < 1 or cols < 1:
            raise InvalidInputError("TensorField dimensions must be positive")
        return cls(np.zeros((channels, rows, cols), dtype=dtype))

    def channel(self, i) -> np.ndarray:
        """View of one channel as a (rows, cols) array."""
        return self.data[i]

    def __repr__(self):
        return f"TensorField(channels={self.channels}, rows={self.rows}, cols={self.cols})"
