import numpy as np


class RingBuffer:
    """Fixed-window float64 buffer for moving-window loss smoothing.

    The contents round-trip through ``to_array``/``from_array`` so a resumed
    run smooths exactly like an uninterrupted one.
    """

    def __init__(self, size):
        """Create a RingBuffer.

        Parameters
        ----------
        size: int
            Number of most recent values kept.
        """
        if size <= 0:
            raise ValueError(f"RingBuffer size must be positive, got {size}")

        self.buffer = np.zeros(size, dtype=np.float64)
        self._max_size = size
        self._index = 0
        self._size = 0

    def __len__(self):
        """Amount ring buffer has been filled."""
        return self._size

    def __getitem__(self, index):
        """Get value from ring buffer where ``0`` is oldest, and ``-1`` is newest."""
        if not -self._size <= index < self._size:
            raise IndexError(index)
        if index < 0:
            index += self._size
        return float(self.buffer[(self._index - self._size + index) % self._max_size])

    def __repr__(self):
        return f"RingBuffer(size={self._max_size}, values={self.to_array()!r})"

    @property
    def max_size(self):
        """Maximum number of elements in RingBuffer."""
        return self._max_size

    @property
    def full(self):
        return self._size == self._max_size

    def append(self, val):
        self.buffer[self._index] = val
        self._index = (self._index + 1) % self._max_size
        if not self.full:
            self._size += 1

    def to_array(self):
        """Populated values, oldest first."""
        order = (self._index - self._size + np.arange(self._size)) % self._max_size
        return self.buffer[order].copy()

    @classmethod
    def from_array(cls, size, values):
        """Rebuild a buffer of ``size`` from the newest entries of ``values``."""
        rb = cls(size)
        for v in np.asarray(values, dtype=np.float64)[-size:]:
            rb.append(v)
        return rb

    def mean(self):
        """Average of populated RingBuffer elements.

        Raises
        ------
        ZeroDivisionError
            If the RingBuffer is empty.
        """
        if self._size == 0:
            raise ZeroDivisionError("RingBuffer is empty")
        return float(self.to_array().mean())
