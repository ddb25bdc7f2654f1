"""Segment descriptors: the unit of bookkeeping for fused shuffles.

A descriptor is an ``(offset, length)`` pair, in bytes, into one named
buffer.  A :class:`DescriptorList` keeps many of them as dense arrays, in
transfer order, so the concatenation of all segments forms one logical byte
stream.  Senders gather that stream out of scattered memory, receivers
scatter it back, and because both sides track only the cumulative byte
count, any position in the stream maps to a segment with a single binary
search.  No side channel is needed to re-derive structure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_HEADER = struct.Struct("<Q")


@dataclass(frozen=True)
class Slice:
    """One wire-sized chunk of the logical stream of a descriptor list.

    ``first_segment``/``first_offset`` locate the first byte inside the
    owning list; ``byte_len`` never exceeds the configured slice size.
    """

    first_segment: int
    first_offset: int
    byte_len: int


class DescriptorList:
    """Ordered segments of one buffer, with cumulative-byte lookup.

    Segments may repeat or overlap on the read side (the same bytes can be
    gathered many times); writing through a list requires its segments to be
    pairwise disjoint.
    """

    __slots__ = ("buffer_id", "offsets", "lengths", "_prefix", "_disjoint")

    def __init__(
        self,
        buffer_id: str,
        offsets: Sequence[int] | np.ndarray,
        lengths: Sequence[int] | np.ndarray,
    ) -> None:
        self.buffer_id = buffer_id
        self.offsets = np.ascontiguousarray(offsets, dtype=np.int64)
        self.lengths = np.ascontiguousarray(lengths, dtype=np.int64)
        if self.offsets.ndim != 1 or self.offsets.shape != self.lengths.shape:
            raise ValueError("offsets and lengths must be equal-length 1-D arrays")
        if self.offsets.size and (self.offsets.min() < 0 or self.lengths.min() < 0):
            raise ValueError("offsets and lengths must be non-negative")
        self._prefix = np.concatenate(
            ([0], np.cumsum(self.lengths, dtype=np.int64))
        )
        self._disjoint: bool | None = None

    @classmethod
    def from_pairs(cls, buffer_id: str, pairs: Iterable[tuple[int, int]]) -> DescriptorList:
        pairs = list(pairs)
        offsets = [p[0] for p in pairs]
        lengths = [p[1] for p in pairs]
        return cls(buffer_id, offsets, lengths)

    def __len__(self) -> int:
        return self.offsets.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorList):
            return NotImplemented
        return (
            self.buffer_id == other.buffer_id
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.lengths, other.lengths)
        )

    def __repr__(self) -> str:
        return (
            f"DescriptorList({self.buffer_id!r}, {len(self)} segments, "
            f"{self.total_bytes} bytes)"
        )

    @property
    def total_bytes(self) -> int:
        return int(self._prefix[-1])

    def locate(self, cum_bytes: int) -> tuple[int, int]:
        """Map a cumulative byte position to ``(segment, offset_in_segment)``.

        Positions on a segment boundary resolve to the start of the next
        non-empty segment; the end of the stream maps to
        ``(len(self), 0)``.
        """
        if not 0 <= cum_bytes <= self.total_bytes:
            raise ValueError(f"position {cum_bytes} outside stream of {self.total_bytes}")
        if cum_bytes == self.total_bytes:
            return len(self), 0
        seg = int(np.searchsorted(self._prefix, cum_bytes, side="right")) - 1
        return seg, cum_bytes - int(self._prefix[seg])

    def _check_bounds(self, buf_size: int) -> None:
        if self.offsets.size == 0:
            return
        ends = self.offsets + self.lengths
        if int(ends.max()) > buf_size:
            raise ValueError(
                f"segment ends at {int(ends.max())}, past buffer of {buf_size} bytes"
            )

    def _uniform_index(self) -> np.ndarray | None:
        # Equal narrow segments: gather/scatter become one fancy index.  The
        # index matrix holds an int64 per byte, so past a couple hundred
        # bytes per segment plain slice copies beat it and we skip it.
        if self.lengths.size == 0:
            return None
        width = int(self.lengths[0])
        if not 0 < width < 256 or not bool(np.all(self.lengths == width)):
            return None
        return self.offsets[:, None] + np.arange(width, dtype=np.int64)[None, :]

    def gather(self, src: np.ndarray) -> np.ndarray:
        """Concatenate the segments of ``src`` into one contiguous array."""
        src = _as_bytes(src)
        self._check_bounds(src.size)
        idx = self._uniform_index()
        if idx is not None:
            return src[idx].reshape(-1)
        out = np.empty(self.total_bytes, dtype=np.uint8)
        pos = 0
        for off, ln in zip(self.offsets.tolist(), self.lengths.tolist()):
            out[pos : pos + ln] = src[off : off + ln]
            pos += ln
        return out

    def _require_disjoint(self) -> None:
        if self._disjoint is None:
            live = self.lengths > 0
            order = np.argsort(self.offsets[live], kind="stable")
            offs = self.offsets[live][order]
            ends = offs + self.lengths[live][order]
            self._disjoint = bool(np.all(ends[:-1] <= offs[1:])) if offs.size else True
        if not self._disjoint:
            raise ValueError("segments overlap; cannot scatter through this list")

    def scatter(self, data: np.ndarray, dst: np.ndarray) -> None:
        """Spread a contiguous stream back out into the segments of ``dst``."""
        data = _as_bytes(data)
        if data.size != self.total_bytes:
            raise ValueError(f"stream is {data.size} bytes, descriptors cover {self.total_bytes}")
        self._check_bounds(dst.size)
        self._require_disjoint()
        idx = self._uniform_index()
        if idx is not None:
            dst[idx] = data.reshape(idx.shape)
            return
        pos = 0
        for off, ln in zip(self.offsets.tolist(), self.lengths.tolist()):
            dst[off : off + ln] = data[pos : pos + ln]
            pos += ln

    def gather_range(self, cum_offset: int, nbytes: int, src: np.ndarray) -> np.ndarray:
        """Gather one contiguous span of the stream; the send path for slices."""
        src = _as_bytes(src)
        if cum_offset + nbytes > self.total_bytes:
            raise ValueError("range extends past the descriptor stream")
        self._check_bounds(src.size)
        out = np.empty(nbytes, dtype=np.uint8)
        seg, into = self.locate(cum_offset)
        pos = 0
        while pos < nbytes:
            take = min(nbytes - pos, int(self.lengths[seg]) - into)
            off = int(self.offsets[seg]) + into
            out[pos : pos + take] = src[off : off + take]
            pos += take
            seg += 1
            into = 0
        return out

    def write_range(self, cum_offset: int, data: np.ndarray, dst: np.ndarray) -> None:
        """Scatter one contiguous span of the stream, not necessarily all of it.

        This is the receive path for slice-at-a-time transfer: each arriving
        slice lands at its cumulative offset without waiting for the rest.
        """
        data = _as_bytes(data)
        if cum_offset + data.size > self.total_bytes:
            raise ValueError("range extends past the descriptor stream")
        self._check_bounds(dst.size)
        self._require_disjoint()
        seg, into = self.locate(cum_offset)
        pos = 0
        remaining = data.size
        while remaining > 0:
            take = min(remaining, int(self.lengths[seg]) - into)
            off = int(self.offsets[seg]) + into
            dst[off : off + take] = data[pos : pos + take]
            pos += take
            remaining -= take
            seg += 1
            into = 0

    def slice_plan(self, slice_bytes: int) -> list[Slice]:
        """Tile the stream into chunks of at most ``slice_bytes``.

        Slices ignore segment boundaries: a slice may end mid-segment and
        the next one picks up where it left off, so every slice except
        possibly the last is full-sized.
        """
        if slice_bytes < 1:
            raise ValueError("slice_bytes must be positive")
        total = self.total_bytes
        plan = []
        for pos in range(0, total, slice_bytes):
            seg, into = self.locate(pos)
            plan.append(Slice(seg, into, min(slice_bytes, total - pos)))
        return plan

    def to_bytes(self) -> bytes:
        """Wire form: little-endian u64 count, then (offset, length) u64 pairs."""
        n = len(self)
        table = np.empty((n, 2), dtype="<u8")
        table[:, 0] = self.offsets
        table[:, 1] = self.lengths
        return _HEADER.pack(n) + table.tobytes()

    @classmethod
    def from_bytes(cls, buffer_id: str, blob: bytes) -> DescriptorList:
        if len(blob) < _HEADER.size:
            raise ValueError("descriptor blob too short for header")
        (n,) = _HEADER.unpack_from(blob)
        body = blob[_HEADER.size :]
        if len(body) != n * 16:
            raise ValueError(f"descriptor blob: expected {n} pairs, got {len(body)} bytes")
        table = np.frombuffer(body, dtype="<u8").reshape(n, 2)
        return cls(buffer_id, table[:, 0].astype(np.int64), table[:, 1].astype(np.int64))


def concat(lists: Sequence[DescriptorList]) -> DescriptorList:
    """Merge lists over the same buffer, preserving order."""
    if not lists:
        raise ValueError("nothing to concatenate")
    buffer_id = lists[0].buffer_id
    for d in lists[1:]:
        if d.buffer_id != buffer_id:
            raise ValueError(f"buffer mismatch: {d.buffer_id!r} vs {buffer_id!r}")
    return DescriptorList(
        buffer_id,
        np.concatenate([d.offsets for d in lists]),
        np.concatenate([d.lengths for d in lists]),
    )


def _as_bytes(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr)
    if out.dtype != np.uint8:
        raise ValueError("buffers are raw byte arrays (dtype uint8)")
    return out.reshape(-1)
