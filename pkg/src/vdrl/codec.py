"""Multi-channel run-length event codec.

Dense integer code grids (T time steps x C channels) are run-length encoded
per channel and the resulting (value, length) runs are interleaved into one
event sequence, ordered by start offset and then by channel index. Because
that ordering is deterministic, the channel and offset of every event can be
recovered from the event lengths alone (see :func:`infer_channels_offsets`).

Channels are 0-indexed throughout.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_MAX_RUN_LENGTH = 256

VDRL_MAGIC = b"VDRL"
VDRL_VERSION = 1
_HEADER = struct.Struct("<4sBBBBHII")
_RECORD = np.dtype([("value", "<i1"), ("length", "<u2")])


class CodecError(ValueError):
    """Raised for malformed run-length data."""


class Run(NamedTuple):
    value: int
    length: int


@dataclass
class DenseCodes:
    """Quantised multi-channel codes as integer levels in [-k, k]."""

    levels: np.ndarray
    base_rate_hz: float = 250.0
    k: int = 7

    def __post_init__(self):
        levels = np.asarray(self.levels)
        if levels.ndim == 1:
            levels = levels[:, None]
        if levels.ndim != 2 or levels.shape[0] < 1 or levels.shape[1] < 1:
            raise CodecError(f"levels must be a non-empty T x C grid, got shape {levels.shape}")
        if np.abs(levels).max() > self.k:
            raise CodecError(f"levels outside [-{self.k}, {self.k}]")
        self.levels = levels.astype(np.int64)

    @property
    def num_steps(self) -> int:
        return self.levels.shape[0]

    @property
    def num_channels(self) -> int:
        return self.levels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_steps / self.base_rate_hz

    def values(self) -> np.ndarray:
        """Levels rescaled to the unit interval, z' = level / k."""
        return self.levels / self.k


@dataclass(eq=False)
class EventSequence:
    """Interleaved run-length events for a multi-channel code grid.

    ``channels`` and ``offsets`` are derivable from the lengths and are only
    cached here; :meth:`validate` checks that the cache agrees with
    :func:`infer_channels_offsets`.
    """

    values: np.ndarray
    lengths: np.ndarray
    num_channels: int
    k: int = 7
    max_run_length: int = DEFAULT_MAX_RUN_LENGTH
    base_rate_hz: float = 250.0
    channels: np.ndarray | None = None
    offsets: np.ndarray | None = None
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64).reshape(-1)
        self.lengths = np.asarray(self.lengths, dtype=np.int64).reshape(-1)
        if self.values.shape != self.lengths.shape:
            raise CodecError("values and lengths differ in size")

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        """Same events and header fields; channels and offsets follow from lengths."""
        if not isinstance(other, EventSequence):
            return NotImplemented
        a, b = self, other
        return (np.array_equal(a.values, b.values) and np.array_equal(a.lengths, b.lengths)
                and (a.num_channels, a.k, a.max_run_length, a.base_rate_hz)
                == (b.num_channels, b.k, b.max_run_length, b.base_rate_hz))

    @property
    def events(self) -> list[Run]:
        return [Run(int(v), int(n)) for v, n in zip(self.values, self.lengths)]

    @classmethod
    def from_runs(cls, runs: Sequence[tuple[int, int]], num_channels: int, **kwargs) -> "EventSequence":
        runs = list(runs)
        values = [v for v, _ in runs]
        lengths = [n for _, n in runs]
        return cls(np.array(values, dtype=np.int64), np.array(lengths, dtype=np.int64), num_channels, **kwargs)

    def with_structure(self) -> "EventSequence":
        """Return a copy with channels and offsets filled in by inference."""
        channels, offsets = infer_channels_offsets(self.lengths, self.num_channels)
        return EventSequence(
            self.values.copy(), self.lengths.copy(), self.num_channels, self.k,
            self.max_run_length, self.base_rate_hz, channels, offsets, self.truncated,
        )

    def validate(self) -> None:
        if self.num_channels < 1:
            raise CodecError("num_channels must be positive")
        if len(self) and (self.lengths.min() < 1 or self.lengths.max() > self.max_run_length):
            raise CodecError(f"event lengths must lie in [1, {self.max_run_length}]")
        if len(self) and np.abs(self.values).max() > self.k:
            raise CodecError(f"event values must lie in [-{self.k}, {self.k}]")
        if self.channels is not None or self.offsets is not None:
            channels, offsets = infer_channels_offsets(self.lengths, self.num_channels)
            if self.channels is not None and not np.array_equal(self.channels, channels):
                raise CodecError("cached channels disagree with inferred channels")
            if self.offsets is not None and not np.array_equal(self.offsets, offsets):
                raise CodecError("cached offsets disagree with inferred offsets")

    def channel_durations(self) -> np.ndarray:
        channels, _ = infer_channels_offsets(self.lengths, self.num_channels)
        return np.bincount(channels, weights=self.lengths, minlength=self.num_channels).astype(np.int64)

    def duration_s(self) -> float:
        """Duration of the decodable part of the sequence, in seconds."""
        return float(self.channel_durations().min()) / self.base_rate_hz


def _check_sequence(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 1:
        raise CodecError(f"expected a 1-D sequence, got shape {x.shape}")
    if x.size == 0:
        raise CodecError("cannot run-length encode an empty sequence")
    return x.astype(np.int64)


def _runs(x: np.ndarray, max_run_length: int | None) -> tuple[np.ndarray, np.ndarray]:
    starts = np.flatnonzero(np.concatenate([[True], x[1:] != x[:-1]]))
    lengths = np.diff(np.append(starts, len(x)))
    values = x[starts]
    if max_run_length is not None and lengths.max() > max_run_length:
        # Split long runs greedily: full-length pieces, then the remainder.
        pieces = -(-lengths // max_run_length)
        values = np.repeat(values, pieces)
        split = np.full(pieces.sum(), max_run_length, dtype=np.int64)
        last = np.cumsum(pieces) - 1
        split[last] = lengths - (pieces - 1) * max_run_length
        lengths = split
    return values, lengths


def rle_encode(channel, output_length: int, max_run_length: int | None = DEFAULT_MAX_RUN_LENGTH,
               return_truncated: bool = False):
    """Run-length encode a single channel into fixed-size, zero-padded arrays.

    Runs beyond ``output_length`` are cropped. With ``return_truncated`` the
    result carries a third element telling whether cropping happened.
    """
    x = _check_sequence(channel)
    if output_length < 1:
        raise CodecError("output_length must be positive")
    if max_run_length is not None and max_run_length < 1:
        raise CodecError("max_run_length must be positive")
    run_values, run_lengths = _runs(x, max_run_length)
    n = min(len(run_values), output_length)
    values = np.zeros(output_length, dtype=np.int64)
    lengths = np.zeros(output_length, dtype=np.int64)
    values[:n] = run_values[:n]
    lengths[:n] = run_lengths[:n]
    if return_truncated:
        return values, lengths, len(run_values) > output_length
    return values, lengths


def _strip_padding(values, lengths) -> tuple[np.ndarray, np.ndarray]:
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if values.shape != lengths.shape:
        raise CodecError("values and lengths differ in size")
    if (lengths < 0).any():
        raise CodecError("negative run length")
    used = lengths > 0
    n = int(used.sum())
    if not used[:n].all():
        raise CodecError("zero-length padding runs must form a suffix")
    return values[:n], lengths[:n]


def rle_decode(values, lengths, output_length: int) -> np.ndarray:
    """Expand runs into a sequence of exactly ``output_length`` steps.

    Longer expansions are cropped; shorter ones are filled by repeating the
    final value.
    """
    values, lengths = _strip_padding(values, lengths)
    if output_length < 1:
        raise CodecError("output_length must be positive")
    if len(values) == 0:
        raise CodecError("nothing to decode: all runs are padding")
    out = np.repeat(values, lengths)[:output_length]
    if len(out) < output_length:
        out = np.concatenate([out, np.full(output_length - len(out), out[-1])])
    return out


def lengths_to_offsets(lengths) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    offsets = np.zeros_like(lengths)
    np.cumsum(lengths[:-1], out=offsets[1:])
    return offsets


def infer_channels_offsets(lengths, num_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Recover each event's channel and start offset from lengths alone.

    Every event goes to the channel whose decoded position is smallest (lowest
    index on ties), starts at that position, and advances it by its length.
    """
    if num_channels < 1:
        raise CodecError("num_channels must be positive")
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    positions = np.zeros(num_channels, dtype=np.int64)
    channels = np.empty(len(lengths), dtype=np.int64)
    offsets = np.empty(len(lengths), dtype=np.int64)
    for i, length in enumerate(lengths):
        c = int(np.argmin(positions))
        channels[i] = c
        offsets[i] = positions[c]
        positions[c] += length
    return channels, offsets


class ChannelTracker:
    """Incremental form of :func:`infer_channels_offsets`, used while sampling."""

    def __init__(self, num_channels: int):
        self.positions = np.zeros(num_channels, dtype=np.int64)

    @property
    def next_channel(self) -> int:
        return int(np.argmin(self.positions))

    @property
    def next_offset(self) -> int:
        return int(self.positions[self.next_channel])

    def push(self, length: int) -> tuple[int, int]:
        c = self.next_channel
        o = int(self.positions[c])
        self.positions[c] += int(length)
        return c, o


def channel_event_indices(channels, num_channels: int) -> np.ndarray:
    """For each event, the number of earlier events on the same channel."""
    channels = np.asarray(channels, dtype=np.int64).reshape(-1)
    if len(channels) and (channels.min() < 0 or channels.max() >= num_channels):
        raise CodecError("channel index out of range")
    counts = np.zeros(num_channels, dtype=np.int64)
    out = np.empty_like(channels)
    for i, c in enumerate(channels):
        out[i] = counts[c]
        counts[c] += 1
    return out


def interleave(values, lengths, output_length: int, include_channels: bool = False,
               include_offsets: bool = False, *, k: int = 7,
               max_run_length: int = DEFAULT_MAX_RUN_LENGTH,
               base_rate_hz: float = 250.0) -> EventSequence:
    """Merge per-channel runs (arrays of shape runs x C) into one event sequence."""
    values = np.asarray(values, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if values.ndim == 1:
        values, lengths = values[:, None], lengths[:, None]
    if values.shape != lengths.shape:
        raise CodecError("values and lengths differ in shape")
    num_channels = values.shape[1]
    totals = lengths.sum(axis=0)
    if (totals != totals[0]).any():
        raise CodecError(f"channels encode different durations: {totals.tolist()}")

    chans, starts, vals, lens = [], [], [], []
    for c in range(num_channels):
        v, n = _strip_padding(values[:, c], lengths[:, c])
        chans.append(np.full(len(v), c, dtype=np.int64))
        starts.append(lengths_to_offsets(n))
        vals.append(v)
        lens.append(n)
    chans = np.concatenate(chans)
    starts = np.concatenate(starts)
    vals = np.concatenate(vals)
    lens = np.concatenate(lens)
    order = np.lexsort((chans, starts))
    truncated = len(order) > output_length
    order = order[:output_length]
    return EventSequence(
        vals[order], lens[order], num_channels, k, max_run_length, base_rate_hz,
        channels=chans[order] if include_channels else None,
        offsets=starts[order] if include_offsets else None,
        truncated=truncated,
    )


def deinterleave(events: EventSequence, output_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Split an event sequence into zero-padded per-channel runs (output_length x C)."""
    channels = events.channels
    if channels is None:
        channels, _ = infer_channels_offsets(events.lengths, events.num_channels)
    values_out = np.zeros((output_length, events.num_channels), dtype=np.int64)
    lengths_out = np.zeros((output_length, events.num_channels), dtype=np.int64)
    index = channel_event_indices(channels, events.num_channels)
    keep = index < output_length
    values_out[index[keep], channels[keep]] = events.values[keep]
    lengths_out[index[keep], channels[keep]] = events.lengths[keep]
    return values_out, lengths_out


def interleaved_encode(dense: DenseCodes, output_length: int | None = None,
                       max_run_length: int = DEFAULT_MAX_RUN_LENGTH,
                       include_structure: bool = True) -> EventSequence:
    """Encode every channel of ``dense`` and interleave the runs.

    ``output_length`` caps the number of events; ``None`` keeps them all.
    """
    runs = [_runs(dense.levels[:, c], max_run_length) for c in range(dense.num_channels)]
    budget = max(len(v) for v, _ in runs)
    values = np.zeros((budget, dense.num_channels), dtype=np.int64)
    lengths = np.zeros((budget, dense.num_channels), dtype=np.int64)
    for c, (v, n) in enumerate(runs):
        values[:len(v), c] = v
        lengths[:len(n), c] = n
    total = sum(len(v) for v, _ in runs)
    return interleave(values, lengths, total if output_length is None else output_length,
                      include_structure, include_structure, k=dense.k,
                      max_run_length=max_run_length, base_rate_hz=dense.base_rate_hz)


def crop(events: EventSequence, n: int) -> EventSequence:
    """First ``n`` events of a sequence; marks it truncated if anything was dropped."""
    return EventSequence(
        events.values[:n], events.lengths[:n], events.num_channels, events.k,
        events.max_run_length, events.base_rate_hz,
        None if events.channels is None else events.channels[:n],
        None if events.offsets is None else events.offsets[:n],
        truncated=events.truncated or len(events) > n,
    )


def interleaved_decode(events: EventSequence, output_length: int | None = None) -> DenseCodes:
    """Deinterleave and expand events back into a dense grid.

    ``output_length=None`` decodes the longest prefix every channel covers,
    which is the whole grid for an uncropped sequence.
    """
    if len(events) < events.num_channels:
        raise CodecError("sequence too short: some channel has no events")
    channels, _ = infer_channels_offsets(events.lengths, events.num_channels)
    durations = np.bincount(channels, weights=events.lengths, minlength=events.num_channels)
    if output_length is None:
        output_length = int(durations.min())
    counts = np.bincount(channels, minlength=events.num_channels)
    values, lengths = deinterleave(
        EventSequence(events.values, events.lengths, events.num_channels, channels=channels),
        int(counts.max()),
    )
    levels = np.stack(
        [rle_decode(values[:, c], lengths[:, c], output_length) for c in range(events.num_channels)],
        axis=1,
    )
    return DenseCodes(levels, events.base_rate_hz, events.k)


# -- file formats -------------------------------------------------------------------------------

def write_events(path, events: EventSequence) -> None:
    """Write the little-endian VDRL binary event file."""
    events.validate()
    if events.num_channels > 255 or events.k > 127 or events.max_run_length > 0xFFFF:
        raise CodecError("sequence parameters do not fit the VDRL header")
    rate = int(round(events.base_rate_hz))
    if rate != events.base_rate_hz:
        raise CodecError("VDRL stores integer base rates only")
    header = _HEADER.pack(VDRL_MAGIC, VDRL_VERSION, events.num_channels, events.k, 0,
                          events.max_run_length, rate, len(events))
    records = np.empty(len(events), dtype=_RECORD)
    records["value"] = events.values
    records["length"] = events.lengths
    Path(path).write_bytes(header + records.tobytes())


def read_events(path) -> EventSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CodecError(f"{path}: truncated header")
    magic, version, num_channels, k, _, max_run_length, rate, count = _HEADER.unpack_from(data)
    if magic != VDRL_MAGIC:
        raise CodecError(f"{path}: bad magic {magic!r}")
    if version != VDRL_VERSION:
        raise CodecError(f"{path}: unsupported VDRL version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise CodecError(f"{path}: expected {count} records, found {len(body) / _RECORD.itemsize:g}")
    records = np.frombuffer(body, dtype=_RECORD)
    events = EventSequence(records["value"].astype(np.int64), records["length"].astype(np.int64),
                           num_channels, k, max_run_length, float(rate))
    events.validate()
    return events


def write_dense_csv(path, dense: DenseCodes) -> None:
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(dense.levels.tolist())


def read_dense_csv(path, k: int = 7, base_rate_hz: float = 250.0) -> DenseCodes:
    with open(path, newline="") as f:
        rows = [[int(x) for x in row] for row in csv.reader(f) if row]
    if not rows:
        raise CodecError(f"{path}: empty grid")
    if len({len(r) for r in rows}) != 1:
        raise CodecError(f"{path}: ragged rows")
    return DenseCodes(np.array(rows, dtype=np.int64), base_rate_hz, k)
