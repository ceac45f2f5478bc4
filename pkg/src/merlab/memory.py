"""Replay memories and the batch samplers used by ER, MER and GEM.

Records are opaque: learners store integer row ids, the RL harness stores
transition ids.  Samplers only decide *which* records land in a batch.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError
from .nn import Example


@dataclass
class ReservoirBuffer:
    capacity: int
    items: list = field(default_factory=list)
    age: int = 0

    def __len__(self):
        return len(self.items)


def reservoir_update(buffer: ReservoirBuffer, record, rng) -> ReservoirBuffer:
    """Algorithm R: keep every record seen so far with equal probability."""
    if buffer.age < buffer.capacity:
        buffer.items.append(record)
    else:
        # inclusive upper bound: j ranges over 0..age
        j = int(rng.integers(0, buffer.age + 1))
        if j < buffer.capacity:
            buffer.items[j] = record
    buffer.age += 1
    return buffer


def reservoir_extend(buffer: ReservoirBuffer, records, rng) -> ReservoirBuffer:
    """Same result and random stream as ``reservoir_update`` on each record in turn."""
    records = list(records)
    n_fill = max(0, min(buffer.capacity - buffer.age, len(records)))
    buffer.items.extend(records[:n_fill])
    rest = records[n_fill:]
    if rest:
        ages = buffer.age + n_fill + np.arange(len(rest))
        # array bounds draw exactly what one scalar call per record would
        js = rng.integers(0, ages + 1)
        for pos in np.flatnonzero(js < buffer.capacity):
            buffer.items[js[pos]] = rest[pos]
    buffer.age += len(records)
    return buffer


def _draw(buffer: ReservoirBuffer, n: int, rng) -> list:
    """``n`` uniform draws; without replacement whenever the buffer allows it."""
    size = len(buffer.items)
    if n == 0 or size == 0:
        return []
    if size < n:
        picks = rng.integers(0, size, size=n)
    else:
        picks = rng.choice(size, size=n, replace=False)
    items = buffer.items
    return [items[i] for i in picks]


def sample_mer_batches(buffer: ReservoirBuffer, current, s: int, k: int, rng) -> list[list]:
    """``s`` batches of ``k``: the current record at a random slot plus ``k - 1`` memories."""
    if s < 1 or k < 1:
        raise InvalidInputError(f"s and k must be >= 1, got s={s}, k={k}")
    batches = []
    for _ in range(s):
        if len(buffer.items) == 0:
            batches.append([current] * k)
            continue
        batch = _draw(buffer, k - 1, rng)
        batch.insert(int(rng.integers(0, k)), current)
        batches.append(batch)
    return batches


def sample_big_batch(buffer: ReservoirBuffer, current, s: int, k: int, rng) -> list:
    """``s*k - s`` memories followed by ``s`` copies of the current record."""
    if s < 1 or k < 1:
        raise InvalidInputError(f"s and k must be >= 1, got s={s}, k={k}")
    n_mem = s * k - s
    if len(buffer.items) == 0:
        return [current] * (s * k)
    return _draw(buffer, n_mem, rng) + [current] * s


def sample_random_position_batch(buffer: ReservoirBuffer, k: int, current, rng):
    """``k - 1`` memories with the current record inserted at a uniform slot.

    Returns ``(batch, index_of_current)``.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    index = int(rng.integers(0, k))
    if len(buffer.items) == 0:
        return [current] * k, index
    batch = _draw(buffer, k - 1, rng)
    batch.insert(index, current)
    return batch, index


class TaskRingBuffer:
    """Equal per-task segments holding the most recent records of each task."""

    def __init__(self, capacity: int, task_count: int):
        if task_count < 1:
            raise InvalidInputError("task_count must be >= 1")
        self.capacity = capacity
        self.task_count = task_count
        self.segment_capacity = capacity // task_count
        self.segments = [deque(maxlen=self.segment_capacity) for _ in range(task_count)]

    def __len__(self):
        return sum(len(s) for s in self.segments)

    def segment(self, task_id: int) -> list:
        return list(self.segments[task_id])


def task_ring_update(buffer: TaskRingBuffer, record, task_id: int) -> TaskRingBuffer:
    if not 0 <= task_id < buffer.task_count:
        raise InvalidInputError(f"task id {task_id} outside [0, {buffer.task_count})")
    buffer.segments[task_id].append(record)
    return buffer


# ------------------------------------------------------------- snapshots

_MAGIC = b"MRB1"


def _pack_record(rec) -> bytes:
    if isinstance(rec, (int, np.integer)):
        return b"i" + struct.pack("<q", int(rec))
    if isinstance(rec, Example):
        x = np.ascontiguousarray(rec.x, dtype="<f8")
        return b"e" + struct.pack("<qqq", int(rec.y), int(rec.task_id), x.size) + x.tobytes()
    raise InvalidInputError(f"cannot snapshot record of type {type(rec).__name__}")


def _unpack_record(buf: bytes):
    tag = buf[:1]
    if tag == b"i":
        return struct.unpack("<q", buf[1:9])[0]
    if tag == b"e":
        y, task, n = struct.unpack("<qqq", buf[1:25])
        x = np.frombuffer(buf[25:25 + 8 * n], dtype="<f8").copy()
        return Example(x, y, task)
    raise FormatError("record.tag", f"unknown record tag {tag!r}")


def save_snapshot(buffer: ReservoirBuffer, path) -> None:
    """Little-endian sidecar: magic, capacity, age, count, then length-prefixed records."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<QQQ", buffer.capacity, buffer.age, len(buffer.items)))
        for rec in buffer.items:
            payload = _pack_record(rec)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def load_snapshot(path) -> ReservoirBuffer:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise FormatError("snapshot.magic", f"bad magic {raw[:4]!r}")
    if len(raw) < 28:
        raise FormatError("snapshot.header", "truncated header")
    capacity, age, count = struct.unpack("<QQQ", raw[4:28])
    pos = 28
    items = []
    for i in range(count):
        if pos + 4 > len(raw):
            raise FormatError("snapshot.records", f"truncated at record {i}")
        (n,) = struct.unpack("<I", raw[pos:pos + 4])
        pos += 4
        if pos + n > len(raw):
            raise FormatError("snapshot.records", f"truncated at record {i}")
        items.append(_unpack_record(raw[pos:pos + n]))
        pos += n
    return ReservoirBuffer(capacity, items, age)
