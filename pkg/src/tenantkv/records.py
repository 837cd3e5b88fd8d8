"""Record type, key/value limits, and the per-process timestamp clock."""

import threading
import time
from typing import NamedTuple, Optional

from . import _kernels as kernels

MAX_KEY_LEN = 4096
MAX_VALUE_LEN = 16 * 1024 * 1024


class Record(NamedTuple):
    key: bytes
    value: Optional[bytes]   # None iff tombstone
    timestamp: int           # logical microseconds
    tombstone: bool = False

    def encoded_size(self):
        return kernels.encoded_size(len(self.key), 0 if self.value is None else len(self.value))

    def encode(self):
        return kernels.encode_record(self.key, self.value, self.timestamp, self.tombstone)


def sort_key(record):
    """Segment order: key ascending, timestamp descending."""
    return (record.key, -record.timestamp)


def validate_key(key):
    if not isinstance(key, (bytes, bytearray)):
        raise InvalidKey("key must be bytes")
    if not 1 <= len(key) <= MAX_KEY_LEN:
        raise InvalidKey(f"key length {len(key)} outside 1..{MAX_KEY_LEN}")


def validate_value(value):
    if value is None:
        return
    if not isinstance(value, (bytes, bytearray)):
        raise ValueError("value must be bytes or None")
    if len(value) > MAX_VALUE_LEN:
        raise ValueError(f"value length {len(value)} exceeds {MAX_VALUE_LEN}")


class InvalidKey(ValueError):
    pass


_clock_lock = threading.Lock()
_clock_last = 0


def next_timestamp():
    """Monotonic logical time: wall-clock microseconds bumped by a counter.

    Strictly increasing within the process, so successive writes to one
    key from any handle in this process never tie.
    """
    global _clock_last
    now = time.time_ns() // 1000
    with _clock_lock:
        _clock_last = max(now, _clock_last + 1)
        return _clock_last
