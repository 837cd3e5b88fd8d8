"""Write segments, immutable sorted segments, and bloom sidecars.

On-disk formats (all little-endian, bit-exact):

  record frame   [u32 key_len][key][u64 timestamp][u8 flags][u32 val_len][value]
                 flags bit0 = tombstone (tombstones carry val_len 0)
  segment file   sorted data block (key asc, timestamp desc), then a sparse
                 index entry [u32 key_len][key][u64 offset] for every 16th
                 record, then a fixed 64-byte footer
  footer         [8s magic "TKVSEG1\\0"][u32 version][u32 zero]
                 [u64 index_off][u64 index_count][u64 record_count][24x zero]
  bloom sidecar  [u32 k][u64 bit_len][u64 n_inserted] + bit array

Write segments append to `<writer>-<seq>.live` logs; flushed segments are
written as `<id>.seg` / `<id>.bloom` via a `.tmp` suffix and an atomic
rename, so a partially written file is never visible under its final name.
"""

import bisect
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import List, Optional

from . import _kernels as kernels
from .records import InvalidKey, Record, sort_key, validate_key, validate_value

SEGMENT_SUFFIX = ".seg"
BLOOM_SUFFIX = ".bloom"
LIVE_SUFFIX = ".live"
TMP_SUFFIX = ".tmp"

MAGIC = b"TKVSEG1\x00"
FORMAT_VERSION = 1
FOOTER = struct.Struct("<8sII QQQ 24x")
assert FOOTER.size == 64
INDEX_STRIDE = 16

_BLOOM_HEADER = struct.Struct("<IQQ")


class SegmentSealed(RuntimeError):
    pass


class SegmentGone(RuntimeError):
    """The segment file was retired underneath the reader."""


class BloomFilter:
    """Double-hashed bloom filter over FNV-1a 64; no false negatives."""

    def __init__(self, bits, bit_len, k, n_inserted=0, target_fp=0.01):
        self.bits = bits
        self.bit_len = bit_len
        self.k = k
        self.n_inserted = n_inserted
        self.target_fp = target_fp

    @classmethod
    def sized_for(cls, n, target_fp=0.01):
        n = max(n, 1)
        bit_len = max(8, int(math.ceil(-n * math.log(target_fp) / (math.log(2) ** 2))))
        k = max(1, round(-math.log(target_fp) / math.log(2)))
        return cls(bytearray((bit_len + 7) // 8), bit_len, k, 0, target_fp)

    @classmethod
    def build(cls, keys, target_fp=0.01):
        keys = list(keys)
        filt = cls.sized_for(len(keys), target_fp)
        kernels.bloom_insert_many(filt.bits, filt.bit_len, filt.k, keys)
        filt.n_inserted = len(keys)
        return filt

    def insert(self, key):
        kernels.bloom_insert(self.bits, self.bit_len, self.k, key)
        self.n_inserted += 1

    def query(self, key):
        """True = maybe present, False = definitely absent."""
        return kernels.bloom_query(self.bits, self.bit_len, self.k, key)

    def save(self, path):
        tmp = str(path) + TMP_SUFFIX
        with open(tmp, "wb") as f:
            f.write(_BLOOM_HEADER.pack(self.k, self.bit_len, self.n_inserted))
            f.write(bytes(self.bits))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as f:
                k, bit_len, n = _BLOOM_HEADER.unpack(f.read(_BLOOM_HEADER.size))
                bits = bytearray(f.read())
        except FileNotFoundError:
            raise SegmentGone(str(path))
        return cls(bits, bit_len, k, n)


@dataclass
class SegmentMeta:
    """Catalog entry for one immutable segment."""

    id: str
    path: str                 # relative to the store root
    bloom_path: str
    min_key: bytes
    max_key: bytes
    record_count: int
    file_size: int
    created_at: float
    origin: str = "flush"     # "flush" | "compaction"

    def to_json(self):
        return {
            "id": self.id,
            "path": self.path,
            "bloom_path": self.bloom_path,
            "min_key": self.min_key.hex(),
            "max_key": self.max_key.hex(),
            "record_count": self.record_count,
            "file_size": self.file_size,
            "created_at": self.created_at,
            "origin": self.origin,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            id=obj["id"],
            path=obj["path"],
            bloom_path=obj["bloom_path"],
            min_key=bytes.fromhex(obj["min_key"]),
            max_key=bytes.fromhex(obj["max_key"]),
            record_count=obj["record_count"],
            file_size=obj["file_size"],
            created_at=obj["created_at"],
            origin=obj.get("origin", "flush"),
        )


class WriteSegment:
    """Single-writer append log, invisible to other processes until flushed."""

    def __init__(self, segment_id, path, flush_threshold):
        self.id = segment_id
        self.path = str(path)
        self.flush_threshold = flush_threshold
        self.bytes_written = 0
        self.sealed = False
        self._records: List[Record] = []
        self._index = {}          # key -> list of positions in _records
        self._log = open(self.path, "ab")

    def append(self, key, value, timestamp, tombstone=False):
        if self.sealed:
            raise SegmentSealed(f"segment {self.id} sealed")
        validate_key(key)
        if tombstone:
            value = None
        else:
            validate_value(value)
        rec = Record(bytes(key), value, timestamp, tombstone)
        self._log.write(rec.encode())
        self._log.flush()
        self._records.append(rec)
        self._index.setdefault(rec.key, []).append(len(self._records) - 1)
        self.bytes_written += rec.encoded_size()
        return self.bytes_written

    def seg_get(self, key):
        """All versions of key in this segment, newest first."""
        positions = self._index.get(bytes(key))
        if not positions:
            return []
        return [self._records[i] for i in reversed(positions)]

    def records(self):
        return list(self._records)

    @property
    def record_count(self):
        return len(self._records)

    def should_flush(self):
        return self.bytes_written >= self.flush_threshold

    def seal(self):
        self.sealed = True
        self._log.close()
        return self._records

    def discard(self):
        if not self._log.closed:
            self._log.close()
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass


class SegmentFileWriter:
    """Streams records (already in segment order) into a segment file."""

    def __init__(self, final_path, target_fp=0.01):
        self.final_path = str(final_path)
        self.tmp_path = self.final_path + TMP_SUFFIX
        self._f = open(self.tmp_path, "wb")
        self._offset = 0
        self._count = 0
        self._index = []          # (key, offset) every INDEX_STRIDE records
        self._keys = []
        self._min_key = None
        self._max_key = None
        self._target_fp = target_fp

    def add(self, record):
        if self._count % INDEX_STRIDE == 0:
            self._index.append((record.key, self._offset))
        buf = record.encode()
        self._f.write(buf)
        self._offset += len(buf)
        self._count += 1
        self._keys.append(record.key)
        if self._min_key is None:
            self._min_key = record.key
        self._max_key = record.key

    def abort(self):
        self._f.close()
        try:
            os.unlink(self.tmp_path)
        except FileNotFoundError:
            pass

    def finish(self):
        """Write index + footer, fsync, and atomically publish both files.

        Returns None when nothing was added.
        """
        if self._count == 0:
            self.abort()
            return None
        index_off = self._offset
        for key, off in self._index:
            self._f.write(struct.pack("<I", len(key)))
            self._f.write(key)
            self._f.write(struct.pack("<Q", off))
        self._f.write(FOOTER.pack(MAGIC, FORMAT_VERSION, 0, index_off, len(self._index), self._count))
        self._f.flush()
        os.fsync(self._f.fileno())
        size = self._f.tell()
        self._f.close()

        bloom_path = self.final_path.replace(SEGMENT_SUFFIX, BLOOM_SUFFIX)
        BloomFilter.build(self._keys, self._target_fp).save(bloom_path)
        os.replace(self.tmp_path, self.final_path)
        return {
            "record_count": self._count,
            "min_key": self._min_key,
            "max_key": self._max_key,
            "file_size": size,
            "bloom_path": bloom_path,
        }


def flush_write_segment(wseg, out_dir, segment_id=None, target_fp=0.01, origin="flush"):
    """Sort a sealed write segment into an immutable segment + bloom sidecar.

    Returns the SegmentMeta, or None for an empty segment.
    """
    records = wseg if isinstance(wseg, list) else wseg.records()
    if not records:
        return None
    segment_id = segment_id or wseg.id
    seg_path = os.path.join(str(out_dir), segment_id + SEGMENT_SUFFIX)
    writer = SegmentFileWriter(seg_path, target_fp)
    for rec in sorted(records, key=sort_key):
        writer.add(rec)
    info = writer.finish()
    return SegmentMeta(
        id=segment_id,
        path=os.path.basename(seg_path),
        bloom_path=os.path.basename(info["bloom_path"]),
        min_key=info["min_key"],
        max_key=info["max_key"],
        record_count=info["record_count"],
        file_size=info["file_size"],
        created_at=time.time(),
        origin=origin,
    )


# Immutable files never change and ids are never reused, so parsed indexes
# and bloom filters are cached per path with a simple size cap.
_INDEX_CACHE = {}
_BLOOM_CACHE = {}
_CACHE_CAP = 512


def _cache_put(cache, key, value):
    if len(cache) >= _CACHE_CAP:
        cache.pop(next(iter(cache)))
    cache[key] = value


def load_bloom(path):
    path = str(path)
    filt = _BLOOM_CACHE.get(path)
    if filt is None:
        filt = BloomFilter.load(path)
        _cache_put(_BLOOM_CACHE, path, filt)
    return filt


class SegmentReader:
    """Read path over one immutable segment; safe for concurrent use."""

    def __init__(self, path):
        self.path = str(path)
        cached = _INDEX_CACHE.get(self.path)
        if cached is None:
            cached = self._load_index()
            _cache_put(_INDEX_CACHE, self.path, cached)
        self.index_keys, self.index_offsets, self.index_off, self.record_count = cached

    def _open(self):
        try:
            return open(self.path, "rb")
        except FileNotFoundError:
            raise SegmentGone(self.path)

    def _load_index(self):
        with self._open() as f:
            f.seek(0, os.SEEK_END)
            size = f.tell()
            if size < FOOTER.size:
                raise ValueError(f"{self.path}: truncated segment")
            f.seek(size - FOOTER.size)
            magic, version, _, index_off, index_count, record_count = FOOTER.unpack(f.read(FOOTER.size))
            if magic != MAGIC or version != FORMAT_VERSION:
                raise ValueError(f"{self.path}: bad magic or version")
            f.seek(index_off)
            raw = f.read(size - FOOTER.size - index_off)
        keys, offsets = [], []
        pos = 0
        for _ in range(index_count):
            (key_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            keys.append(raw[pos:pos + key_len])
            pos += key_len
            (off,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            offsets.append(off)
        return keys, offsets, index_off, record_count

    def _block_span(self, block):
        start = self.index_offsets[block]
        end = self.index_offsets[block + 1] if block + 1 < len(self.index_offsets) else self.index_off
        return start, end

    def get(self, key):
        """All versions of key in this segment, newest first."""
        key = bytes(key)
        if not self.index_keys or key < self.index_keys[0]:
            return []
        block = max(0, bisect.bisect_left(self.index_keys, key) - 1)
        out = []
        with self._open() as f:
            while block < len(self.index_offsets):
                start, end = self._block_span(block)
                f.seek(start)
                recs, _ = kernels.decode_records(f.read(end - start))
                for rkey, value, ts, tomb in recs:
                    if rkey == key:
                        out.append(Record(rkey, value, ts, tomb))
                    elif rkey > key:
                        return out
                block += 1
        return out

    def __iter__(self):
        """Records in file order: key ascending, timestamp descending."""
        with self._open() as f:
            remaining = self.index_off
            tail = b""
            while remaining > 0:
                chunk = f.read(min(262144, remaining))
                if not chunk:
                    raise ValueError(f"{self.path}: unexpected EOF")
                remaining -= len(chunk)
                buf = tail + chunk
                recs, consumed = kernels.decode_records(buf)
                tail = buf[consumed:]
                for rkey, value, ts, tomb in recs:
                    yield Record(rkey, value, ts, tomb)
            if tail:
                raise ValueError(f"{self.path}: trailing garbage in data block")


def read_live_records(path):
    """Replay a (possibly still growing) write-segment log.

    Tolerates a trailing partial frame from an in-flight append.
    """
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except FileNotFoundError:
        raise SegmentGone(str(path))
    recs, _ = kernels.decode_records(buf)
    return [Record(k, v, ts, tomb) for k, v, ts, tomb in recs]
