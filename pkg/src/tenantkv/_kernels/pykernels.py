"""Pure-Python kernels: FNV-1a hashing, key routing, bloom bits, record framing.

This module is the fallback used when the compiled extension is not
available. Both implementations must agree bit for bit; the framing and
hash outputs are part of the on-disk format.
"""

import struct

IMPL = "python"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

_HEADER = struct.Struct("<I")          # key_len
_TAIL = struct.Struct("<QBI")          # timestamp, flags, val_len


def fnv1a64(data):
    """FNV-1a 64-bit hash of a bytes-like object."""
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _U64
    return h


def route_child(key, fanout, level):
    """Child index for a key at a tree level.

    Level 1 hashes the last 16 bytes of the key, level 2 the first 16;
    keys shorter than 16 bytes are hashed whole at every level.
    """
    if len(key) > 16:
        part = key[-16:] if level == 1 else key[:16]
    else:
        part = key
    return fnv1a64(part) % fanout


def _bloom_pair(key):
    h1 = fnv1a64(key)
    h2 = fnv1a64(h1.to_bytes(8, "little")) | 1
    return h1, h2


def bloom_insert(bits, bit_len, k, key):
    h1, h2 = _bloom_pair(key)
    for i in range(k):
        pos = (h1 + i * h2) % bit_len
        bits[pos >> 3] |= 1 << (pos & 7)


def bloom_query(bits, bit_len, k, key):
    h1, h2 = _bloom_pair(key)
    for i in range(k):
        pos = (h1 + i * h2) % bit_len
        if not bits[pos >> 3] & (1 << (pos & 7)):
            return False
    return True


def bloom_insert_many(bits, bit_len, k, keys):
    for key in keys:
        bloom_insert(bits, bit_len, k, key)


def encoded_size(key_len, value_len):
    """Bytes occupied by one framed record."""
    return 4 + key_len + 8 + 1 + 4 + value_len


def encode_record(key, value, timestamp, tombstone):
    """Frame one record: [u32 key_len][key][u64 ts][u8 flags][u32 val_len][value]."""
    flags = 1 if tombstone else 0
    val = b"" if value is None else value
    return b"".join((
        _HEADER.pack(len(key)),
        key,
        _TAIL.pack(timestamp, flags, len(val)),
    )) + val


def decode_record(buf, offset):
    """Decode one record; returns (key, value, ts, tombstone, next_offset).

    Raises ValueError when the buffer ends mid-frame.
    """
    end = len(buf)
    if offset + 4 > end:
        raise ValueError("truncated record header")
    (key_len,) = _HEADER.unpack_from(buf, offset)
    offset += 4
    if offset + key_len + 13 > end:
        raise ValueError("truncated record")
    key = bytes(buf[offset:offset + key_len])
    offset += key_len
    timestamp, flags, val_len = _TAIL.unpack_from(buf, offset)
    offset += 13
    if offset + val_len > end:
        raise ValueError("truncated record value")
    tombstone = bool(flags & 1)
    value = None if tombstone else bytes(buf[offset:offset + val_len])
    return key, value, timestamp, tombstone, offset + val_len


def decode_records(buf):
    """Decode consecutive records, stopping cleanly at a trailing partial frame.

    Returns (records, consumed) where records are
    (key, value, timestamp, tombstone) tuples.
    """
    out = []
    offset = 0
    while offset < len(buf):
        try:
            key, value, ts, tomb, nxt = decode_record(buf, offset)
        except ValueError:
            break
        out.append((key, value, ts, tomb))
        offset = nxt
    return out, offset
