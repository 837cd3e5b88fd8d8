# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; must match pykernels bit for bit."""

from cpython.bytes cimport PyBytes_FromStringAndSize
from libc.stdint cimport uint8_t, uint32_t, uint64_t
from libc.string cimport memcpy

IMPL = "cython"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

cdef uint64_t _FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t _FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv1a(const uint8_t* data, Py_ssize_t n) nogil:
    cdef uint64_t h = _FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(n):
        h = (h ^ data[i]) * _FNV_PRIME
    return h


def fnv1a64(data):
    """FNV-1a 64-bit hash of a bytes-like object."""
    cdef const uint8_t[:] view = bytes(data) if not isinstance(data, (bytes, bytearray, memoryview)) else data
    if len(view) == 0:
        return _FNV_OFFSET
    return _fnv1a(&view[0], len(view))


def route_child(key, fanout, level):
    """Child index for a key at a tree level (1: last 16 bytes, 2: first 16)."""
    cdef const uint8_t[:] view = key
    cdef Py_ssize_t n = len(view)
    cdef Py_ssize_t start = 0, length = n
    if n > 16:
        length = 16
        if level == 1:
            start = n - 16
    if length == 0:
        return _FNV_OFFSET % <uint64_t> fanout
    return _fnv1a(&view[start], length) % <uint64_t> fanout


cdef inline void _bloom_pair(const uint8_t* key, Py_ssize_t n, uint64_t* h1, uint64_t* h2) nogil:
    cdef uint8_t enc[8]
    cdef int i
    h1[0] = _fnv1a(key, n)
    for i in range(8):
        enc[i] = <uint8_t> ((h1[0] >> (8 * i)) & 0xFF)
    h2[0] = _fnv1a(enc, 8) | 1ULL


def bloom_insert(bits, bit_len, k, key):
    cdef uint8_t[:] bview = bits
    cdef const uint8_t[:] kview = key
    cdef uint64_t h1, h2, pos, blen = bit_len
    cdef int i, kk = k
    _bloom_pair(&kview[0] if len(kview) else NULL, len(kview), &h1, &h2)
    for i in range(kk):
        pos = (h1 + (<uint64_t> i) * h2) % blen
        bview[pos >> 3] |= <uint8_t> (1 << (pos & 7))


def bloom_query(bits, bit_len, k, key):
    cdef const uint8_t[:] bview = bits
    cdef const uint8_t[:] kview = key
    cdef uint64_t h1, h2, pos, blen = bit_len
    cdef int i, kk = k
    _bloom_pair(&kview[0] if len(kview) else NULL, len(kview), &h1, &h2)
    for i in range(kk):
        pos = (h1 + (<uint64_t> i) * h2) % blen
        if not bview[pos >> 3] & (1 << (pos & 7)):
            return False
    return True


def bloom_insert_many(bits, bit_len, k, keys):
    cdef uint8_t[:] bview = bits
    cdef const uint8_t[:] kview
    cdef uint64_t h1, h2, pos, blen = bit_len
    cdef int i, kk = k
    for key in keys:
        kview = key
        _bloom_pair(&kview[0] if len(kview) else NULL, len(kview), &h1, &h2)
        for i in range(kk):
            pos = (h1 + (<uint64_t> i) * h2) % blen
            bview[pos >> 3] |= <uint8_t> (1 << (pos & 7))


def encoded_size(key_len, value_len):
    """Bytes occupied by one framed record."""
    return 4 + key_len + 8 + 1 + 4 + value_len


def encode_record(key, value, timestamp, tombstone):
    """Frame one record: [u32 key_len][key][u64 ts][u8 flags][u32 val_len][value]."""
    cdef const uint8_t[:] kview = key
    cdef const uint8_t[:] vview
    cdef Py_ssize_t klen = len(kview), vlen = 0
    cdef bint tomb = 1 if tombstone else 0
    if value is not None:
        vview = value
        vlen = len(vview)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 4 + klen + 13 + vlen)
    cdef uint8_t* p = <uint8_t*> out
    cdef uint32_t kl32 = <uint32_t> klen, vl32 = <uint32_t> vlen
    cdef uint64_t ts = timestamp
    memcpy(p, &kl32, 4)
    if klen:
        memcpy(p + 4, &kview[0], klen)
    memcpy(p + 4 + klen, &ts, 8)
    p[4 + klen + 8] = 1 if tomb else 0
    memcpy(p + 4 + klen + 9, &vl32, 4)
    if vlen:
        memcpy(p + 4 + klen + 13, &vview[0], vlen)
    return out


def decode_record(buf, offset):
    """Decode one record; returns (key, value, ts, tombstone, next_offset)."""
    cdef const uint8_t[:] view = buf
    cdef Py_ssize_t off = offset, end = len(view)
    cdef uint32_t key_len, val_len
    cdef uint64_t ts
    cdef uint8_t flags
    if off + 4 > end:
        raise ValueError("truncated record header")
    memcpy(&key_len, &view[off], 4)
    off += 4
    if off + key_len + 13 > end:
        raise ValueError("truncated record")
    key = PyBytes_FromStringAndSize(<const char*> &view[off], key_len) if key_len else b""
    off += key_len
    memcpy(&ts, &view[off], 8)
    flags = view[off + 8]
    memcpy(&val_len, &view[off + 9], 4)
    off += 13
    if off + val_len > end:
        raise ValueError("truncated record value")
    if flags & 1:
        value = None
    else:
        value = PyBytes_FromStringAndSize(<const char*> &view[off], val_len) if val_len else b""
    return key, value, ts, bool(flags & 1), off + val_len


def decode_records(buf):
    """Decode consecutive records, stopping at a trailing partial frame."""
    cdef const uint8_t[:] view = buf
    cdef Py_ssize_t off = 0, end = len(view)
    cdef uint32_t key_len, val_len
    cdef uint64_t ts
    cdef uint8_t flags
    out = []
    while off < end:
        if off + 4 > end:
            break
        memcpy(&key_len, &view[off], 4)
        if off + 4 + key_len + 13 > end:
            break
        key = PyBytes_FromStringAndSize(<const char*> &view[off + 4], key_len) if key_len else b""
        memcpy(&ts, &view[off + 4 + key_len], 8)
        flags = view[off + 4 + key_len + 8]
        memcpy(&val_len, &view[off + 4 + key_len + 9], 4)
        if off + 4 + key_len + 13 + val_len > end:
            break
        if flags & 1:
            value = None
        else:
            value = PyBytes_FromStringAndSize(<const char*> &view[off + 4 + key_len + 13], val_len) if val_len else b""
        out.append((key, value, ts, bool(flags & 1)))
        off += 4 + key_len + 13 + val_len
    return out, off
