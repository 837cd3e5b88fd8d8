"""Client-facing store handle: put/get/delete over a shared directory.

A handle owns one write segment (private until flushed), a catalog
snapshot refreshed on an interval, and a per-tenant partitioned LRU cache.
Reads consult the handle's own write segment first, then any segments
sealed but still flushing, then the cache, then the catalog's segments
along the key's tree path with bloom filters pruning candidates.

Eventual mode serves from the snapshot only; strong mode additionally
replays other writers' live append logs found in the store root, which is
as expensive as it sounds (every such read re-reads the logs).
"""

import os
import threading
import time
from collections import Counter, OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

from .catalog import FLAT_PATH, Catalog, SnapshotCache, TreeConfig, route
from .records import Record, next_timestamp, validate_key
from .segments import (LIVE_SUFFIX, SegmentGone, WriteSegment,
                       flush_write_segment, load_bloom, read_live_records,
                       SegmentReader)

ENV_ROOT = "TENANTKV_ROOT"
DEFAULT_FLUSH_THRESHOLD = 4 * 1024 * 1024
EVENTUAL = "eventual"
STRONG = "strong"


class StoreClosed(RuntimeError):
    pass


class GetInfo(NamedTuple):
    found: bool
    cache_hit: bool
    segments_consulted: int
    bloom_skipped: int
    value_bytes: int
    tombstone: bool


class TenantCache:
    """Whole-entry LRU cache split into hard per-tenant partitions.

    A tenant's resident bytes never exceed its partition capacity and
    evictions only touch that tenant's entries.
    """

    def __init__(self, budget):
        self.budget = budget
        self._caps = {}
        self._lrus = {}
        self._resident = {}
        self._lock = threading.Lock()
        self.hits = Counter()
        self.misses = Counter()

    def configure(self, capacities):
        if sum(capacities.values()) > self.budget:
            raise ValueError("partition capacities exceed cache budget")
        with self._lock:
            self._caps = dict(capacities)
            for tenant in capacities:
                self._lrus.setdefault(tenant, OrderedDict())
                self._resident.setdefault(tenant, 0)
            self._evict_overflow()

    def _evict_overflow(self):
        for tenant, lru in self._lrus.items():
            cap = self._caps.get(tenant, 0)
            while self._resident.get(tenant, 0) > cap and lru:
                _, old = lru.popitem(last=False)
                self._resident[tenant] -= old[1]

    def get(self, tenant, key):
        with self._lock:
            lru = self._lrus.get(tenant)
            if lru is not None and key in lru:
                lru.move_to_end(key)
                self.hits[tenant] += 1
                return lru[key][0]
            self.misses[tenant] += 1
            return None

    def put(self, tenant, key, value):
        size = len(key) + len(value)
        with self._lock:
            cap = self._caps.get(tenant, 0)
            if size > cap:
                return
            lru = self._lrus.setdefault(tenant, OrderedDict())
            prior = lru.pop(key, None)
            if prior is not None:
                self._resident[tenant] -= prior[1]
            lru[key] = (value, size)
            self._resident[tenant] = self._resident.get(tenant, 0) + size
            while self._resident[tenant] > cap and lru:
                _, old = lru.popitem(last=False)
                self._resident[tenant] -= old[1]

    def clear(self):
        with self._lock:
            for lru in self._lrus.values():
                lru.clear()
            self._resident = {t: 0 for t in self._resident}

    def stats(self):
        with self._lock:
            return {
                tenant: {
                    "capacity": self._caps.get(tenant, 0),
                    "resident": self._resident.get(tenant, 0),
                    "entries": len(lru),
                    "occupancy_ratio": (self._resident.get(tenant, 0) / self.budget
                                        if self.budget else 0.0),
                    "hits": self.hits[tenant],
                    "misses": self.misses[tenant],
                }
                for tenant, lru in self._lrus.items()
            }


class StoreHandle:
    """One writer identity over a store directory; many may coexist."""

    def __init__(self, root=None, writer_id=None, tenant="default",
                 flush_threshold=DEFAULT_FLUSH_THRESHOLD,
                 refresh_interval_ms=1000, cache_budget=64 * 1024 * 1024,
                 consistency=EVENTUAL, strategy="tree", tree_config=None,
                 bloom_fp=0.01):
        root = root or os.environ.get(ENV_ROOT)
        if not root:
            raise ValueError(f"no store root given and {ENV_ROOT} unset")
        self.root = str(root)
        self.writer_id = writer_id or f"w{os.getpid()}"
        if "-" in self.writer_id or "/" in self.writer_id:
            raise ValueError("writer id must not contain '-' or '/'")
        self.tenant = tenant
        self.flush_threshold = flush_threshold
        self.consistency = consistency
        self.bloom_fp = bloom_fp
        self.catalog = Catalog(self.root, tree_config or TreeConfig(), strategy)
        snap = self.catalog.load()
        self.strategy = snap.strategy if snap.generation > 0 else strategy
        self.tree_config = snap.config if snap.generation > 0 else (tree_config or TreeConfig())
        self._snapshots = SnapshotCache(self.catalog, refresh_interval_ms)
        self.cache = TenantCache(cache_budget)
        self.cache.configure({tenant: cache_budget})
        self.counters = Counter()
        self._seq = self._scan_max_seq()
        self._wseg: Optional[WriteSegment] = None
        self._flushing = []                   # sealed segments not yet published
        self._lock = threading.RLock()
        self._flusher = ThreadPoolExecutor(max_workers=1)
        self._flush_error = None
        self._closed = False

    # -- write path -------------------------------------------------------

    def _scan_max_seq(self):
        prefix = f"{self.writer_id}-"
        top = 0
        try:
            names = os.listdir(self.root)
        except FileNotFoundError:
            return 0
        for name in names:
            if name.startswith(prefix):
                stem = name.split(".")[0]
                tail = stem[len(prefix):].split("p")[0]
                if tail.isdigit():
                    top = max(top, int(tail))
        return top

    def _open_wseg(self):
        self._seq += 1
        seg_id = f"{self.writer_id}-{self._seq}"
        path = os.path.join(self.root, seg_id + LIVE_SUFFIX)
        return WriteSegment(seg_id, path, self.flush_threshold)

    def _check_open(self):
        if self._closed:
            raise StoreClosed("store handle closed")
        if self._flush_error is not None:
            err, self._flush_error = self._flush_error, None
            raise err

    def put(self, key, value):
        self._check_open()
        validate_key(key)
        with self._lock:
            if self._wseg is None:
                self._wseg = self._open_wseg()
            elif self._wseg.should_flush():
                self._rotate_locked()
            ts = next_timestamp()
            written = self._wseg.append(bytes(key), bytes(value), ts)
        self.counters["puts"] += 1
        return {"bytes_written": written, "timestamp": ts}

    def delete(self, key):
        self._check_open()
        validate_key(key)
        with self._lock:
            if self._wseg is None:
                self._wseg = self._open_wseg()
            elif self._wseg.should_flush():
                self._rotate_locked()
            ts = next_timestamp()
            written = self._wseg.append(bytes(key), None, ts, tombstone=True)
        self.counters["deletes"] += 1
        return {"bytes_written": written, "timestamp": ts}

    def _rotate_locked(self):
        """Seal the current write segment and flush it in the background.

        Appends never wait on flush I/O: a fresh segment opens immediately
        and the sealed one stays readable until its catalog publish lands.
        """
        sealed = self._wseg
        sealed.seal()
        self._flushing.append(sealed)
        self._wseg = self._open_wseg()
        return self._flusher.submit(self._flush_job, sealed)

    def flush(self, wait=True):
        """Flush the current write segment now (owner-requested flush)."""
        self._check_open()
        with self._lock:
            if self._wseg is None or self._wseg.record_count == 0:
                return None
            future = self._rotate_locked()
        if wait:
            result = future.result()
            self._check_open()
            return result
        return future

    def _flush_job(self, sealed, attempts=3):
        try:
            records = sealed.records()
            if not records:
                sealed.discard()
                return None
            last_err = None
            for attempt in range(attempts):
                try:
                    placements = self._build_segments(sealed, records)
                    self.catalog.publish_many(placements)
                    break
                except OSError as exc:
                    last_err = exc
                    time.sleep(0.05 * (attempt + 1))
            else:
                raise last_err
            sealed.discard()
            with self._lock:
                if sealed in self._flushing:
                    self._flushing.remove(sealed)
            self.refresh()
            return [meta for meta, _ in placements]
        except BaseException as exc:
            self._flush_error = exc
            raise

    def _build_segments(self, sealed, records):
        if self.strategy == "size":
            meta = flush_write_segment(records, self.root, segment_id=sealed.id,
                                       target_fp=self.bloom_fp)
            return [(meta, FLAT_PATH)]
        buckets = {}
        for rec in records:
            child = route(rec.key, self.tree_config, 1)
            buckets.setdefault(child, []).append(rec)
        placements = []
        for child, recs in sorted(buckets.items()):
            meta = flush_write_segment(recs, self.root,
                                       segment_id=f"{sealed.id}p{child}",
                                       target_fp=self.bloom_fp)
            placements.append((meta, f"root/{child}"))
        return placements

    # -- read path ----------------------------------------------------------

    def refresh(self):
        snap = self._snapshots.refresh()
        if self._snapshots.fresh_publish:
            self.cache.clear()
            self._snapshots.fresh_publish = False
        return snap

    def _snapshot(self):
        snap = self._snapshots.current()
        if self._snapshots.fresh_publish:
            self.cache.clear()
            self._snapshots.fresh_publish = False
        return snap

    def get(self, key, mode=None, tenant=None, use_bloom=True):
        value, _ = self.get_with_info(key, mode=mode, tenant=tenant,
                                      use_bloom=use_bloom)
        return value

    def get_with_info(self, key, mode=None, tenant=None, use_bloom=True):
        """Returns (value | None, GetInfo). Tombstones read as not found."""
        self._check_open()
        validate_key(key)
        key = bytes(key)
        mode = mode or self.consistency
        tenant = tenant or self.tenant
        self.counters["gets"] += 1

        with self._lock:
            own = self._wseg.seg_get(key) if self._wseg is not None else []
            if not own:
                for sealed in reversed(self._flushing):
                    own = sealed.seg_get(key)
                    if own:
                        break
        if own:
            newest = own[0]
            return self._result(newest, tenant, GetInfo(
                not newest.tombstone, False, 0, 0,
                len(newest.value or b""), newest.tombstone))

        if mode != STRONG:
            cached = self.cache.get(tenant, key)
            if cached is not None:
                self.counters["cache_hits"] += 1
                return cached, GetInfo(True, True, 0, 0, len(cached), False)

        versions, consulted, skipped = self._segment_versions(key, use_bloom)
        if mode == STRONG:
            versions.extend(self._live_versions(key))

        if not versions:
            return None, GetInfo(False, False, consulted, skipped, 0, False)
        newest = max(versions, key=lambda r: r.timestamp)
        info = GetInfo(not newest.tombstone, False, consulted, skipped,
                       len(newest.value or b""), newest.tombstone)
        return self._result(newest, tenant, info, cacheable=mode != STRONG)

    def _result(self, record, tenant, info, cacheable=False):
        if record.tombstone:
            self.counters["tombstone_not_found"] += 1
            return None, info
        if cacheable:
            self.cache.put(tenant, record.key, record.value)
        return record.value, info

    def _segment_versions(self, key, use_bloom):
        for attempt in range(3):
            snap = self._snapshot()
            versions = []
            consulted = 0
            skipped = 0
            try:
                for path in snap.read_path(key):
                    for meta in snap.segments(path):
                        if use_bloom:
                            bloom = load_bloom(os.path.join(self.root, meta.bloom_path))
                            if not bloom.query(key):
                                skipped += 1
                                continue
                        reader = SegmentReader(os.path.join(self.root, meta.path))
                        consulted += 1
                        versions.extend(reader.get(key))
                return versions, consulted, skipped
            except SegmentGone:
                self.counters["segment_gone_retries"] += 1
                self.refresh()
        raise SegmentGone(f"segments kept vanishing while reading {key!r}")

    def _live_versions(self, key):
        """Strong mode: replay every other writer's live append log."""
        versions = []
        own_prefix = f"{self.writer_id}-"
        for name in sorted(os.listdir(self.root)):
            if not name.endswith(LIVE_SUFFIX) or name.startswith(own_prefix):
                continue
            try:
                recs = read_live_records(os.path.join(self.root, name))
            except SegmentGone:
                continue
            self.counters["live_replays"] += 1
            versions.extend(r for r in recs if r.key == key)
        return versions

    # -- cache management -----------------------------------------------------

    def cache_partition(self, capacities):
        self._check_open()
        self.cache.configure(capacities)
        return {"partitions": dict(capacities)}

    def cache_stats(self):
        return self.cache.stats()

    # -- lifecycle ------------------------------------------------------------

    def close(self):
        if self._closed:
            return
        with self._lock:
            has_data = self._wseg is not None and self._wseg.record_count > 0
        if has_data:
            self.flush(wait=True)
        elif self._wseg is not None:
            self._wseg.seal()
            self._wseg.discard()
        self._flusher.shutdown(wait=True)
        self._closed = True
        if self._flush_error is not None:
            err, self._flush_error = self._flush_error, None
            raise err

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
