"""Shared-directory catalog: manifest generations, tree placement, leasing.

The manifest is one JSON document committed by write-temp-then-rename.
Concurrent committers serialize on a per-generation claim marker created
with O_EXCL: whoever claims generation G+1 may rename its manifest over
MANIFEST.json; losers reload and retry. Claims are never reused, and a
fresh manifest is always re-read inside the retry loop, so committed
generations strictly increase.
"""

import itertools
import json
import os
import random
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from . import _kernels as kernels
from .segments import SegmentMeta

MANIFEST = "MANIFEST.json"
LEASE_FILE = "COMPACTION.lease"
ROOT_PATH = "root"
FLAT_PATH = "flat"

# A claim this old with the manifest still behind it belongs to a committer
# that died between claim and rename; break it like a stale lease.
STALE_CLAIM_SECONDS = 10.0

# Temp manifests are MANIFEST.json.tmp.<pid>.<n>: the counter keeps
# concurrent committers within one process (flusher threads) apart.
_tmp_counter = itertools.count()


class CatalogContention(RuntimeError):
    pass


class LeaseRequired(RuntimeError):
    pass


@dataclass(frozen=True)
class TreeConfig:
    max_level: int = 2
    fanout: int = 4
    node_threshold: int = 3

    def __post_init__(self):
        if self.max_level < 1 or self.fanout < 1 or self.node_threshold < 1:
            raise ValueError("tree config values must be >= 1")

    def capacity(self):
        """Maximum segment count the tree is sized for."""
        return self.fanout ** self.max_level * self.node_threshold

    def leaf_count(self):
        return self.fanout ** self.max_level

    def check_writers(self, expected_writers):
        if self.leaf_count() <= expected_writers:
            raise ValueError(
                f"leaf count {self.leaf_count()} must exceed writer count {expected_writers}")

    def to_json(self):
        return {"max_level": self.max_level, "fanout": self.fanout,
                "node_threshold": self.node_threshold}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["max_level"], obj["fanout"], obj["node_threshold"])


def route(key, config, level):
    """Child index of the key at the given tree level (1-based).

    Level 1 hashes the last 16 key bytes, level 2 the first 16; shorter
    keys are hashed whole. Pure function of (key, config, level).
    """
    if not 1 <= level <= config.max_level:
        raise ValueError(f"level {level} outside 1..{config.max_level}")
    return kernels.route_child(bytes(key), config.fanout, level)


def route_path(key, config):
    """Node paths from root to the key's leaf."""
    parts = [ROOT_PATH]
    for level in range(1, config.max_level + 1):
        parts.append(f"{parts[-1]}/{route(key, config, level)}")
    return parts


def node_level(path):
    return path.count("/")


def parent_path(path):
    return path.rsplit("/", 1)[0] if "/" in path else None


@dataclass
class TreeIndex:
    """Immutable snapshot of one manifest generation."""

    generation: int
    config: TreeConfig
    strategy: str                                  # "tree" | "size"
    nodes: Dict[str, List[SegmentMeta]] = field(default_factory=dict)

    def segments(self, path):
        return self.nodes.get(path, [])

    def all_metas(self):
        return [m for metas in self.nodes.values() for m in metas]

    def segment_count(self):
        return sum(len(v) for v in self.nodes.values())

    def read_path(self, key):
        """Node paths consulted for a key under this strategy."""
        if self.strategy == "size":
            return [FLAT_PATH]
        return route_path(key, self.config)

    def is_leaf(self, path):
        return self.strategy == "tree" and node_level(path) == self.config.max_level

    def to_json(self):
        return {
            "generation": self.generation,
            "config": self.config.to_json(),
            "strategy": self.strategy,
            "nodes": [
                {"path": p, "segments": [m.to_json() for m in metas]}
                for p, metas in sorted(self.nodes.items())
            ],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            generation=obj["generation"],
            config=TreeConfig.from_json(obj["config"]),
            strategy=obj["strategy"],
            nodes={n["path"]: [SegmentMeta.from_json(m) for m in n["segments"]]
                   for n in obj["nodes"]},
        )


@dataclass
class Lease:
    holder: str
    acquired_at: float
    ttl: float

    def expired(self, now=None):
        return (now or time.time()) >= self.acquired_at + self.ttl


class Catalog:
    """Multi-process catalog over one store directory."""

    def __init__(self, root, config=None, strategy="tree", retries=16):
        self.root = str(root)
        self.config = config or TreeConfig()
        self.strategy = strategy
        self.retries = retries
        self.stale_reads = 0
        self._last_snapshot = None
        os.makedirs(self.root, exist_ok=True)

    # -- reading ---------------------------------------------------------

    def _manifest_path(self):
        return os.path.join(self.root, MANIFEST)

    def load(self):
        """Read the current manifest; falls back to the prior snapshot on
        unreadable manifests, counting staleness."""
        try:
            with open(self._manifest_path(), "rb") as f:
                snap = TreeIndex.from_json(json.loads(f.read()))
        except FileNotFoundError:
            snap = TreeIndex(0, self.config, self.strategy, {ROOT_PATH: []})
        except (ValueError, KeyError):
            self.stale_reads += 1
            if self._last_snapshot is None:
                raise
            return self._last_snapshot
        if snap.generation > 0:
            # An existing store dictates its own strategy and tree shape.
            self.config = snap.config
            self.strategy = snap.strategy
        self._last_snapshot = snap
        return snap

    # -- committing ------------------------------------------------------

    def _claim_path(self, generation):
        return os.path.join(self.root, f"MANIFEST.claim.{generation}")

    def _break_stale_claim(self, generation):
        path = self._claim_path(generation)
        try:
            age = time.time() - os.stat(path).st_mtime
        except FileNotFoundError:
            return
        if age >= STALE_CLAIM_SECONDS and self.load().generation < generation:
            try:
                os.unlink(path)
            except FileNotFoundError:
                pass

    def _prune_claims(self, generation):
        for gen in (generation - 8, generation - 9):
            if gen > 0:
                try:
                    os.unlink(self._claim_path(gen))
                except OSError:
                    pass

    def _commit(self, mutate):
        """Apply `mutate(snapshot) -> TreeIndex` under the claim protocol."""
        for attempt in range(self.retries):
            snap = self.load()
            new = mutate(snap)
            new.generation = snap.generation + 1
            tmp = os.path.join(
                self.root, f"{MANIFEST}.tmp.{os.getpid()}.{next(_tmp_counter)}")
            with open(tmp, "w") as f:
                json.dump(new.to_json(), f)
                f.flush()
                os.fsync(f.fileno())
            try:
                fd = os.open(self._claim_path(new.generation),
                             os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                os.unlink(tmp)
                self._break_stale_claim(new.generation)
                time.sleep(random.uniform(0.001, 0.01) * (attempt + 1))
                continue
            os.close(fd)
            os.replace(tmp, self._manifest_path())
            self._prune_claims(new.generation)
            self._last_snapshot = new
            return new.generation
        raise CatalogContention(f"no commit after {self.retries} retries")

    # -- operations ------------------------------------------------------

    def publish(self, meta, node_path):
        """Add one flushed segment under a node; returns the new generation."""
        return self.publish_many([(meta, node_path)])

    def publish_many(self, placements):
        """Add several segments in one generation swap."""
        for _, path in placements:
            self._check_path(path)

        def mutate(snap):
            nodes = {p: list(metas) for p, metas in snap.nodes.items()}
            nodes.setdefault(ROOT_PATH, [])
            for meta, path in placements:
                nodes.setdefault(path, []).append(meta)
            return TreeIndex(snap.generation, snap.config, snap.strategy, nodes)

        return self._commit(mutate)

    def _check_path(self, path):
        if path == ROOT_PATH:
            raise ValueError("root holds no segments")
        if self.strategy == "size":
            if path != FLAT_PATH:
                raise ValueError(f"size strategy places segments under '{FLAT_PATH}'")
            return
        parts = path.split("/")
        if parts[0] != ROOT_PATH or not 1 <= len(parts) - 1 <= self.config.max_level:
            raise ValueError(f"bad node path {path!r}")
        for p in parts[1:]:
            if not 0 <= int(p) < self.config.fanout:
                raise ValueError(f"bad node path {path!r}")

    def retire(self, old_ids, placements, lease=None):
        """One atomic swap: remove old segment ids, insert new placements.

        Caller must hold the compaction lease when removing anything; the
        retired files are unlinked only after the swap commits.
        """
        old_ids = set(old_ids)
        if old_ids:
            if lease is None or not self.lease_valid(lease):
                raise LeaseRequired("compaction lease missing or expired")
        for _, path in placements:
            self._check_path(path)

        removed_paths = []

        def mutate(snap):
            removed_paths.clear()
            seen = set()
            nodes = {}
            for p, metas in snap.nodes.items():
                kept = []
                for m in metas:
                    if m.id in old_ids:
                        seen.add(m.id)
                        removed_paths.append((m.path, m.bloom_path))
                    else:
                        kept.append(m)
                nodes[p] = kept
            missing = old_ids - seen
            if missing:
                raise SegmentMissing(sorted(missing))
            for meta, path in placements:
                nodes.setdefault(path, []).append(meta)
            return TreeIndex(snap.generation, snap.config, snap.strategy, nodes)

        gen = self._commit(mutate)
        for rel, bloom_rel in removed_paths:
            for name in (rel, bloom_rel):
                try:
                    os.unlink(os.path.join(self.root, name))
                except FileNotFoundError:
                    pass
        return gen

    # -- compaction lease --------------------------------------------------

    def _lease_path(self):
        return os.path.join(self.root, LEASE_FILE)

    def _read_lease(self):
        try:
            with open(self._lease_path()) as f:
                obj = json.load(f)
            return Lease(obj["holder"], obj["acquired_at"], obj["ttl"])
        except (FileNotFoundError, ValueError, KeyError):
            return None

    def acquire_lease(self, holder, ttl=30.0):
        """Create-exclusive lease; breaks expired leases. None when busy."""
        for _ in range(2):
            try:
                fd = os.open(self._lease_path(), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                current = self._read_lease()
                if current is None or current.expired():
                    try:
                        os.unlink(self._lease_path())
                    except FileNotFoundError:
                        pass
                    continue
                return None
            lease = Lease(holder, time.time(), ttl)
            with os.fdopen(fd, "w") as f:
                json.dump({"holder": lease.holder, "acquired_at": lease.acquired_at,
                           "ttl": lease.ttl}, f)
            return lease
        return None

    def lease_valid(self, lease):
        current = self._read_lease()
        return (current is not None and current.holder == lease.holder
                and not current.expired())

    def release_lease(self, lease):
        current = self._read_lease()
        if current is not None and current.holder == lease.holder:
            try:
                os.unlink(self._lease_path())
            except FileNotFoundError:
                pass


class SegmentMissing(RuntimeError):
    def __init__(self, ids):
        super().__init__(f"segments vanished from catalog: {ids}")
        self.ids = ids


class SnapshotCache:
    """Per-process snapshot with interval-based refresh (default 1000 ms)."""

    def __init__(self, catalog, interval_ms=1000):
        self.catalog = catalog
        self.interval = interval_ms / 1000.0
        self._snapshot = catalog.load()
        self._loaded_at = time.monotonic()
        self.fresh_publish = False

    def current(self):
        if time.monotonic() - self._loaded_at >= self.interval:
            return self.refresh()
        return self._snapshot

    def refresh(self):
        prev = self._snapshot
        self._snapshot = self.catalog.load()
        self._loaded_at = time.monotonic()
        self.fresh_publish = any(
            m.origin == "flush" and m.id not in {x.id for x in prev.all_metas()}
            for m in self._snapshot.all_metas())
        return self._snapshot
