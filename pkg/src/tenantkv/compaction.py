"""Compaction planning and execution.

Size-based: when a node's segment count reaches the threshold, merge the
(count - threshold + 2) smallest segments into one.

Tree-based: walk the tree level by level; a non-leaf node above the
threshold gets a push-down task (records re-routed by the next level's
hash), a leaf above the threshold gets a merge-leaf task. A node and its
descendant are never scheduled in the same plan; the ancestor wins.

Workers run tasks on disjoint inputs, in parallel as child processes.
"""

import heapq
import itertools
import json
import os
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .catalog import (FLAT_PATH, Catalog, LeaseRequired, SegmentMissing,
                      TreeConfig, node_level, parent_path, route)
from .records import sort_key
from .segments import (SEGMENT_SUFFIX, SegmentFileWriter, SegmentGone,
                       SegmentMeta, SegmentReader)

MERGE_LEAF = "merge-leaf"
PUSH_DOWN = "push-down"
SIZE_MERGE = "size-merge"


class TaskAborted(RuntimeError):
    """Input segment vanished; the task will be re-planned next cycle."""


@dataclass
class CompactionTask:
    kind: str
    node: str
    input_ids: List[str]
    input_paths: List[str]               # relative to the store root
    leaf_final: bool = False
    split_level: Optional[int] = None    # routing level for push-down outputs
    worker: Optional[int] = None

    def to_json(self):
        return {
            "kind": self.kind,
            "node": self.node,
            "input_ids": self.input_ids,
            "input_paths": self.input_paths,
            "leaf_final": self.leaf_final,
            "split_level": self.split_level,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            kind=obj["kind"],
            node=obj["node"],
            input_ids=list(obj["input_ids"]),
            input_paths=list(obj["input_paths"]),
            leaf_final=obj.get("leaf_final", False),
            split_level=obj.get("split_level"),
        )


@dataclass
class TaskResult:
    task: CompactionTask
    old_ids: List[str]
    placements: List[Tuple[SegmentMeta, str]]


def plan_size_based(metas, threshold):
    """One merge task over the smallest segments, or None below threshold."""
    if len(metas) < threshold:
        return None
    pick = sorted(metas, key=lambda m: (m.file_size, m.id))[:len(metas) - threshold + 2]
    return CompactionTask(
        kind=SIZE_MERGE,
        node=FLAT_PATH,
        input_ids=[m.id for m in pick],
        input_paths=[m.path for m in pick],
        leaf_final=len(pick) == len(metas),
    )


def plan_tree_based(tree, node_threshold=None):
    """Per-node tasks for one compaction cycle, ancestors taking priority."""
    threshold = node_threshold if node_threshold is not None else tree.config.node_threshold
    max_level = tree.config.max_level
    tasks = []
    busy_prefixes = []

    def under_busy(path):
        return any(path.startswith(p + "/") for p in busy_prefixes)

    for path in sorted(tree.nodes, key=lambda p: (node_level(p), p)):
        level = node_level(path)
        if level == 0 or under_busy(path):
            continue
        metas = tree.segments(path)
        if len(metas) <= threshold:
            continue
        if level < max_level:
            tasks.append(CompactionTask(
                kind=PUSH_DOWN,
                node=path,
                input_ids=[m.id for m in metas],
                input_paths=[m.path for m in metas],
                split_level=level + 1,
            ))
            busy_prefixes.append(path)
        else:
            ancestors_clear = all(
                not tree.segments(anc)
                for anc in _ancestors(path))
            tasks.append(CompactionTask(
                kind=MERGE_LEAF,
                node=path,
                input_ids=[m.id for m in metas],
                input_paths=[m.path for m in metas],
                leaf_final=ancestors_clear,
            ))
    return tasks


def _ancestors(path):
    out = []
    p = parent_path(path)
    while p is not None:
        out.append(p)
        p = parent_path(p)
    return out


def resolve(versions, leaf_final=False):
    """Latest-timestamp resolution for one key's versions.

    Returns the surviving record, or None when the winner is a tombstone
    and this merge is leaf-final (no older version can hide elsewhere).
    """
    winner = max(versions, key=lambda r: r.timestamp)
    if winner.tombstone and leaf_final:
        return None
    return winner


def dispatch(tasks, workers):
    """Round-robin task assignment onto a pool of the given size.

    Each worker runs its list one task at a time; parallel tasks must not
    share inputs, which is asserted here.
    """
    if workers < 1:
        raise ValueError("worker pool must hold at least one worker")
    seen = set()
    for t in tasks:
        for sid in t.input_ids:
            if sid in seen:
                raise ValueError(f"tasks share input segment {sid}")
            seen.add(sid)
    lanes = [[] for _ in range(workers)]
    for i, task in enumerate(tasks):
        task.worker = i % workers
        lanes[i % workers].append(task)
    return lanes


def _merged_stream(store_root, task):
    readers = [SegmentReader(os.path.join(store_root, p)) for p in task.input_paths]
    return heapq.merge(*readers, key=sort_key)


def execute(task, store_root, config=None, out_dir=None, target_fp=0.01):
    """Run one task: merge inputs, write outputs durably, return the swap.

    Outputs are written (tmp + rename) but not yet published; the caller
    retires inputs for outputs in one catalog swap afterwards.
    """
    config = config or TreeConfig()
    out_dir = out_dir or store_root
    tag = uuid.uuid4().hex[:10]
    writers: Dict[str, SegmentFileWriter] = {}
    ids: Dict[str, str] = {}

    def writer_for(node, child=None):
        key = node if child is None else f"{node}/{child}"
        if key not in writers:
            seg_id = f"cmp-{tag}" if child is None else f"cmp-{tag}-{child}"
            ids[key] = seg_id
            writers[key] = SegmentFileWriter(
                os.path.join(out_dir, seg_id + SEGMENT_SUFFIX), target_fp)
        return writers[key]

    try:
        stream = _merged_stream(store_root, task)
        if task.kind in (MERGE_LEAF, SIZE_MERGE):
            for _, versions in itertools.groupby(stream, key=lambda r: r.key):
                rec = resolve(list(versions), task.leaf_final)
                if rec is not None:
                    writer_for(task.node).add(rec)
        elif task.kind == PUSH_DOWN:
            level = task.split_level or node_level(task.node) + 1
            for _, versions in itertools.groupby(stream, key=lambda r: r.key):
                rec = resolve(list(versions), False)
                if rec is not None:
                    child = route(rec.key, config, level)
                    writer_for(task.node, child).add(rec)
        else:
            raise ValueError(f"unknown task kind {task.kind!r}")
    except SegmentGone as exc:
        for w in writers.values():
            w.abort()
        raise TaskAborted(str(exc))

    placements = []
    for key, writer in writers.items():
        info = writer.finish()
        if info is None:
            continue
        meta = SegmentMeta(
            id=ids[key],
            path=ids[key] + SEGMENT_SUFFIX,
            bloom_path=os.path.basename(info["bloom_path"]),
            min_key=info["min_key"],
            max_key=info["max_key"],
            record_count=info["record_count"],
            file_size=info["file_size"],
            created_at=time.time(),
            origin="compaction",
        )
        placements.append((meta, key))
    return TaskResult(task=task, old_ids=list(task.input_ids), placements=placements)


def _execute_for_pool(store_root, task_json, config_json, target_fp):
    """Picklable wrapper run inside compaction worker processes."""
    task = CompactionTask.from_json(task_json)
    config = TreeConfig.from_json(config_json)
    result = execute(task, store_root, config, target_fp=target_fp)
    return {
        "task": task_json,
        "old_ids": result.old_ids,
        "placements": [(m.to_json(), path) for m, path in result.placements],
    }


def run_task_file(task_path, store_root, out_path=None):
    """CLI entry for `compact-worker --task <file>`: execute one task file."""
    with open(task_path) as f:
        obj = json.load(f)
    task = CompactionTask.from_json(obj["task"] if "task" in obj else obj)
    config = TreeConfig.from_json(obj["config"]) if "config" in obj else TreeConfig()
    result = execute(task, store_root, config)
    payload = {
        "old_ids": result.old_ids,
        "placements": [(m.to_json(), path) for m, path in result.placements],
    }
    text = json.dumps(payload, indent=2)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    return payload


class CompactionManager:
    """Lease-guarded planner driving parallel workers over one store."""

    def __init__(self, store_root, workers=6, holder=None, lease_ttl=30.0,
                 size_threshold=None, inline=False, target_fp=0.01):
        self.store_root = str(store_root)
        self.workers = workers
        self.holder = holder or f"mgr-{os.getpid()}"
        self.lease_ttl = lease_ttl
        self.catalog = Catalog(self.store_root)
        self.inline = inline
        self.target_fp = target_fp
        self._size_threshold = size_threshold
        self._pool = None

    def _ensure_pool(self):
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def plan(self, snap):
        if snap.strategy == "size":
            threshold = self._size_threshold or snap.config.capacity()
            task = plan_size_based(snap.segments(FLAT_PATH), threshold)
            return [task] if task else []
        return plan_tree_based(snap)

    def cycle(self):
        """Plan and run one round; returns the number of retired tasks."""
        lease = self.catalog.acquire_lease(self.holder, self.lease_ttl)
        if lease is None:
            return 0
        try:
            snap = self.catalog.load()
            tasks = self.plan(snap)
            if not tasks:
                return 0
            dispatch(tasks, self.workers)              # asserts disjoint inputs
            done = 0
            for result in self._run_tasks(snap, tasks):
                if result is None:
                    continue
                try:
                    self.catalog.retire(result.old_ids, result.placements, lease)
                    done += 1
                except (SegmentMissing, LeaseRequired):
                    for meta, _ in result.placements:
                        for name in (meta.path, meta.bloom_path):
                            try:
                                os.unlink(os.path.join(self.store_root, name))
                            except FileNotFoundError:
                                pass
            return done
        finally:
            self.catalog.release_lease(lease)

    def _run_tasks(self, snap, tasks):
        if self.inline:
            for task in tasks:
                try:
                    yield execute(task, self.store_root, snap.config,
                                  target_fp=self.target_fp)
                except TaskAborted:
                    yield None
            return
        pool = self._ensure_pool()
        futures = [
            pool.submit(_execute_for_pool, self.store_root, t.to_json(),
                        snap.config.to_json(), self.target_fp)
            for t in tasks
        ]
        for fut in futures:
            try:
                payload = fut.result()
            except TaskAborted:
                yield None
                continue
            yield TaskResult(
                task=CompactionTask.from_json(payload["task"]),
                old_ids=payload["old_ids"],
                placements=[(SegmentMeta.from_json(m), p)
                            for m, p in payload["placements"]],
            )

    def quiesce(self, max_cycles=1000):
        """Run cycles until a cycle retires nothing; returns cycles used."""
        for i in range(max_cycles):
            if self.cycle() == 0:
                return i
        return max_cycles
