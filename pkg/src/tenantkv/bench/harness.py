"""Experiment harness wiring workloads, the scheduler, and the engine.

The service node is H worker threads in front of a shared FIFO disk model
draining at a fixed byte rate. Tenants drive the node closed-loop with a
fixed number of in-flight request slots; every completion immediately
issues the tenant's next op. Admission order is the scheduling policy's
only lever, which is exactly the contrast under study:

  none     arrivals are served FIFO, so service share follows in-flight
           slot counts;
  wfq      work-conserving smallest-virtual-finish service;
  drr      credit-metered admission with refunds and LP or periodic
           refills; tenants stall at epoch boundaries until all accounts
           drain, which enforces the byte shares.

Scans are synthetic multi-row requests charged rows * row_bytes of disk
time; split_scans chops them into pieces at enqueue.
"""

import json
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from .. import planner as planner_mod
from .. import scheduler as sched
from ..catalog import TreeConfig
from ..compaction import CompactionManager
from ..engine import StoreHandle
from ..workload import Event, OpStream, WorkloadSpec, key_for, measure

DEFAULT_VALUE = 1000


# -- configuration -------------------------------------------------------------


@dataclass
class ServiceConfig:
    workers: int = 150
    disk_bytes_per_sec: float = 4_000_000.0
    scan_row_bytes: int = 1228
    probe_bytes: int = 128

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class SchedulerConfig:
    policy: str = "drr_lp"         # none | wfq | drr_lp | drr_periodic
    total_credits: float = 8_000_000.0
    refill_interval_ms: float = 2000.0
    window: int = 10
    piece_size: int = 5
    split_scans: bool = True
    default_estimate: float = 1024.0
    elastic: bool = True

    def __post_init__(self):
        if self.policy not in ("none", "wfq", "drr_lp", "drr_periodic"):
            raise ValueError(f"unknown policy {self.policy!r}")

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class PlannerConfig:
    enabled: bool = False
    profiles: List[str] = field(default_factory=list)
    alpha: float = 0.5
    interval_s: float = 30.0
    signature_window: int = 2000

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class StoreConfig:
    root: Optional[str] = None
    strategy: str = "tree"
    flush_threshold: int = 1 << 22
    cache_budget: int = 8 << 20
    refresh_interval_ms: float = 1000.0
    preload: bool = True
    compact_after_preload: bool = True

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


@dataclass
class TenantConfig:
    id: str
    workload: WorkloadSpec
    weight: Optional[float] = None
    baseline: Optional[float] = None

    @classmethod
    def from_json(cls, obj):
        baseline = obj.get("baseline")
        if isinstance(baseline, dict):
            with open(baseline["file"]) as f:
                baseline = json.load(f)["baseline"]
        wl = dict(obj["workload"])
        wl.setdefault("key_prefix", f"{obj['id']}:")
        return cls(id=obj["id"], workload=WorkloadSpec.from_json(wl),
                   weight=obj.get("weight"), baseline=baseline)


@dataclass
class ExperimentConfig:
    tenants: List[TenantConfig]
    duration_s: float = 60.0
    ramp_up_s: float = 10.0
    seed: int = 42
    out_dir: Optional[str] = None
    store: StoreConfig = field(default_factory=StoreConfig)
    service: ServiceConfig = field(default_factory=ServiceConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    export_traces: int = 0
    record_events: bool = False

    def __post_init__(self):
        if not self.tenants:
            raise ValueError("at least one tenant required")
        ids = [t.id for t in self.tenants]
        if len(set(ids)) != len(ids):
            raise ValueError("tenant ids must be unique")
        given = [t.weight for t in self.tenants if t.weight is not None]
        if given and (any(w <= 0 for w in given) or len(given) != len(ids)):
            raise ValueError("either give every tenant a positive weight or none")
        total = sum(given) if given else None
        for t in self.tenants:
            t.weight = (t.weight / total) if given else 1.0 / len(ids)
        if self.planner.enabled:
            for path in self.planner.profiles:
                if not os.path.exists(path):
                    raise ValueError(f"profile file missing: {path}")

    @classmethod
    def from_json(cls, obj):
        return cls(
            tenants=[TenantConfig.from_json(t) for t in obj["tenants"]],
            duration_s=obj.get("duration_s", 60.0),
            ramp_up_s=obj.get("ramp_up_s", 10.0),
            seed=obj.get("seed", 42),
            out_dir=obj.get("out"),
            store=StoreConfig.from_json(obj.get("store", {})),
            service=ServiceConfig.from_json(obj.get("service", {})),
            scheduler=SchedulerConfig.from_json(obj.get("scheduler", {})),
            planner=PlannerConfig.from_json(obj.get("planner", {})),
            export_traces=obj.get("export_traces", 0),
            record_events=obj.get("record_events", False),
        )

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


# -- service node -------------------------------------------------------------------


class DiskModel:
    """FIFO disk drained at a fixed byte rate; acquire() returns after the
    request's bytes have been transferred behind everything queued ahead."""

    def __init__(self, bytes_per_sec):
        self.rate = float(bytes_per_sec)
        self._lock = threading.Lock()
        self._next_free = 0.0
        self.bytes_charged = 0

    def acquire(self, nbytes):
        now = time.monotonic()
        with self._lock:
            start = max(now, self._next_free)
            done = start + nbytes / self.rate
            self._next_free = done
            self.bytes_charged += nbytes
        delay = done - now
        if delay > 0:
            time.sleep(delay)


class ScanTracker:
    def __init__(self, op, pieces, enqueued_at):
        self.op = op
        self.remaining = pieces
        self.enqueued_at = enqueued_at
        self.total_bytes = 0
        self.failed = False
        self.lock = threading.Lock()

    def piece_done(self, nbytes, ok=True):
        with self.lock:
            self.remaining -= 1
            self.total_bytes += nbytes
            self.failed = self.failed or not ok
            return self.remaining == 0


class Request:
    __slots__ = ("tenant", "kind", "key", "size", "rows", "scan", "enqueued_at",
                 "est")

    def __init__(self, tenant, kind, key=b"", size=0, rows=0, scan=None,
                 enqueued_at=0.0):
        self.tenant = tenant
        self.kind = kind
        self.key = key
        self.size = size
        self.rows = rows
        self.scan = scan
        self.enqueued_at = enqueued_at
        self.est = 0.0


class FrontendBase:
    """Thread-safe admission queue; subclasses define the order."""

    def __init__(self, tenants, cfg):
        self.cfg = cfg
        self.tenants = list(tenants)
        self.windows = {t: sched.FeedbackWindow(cfg.window) for t in tenants}
        self.delivered = defaultdict(float)
        self.outstanding = defaultdict(int)     # enqueued or in service
        self._cond = threading.Condition()
        self._stopped = False

    def estimate(self, tenant):
        return sched.estimate(self.windows[tenant], self.cfg.default_estimate)

    def stop(self):
        with self._cond:
            self._stopped = True
            self._cond.notify_all()

    def complete(self, request, actual, cache_hit):
        with self._cond:
            self.windows[request.tenant].push(actual)
            self.delivered[request.tenant] += actual
            self.outstanding[request.tenant] -= 1
            self._on_complete(request, actual, cache_hit)
            self._cond.notify_all()

    def _on_complete(self, request, actual, cache_hit):
        pass

    def enqueue(self, request):
        with self._cond:
            self.outstanding[request.tenant] += 1
            self._push(request)
            self._cond.notify_all()

    def pull(self, timeout=0.1):
        with self._cond:
            while True:
                req = self._pop()
                if req is not None:
                    return req
                if self._stopped:
                    return None
                self._cond.wait(timeout)
                if self._stopped:
                    return None
                req = self._pop()
                return req


class FifoFrontend(FrontendBase):
    def __init__(self, tenants, cfg):
        super().__init__(tenants, cfg)
        self._queue = deque()

    def _push(self, request):
        self._queue.append(request)

    def _pop(self):
        return self._queue.popleft() if self._queue else None


class WfqFrontend(FrontendBase):
    def __init__(self, tenants, cfg, rates=None):
        super().__init__(tenants, cfg)
        self._state = sched.WfqState(rates or {})

    def _push(self, request):
        request.est = self.estimate(request.tenant)
        self._state.tag(request.tenant, request.est, item=request)

    def _pop(self):
        picked = self._state.pick()
        return picked[1] if picked else None


class DrrFrontend(FrontendBase):
    """Deficit round robin with refunds and LP or periodic refills."""

    def __init__(self, tenants, cfg, weights, baselines=None):
        super().__init__(tenants, cfg)
        self.accounts = {
            t: sched.CreditAccount(t, credits=0.0, weight=weights[t])
            for t in tenants
        }
        self.base_alloc = {t: cfg.total_credits * weights[t] for t in tenants}
        self.baselines = dict(baselines or {})
        self._queues = {t: deque() for t in tenants}
        self._ready = deque()
        self._period = cfg.refill_interval_ms / 1000.0
        self._next_refill = time.monotonic() + self._period
        self._period_bytes = defaultdict(float)
        self.refills = 0
        if cfg.policy == "drr_periodic":
            sched.refill_periodic(self.accounts, self.base_alloc)
        else:
            x, _ = sched.lp_refill(sched.RefillProblem(
                b=[0.0] * len(tenants), m=[1.0] * len(tenants),
                w=[weights[t] for t in tenants], M=cfg.total_credits))
            for t, credits in zip(tenants, x):
                self.accounts[t].credits = credits

    def set_weights(self, weights):
        with self._cond:
            for t, w in weights.items():
                self.accounts[t].weight = w
            self.base_alloc = {t: self.cfg.total_credits * w
                               for t, w in weights.items()}

    def _push(self, request):
        self._queues[request.tenant].append(request)

    def _estimates(self):
        return {t: self.estimate(t) for t in self.tenants}

    def _admit_round(self):
        ests = self._estimates()
        admitted = sched.drr_round(self._queues, self.accounts, ests.__getitem__)
        for tenant, req in admitted:
            req.est = ests[tenant]
            self._ready.append(req)
        return bool(admitted)

    def _maybe_refill(self):
        now = time.monotonic()
        if self.cfg.policy == "drr_periodic":
            if now < self._next_refill:
                return False
            self._next_refill = now + self._period
            adjusted = None
            if self.cfg.elastic and self.baselines:
                expected = {t: self.baselines[t] / len(self.tenants)
                            for t in self.tenants}
                actual = {t: self._period_bytes[t] / self._period /
                          max(self._avg_bytes(t), 1.0)
                          for t in self.tenants}
                adjusted = planner_mod.elastic_redistribute(
                    expected, actual, self.base_alloc)
            sched.refill_periodic(self.accounts, self.base_alloc, adjusted)
            self._period_bytes.clear()
            self.refills += 1
            return True
        # all-dry LP refill, guarded so a refill only fires when some
        # tenant is actually blocked on credits; a tenant counts as
        # inactive only when it has nothing queued or in flight, so a
        # closed-loop tenant's momentarily empty queue cannot reset the
        # epoch for everyone else.
        ests = self._estimates()
        blocked = any(self._queues[t] and not self.accounts[t].can_admit(ests[t])
                      for t in self.tenants)
        if not blocked:
            return False
        demand = {t: self.outstanding[t] for t in self.tenants}
        x = sched.refill_all_dry(self.accounts, demand, ests.__getitem__,
                                 self.cfg.total_credits)
        if x is not None:
            self.refills += 1
        return x is not None

    def _avg_bytes(self, tenant):
        mean = self.windows[tenant].mean()
        return mean if mean else self.cfg.default_estimate

    def _pop(self):
        if self._ready:
            return self._ready.popleft()
        if self._admit_round():
            return self._ready.popleft()
        if self._maybe_refill() and self._admit_round():
            return self._ready.popleft()
        return None

    def _on_complete(self, request, actual, cache_hit):
        sched.refund(self.accounts[request.tenant], request.est, actual,
                     cache_hit)
        self._period_bytes[request.tenant] += actual


def build_frontend(cfg, tenants, weights, baselines=None, rates=None):
    if cfg.policy == "none":
        return FifoFrontend(tenants, cfg)
    if cfg.policy == "wfq":
        return WfqFrontend(tenants, cfg, rates)
    return DrrFrontend(tenants, cfg, weights, baselines)


# -- tenant driver ---------------------------------------------------------------------


class TenantDriver:
    """Closed-loop op source: `threads` requests stay in flight."""

    def __init__(self, tenant_cfg, stream, frontend, sched_cfg, clock,
                 signature_window=2000):
        self.cfg = tenant_cfg
        self.stream = stream
        self.frontend = frontend
        self.sched_cfg = sched_cfg
        self.clock = clock
        self.recent_keys = deque(maxlen=signature_window)
        self.issued = 0
        self.trace = []
        self._stopped = False
        self._lock = threading.Lock()

    def start(self):
        for _ in range(self.cfg.workload.threads):
            self.issue_next()

    def stop(self):
        self._stopped = True

    def issue_next(self):
        if self._stopped:
            return
        with self._lock:
            op = self.stream.next_op()
            self.issued += 1
            if len(self.trace) < 10_000:
                self.trace.append(op)
        self.recent_keys.append(op.key)
        now = self.clock()
        tenant = self.cfg.id
        if op.op == "scan":
            if self.sched_cfg.split_scans:
                pieces = sched.split_scan(op.rows, self.sched_cfg.piece_size)
            else:
                pieces = [sched.ScanPiece(0, op.rows)]
            tracker = ScanTracker(op, len(pieces), now)
            for piece in pieces:
                self.frontend.enqueue(Request(tenant, "scan", rows=piece.rows,
                                              scan=tracker, enqueued_at=now))
        else:
            self.frontend.enqueue(Request(tenant, op.op, key=op.key,
                                          size=op.size, enqueued_at=now))


# -- experiment ------------------------------------------------------------------------


class Experiment:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.root = config.store.root or os.environ.get("TENANTKV_ROOT")
        if not self.root:
            if not config.out_dir:
                raise ValueError("no store root: set store.root, TENANTKV_ROOT, "
                                 "or an output directory")
            self.root = os.path.join(config.out_dir, "store")
        self.events: List[Event] = []
        self._events_lock = threading.Lock()
        self._t0 = None
        self.handle = None
        self.frontend = None
        self.report = None

    # -- store preparation ------------------------------------------------

    def preload(self):
        cfg = self.config
        writer = StoreHandle(self.root, writer_id="loader",
                             strategy=cfg.store.strategy,
                             flush_threshold=cfg.store.flush_threshold,
                             cache_budget=0)
        for tenant in cfg.tenants:
            spec = tenant.workload
            size = spec.value_size if isinstance(spec.value_size, int) \
                else sum(spec.value_size) // 2
            value = b"\x5a" * size
            for i in range(spec.records):
                writer.put(key_for(spec, i), value)
        writer.flush()
        writer.close()
        if cfg.store.compact_after_preload:
            mgr = CompactionManager(self.root, workers=3)
            mgr.quiesce()
            mgr.close()

    # -- run ----------------------------------------------------------------

    def _clock(self):
        return time.monotonic() - self._t0

    def _record(self, event):
        with self._events_lock:
            self.events.append(event)

    def _serve(self, request):
        svc = self.config.service
        tenant = request.tenant
        if request.kind == "read":
            value, info = self.handle.get_with_info(request.key, tenant=tenant)
            actual = info.value_bytes
            if not info.cache_hit:
                self.disk.acquire(max(actual, svc.probe_bytes))
            return actual, info.cache_hit
        if request.kind == "write":
            self.handle.put(request.key, b"\x5a" * request.size)
            self.disk.acquire(request.size + len(request.key) + 17)
            return request.size, False
        if request.kind == "delete":
            self.handle.delete(request.key)
            self.disk.acquire(len(request.key) + 17)
            return len(request.key) + 17, False
        if request.kind == "scan":
            nbytes = request.rows * svc.scan_row_bytes
            self.disk.acquire(nbytes)
            return nbytes, False
        raise ValueError(f"unknown request kind {request.kind!r}")

    def _worker(self):
        while not self._stop.is_set():
            request = self.frontend.pull(0.05)
            if request is None:
                if self._stop.is_set():
                    return
                continue
            try:
                actual, cache_hit = self._serve(request)
                ok = True
            except Exception:
                actual, cache_hit, ok = 0, False, False
            now = self._clock()
            self.frontend.complete(request, actual, cache_hit)
            driver = self.drivers[request.tenant]
            if request.kind == "scan":
                if request.scan.piece_done(actual, ok):
                    self._record(Event(request.tenant, now,
                                       now - request.scan.enqueued_at,
                                       request.scan.total_bytes, "scan",
                                       not request.scan.failed))
                    driver.issue_next()
            else:
                self._record(Event(request.tenant, now,
                                   now - request.enqueued_at, actual,
                                   request.kind, ok, cache_hit))
                driver.issue_next()

    def _planner_cycle(self):
        cfg = self.config
        profiles = [planner_mod.PerfProfile.load(p) for p in cfg.planner.profiles]
        models = [planner_mod.fit(p) for p in profiles]
        while not self._stop.wait(cfg.planner.interval_s):
            chosen, baselines = [], []
            for tenant in cfg.tenants:
                driver = self.drivers[tenant.id]
                keys = list(driver.recent_keys)
                if not keys or tenant.baseline is None:
                    chosen = []
                    break
                ratio = planner_mod.signature(keys)
                chosen.append(planner_mod.match(ratio, models))
                baselines.append(tenant.baseline)
            if not chosen:
                continue
            plan = planner_mod.hill_climb(chosen, baselines,
                                          alpha=cfg.planner.alpha,
                                          seed=cfg.seed)
            budget = cfg.store.cache_budget
            self.handle.cache_partition({
                t.id: int(budget * alloc[0])
                for t, alloc in zip(cfg.tenants, plan.allocations)})
            if isinstance(self.frontend, DrrFrontend):
                self.frontend.set_weights({
                    t.id: alloc[1]
                    for t, alloc in zip(cfg.tenants, plan.allocations)})
            self.plans.append(plan)

    def run(self):
        cfg = self.config
        if cfg.store.preload and not os.path.exists(
                os.path.join(self.root, "MANIFEST.json")):
            self.preload()

        tenant_ids = [t.id for t in cfg.tenants]
        weights = {t.id: t.weight for t in cfg.tenants}
        baselines = {t.id: t.baseline for t in cfg.tenants
                     if t.baseline is not None}
        self.disk = DiskModel(cfg.service.disk_bytes_per_sec)
        self.frontend = build_frontend(cfg.scheduler, tenant_ids, weights,
                                       baselines)
        self.handle = StoreHandle(
            self.root, writer_id="bench", strategy=cfg.store.strategy,
            flush_threshold=cfg.store.flush_threshold,
            cache_budget=cfg.store.cache_budget,
            refresh_interval_ms=cfg.store.refresh_interval_ms)
        share = cfg.store.cache_budget // max(len(tenant_ids), 1)
        self.handle.cache_partition({t: share for t in tenant_ids})

        self._t0 = time.monotonic()
        self._stop = threading.Event()
        self.plans = []
        self.drivers = {}
        for tenant in cfg.tenants:
            stream = OpStream(tenant.workload,
                              seed=cfg.seed * 1_000_003 + _stable_id(tenant.id))
            self.drivers[tenant.id] = TenantDriver(
                tenant, stream, self.frontend, cfg.scheduler, self._clock,
                cfg.planner.signature_window)

        workers = [threading.Thread(target=self._worker, daemon=True)
                   for _ in range(cfg.service.workers)]
        for w in workers:
            w.start()
        threads = []
        if cfg.planner.enabled and cfg.planner.profiles:
            t = threading.Thread(target=self._planner_cycle, daemon=True)
            t.start()
            threads.append(t)
        for driver in self.drivers.values():
            driver.start()

        time.sleep(cfg.duration_s)
        for driver in self.drivers.values():
            driver.stop()
        self._stop.set()
        self.frontend.stop()
        for w in workers:
            w.join(timeout=5)

        occupancy = {t: s["occupancy_ratio"]
                     for t, s in self.handle.cache_stats().items()}
        total = sum(self.frontend.delivered.values()) or 1.0
        share = {t: self.frontend.delivered[t] / total for t in tenant_ids}
        self.report = measure(self.events, ramp_up=cfg.ramp_up_s,
                              duration=cfg.duration_s, baselines=baselines,
                              alpha=cfg.planner.alpha,
                              cache_occupancy=occupancy, scheduled_share=share)
        self.handle.close()
        if cfg.out_dir:
            self.write_outputs()
        return self.report

    # -- outputs ----------------------------------------------------------------

    def write_outputs(self):
        cfg = self.config
        os.makedirs(cfg.out_dir, exist_ok=True)
        summary = {
            "config_seed": cfg.seed,
            "policy": cfg.scheduler.policy,
            "duration_s": cfg.duration_s,
            "report": self.report.to_json(),
        }
        with open(os.path.join(cfg.out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
        write_timeseries(self.events, os.path.join(cfg.out_dir, "timeseries.csv"))
        if cfg.record_events:
            with open(os.path.join(cfg.out_dir, "events.ndjson"), "w") as f:
                for ev in self.events:
                    f.write(json.dumps({
                        "tenant": ev.tenant, "t": ev.t, "latency": ev.latency,
                        "bytes": ev.nbytes, "op": ev.op, "ok": ev.ok,
                        "cache_hit": ev.cache_hit}) + "\n")
        if cfg.export_traces:
            from ..workload import export_trace
            for tenant_id, driver in self.drivers.items():
                export_trace(driver.trace[:cfg.export_traces],
                             os.path.join(cfg.out_dir, f"trace-{tenant_id}.ndjson"),
                             tenant=tenant_id)


def _stable_id(name):
    from .._kernels import fnv1a64
    return fnv1a64(name.encode()) % 1_000_000


def write_timeseries(events, path):
    """CSV rows: time_bucket, tenant, ops, bytes, p50, p99."""
    from ..workload import quantile
    buckets = defaultdict(list)
    for ev in events:
        if ev.ok:
            buckets[(int(ev.t), ev.tenant)].append(ev)
    with open(path, "w") as f:
        f.write("time_bucket,tenant,ops,bytes,p50,p99\n")
        for (bucket, tenant), evs in sorted(buckets.items()):
            lats = sorted(e.latency for e in evs)
            f.write(f"{bucket},{tenant},{len(evs)},{sum(e.nbytes for e in evs)},"
                    f"{quantile(lats, 0.5):.6f},{quantile(lats, 0.99):.6f}\n")
    return path
