"""Workload generation (uniform / zipfian / power-law key draws, operation
mixes, value sizes) and metrics collection. All sampling is seed-pure:
the same spec and seed always produce the same op sequence.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import planner, scheduler

ZIPF_THETA = 0.99
POWERLAW_SHAPE = 3.2
OPS = ("read", "write", "delete", "scan")
CHUNK = 8192


@dataclass
class WorkloadSpec:
    records: int
    subset: Optional[int] = None            # hotspot subset; None = all records
    distribution: str = "uniform"           # uniform | zipfian | powerlaw
    shape: Optional[float] = None           # zipf theta / power-law exponent
    mix: Dict[str, float] = field(default_factory=lambda: {"read": 1.0})
    scan_rows: int = 200
    value_size: Union[int, Tuple[int, int]] = 1024
    threads: int = 1                        # closed-loop in-flight slots
    target_rate: Optional[float] = None     # ops/sec; None = unlimited
    key_prefix: bytes = b""

    def __post_init__(self):
        if self.records < 1:
            raise ValueError("record count must be >= 1")
        if self.subset is None:
            self.subset = self.records
        if not 1 <= self.subset <= self.records:
            raise ValueError("subset size must lie in 1..records")
        if self.distribution not in ("uniform", "zipfian", "powerlaw"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        unknown = set(self.mix) - set(OPS)
        if unknown:
            raise ValueError(f"unknown ops in mix: {sorted(unknown)}")
        if any(w < 0 for w in self.mix.values()):
            raise ValueError("mix weights must be >= 0")
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mix weights sum to {total}, expected 1")
        if self.shape is None:
            self.shape = ZIPF_THETA if self.distribution == "zipfian" else POWERLAW_SHAPE

    def to_json(self):
        obj = {
            "records": self.records,
            "subset": self.subset,
            "distribution": self.distribution,
            "shape": self.shape,
            "mix": dict(self.mix),
            "scan_rows": self.scan_rows,
            "value_size": list(self.value_size) if isinstance(self.value_size, tuple)
                          else self.value_size,
            "threads": self.threads,
            "target_rate": self.target_rate,
            "key_prefix": self.key_prefix.decode("latin1"),
        }
        return obj

    @classmethod
    def from_json(cls, obj):
        value_size = obj.get("value_size", 1024)
        if isinstance(value_size, list):
            value_size = tuple(value_size)
        return cls(
            records=obj["records"],
            subset=obj.get("subset"),
            distribution=obj.get("distribution", "uniform"),
            shape=obj.get("shape"),
            mix=obj.get("mix", {"read": 1.0}),
            scan_rows=obj.get("scan_rows", 200),
            value_size=value_size,
            threads=obj.get("threads", 1),
            target_rate=obj.get("target_rate"),
            key_prefix=obj.get("key_prefix", "").encode("latin1"),
        )


def etc_mix(kind):
    """Operation mixes from the key-value trace ratios: RW reads:writes
    30:1, RWD reads:writes:deletes 30:1:15, normalized."""
    if kind == "RW":
        return {"read": 30 / 31, "write": 1 / 31}
    if kind == "RWD":
        return {"read": 30 / 46, "write": 1 / 46, "delete": 15 / 46}
    raise ValueError(f"unknown mix kind {kind!r}")


def key_for(spec, index):
    # 20+ byte keys keep the first-16 and last-16 routing slices distinct.
    return spec.key_prefix + b"user%016d" % index


class Op(NamedTuple):
    op: str
    key: bytes
    size: int      # value bytes for writes; 0 when unknown until served
    rows: int      # scan row count, 0 otherwise
    seq: int


class OpStream:
    """Deterministic chunked op generator for one tenant."""

    def __init__(self, spec, seed):
        self.spec = spec
        self._rng = np.random.default_rng(seed)
        self._cum = self._rank_weights()
        self._ops = sorted(spec.mix)
        self._probs = np.array([spec.mix[o] for o in self._ops])
        self._probs = self._probs / self._probs.sum()
        self._buffer = []
        self._pos = 0
        self._seq = 0

    def _rank_weights(self):
        if self.spec.distribution == "uniform":
            return None
        ranks = np.arange(1, self.spec.subset + 1, dtype=np.float64)
        weights = ranks ** (-self.spec.shape)
        return np.cumsum(weights)

    def _fill(self):
        spec = self.spec
        rng = self._rng
        ops = rng.choice(len(self._ops), CHUNK, p=self._probs)
        if self._cum is None:
            idx = rng.integers(0, spec.subset, CHUNK)
        else:
            u = rng.random(CHUNK) * self._cum[-1]
            idx = np.searchsorted(self._cum, u, side="right")
        if isinstance(spec.value_size, tuple):
            sizes = rng.integers(spec.value_size[0], spec.value_size[1] + 1, CHUNK)
        else:
            sizes = np.full(CHUNK, spec.value_size)
        self._buffer = (ops, idx, sizes)
        self._pos = 0

    def next_op(self):
        if not self._buffer or self._pos >= CHUNK:
            self._fill()
        ops, idx, sizes = self._buffer
        i = self._pos
        self._pos += 1
        name = self._ops[ops[i]]
        op = Op(
            op=name,
            key=key_for(self.spec, int(idx[i])),
            size=int(sizes[i]) if name == "write" else 0,
            rows=self.spec.scan_rows if name == "scan" else 0,
            seq=self._seq,
        )
        self._seq += 1
        return op


def gen_stream(spec, seed, count):
    """The first `count` ops of the tenant's deterministic trace."""
    stream = OpStream(spec, seed)
    return [stream.next_op() for _ in range(count)]


def export_trace(ops, path, tenant=""):
    """Newline-delimited trace records {op, key, size, tenant, seq}."""
    import json
    with open(path, "w") as f:
        for op in ops:
            f.write(json.dumps({
                "op": op.op,
                "key": op.key.decode("latin1"),
                "size": op.size,
                "tenant": tenant,
                "seq": op.seq,
            }) + "\n")


class Event(NamedTuple):
    tenant: str
    t: float            # completion time, seconds from run start
    latency: float
    nbytes: int
    op: str
    ok: bool = True
    cache_hit: bool = False


def quantile(sorted_latencies, q):
    """Nearest-rank quantile over an ascending list."""
    if not sorted_latencies:
        return 0.0
    rank = max(1, math.ceil(q * len(sorted_latencies)))
    return sorted_latencies[rank - 1]


@dataclass
class MetricsReport:
    per_tenant: Dict[str, dict]
    window: float
    valid: bool
    j: Optional[float] = None
    e: Optional[float] = None
    d: Optional[float] = None
    minmax: Optional[float] = None
    minmax_zero: bool = False
    cache_occupancy: Dict[str, float] = field(default_factory=dict)
    scheduled_share: Dict[str, float] = field(default_factory=dict)

    def to_json(self):
        return {
            "per_tenant": self.per_tenant,
            "window": self.window,
            "valid": self.valid,
            "j_index": self.j,
            "efficiency": self.e,
            "d_score": self.d,
            "minmax_ratio": self.minmax,
            "minmax_zero": self.minmax_zero,
            "cache_occupancy": self.cache_occupancy,
            "scheduled_share": self.scheduled_share,
        }


def measure(events, ramp_up=0.0, duration=None, baselines=None, alpha=0.5,
            cache_occupancy=None, scheduled_share=None):
    """Aggregate completion events into a MetricsReport.

    Events before the ramp-up cut are discarded. The measurement window
    is ramp-up to `duration` when given, otherwise to the last event.
    """
    kept = [ev for ev in events if ev.t >= ramp_up and ev.ok]
    if not kept:
        return MetricsReport({}, 0.0, valid=False)
    end = duration if duration is not None else max(ev.t for ev in kept)
    window = max(end - ramp_up, 1e-9)

    tenants = sorted({ev.tenant for ev in kept})
    per_tenant = {}
    for tenant in tenants:
        mine = [ev for ev in kept if ev.tenant == tenant]
        lats = sorted(ev.latency for ev in mine)
        stats = {
            "ops": len(mine),
            "throughput": len(mine) / window,
            "bytes": sum(ev.nbytes for ev in mine),
            "p50": quantile(lats, 0.50),
            "p95": quantile(lats, 0.95),
            "p99": quantile(lats, 0.99),
        }
        if baselines and tenant in baselines:
            stats["violation"] = planner.violation(baselines[tenant],
                                                   stats["throughput"])
        per_tenant[tenant] = stats

    report = MetricsReport(per_tenant, window, valid=True,
                           cache_occupancy=dict(cache_occupancy or {}),
                           scheduled_share=dict(scheduled_share or {}))
    ratio = scheduler.minmax_ratio([per_tenant[t]["throughput"] for t in tenants])
    report.minmax, report.minmax_zero = ratio.ratio, ratio.has_zero
    if baselines and all("violation" in per_tenant[t] for t in tenants):
        v = [per_tenant[t]["violation"] for t in tenants]
        report.j = planner.j_index(v)
        report.e = planner.efficiency(v)
        report.d = planner.d_score(report.j, report.e, alpha)
    return report
