"""tenantkv: daemon-free multi-tenant key-value store over a shared
directory, with fair request scheduling and a benchmark CLI."""

from ._kernels import IMPL as KERNEL_IMPL
from .catalog import Catalog, TreeConfig, TreeIndex, route, route_path
from .compaction import CompactionManager, CompactionTask
from .engine import EVENTUAL, STRONG, StoreHandle, TenantCache
from .records import Record
from .segments import BloomFilter, SegmentMeta, SegmentReader, WriteSegment
from .workload import WorkloadSpec, etc_mix, gen_stream

__version__ = "0.1.0"

__all__ = [
    "BloomFilter",
    "Catalog",
    "CompactionManager",
    "CompactionTask",
    "EVENTUAL",
    "KERNEL_IMPL",
    "Record",
    "STRONG",
    "SegmentMeta",
    "SegmentReader",
    "StoreHandle",
    "TenantCache",
    "TreeConfig",
    "TreeIndex",
    "WorkloadSpec",
    "WriteSegment",
    "etc_mix",
    "gen_stream",
    "route",
    "route_path",
]
