"""Workload generation determinism, distributions, mixes, and metrics."""

import json
import math

import numpy as np
import pytest

from tenantkv.workload import (Event, MetricsReport, Op, OpStream,
                               WorkloadSpec, etc_mix, gen_stream, key_for,
                               measure, quantile)


def spec_with(**kw):
    base = dict(records=1000, distribution="uniform", mix={"read": 1.0})
    base.update(kw)
    return WorkloadSpec(**base)


# -- spec validation -----------------------------------------------------------


def test_mix_must_sum_to_one():
    with pytest.raises(ValueError, match="sum"):
        spec_with(mix={"read": 0.5, "write": 0.2})


def test_subset_bounded_by_records():
    with pytest.raises(ValueError):
        spec_with(subset=2000)


def test_unknown_distribution_rejected():
    with pytest.raises(ValueError):
        spec_with(distribution="gaussian")


def test_spec_json_round_trip():
    spec = spec_with(distribution="zipfian", subset=100,
                     value_size=(100, 1200), mix=etc_mix("RW"))
    again = WorkloadSpec.from_json(json.loads(json.dumps(spec.to_json())))
    assert again == spec


# -- determinism ------------------------------------------------------------------


def test_same_seed_identical_traces():
    spec = spec_with(distribution="zipfian", subset=50,
                     mix={"read": 0.8, "write": 0.2}, value_size=(10, 99))
    assert gen_stream(spec, 42, 5000) == gen_stream(spec, 42, 5000)


def test_different_seed_differs():
    spec = spec_with()
    assert gen_stream(spec, 1, 1000) != gen_stream(spec, 2, 1000)


def test_trace_stable_across_chunk_boundaries():
    spec = spec_with()
    long = gen_stream(spec, 9, 10_000)
    short = gen_stream(spec, 9, 100)
    assert long[:100] == short


# -- distributions -----------------------------------------------------------------


def test_uniform_frequencies_within_binomial_bound():
    spec = spec_with(records=1000)
    ops = gen_stream(spec, 7, 100_000)
    counts = {}
    for op in ops:
        counts[op.key] = counts.get(op.key, 0) + 1
    expected = 100_000 / 1000
    sigma = math.sqrt(100_000 * (1 / 1000) * (1 - 1 / 1000))
    for key, count in counts.items():
        assert abs(count - expected) <= 5 * sigma


def test_zipfian_stays_inside_subset():
    spec = spec_with(records=80_000, subset=200, distribution="zipfian")
    ops = gen_stream(spec, 3, 20_000)
    subset_keys = {key_for(spec, i) for i in range(200)}
    inside = sum(op.key in subset_keys for op in ops)
    assert inside / len(ops) >= 0.99


def test_zipfian_skews_to_head():
    spec = spec_with(records=10_000, subset=1000, distribution="zipfian")
    ops = gen_stream(spec, 11, 100_000)
    head = {key_for(spec, i) for i in range(100)}     # top 10% of the subset
    hits = sum(op.key in head for op in ops)
    assert hits / len(ops) >= 0.5


def test_powerlaw_tail_exponent_close_to_shape():
    # Log-log regression of head-rank frequencies recovers the exponent.
    spec = spec_with(records=100_000, subset=100_000, distribution="powerlaw",
                     shape=3.2)
    stream = OpStream(spec, 13)
    rank_counts = {}
    for _ in range(1_000_000):
        key = stream.next_op().key
        rank_counts[key] = rank_counts.get(key, 0) + 1
    ranks = np.arange(1, 21)
    freqs = np.array([rank_counts.get(key_for(spec, r - 1), 0) for r in ranks])
    assert (freqs > 0).all()
    slope, _ = np.polyfit(np.log(ranks), np.log(freqs), 1)
    assert abs(-slope - 3.2) <= 0.3


# -- mixes -------------------------------------------------------------------------


def test_etc_mix_rw():
    mix = etc_mix("RW")
    assert mix["read"] == pytest.approx(30 / 31)
    assert mix["write"] == pytest.approx(1 / 31)
    assert sum(mix.values()) == pytest.approx(1.0)


def test_etc_mix_rwd():
    mix = etc_mix("RWD")
    assert mix["read"] == pytest.approx(30 / 46)
    assert mix["write"] == pytest.approx(1 / 46)
    assert mix["delete"] == pytest.approx(15 / 46)
    assert sum(mix.values()) == pytest.approx(1.0)


def test_mix_frequencies_follow_weights():
    spec = spec_with(mix=etc_mix("RWD"))
    ops = gen_stream(spec, 5, 46_000)
    reads = sum(op.op == "read" for op in ops)
    deletes = sum(op.op == "delete" for op in ops)
    assert abs(reads - 30_000) < 1200
    assert abs(deletes - 15_000) < 1000


def test_scan_ops_carry_rows():
    spec = spec_with(mix={"scan": 1.0}, scan_rows=200)
    [op] = gen_stream(spec, 1, 1)
    assert op.op == "scan" and op.rows == 200


# -- measurement --------------------------------------------------------------------


def test_throughput_from_event_counts():
    events = [Event("t1", t=10 + i * 0.01, latency=0.001, nbytes=10, op="read")
              for i in range(1000)]
    report = measure(events, ramp_up=10, duration=20)
    assert report.per_tenant["t1"]["ops"] == 1000
    assert report.per_tenant["t1"]["throughput"] == pytest.approx(100.0)


def test_equal_tenants_minmax_one():
    events = []
    for tenant in ("a", "b"):
        events += [Event(tenant, t=1 + i * 0.001, latency=0.01, nbytes=1, op="read")
                   for i in range(500)]
    report = measure(events, ramp_up=1, duration=2)
    assert report.minmax == pytest.approx(1.0)


def test_quantiles_match_sort_oracle():
    rng = np.random.default_rng(3)
    lats = rng.uniform(0.001, 0.2, size=977)
    events = [Event("t", t=1 + i * 1e-4, latency=float(l), nbytes=1, op="read")
              for i, l in enumerate(lats)]
    report = measure(events, ramp_up=0, duration=2)
    ordered = sorted(lats)
    for q, field in ((0.50, "p50"), (0.95, "p95"), (0.99, "p99")):
        rank = max(1, math.ceil(q * len(ordered)))
        assert report.per_tenant["t"][field] == pytest.approx(ordered[rank - 1])


def test_empty_post_ramp_window_flagged_invalid():
    events = [Event("t", t=0.5, latency=0.01, nbytes=1, op="read")]
    report = measure(events, ramp_up=10)
    assert not report.valid


def test_violation_and_scores_with_baselines():
    events = []
    for tenant, rate in (("fast", 100), ("slow", 50)):
        events += [Event(tenant, t=1 + i / rate, latency=0.01, nbytes=1, op="read")
                   for i in range(rate * 9)]
    report = measure(events, ramp_up=1, duration=10,
                     baselines={"fast": 100.0, "slow": 100.0})
    assert report.per_tenant["slow"]["violation"] == pytest.approx(0.5, abs=0.05)
    assert report.j is not None and report.d is not None
    assert json.dumps(report.to_json())
