"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line. Run with `pytest tests/test_acceptance.py -v -s`; budget about 40
minutes for the full set (the fairness runs alone are three 3-minute
experiments).
"""

import itertools
import json
import math
import multiprocessing
import os
import random
import shutil
import statistics
import threading
import time

import numpy as np
import pytest

from tenantkv import planner as planner_mod
from tenantkv import scheduler as sched
from tenantkv.bench.harness import Experiment, ExperimentConfig
from tenantkv.catalog import Catalog, TreeConfig
from tenantkv.compaction import CompactionManager
from tenantkv.engine import STRONG, StoreHandle
from tenantkv.segments import BloomFilter
from tenantkv.workload import WorkloadSpec, key_for

pytestmark = pytest.mark.acceptance


def verdict(cid, ok, detail):
    print(f"\nACCEPTANCE {cid} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, f"{cid}: {detail}"


# ---------------------------------------------------------------- fairness --


def fairness_config(root, policy, tenants, duration, ramp, out=None, **over):
    cfg = {
        "tenants": tenants,
        "duration_s": duration,
        "ramp_up_s": ramp,
        "seed": 424242,
        "store": {"root": root, "cache_budget": 4 << 20,
                  "flush_threshold": 4 << 20},
        "service": {"workers": 150, "disk_bytes_per_sec": 4_000_000},
        "scheduler": {"policy": policy, "total_credits": 8_000_000},
    }
    for key, value in over.items():
        cfg[key] = value
    if out:
        cfg["out"] = out
    return ExperimentConfig.from_json(cfg)


def uniform_tenant(tid, threads, records=50_000, value=600):
    return {"id": tid, "workload": {"records": records, "distribution": "uniform",
                                    "mix": {"read": 1.0}, "threads": threads,
                                    "value_size": value}}


@pytest.fixture(scope="module")
def f1_setup(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("f1") / "store")
    tenants = [uniform_tenant("t50", 50), uniform_tenant("t200", 200)]
    # Dedicated (solo) run of the shared workload establishes the baseline.
    solo = fairness_config(root, "none", [uniform_tenant("t50", 50)],
                           duration=22, ramp=6)
    report = Experiment(solo).run()
    baseline = report.per_tenant["t50"]["throughput"]
    assert baseline > 0
    return root, tenants, baseline


def run_f1_policy(f1_setup, policy):
    root, tenants, baseline = f1_setup
    cfg = fairness_config(root, policy, [dict(t) for t in tenants],
                          duration=180, ramp=20)
    for t in cfg.tenants:
        t.baseline = baseline
    report = Experiment(cfg).run()
    assert report.valid
    return report


@pytest.fixture(scope="module")
def f1_reports(f1_setup):
    return {policy: run_f1_policy(f1_setup, policy)
            for policy in ("none", "wfq", "drr_lp")}


def test_f1_scheduler_fairness_contrast(f1_reports):
    j = {policy: report.j for policy, report in f1_reports.items()}
    ok = (j["none"] <= 0.85 and j["drr_lp"] >= 0.95
          and j["none"] <= j["wfq"] <= j["drr_lp"])
    verdict("F1", ok,
            f"J none={j['none']:.3f} (<=0.85), wfq={j['wfq']:.3f} (between), "
            f"drr={j['drr_lp']:.3f} (>=0.95)")


def test_f2_weighted_share(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("f2") / "store")
    tenants = []
    for tid, weight in (("a", 0.5), ("b", 0.333), ("c", 0.167)):
        t = uniform_tenant(tid, 150, records=20_000)
        t["weight"] = weight
        tenants.append(t)
    cfg = fairness_config(root, "drr_lp", tenants, duration=100, ramp=15,
                          service={"workers": 200,
                                   "disk_bytes_per_sec": 4_000_000})
    exp = Experiment(cfg)
    report = exp.run()
    bytes_by_tenant = {t: report.per_tenant[t]["bytes"] for t in ("a", "b", "c")}
    total = sum(bytes_by_tenant.values())
    expected = {"a": 0.5 / 1.0, "b": 0.333 / 1.0, "c": 0.167 / 1.0}
    details = []
    ok = True
    for tenant, want in expected.items():
        got = bytes_by_tenant[tenant] / total
        err = abs(got - want) / want
        details.append(f"{tenant}={got:.3f} vs {want:.3f} ({err * 100:.1f}%)")
        ok = ok and err <= 0.15
    verdict("F2", ok, "byte shares " + ", ".join(details))


def integral_refill_instance(rng):
    """Random LP instance constructed so the continuous optimum sits on the
    integer grid the oracle searches."""
    n = rng.randint(1, 4)
    M = rng.randint(1, 20)
    weights = [rng.randint(1, 5) for _ in range(n)]
    wsum = sum(weights)
    w = [v / wsum for v in weights]
    m = [rng.choice([1, 2]) for _ in range(n)]
    x_star = [0] * n
    for _ in range(M):
        x_star[rng.randrange(n)] += 1
    active = [i for i in range(n) if x_star[i] > 0]
    u = max(m[i] * x_star[i] / w[i] for i in active) + rng.randint(0, 5)
    b = []
    for i in range(n):
        if x_star[i] > 0:
            b.append(u * w[i] - m[i] * x_star[i])
        else:
            b.append(u * w[i] + rng.randint(0, 10))
    return sched.RefillProblem(b=b, m=m, w=w, M=M)


def grid_search(problem):
    n = problem.n
    best = -math.inf
    M = int(problem.M)
    for combo in itertools.product(range(M + 1), repeat=n - 1):
        rest = M - sum(combo)
        if rest < 0:
            continue
        x = list(combo) + [rest]
        best = max(best, min((problem.b[i] + problem.m[i] * x[i]) / problem.w[i]
                             for i in range(n)))
    return best


def test_f3_lp_oracle_equivalence():
    rng = random.Random(20260810)
    worst = 0.0
    for _ in range(500):
        problem = integral_refill_instance(rng)
        _, u = sched.lp_refill(problem)
        worst = max(worst, abs(u - grid_search(problem)))
    verdict("F3", worst <= 1e-6,
            f"max |lp - grid| = {worst:.2e} over 500 instances (n<=4, M<=20)")


def scan_tenant(tid, threads=20):
    return {"id": tid, "weight": 1.0,
            "workload": {"records": 1, "distribution": "uniform",
                         "mix": {"scan": 1.0}, "scan_rows": 200,
                         "threads": threads, "value_size": 100}}


def test_f4_scan_protection(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("f4") / "store")
    readers = [dict(uniform_tenant(t, 50, records=20_000), weight=3.0)
               for t in ("r1", "r2")]

    def reader_mean(policy_cfg):
        report = Experiment(policy_cfg).run()
        return statistics.mean(report.per_tenant[t]["throughput"]
                               for t in ("r1", "r2"))

    base_cfg = fairness_config(root, "drr_lp", [dict(t) for t in readers],
                               duration=90, ramp=15)
    baseline = reader_mean(base_cfg)

    mixed = [dict(t) for t in readers] + [scan_tenant("scan")]
    split_cfg = fairness_config(root, "drr_lp", [dict(t) for t in mixed],
                                duration=90, ramp=15)
    split_cfg.scheduler.split_scans = True
    with_split = reader_mean(split_cfg)

    nosplit_cfg = fairness_config(root, "drr_lp", [dict(t) for t in mixed],
                                  duration=90, ramp=15)
    nosplit_cfg.scheduler.split_scans = False
    without = reader_mean(nosplit_cfg)

    ok = with_split >= 0.8 * baseline and with_split >= 1.5 * without
    verdict("F4", ok,
            f"readers split={with_split:.0f} ops/s vs baseline={baseline:.0f} "
            f"(>={0.8 * baseline:.0f}) and nosplit={without:.0f} "
            f"(needs >={1.5 * without:.0f})")


# --------------------------------------------------------------- compaction --


def ingest_concurrent(root, strategy, n_ops, key_space, seed, writers=4,
                      value_size=100, flush_threshold=192 * 1024):
    """Zipfian updates from concurrent writer threads; returns the spec used
    for key naming."""
    spec = WorkloadSpec(records=key_space, distribution="zipfian",
                        mix={"read": 1.0})
    ranks = np.arange(1, key_space + 1, dtype=np.float64)
    cum = np.cumsum(ranks ** -0.99)

    def writer(widx):
        rng = np.random.default_rng(seed + widx)
        h = StoreHandle(root, writer_id=f"w{widx}", strategy=strategy,
                        flush_threshold=flush_threshold, cache_budget=0)
        count = n_ops // writers
        draws = rng.random(count) * cum[-1]
        idxs = np.searchsorted(cum, draws, side="right")
        for i in range(count):
            h.put(key_for(spec, int(idxs[i])), b"\x42" * value_size)
        h.close()

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(writers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return spec, cum


def mean_segments_consulted(root, spec, cum, seed, samples=2000):
    h = StoreHandle(root, writer_id="probe", cache_budget=0,
                    refresh_interval_ms=100)
    h.refresh()
    rng = np.random.default_rng(seed)
    draws = rng.random(samples) * cum[-1]
    idxs = np.searchsorted(cum, draws, side="right")
    consulted = []
    found = 0
    for idx in idxs:
        value, info = h.get_with_info(key_for(spec, int(idx)))
        consulted.append(info.segments_consulted)
        found += value is not None
    h.close()
    assert found == samples
    return statistics.mean(consulted)


@pytest.fixture(scope="module")
def c1_stores(tmp_path_factory):
    stores = {}
    for strategy in ("tree", "size"):
        root = str(tmp_path_factory.mktemp(f"c1-{strategy}") / "store")
        spec, cum = ingest_concurrent(root, strategy, n_ops=200_000,
                                      key_space=40_000, seed=77)
        mgr = CompactionManager(root, workers=3,
                                size_threshold=48 if strategy == "size" else None)
        mgr.quiesce()
        mgr.close()
        stores[strategy] = (root, spec, cum)
    return stores


def test_c1_compaction_contrast(c1_stores):
    means = {}
    for strategy, (root, spec, cum) in c1_stores.items():
        means[strategy] = mean_segments_consulted(root, spec, cum, seed=5)
    ok = means["tree"] <= 2.0 and means["size"] >= 3 * means["tree"]
    verdict("C1", ok,
            f"segments consulted per read: tree={means['tree']:.2f} (<=2.0), "
            f"size={means['size']:.2f} (>= {3 * means['tree']:.2f})")


def test_c2_store_correctness(tmp_path_factory):
    base = tmp_path_factory.mktemp("c2")
    resurrections = 0
    for seed in range(100):
        root = str(base / f"s{seed}")
        rng = random.Random(seed)
        handles = [StoreHandle(root, writer_id=f"w{i}", flush_threshold=2048,
                               cache_budget=0, refresh_interval_ms=50)
                   for i in range(2)]
        mgr = CompactionManager(root, workers=2, inline=True)
        model = {}
        deleted = set()
        for step in range(1000):
            r = rng.random()
            h = handles[rng.randrange(2)]
            key = b"user%016d" % rng.randrange(120)
            if r < 0.70:
                value = b"v%07d" % step
                h.put(key, value)
                model[key] = value
                deleted.discard(key)
            elif r < 0.85:
                h.delete(key)
                model[key] = None
                deleted.add(key)
            elif r < 0.95:
                h.flush()
            else:
                mgr.cycle()
        for h in handles:
            h.close()
        mgr.quiesce()
        mgr.close()
        reader = StoreHandle(root, writer_id="rdr", cache_budget=0)
        reader.refresh()
        for key, expect in model.items():
            got = reader.get(key)
            assert got == expect, (seed, key, got, expect)
            if key in deleted and got is not None:
                resurrections += 1
        reader.close()
        shutil.rmtree(root)
    verdict("C2", resurrections == 0,
            "100 seeded interleavings (1000 ops each) match the reference "
            f"map; {resurrections} tombstone resurrections")


def test_c3_capacity_and_config(c1_stores):
    cap = TreeConfig(2, 4, 3).capacity()
    root, _, _ = c1_stores["tree"]
    count = Catalog(root).load().segment_count()
    ok = cap == 48 and count <= cap
    verdict("C3", ok, f"capacity(2,4,3)={cap} (==48); post-quiescence "
            f"segment count {count} <= {cap}")


def _c4_writer(root, ready, flushed):
    h = StoreHandle(root, writer_id="remote", refresh_interval_ms=100)
    h.put(b"pre-flush-key", b"early")
    ready.set()                       # visible to strong reads from here
    flushed.wait(10)                  # parent saw it; now flush
    h.put(b"post-flush-key", b"late")
    h.flush()
    h.close()


def test_c4_consistency(tmp_path_factory):
    # Read-your-writes across random op sequences.
    for seed in range(30):
        root = str(tmp_path_factory.mktemp("c4ryw"))
        rng = random.Random(seed)
        h = StoreHandle(root, writer_id="w", flush_threshold=1024,
                        cache_budget=1 << 20)
        model = {}
        for step in range(300):
            key = b"k%03d" % rng.randrange(40)
            action = rng.random()
            if action < 0.6:
                value = b"v%05d" % step
                h.put(key, value)
                model[key] = value
            elif action < 0.8:
                h.delete(key)
                model[key] = None
            else:
                h.flush()
            assert h.get(key) == model[key]
        h.close()

    # Cross-process visibility: eventual within flush + 2x refresh interval,
    # strong before the flush.
    root = str(tmp_path_factory.mktemp("c4proc") / "store")
    Catalog(root)
    interval_ms = 400
    reader = StoreHandle(root, writer_id="local",
                         refresh_interval_ms=interval_ms)
    ready = multiprocessing.Event()
    flushed = multiprocessing.Event()
    proc = multiprocessing.Process(target=_c4_writer,
                                   args=(root, ready, flushed))
    proc.start()
    assert ready.wait(10)
    strong_sees = reader.get(b"pre-flush-key", mode=STRONG) == b"early"
    eventual_blind = reader.get(b"pre-flush-key") is None
    flush_signalled = time.monotonic()
    flushed.set()
    proc.join(15)
    flush_done = time.monotonic()     # upper bound on flush completion
    deadline = flush_done + 2 * interval_ms / 1000.0
    visible_at = None
    while time.monotonic() < deadline + 0.5:
        if reader.get(b"post-flush-key") == b"late":
            visible_at = time.monotonic()
            break
        time.sleep(0.02)
    reader.close()
    within_bound = visible_at is not None and visible_at <= deadline
    ok = strong_sees and eventual_blind and within_bound
    verdict("C4", ok,
            f"read-your-writes held over 30 sequences; strong-before-flush="
            f"{strong_sees}, eventual-blind-before-flush={eventual_blind}, "
            f"visible {0 if visible_at is None else visible_at - flush_done:.2f}s "
            f"after flush (bound {2 * interval_ms / 1000.0:.1f}s)")


def test_c5_bloom_filter():
    keys = [b"present-%08d" % i for i in range(100_000)]
    filt = BloomFilter.build(keys, target_fp=0.01)
    false_negatives = sum(not filt.query(k) for k in keys)
    false_positives = sum(filt.query(b"absent-%08d" % i) for i in range(100_000))
    rate = false_positives / 100_000
    ok = false_negatives == 0 and rate <= 0.02
    verdict("C5", ok, f"false negatives={false_negatives}, "
            f"FP rate={rate:.4f} (target 0.01, bound 0.02)")


# ------------------------------------------------------------------- planner --


def synthetic_model(rng):
    from test_planner import make_profile
    cc, ch = rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)
    cross = rng.uniform(0.0, 0.3)
    profile = make_profile(
        lambda c, h: 1000 * (cc * c + ch * h + cross * c * h),
        ratio=rng.random())
    return planner_mod.fit(profile)


def test_p1_planner_optimality():
    from test_planner import exhaustive_two_tenant_optimum
    rng = random.Random(31337)
    worst = 1.0
    for trial in range(50):
        models = [synthetic_model(rng), synthetic_model(rng)]
        baselines = [m.predict(1.0, 1.0) for m in models]
        plan = planner_mod.hill_climb(models, baselines, seed=trial)
        best = exhaustive_two_tenant_optimum(models, baselines)
        worst = min(worst, plan.objective / best)
    verdict("P1", worst >= 0.95,
            f"hill-climb D >= {worst:.4f} x exhaustive optimum over 50 pairs")


def test_p2_workload_aware_allocation():
    from test_planner import make_profile
    cache_bound = planner_mod.fit(make_profile(lambda c, h: 1000 * c, ratio=0.9))
    disk_bound = planner_mod.fit(make_profile(lambda c, h: 1000 * h, ratio=0.0))
    plan = planner_mod.hill_climb([cache_bound, disk_bound],
                                  [1000.0, 1000.0], seed=3)
    (c1, d1), (c2, d2) = plan.allocations
    ok = c1 >= 0.80 and d2 >= 0.80
    verdict("P2", ok, f"cache-sensitive tenant got {c1:.2f} cache (>=0.80), "
            f"disk-sensitive got {d2:.2f} disk (>=0.80)")


def test_p3_elastic_reservation():
    base = {"slow": 600.0, "busy": 600.0}
    expected = {"slow": 100.0, "busy": 100.0}
    actual = {"slow": 50.0, "busy": 100.0}       # slow runs at 50%
    accounts = {t: sched.CreditAccount(t, weight=0.5) for t in base}

    boosts = []
    for _ in range(2):                           # two refill periods
        adjusted = planner_mod.elastic_redistribute(expected, actual, base)
        sched.refill_periodic(accounts, base, adjusted)
        boosts.append(accounts["busy"].credits - base["busy"])

    conserved = sum(adjusted.values()) == sum(base.values())
    exact = (abs(boosts[-1] - 0.5 * base["slow"]) < 1e-9
             and accounts["slow"].credits == base["slow"])
    verdict("P3", conserved and exact,
            f"busy boost={boosts[-1]:.1f} == 50% of slow base "
            f"({0.5 * base['slow']:.1f}); slow retains nominal; ledger "
            f"conserved={conserved}")


def test_p4_metric_identities():
    rng = random.Random(4)
    worst = 0.0
    for _ in range(1000):
        n = rng.randint(1, 8)
        v = [rng.random() for _ in range(n)]
        total, squares = sum(v), sum(x * x for x in v)
        j_oracle = total * total / (n * squares) if squares else 1.0
        e_oracle = 1 - total / n
        alpha = rng.random()
        worst = max(worst,
                    abs(planner_mod.j_index(v) - j_oracle),
                    abs(planner_mod.efficiency(v) - e_oracle),
                    abs(planner_mod.d_score(planner_mod.j_index(v),
                                            planner_mod.efficiency(v), alpha)
                        - (alpha * j_oracle + (1 - alpha) * e_oracle)))
    verdict("P4", worst <= 1e-12,
            f"max metric deviation {worst:.2e} over 1000 vectors")


# -------------------------------------------------------------------- speedup --


def test_s1_parallel_compaction_speedup(tmp_path_factory):
    base = tmp_path_factory.mktemp("s1")
    source = str(base / "ingest")
    ingest_concurrent(source, "tree", n_ops=500_000, key_space=100_000,
                      seed=99, flush_threshold=256 * 1024)
    timings = {}
    for workers in (1, 3):
        root = str(base / f"run{workers}")
        shutil.copytree(source, root)
        mgr = CompactionManager(root, workers=workers)
        t0 = time.monotonic()
        mgr.quiesce()
        timings[workers] = time.monotonic() - t0
        mgr.close()
        shutil.rmtree(root)
    ratio = timings[3] / timings[1]
    verdict("S1", ratio <= 0.6,
            f"3-worker wall {timings[3]:.1f}s vs 1-worker {timings[1]:.1f}s "
            f"(ratio {ratio:.2f} <= 0.6)")


# ------------------------------------------------- run-op example (planner on) --


def test_x1_planner_on_improves_d_score(tmp_path_factory):
    """Bench-cli run example: paired runs, D(planner on) >= D(planner off)."""
    base = tmp_path_factory.mktemp("x1")
    root = str(base / "store")
    hot = {"id": "hot", "workload": {"records": 20_000, "subset": 2_500,
                                     "distribution": "zipfian",
                                     "mix": {"read": 1.0}, "threads": 50,
                                     "value_size": 600}}
    uni = uniform_tenant("uni", 50, records=20_000)

    profiles = []
    for label, ratio, fn in (
            ("exhot", 0.9, lambda c, h: 1000 * (0.85 * c + 0.15 * h)),
            ("uniform", 0.0, lambda c, h: 1000 * (0.05 * c + 0.95 * h))):
        from test_planner import make_profile
        profile = make_profile(fn, label=label, ratio=ratio)
        path = str(base / f"{label}.json")
        with open(path, "w") as f:
            json.dump(profile.to_json(), f)
        profiles.append(path)

    def solo_baseline(tenant):
        cfg = fairness_config(root, "drr_periodic", [dict(tenant)],
                              duration=25, ramp=8)
        return Experiment(cfg).run().per_tenant[tenant["id"]]["throughput"]

    baselines = {"hot": solo_baseline(hot), "uni": solo_baseline(uni)}

    def paired_run(enabled):
        tenants = [dict(hot), dict(uni)]
        for t in tenants:
            t["baseline"] = baselines[t["id"]]
        cfg = fairness_config(root, "drr_periodic", tenants, duration=60,
                              ramp=25)
        cfg.planner.enabled = enabled
        cfg.planner.profiles = profiles if enabled else []
        cfg.planner.interval_s = 8.0
        return Experiment(cfg).run()

    d_off = paired_run(False).d
    d_on = paired_run(True).d
    verdict("X1 (run-op example)", d_on >= d_off - 0.02,
            f"D-score planner on={d_on:.3f} vs off={d_off:.3f}")
