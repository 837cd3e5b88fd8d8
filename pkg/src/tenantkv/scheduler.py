"""Multi-tenant request admission.

Deficit round robin over per-tenant credit accounts (1 credit = 1 byte
delivered, scaled by m): a round visits tenants in order and admits
requests while m * credits covers the tenant's estimated request size,
debiting estimate / m per admission. Completions refund the estimate
error (full estimate for cache hits). Accounts refill either when every
account runs dry (max-min LP assignment) or periodically with elastic
boosts.

A weighted-fair-queuing baseline tags requests with virtual start/finish
times (S = max(v(t), F_prev), F = S + L * r) and serves the smallest
finish tag. Long scans are split into fixed-size pieces so short reads
interleave with them.
"""

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

DEFAULT_ESTIMATE = 1024
WINDOW_SIZE = 10


class FeedbackWindow:
    """Ring of the last completed request sizes; mean feeds estimation."""

    def __init__(self, size=WINDOW_SIZE):
        self._ring = deque(maxlen=size)

    def push(self, nbytes):
        self._ring.append(float(nbytes))

    def mean(self):
        if not self._ring:
            return None
        return sum(self._ring) / len(self._ring)

    def __len__(self):
        return len(self._ring)


def estimate(window, default=DEFAULT_ESTIMATE):
    """Estimated bytes of the tenant's next request."""
    mean = window.mean() if window is not None else None
    return default if mean is None else mean


@dataclass
class CreditAccount:
    tenant: str
    credits: float = 0.0
    weight: float = 1.0
    consumed: float = 0.0        # net bytes since the last refill
    m: float = 1.0               # credits-to-bytes scalar

    def can_admit(self, est):
        return self.m * self.credits >= est

    def debit(self, est):
        self.credits -= est / self.m
        self.consumed += est


def normalize_weights(accounts):
    total = sum(a.weight for a in accounts.values())
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    for a in accounts.values():
        a.weight /= total


def drr_round(queues, accounts, estimator):
    """One deficit-round-robin pass; returns admitted (tenant, item) pairs.

    Visits tenants in queue order; per tenant, admits while the account
    covers the estimate and the queue is non-empty.
    """
    admitted = []
    for tenant, queue in queues.items():
        account = accounts[tenant]
        est = estimator(tenant)
        while queue and account.can_admit(est):
            admitted.append((tenant, queue.popleft()))
            account.debit(est)
    return admitted


def refund(account, est, actual, served_from_cache):
    """Completion-time correction: full estimate back on a cache hit,
    otherwise the (possibly negative) overestimate."""
    amount = est if served_from_cache else est - actual
    account.credits += amount / account.m
    account.consumed -= amount


@dataclass
class RefillProblem:
    """Max-min credit assignment instance.

    maximize u  s.t.  b_i + m_i * x_i >= u * w_i,  sum(x) = M,  x >= 0.
    """

    b: Sequence[float]
    m: Sequence[float]
    w: Sequence[float]
    M: float

    def __post_init__(self):
        n = len(self.b)
        if not (len(self.m) == len(self.w) == n):
            raise ValueError("b, m, w must have equal length")
        if self.M < 0:
            raise ValueError("total credits must be non-negative")
        if any(mi <= 0 for mi in self.m):
            raise ValueError("m scalars must be positive")
        if any(wi < 0 for wi in self.w) or sum(self.w) <= 0:
            raise ValueError("weights must be non-negative and sum > 0")

    @property
    def n(self):
        return len(self.b)


def lp_refill(problem):
    """Exact solution of the max-min refill: returns (x, u).

    Water-filling on the levels u_i = b_i / w_i: raise u until the credits
    needed, sum(max(0, (u * w_i - b_i) / m_i)), spend exactly M.
    """
    n = problem.n
    x = [0.0] * n
    if problem.M == 0:
        u = min(problem.b[i] / problem.w[i]
                for i in range(n) if problem.w[i] > 0)
        return x, u

    active = sorted((i for i in range(n) if problem.w[i] > 0),
                    key=lambda i: problem.b[i] / problem.w[i])
    rate = 0.0          # sum of w_i / m_i over started terms
    base = 0.0          # sum of b_i / m_i over started terms
    u = None
    for i in active:
        bp = problem.b[i] / problem.w[i]
        if rate > 0 and rate * bp - base >= problem.M:
            u = (problem.M + base) / rate
            break
        rate += problem.w[i] / problem.m[i]
        base += problem.b[i] / problem.m[i]
    if u is None:
        u = (problem.M + base) / rate

    for i in range(n):
        if problem.w[i] > 0:
            x[i] = max(0.0, (u * problem.w[i] - problem.b[i]) / problem.m[i])
    # Land exactly on the simplex despite float rounding.
    drift = problem.M - sum(x)
    x[max(range(n), key=lambda i: x[i])] += drift
    return x, u


def refill_all_dry(accounts, queue_sizes, estimator, total_credits):
    """LP refill once every account is dry or inactive; returns the
    assignment or None when the trigger has not fired.

    Dry means the account cannot cover its next estimated request;
    inactive (empty queue) counts as dry so an idle tenant cannot stall
    refills forever.
    """
    for tenant, account in accounts.items():
        if queue_sizes.get(tenant, 0) > 0 and account.can_admit(estimator(tenant)):
            return None
    order = list(accounts)
    problem = RefillProblem(
        b=[accounts[t].consumed for t in order],
        m=[accounts[t].m for t in order],
        w=[accounts[t].weight for t in order],
        M=total_credits,
    )
    x, _ = lp_refill(problem)
    for tenant, credits in zip(order, x):
        accounts[tenant].credits = credits
        accounts[tenant].consumed = 0.0
    return dict(zip(order, x))


def refill_periodic(accounts, base_allocation, adjusted=None):
    """Periodic refill: base allocations plus elastic boosts.

    Busy tenants receive their (possibly boosted) adjusted allocation;
    slow tenants retain their nominal base so they can recover.
    """
    for tenant, account in accounts.items():
        base = base_allocation[tenant]
        adj = adjusted.get(tenant, base) if adjusted else base
        account.credits = base if adj < base else adj
        account.consumed = 0.0


class WfqState:
    """Virtual-time tagging state; pick() serves the smallest finish tag."""

    def __init__(self, rates=None):
        self.v = 0.0
        self.rates = dict(rates or {})
        self.last_finish: Dict[str, float] = {}
        self._heap = []
        self._seq = 0

    def tag(self, tenant, size, item=None):
        """Tag one request and enqueue it; returns (S, F)."""
        rate = self.rates.get(tenant, 1.0)
        start = max(self.v, self.last_finish.get(tenant, 0.0))
        finish = start + size * rate
        self.last_finish[tenant] = finish
        heapq.heappush(self._heap, (finish, self._seq, start, tenant, item))
        self._seq += 1
        return start, finish

    def pick(self):
        """Pop the globally minimal finish tag; advances the virtual clock
        to the admitted request's start tag."""
        if not self._heap:
            return None
        finish, _, start, tenant, item = heapq.heappop(self._heap)
        self.v = max(self.v, start)
        return tenant, item, start, finish

    def __len__(self):
        return len(self._heap)


class ScanFailed(RuntimeError):
    pass


class ScanPiece(NamedTuple):
    index: int
    rows: int


def split_scan(rows, piece_size):
    """Ceil-split a scan into independently schedulable pieces."""
    if piece_size < 1:
        raise ValueError("piece size must be >= 1")
    if rows < 0:
        raise ValueError("row count must be >= 0")
    pieces = []
    for index in range(math.ceil(rows / piece_size)):
        take = min(piece_size, rows - index * piece_size)
        pieces.append(ScanPiece(index, take))
    return pieces


def merge_pieces(results):
    """Reassemble piece results (index, payload) in scan order.

    A None payload marks a failed piece and fails the whole scan.
    """
    ordered = sorted(results, key=lambda r: r[0])
    payloads = []
    for index, payload in ordered:
        if payload is None:
            raise ScanFailed(f"piece {index} failed")
        payloads.append(payload)
    if payloads and isinstance(payloads[0], (bytes, bytearray)):
        return b"".join(payloads)
    merged = []
    for p in payloads:
        merged.extend(p)
    return merged


class LocalWeights(NamedTuple):
    node_weights: List[List[float]]    # [node][tenant]
    node_budgets: List[float]


def local_weight_adjust(weights, threads, total_credits):
    """Redistribute per-node weights from per-node thread counts.

    Tenant i's system credits total * W_i are spread over nodes in
    proportion to its thread placement; node weights renormalize the
    per-node credits. Tenants with zero threads everywhere are withheld
    and the initial weights renormalized for this round.
    """
    n = len(weights)
    if n == 0 or any(len(row) != len(threads[0]) for row in threads):
        raise ValueError("threads must be a tenant x node matrix")
    m = len(threads[0])
    row_sums = [sum(row) for row in threads]
    active = [i for i in range(n) if row_sums[i] > 0]
    if not active:
        raise ValueError("no tenant has any threads")
    wsum = sum(weights[i] for i in active)
    credit = [0.0] * n
    for i in active:
        credit[i] = total_credits * weights[i] / wsum

    per_node = [[0.0] * n for _ in range(m)]
    for i in active:
        for j in range(m):
            per_node[j][i] = credit[i] * threads[i][j] / row_sums[i]

    budgets = [sum(per_node[j]) for j in range(m)]
    node_weights = []
    for j in range(m):
        if budgets[j] > 0:
            node_weights.append([per_node[j][i] / budgets[j] for i in range(n)])
        else:
            node_weights.append([0.0] * n)
    return LocalWeights(node_weights, budgets)


class MinMaxRatio(NamedTuple):
    ratio: float
    has_zero: bool


def minmax_ratio(throughputs):
    """min/max throughput; zero throughput is flagged and reports 0."""
    values = list(throughputs)
    if not values:
        raise ValueError("no throughputs")
    if any(v <= 0 for v in values):
        return MinMaxRatio(0.0, True)
    return MinMaxRatio(min(values) / max(values), False)
