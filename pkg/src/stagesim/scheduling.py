"""Stage-local scheduling decisions.

Covers the dispatch ordering (deadline-slack priority keys), prefix
affinity routing with last-resort LRU eviction, workflow-level admission
control, idle-engine borrowing between pools, and per-pool autoscaling.
All functions here are pure decisions over explicit inputs; the event
loop applies their effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .engines import EngineState, PendingCall
from .workflow import RequestState, ValidatedWorkflow, expected_remaining_work


@dataclass(frozen=True)
class PriorityKey:
    """Dispatch ordering: ascending slack, then ascending expected service,
    then (when enabled) descending selectivity, then arrival order."""

    slack: float
    expected_stage_service: float
    arrival_seq: int
    selectivity: float | None = None

    def sort_key(self) -> tuple[float, ...]:
        if self.selectivity is None:
            return (self.slack, self.expected_stage_service, float(self.arrival_seq))
        return (
            self.slack,
            self.expected_stage_service,
            -self.selectivity,
            float(self.arrival_seq),
        )


@dataclass(frozen=True)
class AdmissionConfig:
    """Reject new workflows while any stage queue sits at or above the cap.

    In-flight work is never shed; rejection happens only at arrival.
    """

    enabled: bool = False
    max_queue_len: int = 100

    def __post_init__(self) -> None:
        if self.enabled and self.max_queue_len < 1:
            raise ValueError("max_queue_len must be >= 1 when admission is enabled")


@dataclass(frozen=True)
class BorrowConfig:
    enabled: bool = False
    util_low: float = 0.2
    util_high: float = 0.8
    min_free_kv_tokens: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.util_low < self.util_high <= 1.0:
            raise ValueError("borrow thresholds need 0 <= util_low < util_high <= 1")
        if self.min_free_kv_tokens < 0:
            raise ValueError("min_free_kv_tokens must be >= 0")


@dataclass(frozen=True)
class AutoscaleConfig:
    enabled: bool = False
    check_interval: float = 1.0
    queue_delay_slo: float = 1.0
    scale_out_threshold: float = 0.5
    scale_in_threshold: float = 0.1
    cooldown: float = 5.0
    min_engines: int = 1
    max_engines: int = 8

    def __post_init__(self) -> None:
        if self.check_interval <= 0:
            raise ValueError("check_interval must be positive")
        if not self.scale_in_threshold < self.scale_out_threshold:
            raise ValueError("scale_in_threshold must be below scale_out_threshold")
        if not 1 <= self.min_engines <= self.max_engines:
            raise ValueError("need 1 <= min_engines <= max_engines")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")


def compute_slack(
    req: RequestState, now: float, vw: ValidatedWorkflow, estimates: dict[str, float]
) -> float:
    """Deadline headroom after accounting for expected remaining work."""
    return req.deadline - now - expected_remaining_work(req, vw, estimates)


def make_priority_key(
    req: RequestState,
    now: float,
    vw: ValidatedWorkflow,
    estimates: dict[str, float],
    use_selectivity: bool = False,
) -> PriorityKey:
    return PriorityKey(
        slack=compute_slack(req, now, vw, estimates),
        expected_stage_service=estimates[req.current_stage],
        arrival_seq=req.request_id,
        selectivity=vw.selectivity(req.current_stage) if use_selectivity else None,
    )


def select_next(queue, key_fn):
    """Most urgent pending call under the given key function.

    Keys are recomputed at call time so urgency reflects queueing delay
    already incurred.  Returns (call, key, best_remaining_key) or None on
    an empty queue; the caller removes the call from the queue only after
    engine admission succeeds.
    """
    if not queue:
        return None
    keyed = sorted(((key_fn(call), call) for call in queue), key=lambda kc: kc[0])
    best_key, call = keyed[0]
    remaining = keyed[1][0] if len(keyed) > 1 else None
    return call, best_key, remaining


def route_call(
    call: PendingCall, prefix_tokens: int, engines: list[EngineState]
) -> EngineState | None:
    """Pick an engine for the call: prefix-warm engines first, then least
    KV used, then lowest engine id.  None when no engine can admit."""
    admissible = [e for e in engines if e.can_admit(call, prefix_tokens)]
    if not admissible:
        return None
    return min(
        admissible,
        key=lambda e: (call.stage_id not in e.resident, e.kv_used, e.engine_id),
    )


def route_call_with_eviction(
    call: PendingCall, prefix_tokens: int, engines: list[EngineState]
) -> tuple[EngineState, list[str]] | None:
    """Routing fallback: find an engine that could admit after evicting idle
    prefixes (least recently used first).  Returns the engine and the stage
    prefixes to evict, or None."""
    ordered = sorted(
        engines, key=lambda e: (call.stage_id not in e.resident, e.kv_used, e.engine_id)
    )
    for engine in ordered:
        if len(engine.batch) >= engine.params.max_batch:
            continue
        needed = engine.kv_demand(call, prefix_tokens) - engine.free_kv()
        if needed <= 0:
            return engine, []
        evictions: list[str] = []
        freed = 0
        for _, stage_id, tokens in engine.evictable_prefixes(call.stage_id):
            evictions.append(stage_id)
            freed += tokens
            if freed >= needed:
                return engine, evictions
    return None


def admission_decision(queue_lengths: list[int], cfg: AdmissionConfig) -> bool:
    """True to accept a new workflow arrival.

    A queue already at the cap rejects, so accepted arrivals can never push
    the entry queue past max_queue_len.
    """
    if not cfg.enabled:
        return True
    return all(q < cfg.max_queue_len for q in queue_lengths)


@dataclass(frozen=True)
class BorrowPoolView:
    """What the borrow decision needs to know about one pool."""

    pool_id: str
    utilization: float
    queue_len: int
    idle_engines: tuple[tuple[int, int], ...]  # (engine_id, free_kv_tokens)
    prefix_tokens: int  # prefix the pool's stage would plant on a lender


def try_borrow(
    views: list[BorrowPoolView], cfg: BorrowConfig
) -> tuple[int, str, str] | None:
    """Match the busiest starved pool with an idle engine elsewhere.

    Returns (engine_id, lender_pool, borrower_pool); None when no pairing
    clears the utilization hysteresis and free-memory guard.
    """
    if not cfg.enabled:
        return None
    borrowers = sorted(
        (v for v in views if v.utilization > cfg.util_high),
        key=lambda v: (-v.queue_len, v.pool_id),
    )
    lenders = sorted(
        (v for v in views if v.utilization < cfg.util_low and v.idle_engines),
        key=lambda v: (v.utilization, v.pool_id),
    )
    for borrower in borrowers:
        need = cfg.min_free_kv_tokens + borrower.prefix_tokens
        for lender in lenders:
            if lender.pool_id == borrower.pool_id:
                continue
            fitting = [eid for eid, free in lender.idle_engines if free >= need]
            if fitting:
                return min(fitting), lender.pool_id, borrower.pool_id
    return None


def should_return_borrowed(
    cfg: BorrowConfig, batch_empty: bool, home_util: float, borrower_util: float
) -> bool:
    """A lent engine goes home once its batch drains and either its home
    pool is starved or the borrower has cooled off."""
    if not batch_empty:
        return False
    return home_util > cfg.util_high or borrower_util < cfg.util_low


def autoscale_tick(
    cfg: AutoscaleConfig,
    now: float,
    n_engines: int,
    violation_fraction: float,
    idle_engine_available: bool,
    last_scale_time: float,
) -> int:
    """Per-pool scale decision: +1, -1, or 0."""
    if not cfg.enabled:
        return 0
    if now - last_scale_time < cfg.cooldown:
        return 0
    if violation_fraction > cfg.scale_out_threshold and n_engines < cfg.max_engines:
        return 1
    if (
        violation_fraction < cfg.scale_in_threshold
        and idle_engine_available
        and n_engines > cfg.min_engines
    ):
        return -1
    return 0


class ServiceEstimator:
    """Per-stage mean service-time estimates.

    Static config means by default; with online=True the estimates track an
    exponentially weighted mean of observed stage service times.
    """

    def __init__(self, means: dict[str, float], online: bool = False, alpha: float = 0.2) -> None:
        if not 0.0 < alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")
        self._means = dict(means)
        self.online = online
        self.alpha = alpha
        self.version = 0  # bumped on every update, for caching derived tables

    def estimates(self) -> dict[str, float]:
        return self._means

    def estimate(self, stage_id: str) -> float:
        return self._means[stage_id]

    def observe(self, stage_id: str, seconds: float) -> None:
        if not self.online:
            return
        prev = self._means[stage_id]
        self._means[stage_id] = self.alpha * seconds + (1.0 - self.alpha) * prev
        self.version += 1


NEVER_SCALED = -math.inf
