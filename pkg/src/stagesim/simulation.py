"""Deterministic discrete-event simulation core.

One simulation owns all of its state and is a pure function of its config
(seed included): identical configs produce byte-identical reports and
traces.  Events are processed in ascending (time, scheduling sequence)
order; between consecutive events every engine's decode progress advances
under a constant batch composition, so completion times are exact.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .engines import EngineState, InFlightCall, PendingCall, tool_service_time
from .errors import ConfigError, InternalInvariantViolation
from .rng import RngStream
from .scheduling import (
    AdmissionConfig,
    AutoscaleConfig,
    BorrowConfig,
    BorrowPoolView,
    NEVER_SCALED,
    ServiceEstimator,
    admission_decision,
    autoscale_tick,
    route_call,
    route_call_with_eviction,
    select_next,
    should_return_borrowed,
    try_borrow,
)
from .workflow import (
    LLM,
    SUCCESS,
    RequestState,
    StageSpec,
    ValidatedWorkflow,
    expected_remaining_work,
    next_step,
)
from .workloads import Topology, derive_service_estimates

EVENT_ARRIVAL = "arrival"
EVENT_PREFILL_DONE = "prefill_done"
EVENT_CALL_COMPLETE = "call_complete"
EVENT_TOOL_COMPLETE = "tool_complete"
EVENT_AUTOSCALE_TICK = "autoscale_tick"
EVENT_BORROW_CHECK = "borrow_check"

_KV_TOL = 1e-6


class EmptySamples(ValueError):
    pass


def percentile(samples: list[float], q: float) -> float:
    """Nearest-rank percentile: the value at 1-based index ceil(q/100 * n)."""
    if not samples:
        raise EmptySamples("cannot take a percentile of zero samples")
    if not 0.0 < q <= 100.0:
        raise ValueError("q must be in (0, 100]")
    ordered = sorted(samples)
    rank = math.ceil(q / 100.0 * len(ordered))
    return ordered[max(rank, 1) - 1]


def sample_interarrival(stream: RngStream, rate: float) -> float:
    """Exponential interarrival gap via inverse CDF, -ln(u)/rate."""
    if rate <= 0:
        raise ValueError("arrival rate must be positive")
    return -math.log(stream.uniform()) / rate


@dataclass(frozen=True)
class Event:
    time: float
    seq: int
    kind: str
    engine_id: int = -1
    request_id: int = -1
    epoch: int = -1


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "slack"  # fcfs | las | slack
    use_selectivity: bool = False
    online_estimates: bool = False
    ewma_alpha: float = 0.2
    service_estimates: dict[str, float] | None = None
    admission: AdmissionConfig = field(default_factory=AdmissionConfig)
    borrow: BorrowConfig = field(default_factory=BorrowConfig)
    autoscale: AutoscaleConfig = field(default_factory=AutoscaleConfig)


@dataclass(frozen=True)
class SimConfig:
    workflow: ValidatedWorkflow
    topology: Topology
    policy: PolicyConfig
    arrival_rate: float
    duration: float
    warmup: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.arrival_rate <= 0:
            raise ConfigError("arrival rate must be positive")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.duration < self.warmup:
            raise ConfigError("duration must be >= warmup")
        if self.policy.kind not in ("fcfs", "las", "slack"):
            raise ConfigError(f"unknown policy kind '{self.policy.kind}'")


@dataclass(frozen=True)
class KvSample:
    time: float
    pool: str
    engine_id: int
    kv_used: float
    resident_prefix_tokens: int


@dataclass(frozen=True)
class DispatchRecord:
    time: float
    pool: str
    request_id: int
    slack: float
    expected_service: float
    engine: str  # engine id for LLM pools, empty for tool slots
    stage_id: str
    queue_delay: float
    key: tuple[float, ...]
    best_waiting_key: tuple[float, ...] | None


@dataclass(frozen=True)
class RequestRecord:
    request_id: int
    arrival: float
    done: float
    outcome: str
    latency: float
    violated_slo: bool
    retries_used: int
    n_stage_calls: int


@dataclass
class TraceBundle:
    kv_samples: list[KvSample] = field(default_factory=list)
    dispatches: list[DispatchRecord] = field(default_factory=list)
    requests: list[RequestRecord] = field(default_factory=list)


@dataclass
class AuditLog:
    borrows: list[tuple[float, int, str, str]] = field(default_factory=list)
    returns: list[tuple[float, int, str]] = field(default_factory=list)
    scale_events: list[tuple[float, str, int]] = field(default_factory=list)
    lent_admissions: int = 0


@dataclass(frozen=True)
class MetricsReport:
    arrivals_admitted: int
    completed: int
    failed_budget: int
    rejected: int
    in_flight_at_end: int
    latency_p50: float
    latency_p95: float
    latency_p99: float
    throughput: float
    slo_violation_rate: float
    queue_delay_mean: dict[str, float]
    kv_used_mean: dict[str, float]
    max_queue_len: dict[str, int]
    end_queue_len: dict[str, int]
    seed: int
    duration: float
    warmup: float
    arrival_rate: float

    def to_dict(self) -> dict:
        def r9(x: float) -> float:
            return round(x, 9)

        return {
            "arrivals_admitted": self.arrivals_admitted,
            "completed": self.completed,
            "failed_budget": self.failed_budget,
            "rejected": self.rejected,
            "in_flight_at_end": self.in_flight_at_end,
            "latency_p50": r9(self.latency_p50),
            "latency_p95": r9(self.latency_p95),
            "latency_p99": r9(self.latency_p99),
            "throughput": r9(self.throughput),
            "slo_violation_rate": r9(self.slo_violation_rate),
            "queue_delay_mean": {k: r9(v) for k, v in sorted(self.queue_delay_mean.items())},
            "kv_used_mean": {k: r9(v) for k, v in sorted(self.kv_used_mean.items())},
            "max_queue_len": dict(sorted(self.max_queue_len.items())),
            "end_queue_len": dict(sorted(self.end_queue_len.items())),
            "seed": self.seed,
            "duration": r9(self.duration),
            "warmup": r9(self.warmup),
            "arrival_rate": r9(self.arrival_rate),
        }

    def summary_line(self) -> str:
        return (
            f"completed={self.completed} failed_budget={self.failed_budget} "
            f"rejected={self.rejected} in_flight={self.in_flight_at_end} "
            f"throughput={self.throughput:.6f}/s p50={self.latency_p50:.6f}s "
            f"p95={self.latency_p95:.6f}s p99={self.latency_p99:.6f}s "
            f"slo_violation_rate={self.slo_violation_rate:.6f}"
        )


SCALAR_METRICS = (
    "arrivals_admitted",
    "completed",
    "failed_budget",
    "rejected",
    "in_flight_at_end",
    "latency_p50",
    "latency_p95",
    "latency_p99",
    "throughput",
    "slo_violation_rate",
)


@dataclass
class RunResult:
    report: MetricsReport
    traces: TraceBundle
    audit: AuditLog


@dataclass
class RequestSim:
    state: RequestState
    attained: float = 0.0
    enqueue_time: float = 0.0
    dispatch_time: float = 0.0
    n_stage_calls: int = 0
    done_time: float | None = None
    terminal: str | None = None


class PoolRuntime:
    """Mutable per-pool simulation state: queue, slots, and window stats."""

    def __init__(self, spec) -> None:
        self.spec = spec
        self.pool_id = spec.pool_id
        self.queue: list[PendingCall] = []
        self.concurrency = spec.tool_params.concurrency if spec.tool_params else 0
        self.busy_slots = 0
        # utilization window (shared by the borrower and the autoscaler)
        self.busy_integral = 0.0
        self.capacity_integral = 0.0
        self.prev_utilization = 0.0
        # autoscale window
        self.window_dispatches = 0
        self.window_delay_violations = 0
        self.last_scale_time = NEVER_SCALED
        # whole-run metrics
        self.max_queue_len = 0
        self.delay_sum = 0.0
        self.delay_count = 0

    def utilization(self) -> float:
        if self.capacity_integral > 0.0:
            return min(1.0, self.busy_integral / self.capacity_integral)
        return self.prev_utilization

    def reset_window(self) -> None:
        self.prev_utilization = self.utilization()
        self.busy_integral = 0.0
        self.capacity_integral = 0.0
        self.window_dispatches = 0
        self.window_delay_violations = 0

    def violation_fraction(self) -> float:
        if self.window_dispatches == 0:
            return 0.0
        return self.window_delay_violations / self.window_dispatches


class Simulator:
    """Event loop around the workflow, engine, and scheduling models."""

    def __init__(self, config: SimConfig) -> None:
        config.validate()
        self.cfg = config
        self.vw = config.workflow
        self.policy = config.policy
        self.clock = 0.0
        self._seq = 0
        self._heap: list[tuple[float, int, Event]] = []
        self._streams: dict[str, RngStream] = {}
        self._arrivals = RngStream(config.seed, "arrivals")

        self.pools: dict[str, PoolRuntime] = {}
        self.stage_pool: dict[str, str] = {}
        self.engines: dict[int, EngineState] = {}
        self.retired_engines: dict[int, EngineState] = {}
        self._next_engine_id = 0
        self._kv_integral: dict[int, float] = {}
        self._last_kv_sample: dict[int, tuple[str, float, int]] = {}
        for spec in config.topology.pools:
            pool = PoolRuntime(spec)
            self.pools[spec.pool_id] = pool
            for sid in spec.stage_ids:
                if sid in self.stage_pool:
                    raise ConfigError(f"stage '{sid}' assigned to two pools")
                self.stage_pool[sid] = spec.pool_id
            if spec.kind == LLM:
                for _ in range(spec.n_engines):
                    self._add_engine(spec.pool_id, spec.engine_params)
        for sid in self.vw.stage_ids:
            if sid not in self.stage_pool:
                raise ConfigError(f"stage '{sid}' has no pool in the topology")

        means = config.policy.service_estimates or derive_service_estimates(
            self.vw, config.topology
        )
        missing = [sid for sid in self.vw.stage_ids if sid not in means]
        if missing:
            raise ConfigError(f"service estimates missing stages {missing}")
        self.estimator = ServiceEstimator(
            means, online=config.policy.online_estimates, alpha=config.policy.ewma_alpha
        )
        self._work_table: dict[tuple[str, int], float] = {}
        self._work_version = -1

        self.requests: dict[int, RequestSim] = {}
        self._next_rid = 0
        self.rejected_times: list[float] = []
        self.traces = TraceBundle()
        self.audit = AuditLog()

        self._handlers = {
            EVENT_ARRIVAL: self._handle_arrival,
            EVENT_PREFILL_DONE: self._handle_prefill_done,
            EVENT_CALL_COMPLETE: self._handle_call_complete,
            EVENT_TOOL_COMPLETE: self._handle_tool_complete,
            EVENT_AUTOSCALE_TICK: self._handle_autoscale_tick,
            EVENT_BORROW_CHECK: self._handle_borrow_check,
        }

    # ------------------------------------------------------------------
    # plumbing

    def _add_engine(self, pool_id: str, params) -> EngineState:
        engine = EngineState(self._next_engine_id, params, pool_id)
        engine.last_advance = self.clock
        self.engines[engine.engine_id] = engine
        self._kv_integral[engine.engine_id] = 0.0
        self._next_engine_id += 1
        return engine

    def _schedule(self, time: float, kind: str, **refs) -> None:
        if time < self.clock - 1e-12:
            raise InternalInvariantViolation(
                f"event '{kind}' scheduled at {time} before clock {self.clock}"
            )
        self._seq += 1
        ev = Event(time=time, seq=self._seq, kind=kind, **refs)
        heapq.heappush(self._heap, (time, self._seq, ev))

    def _stream(self, label: str) -> RngStream:
        stream = self._streams.get(label)
        if stream is None:
            stream = RngStream(self.cfg.seed, label)
            self._streams[label] = stream
        return stream

    def _draw(self, label: str) -> float:
        return self._stream(label).uniform()

    def _serving_engines(self, pool_id: str) -> list[EngineState]:
        return [
            self.engines[eid]
            for eid in sorted(self.engines)
            if self.engines[eid].serving_pool == pool_id
        ]

    def _home_engines(self, pool_id: str) -> list[EngineState]:
        return [
            self.engines[eid]
            for eid in sorted(self.engines)
            if self.engines[eid].home_pool == pool_id
        ]

    def _remaining_table(self) -> dict[tuple[str, int], float]:
        if self._work_version != self.estimator.version:
            estimates = self.estimator.estimates()
            table: dict[tuple[str, int], float] = {}
            budget = self.vw.retry_budget
            for sid in self.vw.stage_ids:
                for retries in range(budget + 1):
                    state = RequestState(-1, 0.0, 0.0, sid, retries)
                    table[(sid, retries)] = expected_remaining_work(state, self.vw, estimates)
            self._work_table = table
            self._work_version = self.estimator.version
        return self._work_table

    # ------------------------------------------------------------------
    # clock advancement and accounting

    def _advance_clock(self, to_time: float) -> None:
        dt = to_time - self.clock
        if dt < -1e-12:
            raise InternalInvariantViolation("event clock moved backwards")
        if dt <= 0.0:
            self.clock = to_time
            return
        for pool in self.pools.values():
            busy, cap = self._pool_busy_capacity(pool)
            pool.busy_integral += busy * dt
            pool.capacity_integral += cap * dt
        for eid in sorted(self.engines):
            engine = self.engines[eid]
            t0 = engine.last_advance
            kv0 = engine.kv_used
            engine.advance_decode(to_time)
            self._accumulate_kv(eid, t0, to_time, kv0, engine.kv_used)
        self.clock = to_time

    def _pool_busy_capacity(self, pool: PoolRuntime) -> tuple[int, int]:
        if pool.spec.kind == LLM:
            engines = self._serving_engines(pool.pool_id)
            return sum(1 for e in engines if e.batch), len(engines)
        return pool.busy_slots, pool.concurrency

    def _accumulate_kv(self, eid: int, t0: float, t1: float, kv0: float, kv1: float) -> None:
        start = max(t0, self.cfg.warmup)
        if start >= t1:
            return
        if t1 > t0:
            kv_start = kv0 + (kv1 - kv0) * (start - t0) / (t1 - t0)
        else:
            kv_start = kv0
        self._kv_integral[eid] += 0.5 * (kv_start + kv1) * (t1 - start)

    def _emit_kv_samples(self, force: bool = False) -> None:
        for eid in sorted(self.engines):
            engine = self.engines[eid]
            current = (engine.serving_pool, engine.kv_used, engine.resident_prefix_tokens())
            if force or self._last_kv_sample.get(eid) != current:
                self._last_kv_sample[eid] = current
                self.traces.kv_samples.append(
                    KvSample(self.clock, current[0], eid, current[1], current[2])
                )

    def _check_invariants(self) -> None:
        for eid in sorted(self.engines):
            e = self.engines[eid]
            cap = e.params.kv_capacity_tokens
            if e.kv_reserved > cap:
                raise InternalInvariantViolation(
                    f"engine {eid}: reserved {e.kv_reserved} exceeds capacity {cap}"
                )
            if e.kv_used > cap + _KV_TOL or e.kv_used < -_KV_TOL:
                raise InternalInvariantViolation(
                    f"engine {eid}: kv_used {e.kv_used} outside [0, {cap}]"
                )
            if abs(e.kv_used - e.recomputed_kv_used()) > _KV_TOL:
                raise InternalInvariantViolation(
                    f"engine {eid}: kv_used {e.kv_used} != recomputed {e.recomputed_kv_used()}"
                )
            if e.kv_reserved != e.recomputed_kv_reserved():
                raise InternalInvariantViolation(
                    f"engine {eid}: kv_reserved {e.kv_reserved} != recomputed"
                )
            if len(e.batch) > e.params.max_batch:
                raise InternalInvariantViolation(f"engine {eid}: batch over max_batch")
            pool = self.pools[e.serving_pool]
            if len(pool.spec.stage_ids) == 1:
                allowed = pool.spec.stage_ids[0]
                for call in e.batch:
                    if call.stage_id != allowed:
                        raise InternalInvariantViolation(
                            f"engine {eid}: call of stage '{call.stage_id}' in "
                            f"single-stage pool '{pool.pool_id}'"
                        )

    # ------------------------------------------------------------------
    # event handlers

    def _handle_arrival(self, ev: Event) -> None:
        rid = self._next_rid
        self._next_rid += 1
        gap = sample_interarrival(self._arrivals, self.cfg.arrival_rate)
        t_next = ev.time + gap
        if t_next <= self.cfg.duration:
            self._schedule(t_next, EVENT_ARRIVAL)

        queue_lengths = [len(p.queue) for p in self.pools.values()]
        if not admission_decision(queue_lengths, self.policy.admission):
            self.rejected_times.append(ev.time)
            return
        state = RequestState(
            request_id=rid,
            arrival_time=ev.time,
            deadline=ev.time + self.vw.slo_seconds,
            current_stage=self.vw.entry_stage,
        )
        self.requests[rid] = RequestSim(state=state)
        self._enter_stage(self.requests[rid])

    def _enter_stage(self, req: RequestSim) -> None:
        sid = req.state.current_stage
        stage = self.vw.stage(sid)
        rid = req.state.request_id
        if stage.kind == LLM:
            prompt = stage.prompt_tokens_dist.sample_int(self._draw(f"req:{rid}:prompt:{sid}"))
            output = stage.output_tokens_dist.sample_int(self._draw(f"req:{rid}:output:{sid}"))
            call = PendingCall(rid, sid, self.clock, prompt, output)
        else:
            call = PendingCall(rid, sid, self.clock)
        pool = self.pools[self.stage_pool[sid]]
        pool.queue.append(call)
        pool.max_queue_len = max(pool.max_queue_len, len(pool.queue))
        req.enqueue_time = self.clock

    def _handle_prefill_done(self, ev: Event) -> None:
        engine = self.engines[ev.engine_id]
        call = self._find_call(engine, ev.request_id)
        engine.prefill_finished(call)
        self._reschedule_completion(engine)

    def _handle_call_complete(self, ev: Event) -> None:
        engine = self.engines.get(ev.engine_id)
        if engine is None or ev.epoch != engine.decode_epoch:
            return  # stale: batch composition changed since scheduling
        call = self._find_call(engine, ev.request_id)
        if call.remaining_tokens > _KV_TOL:
            raise InternalInvariantViolation(
                f"completion fired with {call.remaining_tokens} tokens left"
            )
        engine.complete_call(call)
        self._reschedule_completion(engine)
        if engine.lent_to is not None and not engine.batch:
            self._maybe_return(engine)
        self._finish_stage(self.requests[ev.request_id], call.stage_id)

    def _handle_tool_complete(self, ev: Event) -> None:
        req = self.requests[ev.request_id]
        sid = req.state.current_stage
        pool = self.pools[self.stage_pool[sid]]
        pool.busy_slots -= 1
        self._finish_stage(req, sid)

    def _find_call(self, engine: EngineState, request_id: int) -> InFlightCall:
        for call in engine.batch:
            if call.request_id == request_id:
                return call
        raise InternalInvariantViolation(
            f"request {request_id} not in engine {engine.engine_id} batch"
        )

    def _reschedule_completion(self, engine: EngineState) -> None:
        nxt = engine.next_completion(self.clock)
        if nxt is not None:
            call, when = nxt
            self._schedule(
                when,
                EVENT_CALL_COMPLETE,
                engine_id=engine.engine_id,
                request_id=call.request_id,
                epoch=engine.decode_epoch,
            )

    def _pick_outcome(self, stage: StageSpec, u: float) -> str:
        cum = 0.0
        chosen = None
        for out in stage.outcomes:
            if out.probability <= 0.0:
                continue
            chosen = out  # the last positive-mass outcome absorbs rounding residue
            cum += out.probability
            if u <= cum:
                break
        return chosen.label

    def _finish_stage(self, req: RequestSim, sid: str) -> None:
        rid = req.state.request_id
        start, end = req.dispatch_time, self.clock
        req.attained += end - start
        req.n_stage_calls += 1
        self.estimator.observe(sid, end - start)
        stage = self.vw.stage(sid)
        if len(stage.outcomes) == 1:
            label = stage.outcomes[0].label
        else:
            label = self._pick_outcome(stage, self._draw(f"req:{rid}:outcome:{sid}"))
        req.state.stage_history.append((sid, start, end, label))
        transition = next_step(req.state, label, self.vw)
        if transition.is_done:
            req.state.current_stage = transition.terminal
            req.done_time = end
            req.terminal = transition.terminal
            latency = end - req.state.arrival_time
            self.traces.requests.append(
                RequestRecord(
                    request_id=rid,
                    arrival=req.state.arrival_time,
                    done=end,
                    outcome=transition.terminal,
                    latency=latency,
                    violated_slo=latency > self.vw.slo_seconds,
                    retries_used=req.state.retries_used,
                    n_stage_calls=req.n_stage_calls,
                )
            )
        else:
            req.state.current_stage = transition.next_stage
            req.state.retries_used = transition.retries_used
            self._enter_stage(req)

    # ------------------------------------------------------------------
    # dispatch

    def _call_key(self, call: PendingCall, now: float) -> tuple[float, ...]:
        kind = self.policy.kind
        if kind == "fcfs":
            return (float(call.request_id),)
        req = self.requests[call.request_id]
        if kind == "las":
            return (req.attained, float(call.request_id))
        slack = self._slack(req, call.stage_id, now)
        service = self.estimator.estimate(call.stage_id)
        if self.policy.use_selectivity:
            return (slack, service, -self.vw.selectivity(call.stage_id), float(call.request_id))
        return (slack, service, float(call.request_id))

    def _slack(self, req: RequestSim, sid: str, now: float) -> float:
        table = self._remaining_table()
        return req.state.deadline - now - table[(sid, req.state.retries_used)]

    def _dispatch_all(self) -> None:
        for pool in self.pools.values():
            self._dispatch_pool(pool)

    def _dispatch_pool(self, pool: PoolRuntime) -> None:
        # Strictly in key order: if the most urgent call cannot be placed,
        # the whole queue waits (no overtaking).
        while pool.queue:
            now = self.clock
            call, key, best_waiting = select_next(pool.queue, lambda c: self._call_key(c, now))
            stage = self.vw.stage(call.stage_id)
            if pool.spec.kind == LLM:
                engines = self._serving_engines(pool.pool_id)
                placed = route_call(call, stage.prefix_tokens, engines)
                evictions: list[str] = []
                if placed is None:
                    with_evict = route_call_with_eviction(call, stage.prefix_tokens, engines)
                    if with_evict is None:
                        break
                    placed, evictions = with_evict
                for evict_sid in evictions:
                    placed.evict_idle_prefix(evict_sid)
                _, prefill_done = placed.admit(call, stage.prefix_tokens, now)
                if placed.lent_to is not None:
                    self.audit.lent_admissions += 1
                self._schedule(
                    prefill_done,
                    EVENT_PREFILL_DONE,
                    engine_id=placed.engine_id,
                    request_id=call.request_id,
                )
                engine_label = str(placed.engine_id)
            else:
                if pool.busy_slots >= pool.concurrency:
                    break
                pool.busy_slots += 1
                stream = self._stream(f"req:{call.request_id}:tool:{call.stage_id}")
                service = tool_service_time(pool.spec.tool_params, stream)
                self._schedule(now + service, EVENT_TOOL_COMPLETE, request_id=call.request_id)
                engine_label = ""
            pool.queue.remove(call)
            req = self.requests[call.request_id]
            req.dispatch_time = now
            delay = now - call.enqueue_time
            self.traces.dispatches.append(
                DispatchRecord(
                    time=now,
                    pool=pool.pool_id,
                    request_id=call.request_id,
                    slack=self._slack(req, call.stage_id, now),
                    expected_service=self.estimator.estimate(call.stage_id),
                    engine=engine_label,
                    stage_id=call.stage_id,
                    queue_delay=delay,
                    key=key,
                    best_waiting_key=best_waiting,
                )
            )
            pool.window_dispatches += 1
            if delay > self.policy.autoscale.queue_delay_slo:
                pool.window_delay_violations += 1
            if now >= self.cfg.warmup:
                pool.delay_sum += delay
                pool.delay_count += 1

    # ------------------------------------------------------------------
    # borrowing and autoscaling

    def _maybe_return(self, engine: EngineState) -> None:
        home_util = self.pools[engine.home_pool].utilization()
        borrower_util = self.pools[engine.lent_to].utilization()
        if should_return_borrowed(self.policy.borrow, not engine.batch, home_util, borrower_util):
            self.audit.returns.append((self.clock, engine.engine_id, engine.lent_to))
            engine.lent_to = None

    def _borrow_views(self) -> list[BorrowPoolView]:
        views = []
        for pool in self.pools.values():
            if pool.spec.kind != LLM or len(pool.spec.stage_ids) != 1:
                continue
            available = [
                e for e in self._home_engines(pool.pool_id) if e.lent_to is None
            ]
            # a pool never lends its last engine, lest it starve itself
            idle = tuple(
                (e.engine_id, e.free_kv())
                for e in available
                if not e.batch and len(available) > 1
            )
            views.append(
                BorrowPoolView(
                    pool_id=pool.pool_id,
                    utilization=pool.utilization(),
                    queue_len=len(pool.queue),
                    idle_engines=idle,
                    prefix_tokens=self.vw.stage(pool.spec.stage_ids[0]).prefix_tokens,
                )
            )
        return views

    def _handle_borrow_check(self, ev: Event) -> None:
        for eid in sorted(self.engines):
            engine = self.engines[eid]
            if engine.lent_to is not None and not engine.batch:
                self._maybe_return(engine)
        while True:
            action = try_borrow(self._borrow_views(), self.policy.borrow)
            if action is None:
                break
            engine_id, lender, borrower = action
            self.engines[engine_id].lent_to = borrower
            self.audit.borrows.append((self.clock, engine_id, lender, borrower))
        if not self.policy.autoscale.enabled:
            for pool in self.pools.values():
                pool.reset_window()
        t_next = ev.time + self.policy.autoscale.check_interval
        if t_next <= self.cfg.duration:
            self._schedule(t_next, EVENT_BORROW_CHECK)

    def _handle_autoscale_tick(self, ev: Event) -> None:
        cfg = self.policy.autoscale
        for pool in self.pools.values():
            decision = self._pool_scale_decision(pool, cfg)
            if decision:
                self._apply_scale(pool, decision)
                pool.last_scale_time = self.clock
                self.audit.scale_events.append((self.clock, pool.pool_id, decision))
            pool.reset_window()
        self._emit_kv_samples(force=True)
        t_next = ev.time + cfg.check_interval
        if t_next <= self.cfg.duration:
            self._schedule(t_next, EVENT_AUTOSCALE_TICK)

    def _pool_scale_decision(self, pool: PoolRuntime, cfg: AutoscaleConfig) -> int:
        if pool.spec.kind == LLM:
            home = self._home_engines(pool.pool_id)
            n = len(home)
            idle = any(e.lent_to is None and not e.batch for e in home)
        else:
            n = pool.concurrency
            idle = pool.busy_slots < pool.concurrency
        return autoscale_tick(
            cfg, self.clock, n, pool.violation_fraction(), idle, pool.last_scale_time
        )

    def _apply_scale(self, pool: PoolRuntime, decision: int) -> None:
        if pool.spec.kind == LLM:
            if decision > 0:
                self._add_engine(pool.pool_id, pool.spec.engine_params)  # cold start
            else:
                idle = [
                    e
                    for e in self._home_engines(pool.pool_id)
                    if e.lent_to is None and not e.batch
                ]
                victim = max(idle, key=lambda e: e.engine_id)
                self.retired_engines[victim.engine_id] = victim
                del self.engines[victim.engine_id]
                self._last_kv_sample.pop(victim.engine_id, None)
        else:
            pool.concurrency += decision

    # ------------------------------------------------------------------
    # run loop

    def run(self) -> RunResult:
        duration = self.cfg.duration
        first = sample_interarrival(self._arrivals, self.cfg.arrival_rate)
        if first <= duration:
            self._schedule(first, EVENT_ARRIVAL)
        interval = self.policy.autoscale.check_interval
        if self.policy.autoscale.enabled and interval <= duration:
            self._schedule(interval, EVENT_AUTOSCALE_TICK)
        if self.policy.borrow.enabled and interval <= duration:
            self._schedule(interval, EVENT_BORROW_CHECK)

        while self._heap and self._heap[0][0] <= duration:
            _, _, ev = heapq.heappop(self._heap)
            self._advance_clock(ev.time)
            self._handlers[ev.kind](ev)
            self._dispatch_all()
            self._check_invariants()
            self._emit_kv_samples()

        self._advance_clock(duration)
        self._emit_kv_samples(force=True)
        return RunResult(self._build_report(), self.traces, self.audit)

    def _build_report(self) -> MetricsReport:
        warmup = self.cfg.warmup
        duration = self.cfg.duration
        window = duration - warmup
        admitted = completed = failed = in_flight = violations = 0
        latencies: list[float] = []
        for rid in sorted(self.requests):
            req = self.requests[rid]
            if req.state.arrival_time < warmup:
                continue  # simulated, excluded from metrics
            admitted += 1
            if req.terminal is None:
                in_flight += 1
                continue
            latency = req.done_time - req.state.arrival_time
            if latency > self.vw.slo_seconds:
                violations += 1
            if req.terminal == SUCCESS:
                completed += 1
                latencies.append(latency)
            else:
                failed += 1
        rejected = sum(1 for t in self.rejected_times if t >= warmup)
        finished = completed + failed
        all_engines = {**self.retired_engines, **self.engines}
        return MetricsReport(
            arrivals_admitted=admitted,
            completed=completed,
            failed_budget=failed,
            rejected=rejected,
            in_flight_at_end=in_flight,
            latency_p50=percentile(latencies, 50) if latencies else 0.0,
            latency_p95=percentile(latencies, 95) if latencies else 0.0,
            latency_p99=percentile(latencies, 99) if latencies else 0.0,
            throughput=completed / window if window > 0 else 0.0,
            slo_violation_rate=violations / finished if finished else 0.0,
            queue_delay_mean={
                p.pool_id: (p.delay_sum / p.delay_count if p.delay_count else 0.0)
                for p in self.pools.values()
            },
            kv_used_mean={
                str(eid): (self._kv_integral[eid] / window if window > 0 else 0.0)
                for eid in sorted(all_engines)
            },
            max_queue_len={p.pool_id: p.max_queue_len for p in self.pools.values()},
            end_queue_len={p.pool_id: len(p.queue) for p in self.pools.values()},
            seed=self.cfg.seed,
            duration=duration,
            warmup=warmup,
            arrival_rate=self.cfg.arrival_rate,
        )


def run(config: SimConfig) -> RunResult:
    """Run one simulation to completion."""
    return Simulator(config).run()
