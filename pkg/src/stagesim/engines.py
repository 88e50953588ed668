"""Engine and tool-executor state machines.

An engine's KV budget is consumed by resident stage prefixes plus each
in-flight call's prompt and generated tokens.  Admission reserves the
worst case (prompt + full target output, plus the prefix if cold) so
actual usage can never overrun capacity mid-decode; the traced
kv_used_tokens tracks actual usage, which grows one token per emitted
token and is released when the call completes.

Decoding is continuous-batching style: all decode-phase calls on an
engine share the batch, and per-token latency grows linearly with batch
size, t(b) = t0 * (1 + alpha * (b - 1)).  Prefill is a non-batched linear
cost and does not count toward the decode batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .dists import Distribution
from .rng import RngStream

PREFILL = "prefill"
DECODE = "decode"


class AdmitWithoutCapacity(RuntimeError):
    """admit() was called although can_admit() is false (programming error)."""


class PrefixInUse(RuntimeError):
    """Attempted to evict a stage prefix while its calls are in flight."""


@dataclass(frozen=True)
class EngineParams:
    kv_capacity_tokens: int
    prefill_rate: float  # tokens / second
    base_token_time: float  # seconds per token at batch size 1
    batch_slope: float  # marginal per-token slowdown per extra batch mate
    max_batch: int

    def __post_init__(self) -> None:
        if self.kv_capacity_tokens <= 0:
            raise ValueError("kv_capacity_tokens must be positive")
        if self.prefill_rate <= 0:
            raise ValueError("prefill_rate must be positive")
        if self.base_token_time <= 0:
            raise ValueError("base_token_time must be positive")
        if self.batch_slope < 0:
            raise ValueError("batch_slope must be >= 0")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")

    def token_time(self, batch_size: int) -> float:
        """Per-token seconds at the given decode batch size."""
        return self.base_token_time * (1.0 + self.batch_slope * (batch_size - 1))


@dataclass(frozen=True)
class ToolPoolParams:
    concurrency: int
    service_time_dist: Distribution

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError("tool concurrency must be >= 1")


@dataclass
class PendingCall:
    """A stage call waiting in a pool queue."""

    request_id: int
    stage_id: str
    enqueue_time: float
    prompt_tokens: int = 0
    target_output_tokens: int = 0


@dataclass
class InFlightCall:
    request_id: int
    stage_id: str
    prompt_tokens: int
    target_output_tokens: int
    tokens_emitted: float = 0.0
    phase: str = PREFILL

    @property
    def remaining_tokens(self) -> float:
        return self.target_output_tokens - self.tokens_emitted


@dataclass
class ResidentPrefix:
    tokens: int
    last_used: float


class EngineState:
    """One engine: resident prefixes, an active batch, and KV accounting."""

    def __init__(self, engine_id: int, params: EngineParams, home_pool: str) -> None:
        self.engine_id = engine_id
        self.params = params
        self.home_pool = home_pool
        self.lent_to: str | None = None
        self.resident: dict[str, ResidentPrefix] = {}
        self.batch: list[InFlightCall] = []
        self.kv_used = 0.0  # actual: prefixes + prompts + emitted tokens
        self.kv_reserved = 0  # worst case: prefixes + prompts + full targets
        self.decode_epoch = 0  # bumped on every decode-batch composition change
        self.last_advance = 0.0

    @property
    def serving_pool(self) -> str:
        return self.lent_to if self.lent_to is not None else self.home_pool

    def resident_prefix_tokens(self) -> int:
        return sum(p.tokens for p in self.resident.values())

    def decode_batch_size(self) -> int:
        return sum(1 for c in self.batch if c.phase == DECODE)

    def free_kv(self) -> int:
        return self.params.kv_capacity_tokens - self.kv_reserved

    def kv_demand(self, call: PendingCall, prefix_tokens: int) -> int:
        """Worst-case KV the call needs: prompt + target output, plus the
        stage prefix when it is not already resident."""
        demand = call.prompt_tokens + call.target_output_tokens
        if call.stage_id not in self.resident:
            demand += prefix_tokens
        return demand

    def can_admit(self, call: PendingCall, prefix_tokens: int) -> bool:
        if len(self.batch) >= self.params.max_batch:
            return False
        return self.kv_reserved + self.kv_demand(call, prefix_tokens) <= self.params.kv_capacity_tokens

    def admit(self, call: PendingCall, prefix_tokens: int, now: float) -> tuple[InFlightCall, float]:
        """Admit a call; returns the in-flight record and its prefill-done time."""
        if not self.can_admit(call, prefix_tokens):
            raise AdmitWithoutCapacity(
                f"engine {self.engine_id} cannot admit request {call.request_id} stage {call.stage_id}"
            )
        cold_tokens = 0
        if call.stage_id in self.resident:
            self.resident[call.stage_id].last_used = now
        else:
            cold_tokens = prefix_tokens
            self.resident[call.stage_id] = ResidentPrefix(prefix_tokens, now)
            self.kv_used += prefix_tokens
            self.kv_reserved += prefix_tokens
        inflight = InFlightCall(
            request_id=call.request_id,
            stage_id=call.stage_id,
            prompt_tokens=call.prompt_tokens,
            target_output_tokens=call.target_output_tokens,
        )
        self.batch.append(inflight)
        self.kv_used += call.prompt_tokens
        self.kv_reserved += call.prompt_tokens + call.target_output_tokens
        prefill_done = now + (call.prompt_tokens + cold_tokens) / self.params.prefill_rate
        return inflight, prefill_done

    def prefill_finished(self, call: InFlightCall) -> None:
        call.phase = DECODE
        self.decode_epoch += 1

    def advance_decode(self, to_time: float) -> None:
        """Advance fractional decode progress to `to_time`.

        The caller guarantees batch composition is constant over the
        interval; progress is exact in fractional tokens so consecutive
        segments add up without drift.
        """
        dt = to_time - self.last_advance
        if dt < 0:
            raise ValueError("advance_decode must not move backwards")
        self.last_advance = to_time
        if dt == 0.0:
            return
        b = self.decode_batch_size()
        if b == 0:
            return
        per_call = dt / self.params.token_time(b)
        for call in self.batch:
            if call.phase != DECODE:
                continue
            emitted = min(per_call, call.remaining_tokens)
            call.tokens_emitted += emitted
            self.kv_used += emitted

    def next_completion(self, now: float) -> tuple[InFlightCall, float] | None:
        """Earliest-finishing decode call (ties: lowest request id) and its
        completion time under the current batch size."""
        decoding = [c for c in self.batch if c.phase == DECODE]
        if not decoding:
            return None
        call = min(decoding, key=lambda c: (c.remaining_tokens, c.request_id))
        t = now + call.remaining_tokens * self.params.token_time(len(decoding))
        return call, t

    def complete_call(self, call: InFlightCall) -> None:
        """Release a finished call's tokens and drop it from the batch."""
        snap = call.target_output_tokens - call.tokens_emitted
        call.tokens_emitted = float(call.target_output_tokens)
        self.kv_used += snap
        self.kv_used -= call.prompt_tokens + call.target_output_tokens
        self.kv_reserved -= call.prompt_tokens + call.target_output_tokens
        self.batch.remove(call)
        self.decode_epoch += 1

    def active_stage_calls(self, stage_id: str) -> int:
        return sum(1 for c in self.batch if c.stage_id == stage_id)

    def evict_idle_prefix(self, stage_id: str) -> None:
        """Drop a resident prefix; no-op when absent, error when in use."""
        if self.active_stage_calls(stage_id):
            raise PrefixInUse(f"stage '{stage_id}' has active calls on engine {self.engine_id}")
        prefix = self.resident.pop(stage_id, None)
        if prefix is not None:
            self.kv_used -= prefix.tokens
            self.kv_reserved -= prefix.tokens

    def evictable_prefixes(self, keep_stage: str) -> list[tuple[float, str, int]]:
        """Idle resident prefixes, least recently used first."""
        out = [
            (p.last_used, sid, p.tokens)
            for sid, p in self.resident.items()
            if sid != keep_stage and self.active_stage_calls(sid) == 0
        ]
        out.sort()
        return out

    def recomputed_kv_used(self) -> float:
        return self.resident_prefix_tokens() + sum(
            c.prompt_tokens + c.tokens_emitted for c in self.batch
        )

    def recomputed_kv_reserved(self) -> int:
        return self.resident_prefix_tokens() + sum(
            c.prompt_tokens + c.target_output_tokens for c in self.batch
        )


def tool_service_time(params: ToolPoolParams, rng_stream: RngStream) -> float:
    """One service-time sample from the pool's distribution."""
    return params.service_time_dist.sample(rng_stream.uniform())
