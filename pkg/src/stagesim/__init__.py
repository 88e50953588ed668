"""stagesim: scheduling library and deterministic discrete-event simulator
for serving multi-stage agentic LLM workflows on stage-isolated engine pools.
"""

from .dists import Distribution, DistributionError
from .engines import (
    AdmitWithoutCapacity,
    EngineParams,
    EngineState,
    InFlightCall,
    PendingCall,
    PrefixInUse,
    ToolPoolParams,
    tool_service_time,
)
from .errors import ConfigError, InternalInvariantViolation
from .rng import RngStream, stream_uniform
from .scheduling import (
    AdmissionConfig,
    AutoscaleConfig,
    BorrowConfig,
    PriorityKey,
    ServiceEstimator,
    admission_decision,
    autoscale_tick,
    compute_slack,
    make_priority_key,
    route_call,
    select_next,
    should_return_borrowed,
    try_borrow,
)
from .simulation import (
    EmptySamples,
    MetricsReport,
    PolicyConfig,
    RunResult,
    SimConfig,
    Simulator,
    percentile,
    run,
    sample_interarrival,
)
from .workflow import (
    FAILURE,
    LLM,
    SUCCESS,
    TOOL,
    Outcome,
    RequestState,
    StageSpec,
    Transition,
    ValidatedWorkflow,
    WorkflowSpec,
    WorkflowValidationError,
    expected_fixer_invocations,
    expected_remaining_work,
    next_step,
    validate_workflow,
)
from .workloads import (
    BaselinePolicy,
    Nl2SqlParams,
    Topology,
    TopologyPreset,
    baseline_key,
    build_nl2sql,
    build_topology,
    derive_service_estimates,
)

__version__ = "0.1.0"
