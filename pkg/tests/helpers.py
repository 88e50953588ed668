"""Shared builders for the test suite."""

from __future__ import annotations

import stagesim as ss
from stagesim.engines import EngineParams
from stagesim.workloads import (
    EXECUTOR,
    FIXER,
    GENERATOR,
    Nl2SqlParams,
    TopologyPreset,
    build_nl2sql,
    build_topology,
)

STAGES = (GENERATOR, EXECUTOR, FIXER)


def nl2sql_params(p_fail: float = 0.5, **kw) -> Nl2SqlParams:
    kw.setdefault("p_syntax_err", p_fail / 2.0)
    kw.setdefault("p_empty_result", p_fail - kw["p_syntax_err"])
    return Nl2SqlParams(p_fail=p_fail, **kw)


def nl2sql_vw(p_fail: float = 0.5, **kw) -> ss.ValidatedWorkflow:
    return ss.validate_workflow(build_nl2sql(nl2sql_params(p_fail, **kw)))


def engine_params(**kw) -> EngineParams:
    base = dict(
        kv_capacity_tokens=16384,
        prefill_rate=5000.0,
        base_token_time=0.02,
        batch_slope=0.1,
        max_batch=8,
    )
    base.update(kw)
    return EngineParams(**base)


def topology(vw, mode: str = "isolated", engines=(1, 1), params=None, overrides=None, tool_concurrency: int = 4):
    params = params or engine_params()
    if mode == "isolated":
        preset = TopologyPreset(
            mode=mode,
            engines_per_stage={GENERATOR: engines[0], FIXER: engines[1]},
            engine_params=params,
            engine_overrides=overrides or {},
            tool_concurrency=tool_concurrency,
        )
    else:
        preset = TopologyPreset(
            mode=mode,
            total_engines=sum(engines),
            engine_params=params,
            tool_concurrency=tool_concurrency,
        )
    return build_topology(preset, vw)


def sim_config(
    vw=None,
    mode: str = "isolated",
    engines=(1, 1),
    params=None,
    overrides=None,
    policy=None,
    rate: float = 1.0,
    duration: float = 60.0,
    warmup: float = 5.0,
    seed: int = 1,
    tool_concurrency: int = 4,
) -> ss.SimConfig:
    vw = vw or nl2sql_vw()
    return ss.SimConfig(
        workflow=vw,
        topology=topology(vw, mode, engines, params, overrides, tool_concurrency),
        policy=policy or ss.PolicyConfig(),
        arrival_rate=rate,
        duration=duration,
        warmup=warmup,
        seed=seed,
    )


def run_config_tree(**kw) -> dict:
    """A minimal valid run-config JSON tree for CLI tests."""
    tree = {
        "workflow": {"preset": "nl2sql"},
        "topology": {"preset": "nl2sql-isolated"},
        "policy": {"kind": "slack"},
        "arrivals": {"rate": 1.0},
        "duration": 20.0,
        "warmup": 2.0,
        "seed": 7,
    }
    tree.update(kw)
    return tree
