"""Run configuration files.

A config is a JSON key tree; unknown keys are rejected so typos fail fast.
A run config describes one simulation; a compare config carries a shared
base plus named cell overlays (e.g. isolated vs shared topology) that are
swept over seeds.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .dists import Distribution, DistributionError
from .engines import EngineParams
from .errors import ConfigError
from .scheduling import AdmissionConfig, AutoscaleConfig, BorrowConfig
from .simulation import PolicyConfig, SimConfig
from .workflow import (
    LLM,
    TOOL,
    Outcome,
    StageSpec,
    ValidatedWorkflow,
    WorkflowSpec,
    validate_workflow,
)
from .workloads import (
    DEFAULT_ENGINE_PARAMS,
    DEFAULT_TOOL_CONCURRENCY,
    FIXER,
    GENERATOR,
    Nl2SqlParams,
    TopologyPreset,
    build_nl2sql,
    build_topology,
)

_RUN_KEYS = {"workflow", "topology", "policy", "arrivals", "duration", "warmup", "seed", "out_dir"}
_COMPARE_KEYS = {"base", "cells"}
_CELL_KEYS = {"name", "overrides"}
_WORKFLOW_KEYS = {"preset", "params", "inline"}
_NL2SQL_PARAM_KEYS = {
    "p_fail",
    "p_syntax_err",
    "p_empty_result",
    "retry_budget",
    "slo_seconds",
    "generator_prefix_tokens",
    "fixer_prefix_tokens",
    "prompt_tokens",
    "output_tokens",
    "executor_service_time",
}
_INLINE_KEYS = {"name", "entry_stage", "retry_budget", "slo_seconds", "stages"}
_STAGE_KEYS = {
    "stage_id",
    "kind",
    "prefix_tokens",
    "prompt_tokens",
    "output_tokens",
    "service_time",
    "outcomes",
}
_OUTCOME_KEYS = {"label", "prob", "next"}
_TOPOLOGY_KEYS = {
    "preset",
    "mode",
    "llm_engines",
    "llm_engines_total",
    "engine_params",
    "engine_overrides",
    "tool_concurrency",
}
_ENGINE_KEYS = {"kv_capacity_tokens", "prefill_rate", "base_token_time", "batch_slope", "max_batch"}
_POLICY_KEYS = {
    "kind",
    "use_selectivity",
    "online_estimates",
    "ewma_alpha",
    "service_estimates",
    "admission",
    "borrow",
    "autoscale",
}
_ADMISSION_KEYS = {"enabled", "max_queue_len"}
_BORROW_KEYS = {"enabled", "util_low", "util_high", "min_free_kv_tokens"}
_AUTOSCALE_KEYS = {
    "enabled",
    "check_interval",
    "queue_delay_slo",
    "scale_out_threshold",
    "scale_in_threshold",
    "cooldown",
    "min_engines",
    "max_engines",
}
_ARRIVAL_KEYS = {"rate"}

TOPOLOGY_PRESETS = {
    "nl2sql-isolated": {"mode": "isolated", "llm_engines": {GENERATOR: 1, FIXER: 1}},
    "nl2sql-shared": {"mode": "shared", "llm_engines_total": 2},
}


def _require_mapping(obj, path: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"'{path}' must be a mapping")
    return obj


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key '{path}.{unknown[0]}'")


def _dist(obj, path: str) -> Distribution:
    try:
        return Distribution.from_spec(obj)
    except DistributionError as exc:
        raise ConfigError(f"'{path}': {exc}") from exc


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        tree = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return _require_mapping(tree, str(p))


def is_compare_config(tree: dict) -> bool:
    return "cells" in tree


def _parse_workflow(obj, path: str) -> ValidatedWorkflow:
    obj = _require_mapping(obj, path)
    _check_keys(obj, _WORKFLOW_KEYS, path)
    if ("preset" in obj) == ("inline" in obj):
        raise ConfigError(f"'{path}' needs exactly one of 'preset' or 'inline'")
    if "preset" in obj:
        if obj["preset"] != "nl2sql":
            raise ConfigError(f"unknown workflow preset '{obj['preset']}'")
        params_obj = _require_mapping(obj.get("params", {}), f"{path}.params")
        _check_keys(params_obj, _NL2SQL_PARAM_KEYS, f"{path}.params")
        kwargs = dict(params_obj)
        for dist_key in ("prompt_tokens", "output_tokens", "executor_service_time"):
            if dist_key in kwargs:
                kwargs[dist_key] = _dist(kwargs[dist_key], f"{path}.params.{dist_key}")
        if "p_fail" in kwargs and "p_syntax_err" not in kwargs and "p_empty_result" not in kwargs:
            kwargs["p_syntax_err"] = kwargs["p_fail"] / 2.0
            kwargs["p_empty_result"] = kwargs["p_fail"] - kwargs["p_syntax_err"]
        spec = build_nl2sql(Nl2SqlParams(**kwargs))
    else:
        spec = _parse_inline_workflow(obj["inline"], f"{path}.inline")
    return validate_workflow(spec)


def _parse_inline_workflow(obj, path: str) -> WorkflowSpec:
    obj = _require_mapping(obj, path)
    _check_keys(obj, _INLINE_KEYS, path)
    for key in ("name", "entry_stage", "retry_budget", "slo_seconds", "stages"):
        if key not in obj:
            raise ConfigError(f"'{path}' missing '{key}'")
    stages = []
    for i, st in enumerate(obj["stages"]):
        spath = f"{path}.stages[{i}]"
        st = _require_mapping(st, spath)
        _check_keys(st, _STAGE_KEYS, spath)
        outcomes = tuple(
            Outcome(o["label"], float(o["prob"]), o["next"])
            for o in (_checked_outcome(o, f"{spath}.outcomes[{j}]") for j, o in enumerate(st.get("outcomes", ())))
        )
        kind = st.get("kind")
        if kind == LLM:
            stages.append(
                StageSpec(
                    stage_id=st["stage_id"],
                    kind=LLM,
                    prefix_tokens=int(st.get("prefix_tokens", 0)),
                    prompt_tokens_dist=_dist(st.get("prompt_tokens"), f"{spath}.prompt_tokens"),
                    output_tokens_dist=_dist(st.get("output_tokens"), f"{spath}.output_tokens"),
                    outcomes=outcomes,
                )
            )
        elif kind == TOOL:
            stages.append(
                StageSpec(
                    stage_id=st["stage_id"],
                    kind=TOOL,
                    service_time_dist=_dist(st.get("service_time"), f"{spath}.service_time"),
                    outcomes=outcomes,
                )
            )
        else:
            raise ConfigError(f"'{spath}.kind' must be '{LLM}' or '{TOOL}'")
    return WorkflowSpec(
        name=obj["name"],
        stages=tuple(stages),
        entry_stage=obj["entry_stage"],
        retry_budget=int(obj["retry_budget"]),
        slo_seconds=float(obj["slo_seconds"]),
    )


def _checked_outcome(obj, path: str) -> dict:
    obj = _require_mapping(obj, path)
    _check_keys(obj, _OUTCOME_KEYS, path)
    for key in _OUTCOME_KEYS:
        if key not in obj:
            raise ConfigError(f"'{path}' missing '{key}'")
    return obj


def _parse_engine_params(obj, path: str, base: EngineParams) -> EngineParams:
    obj = _require_mapping(obj, path)
    _check_keys(obj, _ENGINE_KEYS, path)
    merged = {
        "kv_capacity_tokens": int(obj.get("kv_capacity_tokens", base.kv_capacity_tokens)),
        "prefill_rate": float(obj.get("prefill_rate", base.prefill_rate)),
        "base_token_time": float(obj.get("base_token_time", base.base_token_time)),
        "batch_slope": float(obj.get("batch_slope", base.batch_slope)),
        "max_batch": int(obj.get("max_batch", base.max_batch)),
    }
    try:
        return EngineParams(**merged)
    except ValueError as exc:
        raise ConfigError(f"'{path}': {exc}") from exc


def _parse_topology(obj, path: str, vw: ValidatedWorkflow):
    obj = _require_mapping(obj, path)
    _check_keys(obj, _TOPOLOGY_KEYS, path)
    if "preset" in obj:
        preset_name = obj["preset"]
        if preset_name not in TOPOLOGY_PRESETS:
            raise ConfigError(f"unknown topology preset '{preset_name}'")
        merged = dict(TOPOLOGY_PRESETS[preset_name])
        merged.update({k: v for k, v in obj.items() if k != "preset"})
        obj = merged
    mode = obj.get("mode")
    if mode not in ("isolated", "shared"):
        raise ConfigError(f"'{path}.mode' must be 'isolated' or 'shared'")
    engine_params = _parse_engine_params(
        obj.get("engine_params", {}), f"{path}.engine_params", DEFAULT_ENGINE_PARAMS
    )
    overrides = {}
    for sid, patch in _require_mapping(obj.get("engine_overrides", {}), f"{path}.engine_overrides").items():
        overrides[sid] = _parse_engine_params(patch, f"{path}.engine_overrides.{sid}", engine_params)
    engines_per_stage = {}
    if mode == "isolated":
        raw = _require_mapping(obj.get("llm_engines", {}), f"{path}.llm_engines")
        engines_per_stage = {sid: int(n) for sid, n in raw.items()}
    total = int(obj.get("llm_engines_total", 0))
    preset = TopologyPreset(
        mode=mode,
        engines_per_stage=engines_per_stage,
        total_engines=total,
        engine_params=engine_params,
        engine_overrides=overrides,
        tool_concurrency=int(obj.get("tool_concurrency", DEFAULT_TOOL_CONCURRENCY)),
    )
    return build_topology(preset, vw)


def _parse_policy(obj, path: str) -> PolicyConfig:
    obj = _require_mapping(obj, path)
    _check_keys(obj, _POLICY_KEYS, path)
    admission_obj = _require_mapping(obj.get("admission", {}), f"{path}.admission")
    _check_keys(admission_obj, _ADMISSION_KEYS, f"{path}.admission")
    borrow_obj = _require_mapping(obj.get("borrow", {}), f"{path}.borrow")
    _check_keys(borrow_obj, _BORROW_KEYS, f"{path}.borrow")
    autoscale_obj = _require_mapping(obj.get("autoscale", {}), f"{path}.autoscale")
    _check_keys(autoscale_obj, _AUTOSCALE_KEYS, f"{path}.autoscale")
    estimates = obj.get("service_estimates")
    if estimates is not None:
        estimates = {str(k): float(v) for k, v in _require_mapping(estimates, f"{path}.service_estimates").items()}
    try:
        return PolicyConfig(
            kind=obj.get("kind", "slack"),
            use_selectivity=bool(obj.get("use_selectivity", False)),
            online_estimates=bool(obj.get("online_estimates", False)),
            ewma_alpha=float(obj.get("ewma_alpha", 0.2)),
            service_estimates=estimates,
            admission=AdmissionConfig(**admission_obj),
            borrow=BorrowConfig(**borrow_obj),
            autoscale=AutoscaleConfig(**autoscale_obj),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{path}': {exc}") from exc


def build_sim_config(tree: dict, seed_override: int | None = None) -> SimConfig:
    """Turn a run-config tree into a validated SimConfig."""
    tree = _require_mapping(tree, "config")
    _check_keys(tree, _RUN_KEYS, "config")
    for key in ("workflow", "topology", "arrivals", "duration"):
        if key not in tree:
            raise ConfigError(f"config missing '{key}'")
    vw = _parse_workflow(tree["workflow"], "workflow")
    topology = _parse_topology(tree["topology"], "topology", vw)
    policy = _parse_policy(tree.get("policy", {}), "policy")
    arrivals = _require_mapping(tree["arrivals"], "arrivals")
    _check_keys(arrivals, _ARRIVAL_KEYS, "arrivals")
    if "rate" not in arrivals:
        raise ConfigError("arrivals missing 'rate'")
    seed = seed_override if seed_override is not None else int(tree.get("seed", 0))
    config = SimConfig(
        workflow=vw,
        topology=topology,
        policy=policy,
        arrival_rate=float(arrivals["rate"]),
        duration=float(tree["duration"]),
        warmup=float(tree.get("warmup", 0.0)),
        seed=seed,
    )
    config.validate()
    return config


def _deep_merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_compare_cells(tree: dict) -> list[tuple[str, dict]]:
    """Expand a compare config into (cell name, run-config tree) pairs."""
    tree = _require_mapping(tree, "config")
    _check_keys(tree, _COMPARE_KEYS, "config")
    base = _require_mapping(tree.get("base", {}), "base")
    cells_obj = tree.get("cells")
    if not isinstance(cells_obj, list) or len(cells_obj) < 2:
        raise ConfigError("compare config needs a 'cells' list with at least two entries")
    cells: list[tuple[str, dict]] = []
    names = set()
    for i, cell in enumerate(cells_obj):
        cell = _require_mapping(cell, f"cells[{i}]")
        _check_keys(cell, _CELL_KEYS, f"cells[{i}]")
        name = cell.get("name")
        if not name or name in names:
            raise ConfigError(f"cells[{i}] needs a unique 'name'")
        names.add(name)
        merged = _deep_merge(base, _require_mapping(cell.get("overrides", {}), f"cells[{i}].overrides"))
        cells.append((name, merged))
    return cells
